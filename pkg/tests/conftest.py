"""Shared fixtures and the acceptance-criteria reporter.

Fixtures come in two tiers. The "mini" tier (4-class toy set, a briefly
trained teacher, a small condensed set and archive) builds in seconds and
backs the per-module tests. The full tier (10-class set, 20-epoch teacher,
IPC-10 recovery at 500 iterations, 100-epoch archive) is what the
acceptance suite exercises; it is lazy and session-scoped, so running a
single module file never pays for it.
"""

import pytest
import torch

from condenser.config import (
    ContinualSettings,
    EvalSettings,
    ExperimentConfig,
    RelabelSettings,
)
from condenser.data import load_dataset, make_toy_dataset
from condenser.evaluate import EvalConfig, train_student
from condenser.models import BackboneSpec
from condenser.recover import RecoverConfig, recover
from condenser.relabel import relabel
from condenser.squeeze import SqueezeConfig, squeeze_train


def small_experiment_config(name, data_root, output_root, seed=0,
                            stages=("squeeze", "recover", "relabel", "eval", "continual"),
                            **overrides):
    """A five-stage experiment sized to finish in seconds on the toy sets."""
    cfg = ExperimentConfig(
        name=name,
        dataset="toy",
        data_root=str(data_root),
        resolution=32,
        output_root=str(output_root),
        seed=seed,
        stages=tuple(stages),
        squeeze=SqueezeConfig(lr=0.05, momentum=0.9, weight_decay=5e-4,
                              batch_size=64, epochs=3, seed=seed),
        recover=RecoverConfig(ipc=2, iterations=12, batch_size=8, lr=0.1,
                              alpha_bn=1.0, seed=seed),
        relabel=RelabelSettings(tau=20.0, epochs=4, precision="float32"),
        eval=EvalSettings(epochs=4, lr=0.05, batch_size=8),
        continual=ContinualSettings(steps=2, epochs=2),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg

# criterion number -> (name, passed, detail); printed after the test run
ACCEPTANCE_RESULTS = {}


def record_criterion(num: int, name: str, passed: bool, detail: str = ""):
    ACCEPTANCE_RESULTS[num] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        name, passed, detail = ACCEPTANCE_RESULTS[num]
        verdict = "PASS" if passed else "FAIL"
        line = f"criterion {num:2d}: {verdict}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


# ---------------------------------------------------------------- mini tier


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory):
    return make_toy_dataset(
        tmp_path_factory.mktemp("toy4"),
        num_classes=4, train_per_class=25, val_per_class=8, resolution=32, seed=1,
    )


@pytest.fixture(scope="session")
def mini_train(mini_root):
    return load_dataset(mini_root, "toy", "train")


@pytest.fixture(scope="session")
def mini_val(mini_root):
    return load_dataset(mini_root, "toy", "val")


@pytest.fixture(scope="session")
def mini_teacher(mini_train, mini_val):
    cfg = SqueezeConfig(
        optimizer="sgd", lr=0.05, momentum=0.9, weight_decay=5e-4,
        batch_size=64, epochs=6, seed=0,
    )
    spec = BackboneSpec(arch_id="convnet4", input_resolution=32, num_classes=4)
    return squeeze_train(mini_train, mini_val, spec, cfg)


@pytest.fixture(scope="session")
def mini_condensed(mini_teacher):
    cfg = RecoverConfig(ipc=2, iterations=30, batch_size=8, lr=0.1, alpha_bn=1.0, seed=0)
    return recover(mini_teacher, cfg)


@pytest.fixture(scope="session")
def mini_archive(mini_condensed, mini_teacher):
    return relabel(mini_condensed, mini_teacher, tau=20.0, epochs=6, seed=0)


# ---------------------------------------------------------------- full tier


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return make_toy_dataset(
        tmp_path_factory.mktemp("toy10"),
        num_classes=10, train_per_class=100, val_per_class=20, resolution=32, seed=0,
    )


@pytest.fixture(scope="session")
def toy_train(toy_root):
    return load_dataset(toy_root, "toy", "train")


@pytest.fixture(scope="session")
def toy_val(toy_root):
    return load_dataset(toy_root, "toy", "val")


@pytest.fixture(scope="session")
def teacher(toy_train, toy_val):
    # 20 epochs is plenty: the gratings separate long before that.
    cfg = SqueezeConfig(
        optimizer="sgd", lr=0.05, momentum=0.9, weight_decay=5e-4,
        batch_size=128, epochs=20, augmentations=("random_resized_crop",), seed=0,
    )
    spec = BackboneSpec(arch_id="convnet4", input_resolution=32, num_classes=10)
    return squeeze_train(toy_train, toy_val, spec, cfg)


@pytest.fixture(scope="session")
def condensed_500(teacher):
    cfg = RecoverConfig(
        ipc=10, iterations=500, batch_size=100, lr=0.1, alpha_bn=1.0, seed=0
    )
    return recover(teacher, cfg)


@pytest.fixture(scope="session")
def archive_100(condensed_500, teacher):
    return relabel(condensed_500, teacher, tau=20.0, epochs=100, seed=0)


@pytest.fixture(scope="session")
def student_cfg_factory():
    def make(epochs: int = 100, seed: int = 0, num_classes: int = 10) -> EvalConfig:
        return EvalConfig(
            student=BackboneSpec("convnet4", 32, num_classes),
            epochs=epochs, optimizer="sgd", lr=0.05, momentum=0.9,
            weight_decay=1e-4, batch_size=64, seed=seed,
        )

    return make


@pytest.fixture(scope="session")
def student_result(condensed_500, archive_100, student_cfg_factory, toy_val):
    cfg = student_cfg_factory(epochs=100, seed=0)
    return train_student(condensed_500, archive_100, cfg, val=toy_val)
