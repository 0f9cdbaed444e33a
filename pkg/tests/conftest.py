import numpy as np
import pytest
import torch

from sbr import data, train

# Accumulated by the acceptance tests; printed in the terminal summary so the
# per-criterion verdict survives pytest's output capture.
ACCEPTANCE_RESULTS = []


@pytest.fixture
def acceptance_report():
    def report(criterion: int, passed: bool, detail: str) -> None:
        line = (f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - "
                f"{detail}")
        ACCEPTANCE_RESULTS.append((criterion, line))
        print(line)
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_stack():
    """Small fully annotated stack shared by training and evaluation tests."""
    cfg = data.SyntheticConfig(num_slices=10, height=64, width=64, seed=3)
    return data.generate_synthetic_stack(cfg)


@pytest.fixture(scope="session")
def tiny_stack_dir(tiny_stack, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_stack")
    data.save_stack(tiny_stack, out)
    return out


@pytest.fixture(scope="session")
def tiny_reg_payload(tiny_stack, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_reg")
    cfg = train.TrainConfig(stage="reg", epochs=4, seed=0, checkpoint_every=1000)
    return train.train_registration(tiny_stack, cfg, out)


@pytest.fixture(scope="session")
def tiny_sbr_payload(tiny_stack, tiny_reg_payload, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_sbr")
    cfg = train.TrainConfig(stage="sbr", epochs=2, seed=0, checkpoint_every=1000)
    return train.train_sbr(tiny_stack, tiny_reg_payload, cfg, out)


@pytest.fixture(scope="session")
def tiny_reg_checkpoint(tiny_reg_payload, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt_reg") / "reg.pt"
    torch.save(tiny_reg_payload, path)
    return path


@pytest.fixture(scope="session")
def tiny_sbr_checkpoint(tiny_sbr_payload, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt_sbr") / "sbr.pt"
    torch.save(tiny_sbr_payload, path)
    return path


@pytest.fixture
def no_aug():
    """Augmentation config whose every bound is zero: exact identity fields."""
    return data.AugmentationConfig(max_rotation=0.0, max_scale_dev=0.0,
                                   max_shift=0.0, nonlinear_sigma=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def smooth_image(seed: int, height: int = 32, width: int = 32) -> torch.Tensor:
    """Deterministic smooth test image with full [0, 1] range."""
    from scipy.ndimage import gaussian_filter

    g = np.random.default_rng(seed)
    img = gaussian_filter(g.random((height, width)), 2.0)
    img = img - img.min()
    return torch.from_numpy((img / img.max()).astype(np.float32))
