import io

import numpy as np
import pytest
import torch
from PIL import Image

from clickforge import netcore, raster, trainer


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed"):
        for report in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" in report.nodeid:
                lines.append((report.nodeid.split("::")[-1], outcome))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, outcome in sorted(lines):
            terminalreporter.write_line(
                f"[{'PASS' if outcome == 'passed' else 'FAIL'}] {name}")


def mask_elongation(mask):
    """sqrt of the covariance eigenvalue ratio of the foreground pixels."""
    rows, cols = np.nonzero(mask)
    cov = np.cov(np.stack([rows, cols]))
    eig = np.sort(np.linalg.eigvalsh(cov))
    return float(np.sqrt(eig[1] / max(eig[0], 1e-9)))


def png_bytes(arr, mode):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def image_png(image: raster.RasterImage) -> bytes:
    return png_bytes(np.round(image.data * 255).astype(np.uint8), "RGB")


def mask_png(mask: raster.Mask) -> bytes:
    return png_bytes((mask.data * 255).astype(np.uint8), "L")


@pytest.fixture(scope="session")
def small_dataset():
    spec = raster.DomainSpec("source", height=32, width=32, seed=21)
    return raster.generate_dataset(spec, 48)


@pytest.fixture(scope="session")
def mini_ckpt(small_dataset):
    """A briefly trained desk model at 32x32, shared across service tests."""
    cfg = trainer.TrainConfig(epochs=14, batch_size=8, optimizer="adam",
                              lr_bsm=1e-3, lr_adm=1e-3, seed=0)
    params = trainer.train_bsm(small_dataset, cfg)
    return trainer.train_adm(small_dataset, params, cfg)


@pytest.fixture()
def rand_params():
    return netcore.init_params(netcore.ModelConfig(), seed=7)


@pytest.fixture()
def rand_params64():
    return netcore.init_params(netcore.ModelConfig(), seed=7).astype(torch.float64)
