import numpy as np
import pytest

from sgsurf.field import VoxelField
from sgsurf.geometry import Intrinsics, apply_delta, look_at
from sgsurf.optimizer import RayBatch


def make_tiny_scene(seed=0, n_rays=24, n_samples=16, n_keypoints=6):
    """8^3 field, 4 cameras on a 2.5-radius shell, a fixed batch with keypoint pairs."""
    rng = np.random.default_rng(seed)
    field = VoxelField.create(8, inv_std=8.0)
    field.sdf += 0.05 * rng.normal(size=field.sdf.shape)
    field.rgb = rng.uniform(0.2, 0.8, field.rgb.shape)
    intr = Intrinsics(16, 16, 8, 8, 16, 16)
    poses = []
    for _ in range(4):
        c = rng.normal(size=3)
        c[2] = abs(c[2]) + 0.5
        poses.append(apply_delta(look_at(2.5 * c / np.linalg.norm(c)), 0.02 * rng.normal(size=6)))
    src = rng.integers(0, 4, n_keypoints)
    batch = RayBatch(
        rng.integers(0, 4, n_rays), rng.uniform(2, 13, (n_rays, 2)), rng.uniform(0, 1, (n_rays, 3)),
        rng.uniform(size=(n_rays, n_samples)),
        src, rng.uniform(4, 11, (n_keypoints, 2)), (src + 1) % 4, rng.uniform(4, 11, (n_keypoints, 2)),
        rng.uniform(size=(n_keypoints, n_samples)), rng.uniform(size=(n_keypoints, n_samples)), n_samples,
    )
    return field, poses, intr, batch


@pytest.fixture
def tiny_scene():
    return make_tiny_scene()


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(number, name, ok, detail)``."""

    def record(number, name, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _VERDICTS.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
