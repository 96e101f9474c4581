import math

import numpy as np
import pytest

from fusionpaint.fusion import init_params
from fusionpaint.geometry import CameraCalib, PointCloud
from fusionpaint.neuralcore import BN_EPS
from fusionpaint.painting import one_hot
from fusionpaint.voxelgrid import VoxelConfig, voxelize


def random_calib(rng, width=64, height=48):
    """A valid calibration with a random proper rotation and translation."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = rng.normal(scale=2.0, size=3)
    return CameraCalib(fx=rng.uniform(20, 200), fy=rng.uniform(20, 200), cx=rng.uniform(0, width),
                       cy=rng.uniform(0, height), width=width, height=height, extrinsic=ext)


def random_batch(rng, n=60, m=3, extent=2.0, max_points=4, voxel=0.5):
    """Voxelise a random cloud with random one-hot 2D and 3D labels."""
    xyz = rng.uniform(-extent, extent, size=(n, 3))
    p2d = one_hot(rng.integers(0, m, n), m)
    p3d = one_hot(rng.integers(0, m, n), m)
    cfg = VoxelConfig(size=(voxel, voxel, 2 * extent), range_min=(-extent, -extent, -extent),
                      range_max=(extent, extent, extent), max_points=max_points,
                      seed=int(rng.integers(1 << 30)))
    return voxelize(PointCloud(xyz), p2d, p3d, cfg)


def small_params(rng, m=3, c1=6, c2=5, hidden=4, dtype=np.float64):
    """A small network with random weights, biases and batch-norm statistics."""
    params = init_params(m, c1, c2, seed=int(rng.integers(1 << 30)), dtype=dtype, hidden=hidden)
    for arr in params.tensors().values():
        arr += rng.normal(0, 0.3, size=arr.shape)
    for name, arr in params.buffers().items():
        if name.endswith("running_mean"):
            arr[...] = rng.normal(0, 0.5, size=arr.shape)
        elif name.endswith("running_var"):
            arr[...] = rng.uniform(0.5, 2.0, size=arr.shape)
    return params


def scalar_mlp(layers, row):
    """Row-at-a-time eval-mode MLP in plain Python floats."""
    h = [float(v) for v in row]
    for layer in layers:
        out = []
        for o in range(layer.out_dim):
            y = float(layer.bias[o]) + sum(float(layer.weight[o, i]) * h[i] for i in range(len(h)))
            if layer.bn is not None:
                y = (y - float(layer.bn.running_mean[o])) / math.sqrt(float(layer.bn.running_var[o]) + BN_EPS)
                y = float(layer.bn.gamma[o]) * y + float(layer.bn.beta[o])
            if layer.activation:
                y = max(0.0, y)
            out.append(y)
        h = out
    return h


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
