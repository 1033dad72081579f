import numpy as np
import pytest

from vesseltrack.phantom import Branch, Phantom, PhantomConfig, TreeSpec, rasterize
from vesseltrack.preprocess import threshold_soft_tissue
from vesseltrack.volgrid import Mask


def tube_phantom(radius=5.0, length=60.0, dims=(64, 64, 80), spacing=(1.0, 1.0, 1.0), z0=8.0):
    """Single straight branch along +z, centred in x/y."""
    cfg = PhantomConfig(dims=dims, spacing=spacing, airway_offset=None)
    g = cfg.geometry
    cx = (dims[0] - 1) * spacing[0] / 2.0
    cy = (dims[1] - 1) * spacing[1] / 2.0
    root = Branch((cx, cy, z0), (0.0, 0.0, 1.0), length, radius)
    tree = TreeSpec(root, generations=1)
    for i, b in enumerate(tree.branches()):
        b.id = i
    assert g.dims == tuple(dims)
    return Phantom(tree, cfg)


def tissue_of(phantom):
    vol, labels, lumen = rasterize(phantom)
    return threshold_soft_tissue(vol)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_mask(rng, shape=(32, 32, 32), p=0.5, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Mask(rng.random(shape) < p, spacing, origin)


# Acceptance criteria record one line each here; printed at the end of the run.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
