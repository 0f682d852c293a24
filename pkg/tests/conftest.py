import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from panelctrl.panel import PanelBlocks, PanelData, split_and_center


def make_blocks(rng, n0, t0, n_post=1, center=True, scale=1.0):
    """Random centered blocks with donors drawn iid normal."""
    x0 = rng.normal(size=(n0, t0)) * scale
    x1 = rng.normal(size=t0) * scale
    y0 = rng.normal(size=(n0, n_post)) * scale
    y1 = rng.normal(size=n_post) * scale
    if center:
        shift = x0.mean(axis=0)
        x0 = x0 - shift
        x0 = x0 - x0.mean(axis=0)
        x1 = x1 - shift
    else:
        shift = np.zeros(t0)
    return PanelBlocks(x1=x1, x0=x0, y0_post=y0, y1_post=y1, centering=shift)


def make_panel(rng, n, t, t0, treated_index=0):
    """Random panel with mildly persistent outcome paths."""
    base = rng.normal(size=(n, 1))
    noise = rng.normal(size=(n, t)).cumsum(axis=1) * 0.2
    outcomes = base + noise + rng.normal(size=(n, t)) * 0.1
    return PanelData(
        outcomes=outcomes,
        unit_ids=tuple(f"u{i}" for i in range(n)),
        time_ids=tuple(range(1, t + 1)),
        treated_index=treated_index,
        t0=t0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240612)


__all__ = ["make_blocks", "make_panel", "split_and_center"]
