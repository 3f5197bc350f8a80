import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from hpst.events import Event, Hit, View  # noqa: E402
from hpst.model import HyperParams  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def make_event(view0, view1, event_id=0):
    """Build an event from per-view lists of ``(t, z, value, sem, ins)`` tuples."""
    views = []
    for j, hits in enumerate((view0, view1)):
        views.append(View.from_hits(j, [Hit((float(t), float(z)), float(v), int(s), int(p)) for t, z, v, s, p in hits]))
    return Event(event_id, tuple(views))


def toy_event(event_id=0):
    """Six hits, two instances, both views populated."""
    return make_event(
        [(10, 5, 1.0, 1, 0), (11, 6, 1.2, 1, 0), (30, 7, 0.7, 0, 1)],
        [(40, 5, 0.9, 1, 0), (52, 7, 0.8, 0, 1), (53, 8, 1.1, 0, 1)],
        event_id,
    )


def random_event(rng, n0, n1, n_inst=2, n_classes=6, event_id=0):
    """Random valid event with distinct coordinates per view."""
    views = []
    for j, n in enumerate((n0, n1)):
        cells = rng.choice(80 * 100, size=n, replace=False)
        hits = []
        for k, c in enumerate(cells):
            p = k % n_inst if n_inst else 0
            hits.append((c // 100, c % 100, rng.uniform(0.1, 3.0), rng.integers(n_classes), p))
        views.append(hits)
    return make_event(views[0], views[1], event_id)


@pytest.fixture
def tiny_hyper():
    return HyperParams(n=2, m=1, base_dim=4, k_nn=2, base_voxel_size=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
