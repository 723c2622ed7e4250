import numpy as np
import pytest

from mpcc.policy import init_policy
from mpcc.world import SceneFamily, WorldConfig, WorldModel, build_world


def hand_world(families, objects=("a", "b", "c", "d", "e", "f"), cues=None):
    """WorldModel from ``[(combos, combo_probs, target_rows)]`` with explicit tables."""
    cues = cues or tuple(f"c{i}" for i in range(8))
    fams = []
    K = len(objects)
    for f, (combos, cp, rows) in enumerate(families):
        tp = np.zeros((len(combos), K))
        for c, row in enumerate(rows):
            for o, p in row.items():
                tp[c, objects.index(o)] = p
        support = set(np.flatnonzero(tp.sum(axis=0)).tolist())
        fams.append(SceneFamily(f"f{f}", tuple(tuple(c) for c in combos), np.asarray(cp, dtype=float),
                                tp, tuple(o for o in range(K) if o not in support)))
    world = WorldModel(tuple(objects), tuple(cues), ("left", "center", "right"),
                       ("small", "medium", "large"), tuple(fams))
    world.check()
    return world


@pytest.fixture(scope="session")
def world():
    return build_world(WorldConfig(), seed=7)


@pytest.fixture(scope="session")
def small_policy(world):
    """Under 2,000 parameters, random (non-uniform) output layer."""
    p = init_policy(world.vocab, embed_dim=4, hidden_dim=8, context=4, max_len=12, seed=3, uniform=False)
    assert p.layout.size <= 2000
    return p


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
