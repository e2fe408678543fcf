import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iai import losses
from iai.losses import CE_PARAMS, FocalParams
from oracles import central_difference, rel_error

N = 20


def two_class(p, n=N + 1, target=0):
    probs = np.full(n, (1.0 - p) / (n - 1))
    probs[target] = p
    return probs


def test_focal_examples():
    assert losses.focal_id_loss(two_class(1.0), 0) == 0.0
    p = two_class(0.3)
    assert losses.focal_id_loss(p, 0, CE_PARAMS) == -np.log(0.3)
    assert abs(losses.focal_id_loss(p, 0) - 0.25 * 0.49 * -np.log(0.3)) < 1e-15
    assert abs(losses.focal_id_loss(p, 0) - 0.147486) < 1e-6


def test_ce_examples():
    assert losses.ce_id_loss(two_class(1.0), 0) == 0.0
    assert abs(losses.ce_id_loss(two_class(0.5), 0) - 0.693147) < 1e-6


def test_ce_is_focal_reduction():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.dirichlet(np.ones(N + 1))
        t = int(rng.integers(N + 1))
        assert losses.ce_id_loss(p, t) == losses.focal_id_loss(p, t, FocalParams(1.0, 0.0))


def test_focal_monotone_and_nonnegative():
    grid = np.linspace(0.01, 1.0, 100)
    vals = [losses.focal_id_loss(two_class(p), 0) for p in grid]
    assert all(v >= 0 for v in vals)
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 0.0


def test_grad_at_minimum_vanishes():
    z = np.zeros(N + 1)
    z[3] = 30.0
    assert np.linalg.norm(losses.focal_id_grad(z, 3)) <= 1e-8


def test_ce_grad_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    z = rng.standard_normal(N + 1)
    onehot = np.eye(N + 1)[5]
    assert np.allclose(losses.focal_id_grad(z, 5, CE_PARAMS), losses.softmax(z) - onehot,
                       atol=1e-15)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(100):
        z = rng.standard_normal(N + 1)
        t = int(rng.integers(N + 1))
        fd = central_difference(lambda x: losses.focal_id_loss(losses.softmax(x), t), z)
        assert rel_error(losses.focal_id_grad(z, t), fd) <= 1e-6


def test_param_validation():
    with pytest.raises(ValueError):
        FocalParams(alpha=0.0)
    with pytest.raises(ValueError):
        FocalParams(lam=-1.0)
    with pytest.raises(ValueError):
        losses.focal_id_loss(two_class(0.5), N + 1)


def test_total_loss():
    assert losses.total_loss(0, 0) == 0
    assert losses.total_loss(0.5, 0.25) == 0.75
    rng = np.random.default_rng(3)
    for a, b in rng.random((20, 2)):
        assert losses.total_loss(a, b) == a + b


def test_assign_gt_ids_examples():
    lab = losses.assign_gt_ids([["a"]] * 5, N)
    assert lab.label_sequence("a") == [N - 1, 0, 0, 0, 0]
    lab = losses.assign_gt_ids([[], [], ["x"], ["x"], ["x"]], N)
    assert lab.label_sequence("x") == [None, None, N - 1, 0, 0]
    lab = losses.assign_gt_ids([["p", "q"], ["p", "q"]], N)
    assert lab.ids == {"p": 0, "q": 1}
    assert lab.frames[0] == {"p": N - 1, "q": N - 1}


def test_assign_gt_ids_capacity():
    with pytest.raises(ValueError):
        losses.assign_gt_ids([list(range(N))], N)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 10), max_size=5, unique=True), min_size=1, max_size=6))
def test_assign_gt_ids_invariants(frames):
    lab = losses.assign_gt_ids(frames, N)
    for ident in lab.ids:
        seq = [x for x in lab.label_sequence(ident) if x is not None]
        assert seq.count(N - 1) == 1 and seq[0] == N - 1
        assert all(0 <= x <= N - 2 for x in seq[1:])
