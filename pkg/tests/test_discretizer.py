import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from newt.discretizer import (DiscretizerSpec, ce_loss, decode, decode_backward, symexp, symlog,
                              two_hot)

SPEC = DiscretizerSpec()


def test_symlog_symexp_are_inverse():
    y = np.linspace(-1e4, 1e4, 20001)
    assert np.max(np.abs(symexp(symlog(y)) - y) / np.maximum(1, np.abs(y))) < 1e-12
    u = np.linspace(-9, 9, 1001)
    assert np.allclose(symlog(symexp(u)), u, atol=1e-12)


def test_spec_validation_and_width():
    assert SPEC.width == pytest.approx(0.2)
    assert SPEC.bin_centers[50] == 0.0
    with pytest.raises(ValueError):
        DiscretizerSpec(num_bins=1)
    with pytest.raises(ValueError):
        DiscretizerSpec(vmin=1.0, vmax=1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_two_hot_is_a_two_point_distribution(y):
    w = two_hot(y, SPEC)
    assert w.shape == (101,)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    nz = np.flatnonzero(w)
    assert len(nz) <= 2 and (len(nz) < 2 or nz[1] == nz[0] + 1)
    expected = np.clip(symlog(y), SPEC.vmin, SPEC.vmax)
    assert w @ SPEC.bin_centers == pytest.approx(expected, abs=1e-9)


def test_two_hot_clamps_out_of_range():
    w = two_hot(np.array([1e9, -1e9]), SPEC)
    assert w[0, -1] == 1.0 and w[1, 0] == 1.0


def test_roundtrip_within_half_bin():
    # decode of logits concentrated on the two-hot target recovers y
    y = np.linspace(-50, 50, 1000)
    w = two_hot(y, SPEC)
    logits = np.log(np.maximum(w, 1e-300))
    back = decode(logits, SPEC)
    assert np.all(np.abs(symlog(back) - symlog(y)) <= SPEC.width / 2)
    assert np.allclose(back, y, rtol=1e-9, atol=1e-9)


def test_ce_loss_gradient_and_validation():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 101))
    target = two_hot(rng.uniform(-5, 5, 3), SPEC)
    loss, grad = ce_loss(logits, target)
    h = 1e-6
    for i, j in [(0, 3), (1, 50), (2, 100)]:
        lp, lm = logits.copy(), logits.copy()
        lp[i, j] += h
        lm[i, j] -= h
        fd = (ce_loss(lp, target)[0][i] - ce_loss(lm, target)[0][i]) / (2 * h)
        assert grad[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)
    with pytest.raises(ValueError):
        ce_loss(logits, target * 0.5)
    with pytest.raises(ValueError):
        ce_loss(logits, target[:, :50])


def test_ce_loss_minimised_by_target():
    target = two_hot(np.array([2.0]), SPEC)
    good = np.log(np.maximum(target, 1e-12))
    bad = np.zeros_like(good)
    assert ce_loss(good, target)[0][0] < ce_loss(bad, target)[0][0]


def test_decode_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    spec = DiscretizerSpec(11, -3, 3)
    logits = rng.normal(size=(4, 11))
    dv = rng.normal(size=4)
    g = decode_backward(dv, logits, spec)
    h = 1e-6
    for i in range(4):
        for j in range(0, 11, 3):
            lp, lm = logits.copy(), logits.copy()
            lp[i, j] += h
            lm[i, j] -= h
            fd = ((decode(lp, spec) - decode(lm, spec)) @ dv) / (2 * h)
            assert g[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_zero_logits_decode_to_zero():
    assert decode(np.zeros((2, 101)), SPEC) == pytest.approx(0.0, abs=1e-12)
