import math

import numpy as np
import pytest

from cdesurv import tensor as T
from cdesurv.tacl import (
    SeveritySeries,
    label_distance,
    label_distance_matrix,
    severity_trend,
    tacl_loss,
    time_mask,
    total_loss,
)
from cdesurv.tensor import Tensor

from conftest import numeric_grad, rel_err
from oracles import tacl_brute


def random_anchors(rng, n, dz=3, c=3, integer_labels=False):
    z = rng.normal(size=(n, dz))
    t = rng.uniform(0, 36, size=n)
    if integer_labels:
        s = rng.integers(0, 3, size=(n, c)).astype(float)
        v = rng.integers(-1, 2, size=(n, c)) * 0.5
    else:
        s = rng.uniform(0, 4, size=(n, c))
        v = rng.normal(0, 0.1, size=(n, c))
    return z, t, s, v


# -- trend --------------------------------------------------------------------

def test_trend_constant_is_zero():
    np.testing.assert_array_equal(severity_trend(np.full(10, 2.5)), np.zeros(10))


def test_trend_linear():
    s = 3.0 * np.arange(12)
    np.testing.assert_allclose(severity_trend(s, 2), 3.0, atol=1e-12)


def test_trend_matches_formula(rng):
    s = rng.normal(size=(15, 4))
    v = severity_trend(s, 2)
    for t in range(15):
        if 2 <= t <= 12:
            want = (s[t + 2] - s[t - 2]) / 4
        elif t < 2:
            want = (s[t + 2] - s[t]) / 2
        else:
            want = (s[t] - s[t - 2]) / 2
        np.testing.assert_allclose(v[t], want, atol=1e-14)


def test_trend_short_series():
    np.testing.assert_array_equal(severity_trend([1.0]), [0.0])
    np.testing.assert_allclose(severity_trend([1.0, 3.0, 4.0], 2), [1.5, 1.5, 1.5])
    with pytest.raises(ValueError):
        severity_trend([1.0, 2.0], 0)


def test_series_nearest_hour():
    ser = SeveritySeries(np.arange(4.0), np.arange(4.0)[:, None], np.zeros((4, 1)))
    s, _ = ser.at([0.2, 1.6, 2.5, 9.0])
    np.testing.assert_array_equal(s[:, 0], [0.0, 2.0, 3.0, 3.0])


# -- label distance and mask --------------------------------------------------

def test_label_distance_cases(rng):
    a = rng.uniform(size=7)
    assert label_distance(a, a, a, a) == 0.0
    e = np.zeros(7)
    e[0] = 1.0
    assert label_distance(e, np.zeros(7), np.zeros(7), np.zeros(7), delta=20) == 1.0
    sa, va, sb, vb = rng.normal(size=(4, 7))
    naive = sum(abs(sa[c] - sb[c]) for c in range(7)) + 20 * sum(abs(va[c] - vb[c]) for c in range(7))
    assert label_distance(sa, va, sb, vb) == pytest.approx(naive, rel=1e-14)
    m = label_distance_matrix(np.stack([sa, sb]), np.stack([va, vb]))
    assert m[0, 1] == pytest.approx(naive, rel=1e-14) and m[1, 0] == m[0, 1]


def test_time_mask():
    assert time_mask(3.0, 3.0) == 1.0
    assert time_mask(0.0, 30.0, 30.0) == pytest.approx(0.36787944117144233, rel=1e-15)
    vals = time_mask(0.0, np.linspace(0, 50, 20))
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(ValueError):
        time_mask(0.0, 1.0, 0.0)


# -- loss ---------------------------------------------------------------------

def test_tacl_two_equal_labels_zero(rng):
    z = rng.normal(size=(2, 3))
    s = np.ones((2, 2))
    v = np.zeros((2, 2))
    assert float(tacl_loss(Tensor(z), [0.0, 5.0], s, v).data) == pytest.approx(0.0, abs=1e-15)


def test_tacl_hand_case():
    # equal similarities, d(1,2)=1 and d(1,3)=5; the (1,2) term is log 2
    z = np.zeros((3, 2))
    s = np.array([[0.0], [1.0], [5.0]])
    v = np.zeros((3, 1))
    # isolate the (1,2) term: weight only through the unmasked loss minus the others
    total = float(tacl_loss(Tensor(z), np.zeros(3), s, v, use_time_mask=False).data) * 9
    # term (1,3): S empty -> 0. row 2: d(2,1)=1 < d(2,3)=4: (2,1) log 2, (2,3) 0.
    # row 3: d(3,1)=5 > d(3,2)=4: (3,2) log 2, (3,1) 0.
    assert total == pytest.approx(3 * math.log(2), abs=1e-12)
    assert float(tacl_brute(z, np.zeros(3), s, v, use_time_mask=False)) * 9 == pytest.approx(3 * math.log(2))


@pytest.mark.parametrize("integer_labels", [False, True])
@pytest.mark.parametrize("masked", [True, False])
def test_tacl_matches_brute(rng, integer_labels, masked):
    z, t, s, v = random_anchors(rng, 6, integer_labels=integer_labels)
    got = float(tacl_loss(Tensor(z), t, s, v, use_time_mask=masked).data)
    assert got == pytest.approx(tacl_brute(z, t, s, v, use_time_mask=masked), rel=1e-12)


def test_tacl_nonnegative_and_permutation_invariant(rng):
    z, t, s, v = random_anchors(rng, 9, integer_labels=True)
    a = float(tacl_loss(Tensor(z), t, s, v).data)
    perm = rng.permutation(9)
    b = float(tacl_loss(Tensor(z[perm]), t[perm], s[perm], v[perm]).data)
    assert a >= 0 and a == pytest.approx(b, rel=1e-12)


def test_tacl_large_kappa2_recovers_unmasked(rng):
    z, t, s, v = random_anchors(rng, 7)
    a = float(tacl_loss(Tensor(z), t, s, v, kappa2=1e15).data)
    b = float(tacl_loss(Tensor(z), t, s, v, use_time_mask=False).data)
    assert abs(a - b) < 1e-9


def test_tacl_monotone_pull(rng):
    z, t, s, v = random_anchors(rng, 5)
    d = label_distance_matrix(s, v)
    np.fill_diagonal(d, np.inf)
    i = 0
    j = int(np.argmin(d[i]))

    def term(zz):
        sim = -np.linalg.norm(zz[i] - zz, axis=1) / 2.0
        harder = [k for k in range(5) if k != i and d[i, k] > d[i, j]]
        return -(sim[j] - np.log(np.exp(sim[j]) + np.exp(sim[harder]).sum()))

    prev = term(z)
    for lam in np.linspace(0.1, 1.0, 10):
        zz = z.copy()
        zz[j] = z[j] + lam * (z[i] - z[j])
        cur = term(zz)
        assert cur <= prev + 1e-12
        prev = cur


def test_tacl_single_anchor_warns():
    with pytest.warns(UserWarning):
        assert float(tacl_loss(Tensor(np.zeros((1, 2))), [0.0], [[1.0]], [[0.0]]).data) == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_tacl_gradient(seed):
    rng = np.random.default_rng(seed)
    z, t, s, v = random_anchors(rng, 4)
    leaf = Tensor(z.copy(), requires_grad=True)
    T.backward(tacl_loss(leaf, t, s, v))

    def value():
        with T.no_grad():
            return float(tacl_loss(Tensor(leaf.data), t, s, v).data)

    assert rel_err(leaf.grad, numeric_grad(value, leaf.data)) < 1e-4


def test_tacl_gradient_with_ties(rng):
    z, t, s, v = random_anchors(rng, 6, integer_labels=True)
    leaf = Tensor(z.copy(), requires_grad=True)
    T.backward(tacl_loss(leaf, t, s, v))

    def value():
        with T.no_grad():
            return float(tacl_loss(Tensor(leaf.data), t, s, v).data)

    assert rel_err(leaf.grad, numeric_grad(value, leaf.data)) < 1e-4


def test_total_loss():
    assert total_loss(1.0, 2.0, 1.0) == 3.0
    assert total_loss(1.5, 9.0, 0.0) == 1.5
    out = total_loss(Tensor(1.0), Tensor(2.0), 0.5)
    assert float(out.data) == 2.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -1.0)
