"""Slow, literal reference implementations used as test oracles.

Each one follows the textbook definition with explicit loops and shares no
code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def km_brute(times, events):
    """Product-limit estimate as (event_times, survival) by looping over subjects."""
    times = [float(t) for t in times]
    events = [int(e) for e in events]
    out_t, out_s = [], []
    s = 1.0
    for u in sorted(set(t for t, e in zip(times, events) if e == 1)):
        n = sum(1 for t in times if t >= u)
        d = sum(1 for t, e in zip(times, events) if t == u and e == 1)
        s *= 1.0 - d / n
        out_t.append(u)
        out_s.append(s)
    return np.array(out_t), np.array(out_s)


def step_eval(xs, ys, t, left=False):
    """Evaluate a step function starting at 1 that jumps to ys[k] at xs[k]."""
    val = 1.0
    for x, y in zip(xs, ys):
        if (x < t) if left else (x <= t):
            val = y
    return val


def censoring_brute(train_t, train_e):
    return km_brute(train_t, [1 - e for e in train_e])


def c_index_brute(risks, train_t, train_e, test_t, test_e, tau=math.inf):
    gx, gy = censoring_brute(train_t, train_e)
    num = den = 0.0
    n = len(test_t)
    for i in range(n):
        if test_e[i] != 1 or test_t[i] > tau:
            continue
        w = 1.0 / step_eval(gx, gy, test_t[i]) ** 2
        for j in range(n):
            if test_t[i] < test_t[j]:
                den += w
                if risks[i] > risks[j]:
                    num += w
                elif risks[i] == risks[j]:
                    num += 0.5 * w
    return num / den


def brier_brute(surv, train_t, train_e, test_t, test_e, t):
    gx, gy = censoring_brute(train_t, train_e)
    total = 0.0
    for s, ti, ei in zip(surv, test_t, test_e):
        if ti <= t and ei == 1:
            total += s**2 / step_eval(gx, gy, ti, left=True)
        elif ti > t:
            total += (1 - s) ** 2 / step_eval(gx, gy, t)
    return total / len(test_t)


def auc_brute(risks, train_t, train_e, test_t, test_e, t):
    gx, gy = censoring_brute(train_t, train_e)
    num = den = 0.0
    for i in range(len(test_t)):
        if not (test_t[i] <= t and test_e[i] == 1):
            continue
        w = 1.0 / step_eval(gx, gy, test_t[i])
        for j in range(len(test_t)):
            if test_t[j] > t:
                den += w
                if risks[i] > risks[j]:
                    num += w
                elif risks[i] == risks[j]:
                    num += 0.5 * w
    return num / den


def monotone_paths(n, m):
    """Every warping path from (0, 0) to (n-1, m-1) with unit steps."""
    def rec(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in rec(a, b):
                    yield [(i, j)] + rest
    yield from rec(0, 0)


def dtw_brute(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=float).T).T if np.ndim(a) == 1 else np.asarray(a, dtype=float)
    b = np.atleast_2d(np.asarray(b, dtype=float).T).T if np.ndim(b) == 1 else np.asarray(b, dtype=float)
    best = math.inf
    for path in monotone_paths(len(a), len(b)):
        cost = sum(math.sqrt(sum((a[i][k] - b[j][k]) ** 2 for k in range(a.shape[1]))) for i, j in path)
        best = min(best, cost)
    return best


def tacl_brute(z, times, s, v, kappa1=2.0, kappa2=30.0, delta=20.0, use_time_mask=True):
    """Triple loop with an explicit set S_ij for every ordered anchor pair."""
    n = len(z)

    def dist_label(i, j):
        return sum(abs(s[i][c] - s[j][c]) for c in range(len(s[i]))) + delta * sum(
            abs(v[i][c] - v[j][c]) for c in range(len(v[i]))
        )

    def sim(i, k):
        return -math.sqrt(sum((z[i][q] - z[k][q]) ** 2 for q in range(len(z[i]))))

    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            s_ij = [k for k in range(n) if k != i and dist_label(i, k) > dist_label(i, j)]
            num = math.exp(sim(i, j) / kappa1)
            den = num + sum(math.exp(sim(i, k) / kappa1) for k in s_ij)
            w = math.exp(-abs(times[i] - times[j]) / kappa2) if use_time_mask else 1.0
            total += -w * math.log(num / den)
    return total / (n * n)


def partial_likelihood_brute(r, times, events):
    terms = []
    for i in range(len(r)):
        if events[i] != 1:
            continue
        denom = sum(math.exp(r[k]) for k in range(len(r)) if times[k] >= times[i])
        terms.append(-(r[i] - math.log(denom)))
    return sum(terms) / len(terms) if terms else 0.0


def ranking_brute(r, times, events):
    total, n_ev = 0.0, 0
    for i in range(len(r)):
        if events[i] != 1:
            continue
        n_ev += 1
        for k in range(len(r)):
            if times[k] >= times[i]:
                total += 1.0 / (1.0 + math.exp(-(r[k] - r[i])))
    return total / n_ev if n_ev else 0.0


def breslow_brute(r, times, events, t):
    lam = 0.0
    for u in sorted(set(ti for ti, e in zip(times, events) if e == 1)):
        if u > t:
            break
        d = sum(1 for ti, e in zip(times, events) if ti == u and e == 1)
        lam += d / sum(math.exp(rk) for rk, tk in zip(r, times) if tk >= u)
    return lam


def forward_fill_brute(values):
    """Row-by-row forward fill; entries before the first observation become 0."""
    out = []
    last = [None] * len(values[0])
    for row in values:
        new = []
        for k, x in enumerate(row):
            if not math.isnan(x):
                last[k] = x
            new.append(0.0 if last[k] is None else last[k])
        out.append(new)
    return np.array(out)


def rank_spearman(x, y):
    """Spearman rho from average ranks, computed with explicit loops."""
    def ranks(a):
        order = sorted(range(len(a)), key=lambda i: a[i])
        r = [0.0] * len(a)
        i = 0
        while i < len(a):
            j = i
            while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2.0
            i = j + 1
        return r

    rx, ry = ranks(list(x)), ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    return cov / math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))


def all_pairs(n):
    return list(itertools.combinations(range(n), 2))
