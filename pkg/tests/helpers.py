"""Shared test utilities: independent oracles and random model factories.

The reference implementations here deliberately avoid the library's own
code paths (per-sample loops instead of bitsets, arbitrary-precision tail
sums instead of log-domain float arithmetic) so they can serve as oracles.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np

from birdnet.binarize import BinaryMatrix, pack_column
from birdnet.mining import Implication, MiningConfig
from birdnet.network import (
    BirNetwork,
    DenseHead,
    DenseLinear,
    build_bir_layer,
)
from birdnet.trainer import cross_entropy

TYPES = ("T0", "T1", "T2", "T3", "T4", "T5")


def bmat_from_bools(B: np.ndarray) -> BinaryMatrix:
    B = np.asarray(B, dtype=bool)
    n, d = B.shape
    bits = np.stack([pack_column(B[:, j]) for j in range(d)])
    return BinaryMatrix(bits=bits, n=n, d=d)


# ---------------------------------------------------------------------------
# Arbitrary-precision binomial lower tail
# ---------------------------------------------------------------------------


def _mp_pmfs(n: int, p: float) -> list:
    pp = mpmath.mpf(p)
    q = 1 - pp
    pmf = q**n  # j = 0
    out = [pmf]
    for j in range(1, n + 1):
        pmf = pmf * (n - j + 1) / j * pp / q
        out.append(pmf)
    return out


def _mp_ln_one_minus(S):
    """ln(1 - S) for S in [0, 1) by the power series, avoiding the near-1
    cancellation that direct summation of the lower-tail pmf would suffer."""
    if S == 0:
        return mpmath.mpf(0)
    acc = mpmath.mpf(0)
    power = S
    m = 1
    while True:
        t = power / m
        acc += t
        if t < acc * mpmath.mpf(10) ** (-45):
            break
        power *= S
        m += 1
    return -acc


def mp_log_lower_tail(k: int, n: int, p: float) -> float:
    """ln P(K <= k), accurate to ~45 significant digits, rounded to double.

    The smaller tail is summed directly: the lower tail when its mass is
    below 1/2, otherwise the upper tail followed by a log(1 - S) series."""
    with mpmath.workdps(60):
        pmfs = _mp_pmfs(n, p)
        lower = sum(pmfs[: k + 1])
        if lower <= mpmath.mpf("0.5"):
            return float(mpmath.log(lower))
        return float(_mp_ln_one_minus(sum(pmfs[k + 1 :])))


def mp_log_lower_tail_curve(n: int, p: float) -> np.ndarray:
    """ln P(K <= k) for all k in 0..n (same branch rule as the scalar)."""
    out = np.empty(n + 1)
    with mpmath.workdps(60):
        pmfs = _mp_pmfs(n, p)
        half = mpmath.mpf("0.5")
        lower = mpmath.mpf(0)
        upper_suffix = [mpmath.mpf(0)] * (n + 2)
        for j in range(n, -1, -1):
            upper_suffix[j] = upper_suffix[j + 1] + pmfs[j]
        for k in range(n + 1):
            lower += pmfs[k]
            if lower <= half:
                out[k] = float(mpmath.log(lower))
            else:
                out[k] = float(_mp_ln_one_minus(upper_suffix[k + 1]))
    return out


# ---------------------------------------------------------------------------
# Naive reference miner (per-sample loops, mpmath tails)
# ---------------------------------------------------------------------------


def _naive_directional(a, b, n, cfg, ia, ib):
    """T0..T3 assertions for the ordered pair (a, b) of boolean lists."""
    n11 = n10 = n01 = n00 = 0
    for x, y in zip(a, b):
        if x and y:
            n11 += 1
        elif x and not y:
            n10 += 1
        elif not x and y:
            n01 += 1
        else:
            n00 += 1
    n1a, n1b = n11 + n10, n11 + n01
    if n1a in (0, n) or n1b in (0, n):
        return []

    def clamp(c):
        lo = 1.0 / (2.0 * n)
        return min(max(c / n, lo), 1.0 - lo)

    p1a, p0a = clamp(n1a), clamp(n - n1a)
    p1b, p0b = clamp(n1b), clamp(n - n1b)
    cases = [
        ("T0", n10, n1a, p1a * p0b),
        ("T1", n01, n - n1a, p0a * p1b),
        ("T2", n11, n1a, p1a * p1b),
        ("T3", n00, n - n1a, p0a * p0b),
    ]
    out = []
    for btype, k, supp, p0 in cases:
        if supp < cfg.min_support or k / supp > cfg.pi:
            continue
        log_p = mp_log_lower_tail(k, n, p0)
        if log_p <= math.log(cfg.p_star):
            out.append((ia, ib, btype, log_p, k, k / supp, supp))
    return out


def naive_mine(B: np.ndarray, cfg: MiningConfig):
    """Edge list as tuples (source, target, type, log_p, exc, frac, supp),
    with the symmetric T4/T5 merge: T4 needs T0 and T1 asserted in both
    orientations, T5 needs T2 and T3; merged constituents are removed,
    merged log_p is the max of the forward pair, exceptions pool over n."""
    B = np.asarray(B, dtype=bool)
    n, d = B.shape
    edges = []
    for i in range(d - 1):
        for j in range(i + 1, d):
            a, b = list(B[:, i]), list(B[:, j])
            fwd = _naive_directional(a, b, n, cfg, i, j)
            rev = _naive_directional(b, a, n, cfg, j, i)
            ft = {e[2]: e for e in fwd}
            rt = {e[2]: e for e in rev}
            merged, dropped = [], set()
            for t4, c1, c2 in (("T4", "T0", "T1"), ("T5", "T2", "T3")):
                if c1 in ft and c2 in ft and c1 in rt and c2 in rt:
                    exc = ft[c1][4] + ft[c2][4]
                    merged.append(
                        (i, j, t4, max(ft[c1][3], ft[c2][3]), exc, exc / n, n)
                    )
                    dropped |= {c1, c2}
            merged.extend(e for e in fwd if e[2] not in dropped)
            merged.extend(e for e in rev if e[2] not in dropped)
            edges.extend(merged)
    return edges


def imps_to_tuples(edges: list[Implication]):
    return [
        (e.source, e.target, e.btype, e.log_p, e.exceptions, e.exception_fraction,
         e.antecedent_support)
        for e in edges
    ]


def assert_edges_match(got, want, log_rel=1e-9):
    """Compare edge lists order-independently; log_p to relative tolerance."""
    key = lambda t: (t[0], t[1], t[2])
    got = sorted(got, key=key)
    want = sorted(want, key=key)
    assert [t[:3] for t in got] == [t[:3] for t in want]
    for g, w in zip(got, want):
        assert g[4] == w[4] and g[6] == w[6], (g, w)
        assert g[5] == w[5] or abs(g[5] - w[5]) <= 1e-12, (g, w)
        assert g[3] == w[3] or abs(g[3] - w[3]) <= log_rel * abs(w[3]), (g, w)


# ---------------------------------------------------------------------------
# Random networks and synthetic data
# ---------------------------------------------------------------------------


def random_pair_net(
    rng: np.random.Generator,
    d: int = 6,
    widths: tuple[int, ...] = (5, 4),
    k: int = 3,
    head_hidden: int | None = None,
    randomize: bool = True,
) -> BirNetwork:
    """A random implication-masked network with (optionally) randomized
    biases and BatchNorm parameters, so no unit sits exactly on a ReLU kink."""
    blocks = []
    names = [f"f{i}" for i in range(d)]
    feature_names = list(names)
    in_dim = d
    for li, h in enumerate(widths):
        spec = []
        for _ in range(h):
            i, j = rng.choice(in_dim, size=2, replace=False)
            t = TYPES[int(rng.integers(len(TYPES)))]
            spec.append(Implication(int(i), int(j), t, -20.0, 0, 0.0, 10))
        blk = build_bir_layer(spec, in_dim, rng, input_names=names, layer_index=li,
                              dropout=0.0)
        if randomize:
            blk.linear.bias += rng.standard_normal(h) * 0.3
            blk.bn.gamma = rng.uniform(0.5, 1.5, h)
            blk.bn.beta = rng.standard_normal(h) * 0.3
            blk.bn.set_stats(rng.standard_normal(h) * 0.2, rng.uniform(0.5, 2.0, h))
        blocks.append(blk)
        in_dim = h
        names = blk.unit_names
    layers = []
    if head_hidden:
        layers.append(DenseLinear.init(in_dim, head_hidden, rng))
        in_dim = head_hidden
    layers.append(DenseLinear.init(in_dim, k, rng))
    if randomize:
        for lay in layers:
            lay.b += rng.standard_normal(lay.out_dim) * 0.3
    return BirNetwork(d, feature_names, blocks, DenseHead(layers=layers),
                      [f"c{c}" for c in range(k)])


def min_kink_gap(net: BirNetwork, X: np.ndarray) -> float:
    """Smallest |pre-ReLU activation| anywhere in a frozen forward pass.

    Central differences are only valid away from the ReLU kinks, so gradient
    checks require this gap to be comfortably larger than the step."""
    _, cache = net.forward(X, mode="frozen")
    gap = math.inf
    for blk, (xhat, _, _) in zip(net.blocks, cache["bn"]):
        y = blk.bn.gamma * xhat + blk.bn.beta
        gap = min(gap, float(np.abs(y).min()))
    for i, lay in enumerate(net.head.layers[:-1]):
        z = cache["head_in"][i] @ lay.W.T + lay.b
        gap = min(gap, float(np.abs(z).min()))
    return gap


def min_carried_denominator(net: BirNetwork, x: np.ndarray) -> float:
    """Smallest |input-contribution sum| over units that are active on x.

    A unit that is active purely through its bias/BatchNorm offset (all input
    contributions ~0) absorbs its relevance into the bias under the epsilon
    rule; conservation checks must filter such degenerate samples out."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _, cache = net.forward(x, mode="eval")
    worst = math.inf
    for i, lay in enumerate(net.head.layers):
        a_in = cache["head_in"][i][0]
        denom = (a_in[None, :] * lay.W).sum(axis=1)
        z = lay.forward(a_in.reshape(1, -1))[0]
        active = z > 0 if i < len(net.head.layers) - 1 else np.ones_like(z, bool)
        if active.any():
            worst = min(worst, float(np.abs(denom[active]).min()))
    for ell, blk in enumerate(net.blocks):
        scale = blk.bn.gamma / np.sqrt(blk.bn.running_var + blk.bn.eps)
        a_in = cache["block_in"][ell][0]
        lin = blk.linear
        denom = a_in[lin.src] * lin.w_src * scale + a_in[lin.tgt] * lin.w_tgt * scale
        active = cache["post_bn"][ell][0] > 0
        if active.any():
            worst = min(worst, float(np.abs(denom[active]).min()))
    return worst


def finite_diff_grads(net: BirNetwork, X, y, step: float = 1e-4):
    """Central-difference gradients of the frozen-mode cross-entropy loss."""

    def loss():
        logits, _ = net.forward(X, mode="frozen")
        return cross_entropy(logits, y)

    out = {}
    for path, arr, _ in net.params():
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = loss()
            flat[idx] = orig - step
            lm = loss()
            flat[idx] = orig
            gf[idx] = (lp - lm) / (2.0 * step)
        out[path] = g
    return out


def planted_pair_data(
    rng: np.random.Generator,
    n: int = 400,
    n_noise: int = 4,
    flip: float = 0.02,
    noise: float = 0.1,
):
    """Two near-equivalent features plus independent noise features.

    Feature 1 copies feature 0's bit with a `flip` fraction of 1->0 flips;
    the class label is feature 0's bit. Real values are bit*2 + N(0, noise)
    so step thresholding recovers the bits exactly."""
    a = rng.random(n) < 0.5
    b = a & ~((rng.random(n) < flip) & a)
    bits = [a, b] + [rng.random(n) < 0.5 for _ in range(n_noise)]
    X = np.stack(
        [col * 2.0 + rng.normal(0.0, noise, n) for col in bits], axis=1
    )
    y = a.astype(np.int64)
    return X, y


def write_csv(path, X, y, class_names=("neg", "pos"), id_col: bool = False):
    """Small labeled CSV for CLI and dataio tests."""
    d = X.shape[1]
    header = [f"g{j}" for j in range(d)] + ["diagnosis"]
    if id_col:
        header = ["sample"] + header
    lines = [",".join(header)]
    for i, (row, lab) in enumerate(zip(X, y)):
        cells = [repr(float(v)) for v in row] + [class_names[int(lab)]]
        if id_col:
            cells = [f"s{i}"] + cells
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
