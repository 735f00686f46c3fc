"""Pairwise Boolean implication tests and typed implication graphs.

Six implication types over binarized feature pairs (a, b):
  T0: a high -> b high     T1: a low -> b low
  T2: a high -> b low      T3: a low -> b high
  T4: a equivalent b (T0 and T1 in both orientations)
  T5: a opposite b   (T2 and T3 in both orientations)

A directional type asserts when its violating quadrant of the 2x2
contingency table is significantly sparser than the independence null
(lower tail of a binomial on the exception count) and the exception
fraction, conditional on the antecedent, stays below the cap.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

__all__ = [
    "MiningConfig",
    "Implication",
    "ImplicationGraph",
    "log_binom_lower_tail",
    "log_binom_lower_tail_curve",
    "test_pair",
    "mine_birs",
    "deduplicate_and_cap",
    "export_graph",
    "graph_to_tsv",
    "read_graph_tsv",
]

_LN_HALF = math.log(0.5)

# Violating quadrant of each directional type, as (source bit, target bit).
_VIOLATION_BITS = {"T0": (1, 0), "T1": (0, 1), "T2": (1, 1), "T3": (0, 0)}


@dataclass
class MiningConfig:
    p_star: float = 1e-6  # significance threshold on the lower-tail p-value
    pi: float = 0.05  # max exception fraction, conditional on the antecedent
    h_max: int = 5000  # per-layer implication cap
    mu: int = 10  # layer construction stops below this count
    min_support: int = 5  # minimum antecedent support to assert

    def __post_init__(self):
        if not 0.0 < self.p_star < 1.0:
            raise ValueError(f"p_star must be in (0,1), got {self.p_star}")
        if not 0.0 <= self.pi < 0.5:
            raise ValueError(f"pi must be in [0, 0.5), got {self.pi}")


@dataclass(frozen=True)
class Implication:
    """One mined edge of the implication graph."""

    source: int
    target: int
    btype: str  # T0..T5
    log_p: float  # natural-log p-value, <= 0
    exceptions: int
    exception_fraction: float
    antecedent_support: int


@dataclass
class ImplicationGraph:
    vertices: list[str]
    edges: list[Implication]
    type_counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if not self.type_counts:
            self.type_counts = Counter(e.btype for e in self.edges)


# ---------------------------------------------------------------------------
# Binomial lower tail in log space
# ---------------------------------------------------------------------------


def _log_pmf_terms(n: int, p: float) -> np.ndarray:
    j = np.arange(n + 1, dtype=np.float64)
    return (
        gammaln(n + 1.0)
        - gammaln(j + 1.0)
        - gammaln(n - j + 1.0)
        + j * math.log(p)
        + (n - j) * math.log1p(-p)
    )


def _check_p(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ValueError(f"binomial success probability must be in (0,1), got {p}")


def log_binom_lower_tail(k: int, n: int, p: float) -> float:
    """ln P(K <= k) for K ~ Binomial(n, p), accurate in the log domain.

    Sums log pmf terms over whichever tail is smaller: the lower tail
    directly, or the upper tail followed by log1p(-exp(.)) when the
    lower-tail mass is close to 1.
    """
    _check_p(p)
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if k == n:
        return 0.0
    terms = _log_pmf_terms(n, p)
    upper = logsumexp(terms[k + 1 :])
    if upper < _LN_HALF:
        return float(np.log1p(-np.exp(upper)))
    return float(min(logsumexp(terms[: k + 1]), 0.0))


def log_binom_lower_tail_curve(n: int, p: float) -> np.ndarray:
    """ln P(K <= k) for every k in 0..n at once (shared pmf table)."""
    _check_p(p)
    terms = _log_pmf_terms(n, p)
    prefix = np.logaddexp.accumulate(terms)
    suffix = np.logaddexp.accumulate(terms[::-1])[::-1]
    upper = np.full(n + 1, -np.inf)
    upper[:n] = suffix[1:]
    out = np.minimum(prefix, 0.0)
    small = upper < _LN_HALF
    out[small] = np.log1p(-np.exp(upper[small]))
    out[n] = 0.0
    return out


def _lower_tail_batch(k: np.ndarray, n: int, p: np.ndarray, log_choose: np.ndarray) -> np.ndarray:
    """Vectorized ln P(K <= k_i) for small k_i with per-candidate p_i.

    Valid for the mining prefilter regime (k well below n*p would make the
    tail large; results are clamped to <= 0 and only the comparison against
    ln p_star matters). log_choose[j] = ln C(n, j) for j up to max(k).
    """
    if k.size == 0:
        return np.empty(0)
    out = np.empty(k.size)
    chunk = 8192
    for lo in range(0, k.size, chunk):
        kk = k[lo : lo + chunk]
        pp = p[lo : lo + chunk]
        kmax = int(kk.max())
        j = np.arange(kmax + 1, dtype=np.float64)
        T = (
            log_choose[None, : kmax + 1]
            + j[None, :] * np.log(pp)[:, None]
            + (n - j[None, :]) * np.log1p(-pp)[:, None]
        )
        T = np.where(j[None, :] <= kk[:, None], T, -np.inf)
        out[lo : lo + chunk] = np.minimum(logsumexp(T, axis=1), 0.0)
    return out


# ---------------------------------------------------------------------------
# Pair testing
# ---------------------------------------------------------------------------


def _popcount(words: np.ndarray) -> int:
    return int(np.bitwise_count(words).sum())


def _clamped_marginal(count: int, n: int) -> float:
    lo = 1.0 / (2.0 * n)
    return min(max(count / n, lo), 1.0 - lo)


def test_pair(
    col_a: np.ndarray,
    col_b: np.ndarray,
    n: int,
    cfg: MiningConfig,
    a_index: int = 0,
    b_index: int = 1,
) -> list[Implication]:
    """Directional tests T0..T3 for the ordered pair (a, b).

    Returns the asserted implications before any T4/T5 merging. A pair with
    a degenerate column (all ones or all zeros) returns no assertions.
    """
    n1a = _popcount(col_a)
    n1b = _popcount(col_b)
    if n1a in (0, n) or n1b in (0, n):
        return []
    n11 = _popcount(col_a & col_b)
    n10 = n1a - n11
    n01 = n1b - n11
    n00 = n - n1a - n1b + n11
    p1a, p0a = _clamped_marginal(n1a, n), _clamped_marginal(n - n1a, n)
    p1b, p0b = _clamped_marginal(n1b, n), _clamped_marginal(n - n1b, n)
    cases = [
        ("T0", n10, n1a, p1a * p0b),
        ("T1", n01, n - n1a, p0a * p1b),
        ("T2", n11, n1a, p1a * p1b),
        ("T3", n00, n - n1a, p0a * p0b),
    ]
    out = []
    ln_p_star = math.log(cfg.p_star)
    for btype, k, supp, p0 in cases:
        if supp < cfg.min_support:
            continue
        frac = k / supp
        if frac > cfg.pi:
            continue
        log_p = log_binom_lower_tail(k, n, p0)
        if log_p <= ln_p_star:
            out.append(
                Implication(
                    source=a_index,
                    target=b_index,
                    btype=btype,
                    log_p=log_p,
                    exceptions=k,
                    exception_fraction=frac,
                    antecedent_support=supp,
                )
            )
    return out


def _merge_pair(
    i: int, j: int, n: int, fwd: list[Implication], rev: list[Implication]
) -> list[Implication]:
    """Merge the two orientations of one pair into T4/T5 plus leftovers.

    T4 asserts when T0 and T1 hold in both orientations (equivalence is a
    symmetric statement); T5 likewise from T2 and T3. Merged constituents
    are removed. The merged log_p is the least significant of the two
    quadrant tests; the merged exception fraction is over all n samples.
    """
    fwd_types = {e.btype: e for e in fwd}
    rev_types = {e.btype: e for e in rev}
    out: list[Implication] = []
    drop_fwd: set[str] = set()
    drop_rev: set[str] = set()
    if all(t in fwd_types for t in ("T0", "T1")) and all(t in rev_types for t in ("T0", "T1")):
        exc = fwd_types["T0"].exceptions + fwd_types["T1"].exceptions
        out.append(
            Implication(
                source=i,
                target=j,
                btype="T4",
                log_p=max(fwd_types["T0"].log_p, fwd_types["T1"].log_p),
                exceptions=exc,
                exception_fraction=exc / n,
                antecedent_support=n,
            )
        )
        drop_fwd |= {"T0", "T1"}
        drop_rev |= {"T0", "T1"}
    if all(t in fwd_types for t in ("T2", "T3")) and all(t in rev_types for t in ("T2", "T3")):
        exc = fwd_types["T2"].exceptions + fwd_types["T3"].exceptions
        out.append(
            Implication(
                source=i,
                target=j,
                btype="T5",
                log_p=max(fwd_types["T2"].log_p, fwd_types["T3"].log_p),
                exceptions=exc,
                exception_fraction=exc / n,
                antecedent_support=n,
            )
        )
        drop_fwd |= {"T2", "T3"}
        drop_rev |= {"T2", "T3"}
    out.extend(e for e in fwd if e.btype not in drop_fwd)
    out.extend(e for e in rev if e.btype not in drop_rev)
    return out


def _mine_sequential(bmat, cfg: MiningConfig) -> list[Implication]:
    from birdnet.binarize import BinaryMatrix  # avoid import cycle at module load

    assert isinstance(bmat, BinaryMatrix)
    edges: list[Implication] = []
    for i in range(bmat.d - 1):
        for j in range(i + 1, bmat.d):
            fwd = test_pair(bmat.bits[i], bmat.bits[j], bmat.n, cfg, a_index=i, b_index=j)
            rev = test_pair(bmat.bits[j], bmat.bits[i], bmat.n, cfg, a_index=j, b_index=i)
            edges.extend(_merge_pair(i, j, bmat.n, fwd, rev))
    return edges


def _mine_vectorized(bmat, cfg: MiningConfig, threads: int = 1) -> list[Implication]:
    n, d = bmat.n, bmat.d
    bits = bmat.bits
    n1 = np.bitwise_count(bits).sum(axis=1).astype(np.int64)
    valid = (n1 > 0) & (n1 < n)
    lo = 1.0 / (2.0 * n)
    p1 = np.clip(n1 / n, lo, 1.0 - lo)
    p0m = np.clip((n - n1) / n, lo, 1.0 - lo)
    kmax = int(math.floor(cfg.pi * n)) + 1
    jj = np.arange(kmax + 1, dtype=np.float64)
    log_choose = gammaln(n + 1.0) - gammaln(jj + 1.0) - gammaln(n - jj + 1.0)
    ln_p_star = math.log(cfg.p_star)
    ms = cfg.min_support

    def mine_source(i: int) -> list[Implication]:
        if not valid[i]:
            return []
        js = np.flatnonzero(valid[i + 1 :]) + i + 1
        if js.size == 0:
            return []
        n11 = np.bitwise_count(bits[i][None, :] & bits[js]).sum(axis=1).astype(np.int64)
        n1a = int(n1[i])
        n1b = n1[js]
        counts = {
            "10": n1a - n11,
            "01": n1b - n11,
            "11": n11,
            "00": n - n1a - n1b + n11,
        }
        p0s = {
            "10": p1[i] * p0m[js],
            "01": p0m[i] * p1[js],
            "11": p1[i] * p1[js],
            "00": p0m[i] * p0m[js],
        }
        # (quadrant, dir1 support, dir2 support); dir1 is orientation i->j.
        supp1 = {"10": n1a, "01": n - n1a, "11": n1a, "00": n - n1a}
        supp2 = {"10": n - n1b, "01": n1b, "11": n1b, "00": n - n1b}
        ok1, ok2, logp = {}, {}, {}
        for q in ("10", "01", "11", "00"):
            k = counts[q]
            s1 = np.broadcast_to(np.asarray(supp1[q]), k.shape)
            s2 = np.broadcast_to(np.asarray(supp2[q]), k.shape)
            o1 = (s1 >= ms) & (k / s1 <= cfg.pi)
            o2 = (s2 >= ms) & (k / s2 <= cfg.pi)
            need = o1 | o2
            lp = np.full(k.shape, np.inf)
            idx = np.flatnonzero(need)
            if idx.size:
                lp[idx] = _lower_tail_batch(k[idx], n, p0s[q][idx], log_choose)
            sig = lp <= ln_p_star
            ok1[q] = o1 & sig
            ok2[q] = o2 & sig
            logp[q] = lp
        t4 = ok1["10"] & ok2["10"] & ok1["01"] & ok2["01"]
        t5 = ok1["11"] & ok2["11"] & ok1["00"] & ok2["00"]
        any_edge = t4 | t5
        for q in ("10", "01", "11", "00"):
            any_edge = any_edge | ok1[q] | ok2[q]
        out: list[Implication] = []
        for m in np.flatnonzero(any_edge):
            j = int(js[m])
            fwd, rev = [], []
            # Quadrant -> (dir1 type source=i, dir2 type source=j).
            for q, t1, t2 in (("10", "T0", "T1"), ("01", "T1", "T0"), ("11", "T2", "T2"), ("00", "T3", "T3")):
                k = int(counts[q][m])
                lp = float(logp[q][m])
                if ok1[q][m]:
                    s = int(np.broadcast_to(np.asarray(supp1[q]), counts[q].shape)[m])
                    fwd.append(Implication(i, j, t1, lp, k, k / s, s))
                if ok2[q][m]:
                    s = int(np.broadcast_to(np.asarray(supp2[q]), counts[q].shape)[m])
                    rev.append(Implication(j, i, t2, lp, k, k / s, s))
            fwd.sort(key=lambda e: e.btype)
            rev.sort(key=lambda e: e.btype)
            out.extend(_merge_pair(i, j, n, fwd, rev))
        return out

    edges: list[Implication] = []
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            for chunk in ex.map(mine_source, range(d - 1)):
                edges.extend(chunk)
    else:
        for i in range(d - 1):
            edges.extend(mine_source(i))
    return edges


def mine_birs(
    bmat,
    cfg: MiningConfig,
    feature_names=None,
    sequential: bool = False,
    threads: int = 1,
) -> ImplicationGraph:
    """Test all unordered pairs in both orientations and build the typed graph.

    The vectorized path (default) and the sequential path over `test_pair`
    produce identical edge lists; the sequential one exists as an oracle.
    With threads > 1 the vectorized path partitions the source-index space;
    results are concatenated in source order, so output is thread-count
    independent.
    """
    if bmat.d < 2:
        raise ValueError("mining needs at least 2 features")
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(bmat.d)]
    edges = (
        _mine_sequential(bmat, cfg)
        if sequential
        else _mine_vectorized(bmat, cfg, threads=threads)
    )
    return ImplicationGraph(vertices=list(feature_names), edges=edges)


# ---------------------------------------------------------------------------
# Dedup, cap, export
# ---------------------------------------------------------------------------


def _quadrant_key(e: Implication) -> tuple:
    sb, tb = _VIOLATION_BITS[e.btype]
    if e.source < e.target:
        return (e.source, e.target, sb, tb)
    return (e.target, e.source, tb, sb)


def deduplicate_and_cap(g: ImplicationGraph, h_max: int) -> list[Implication]:
    """Collapse orientation duplicates, rank by significance, cap the layer.

    Two directional edges that test the same violating quadrant (e.g. T0 a->b
    and T1 b->a) are one rule: the smaller log_p wins, ties keep the edge
    whose source has the lower index. Output is sorted ascending by log_p
    (most significant first), ties by (source, target, btype), then truncated.
    """
    best: dict[tuple, Implication] = {}
    merged: list[Implication] = []
    for e in g.edges:
        if e.btype in ("T4", "T5"):
            merged.append(e)
            continue
        key = _quadrant_key(e)
        cur = best.get(key)
        if cur is None:
            best[key] = e
        elif (e.log_p, 0 if e.source < e.target else 1) < (
            cur.log_p,
            0 if cur.source < cur.target else 1,
        ):
            best[key] = e
    survivors = merged + list(best.values())
    survivors.sort(key=lambda e: (e.log_p, e.source, e.target, e.btype))
    return survivors[:h_max]


def graph_to_tsv(g: ImplicationGraph) -> str:
    lines = ["source\ttarget\ttype\tlog_p\texceptions\texception_fraction\tantecedent_support"]
    for e in g.edges:
        lines.append(
            f"{g.vertices[e.source]}\t{g.vertices[e.target]}\t{e.btype}\t"
            f"{e.log_p!r}\t{e.exceptions}\t{e.exception_fraction!r}\t{e.antecedent_support}"
        )
    return "\n".join(lines) + "\n"


def read_graph_tsv(text: str) -> ImplicationGraph:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    names: list[str] = []
    index: dict[str, int] = {}
    edges = []
    for ln in lines[1:]:
        src, tgt, btype, log_p, exc, frac, supp = ln.split("\t")
        for name in (src, tgt):
            if name not in index:
                index[name] = len(names)
                names.append(name)
        edges.append(
            Implication(index[src], index[tgt], btype, float(log_p), int(exc), float(frac), int(supp))
        )
    return ImplicationGraph(vertices=names, edges=edges)


def export_graph(g: ImplicationGraph, path: str) -> None:
    """Write the graph as DOT; T4/T5 render undirected (dir=none)."""
    lines = ["digraph implications {"]
    for name in g.vertices:
        lines.append(f'  "{name}";')
    for e in g.edges:
        neg_log10 = -e.log_p / math.log(10.0)
        attrs = f'label="{e.btype} {neg_log10:.1f}"'
        if e.btype in ("T4", "T5"):
            attrs += ", dir=none"
        lines.append(f'  "{g.vertices[e.source]}" -> "{g.vertices[e.target]}" [{attrs}];')
    lines.append("}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
