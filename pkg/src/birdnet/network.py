"""Implication-masked network: layers, forward/backward, accounting, serialization.

Each hidden unit of a masked layer binds to exactly the two input features of
one mined implication, so the dense h x d weight view has at most 2h nonzeros
(active fraction <= 2/d). Gradients are hand-derived; there is no autodiff.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from birdnet.mining import Implication

__all__ = [
    "PairLinear",
    "DenseLinear",
    "BatchNorm",
    "BirBlock",
    "DenseHead",
    "BirNetwork",
    "build_bir_layer",
    "active_param_count",
    "to_matched_mlp",
    "save_network",
    "load_network",
]

INIT_SCALE = 0.5  # magnitude scale for type-aware init: |N(0,1)| * INIT_SCALE

# Sign of (source weight, target weight) per implication type.
_TYPE_SIGNS = {
    "T0": (1.0, 1.0),
    "T4": (1.0, 1.0),
    "T1": (-1.0, -1.0),
    "T2": (1.0, -1.0),
    "T5": (1.0, -1.0),
    "T3": (-1.0, 1.0),
}


class PairLinear:
    """Masked linear map: unit k sees only input columns src[k] and tgt[k].

    Only the two active weights per unit are stored, so masked positions are
    exactly zero by construction, at every step and across serialization.
    """

    kind = "pair"

    def __init__(self, src, tgt, w_src, w_tgt, bias, in_dim):
        self.src = np.asarray(src, dtype=np.int64)
        self.tgt = np.asarray(tgt, dtype=np.int64)
        self.w_src = np.asarray(w_src, dtype=np.float64)
        self.w_tgt = np.asarray(w_tgt, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.in_dim = int(in_dim)

    @property
    def out_dim(self) -> int:
        return self.src.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ValueError(f"layer expects {self.in_dim} inputs, got {x.shape[1]}")
        return x[:, self.src] * self.w_src + x[:, self.tgt] * self.w_tgt + self.bias

    def backward(self, dz: np.ndarray, x: np.ndarray):
        grads = {
            "w_src": (dz * x[:, self.src]).sum(axis=0),
            "w_tgt": (dz * x[:, self.tgt]).sum(axis=0),
            "bias": dz.sum(axis=0),
        }
        dxT = np.zeros((self.in_dim, x.shape[0]))
        np.add.at(dxT, self.src, (dz * self.w_src).T)
        np.add.at(dxT, self.tgt, (dz * self.w_tgt).T)
        return dxT.T, grads

    def dense_weight(self) -> np.ndarray:
        """Materialize the h x d weight matrix (masked positions exactly 0)."""
        W = np.zeros((self.out_dim, self.in_dim))
        W[np.arange(self.out_dim), self.src] = self.w_src
        W[np.arange(self.out_dim), self.tgt] = self.w_tgt
        return W

    def mask(self) -> np.ndarray:
        M = np.zeros((self.out_dim, self.in_dim), dtype=bool)
        M[np.arange(self.out_dim), self.src] = True
        M[np.arange(self.out_dim), self.tgt] = True
        return M

    def active_weight_fraction(self) -> float:
        return 2.0 * self.out_dim / (self.out_dim * self.in_dim)

    def params(self):
        yield "w_src", self.w_src, True
        yield "w_tgt", self.w_tgt, True
        yield "bias", self.bias, False


class DenseLinear:
    """Plain dense linear map (matched baseline layers and the classifier head)."""

    kind = "dense"

    def __init__(self, W, b):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLinear":
        # Kaiming-style fan-in scaled normal.
        W = rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
        return cls(W, np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ValueError(f"layer expects {self.in_dim} inputs, got {x.shape[1]}")
        return x @ self.W.T + self.b

    def backward(self, dz: np.ndarray, x: np.ndarray):
        grads = {"W": dz.T @ x, "b": dz.sum(axis=0)}
        return dz @ self.W, grads

    def active_weight_fraction(self) -> float:
        return 1.0

    def params(self):
        yield "W", self.W, True
        yield "b", self.b, False


class BatchNorm:
    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = eps
        self.momentum = momentum

    def forward(self, z: np.ndarray, mode: str):
        if mode == "train":
            mean = z.mean(axis=0)
            var = z.var(axis=0)  # population
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:  # "eval" or "frozen": running statistics, treated as constants
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (z - mean) * inv_std
        y = self.gamma * xhat + self.beta
        return y, (xhat, inv_std, mode)

    def backward(self, dy: np.ndarray, cache):
        xhat, inv_std, mode = cache
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dxhat = dy * self.gamma
        if mode == "train":
            m = dy.shape[0]
            dz = (inv_std / m) * (
                m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dz = dxhat * inv_std
        return dz, {"gamma": dgamma, "beta": dbeta}

    def set_stats(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = np.asarray(mean, dtype=np.float64).copy()
        self.running_var = np.asarray(var, dtype=np.float64).copy()

    def params(self):
        yield "gamma", self.gamma, False
        yield "beta", self.beta, False


@dataclass
class BirBlock:
    """One hidden stage: (masked or dense) linear, BatchNorm, ReLU, dropout."""

    linear: PairLinear | DenseLinear
    bn: BatchNorm
    dropout: float
    bindings: list[Implication]  # unit k <-> implication k (over the block input space)
    input_names: list[str]
    unit_names: list[str]


@dataclass
class DenseHead:
    layers: list[DenseLinear]  # ReLU between all but after the last


class BirNetwork:
    """Ordered stack of implication-masked blocks plus a dense classifier head."""

    def __init__(self, input_dim, feature_names, blocks, head, class_names, meta=None):
        self.input_dim = int(input_dim)
        self.feature_names = list(feature_names)
        self.blocks: list[BirBlock] = list(blocks)
        self.head: DenseHead = head
        self.class_names = list(class_names)
        self.meta = dict(meta or {})
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if nxt.linear.in_dim != prev.linear.out_dim:
                raise ValueError("block widths do not chain")

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def n_classes(self) -> int:
        return self.head.layers[-1].out_dim

    def forward(self, X: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None):
        """Returns (logits, cache). Modes: 'train' (batch BN stats, dropout),
        'eval' (running stats, deterministic), 'frozen' (running stats but a
        full backward cache; used for gradient checks)."""
        if mode not in ("train", "eval", "frozen"):
            raise ValueError(f"unknown mode {mode!r}")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected batch of width {self.input_dim}, got {X.shape}")
        if mode == "train" and X.shape[0] < 2:
            raise ValueError("train-mode forward needs a batch of at least 2 rows")
        cache = {"mode": mode, "block_in": [], "bn": [], "post_bn": [], "drop": []}
        a = X
        for blk in self.blocks:
            cache["block_in"].append(a)
            z = blk.linear.forward(a)
            y, bn_cache = blk.bn.forward(z, mode)
            cache["bn"].append(bn_cache)
            a = np.maximum(y, 0.0)
            cache["post_bn"].append(a)  # post-ReLU, pre-dropout
            if mode == "train" and blk.dropout > 0.0:
                if rng is None:
                    raise ValueError("train-mode forward with dropout needs an rng")
                keep = rng.random(a.shape) >= blk.dropout
                a = a * keep / (1.0 - blk.dropout)
                cache["drop"].append(keep)
            else:
                cache["drop"].append(None)
        cache["head_in"] = []
        for i, lay in enumerate(self.head.layers):
            cache["head_in"].append(a)
            a = lay.forward(a)
            if i < len(self.head.layers) - 1:
                a = np.maximum(a, 0.0)
        return a, cache

    def backward(self, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Exact gradients of the cached forward; keys match param paths."""
        grads: dict[str, np.ndarray] = {}
        da = np.asarray(dlogits, dtype=np.float64)
        for i in reversed(range(len(self.head.layers))):
            lay = self.head.layers[i]
            x = cache["head_in"][i]
            da, g = lay.backward(da, x)
            for name, arr in g.items():
                grads[f"head{i}.{name}"] = arr
            if i > 0:
                da = da * (cache["head_in"][i] > 0.0)
        for ell in reversed(range(len(self.blocks))):
            blk = self.blocks[ell]
            keep = cache["drop"][ell]
            if keep is not None:
                da = da * keep / (1.0 - blk.dropout)
            da = da * (cache["post_bn"][ell] > 0.0)  # ReLU gate
            da, g_bn = blk.bn.backward(da, cache["bn"][ell])
            for name, arr in g_bn.items():
                grads[f"block{ell}.bn.{name}"] = arr
            da, g_lin = blk.linear.backward(da, cache["block_in"][ell])
            for name, arr in g_lin.items():
                grads[f"block{ell}.{name}"] = arr
        return grads

    def params(self):
        """Yields (path, array, weight_decay_applies)."""
        for ell, blk in enumerate(self.blocks):
            for name, arr, decay in blk.linear.params():
                yield f"block{ell}.{name}", arr, decay
            for name, arr, decay in blk.bn.params():
                yield f"block{ell}.bn.{name}", arr, decay
        for i, lay in enumerate(self.head.layers):
            for name, arr, decay in lay.params():
                yield f"head{i}.{name}", arr, decay

    def get_param(self, path: str) -> np.ndarray:
        for p, arr, _ in self.params():
            if p == path:
                return arr
        raise KeyError(path)

    def set_param(self, path: str, value: np.ndarray) -> None:
        arr = self.get_param(path)
        arr[...] = value

    def snapshot(self) -> dict[str, np.ndarray]:
        state = {p: arr.copy() for p, arr, _ in self.params()}
        for ell, blk in enumerate(self.blocks):
            state[f"block{ell}.bn.running_mean"] = blk.bn.running_mean.copy()
            state[f"block{ell}.bn.running_var"] = blk.bn.running_var.copy()
        return state

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for p, arr, _ in self.params():
            arr[...] = state[p]
        for ell, blk in enumerate(self.blocks):
            blk.bn.running_mean = state[f"block{ell}.bn.running_mean"].copy()
            blk.bn.running_var = state[f"block{ell}.bn.running_var"].copy()


def build_bir_layer(
    spec: list[Implication],
    d: int,
    seed_or_rng,
    input_names: list[str] | None = None,
    layer_index: int = 0,
    dropout: float = 0.3,
) -> BirBlock:
    """One masked block from a mined layer spec, with type-aware sign init.

    T0/T4 start both weights positive, T1 both negative, T2/T5 positive
    source and negative target, T3 the reverse; magnitudes are |N(0,1)|
    scaled by INIT_SCALE (fan-in is always 2). Bias 0, BN affine identity.
    """
    if not spec:
        raise ValueError("cannot build a layer from an empty implication list")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.Generator(
        np.random.PCG64(seed_or_rng)
    )
    if input_names is None:
        input_names = [f"f{j}" for j in range(d)]
    h = len(spec)
    src = np.empty(h, dtype=np.int64)
    tgt = np.empty(h, dtype=np.int64)
    w_src = np.empty(h)
    w_tgt = np.empty(h)
    for k, imp in enumerate(spec):
        if not (0 <= imp.source < d and 0 <= imp.target < d):
            raise ValueError(f"implication {k} indexes outside input dim {d}")
        if imp.source == imp.target:
            raise ValueError(f"implication {k} is a self-loop")
        s_sign, t_sign = _TYPE_SIGNS[imp.btype]
        src[k] = imp.source
        tgt[k] = imp.target
        w_src[k] = s_sign * abs(rng.standard_normal()) * INIT_SCALE
        w_tgt[k] = t_sign * abs(rng.standard_normal()) * INIT_SCALE
    linear = PairLinear(src, tgt, w_src, w_tgt, np.zeros(h), d)
    unit_names = [
        f"L{layer_index}/u{k}:{imp.btype}({input_names[imp.source]},{input_names[imp.target]})"
        for k, imp in enumerate(spec)
    ]
    return BirBlock(
        linear=linear,
        bn=BatchNorm(h),
        dropout=dropout,
        bindings=list(spec),
        input_names=list(input_names),
        unit_names=unit_names,
    )


def active_param_count(net: BirNetwork) -> dict[str, int]:
    """Parameter accounting: 2 masked weights + 1 bias per masked unit;
    totals add BatchNorm affine (2 per unit) and all head parameters."""
    width = 0
    bir_active = 0
    bn_params = 0
    for blk in net.blocks:
        h = blk.linear.out_dim
        width += h
        bn_params += 2 * h
        if isinstance(blk.linear, PairLinear):
            bir_active += 3 * h
        else:
            bir_active += blk.linear.W.size + blk.linear.b.size
    head_params = sum(lay.W.size + lay.b.size for lay in net.head.layers)
    return {
        "width": width,
        "bir_active": bir_active,
        "total_active": bir_active + bn_params + head_params,
    }


def to_matched_mlp(net: BirNetwork, seed: int) -> BirNetwork:
    """Dense counterpart: same widths, BN, dropout, and head shape; the
    implication mask is removed and all weights re-initialized densely."""
    rng = np.random.Generator(np.random.PCG64(seed))
    blocks = []
    for blk in net.blocks:
        lin = DenseLinear.init(blk.linear.in_dim, blk.linear.out_dim, rng)
        blocks.append(
            BirBlock(
                linear=lin,
                bn=BatchNorm(blk.linear.out_dim, eps=blk.bn.eps, momentum=blk.bn.momentum),
                dropout=blk.dropout,
                bindings=list(blk.bindings),
                input_names=list(blk.input_names),
                unit_names=list(blk.unit_names),
            )
        )
    head = DenseHead(
        layers=[DenseLinear.init(lay.in_dim, lay.out_dim, rng) for lay in net.head.layers]
    )
    meta = dict(net.meta)
    meta["matched_mlp"] = True
    return BirNetwork(net.input_dim, net.feature_names, blocks, head, net.class_names, meta)


# ---------------------------------------------------------------------------
# Serialization (single self-describing JSON file, bit-exact arrays)
# ---------------------------------------------------------------------------


def _enc(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {
        "dtype": arr.dtype.str,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _dec(obj: dict) -> np.ndarray:
    return np.frombuffer(
        base64.b64decode(obj["data"]), dtype=np.dtype(obj["dtype"])
    ).reshape(obj["shape"]).copy()


def _imp_to_json(imp: Implication) -> list:
    return [imp.source, imp.target, imp.btype, imp.log_p, imp.exceptions,
            imp.exception_fraction, imp.antecedent_support]


def _imp_from_json(row: list) -> Implication:
    return Implication(int(row[0]), int(row[1]), str(row[2]), float(row[3]),
                       int(row[4]), float(row[5]), int(row[6]))


def save_network(net: BirNetwork, path: str) -> None:
    doc = {
        "format": "birdnet-model-v1",
        "input_dim": net.input_dim,
        "feature_names": net.feature_names,
        "class_names": net.class_names,
        "meta": net.meta,
        "blocks": [],
        "head": [],
    }
    for blk in net.blocks:
        b = {
            "kind": blk.linear.kind,
            "dropout": blk.dropout,
            "bindings": [_imp_to_json(i) for i in blk.bindings],
            "input_names": blk.input_names,
            "unit_names": blk.unit_names,
            "bn": {
                "gamma": _enc(blk.bn.gamma),
                "beta": _enc(blk.bn.beta),
                "running_mean": _enc(blk.bn.running_mean),
                "running_var": _enc(blk.bn.running_var),
                "eps": blk.bn.eps,
                "momentum": blk.bn.momentum,
            },
        }
        if isinstance(blk.linear, PairLinear):
            b["linear"] = {
                "in_dim": blk.linear.in_dim,
                "src": _enc(blk.linear.src),
                "tgt": _enc(blk.linear.tgt),
                "w_src": _enc(blk.linear.w_src),
                "w_tgt": _enc(blk.linear.w_tgt),
                "bias": _enc(blk.linear.bias),
            }
        else:
            b["linear"] = {"W": _enc(blk.linear.W), "b": _enc(blk.linear.b)}
        doc["blocks"].append(b)
    for lay in net.head.layers:
        doc["head"].append({"W": _enc(lay.W), "b": _enc(lay.b)})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_network(path: str) -> BirNetwork:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "birdnet-model-v1":
        raise ValueError(f"{path}: not a recognized model file")
    blocks = []
    for b in doc["blocks"]:
        if b["kind"] == "pair":
            lin = PairLinear(
                _dec(b["linear"]["src"]),
                _dec(b["linear"]["tgt"]),
                _dec(b["linear"]["w_src"]),
                _dec(b["linear"]["w_tgt"]),
                _dec(b["linear"]["bias"]),
                b["linear"]["in_dim"],
            )
        else:
            lin = DenseLinear(_dec(b["linear"]["W"]), _dec(b["linear"]["b"]))
        bn = BatchNorm(lin.out_dim, eps=b["bn"]["eps"], momentum=b["bn"]["momentum"])
        bn.gamma = _dec(b["bn"]["gamma"])
        bn.beta = _dec(b["bn"]["beta"])
        bn.running_mean = _dec(b["bn"]["running_mean"])
        bn.running_var = _dec(b["bn"]["running_var"])
        blocks.append(
            BirBlock(
                linear=lin,
                bn=bn,
                dropout=b["dropout"],
                bindings=[_imp_from_json(r) for r in b["bindings"]],
                input_names=b["input_names"],
                unit_names=b["unit_names"],
            )
        )
    head = DenseHead(layers=[DenseLinear(_dec(l["W"]), _dec(l["b"])) for l in doc["head"]])
    return BirNetwork(
        doc["input_dim"], doc["feature_names"], blocks, head, doc["class_names"], doc["meta"]
    )
