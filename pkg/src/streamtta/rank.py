"""Reliability head: rank-projection network and per-branch scoring layer.

Two small models work together. The mapping network (a bidirectional
recurrent layer plus a shared dense output, or an MLP fallback) is trained
once on synthetic score vectors to project values in [0, 1] into a
continuous rank-like space 1..K. The ranking layer scores each branch's
feature vector with one dense unit; the softmax of those scores is the
reliability weight vector used for aggregation. Training the ranking layer
pushes the mapped weights toward task-derived rank labels with an L1
objective, with gradients flowing through the frozen mapping network.

All gradients here are computed analytically (the heads are tiny); a
finite-difference cross-check lives in the test suite.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .container import write_container
from .errors import (
    ContractError,
    DataError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)
from .util import rankdata_average, stable_softmax

VARIANT_FULL = "full"
VARIANT_LOSS = "loss"

ARCH_BIRNN = "birnn"
ARCH_MLP = "mlp"


def check_weights(w: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ContractError("weights must be a non-empty 1-D vector")
    if np.any(w < -atol) or abs(w.sum() - 1.0) > atol:
        raise ContractError("weights must be non-negative and sum to one")
    return w


def descending_ranks(values: np.ndarray) -> np.ndarray:
    """Rank 1 for the largest value; ties get their average rank."""
    return rankdata_average(-np.asarray(values, dtype=np.float64))


def task_rank_labels(losses: np.ndarray) -> np.ndarray:
    """Rank labels from per-branch task losses: lowest loss gets rank 1."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size < 1:
        raise ContractError("losses must be a non-empty 1-D vector")
    if not np.all(np.isfinite(losses)):
        raise NumericalError("task losses must be finite")
    return rankdata_average(losses)


# --- synthetic training data for the mapping network -------------------------

FAMILY_UNIFORM = 0
FAMILY_NORMAL = 1
FAMILY_EVEN = 2
FAMILY_MIXTURE = 3


@dataclass(frozen=True)
class SyntheticRankSample:
    x: np.ndarray      # K values in [0, 1]
    pi: np.ndarray     # ground-truth ranks, permutation-with-ties of 1..K
    family: int        # generator bookkeeping


def _minmax_01(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi - lo < 1e-15:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def gen_synthetic(n: int, k: int, seed: int = 0) -> list[SyntheticRankSample]:
    """Synthetic score vectors from four generator families, with rank labels.

    Families (equal probability): uniform draws, normal draws, an evenly
    spaced sequence over a random sub-range (shuffled), and element-wise
    mixtures. Values land in [0, 1]; sub-range sequences keep their spread so
    the network also sees tightly clustered inputs.
    """
    if n < 1:
        raise ContractError("need at least one sample")
    if k < 2:
        raise ContractError("need at least two entries to rank")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        family = int(rng.integers(0, 4))
        if family == FAMILY_UNIFORM:
            x = 0.5 * (rng.uniform(-1.0, 1.0, k) + 1.0)
        elif family == FAMILY_NORMAL:
            x = _minmax_01(rng.standard_normal(k))
        elif family == FAMILY_EVEN:
            a, b = np.sort(rng.uniform(-1.0, 1.0, 2))
            x = np.linspace(a, b, k)
            rng.shuffle(x)
            x = 0.5 * (x + 1.0)
        else:
            parts = rng.integers(0, 3, k)
            x = np.where(parts == 0, rng.uniform(-1.0, 1.0, k), rng.standard_normal(k))
            lo, hi = np.sort(rng.uniform(-1.0, 1.0, 2))
            x = np.where(parts == 2, rng.uniform(lo, hi, k), x)
            x = _minmax_01(x)
        samples.append(SyntheticRankSample(x=x, pi=descending_ranks(x), family=family))
    return samples


# --- optimizer ----------------------------------------------------------------


class Adam:
    """Per-array Adam over a dict of parameter arrays (updated in place)."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            update = (self.m[key] / b1c) / (np.sqrt(self.v[key] / b2c) + self.eps)
            self.params[key] -= self.lr * update


# --- mapping network -----------------------------------------------------------


@dataclass
class RankTrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    patience: int = 10
    val_frac: float = 0.1
    seed: int = 0
    hidden: int = 32
    arch: str = ARCH_BIRNN
    input_jitter: float = 0.01   # mapping only: smooths behavior near ties


class MappingModel:
    """Sequence-to-sequence projection of K scores into rank-like values.

    Default architecture: one bidirectional tanh recurrent layer (shared
    weights across positions, so any K works) feeding a dense output unit.
    The MLP fallback (two hidden layers of 64) is fixed to the K it was
    built with.
    """

    def __init__(self, arch: str = ARCH_BIRNN, hidden: int = 32, k: int | None = None,
                 seed: int = 0):
        if arch not in (ARCH_BIRNN, ARCH_MLP):
            raise ContractError(f"unknown mapping architecture {arch!r}")
        if arch == ARCH_MLP and k is None:
            raise ContractError("mlp mapping needs a fixed input length k")
        self.arch = arch
        self.hidden = hidden
        self.k = k
        rng = np.random.default_rng(seed)
        h = hidden
        if arch == ARCH_BIRNN:
            s = 1.0 / np.sqrt(h)
            self.params = {
                "wf": rng.standard_normal(h) * 0.5,
                "uf": rng.standard_normal((h, h)) * s,
                "bf": np.zeros(h),
                "wb": rng.standard_normal(h) * 0.5,
                "ub": rng.standard_normal((h, h)) * s,
                "bb": np.zeros(h),
                "vf": rng.standard_normal(h) * s,
                "vb": rng.standard_normal(h) * s,
                "c": np.zeros(1),
            }
        else:
            width = 64
            self.params = {
                "w1": rng.standard_normal((width, k)) / np.sqrt(k),
                "b1": np.zeros(width),
                "w2": rng.standard_normal((width, width)) / np.sqrt(width),
                "b2": np.zeros(width),
                "w3": rng.standard_normal((k, width)) / np.sqrt(width),
                "b3": np.zeros(k),
            }

    def forward_batch(self, x: np.ndarray):
        """Returns (outputs (B, K), cache for backward)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise DimensionError("mapping input must be (batch, K)")
        if self.arch == ARCH_MLP:
            if x.shape[1] != self.k:
                raise DimensionError(f"mlp mapping is fixed to K={self.k}, got {x.shape[1]}")
            p = self.params
            a1 = x @ p["w1"].T + p["b1"]
            h1 = np.tanh(a1)
            a2 = h1 @ p["w2"].T + p["b2"]
            h2 = np.tanh(a2)
            y = h2 @ p["w3"].T + p["b3"]
            return y, {"x": x, "h1": h1, "h2": h2}
        p = self.params
        b, k = x.shape
        h = self.hidden
        hs = np.zeros((k, b, h))
        gs = np.zeros((k, b, h))
        prev = np.zeros((b, h))
        for i in range(k):
            pre = x[:, i, None] * p["wf"][None, :] + prev @ p["uf"].T + p["bf"]
            prev = np.tanh(pre)
            hs[i] = prev
        nxt = np.zeros((b, h))
        for i in range(k - 1, -1, -1):
            pre = x[:, i, None] * p["wb"][None, :] + nxt @ p["ub"].T + p["bb"]
            nxt = np.tanh(pre)
            gs[i] = nxt
        y = np.einsum("kbh,h->bk", hs, p["vf"]) + np.einsum("kbh,h->bk", gs, p["vb"]) + p["c"][0]
        return y, {"x": x, "hs": hs, "gs": gs}

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_batch(np.asarray(x, dtype=np.float64)[None])
        return y[0]

    def backward_batch(self, cache: dict, dy: np.ndarray):
        """Vector-Jacobian products: returns (parameter grads, input grads)."""
        dy = np.asarray(dy, dtype=np.float64)
        x = cache["x"]
        if self.arch == ARCH_MLP:
            p = self.params
            h1, h2 = cache["h1"], cache["h2"]
            grads = {}
            grads["w3"] = dy.T @ h2
            grads["b3"] = dy.sum(axis=0)
            dh2 = (dy @ p["w3"]) * (1.0 - h2 * h2)
            grads["w2"] = dh2.T @ h1
            grads["b2"] = dh2.sum(axis=0)
            dh1 = (dh2 @ p["w2"]) * (1.0 - h1 * h1)
            grads["w1"] = dh1.T @ x
            grads["b1"] = dh1.sum(axis=0)
            dx = dh1 @ p["w1"]
            return grads, dx
        p = self.params
        hs, gs = cache["hs"], cache["gs"]
        b, k = x.shape
        h = self.hidden
        grads = {key: np.zeros_like(val) for key, val in p.items()}
        grads["vf"] = np.einsum("bk,kbh->h", dy, hs)
        grads["vb"] = np.einsum("bk,kbh->h", dy, gs)
        grads["c"] = np.array([dy.sum()])
        dx = np.zeros_like(x)
        # forward-direction recurrence, unrolled backwards
        carry = np.zeros((b, h))
        for i in range(k - 1, -1, -1):
            dh = dy[:, i, None] * p["vf"][None, :] + carry
            dpre = dh * (1.0 - hs[i] * hs[i])
            grads["wf"] += np.einsum("bh,b->h", dpre, x[:, i])
            prev = hs[i - 1] if i > 0 else np.zeros((b, h))
            grads["uf"] += dpre.T @ prev
            grads["bf"] += dpre.sum(axis=0)
            dx[:, i] += dpre @ p["wf"]
            carry = dpre @ p["uf"]
        # backward-direction recurrence, unrolled forwards
        carry = np.zeros((b, h))
        for i in range(k):
            dg = dy[:, i, None] * p["vb"][None, :] + carry
            dpre = dg * (1.0 - gs[i] * gs[i])
            grads["wb"] += np.einsum("bh,b->h", dpre, x[:, i])
            nxt = gs[i + 1] if i + 1 < k else np.zeros((b, h))
            grads["ub"] += dpre.T @ nxt
            grads["bb"] += dpre.sum(axis=0)
            dx[:, i] += dpre @ p["wb"]
            carry = dpre @ p["ub"]
        return grads, dx

    def snapshot(self) -> dict:
        return copy.deepcopy(self.params)

    def restore(self, snap: dict) -> None:
        self.params = copy.deepcopy(snap)


def map_ranks(mapping: MappingModel, weights: np.ndarray) -> np.ndarray:
    """Project a weight vector into the continuous rank-like space."""
    w = check_weights(weights)
    if mapping.arch == ARCH_MLP and w.size != mapping.k:
        raise DimensionError(f"mapping is fixed to K={mapping.k}, got {w.size}")
    return mapping.forward(w)


def _l1_epoch_stats(y: np.ndarray, pi: np.ndarray) -> float:
    return float(np.mean(np.abs(y - pi)))


def train_mapping(samples: list[SyntheticRankSample], cfg: RankTrainConfig | None = None) -> MappingModel:
    """Fit the mapping network with an L1 rank objective; returns best-on-validation."""
    if not samples:
        raise DegenerateInputError("mapping training needs samples")
    cfg = cfg or RankTrainConfig()
    x = np.stack([s.x for s in samples])
    pi = np.stack([s.pi for s in samples])
    n, k = x.shape
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_frac * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = val_idx
    model = MappingModel(arch=cfg.arch, hidden=cfg.hidden, k=k, seed=cfg.seed)
    opt = Adam(model.params, lr=cfg.lr)
    best_val = np.inf
    best = model.snapshot()
    stall = 0
    for _ in range(cfg.epochs):
        rng.shuffle(train_idx)
        for start in range(0, train_idx.size, cfg.batch_size):
            idx = train_idx[start : start + cfg.batch_size]
            batch_x = x[idx]
            if cfg.input_jitter > 0:
                batch_x = batch_x + rng.standard_normal(batch_x.shape) * cfg.input_jitter
            y, cache = model.forward_batch(batch_x)
            if not np.all(np.isfinite(y)):
                raise NumericalError("mapping training diverged (non-finite outputs)")
            dy = np.sign(y - pi[idx]) / idx.size
            grads, _ = model.backward_batch(cache, dy)
            opt.step(grads)
        val_y, _ = model.forward_batch(x[val_idx])
        val = _l1_epoch_stats(val_y, pi[val_idx])
        if val < best_val - 1e-6:
            best_val = val
            best = model.snapshot()
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    model.restore(best)
    return model


# --- ranking layer --------------------------------------------------------------


class RankingModel:
    """One dense unit scoring a branch feature vector; softmax of scores = weights."""

    def __init__(self, dim: int, seed: int = 0, variant: str = VARIANT_FULL):
        if variant not in (VARIANT_FULL, VARIANT_LOSS):
            raise ContractError(f"unknown ranking variant {variant!r}")
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.variant = variant
        self.params = {
            "weight": rng.standard_normal(dim) / np.sqrt(dim),
            "bias": np.zeros(1),
        }

    def scores(self, feats: np.ndarray) -> np.ndarray:
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim == 1:
            f = f[None]
        if f.shape[-1] != self.dim:
            raise DimensionError(f"feature dim {f.shape[-1]} != ranking dim {self.dim}")
        return f @ self.params["weight"] + self.params["bias"][0]

    def snapshot(self) -> dict:
        return copy.deepcopy(self.params)

    def restore(self, snap: dict) -> None:
        self.params = copy.deepcopy(snap)


def reliability(model: RankingModel, feats: np.ndarray) -> np.ndarray:
    """Softmax reliability weights over the K branch feature vectors."""
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise DimensionError("expected (K, dim) branch features")
    scores = model.scores(f)
    if model.variant == VARIANT_LOSS:
        scores = -scores  # the layer predicts loss; reliability is its inverse
    return stable_softmax(scores)


def ranking_loss_and_grads(model: RankingModel, mapping: MappingModel,
                           feats: np.ndarray, labels: np.ndarray):
    """L1 loss in rank space for one batch and its analytic parameter gradients.

    feats: (B, K, d); labels: (B, K) rank vectors. Gradients flow through the
    frozen mapping network; its parameters are never touched.
    """
    z = np.asarray(feats, dtype=np.float64)
    pi = np.asarray(labels, dtype=np.float64)
    b = z.shape[0]
    scores = z @ model.params["weight"] + model.params["bias"][0]  # (B, K)
    w = stable_softmax(scores, axis=1)
    y, cache = mapping.forward_batch(w)
    loss = float(np.mean(np.sum(np.abs(y - pi), axis=1)))
    dy = np.sign(y - pi) / b
    _, dw = mapping.backward_batch(cache, dy)
    ds = w * (dw - np.sum(dw * w, axis=1, keepdims=True))
    grads = {
        "weight": np.einsum("bk,bkd->d", ds, z),
        "bias": np.array([ds.sum()]),
    }
    return loss, grads


def _loss_regression_grads(model: RankingModel, feats: np.ndarray, targets: np.ndarray):
    z = np.asarray(feats, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    b = z.shape[0]
    scores = z @ model.params["weight"] + model.params["bias"][0]
    loss = float(np.mean(np.sum(np.abs(scores - t), axis=1)))
    ds = np.sign(scores - t) / b
    grads = {
        "weight": np.einsum("bk,bkd->d", ds, z),
        "bias": np.array([ds.sum()]),
    }
    return loss, grads


def train_ranking(feat_bank: np.ndarray, labels: np.ndarray, mapping: MappingModel | None,
                  cfg: RankTrainConfig | None = None, variant: str = VARIANT_FULL) -> RankingModel:
    """Fit the branch-scoring layer.

    `variant="full"` trains against rank labels through the frozen mapping
    network. `variant="loss"` regresses the raw per-branch task losses
    directly (no mapping network); `labels` then holds losses.
    """
    cfg = cfg or RankTrainConfig()
    z = np.asarray(feat_bank, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    if z.ndim != 3:
        raise DimensionError("feature bank must be (samples, K, dim)")
    n, k, d = z.shape
    if k < 2:
        raise ContractError("ranking over a single branch is undefined")
    if lab.shape != (n, k):
        raise DimensionError(f"labels shape {lab.shape} does not match features {(n, k)}")
    if variant == VARIANT_FULL and mapping is None:
        raise ContractError("full variant needs a mapping model")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_frac * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = val_idx
    model = RankingModel(d, seed=cfg.seed, variant=variant)
    opt = Adam(model.params, lr=cfg.lr)

    def eval_loss(idx):
        if variant == VARIANT_FULL:
            loss, _ = ranking_loss_and_grads(model, mapping, z[idx], lab[idx])
        else:
            loss, _ = _loss_regression_grads(model, z[idx], lab[idx])
        return loss

    best_val = np.inf
    best = model.snapshot()
    stall = 0
    for _ in range(cfg.epochs):
        rng.shuffle(train_idx)
        for start in range(0, train_idx.size, cfg.batch_size):
            idx = train_idx[start : start + cfg.batch_size]
            if variant == VARIANT_FULL:
                loss, grads = ranking_loss_and_grads(model, mapping, z[idx], lab[idx])
            else:
                loss, grads = _loss_regression_grads(model, z[idx], lab[idx])
            if not np.isfinite(loss):
                raise NumericalError("ranking training diverged")
            opt.step(grads)
        val = eval_loss(val_idx)
        if val < best_val - 1e-6:
            best_val = val
            best = model.snapshot()
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    model.restore(best)
    return model


# --- serialization ---------------------------------------------------------------


def rank_head_sections(mapping: MappingModel | None, ranking: RankingModel) -> tuple[dict, dict]:
    sections: dict = {}
    tensors: dict = {}
    if mapping is not None:
        refs = {}
        for name, arr in mapping.params.items():
            ref = f"mapping/{name}"
            tensors[ref] = np.asarray(arr, dtype=np.float64)
            refs[name] = ref
        sections["mapping"] = {
            "arch": mapping.arch,
            "hidden": mapping.hidden,
            "k": mapping.k,
            "tensors": refs,
        }
    refs = {}
    for name, arr in ranking.params.items():
        ref = f"ranking/{name}"
        tensors[ref] = np.asarray(arr, dtype=np.float64)
        refs[name] = ref
    sections["ranking"] = {
        "dim": ranking.dim,
        "variant": ranking.variant,
        "tensors": refs,
    }
    return sections, tensors


def save_rank_head(mapping: MappingModel | None, ranking: RankingModel,
                   meta: dict | None = None) -> bytes:
    sections, tensors = rank_head_sections(mapping, ranking)
    return write_container(sections, tensors, meta)


def mapping_from_section(section: dict, tensors: dict) -> MappingModel:
    try:
        model = MappingModel(
            arch=section["arch"],
            hidden=int(section["hidden"]),
            k=None if section.get("k") is None else int(section["k"]),
            seed=0,
        )
        for name in model.params:
            model.params[name] = np.asarray(tensors[section["tensors"][name]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed mapping section: {exc}") from exc
    return model


def ranking_from_section(section: dict, tensors: dict) -> RankingModel:
    try:
        model = RankingModel(int(section["dim"]), variant=section.get("variant", VARIANT_FULL))
        for name in model.params:
            model.params[name] = np.asarray(tensors[section["tensors"][name]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed ranking section: {exc}") from exc
    return model
