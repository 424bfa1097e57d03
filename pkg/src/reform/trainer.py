"""Full model: graph + attentive embeddings, concatenated inner-product scoring,
BPR training with L2 and Adam, early stopping and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import mfa
from .dataset import DataSplit, InteractionGraph
from .encoder import ProfileStore
from .graphconv import backprop_graph, propagate
from .metrics import topk_metrics
from .seeding import stream_rng

log = logging.getLogger(__name__)

VARIANTS = ("full", "avg_pool", "no_mfa_mlp")
MLP_NAMES = ("M1_u", "b1_u", "M2_u", "b2_u", "M1_i", "b1_i", "M2_i", "b2_i")
CKPT_MAGIC = "rfmckpt1"


class TrainingError(RuntimeError):
    def __init__(self, msg, batch=None):
        super().__init__(msg)
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4096
    l2_lambda: float = 1e-4
    n_keys: int = 3
    layers: int = 3
    d_g: int = 256
    d_star: int = 256
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    eval_interval: int = 1
    eval_k: int = 20
    include_layer0: bool = False
    variant: str = "full"
    eval_key_cap: int = 50
    init_std: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        for name in ("learning_rate", "l2_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("batch_size", "n_keys", "layers", "d_g", "d_star", "max_epochs",
                     "eval_interval", "eval_k", "eval_key_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def pool(self) -> str:
        return "mean" if self.variant == "avg_pool" else "max"

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


# -- small pure pieces ------------------------------------------------------------


def fuse_and_score(eg_u, ea_u, eg_i, ea_i) -> float:
    """<[eg_u; ea_u], [eg_i; ea_i]>."""
    return float(np.dot(np.concatenate([eg_u, ea_u]), np.concatenate([eg_i, ea_i])))


def bpr_loss(pos, neg):
    """-ln sigmoid(pos - neg), evaluated as softplus(neg - pos)."""
    return np.logaddexp(0.0, -(np.asarray(pos, dtype=np.float64) - neg))


def sample_triplets(pairs: np.ndarray, num_items: int, batch_size: int, seed: int,
                    epoch: int = 0, batch: int = 0, train_keys: np.ndarray | None = None):
    """(u, i, j) with (u, i) drawn uniformly from ``pairs`` and j rejection-sampled
    among the user's non-training items."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if len(pairs) == 0:
        raise ValueError("no training interactions to sample from")
    if train_keys is None:
        train_keys = np.unique(pairs[:, 0] * num_items + pairs[:, 1])
    rng = stream_rng(seed, "negatives", epoch, batch)
    sel = rng.integers(0, len(pairs), size=batch_size)
    u, i = pairs[sel, 0], pairs[sel, 1]
    deg = np.bincount(pairs[:, 0])
    full = deg[u] >= num_items
    if full.any():
        log.warning("skipping %d triple(s) of users who interacted with every item", full.sum())
        u, i = u[~full], i[~full]
    j = rng.integers(0, num_items, size=len(u))
    bad = np.isin(u * num_items + j, train_keys)
    while bad.any():
        j[bad] = rng.integers(0, num_items, size=int(bad.sum()))
        bad = np.isin(u * num_items + j, train_keys)
    return u, i, j


# -- parameters & optimizer -------------------------------------------------------------


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams({k: a.copy() for k, a in self.tensors.items()},
                           {k: a.copy() for k, a in self.m.items()},
                           {k: a.copy() for k, a in self.v.items()}, self.step)

    def __getitem__(self, name):
        return self.tensors[name]


def init_params(num_users: int, num_items: int, profile_dim: int, cfg: TrainConfig) -> ModelParams:
    rng = stream_rng(cfg.seed, "init")
    t = {
        "E_u": rng.normal(0.0, cfg.init_std, size=(num_users, cfg.d_g)),
        "E_i": rng.normal(0.0, cfg.init_std, size=(num_items, cfg.d_g)),
    }
    if cfg.variant == "no_mfa_mlp":
        d, D = profile_dim, cfg.d_star
        for side in ("u", "i"):
            b1, b2 = np.sqrt(6.0 / (d + D)), np.sqrt(6.0 / (2 * D))
            t[f"M1_{side}"] = rng.uniform(-b1, b1, size=(d, D))
            t[f"b1_{side}"] = np.zeros(D)
            t[f"M2_{side}"] = rng.uniform(-b2, b2, size=(D, D))
            t[f"b2_{side}"] = np.zeros(D)
    else:
        t.update(mfa.init_projections(profile_dim, cfg.d_star, rng))
    return ModelParams(t)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    params.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** params.step
    c2 = 1.0 - b2 ** params.step
    for name, g in grads.items():
        if name not in params.m:
            params.m[name] = np.zeros_like(g)
            params.v[name] = np.zeros_like(g)
        m, v = params.m[name], params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.tensors[name] -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _regularized(name: str) -> bool:
    return not name.startswith(("E_", "b1_", "b2_"))


# -- the model ---------------------------------------------------------------------------


class ReformModel:
    """Scores and gradients for one (graph, profiles, config) triple."""

    def __init__(self, graph: InteractionGraph, profiles: ProfileStore, cfg: TrainConfig):
        if profiles.users.shape[0] != graph.num_users or profiles.items.shape[0] != graph.num_items:
            raise ValueError("profile store and graph disagree on entity counts")
        self.graph = graph
        self.profiles = profiles
        self.cfg = cfg
        self._mean_u = profiles.users.mean(axis=1)
        self._mean_i = profiles.items.mean(axis=1)

    # attentive branch, forward for a set of anchors on one side
    def attentive(self, params: ModelParams, side: str, anchors: np.ndarray, keys):
        t = params.tensors
        if self.cfg.variant == "no_mfa_mlp":
            s = "u" if side == "user" else "i"
            x = (self._mean_u if side == "user" else self._mean_i)[anchors]
            pre = x @ t[f"M1_{s}"] + t[f"b1_{s}"]
            h = np.maximum(pre, 0.0)
            return h @ t[f"M2_{s}"] + t[f"b2_{s}"], ("mlp", s, x, pre, h)
        own, other = (self.profiles.users, self.profiles.items) if side == "user" else \
            (self.profiles.items, self.profiles.users)
        idx, mask = keys.rows(anchors)
        wq, wk, wv = (t[n] for n in mfa.SIDE_WEIGHTS[side])
        e, st = mfa.side_forward(own[anchors], other[idx], mask, wq, wk, wv, self.cfg.pool)
        return e, ("mfa", side, st)

    def attentive_backward(self, params: ModelParams, state, grad_e, grads) -> None:
        t = params.tensors
        if state[0] == "mlp":
            _, s, x, pre, h = state
            grads[f"M2_{s}"] += h.T @ grad_e
            grads[f"b2_{s}"] += grad_e.sum(axis=0)
            dpre = (grad_e @ t[f"M2_{s}"].T) * (pre > 0)
            grads[f"M1_{s}"] += x.T @ dpre
            grads[f"b1_{s}"] += dpre.sum(axis=0)
            return
        _, side, st = state
        gq, gk, gv = mfa.side_backward(st, grad_e)
        nq, nk, nv = mfa.SIDE_WEIGHTS[side]
        grads[nq] += gq
        grads[nk] += gk
        grads[nv] += gv

    def loss_and_grads(self, params: ModelParams, users, pos, neg, user_keys, item_keys):
        """Mean BPR + lambda * L2 over a triple batch, with exact gradients."""
        cfg = self.cfg
        t = params.tensors
        users, pos, neg = (np.asarray(a, dtype=np.int64) for a in (users, pos, neg))
        B = len(users)
        prop = propagate(self.graph, t["E_u"], t["E_i"], cfg.layers, cfg.include_layer0)

        uu, u_inv = np.unique(users, return_inverse=True)
        ii, i_inv = np.unique(np.concatenate([pos, neg]), return_inverse=True)
        ea_u, st_u = self.attentive(params, "user", uu, user_keys)
        ea_i, st_i = self.attentive(params, "item", ii, item_keys)

        gu, gp, gn = prop.users[users], prop.items[pos], prop.items[neg]
        au, ap, an = ea_u[u_inv], ea_i[i_inv[:B]], ea_i[i_inv[B:]]
        margin = (gu * (gp - gn)).sum(axis=1) + (au * (ap - an)).sum(axis=1)
        bpr = float(np.mean(np.logaddexp(0.0, -margin)))

        lam = cfg.l2_lambda
        reg_rows = ((t["E_u"][users] ** 2).sum() + (t["E_i"][pos] ** 2).sum()
                    + (t["E_i"][neg] ** 2).sum()) / B
        reg_w = sum(float((a ** 2).sum()) for n, a in t.items() if _regularized(n))
        reg = float(reg_rows + reg_w)
        loss = bpr + lam * reg
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss}", batch=(users, pos, neg))

        dm = -expit(-margin) / B
        g_eu = np.zeros_like(prop.users)
        g_ei = np.zeros_like(prop.items)
        np.add.at(g_eu, users, dm[:, None] * (gp - gn))
        np.add.at(g_ei, pos, dm[:, None] * gu)
        np.add.at(g_ei, neg, -dm[:, None] * gu)
        g_Eu, g_Ei = backprop_graph(self.graph, cfg.layers, g_eu, g_ei, cfg.include_layer0)
        np.add.at(g_Eu, users, (2 * lam / B) * t["E_u"][users])
        np.add.at(g_Ei, pos, (2 * lam / B) * t["E_i"][pos])
        np.add.at(g_Ei, neg, (2 * lam / B) * t["E_i"][neg])

        grads = {"E_u": g_Eu, "E_i": g_Ei}
        for n, a in t.items():
            if n not in grads:
                grads[n] = (2 * lam) * a if _regularized(n) else np.zeros_like(a)
        ga_u = np.zeros_like(ea_u)
        ga_i = np.zeros_like(ea_i)
        np.add.at(ga_u, u_inv, dm[:, None] * (ap - an))
        np.add.at(ga_i, i_inv[:B], dm[:, None] * au)
        np.add.at(ga_i, i_inv[B:], -dm[:, None] * au)
        self.attentive_backward(params, st_u, ga_u, grads)
        self.attentive_backward(params, st_i, ga_i, grads)
        return loss, {"bpr": bpr, "reg": reg, "loss": loss}, grads

    def embeddings(self, params: ModelParams, chunk: int = 512):
        """Final fused vectors [e^g; e^a] for every user and item, inference keys."""
        cfg = self.cfg
        t = params.tensors
        prop = propagate(self.graph, t["E_u"], t["E_i"], cfg.layers, cfg.include_layer0)
        out = []
        for side, n, eg in (("user", self.graph.num_users, prop.users),
                            ("item", self.graph.num_items, prop.items)):
            keys = mfa.inference_keys(self.graph, side, cfg.eval_key_cap)
            parts = []
            for lo in range(0, n, chunk):
                anchors = np.arange(lo, min(n, lo + chunk))
                parts.append(self.attentive(params, side, anchors, keys)[0])
            ea = np.concatenate(parts) if parts else np.zeros((0, cfg.d_star))
            out.append(np.hstack([eg, ea]))
        return out[0], out[1]


# -- epochs and fitting --------------------------------------------------------------------


@dataclass
class TrainData:
    split: DataSplit
    graph: InteractionGraph
    profiles: ProfileStore

    def __post_init__(self):
        self.pairs = np.asarray(self.split.train, dtype=np.int64).reshape(-1, 2)
        self.train_keys = np.unique(self.pairs[:, 0] * self.split.num_items + self.pairs[:, 1])
        self.train_by_user = self.split.by_user("train")

    def relevant(self, which: str):
        return self.split.by_user(which)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    bpr: float
    reg: float
    batches: int
    elapsed_ms: float


def train_epoch(model: ReformModel, params: ModelParams, data: TrainData, epoch: int) -> EpochStats:
    cfg = model.cfg
    t0 = time.perf_counter()
    user_keys = mfa.epoch_keys(model.graph, "user", cfg.n_keys, cfg.seed, epoch)
    item_keys = mfa.epoch_keys(model.graph, "item", cfg.n_keys, cfg.seed, epoch)
    n_batches = max(1, math.ceil(len(data.pairs) / cfg.batch_size))
    totals = np.zeros(3)
    for b in range(n_batches):
        u, i, j = sample_triplets(data.pairs, data.split.num_items, cfg.batch_size, cfg.seed,
                                  epoch, b, data.train_keys)
        if len(u) == 0:
            continue
        _, parts, grads = model.loss_and_grads(params, u, i, j, user_keys, item_keys)
        adam_step(params, grads, cfg)
        totals += (parts["loss"], parts["bpr"], parts["reg"])
    totals /= n_batches
    return EpochStats(epoch, float(totals[0]), float(totals[1]), float(totals[2]), n_batches,
                      (time.perf_counter() - t0) * 1000.0)


def evaluate_params(model: ReformModel, params: ModelParams, data: TrainData, which: str = "test",
                    ks=(10, 20)) -> dict[str, float]:
    ue, ie = model.embeddings(params)
    return topk_metrics(ue, ie, data.train_by_user, data.relevant(which), ks)


@dataclass
class FitResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    best_metric: float


def fit(model: ReformModel, data: TrainData, params: ModelParams | None = None,
        log_path=None) -> FitResult:
    """Train with early stopping on validation Recall@K and restore the best epoch.

    Stops once ``patience`` consecutive evaluations fail to improve (a patience of 0
    behaves like 1).
    """
    cfg = model.cfg
    if not data.split.val:
        raise ValueError("early stopping needs a non-empty validation split")
    if params is None:
        params = init_params(data.split.num_users, data.split.num_items, model.profiles.d, cfg)
    key = f"recall@{cfg.eval_k}"
    best, best_epoch, best_params, bad = -1.0, 0, params.copy(), 0
    history = []
    fh = Path(log_path).open("w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            stats = train_epoch(model, params, data, epoch)
            if epoch % cfg.eval_interval and epoch != cfg.max_epochs:
                continue
            metric = evaluate_params(model, params, data, "val", (cfg.eval_k,))[key]
            row = {"epoch": epoch, "loss": stats.loss, f"val_{key}": metric,
                   "elapsed_ms": round(stats.elapsed_ms, 3)}
            history.append(row)
            if fh:
                fh.write(json.dumps(row) + "\n")
            if metric > best:
                best, best_epoch, best_params, bad = metric, epoch, params.copy(), 0
            else:
                bad += 1
                if bad >= max(cfg.patience, 1):
                    log.info("early stop at epoch %d (best %d: %.4f)", epoch, best_epoch, best)
                    break
    finally:
        if fh:
            fh.close()
    return FitResult(best_params, history, best_epoch, best)


# -- checkpoints ----------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, cfg: TrainConfig, epoch: int, metric: float,
                    extra: dict | None = None) -> None:
    names = sorted(params.tensors)
    header = {
        "magic": CKPT_MAGIC,
        "config": asdict(cfg),
        "config_hash": cfg.hash(),
        "epoch": int(epoch),
        "metric": float(metric),
        "tensors": [[n, list(params.tensors[n].shape)] for n in names],
    }
    if extra:
        header.update(extra)
    with Path(path).open("wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for n in names:
            fh.write(np.ascontiguousarray(params.tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("magic") != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = nl + 1
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        tensors[name] = arr.astype(np.float64).reshape(shape)
        off += 4 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} unexpected trailing bytes at offset {off}")
    cfg = TrainConfig(**header["config"])
    return ModelParams(tensors), cfg, header


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
