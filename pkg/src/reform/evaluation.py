"""Multi-seed evaluation, significance tests, ablations, the n-key sweep and
the CSV/JSON writers for their results."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .metrics import ndcg_at_k, rank_items, recall_at_k, topk_metrics
from .trainer import ReformModel, TrainConfig, TrainData, fit

log = logging.getLogger(__name__)

# (seed, noise_ratio) -> TrainData; the factory decides whether data depends on the seed
DataFactory = Callable[[int, float], TrainData]


def rank_all(user_emb: np.ndarray, item_emb: np.ndarray, user: int, train_items) -> np.ndarray:
    """Every non-training item for ``user``, best first (ties: lower index)."""
    return rank_items(item_emb @ user_emb[user], exclude=train_items)


def user_metrics(ranked, relevant, ks=(10, 20)) -> dict[str, float]:
    out = {}
    for k in ks:
        out[f"recall@{k}"] = recall_at_k(ranked, relevant, k)
        out[f"ndcg@{k}"] = ndcg_at_k(ranked, relevant, k)
    return out


def paired_t_test(a, b) -> float:
    """Two-sided paired t-test p-value with n - 1 degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0 or not np.isfinite(sd):
        log.warning("paired differences have zero variance")
        return 0.0 if mean != 0.0 else 1.0
    t = mean / (sd / math.sqrt(n))
    return float(2.0 * stats.t.sf(abs(t), df=n - 1))


# -- reports ----------------------------------------------------------------------------


@dataclass
class EvalReport:
    variant: str
    seeds: list[int] = field(default_factory=list)
    per_seed: list[dict[str, float]] = field(default_factory=list)
    best_epochs: list[int] = field(default_factory=list)
    label: str = ""

    def add(self, seed: int, metrics: dict[str, float], best_epoch: int = 0) -> None:
        self.seeds.append(seed)
        self.per_seed.append(dict(metrics))
        self.best_epochs.append(best_epoch)

    def values(self, metric: str) -> np.ndarray:
        return np.array([m[metric] for m in self.per_seed])

    def mean(self) -> dict[str, float]:
        if not self.per_seed:
            return {}
        return {k: float(np.mean(self.values(k))) for k in self.per_seed[0]}

    @property
    def name(self) -> str:
        return self.label or self.variant


def compare(report: EvalReport, baseline: EvalReport, metric: str = "recall@20") -> dict:
    a, b = report.values(metric), baseline.values(metric)
    mb = float(b.mean())
    return {
        "metric": metric,
        "mean": float(a.mean()),
        "baseline_mean": mb,
        "relative_improvement": float(a.mean() / mb - 1.0) if mb > 0 else float("nan"),
        # None when there are too few seeds to test
        "p_value": paired_t_test(a, b) if len(a) >= 2 else None,
    }


def evaluate(cfg: TrainConfig, data_fn: DataFactory, seeds, ks=(10, 20), *,
             noise_ratio: float = 0.0, transform=None, label: str = "",
             log_dir=None) -> EvalReport:
    """Train once per seed, evaluate on test; means over users, then over seeds."""
    report = EvalReport(cfg.variant, label=label)
    for seed in seeds:
        data = data_fn(seed, noise_ratio)
        if transform is not None:
            data = transform(data)
        run_cfg = replace(cfg, seed=seed)
        model = ReformModel(data.graph, data.profiles, run_cfg)
        log_path = Path(log_dir) / f"{report.name}_seed{seed}.jsonl" if log_dir else None
        res = fit(model, data, log_path=log_path)
        ue, ie = model.embeddings(res.params)
        metrics = topk_metrics(ue, ie, data.train_by_user, data.relevant("test"), ks)
        log.info("%s seed %d: %s", report.name, seed,
                 ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
        report.add(seed, metrics, res.best_epoch)
    return report


# -- ablations ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationSpec:
    kind: str  # full | avg_pool | no_mfa_mlp | mask_factor | noise
    factor: int | None = None
    factor_name: str = ""
    noise_ratio: float = 0.0

    @property
    def label(self) -> str:
        if self.kind == "mask_factor":
            return f"mask_factor({self.factor_name or self.factor})"
        if self.kind == "noise":
            return f"noise({self.noise_ratio:g})"
        return self.kind

    @classmethod
    def parse(cls, text: str, factor_names=()) -> "AblationSpec":
        """'full', 'avg_pool', 'no_mfa_mlp', 'mask_factor(cuisine type)', 'noise(0.5)'."""
        text = text.strip()
        m = re.fullmatch(r"(\w+)(?:\((.*)\))?", text)
        if not m:
            raise ValueError(f"cannot parse ablation {text!r}")
        kind, arg = m.group(1), m.group(2)
        if kind in ("full", "avg_pool", "no_mfa_mlp") and arg is None:
            return cls(kind)
        if kind == "mask_factor" and arg:
            names = list(factor_names)
            if arg in names:
                return cls(kind, names.index(arg), arg)
            if arg.isdigit():
                idx = int(arg)
                return cls(kind, idx, names[idx] if idx < len(names) else "")
            raise ValueError(f"unknown factor {arg!r}")
        if kind == "noise" and arg:
            r = float(arg)
            if not 0.0 <= r <= 1.0:
                raise ValueError("noise ratio must lie in [0, 1]")
            return cls(kind, noise_ratio=r)
        raise ValueError(f"unknown ablation variant {text!r}")


def run_ablation(spec: AblationSpec, data_fn: DataFactory, cfg: TrainConfig, seeds,
                 ks=(10, 20), log_dir=None) -> EvalReport:
    if spec.kind in ("full", "avg_pool", "no_mfa_mlp"):
        return evaluate(replace(cfg, variant=spec.kind), data_fn, seeds, ks, label=spec.label,
                        log_dir=log_dir)
    base = replace(cfg, variant="full")
    if spec.kind == "mask_factor":
        def mask(data: TrainData) -> TrainData:
            return TrainData(data.split, data.graph, data.profiles.masked(spec.factor))
        return evaluate(base, data_fn, seeds, ks, transform=mask, label=spec.label,
                        log_dir=log_dir)
    if spec.kind == "noise":
        return evaluate(base, data_fn, seeds, ks, noise_ratio=spec.noise_ratio,
                        label=spec.label, log_dir=log_dir)
    raise ValueError(f"unknown ablation variant {spec.kind!r}")


def sweep_n(data_fn: DataFactory, cfg: TrainConfig, n_values=(1, 2, 3, 4, 5), seeds=(0,),
            ks=(10, 20), log_dir=None) -> list[tuple[int, EvalReport]]:
    out = []
    for n in n_values:
        rep = evaluate(replace(cfg, n_keys=int(n)), data_fn, seeds, ks, label=f"n={n}",
                       log_dir=log_dir)
        out.append((int(n), rep))
    return out


# -- writers -----------------------------------------------------------------------------


def _split_metric(key: str) -> tuple[str, int]:
    name, k = key.split("@")
    return name, int(k)


def write_metrics_csv(path, reports, run_id: str) -> None:
    """Columns: run_id, variant, seed, metric, K, value."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "variant", "seed", "metric", "K", "value"])
        for rep in reports:
            for seed, metrics in zip(rep.seeds, rep.per_seed):
                for key in sorted(metrics):
                    name, k = _split_metric(key)
                    w.writerow([run_id, rep.name, seed, name, k, repr(float(metrics[key]))])


def write_plot_csv(path, rows) -> None:
    """Rows of (x, metric, value)."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "metric", "value"])
        for x, metric, value in rows:
            w.writerow([x, metric, repr(float(value))])


def plot_rows(points, metric: str = "recall@20") -> list[tuple]:
    """(x, EvalReport) pairs -> plot rows of seed-mean values."""
    return [(x, metric, rep.mean()[metric]) for x, rep in points]


def write_summary(path, reports, *, run_id: str, config_hash: str, baseline: str | None = None,
                  metric: str = "recall@20", extra: dict | None = None) -> dict:
    by_name = {r.name: r for r in reports}
    summary = {
        "run_id": run_id,
        "config_hash": config_hash,
        "variants": {r.name: {"seeds": r.seeds, "mean": r.mean(), "best_epochs": r.best_epochs}
                     for r in reports},
    }
    if baseline and baseline in by_name:
        summary["baseline"] = baseline
        summary["comparisons"] = {r.name: compare(r, by_name[baseline], metric)
                                  for r in reports if r.name != baseline}
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary
