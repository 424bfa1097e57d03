"""Command-line front end.

Every subcommand reads one TOML config (``--config``); flags override config
keys. Artifacts land in the configured output directory:

  ingest   id_map.json, split.tsv, stats.json
  profile  profiles.jsonl, profile_meta.json, llm_cache.jsonl
  encode   embeddings.bin, encode_meta.json
  synth    reviews.jsonl, synth_truth.json, factors.json, synth_meta.json, then ingest + profile
  train    checkpoint.ckpt, train_log.jsonl
  eval     metrics.csv, summary.json
  ablate   ablate_metrics.csv, ablate_summary.json, ablate_plot.csv
  sweep    sweep_metrics.csv, sweep_table.csv, sweep_plot.csv, sweep_summary.json
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, override, require_path
from .dataset import (DatasetFormatError, IdMap, build_graph, k_core_filter, load_reviews,
                      read_split_tsv, split_interactions, split_stats, write_split_tsv)
from .encoder import (Encoder, EmbeddingFormatError, EncoderError, encode_profiles,
                      load_embedding_file, save_embeddings)
from .evaluation import (AblationSpec, EvalReport, plot_rows, run_ablation, sweep_n,
                         write_metrics_csv, write_plot_csv, write_summary)
from .metrics import topk_metrics
from .mfa import NumericalError
from .pipeline import prepare
from .rpg import (BackendError, ResponseCache, build_profiles, load_template, make_backend,
                  read_profiles, write_profiles, DEFAULT_TEMPLATE)
from .synth import generate, write_synth
from .trainer import (ReformModel, TrainData, TrainingError, fit, load_checkpoint,
                      save_checkpoint)

log = logging.getLogger("reform")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2  # bad config, bad flag, missing input path
EXIT_BACKEND = 3  # LLM or embedding service failure
EXIT_DATA = 4  # malformed dataset, embedding file or checkpoint
EXIT_TRAINING = 5  # non-finite loss or attention logits

EXIT_HELP = """exit codes:
  0  success
  1  unexpected error
  2  configuration error or missing input path
  3  LLM / embedding backend failure
  4  malformed dataset, embedding file or checkpoint
  5  numerical failure during training
"""


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _stamp(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, **extra}


# -- shared loading -------------------------------------------------------------------


def _reviews_path(cfg: RunConfig) -> Path:
    if cfg.data.reviews:
        return require_path(cfg, cfg.data.reviews, "review corpus")
    synth = cfg.out / "reviews.jsonl"
    if synth.exists():
        return synth
    raise ConfigError("data.reviews is not set and no synthetic corpus exists in the output dir")


def _kept_reviews(cfg: RunConfig):
    reviews, malformed = load_reviews(_reviews_path(cfg), cfg.data.format)
    return k_core_filter(reviews, cfg.data.k_core), malformed, len(reviews)


def _load_split(cfg: RunConfig):
    out = cfg.out
    id_map = IdMap.load(require_path(cfg, str(out / "id_map.json"), "id map (run ingest first)"))
    split = read_split_tsv(require_path(cfg, str(out / "split.tsv"), "split (run ingest first)"),
                           id_map)
    return split


def _template(cfg: RunConfig) -> str:
    if cfg.data.template:
        return load_template(require_path(cfg, cfg.data.template, "prompt template"))
    return DEFAULT_TEMPLATE


def _load_train_data(cfg: RunConfig) -> TrainData:
    split = _load_split(cfg)
    emb = require_path(cfg, str(cfg.out / "embeddings.bin"), "embeddings (run encode first)")
    store = load_embedding_file(emb, expect={"M": cfg.factor_set().M, "users": split.num_users,
                                             "items": split.num_items})
    return TrainData(split, build_graph(split), store)


def _data_factory(cfg: RunConfig):
    """(seed, noise) -> TrainData.

    The split and profiles always come from the root seed, so every eval seed
    sees the same data and only the training randomness varies.
    """
    kept_all, _, _ = _kept_reviews(cfg)
    fs = cfg.factor_set()
    cache = ResponseCache(cfg.out / "llm_cache.jsonl")
    memo: dict = {}

    def build(seed: int, noise: float) -> TrainData:
        if noise not in memo:
            memo[noise] = prepare(kept_all, fs, seed=cfg.seed, k_core=cfg.data.k_core,
                                  noise_ratio=noise, llm=cfg.llm, encoder=cfg.encoder,
                                  cache=cache, n_max=cfg.data.n_max, workers=cfg.workers).data
        return memo[noise]
    return build


# -- subcommands ------------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args=None) -> int:
    kept, malformed, total = _kept_reviews(cfg)
    split = split_interactions(kept, seed=cfg.seed)
    graph = build_graph(split)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    split.id_map.save(out / "id_map.json")
    write_split_tsv(out / "split.tsv", split)
    stats = split_stats(kept, split, graph, cfg.data.k_core)
    stats.update(_stamp(cfg, loaded=total, malformed=malformed))
    _write_json(out / "stats.json", stats)
    print(f"ingest: {stats['users']} users, {stats['items']} items, "
          f"{stats['interactions']} interactions ({malformed} malformed lines skipped)")
    return EXIT_OK


def cmd_profile(cfg: RunConfig, args=None) -> int:
    noise = getattr(args, "noise_ratio", None)
    noise = 0.0 if noise is None else noise
    if not 0.0 <= noise <= 1.0:
        raise ConfigError("--noise-ratio must lie in [0, 1]")
    split = _load_split(cfg)
    kept, _, _ = _kept_reviews(cfg)
    fs = cfg.factor_set()
    backend = make_backend(cfg.llm, fs)
    cache = ResponseCache(cfg.out / "llm_cache.jsonl")
    run = build_profiles(kept, split, fs, backend, cache, seed=cfg.seed, n_max=cfg.data.n_max,
                         noise_ratio=noise, workers=cfg.workers, template=_template(cfg))
    write_profiles(cfg.out / "profiles.jsonl", run.users + run.items, fs)
    meta = _stamp(cfg, noise_ratio=noise, backend_calls=run.backend_calls,
                  estimated_tokens=run.est_tokens, prompts=run.prompts,
                  users=len(run.users), items=len(run.items))
    _write_json(cfg.out / "profile_meta.json", meta)
    print(f"profile: {len(run.users)} users, {len(run.items)} items, "
          f"{run.backend_calls} backend calls, ~{run.est_tokens} prompt tokens")
    return EXIT_OK


def cmd_encode(cfg: RunConfig, args=None) -> int:
    fs = cfg.factor_set()
    prof = require_path(cfg, str(cfg.out / "profiles.jsonl"), "profiles (run profile first)")
    users, items = read_profiles(prof, fs)
    store = encode_profiles(Encoder(cfg.encoder), users, items)
    save_embeddings(cfg.out / "embeddings.bin", store)
    _write_json(cfg.out / "encode_meta.json", _stamp(cfg, M=store.M, d=store.d,
                                                     users=len(users), items=len(items)))
    print(f"encode: {len(users)} + {len(items)} profile matrices of shape {store.M}x{store.d}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args=None) -> int:
    data = generate(cfg.synth)
    meta = write_synth(cfg.out, data, cfg.synth)
    print(f"synth: {meta['reviews']} reviews (expected {meta['expected_interactions']:.1f})")
    cfg = replace(cfg, data=replace(cfg.data, reviews=str((cfg.out / "reviews.jsonl").resolve()),
                                    format="jsonl"))
    cmd_ingest(cfg)
    return cmd_profile(cfg, args)


def cmd_train(cfg: RunConfig, args=None) -> int:
    data = _load_train_data(cfg)
    tc = replace(cfg.train, seed=cfg.seed)
    model = ReformModel(data.graph, data.profiles, tc)
    res = fit(model, data, log_path=cfg.out / "train_log.jsonl")
    save_checkpoint(cfg.out / "checkpoint.ckpt", res.params, tc, res.best_epoch, res.best_metric,
                    extra={"run_config_hash": cfg.hash(), "seed": cfg.seed})
    print(f"train: best epoch {res.best_epoch}, val recall@{tc.eval_k} {res.best_metric:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args=None) -> int:
    ckpt = getattr(args, "checkpoint", None) or str(cfg.out / "checkpoint.ckpt")
    params, tc, header = load_checkpoint(require_path(cfg, ckpt, "checkpoint"))
    data = _load_train_data(cfg)
    model = ReformModel(data.graph, data.profiles, tc)
    ue, ie = model.embeddings(params)
    metrics = topk_metrics(ue, ie, data.train_by_user, data.relevant("test"),
                           tuple(cfg.eval.ks))
    rep = EvalReport(tc.variant)
    rep.add(tc.seed, metrics, header.get("epoch", 0))
    write_metrics_csv(cfg.out / "metrics.csv", [rep], cfg.hash())
    write_summary(cfg.out / "summary.json", [rep], run_id=cfg.hash(), config_hash=cfg.hash(),
                  extra={"checkpoint": str(ckpt), "checkpoint_config_hash": header["config_hash"]})
    print("eval: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
    return EXIT_OK


def _summary_key(cfg: RunConfig) -> str:
    ks = [int(k) for k in cfg.eval.ks]
    return f"recall@{cfg.train.eval_k if cfg.train.eval_k in ks else max(ks)}"


def _seeds(cfg: RunConfig, args) -> list[int]:
    text = getattr(args, "seeds", None)
    if text:
        return [int(s) for s in text.split(",")]
    return [int(s) for s in cfg.eval.seeds]


def cmd_ablate(cfg: RunConfig, args=None) -> int:
    fs = cfg.factor_set()
    specs = []
    for v in (getattr(args, "variant", None) or "full").split(","):
        v = v.strip()
        if v == "mask_factor":
            factor = getattr(args, "factor", None)
            if not factor:
                raise ConfigError("--variant mask_factor needs --factor NAME")
            v = f"mask_factor({factor})"
        elif v == "noise":
            ratio = getattr(args, "noise_ratio", None)
            if ratio is None:
                raise ConfigError("--variant noise needs --noise-ratio R")
            v = f"noise({ratio})"
        try:
            specs.append(AblationSpec.parse(v, fs.names))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if not any(s.kind == "full" for s in specs):
        specs.insert(0, AblationSpec("full"))
    seeds = _seeds(cfg, args)
    data_fn = _data_factory(cfg)
    log_dir = cfg.out / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    reports = [run_ablation(s, data_fn, cfg.train, seeds, tuple(cfg.eval.ks), log_dir)
               for s in specs]
    names = [r.name for r in reports]
    baseline = cfg.eval.baseline if cfg.eval.baseline in names else "full"
    key = _summary_key(cfg)
    write_metrics_csv(cfg.out / "ablate_metrics.csv", reports, cfg.hash())
    masked = [s.factor_name for s in specs if s.kind == "mask_factor"]
    summary = write_summary(cfg.out / "ablate_summary.json", reports, run_id=cfg.hash(),
                            config_hash=cfg.hash(), baseline=baseline if len(reports) > 1 else None,
                            metric=key, extra={"masked_factors": masked, "seeds": seeds})
    noise_points = [(s.noise_ratio, r) for s, r in zip(specs, reports) if s.kind == "noise"]
    if noise_points:
        write_plot_csv(cfg.out / "ablate_plot.csv", plot_rows(noise_points, key))
    for r in reports:
        print(f"ablate: {r.name}: mean {key} {r.mean()[key]:.4f}")
    for name, c in summary.get("comparisons", {}).items():
        p = "n/a" if c["p_value"] is None else f"{c['p_value']:.4f}"
        print(f"ablate: {name} vs {baseline}: {100 * c['relative_improvement']:+.2f}% (p={p})")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args=None) -> int:
    text = getattr(args, "n", None) or "1,2,3,4,5"
    try:
        n_values = [int(x) for x in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--n expects comma-separated integers, got {text!r}") from exc
    if any(n < 1 for n in n_values):
        raise ConfigError("--n values must be >= 1")
    seeds = _seeds(cfg, args)
    points = sweep_n(_data_factory(cfg), cfg.train, n_values, seeds, tuple(cfg.eval.ks))
    reports = [r for _, r in points]
    write_metrics_csv(cfg.out / "sweep_metrics.csv", reports, cfg.hash())
    metrics = sorted(reports[0].mean())
    with (cfg.out / "sweep_table.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n"] + metrics)
        for n, r in points:
            w.writerow([n] + [repr(r.mean()[m]) for m in metrics])
    key = _summary_key(cfg)
    write_plot_csv(cfg.out / "sweep_plot.csv", plot_rows(points, key))
    write_summary(cfg.out / "sweep_summary.json", reports, run_id=cfg.hash(),
                  config_hash=cfg.hash(), extra={"n_values": n_values, "seeds": seeds})
    for n, r in points:
        print(f"sweep: n={n}: mean {key} {r.mean()[key]:.4f}")
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "profile": cmd_profile, "encode": cmd_encode,
            "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="TOML run config")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-exact mode")
    common.add_argument("--threads", type=int, help="cap on worker and BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="reform", description="Review-driven factor recommender.",
                                epilog=EXIT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="load, k-core filter and split reviews")
    sp = sub.add_parser("profile", parents=[common], help="generate factor profiles")
    sp.add_argument("--noise-ratio", type=float, default=0.0)
    sub.add_parser("encode", parents=[common], help="encode profiles into matrices")
    sp = sub.add_parser("synth", parents=[common], help="synthetic corpus with planted factors")
    sp.add_argument("--noise-ratio", type=float, default=0.0)
    sp = sub.add_parser("train", parents=[common], help="train and checkpoint")
    sp.add_argument("--variant", choices=("full", "avg_pool", "no_mfa_mlp"))
    sp.add_argument("--n-keys", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp = sub.add_parser("eval", parents=[common], help="test metrics of a checkpoint")
    sp.add_argument("--checkpoint")
    sp = sub.add_parser("ablate", parents=[common], help="multi-seed ablations")
    sp.add_argument("--variant", help="comma list: full, avg_pool, no_mfa_mlp, mask_factor, "
                                      "noise, mask_factor(NAME), noise(R)")
    sp.add_argument("--factor", help="factor name for --variant mask_factor")
    sp.add_argument("--noise-ratio", type=float, help="ratio for --variant noise")
    sp.add_argument("--seeds", help="comma list overriding eval.seeds")
    sp = sub.add_parser("sweep", parents=[common], help="n-key sweep")
    sp.add_argument("--n", help="comma list of key counts (default 1,2,3,4,5)")
    sp.add_argument("--seeds", help="comma list overriding eval.seeds")
    return p


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    cfg = override(cfg, "", output_dir=args.output_dir, seed=args.seed)
    if args.seed is not None:
        cfg = override(cfg, "synth", seed=args.seed)
    if args.deterministic:
        cfg = override(cfg, "", workers=1)
    elif args.threads:
        cfg = override(cfg, "", workers=args.threads)
    if args.command == "train":
        cfg = override(cfg, "train", variant=args.variant, n_keys=args.n_keys,
                       max_epochs=args.epochs, learning_rate=args.lr)
    if args.command == "synth" and args.noise_ratio:
        cfg = override(cfg, "synth", noise_rate=args.noise_ratio)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        threads = 1 if args.deterministic else args.threads
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                return COMMANDS[args.command](cfg, args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, EncoderError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DatasetFormatError, EmbeddingFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericalError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except FileNotFoundError as exc:
        print(f"error: missing path {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
