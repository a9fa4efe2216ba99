"""Command-line entry point: train, sweep, stats-report, export-embeddings.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import ConfigError, RunConfig, load_config, serialize_config
from .data import (CohortSpec, Sample, default_suite, load_cohort, make_cohort, save_cohort,
                   stack)
from .evaluation import REPORT_FOOTER, REPORT_HEADER, write_report_csv
from .moments import compute_channel_stats, summarize_cohort_moments, write_summary_csv
from .net import (CheckpointError, check_checkpoint, encoder_forward, init_params,
                  load_checkpoint, save_checkpoint)
from .train import RunRecord, TrainingDivergence, fit, predict, write_epoch_csv

log = logging.getLogger("emsdg")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

DEFAULT_ALPHAS = (0.1, 0.3, 0.5, 0.7)
DEFAULT_PS = (0.5, 0.7, 0.9)
DEFAULT_LAYER_SETS = ((1,), (2,), (3,), (1, 2), (2, 3), (1, 3))
DEFAULT_LAYER_VARIANTS = ("EM1", "EM2")


class InputError(ValueError):
    pass


# --- cohorts -----------------------------------------------------------------

def cohort_specs(cfg: RunConfig) -> tuple[CohortSpec, list[CohortSpec]]:
    return default_suite(source_counts=cfg["data.source_counts"],
                         target_counts=cfg["data.target_counts"],
                         volume_size=cfg["data.volume_size"], seed=cfg["data.seed"],
                         targets=cfg["data.targets"])


def resolve_cohort(spec: CohortSpec, cache: str) -> list[Sample]:
    """Generate a cohort, going through the on-disk cache when one is configured."""
    if cache == "none":
        return make_cohort(spec)
    path = Path(cache) / f"{spec.name}.emvol"
    if path.exists():
        try:
            cached_spec, samples = load_cohort(path)
        except (ValueError, OSError) as exc:
            raise InputError(f"cohort cache {path}: {exc}") from None
        if cached_spec == spec:
            return samples
        log.info("cache %s was built from a different spec; regenerating", path)
    samples = make_cohort(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_cohort(samples, spec, path)
    return samples


def load_cohorts(cfg: RunConfig) -> tuple[list[Sample], dict[str, list[Sample]]]:
    src, tgts = cohort_specs(cfg)
    cache = cfg["data.cache"]
    return resolve_cohort(src, cache), {t.name: resolve_cohort(t, cache) for t in tgts}


# --- train -------------------------------------------------------------------

def _report_rows(setting: str, record: RunRecord) -> list[list[str]]:
    rows = []
    for name, res in record.targets.items():
        m = res["multiclass"]
        rows.append([setting, name] + [f"{m[k]:.4f}" for k in ("acc", "sen", "spe", "f1")])
    return rows


def _binary_rows(setting: str, record: RunRecord) -> list[list[str]]:
    rows = []
    for name, res in record.targets.items():
        m = res["one_vs_all"]
        rows.append([f"{setting} one-vs-all", name] + [f"{m[k]:.4f}" for k in ("acc", "sen", "spe", "f1")])
    return rows


def run_training(cfg: RunConfig, source, targets) -> tuple[RunRecord, dict]:
    em_cfg = cfg.em_config()
    return fit(source, targets, cfg.encoder_config(), em_cfg if em_cfg.enabled else None,
               cfg.train_config(), positive=cfg["eval.positive_class"])


def cmd_train(cfg: RunConfig) -> int:
    source, targets = load_cohorts(cfg)
    out = cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    try:
        record, best = run_training(cfg, source, targets)
    except TrainingDivergence as exc:
        (out / "record.json").write_text(exc.record.to_json() + "\n", encoding="utf-8")
        write_epoch_csv(exc.record, out / "metrics.csv")
        log.error("diverged at tensor %s: %s", exc.tensor_name, exc)
        return EXIT_NUMERIC
    (out / "record.json").write_text(record.to_json() + "\n", encoding="utf-8")
    write_epoch_csv(record, out / "metrics.csv")
    save_checkpoint(best, out / "best.ckpt")
    setting = cfg["em.variant"]
    write_report_csv(_report_rows(setting, record) + _binary_rows(setting, record),
                     out / "report.csv")
    log.info("best epoch %d, val F1 %.4f, mean target F1 %.4f", record.best_epoch,
             record.best_val_f1, record.mean_target_f1())
    return EXIT_OK


# --- sweep -------------------------------------------------------------------

def _floats(text: str, key: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--grid {key}", f"bad number list {text!r}") from None
    if not vals:
        raise ConfigError(f"--grid {key}", "empty list")
    return vals


def parse_layer_sets(text: str) -> tuple[tuple[int, ...], ...]:
    """``1,2,3,(1,2),(2,3),(1,3)`` -> ((1,), (2,), (3,), (1, 2), (2, 3), (1, 3))."""
    tokens = re.findall(r"\(([^)]*)\)|([^,()\s]+)", text)
    rest = re.sub(r"\([^)]*\)|[^,()\s]+|[,\s]", "", text)
    if rest or not tokens:
        raise ConfigError("--grid layers", f"cannot parse layer sets {text!r}")
    sets = []
    for group, single in tokens:
        try:
            items = tuple(int(v) for v in (group.split(",") if group else [single]) if v.strip())
        except ValueError:
            raise ConfigError("--grid layers", f"bad layer index in {text!r}") from None
        if not items:
            raise ConfigError("--grid layers", "empty layer set")
        sets.append(tuple(sorted(set(items))))
    return tuple(sets)


def parse_grid(text: str, variants: Optional[Sequence[str]] = None) -> list[tuple[str, dict]]:
    """Grid spec -> ordered list of (setting label, config overrides).

    ``alpha=0.1,0.3;p=0.5,0.9`` gives the alpha x p product (alpha outer);
    a bare ``alpha`` or ``p`` takes the default lists. ``layers=...`` or bare
    ``layers`` gives one cell per (variant, layer set), variant outer.
    """
    parts = {}
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        key, eq, value = chunk.partition("=")
        key = key.strip()
        if key not in ("alpha", "p", "layers"):
            raise ConfigError(f"--grid {key}", "grid keys are alpha, p and layers")
        if key in parts:
            raise ConfigError(f"--grid {key}", "given more than once")
        parts[key] = value.strip() if eq else ""
    if not parts:
        raise ConfigError("--grid", "empty grid")
    if "layers" in parts:
        if len(parts) > 1:
            raise ConfigError("--grid layers", "cannot be combined with alpha or p")
        sets = parse_layer_sets(parts["layers"]) if parts["layers"] else DEFAULT_LAYER_SETS
        cells = []
        for v in (variants or DEFAULT_LAYER_VARIANTS):
            for s in sets:
                label = f"Layer {s[0]}" if len(s) == 1 else "Layer (" + ",".join(map(str, s)) + ")"
                cells.append((f"{v} {label}", {"em.variant": v, "em.layers": s}))
        return cells
    alphas = _floats(parts["alpha"], "alpha") if parts.get("alpha") else DEFAULT_ALPHAS
    ps = _floats(parts["p"], "p") if parts.get("p") else DEFAULT_PS
    cells = []
    for v in (variants or (None,)):
        for a in alphas:
            for p in ps:
                prefix = f"{v} " if v else ""
                over = {"em.alpha": a, "em.p": p}
                if v:
                    over["em.variant"] = v
                cells.append((f"{prefix}alpha={a:g} p={p:g}", over))
    return cells


def _cell_config(cfg: RunConfig, overrides: dict) -> RunConfig:
    return cfg.replace(**{k.replace(".", "__"): v for k, v in overrides.items()})


def cmd_sweep(cfg: RunConfig, grid: str, variants: Optional[Sequence[str]] = None) -> int:
    cells = parse_grid(grid, variants)
    if variants is None and "layers" not in grid:
        cells = [(f"{cfg['em.variant']} {label}", over) for label, over in cells]
    cell_cfgs = [(label, _cell_config(cfg, over)) for label, over in cells]
    threads = _thread_cap()
    source, targets = load_cohorts(cfg)
    out = cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    log.info("sweep: %d cells x %d targets, %d worker(s)", len(cells), len(targets), threads)

    def run_cell(item):
        label, ccfg = item
        try:
            record, _ = run_training(ccfg, source, targets)
            return _report_rows(label, record), None
        except TrainingDivergence as exc:
            nan_rows = [[label, name] + ["nan"] * 4 for name in targets]
            return nan_rows, str(exc)

    failures = 0
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        fh.flush()
        # results come back in grid order; each cell is flushed as soon as it and
        # every earlier cell have finished
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for (label, _), (rows, err) in zip(cell_cfgs, pool.map(run_cell, cell_cfgs)):
                if err is not None:
                    failures += 1
                    log.error("cell %r failed: %s", label, err)
                writer.writerows(rows)
                fh.flush()
        fh.write(REPORT_FOOTER + "\n")
    return EXIT_NUMERIC if failures else EXIT_OK


def _thread_cap() -> int:
    raw = os.environ.get("EM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("EM_THREADS", f"must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("EM_THREADS", f"must be a positive integer, got {raw!r}")
    return n


# --- stats report ------------------------------------------------------------

@torch.no_grad()
def cohort_feature_stats(samples: Sequence[Sample], params, cfg: RunConfig, batch_size: int = 8):
    """Per-sample channel statistics at ``eval.stats_layer`` (0 = raw volume)."""
    enc = cfg.encoder_config()
    layer = cfg["eval.stats_layer"]
    x, _ = stack(samples)
    x = torch.from_numpy(x)
    stats = []
    for i in range(0, x.shape[0], batch_size):
        xb = x[i:i + batch_size]
        if layer == 0:
            feats = xb
        else:
            feats = encoder_forward(xb, params, enc, mode="eval").block_outputs[layer - 1]
        stats.append(compute_channel_stats(feats, cfg["em.eps"]))
    return stats


def _load_params(cfg: RunConfig, ckpt: Optional[str]):
    enc = cfg.encoder_config()
    if ckpt is None:
        return init_params(enc, cfg["seed"])
    try:
        params = load_checkpoint(ckpt)
    except OSError as exc:
        raise InputError(f"--ckpt: cannot read {ckpt}: {exc.strerror}") from None
    check_checkpoint(params, enc)
    return params


def cmd_stats_report(cfg: RunConfig, ckpt: Optional[str] = None) -> int:
    params = _load_params(cfg, ckpt)
    src, tgts = cohort_specs(cfg)
    stats, names = [], []
    for spec in [src] + tgts:
        samples = resolve_cohort(spec, cfg["data.cache"])
        per_batch = cohort_feature_stats(samples, params, cfg)
        stats.extend(per_batch)
        names.extend([spec.name] * len(per_batch))
    rows = summarize_cohort_moments(stats, names)
    out = cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(rows, out / "stats.csv")
    return EXIT_OK


# --- embeddings --------------------------------------------------------------

def cmd_export_embeddings(cfg: RunConfig, ckpt: Optional[str]) -> int:
    if ckpt is None:
        raise InputError("export-embeddings needs --ckpt")
    params = _load_params(cfg, ckpt)
    enc = cfg.encoder_config()
    source, targets = load_cohorts(cfg)
    out = cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    dim = enc.embedding_dim
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "cohort", "label"] + [f"e{i}" for i in range(dim)])
        for samples in [source] + list(targets.values()):
            x, y = stack(samples)
            _, _, emb = predict(torch.from_numpy(x), params, enc)
            for s, e in zip(samples, emb.numpy()):
                writer.writerow([s.id, s.cohort, s.label] + [f"{v:.8g}" for v in e])
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emsdg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "sweep", "stats-report", "export-embeddings"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value run config")
        p.add_argument("--out", help="output root (overrides io.out)")
        if name == "sweep":
            p.add_argument("--grid", required=True,
                           help="'alpha=0.1,0.3;p=0.5,0.9', 'layers=1,2,(1,2)', or bare 'alpha;p' / 'layers'")
            p.add_argument("--variants", help="comma-separated EM variants to sweep over")
        if name in ("stats-report", "export-embeddings"):
            p.add_argument("--ckpt", help="checkpoint file (EMCKPT v1)")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg = cfg.replace(io__out=args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sweep":
            variants = None
            if args.variants:
                variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
                for v in variants:
                    cfg.replace(em__variant=v)  # validates the name
            return cmd_sweep(cfg, args.grid, variants)
        if args.command == "stats-report":
            return cmd_stats_report(cfg, args.ckpt)
        return cmd_export_embeddings(cfg, args.ckpt)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
