"""Command-line entry point.

Subcommands: generate, run, ablate, merge, report. Configuration is a
plain key=value file plus --set overrides; the ECDCTR_OUT environment
variable overrides the output root when --out is not given.

Exit codes: 0 ok, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
import traceback
from pathlib import Path

from . import datagen, report as report_mod
from .config import RunConfig, apply_overrides, load_config
from .datagen import DOMAIN_AD, DOMAIN_NATURAL, gen_impressions, gen_world
from .embstore import SnapshotStore, load_snapshot
from .errors import ConfigError, EcdctrError
from .models import field_cardinalities, load_checkpoint
from .pipeline import (
    DAYS_PER_MONTH,
    build_world_config,
    report_summary,
    run_calendar,
)
from .report import ResultRow, emit_report, render_daily_series, render_figures

ARM_PRESETS: dict[str, dict] = {
    "target_only": {"variant": "target_only"},
    "plus_tpm": {"variant": "plus_tpm"},
    "plus_cpm": {"variant": "plus_cpm"},
    "full": {"variant": "full"},
    "source_only": {"variant": "source_only"},
    "sample_merging": {"variant": "sample_merging"},
    "history_1": {"variant": "full", "history_months": 1},
    "history_2": {"variant": "full", "history_months": 2},
    "history_3": {"variant": "full", "history_months": 3},
    "transfer_embeddings_only": {"variant": "full", "transfer_variant": "embeddings_only"},
    "transfer_mlp_wo_bn": {"variant": "full", "transfer_variant": "mlp_wo_bn"},
    "transfer_all_with_bn": {"variant": "full", "transfer_variant": "all_with_bn"},
    "transfer_all": {"variant": "full", "transfer_variant": "all"},
    "dim_4": {"variant": "full", "embed_dim": 4},
    "dim_8": {"variant": "full", "embed_dim": 8},
    "dim_16": {"variant": "full", "embed_dim": 16},
    "dim_32": {"variant": "full", "embed_dim": 32},
}

DEFAULT_ARMS = ("target_only", "plus_tpm", "plus_cpm", "full",
                "source_only", "sample_merging", "history_1", "history_2")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = RunConfig()
        apply_overrides(cfg, overrides)
        cfg.validate()
    return cfg


def _out_root(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("ECDCTR_OUT")
    if env:
        return Path(env)
    return Path(cfg.out_dir)


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output dir {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_root(args, cfg) / "data"
    _prepare_dir(out, args.force)
    seed = cfg.seeds[0]
    world = gen_world(build_world_config(cfg), seed)
    for m in range(cfg.horizon_months):
        day_range = (m * DAYS_PER_MONTH, (m + 1) * DAYS_PER_MONTH)
        for domain, name, volume in (
                (DOMAIN_NATURAL, "natural", cfg.natural_volume_month),
                (DOMAIN_AD, "ad", cfg.ad_volume_month)):
            samples = gen_impressions(world, domain, day_range, volume)
            datagen.write_samples(samples, out / f"{name}_m{m:02d}.tsv")
    print(f"wrote {2 * cfg.horizon_months} impression files to {out}")
    return 0


def _run_one(cfg: RunConfig, seed: int, out_dir: Path) -> ResultRow:
    out_dir.mkdir(parents=True, exist_ok=True)
    rep, _events = run_calendar(cfg, seed, out_dir=out_dir)
    summary = report_summary(rep, cfg)
    days = json.loads((out_dir / "report.json").read_text())["days"]
    render_daily_series(days, out_dir / "daily_metrics.png")
    return ResultRow(variant=cfg.variant, seed=seed,
                     gauc=summary["gauc"], auc=summary["auc"])


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    out = _out_root(args, cfg)
    _prepare_dir(out, args.force)
    rows = [_run_one(cfg, seed, out / f"seed_{seed}") for seed in cfg.seeds]
    emit_report(rows, out / "report.csv", "csv")
    emit_report(rows, out / "report.md", "markdown")
    render_figures(rows, out)
    print(f"report written to {out / 'report.csv'}")
    return 0


def _ablate_worker(job):
    arm, cfg, seed, out_dir = job
    try:
        row = _run_one(cfg, seed, out_dir)
        row.variant = arm
        return row
    except Exception:
        traceback.print_exc()
        return ResultRow(variant=arm, seed=seed, gauc=float("nan"),
                         auc=float("nan"), failed=True)


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    arms = args.arms.split(",") if args.arms else list(DEFAULT_ARMS)
    unknown = [a for a in arms if a not in ARM_PRESETS]
    if unknown:
        raise ConfigError(f"unknown ablation arms: {', '.join(unknown)}")
    out = _out_root(args, base)
    _prepare_dir(out, args.force)

    jobs = []
    for arm in arms:
        cfg = base.replace(**ARM_PRESETS[arm])
        for seed in cfg.seeds:
            jobs.append((arm, cfg, seed, out / arm / f"seed_{seed}"))
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            rows = pool.map(_ablate_worker, jobs)
    else:
        rows = [_ablate_worker(j) for j in jobs]

    emit_report(rows, out / "report.csv", "csv")
    emit_report(rows, out / "report.md", "markdown")
    render_figures(rows, out)
    n_failed = sum(r.failed for r in rows)
    print(f"{len(rows) - n_failed}/{len(rows)} runs ok; "
          f"report written to {out / 'report.csv'}")
    return 0


def cmd_merge(args) -> int:
    cfg = _resolve_config(args)
    cards = field_cardinalities(build_world_config(cfg))
    init_args = dict(d=cfg.embed_dim, hidden=cfg.hidden, use_history=True,
                     history_months=cfg.history_months,
                     share_attention=cfg.share_attention,
                     learning_rate=cfg.learning_rate, bn_momentum=0.1)
    model = load_checkpoint(args.checkpoint, cards, init_args)

    store = SnapshotStore(retention_k=cfg.retention_k)
    snaps = sorted(Path(args.snapshots).glob("*.snap"))
    if not snaps:
        raise ConfigError(f"no snapshot files under {args.snapshots}")
    by_side = {"user": [], "item": []}
    for p in snaps:
        s = load_snapshot(p)
        by_side[s.side].append(s)
    for side in ("user", "item"):
        for s in sorted(by_side[side], key=lambda s: s.month_tag):
            store.put_snapshot(s)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for side, attn in (("user", model.attn_user), ("item", model.attn_item)):
        merged = store.merge_tables(side, attn)
        merged.save(out / f"{side}_merged.snap")
    print(f"merged tables written to {out}")
    return 0


def cmd_report(args) -> int:
    rows = report_mod.read_csv(args.results)
    out = Path(args.out) if args.out else Path(args.results).parent
    out.mkdir(parents=True, exist_ok=True)
    emit_report(rows, out / "report.md", "markdown")
    figs = render_figures(rows, out)
    print(f"markdown and {len(figs)} figure(s) written to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecdctr",
                description="Tri-level cross-domain CTR transfer pipeline "
                            "on synthetic two-domain data.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, force=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--out", help="output root (default: ECDCTR_OUT or "
                                      "the config's out_dir)")
        if force:
            sp.add_argument("--force", action="store_true",
                            help="allow writing into a non-empty directory")

    sp = sub.add_parser("generate", help="write impression files per domain/month")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("run", help="run the pipeline for one variant")
    common(sp)
    sp.add_argument("--variant", choices=sorted(
        {"full", "target_only", "plus_tpm", "plus_cpm", "source_only",
         "sample_merging"}), help="pipeline variant (default: full)")
    sp.add_argument("--seeds", help="comma-separated seeds (default: 1,2,3)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ablate", help="run an ablation grid and combine results")
    common(sp)
    sp.add_argument("--arms",
                    help="comma-separated arm names (default: %s)"
                         % ",".join(DEFAULT_ARMS))
    sp.add_argument("--seeds", help="comma-separated seeds (default: 1,2,3)")
    sp.add_argument("--jobs", type=int, default=1,
                    help="parallel workers (default 1)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("merge", help="fold 3 monthly snapshots into serving tables")
    common(sp, force=False)
    sp.add_argument("--checkpoint", required=True,
                    help="fine-tuned complete-model checkpoint")
    sp.add_argument("--snapshots", required=True, help="snapshot directory")
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("report", help="re-emit markdown and figures from a CSV")
    sp.add_argument("--results", required=True, help="report.csv path")
    sp.add_argument("--out", help="output directory (default: alongside the CSV)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EcdctrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
