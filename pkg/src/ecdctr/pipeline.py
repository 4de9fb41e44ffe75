"""Simulated-calendar orchestrator for the tri-level schedule.

Monthly tiny-model retrains feed the snapshot store, weekly complete-
model pre-training on recent natural data produces the transfer
checkpoint, and a daily ad-domain fine-tune is evaluated on the next
day's ad traffic. Months are a fixed 30 days and day 0 is a Monday.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen
from .config import RunConfig
from .datagen import DOMAIN_AD, DOMAIN_NATURAL, WorldConfig, gen_impressions, gen_world
from .embstore import EmbeddingSnapshot, SnapshotStore, save_snapshot
from .errors import ConfigError, OverlapError
from .metrics import DayMetric, EvalReport, gauc, groups_from_arrays, pooled_auc
from .models import (
    CompleteModel,
    TinyModel,
    field_cardinalities,
    load_checkpoint,
    save_checkpoint,
    transfer_parameters,
)

DAYS_PER_MONTH = 30
DAYS_PER_WEEK = 7

# which variants run which levels of the schedule
TPM_VARIANTS = {"full", "plus_tpm"}
CPM_VARIANTS = {"full", "plus_cpm", "source_only", "sample_merging"}
# variants whose complete model carries the pooled history features
HISTORY_VARIANTS = {"full", "plus_tpm"}
# variants whose daily model starts from the weekly checkpoint
TRANSFER_ARM_VARIANTS = {"full", "plus_cpm"}
# variants that only evaluate the weekly model, no daily fine-tune
EVAL_ONLY_VARIANTS = {"source_only", "sample_merging"}


@dataclass
class Calendar:
    horizon_days: int
    days_per_month: int = DAYS_PER_MONTH
    days_per_week: int = DAYS_PER_WEEK

    def month(self, day: int) -> int:
        return day // self.days_per_month

    def is_monday(self, day: int) -> bool:
        return day % self.days_per_week == 0

    def is_month_start(self, day: int) -> bool:
        return day % self.days_per_month == 0


@dataclass
class SchedulePlan:
    tpm_days: list[int]
    cpm_days: list[int]
    actr_days: list[int]
    start_day: int | None  # first Monday after warm-up; None if never reached


def schedule_plan(config: RunConfig) -> SchedulePlan:
    """Closed-form event days for a config (the oracle the run must match)."""
    horizon = config.horizon_months * DAYS_PER_MONTH
    cal = Calendar(horizon)
    warm_day = config.warmup_months * DAYS_PER_MONTH
    tpm_days = [d for d in range(horizon)
                if cal.is_month_start(d) and cal.month(d) >= config.warmup_months]
    if config.variant not in TPM_VARIANTS:
        tpm_days = []
    start_day = next((d for d in range(horizon)
                      if d >= warm_day and cal.is_monday(d)), None)
    cpm_days = [d for d in range(horizon) if cal.is_monday(d) and d >= warm_day]
    if config.variant not in CPM_VARIANTS:
        cpm_days = []
    actr_days = [] if start_day is None else list(range(start_day, horizon))
    return SchedulePlan(tpm_days, cpm_days, actr_days, start_day)


@dataclass
class PipelineState:
    config: RunConfig
    seed: int
    world: datagen.LatentWorld
    calendar: Calendar
    natural: np.ndarray  # sorted by day
    ad: np.ndarray
    cardinalities: dict[str, int]
    store: SnapshotStore
    out_dir: Path | None = None
    ckpt_dir: Path | None = None
    checkpoint_path: Path | None = None
    cpm_month_tag: int | None = None
    actr_model: CompleteModel | None = None
    events: list[str] = field(default_factory=list)
    report: EvalReport = None  # set by run_calendar

    @property
    def use_history(self) -> bool:
        return self.config.variant in HISTORY_VARIANTS

    def log(self, day: int, action: str, window: str, metrics: dict) -> None:
        parts = []
        for k, v in metrics.items():
            if isinstance(v, float):
                parts.append(f"{k}={v:.6f}")
            else:
                parts.append(f"{k}={v}")
        self.events.append(f"{day}\t{action}\t{window}\t{','.join(parts)}")


def _model_seed(*key) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def _shuffle_rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _window(samples: np.ndarray, d0: int, d1: int) -> np.ndarray:
    lo = np.searchsorted(samples["day"], d0)
    hi = np.searchsorted(samples["day"], d1)
    return samples[lo:hi]


def _history_for(state: PipelineState, model: CompleteModel, batch: np.ndarray):
    months = model.history_months
    hu = state.store.lookup_history_many("user", batch["user_id"], months=months)
    hi = state.store.lookup_history_many("item", batch["item_id"], months=months)
    return hu, hi


def _train_complete(state: PipelineState, model: CompleteModel,
                    samples: np.ndarray, rng: np.random.Generator) -> float:
    cfg = state.config
    total, steps = 0.0, 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(samples))
        for lo in range(0, len(samples), cfg.batch):
            batch = samples[perm[lo:lo + cfg.batch]]
            if len(batch) < 2:
                continue  # batch norm needs >= 2 rows
            hu = hi = None
            if model.use_history:
                hu, hi = _history_for(state, model, batch)
            total += model.train_step(batch, batch["label"], hu, hi)
            steps += 1
    return total / max(steps, 1)


# ---------------------------------------------------------------------------
# the three update levels


def tpm_monthly_update(state: PipelineState, day: int) -> None:
    """Retrain the tiny model over the last warmup_months of natural data,
    month by month, snapshotting user/item tables for the newest
    retention_k months."""
    cfg = state.config
    m = state.calendar.month(day)
    if m < cfg.warmup_months:
        state.log(day, "tpm_skipped", "-", {"reason": "insufficient_history"})
        state.report.warnings.append(f"day {day}: tpm skipped, insufficient history")
        return

    tiny = TinyModel(state.cardinalities, d=cfg.embed_dim, hidden=cfg.tiny_hidden,
                     learning_rate=cfg.tiny_learning_rate,
                     seed=_model_seed(state.seed, 0x791, day))
    rng = _shuffle_rng(state.seed, 0x792, day)
    loss = 0.0
    for mm in range(m - cfg.warmup_months, m):
        samples = _window(state.natural, mm * DAYS_PER_MONTH,
                          (mm + 1) * DAYS_PER_MONTH)
        for _ in range(cfg.epochs):
            perm = rng.permutation(len(samples))
            for lo in range(0, len(samples), cfg.tiny_batch):
                batch = samples[perm[lo:lo + cfg.tiny_batch]]
                if len(batch) == 0:
                    continue
                loss = tiny.train_step(batch, batch["label"])
        if mm >= m - cfg.retention_k:
            for side, table in (("user", tiny.user_table()),
                                ("item", tiny.item_table())):
                tags = state.store.tags(side)
                if tags and mm <= tags[-1]:
                    continue  # month already snapshotted by an earlier update
                snap = EmbeddingSnapshot.from_table(side, mm, table)
                evicted = state.store.put_snapshot(snap)
                if state.out_dir is not None:
                    save_snapshot(snap, _snap_path(state.out_dir, side, mm))
                    for old in evicted:
                        _snap_path(state.out_dir, old.side, old.month_tag).unlink(
                            missing_ok=True)
    tags = ":".join(map(str, state.store.tags("user")))
    state.log(day, "tpm", f"m{m - cfg.warmup_months}-m{m - 1}",
              {"loss": loss, "snapshots": tags})


def _snap_path(out_dir: Path, side: str, tag: int) -> Path:
    return out_dir / "snapshots" / f"{side}_{tag:03d}.snap"


def cpm_weekly_update(state: PipelineState, day: int) -> None:
    """Weekly complete-model pre-train on the last 30 days of natural data;
    the previous checkpoint is replaced."""
    cfg = state.config
    month = state.calendar.month(day)
    if state.use_history:
        max_tag = max(state.store.tags("user"))
        if max_tag >= month:
            raise OverlapError(
                f"snapshot month {max_tag} overlaps training month {month}")

    samples = _window(state.natural, day - DAYS_PER_MONTH, day)
    if cfg.variant == "sample_merging":
        samples = np.sort(
            np.concatenate([samples, _window(state.ad, day - DAYS_PER_MONTH, day)]),
            order="day", kind="stable")
    model = CompleteModel(
        state.cardinalities, d=cfg.embed_dim, hidden=cfg.hidden,
        use_history=state.use_history, history_months=cfg.history_months,
        share_attention=cfg.share_attention, learning_rate=cfg.learning_rate,
        seed=_model_seed(state.seed, 0xC9, day))
    loss = _train_complete(state, model, samples, _shuffle_rng(state.seed, 0xCA, day))

    path = state.ckpt_dir / "cpm_latest.ckpt"
    tmp = state.ckpt_dir / "cpm_latest.ckpt.tmp"
    save_checkpoint(model, tmp)
    os.replace(tmp, path)
    state.checkpoint_path = path
    state.cpm_month_tag = month
    state.log(day, "cpm", f"d{day - DAYS_PER_MONTH}-d{day - 1}",
              {"loss": loss, "n": len(samples)})


def actr_daily_update(state: PipelineState, day: int) -> None:
    """Daily ad-model refresh plus next-day-holdout evaluation."""
    cfg = state.config
    if cfg.variant in (TRANSFER_ARM_VARIANTS | EVAL_ONLY_VARIANTS) \
            and state.checkpoint_path is None:
        state.log(day, "actr_skipped", "-", {"reason": "missing_checkpoint"})
        state.report.warnings.append(f"day {day}: actr skipped, no checkpoint")
        return

    window = _window(state.ad, day - DAYS_PER_MONTH, day)
    assert len(window) == 0 or int(window["day"].max()) < day

    init_args = dict(d=cfg.embed_dim, hidden=cfg.hidden,
                     use_history=state.use_history,
                     history_months=cfg.history_months,
                     share_attention=cfg.share_attention,
                     learning_rate=cfg.learning_rate, bn_momentum=0.1)
    loss = float("nan")
    if cfg.variant in TRANSFER_ARM_VARIANTS:
        source = load_checkpoint(state.checkpoint_path, state.cardinalities,
                                 init_args)
        model = transfer_parameters(source, cfg.transfer_variant,
                                    seed=_model_seed(state.seed, 0xAC, day))
        loss = _train_complete(state, model, window,
                               _shuffle_rng(state.seed, 0xAD, day))
    elif cfg.variant in EVAL_ONLY_VARIANTS:
        model = load_checkpoint(state.checkpoint_path, state.cardinalities,
                                init_args)
    else:  # target_only, plus_tpm: fresh model, fine-tune only on ad data
        model = CompleteModel(state.cardinalities,
                              seed=_model_seed(state.seed, 0xAC, day), **init_args)
        loss = _train_complete(state, model, window,
                               _shuffle_rng(state.seed, 0xAD, day))
    state.actr_model = model

    eval_samples = _window(state.ad, day, day + 1)
    metric = _evaluate(state, model, eval_samples, day)
    state.report.days.append(metric)
    g = metric.gauc if metric.gauc is not None else float("nan")
    a = metric.auc if metric.auc is not None else float("nan")
    state.log(day, "actr", f"d{day - DAYS_PER_MONTH}-d{day - 1}",
              {"loss": loss, "eval_day": day, "gauc": g, "auc": a,
               "n": metric.n_samples})


def _evaluate(state: PipelineState, model: CompleteModel,
              samples: np.ndarray, day: int) -> DayMetric:
    if len(samples) == 0:
        return DayMetric(day, None, None, 0, 0)
    hu = hi = None
    if model.use_history:
        hu, hi = _history_for(state, model, samples)
    scores = model.predict(samples, hu, hi)
    groups = groups_from_arrays(samples["user_id"], scores,
                                samples["label"].astype(np.int64))
    defined = [g for g in groups if 0 < g.labels.sum() < len(g.labels)]
    g = gauc(groups) if defined else None
    a = pooled_auc(scores, samples["label"].astype(np.int64))
    return DayMetric(day, g, a, len(samples), len(defined))


# ---------------------------------------------------------------------------
# full run


def build_world_config(cfg: RunConfig) -> WorldConfig:
    return WorldConfig(
        users=cfg.users, items=cfg.items, latent_dim=cfg.latent_dim,
        months=cfg.horizon_months, drift_rate=cfg.drift_rate,
        ad_item_fraction=cfg.ad_item_fraction, ad_rotation=cfg.ad_rotation,
        natural_ctr=cfg.natural_ctr, ad_ctr=cfg.ad_ctr,
        natural_volume_month=cfg.natural_volume_month,
        ad_volume_month=cfg.ad_volume_month, score_scale=cfg.score_scale,
        popularity_scale=cfg.popularity_scale,
        ad_quality_scale=cfg.ad_quality_scale, user_exponent=cfg.user_exponent,
        item_exponent=cfg.item_exponent)


def generate_all_data(world: datagen.LatentWorld):
    """Per-month generation for both domains, concatenated and day-sorted."""
    cfg = world.config
    nat, ad = [], []
    for m in range(cfg.months):
        rng = (m * DAYS_PER_MONTH, (m + 1) * DAYS_PER_MONTH)
        nat.append(gen_impressions(world, DOMAIN_NATURAL, rng, cfg.natural_volume_month))
        ad.append(gen_impressions(world, DOMAIN_AD, rng, cfg.ad_volume_month))
    return np.concatenate(nat), np.concatenate(ad)


def run_calendar(config: RunConfig, seed: int,
                 out_dir: Path | None = None) -> tuple[EvalReport, list[str]]:
    """Execute one variant/seed over the simulated horizon.

    Returns the evaluation report and the event-log lines. When out_dir
    is given, snapshots, the live checkpoint, events.log and report.json
    are written under it.
    """
    config.validate()
    tmp = None
    if out_dir is None:
        # checkpoints still need a file home for the float32 round trip
        tmp = tempfile.TemporaryDirectory(prefix="ecdctr_")
        ckpt_dir = Path(tmp.name)
    else:
        out_dir = Path(out_dir)
        (out_dir / "snapshots").mkdir(parents=True, exist_ok=True)
        ckpt_dir = out_dir

    world = gen_world(build_world_config(config), seed)
    natural, ad = generate_all_data(world)
    horizon = config.horizon_months * DAYS_PER_MONTH
    state = PipelineState(
        config=config, seed=seed, world=world, calendar=Calendar(horizon),
        natural=natural, ad=ad,
        cardinalities=field_cardinalities(world.config),
        store=SnapshotStore(retention_k=config.retention_k),
        out_dir=out_dir, ckpt_dir=ckpt_dir)
    state.report = EvalReport(variant=config.variant, seed=seed,
                              config_fingerprint=config.fingerprint())

    plan = schedule_plan(config)
    if plan.start_day is None:
        state.report.warnings.append(
            "warm-up never completed: horizon shorter than warm-up period")

    tpm_days, cpm_days, actr_days = (set(plan.tpm_days), set(plan.cpm_days),
                                     set(plan.actr_days))
    for day in range(horizon):
        if day in tpm_days:
            tpm_monthly_update(state, day)
        if day in cpm_days:
            cpm_weekly_update(state, day)
        if day in actr_days:
            actr_daily_update(state, day)

    if out_dir is not None:
        (out_dir / "events.log").write_bytes(
            ("\n".join(state.events) + "\n").encode() if state.events else b"")
        _write_report_json(state, out_dir / "report.json")
        (out_dir / "config.resolved").write_text(config.to_text())
    if tmp is not None:
        tmp.cleanup()
    return state.report, state.events


def report_summary(report: EvalReport, config: RunConfig) -> dict:
    """Mean GAUC/AUC over the final simulated month."""
    start = (config.horizon_months - 1) * DAYS_PER_MONTH
    try:
        g, a = report.mean_over(start)
    except Exception:
        g = a = float("nan")
    return {"gauc": g, "auc": a, "eval_start_day": start}


def _write_report_json(state: PipelineState, path: Path) -> None:
    import json

    report, config = state.report, state.config
    summary = report_summary(report, config)
    payload = {
        "variant": report.variant,
        "seed": report.seed,
        "config_fingerprint": report.config_fingerprint,
        "summary": summary,
        "warnings": report.warnings,
        "days": [
            {"day": d.day, "gauc": d.gauc, "auc": d.auc,
             "n_samples": d.n_samples, "n_groups": d.n_groups}
            for d in report.days
        ],
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
