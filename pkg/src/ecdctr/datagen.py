"""Synthetic two-domain impression-log generator.

A latent-factor world produces a dense "natural" domain and a sparse
"ad" domain from the same user/item factors. Preference drift is a slow
norm-preserving rotation of the user factors in half of the coordinate
planes, so long-term identity survives while short-term taste moves.
Each item carries a slowly rotating scalar quality shared by both
domains, plus an ad-only quality offset; the ad domain additionally
scores items through a fixed rotation of half the item-factor
dimensions and a lower bias. Shared quality and the unrotated
dimensions make cross-domain transfer genuinely useful, while the
ad-only offset and the rotated dimensions leave a gap that only
in-domain data can close.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

DAYS_PER_MONTH = 30

KEY_FIELDS = ("user_id", "item_id", "category_id", "user_profile", "item_profile")
CONTEXT_FIELDS = tuple(f"ctx_{i}" for i in range(10))
COMPLETE_FIELDS = KEY_FIELDS + CONTEXT_FIELDS

N_CATEGORIES = 40
PROFILE_BUCKETS = 20
CONTEXT_VOCAB = 16

SAMPLE_DTYPE = np.dtype(
    [("day", np.int32), ("domain", np.int8), ("label", np.int8)]
    + [(f, np.int32) for f in COMPLETE_FIELDS]
)

DOMAIN_NATURAL = 0
DOMAIN_AD = 1
DOMAIN_NAMES = {DOMAIN_NATURAL: "natural", DOMAIN_AD: "ad"}
DOMAIN_CODES = {v: k for k, v in DOMAIN_NAMES.items()}


@dataclass
class WorldConfig:
    users: int = 20000
    items: int = 5000
    latent_dim: int = 8
    months: int = 8
    drift_rate: float = 0.2  # radians/month on the drifting planes
    ad_item_fraction: float = 0.1
    ad_rotation: float = 1.6  # fixed item-factor rotation for the ad domain
    natural_ctr: float = 0.08
    ad_ctr: float = 0.02
    natural_volume_month: int = 200000
    ad_volume_month: int = 20000
    score_scale: float = 1.8  # logit spread around the calibrated bias
    popularity_scale: float = 0.7  # std of the shared per-item quality
    ad_quality_scale: float = 1.6  # std of the ad-only per-item quality offset
    user_exponent: float = 0.85  # power-law skew of per-user activity
    item_exponent: float = 0.4  # milder power-law skew of per-item exposure


@dataclass
class LatentWorld:
    config: WorldConfig
    seed: int
    user_factors: np.ndarray  # (U, k)
    item_factors: np.ndarray  # (I, k)
    drift_planes: np.ndarray  # (k,) permutation; consecutive pairs are planes
    n_drift_planes: int  # only the first n pairs rotate
    ad_item_subset: np.ndarray  # sorted item ids available as ads
    ad_item_factors: np.ndarray  # item factors under the ad-domain rotation
    item_quality: np.ndarray  # (I, 2) rotating quality phases, shared by domains
    ad_item_quality: np.ndarray  # (I,) persistent ad-only quality offset
    domain_bias: dict[int, float]
    item_category: np.ndarray
    user_profile: np.ndarray
    item_profile: np.ndarray
    user_weights: np.ndarray  # activity distribution over users
    item_weights: np.ndarray

    @property
    def horizon_days(self) -> int:
        return self.config.months * DAYS_PER_MONTH


def _plane_rotate(x: np.ndarray, perm: np.ndarray, n_planes: int, angle: float) -> np.ndarray:
    """Rotate by `angle` in the first n_planes coordinate pairs of perm."""
    out = x.copy()
    c, s = np.cos(angle), np.sin(angle)
    for p in range(n_planes):
        i, j = perm[2 * p], perm[2 * p + 1]
        a, b = x[:, i], x[:, j]
        out[:, i] = c * a - s * b
        out[:, j] = s * a + c * b
    return out


def drifted_user_factors(world: LatentWorld, day: float) -> np.ndarray:
    """User factors after `day / 30` months of drift."""
    angle = world.config.drift_rate * day / DAYS_PER_MONTH
    if angle == 0.0:
        return world.user_factors
    return _plane_rotate(world.user_factors, world.drift_planes,
                         world.n_drift_planes, angle)


def _raw_scores(world: LatentWorld, users: np.ndarray, items: np.ndarray,
                day: float, domain: int) -> np.ndarray:
    u = drifted_user_factors(world, day)[users]
    if domain == DOMAIN_AD:
        v = world.ad_item_factors[items]
    else:
        v = world.item_factors[items]
    affinity = np.einsum("nk,nk->n", u, v)
    angle = world.config.drift_rate * day / DAYS_PER_MONTH
    quality = (np.cos(angle) * world.item_quality[items, 0]
               + np.sin(angle) * world.item_quality[items, 1])
    if domain == DOMAIN_AD:
        quality = quality + world.ad_item_quality[items]
    return world.config.score_scale * (affinity + quality)


def _calibrate_bias(world: LatentWorld, domain: int, target_ctr: float,
                    rng: np.random.Generator) -> float:
    """Bisect the domain bias so the mean click probability hits target_ctr."""
    n = 50000
    users = rng.choice(world.config.users, size=n, p=world.user_weights)
    if domain == DOMAIN_AD:
        items = world.ad_item_subset[
            rng.choice(len(world.ad_item_subset), size=n,
                       p=world.item_weights[world.ad_item_subset]
                       / world.item_weights[world.ad_item_subset].sum())
        ]
    else:
        items = rng.choice(world.config.items, size=n, p=world.item_weights)
    days = rng.integers(0, world.horizon_days, size=n)
    scores = np.concatenate([
        _raw_scores(world, users[days == d], items[days == d], float(d), domain)
        for d in np.unique(days)
    ])
    lo, hi = -20.0, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if (1.0 / (1.0 + np.exp(-(scores + mid)))).mean() < target_ctr:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gen_world(config: WorldConfig, seed: int) -> LatentWorld:
    """Deterministically build the latent world for (config, seed)."""
    if min(config.users, config.items, config.latent_dim, config.months) < 1:
        raise ConfigError("users, items, latent_dim and months must be >= 1")
    n_ads = max(1, int(round(config.items * config.ad_item_fraction)))
    if n_ads > config.items:
        raise ConfigError("ad item subset larger than item count")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    k = config.latent_dim
    user_factors = rng.normal(scale=1.0 / np.sqrt(k), size=(config.users, k))
    item_factors = rng.normal(scale=1.0, size=(config.items, k))
    item_quality = config.popularity_scale * rng.normal(size=(config.items, 2))
    ad_item_quality = config.ad_quality_scale * rng.normal(size=config.items)

    perm = rng.permutation(k)
    n_drift_planes = max(1, (k // 2) // 2)  # rotate half the planes

    ad_item_subset = np.sort(rng.choice(config.items, size=n_ads, replace=False))
    ad_perm = rng.permutation(k)
    # rotate half the dimensions; the rest carry over to the ad domain
    ad_item_factors = _plane_rotate(item_factors, ad_perm, max(1, k // 4),
                                    config.ad_rotation)

    item_category = rng.integers(0, N_CATEGORIES, size=config.items).astype(np.int32)
    user_profile = rng.integers(0, PROFILE_BUCKETS, size=config.users).astype(np.int32)
    item_profile = rng.integers(0, PROFILE_BUCKETS, size=config.items).astype(np.int32)

    # power-law activity so heavy users accumulate multiple impressions
    uw = (1.0 + np.arange(config.users, dtype=np.float64)) ** -config.user_exponent
    uw = rng.permuted(uw)
    iw = (1.0 + np.arange(config.items, dtype=np.float64)) ** -config.item_exponent
    iw = rng.permuted(iw)

    # center quality so the mean CTR stays flat as quality rotates with
    # drift: zero each phase under the full-item draw weights and under the
    # ad-subset draw weights via a global shift plus an ad-subset shift
    iw_p = iw / iw.sum()
    ad_p = iw_p[ad_item_subset] / iw_p[ad_item_subset].sum()
    # center user factors under the user draw weights; rotation is linear, so
    # the weighted mean affinity stays zero at every drift angle
    user_factors -= (uw / uw.sum()) @ user_factors
    w_ad = iw_p[ad_item_subset].sum()
    for col in range(2):
        s1 = iw_p @ item_quality[:, col]
        s2 = ad_p @ item_quality[ad_item_subset, col]
        c_ad = (s1 - s2) / (w_ad - 1.0) if w_ad < 1.0 else 0.0
        item_quality[:, col] -= s2 - c_ad
        item_quality[ad_item_subset, col] -= c_ad
    ad_item_quality[ad_item_subset] -= ad_p @ ad_item_quality[ad_item_subset]

    world = LatentWorld(
        config=config,
        seed=seed,
        user_factors=user_factors,
        item_factors=item_factors,
        drift_planes=perm,
        n_drift_planes=n_drift_planes,
        ad_item_subset=ad_item_subset,
        ad_item_factors=ad_item_factors,
        item_quality=item_quality,
        ad_item_quality=ad_item_quality,
        domain_bias={},
        item_category=item_category,
        user_profile=user_profile,
        item_profile=item_profile,
        user_weights=uw / uw.sum(),
        item_weights=iw / iw.sum(),
    )
    cal_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA11]))
    world.domain_bias[DOMAIN_NATURAL] = _calibrate_bias(
        world, DOMAIN_NATURAL, config.natural_ctr, cal_rng)
    world.domain_bias[DOMAIN_AD] = _calibrate_bias(
        world, DOMAIN_AD, config.ad_ctr, cal_rng)
    return world


def _context_features(world: LatentWorld, users: np.ndarray, items: np.ndarray,
                      days: np.ndarray) -> list[np.ndarray]:
    """Small-vocabulary categorical context fields hashed from latent signs."""
    u_signs = (world.user_factors[users] > 0)
    i_signs = (world.item_factors[items] > 0)
    k = world.config.latent_dim
    cols = []
    for f in range(len(CONTEXT_FIELDS)):
        h = (
            u_signs[:, f % k].astype(np.int64) * 7
            + i_signs[:, (f + 1) % k].astype(np.int64) * 3
            + (users.astype(np.int64) * 2654435761 + items.astype(np.int64) * 40503 + f * 97) % 11
            + (days % 7) * (f % 3)
        )
        cols.append((h % CONTEXT_VOCAB).astype(np.int32))
    return cols


def gen_impressions(world: LatentWorld, domain, day_range, volume: int,
                    bias_override: float | None = None) -> np.ndarray:
    """Generate `volume` impressions over [day_range) as a structured array.

    Deterministic for (world, domain, day_range, volume); samples are
    ordered by day. Labels are Bernoulli(sigmoid(score + domain bias)).
    """
    if isinstance(domain, str):
        domain = DOMAIN_CODES[domain]
    start, stop = day_range
    out = np.empty(0, dtype=SAMPLE_DTYPE)
    if volume <= 0 or stop <= start:
        return out
    if start < 0 or stop > world.horizon_days:
        raise ConfigError(f"day range {day_range} outside world horizon")

    rng = np.random.default_rng(
        np.random.SeedSequence([world.seed, 0x1A3, domain, start, stop, volume]))
    days = np.sort(rng.integers(start, stop, size=volume)).astype(np.int32)
    users = rng.choice(world.config.users, size=volume, p=world.user_weights).astype(np.int32)
    if domain == DOMAIN_AD:
        pw = world.item_weights[world.ad_item_subset]
        items = world.ad_item_subset[
            rng.choice(len(world.ad_item_subset), size=volume, p=pw / pw.sum())
        ].astype(np.int32)
    else:
        items = rng.choice(world.config.items, size=volume, p=world.item_weights).astype(np.int32)

    bias = world.domain_bias[domain] if bias_override is None else bias_override
    probs = np.empty(volume)
    for d in np.unique(days):
        m = days == d
        z = _raw_scores(world, users[m], items[m], float(d), domain) + bias
        probs[m] = 1.0 / (1.0 + np.exp(-z))
    labels = (rng.random(volume) < probs).astype(np.int8)

    out = np.empty(volume, dtype=SAMPLE_DTYPE)
    out["day"] = days
    out["domain"] = domain
    out["label"] = labels
    out["user_id"] = users
    out["item_id"] = items
    out["category_id"] = world.item_category[items]
    out["user_profile"] = world.user_profile[users]
    out["item_profile"] = world.item_profile[items]
    for name, col in zip(CONTEXT_FIELDS, _context_features(world, users, items, days)):
        out[name] = col
    return out


# ---------------------------------------------------------------------------
# line-delimited serialization
#
# One sample per line: day<TAB>domain<TAB>label<TAB>field=value,...
# Fields appear in COMPLETE_FIELDS order.


def sample_to_line(sample: np.void) -> str:
    fields = ",".join(f"{f}={int(sample[f])}" for f in COMPLETE_FIELDS)
    return (f"{int(sample['day'])}\t{DOMAIN_NAMES[int(sample['domain'])]}"
            f"\t{int(sample['label'])}\t{fields}")


def line_to_sample(line: str) -> np.ndarray:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4:
        raise DataError(f"expected 4 tab-separated columns, got {len(parts)}")
    day, domain, label, fields = parts
    if domain not in DOMAIN_CODES:
        raise DataError(f"unknown domain {domain!r}")
    if label not in ("0", "1"):
        raise DataError(f"label must be 0 or 1, got {label!r}")
    rec = np.zeros(1, dtype=SAMPLE_DTYPE)
    rec["day"] = int(day)
    rec["domain"] = DOMAIN_CODES[domain]
    rec["label"] = int(label)
    seen = set()
    for kv in fields.split(","):
        key, _, value = kv.partition("=")
        if key not in COMPLETE_FIELDS:
            raise DataError(f"unknown field {key!r}")
        rec[key] = int(value)
        seen.add(key)
    if len(seen) != len(COMPLETE_FIELDS):
        raise DataError("missing fields in sample line")
    return rec[0]


def write_samples(samples: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write("# day\tdomain\tlabel\t" + ",".join(COMPLETE_FIELDS) + "\n")
        for s in samples:
            fh.write(sample_to_line(s) + "\n")


def read_samples(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.append(line_to_sample(line))
    if not rows:
        return np.empty(0, dtype=SAMPLE_DTYPE)
    return np.array(rows, dtype=SAMPLE_DTYPE)
