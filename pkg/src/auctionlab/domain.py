"""Core auction vocabulary shared by every mechanism: ads, page-view
requests, ordered slot allocations, allocation enumeration, and social
welfare. All functions here are pure.

Instances serialize to JSONL (one auction per line, ``schema_version``
mandatory); see ``instance_to_json`` for the field list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import permutations
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1

# Ad/organic sparse feature fields, in serialization order. Bids and values
# are deliberately not features: anything a score network may consume comes
# from this list only.
FEATURE_FIELDS = ("category", "brand")

Allocation = tuple[int, ...]


class AllocationCapError(ValueError):
    """Ordered-selection count exceeds the enumeration cap."""


class PaymentUndefinedError(ValueError):
    """Removing an ad leaves no full allocation (N - 1 < K)."""


def ordered_selection_count(n_ads: int, n_slots: int) -> int:
    """Number of ordered k-selections: n! / (n-k)!."""
    return math.perm(n_ads, n_slots)


@dataclass(frozen=True)
class AuctionConfig:
    """Shape of one auction: candidate count, slot count, organic count,
    embedding width, and the enumeration cap."""

    n_ads: int
    n_slots: int
    n_organic: int = 4
    embed_dim: int = 8
    max_lists: int = 200_000

    def __post_init__(self):
        if self.n_slots > self.n_ads:
            raise ValueError(f"n_slots={self.n_slots} exceeds n_ads={self.n_ads}")
        if self.n_slots < 1:
            raise ValueError("need at least one slot")

    @property
    def n_lists(self) -> int:
        return ordered_selection_count(self.n_ads, self.n_slots)


@dataclass
class Ad:
    ad_id: int
    category: int
    brand: int
    bid: float                 # submitted click value, currency per click
    pointwise_pctr: float      # slot/context-blind click estimate, in (0, 1)
    true_value: float          # ground-truth click value; equals bid under truthful play
    attractiveness: float = 0.0  # oracle base click propensity; hidden from models

    def __post_init__(self):
        if self.bid <= 0:
            raise ValueError(f"ad {self.ad_id}: bid must be positive, got {self.bid}")
        if not 0.0 < self.pointwise_pctr < 1.0:
            raise ValueError(f"ad {self.ad_id}: pointwise_pctr must be in (0,1)")

    @property
    def features(self) -> tuple[int, ...]:
        return (self.category, self.brand)


@dataclass
class OrganicItem:
    category: int
    brand: int

    @property
    def features(self) -> tuple[int, ...]:
        return (self.category, self.brand)


@dataclass
class AuctionInstance:
    """One page-view request: candidate ads, organic items, user/request
    context, and (for logged traffic) the displayed allocation with its
    click labels."""

    ads: list[Ad]
    organic: list[OrganicItem]
    user_id: int
    request_id: int
    display: Allocation | None = None
    clicks: tuple[int, ...] | None = None

    def __post_init__(self):
        ids = [ad.ad_id for ad in self.ads]
        if len(set(ids)) != len(ids):
            raise ValueError("ad ids must be unique within an instance")
        if self.display is not None:
            n = len(self.ads)
            if any(not 0 <= i < n for i in self.display):
                raise ValueError("logged display references unknown ads")

    @property
    def n_ads(self) -> int:
        return len(self.ads)

    def bids(self) -> np.ndarray:
        return np.array([ad.bid for ad in self.ads], dtype=np.float64)

    def pctrs(self) -> np.ndarray:
        return np.array([ad.pointwise_pctr for ad in self.ads], dtype=np.float64)

    def values(self) -> np.ndarray:
        return np.array([ad.true_value for ad in self.ads], dtype=np.float64)


@dataclass
class WelfareReport:
    """Welfare of a chosen allocation against the attainable maximum."""

    sw: float
    sw_star: float
    epsilon: float = 0.05

    @property
    def ratio(self) -> float:
        return self.sw / self.sw_star if self.sw_star > 0 else 1.0

    @property
    def satisfied(self) -> bool:
        return 1.0 - self.ratio < self.epsilon


def enumerate_allocations(
    config: AuctionConfig,
    instance: AuctionInstance | None = None,
    *,
    prefilter_to: int | None = None,
) -> list[Allocation]:
    """All ordered slot assignments of ads, in lexicographic order.

    Lexicographic order fixes downstream tie-breaking: the first
    allocation encountered wins on equal scores. If the count exceeds the
    cap, the caller must opt in to eCPM prefiltering (``prefilter_to``
    keeps the top ads by bid * pointwise pCTR; indices stay relative to
    the instance's full ad list).
    """
    n = config.n_ads if instance is None else instance.n_ads
    k = config.n_slots
    count = ordered_selection_count(n, k)
    candidate_ids = range(n)
    if count > config.max_lists:
        if prefilter_to is None:
            raise AllocationCapError(
                f"{count} allocations for n_ads={n}, n_slots={k} exceed cap "
                f"{config.max_lists}; pass prefilter_to to shortlist by eCPM"
            )
        if instance is None:
            raise ValueError("prefiltering requires the instance (needs bids and pCTRs)")
        ecpm = instance.bids() * instance.pctrs()
        order = np.argsort(-ecpm, kind="stable")
        candidate_ids = sorted(int(i) for i in order[:prefilter_to])
        if ordered_selection_count(len(candidate_ids), k) > config.max_lists:
            raise AllocationCapError(
                f"even prefiltered to {prefilter_to} ads the allocation count "
                f"exceeds cap {config.max_lists}"
            )
    return [tuple(p) for p in permutations(candidate_ids, k)]


def social_welfare(alloc: Allocation, bids: Sequence[float] | np.ndarray, ctrs: Sequence[float] | np.ndarray) -> float:
    """Sum over slots of bid * predicted CTR; ``ctrs`` has one entry per slot."""
    if len(ctrs) != len(alloc):
        raise ValueError(f"need one CTR per slot: {len(ctrs)} CTRs for {len(alloc)} slots")
    return float(sum(bids[a] * q for a, q in zip(alloc, ctrs)))


def allocations_excluding(allocs: Iterable[Allocation], ad: int) -> list[Allocation]:
    """Allocations that do not contain ``ad``.

    Raises when the result is empty while the ad actually occurs (removing
    it leaves fewer than K ads, so counterfactual payments are undefined).
    """
    allocs = list(allocs)
    kept = [a for a in allocs if ad not in a]
    if not kept and allocs:
        raise PaymentUndefinedError(
            f"no allocation excludes ad {ad}: not enough remaining ads to fill all slots"
        )
    return kept


# -- JSONL serialization -------------------------------------------------------


def instance_to_json(instance: AuctionInstance) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "user_id": instance.user_id,
        "request_id": instance.request_id,
        "ads": [
            {
                "id": ad.ad_id,
                "category": ad.category,
                "brand": ad.brand,
                "bid": ad.bid,
                "pointwise_pctr": ad.pointwise_pctr,
                "true_value": ad.true_value,
                "attractiveness": ad.attractiveness,
            }
            for ad in instance.ads
        ],
        "organic": [{"category": o.category, "brand": o.brand} for o in instance.organic],
        "display": list(instance.display) if instance.display is not None else None,
        "clicks": list(instance.clicks) if instance.clicks is not None else None,
    }


def instance_from_json(rec: dict) -> AuctionInstance:
    version = rec.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported instance schema_version: {version!r}")
    ads = [
        Ad(
            ad_id=a["id"],
            category=a["category"],
            brand=a["brand"],
            bid=a["bid"],
            pointwise_pctr=a["pointwise_pctr"],
            true_value=a["true_value"],
            attractiveness=a.get("attractiveness", 0.0),
        )
        for a in rec["ads"]
    ]
    organic = [OrganicItem(o["category"], o["brand"]) for o in rec["organic"]]
    display = tuple(rec["display"]) if rec.get("display") is not None else None
    clicks = tuple(rec["clicks"]) if rec.get("clicks") is not None else None
    return AuctionInstance(
        ads=ads,
        organic=organic,
        user_id=rec["user_id"],
        request_id=rec["request_id"],
        display=display,
        clicks=clicks,
    )


def write_jsonl(path, instances: Iterable[AuctionInstance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_json(inst), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[AuctionInstance]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(instance_from_json(json.loads(line)))
    return out
