"""Synthetic auction environment: a ground-truth click model with position
and co-display effects, bid sampling, a logging policy, and dataset
generation. Stands in for production logs at desk scale.

The click model is the evaluation oracle: an ad's click probability is its
base attractiveness times a slot multiplier times a context factor that
penalizes similarity to the other displayed ads. Every quantity the oracle
needs is either in the model sidecar (slot multipliers, penalty) or stored
on the generated ads (attractiveness), so any allocation can be scored
exactly after the fact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from .domain import (
    Ad,
    Allocation,
    AuctionConfig,
    AuctionInstance,
    OrganicItem,
    write_jsonl,
)

SIDECAR_VERSION = 1

CTR_FLOOR = 1e-6
CTR_CEIL = 1.0 - 1e-6


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass(frozen=True)
class ClickModel:
    """Ground-truth user behavior.

    click probability of the ad at slot s of allocation theta:
        clamp(attractiveness * position_weights[s] * context_factor, 1e-6, 1-1e-6)
    context_factor = clamp(1 - similarity_penalty * mean feature overlap with
    the other displayed ads, context_floor, 1).
    """

    position_weights: tuple[float, ...] = (1.0, 0.62)
    similarity_penalty: float = 0.6
    context_floor: float = 0.5
    attractiveness_low: float = 0.03
    attractiveness_high: float = 0.55
    trait_noise: float = 0.7
    pctr_noise_sigma: float = 0.2
    n_categories: int = 12
    n_brands: int = 40
    seed: int = 0

    def __post_init__(self):
        w = self.position_weights
        if any(x <= 0 for x in w) or any(a < b for a, b in zip(w, w[1:])):
            raise ValueError("position weights must be positive and weakly decreasing")
        if not 0.0 < self.attractiveness_low < self.attractiveness_high < 1.0:
            raise ValueError("attractiveness range must sit inside (0, 1)")
        if self.similarity_penalty < 0:
            raise ValueError("similarity penalty must be non-negative")

    @cached_property
    def _category_traits(self) -> np.ndarray:
        return np.random.default_rng(np.random.SeedSequence((self.seed, 101))).normal(
            0.0, 0.9, self.n_categories
        )

    @cached_property
    def _brand_traits(self) -> np.ndarray:
        return np.random.default_rng(np.random.SeedSequence((self.seed, 202))).normal(
            0.0, 0.5, self.n_brands
        )

    def draw_attractiveness(self, rng: np.random.Generator, category: int, brand: int) -> float:
        logit = (
            self._category_traits[category % self.n_categories]
            + self._brand_traits[brand % self.n_brands]
            + self.trait_noise * rng.normal()
        )
        lo, hi = self.attractiveness_low, self.attractiveness_high
        return float(lo + (hi - lo) * _sigmoid(np.float64(logit)))

    # -- oracle -----------------------------------------------------------

    def feature_overlap(self, a, b) -> float:
        """Fraction of matching sparse feature fields between two items."""
        fa, fb = a.features, b.features
        return sum(x == y for x, y in zip(fa, fb)) / len(fa)

    def context_factors(self, alloc: Allocation, instance: AuctionInstance) -> np.ndarray:
        k = len(alloc)
        if k == 1 or self.similarity_penalty == 0.0:
            return np.ones(k)
        out = np.empty(k)
        for j, a in enumerate(alloc):
            overlaps = [self.feature_overlap(instance.ads[a], instance.ads[o]) for o in alloc if o != a]
            out[j] = 1.0 - self.similarity_penalty * (sum(overlaps) / len(overlaps))
        return np.clip(out, self.context_floor, 1.0)

    def true_ctr(self, alloc: Allocation, instance: AuctionInstance) -> np.ndarray:
        """Oracle click probability per slot; deterministic in its inputs."""
        attr = np.array([instance.ads[a].attractiveness for a in alloc])
        gamma = np.asarray(self.position_weights[: len(alloc)])
        return np.clip(attr * gamma * self.context_factors(alloc, instance), CTR_FLOOR, CTR_CEIL)

    def overlap_matrix(self, instance: AuctionInstance) -> np.ndarray:
        feats = np.array([ad.features for ad in instance.ads])  # [N, F]
        return (feats[:, None, :] == feats[None, :, :]).mean(axis=2)

    def true_ctr_matrix(self, instance: AuctionInstance, alloc_idx: np.ndarray) -> np.ndarray:
        """Oracle CTRs for many allocations at once.

        alloc_idx: [n_lists, K] ad indices; returns [n_lists, K].
        """
        k = alloc_idx.shape[1]
        attr = np.array([ad.attractiveness for ad in instance.ads])
        gamma = np.asarray(self.position_weights[:k])
        if k == 1 or self.similarity_penalty == 0.0:
            cf = np.ones(alloc_idx.shape)
        else:
            ov = self.overlap_matrix(instance)
            pair = ov[alloc_idx[:, :, None], alloc_idx[:, None, :]]  # [n_lists, K, K]
            mean_other = (pair.sum(axis=2) - 1.0) / (k - 1)  # diagonal overlap is 1
            cf = np.clip(1.0 - self.similarity_penalty * mean_other, self.context_floor, 1.0)
        return np.clip(attr[alloc_idx] * gamma[None, :] * cf, CTR_FLOOR, CTR_CEIL)

    def sample_clicks(self, alloc: Allocation, instance: AuctionInstance, rng: np.random.Generator) -> tuple[int, ...]:
        p = self.true_ctr(alloc, instance)
        return tuple(int(c) for c in (rng.random(len(alloc)) < p))

    # -- sidecar ----------------------------------------------------------

    def to_json(self) -> dict:
        return {"schema_version": SIDECAR_VERSION, "click_model": asdict(self)}

    @classmethod
    def from_json(cls, payload: dict) -> "ClickModel":
        if payload.get("schema_version") != SIDECAR_VERSION:
            raise ValueError(f"unsupported sidecar version {payload.get('schema_version')!r}")
        raw = dict(payload["click_model"])
        raw["position_weights"] = tuple(raw["position_weights"])
        return cls(**raw)


def save_click_model(path, model: ClickModel) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=1)


def load_click_model(path) -> ClickModel:
    with open(path) as fh:
        return ClickModel.from_json(json.load(fh))


@dataclass(frozen=True)
class GenSpec:
    """Dataset recipe: instance count, auction shape, bid distribution,
    logging policy, and the train/test split fraction."""

    n_instances: int
    config: AuctionConfig
    bid_low: float = 0.5
    bid_high: float = 1.5
    logging_mechanism: str = "gsp"
    train_fraction: float = 0.8
    n_users: int = 2000
    n_requests: int = 500

    def __post_init__(self):
        if self.n_instances <= 0:
            raise ValueError("n_instances must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.logging_mechanism not in ("gsp", "random"):
            raise ValueError(f"unknown logging mechanism {self.logging_mechanism!r}")


def _gsp_display(instance: AuctionInstance, k: int) -> Allocation:
    ecpm = instance.bids() * instance.pctrs()
    order = np.argsort(-ecpm, kind="stable")
    return tuple(int(i) for i in order[:k])


def generate_instance(spec: GenSpec, model: ClickModel, seed: int, index: int) -> AuctionInstance:
    """One auction, reproducible from (seed, index) alone."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    cfg = spec.config
    organic = [
        OrganicItem(int(rng.integers(model.n_categories)), int(rng.integers(model.n_brands)))
        for _ in range(cfg.n_organic)
    ]
    ads = []
    for ad_id in range(cfg.n_ads):
        category = int(rng.integers(model.n_categories))
        brand = int(rng.integers(model.n_brands))
        attr = model.draw_attractiveness(rng, category, brand)
        value = float(rng.uniform(spec.bid_low, spec.bid_high))
        noise = math.exp(model.pctr_noise_sigma * rng.normal())
        pctr = float(np.clip(attr * noise, 1e-4, 1.0 - 1e-4))
        ads.append(
            Ad(
                ad_id=ad_id,
                category=category,
                brand=brand,
                bid=value,  # truthful play: submitted value equals the real one
                pointwise_pctr=pctr,
                true_value=value,
                attractiveness=attr,
            )
        )
    instance = AuctionInstance(
        ads=ads,
        organic=organic,
        user_id=int(rng.integers(spec.n_users)),
        request_id=int(rng.integers(spec.n_requests)),
    )
    if spec.logging_mechanism == "gsp":
        display = _gsp_display(instance, cfg.n_slots)
    else:
        display = tuple(int(i) for i in rng.choice(cfg.n_ads, size=cfg.n_slots, replace=False))
    instance.display = display
    instance.clicks = model.sample_clicks(display, instance, rng)
    return instance


def generate_dataset(
    spec: GenSpec, model: ClickModel, seed: int
) -> tuple[list[AuctionInstance], list[AuctionInstance]]:
    """Generate and split instances; identical (spec, model, seed) inputs
    reproduce identical datasets."""
    instances = [generate_instance(spec, model, seed, i) for i in range(spec.n_instances)]
    n_train = round(spec.n_instances * spec.train_fraction)
    return instances[:n_train], instances[n_train:]


def write_dataset(out_dir, spec: GenSpec, model: ClickModel, seed: int) -> dict:
    """Generate, write train/test JSONL plus the click-model sidecar, and
    return a small manifest."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = generate_dataset(spec, model, seed)
    write_jsonl(out / "train.jsonl", train)
    write_jsonl(out / "test.jsonl", test)
    save_click_model(out / "click_model.json", model)
    manifest = {
        "seed": seed,
        "n_train": len(train),
        "n_test": len(test),
        "n_ads": spec.config.n_ads,
        "n_slots": spec.config.n_slots,
        "n_organic": spec.config.n_organic,
        "logging_mechanism": spec.logging_mechanism,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest
