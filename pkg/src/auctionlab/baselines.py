"""Reference mechanisms.

* first-price and second-price position auctions ranked by bid * pCTR,
* welfare-maximizing allocation with counterfactual pricing (VCG), written
  as deliberately plain loops so it can serve as the oracle for the
  vectorized learned mechanism,
* the linearly weighted variant (per-slot multipliers) with an
  epsilon-greedy bandit tuner that trades welfare for revenue under a
  welfare-decline cap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np

from .domain import (
    Allocation,
    AuctionInstance,
    PaymentUndefinedError,
    social_welfare,
)
from .listwise import ListwiseCtrPredictor, pack_instances
from .mechanism import (
    DEGENERATE_DIVISOR,
    MechanismOutcome,
    alloc_index,
    contains_matrix,
    select_and_price,
)
from .synth import ClickModel

# -- CTR sources ---------------------------------------------------------------


class OracleCtrSource:
    """Ground-truth click probabilities from the environment sidecar."""

    name = "oracle"

    def __init__(self, model: ClickModel):
        self.model = model

    def list_ctrs(self, instance: AuctionInstance, idx: np.ndarray) -> np.ndarray:
        return self.model.true_ctr_matrix(instance, idx)


class PointwiseCtrSource:
    """Slot- and context-blind per-ad pCTR broadcast over slots."""

    name = "pointwise"

    def list_ctrs(self, instance: AuctionInstance, idx: np.ndarray) -> np.ndarray:
        return instance.pctrs()[idx]


class PredictorCtrSource:
    """List-wise CTRs from a trained predictor."""

    name = "predictor"

    def __init__(self, predictor: ListwiseCtrPredictor):
        self.predictor = predictor

    def list_ctrs(self, instance: AuctionInstance, idx: np.ndarray) -> np.ndarray:
        return self.list_ctrs_batch([instance], idx)[0]

    def list_ctrs_batch(self, instances: list[AuctionInstance], idx: np.ndarray, chunk: int = 256) -> np.ndarray:
        parts = []
        for start in range(0, len(instances), chunk):
            batch = pack_instances(instances[start : start + chunk], self.predictor.hasher)
            parts.append(self.predictor.predict_lists(batch, idx).data)
        return np.concatenate(parts, axis=0)


def ctrs_for_all(source, instances: list[AuctionInstance], idx: np.ndarray) -> np.ndarray:
    """[n_instances, n_lists, K] from any source, batched where supported."""
    if hasattr(source, "list_ctrs_batch"):
        return source.list_ctrs_batch(instances, idx)
    return np.stack([source.list_ctrs(inst, idx) for inst in instances])


# -- position auctions -----------------------------------------------------------


def _ecpm_order(instance: AuctionInstance) -> np.ndarray:
    return np.argsort(-(instance.bids() * instance.pctrs()), kind="stable")


def run_gfp(instance: AuctionInstance, n_slots: int) -> MechanismOutcome:
    """Rank by bid * pCTR; every winner pays its own bid per click."""
    order = _ecpm_order(instance)
    winners = tuple(int(a) for a in order[:n_slots])
    bids = instance.bids()
    pctr = instance.pctrs()
    payments = tuple(float(bids[a]) for a in winners)
    ctrs = tuple(float(pctr[a]) for a in winners)
    return MechanismOutcome(
        mechanism="gfp",
        allocation=winners,
        payments=payments,
        ctrs=ctrs,
        expected_revenue=float(sum(p * q for p, q in zip(payments, ctrs))),
        score=float(sum(bids[a] * pctr[a] for a in winners)),
        pre_clamp_payments=payments,
        clamped_low=(False,) * n_slots,
        clamped_high=(False,) * n_slots,
        degenerate=(False,) * n_slots,
    )


def run_gsp(instance: AuctionInstance, n_slots: int) -> MechanismOutcome:
    """Rank by bid * pCTR; the winner at slot i pays the next-ranked score
    divided by its own pCTR (reserve 0 when nobody is below)."""
    bids = instance.bids()
    pctr = instance.pctrs()
    scores = bids * pctr
    order = np.argsort(-scores, kind="stable")
    winners = tuple(int(a) for a in order[:n_slots])
    payments = []
    for i, a in enumerate(winners):
        nxt = float(scores[order[i + 1]]) if i + 1 < len(order) else 0.0
        payments.append(nxt / float(pctr[a]))
    payments = tuple(payments)
    ctrs = tuple(float(pctr[a]) for a in winners)
    return MechanismOutcome(
        mechanism="gsp",
        allocation=winners,
        payments=payments,
        ctrs=ctrs,
        expected_revenue=float(sum(p * q for p, q in zip(payments, ctrs))),
        score=float(scores[winners[0]]),
        pre_clamp_payments=payments,
        clamped_low=(False,) * n_slots,
        clamped_high=(False,) * n_slots,
        degenerate=(False,) * n_slots,
    )


# -- brute-force welfare maximization --------------------------------------------


def run_vcg(
    instance: AuctionInstance,
    allocations: list[Allocation],
    ctrs_by_list: np.ndarray,
) -> MechanismOutcome:
    """Welfare-maximizing allocation priced by the welfare loss each winner
    imposes, written as plain loops over the full allocation list.

    This is the reference implementation the vectorized learned mechanism
    is checked against; keep it boring.
    """
    bids = instance.bids()
    sw_values = [social_welfare(alloc, bids, ctrs_by_list[i]) for i, alloc in enumerate(allocations)]
    best_i = 0
    for i in range(1, len(sw_values)):
        if sw_values[i] > sw_values[best_i]:
            best_i = i
    best_alloc = allocations[best_i]
    best_sw = sw_values[best_i]

    payments, raws, deg, lo, hi = [], [], [], [], []
    for j, a in enumerate(best_alloc):
        others = [sw for alloc, sw in zip(allocations, sw_values) if a not in alloc]
        if not others:
            raise PaymentUndefinedError(f"no allocation excludes ad {a}")
        sw_minus = best_sw - bids[a] * ctrs_by_list[best_i][j]
        q = float(ctrs_by_list[best_i][j])
        if q < DEGENERATE_DIVISOR:
            raw = 0.0
            deg.append(True)
        else:
            raw = (max(others) - sw_minus) / q
            deg.append(False)
        p = min(max(raw, 0.0), float(bids[a])) if not deg[-1] else 0.0
        payments.append(p)
        raws.append(raw)
        lo.append(raw < 0.0 and not deg[-1])
        hi.append(raw > bids[a])
    ctrs = tuple(float(c) for c in ctrs_by_list[best_i])
    return MechanismOutcome(
        mechanism="vcg",
        allocation=tuple(int(a) for a in best_alloc),
        payments=tuple(payments),
        ctrs=ctrs,
        expected_revenue=float(sum(p * q for p, q in zip(payments, ctrs))),
        score=float(best_sw),
        pre_clamp_payments=tuple(raws),
        clamped_low=tuple(lo),
        clamped_high=tuple(hi),
        degenerate=tuple(deg),
    )


def run_wvcg(
    instance: AuctionInstance,
    weights: np.ndarray,
    ctrs_by_list: np.ndarray,
    idx: np.ndarray,
    contains: np.ndarray,
) -> MechanismOutcome:
    """Per-slot linearly weighted welfare scoring with counterfactual
    pricing in weighted units; weights == 1 reproduces VCG exactly."""
    bids = instance.bids()
    k = idx.shape[1]
    w_slot = np.broadcast_to(np.asarray(weights, dtype=np.float64), (idx.shape[0], k))
    contrib = w_slot * bids[idx] * ctrs_by_list
    rs = contrib.sum(axis=1)
    out = select_and_price("wvcg", rs, contrib, w_slot, ctrs_by_list, bids, idx, contains)
    return out


# -- mechanism wrappers -----------------------------------------------------------


class GfpMechanism:
    name = "gfp"

    def __init__(self, n_slots: int):
        self.n_slots = n_slots

    def outcomes(self, instances: list[AuctionInstance]) -> list[MechanismOutcome]:
        return [run_gfp(inst, self.n_slots) for inst in instances]


class GspMechanism:
    name = "gsp"

    def __init__(self, n_slots: int):
        self.n_slots = n_slots

    def outcomes(self, instances: list[AuctionInstance]) -> list[MechanismOutcome]:
        return [run_gsp(inst, self.n_slots) for inst in instances]


class VcgMechanism:
    """Brute-force welfare maximizer over the full allocation set."""

    name = "vcg"

    def __init__(self, n_slots: int, ctr_source):
        self.n_slots = n_slots
        self.ctr_source = ctr_source

    def outcomes(self, instances: list[AuctionInstance]) -> list[MechanismOutcome]:
        out = []
        if not instances:
            return out
        idx = alloc_index(instances[0].n_ads, self.n_slots)
        allocations = [tuple(int(a) for a in row) for row in idx]
        ctrs = ctrs_for_all(self.ctr_source, instances, idx)
        for i, inst in enumerate(instances):
            out.append(run_vcg(inst, allocations, ctrs[i]))
        return out


class WvcgMechanism:
    name = "wvcg"

    def __init__(self, n_slots: int, ctr_source, weights):
        self.n_slots = n_slots
        self.ctr_source = ctr_source
        self.weights = np.asarray(weights, dtype=np.float64)

    def outcomes(self, instances: list[AuctionInstance]) -> list[MechanismOutcome]:
        out = []
        if not instances:
            return out
        n = instances[0].n_ads
        idx = alloc_index(n, self.n_slots)
        contains = contains_matrix(n, self.n_slots)
        ctrs = ctrs_for_all(self.ctr_source, instances, idx)
        for i, inst in enumerate(instances):
            out.append(run_wvcg(inst, self.weights, ctrs[i], idx, contains))
        return out


# -- bandit tuning of the per-slot weights ----------------------------------------

WEIGHT_GRID = (0.6, 0.8, 1.0, 1.2, 1.4)


@dataclass
class WvcgParams:
    """Tuned per-slot weights plus the bandit state that produced them."""

    weights: tuple[float, ...]
    arms: list[tuple[float, ...]]
    counts: np.ndarray
    mean_rpm: np.ndarray
    mean_swmr: np.ndarray
    exploration: float


def tune_wvcg(
    instances: list[AuctionInstance],
    ctr_source,
    click_model: ClickModel,
    n_slots: int,
    grid: tuple[float, ...] = WEIGHT_GRID,
    sw_epsilon: float = 0.05,
    exploration: float = 0.2,
    rounds: int = 75,
    batch: int = 200,
    seed: int = 0,
) -> WvcgParams:
    """epsilon-greedy search over the per-slot weight grid.

    Reward is the batch's revenue per mille; arms whose running mean
    welfare ratio (vs the welfare-optimal allocation on the same batch)
    falls below 1 - sw_epsilon are ineligible. If nothing is eligible,
    fall back to all-ones (plain VCG) with a warning.
    """
    from .evaluation import slate_metrics

    arms = list(product(grid, repeat=n_slots))
    counts = np.zeros(len(arms))
    sum_rpm = np.zeros(len(arms))
    sum_swmr = np.zeros(len(arms))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 31337)))

    n = instances[0].n_ads
    idx = alloc_index(n, n_slots)
    contains = contains_matrix(n, n_slots)
    ctrs = ctrs_for_all(ctr_source, instances, idx)
    # Welfare-optimal reference on the same pool, priced with the oracle.
    vcg = VcgMechanism(n_slots, OracleCtrSource(click_model))
    vcg_outcomes = vcg.outcomes(instances)

    def play(arm_idx: int) -> tuple[float, float]:
        sel = rng.choice(len(instances), size=min(batch, len(instances)), replace=False)
        chosen = [instances[i] for i in sel]
        outs = [run_wvcg(instances[i], np.asarray(arms[arm_idx]), ctrs[i], idx, contains) for i in sel]
        m = slate_metrics(outs, chosen, click_model)
        ref = slate_metrics([vcg_outcomes[i] for i in sel], chosen, click_model)
        swmr = m["swpm"] / ref["swpm"] if ref["swpm"] > 0 else 1.0
        return m["rpm"], swmr

    for r in range(rounds):
        if r < len(arms):
            a = r  # play every arm once before going greedy
        elif rng.random() < exploration:
            a = int(rng.integers(len(arms)))
        else:
            mean_rpm = np.where(counts > 0, sum_rpm / np.maximum(counts, 1), -np.inf)
            mean_swmr = np.where(counts > 0, sum_swmr / np.maximum(counts, 1), 0.0)
            eligible = mean_swmr >= 1.0 - sw_epsilon
            if eligible.any():
                a = int(np.where(eligible, mean_rpm, -np.inf).argmax())
            else:
                a = int(mean_rpm.argmax())
        rpm, swmr = play(a)
        counts[a] += 1
        sum_rpm[a] += rpm
        sum_swmr[a] += swmr

    mean_rpm = np.where(counts > 0, sum_rpm / np.maximum(counts, 1), -np.inf)
    mean_swmr = np.where(counts > 0, sum_swmr / np.maximum(counts, 1), 0.0)
    eligible = (counts > 0) & (mean_swmr >= 1.0 - sw_epsilon)
    if eligible.any():
        best = int(np.where(eligible, mean_rpm, -np.inf).argmax())
        weights = arms[best]
    else:
        warnings.warn("no weight arm met the welfare constraint; falling back to all-ones")
        weights = tuple(1.0 for _ in range(n_slots))
    return WvcgParams(
        weights=tuple(float(w) for w in weights),
        arms=arms,
        counts=counts,
        mean_rpm=mean_rpm,
        mean_swmr=mean_swmr,
        exploration=exploration,
    )
