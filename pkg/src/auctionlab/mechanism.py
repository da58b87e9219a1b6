"""Learned affine ranking and counterfactual pricing.

A small net maps each ad's allocation-independent features to a weight in
(0, 1). An allocation's ranking score is the sum over slots of
weight * bid * predicted CTR; the best-scoring list wins. Each winner pays
the score loss its presence imposes on the others, in its own
weight-times-CTR units:

    p_j = [RS(best list without j, other bids) - (RS(winner) - j's term)]
          / (weight_j * ctr_j)

which is at most the winner's own bid whenever the winner really is the
argmax. Payments are clamped to [0, bid] with the clamps recorded, and a
near-zero divisor zeroes the payment instead of exploding.

With all weights forced to 1 the whole mechanism collapses to VCG, which
the brute-force implementation in ``baselines`` cross-checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .domain import FEATURE_FIELDS, AuctionInstance, PaymentUndefinedError
from .listwise import FeatureHasher, ListwiseCtrPredictor, PackedBatch, pack_instances

DEGENERATE_DIVISOR = 1e-9

# Feature names whose presence in a score-net input would let payments leak
# into bids (breaking truthfulness); rejected at construction time.
BID_TAINTED_FIELDS = frozenset({"bid", "value", "ecpm", "payment"})


class IcGuardError(ValueError):
    """A bid-derived feature was offered to the ad-weight net."""


@lru_cache(maxsize=32)
def alloc_index(n_ads: int, n_slots: int) -> np.ndarray:
    """All ordered slot assignments as an [n_lists, K] int array, in the
    same lexicographic order as ``domain.enumerate_allocations``."""
    return np.array(list(permutations(range(n_ads), n_slots)), dtype=np.int64)


@lru_cache(maxsize=32)
def contains_matrix(n_ads: int, n_slots: int) -> np.ndarray:
    """contains[a, i] == True iff allocation i displays ad a."""
    idx = alloc_index(n_ads, n_slots)
    out = np.zeros((n_ads, idx.shape[0]), dtype=bool)
    for j in range(idx.shape[1]):
        out[idx[:, j], np.arange(idx.shape[0])] = True
    return out


# -- ad-weight net -------------------------------------------------------------


@dataclass(frozen=True)
class AdWeightConfig:
    embed_dim: int = 8
    hidden: tuple[int, ...] = (32, 8)
    input_fields: tuple[str, ...] = FEATURE_FIELDS


def init_weight_params(config: AdWeightConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, np.ndarray] = {}
    width = config.embed_dim
    for i, h in enumerate(config.hidden):
        p[f"adw.w{i}"] = rng.normal(0.0, np.sqrt(2.0 / width), (width, h))
        p[f"adw.b{i}"] = np.zeros(h)
        width = h
    p["adw.w_out"] = rng.normal(0.0, np.sqrt(2.0 / width), (width, 1))
    p["adw.b_out"] = np.zeros(1)
    return {name: ad.parameter(arr, name) for name, arr in p.items()}


class AdWeightNet:
    """Per-ad multiplier in (0, 1) from allocation-independent features.

    The constructor refuses any bid-derived input field: the weight must
    not move when an advertiser changes its bid, otherwise the pricing
    rule loses its truthfulness argument.
    """

    def __init__(
        self,
        config: AdWeightConfig,
        params: dict[str, Tensor] | None = None,
        rng: np.random.Generator | None = None,
    ):
        tainted = set(config.input_fields) & BID_TAINTED_FIELDS
        if tainted:
            raise IcGuardError(f"bid-derived fields {sorted(tainted)} cannot feed the ad-weight net")
        self.config = config
        self.params = params if params is not None else init_weight_params(config, rng or np.random.default_rng(0))

    def weights(self, e_ad: Tensor) -> Tensor:
        """e_ad: [B, N, d] ad embeddings -> [B, N] weights in (0, 1)."""
        b, n, d = e_ad.shape
        h = ad.reshape(e_ad, (b * n, d))
        for i in range(len(self.config.hidden)):
            h = ad.relu(ad.add(ad.matmul(h, self.params[f"adw.w{i}"]), self.params[f"adw.b{i}"]))
        out = ad.sigmoid(ad.add(ad.matmul(h, self.params["adw.w_out"]), self.params["adw.b_out"]))
        return ad.reshape(out, (b, n))


# -- ranking scores ------------------------------------------------------------


@dataclass
class RankingScore:
    """Score of one allocation plus the per-slot leave-one-out scores."""

    rs: float
    rs_minus: tuple[float, ...]


def ranking_score(weights, bids, ctrs) -> RankingScore:
    """Plain-float score of a single allocation: sum of w * b * ctr, with
    each slot's leave-one-term-out remainder."""
    terms = [float(w) * float(b) * float(q) for w, b, q in zip(weights, bids, ctrs)]
    total = float(sum(terms))
    return RankingScore(rs=total, rs_minus=tuple(total - t for t in terms))


def slot_gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """x: [B, N] per-ad values -> [B, n_lists, K] per-slot values."""
    b = x.shape[0]
    n_lists, k = idx.shape
    return ad.reshape(ad.take_axis1(x, idx.reshape(-1)), (b, n_lists, k))


def ranking_scores_tensor(
    weights: Tensor, qhat: Tensor, bids: np.ndarray, idx: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Batched scores for every allocation.

    weights: [B, N], qhat: [B, n_lists, K], bids: [B, N] constants.
    Returns (rs [B, n_lists], contrib [B, n_lists, K]) with
    contrib[b, i, j] the j-th slot's w*b*q term of allocation i.
    """
    w_slot = slot_gather(weights, idx)
    bid_slot = ad.constant(bids[:, idx])
    contrib = ad.mul(ad.mul(w_slot, bid_slot), qhat)
    return ad.tsum(contrib, axis=2), contrib


# -- outcomes ------------------------------------------------------------------


@dataclass
class MechanismOutcome:
    """Winner, per-slot payments, and pricing diagnostics for one auction."""

    mechanism: str
    allocation: tuple[int, ...]
    payments: tuple[float, ...]           # per click, one per slot
    ctrs: tuple[float, ...]               # the CTRs the mechanism believed
    expected_revenue: float
    score: float
    pre_clamp_payments: tuple[float, ...]
    clamped_low: tuple[bool, ...]
    clamped_high: tuple[bool, ...]
    degenerate: tuple[bool, ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "mechanism": self.mechanism,
                "allocation": list(self.allocation),
                "payments": list(self.payments),
                "ctrs": list(self.ctrs),
                "expected_revenue": self.expected_revenue,
                "score": self.score,
                "pre_clamp_payments": list(self.pre_clamp_payments),
                "clamped_low": list(self.clamped_low),
                "clamped_high": list(self.clamped_high),
                "degenerate": list(self.degenerate),
            }
        )


def best_excluding(rs: np.ndarray, contains: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best score and argmax over allocations excluding each ad.

    rs: [n_lists]; contains: [N, n_lists]. Ads with no excluding
    allocation get -inf / -1 (callers must not price them).
    """
    masked = np.where(contains, -np.inf, rs[None, :])
    idx = masked.argmax(axis=1)
    vals = masked[np.arange(contains.shape[0]), idx]
    return vals, idx


def price_allocation(
    row: int,
    rs: np.ndarray,
    contrib: np.ndarray,
    w_slot: np.ndarray,
    qhat: np.ndarray,
    bids: np.ndarray,
    idx: np.ndarray,
    bex_vals: np.ndarray,
) -> dict:
    """Counterfactual payments for allocation ``row`` as if it had won.

    All arrays are single-instance: rs [n_lists], contrib/w_slot/qhat
    [n_lists, K], bids [N], idx [n_lists, K], bex_vals [N] the best score
    excluding each ad (over the full candidate set).
    """
    ads_in_row = idx[row]
    if np.any(np.isneginf(bex_vals[ads_in_row])):
        raise PaymentUndefinedError(
            "cannot price: some ad appears in every allocation (n_ads - 1 < n_slots)"
        )
    k = idx.shape[1]
    pay = np.zeros(k)
    raw = np.zeros(k)
    degenerate = np.zeros(k, dtype=bool)
    for j in range(k):
        a = ads_in_row[j]
        denom = w_slot[row, j] * qhat[row, j]
        num = bex_vals[a] - (rs[row] - contrib[row, j])
        if denom < DEGENERATE_DIVISOR:
            degenerate[j] = True
            raw[j] = 0.0
        else:
            raw[j] = num / denom
    clipped = np.clip(raw, 0.0, bids[ads_in_row])
    clipped[degenerate] = 0.0
    return {
        "payments": clipped,
        "pre_clamp": raw,
        "clamped_low": (raw < 0.0) & ~degenerate,
        "clamped_high": raw > bids[ads_in_row],
        "degenerate": degenerate,
    }


def select_and_price(
    mechanism: str,
    rs: np.ndarray,
    contrib: np.ndarray,
    w_slot: np.ndarray,
    qhat: np.ndarray,
    bids: np.ndarray,
    idx: np.ndarray,
    contains: np.ndarray,
    tie_rng: np.random.Generator | None = None,
) -> MechanismOutcome:
    """Pick the argmax allocation and price its winners.

    Ties resolve to the first (lexicographically earliest) allocation
    unless ``tie_rng`` is given, in which case one of the tied rows is
    drawn at random.
    """
    winner = int(np.argmax(rs))
    if tie_rng is not None:
        top = rs[winner]
        tied = np.flatnonzero(np.isclose(rs, top, rtol=1e-12, atol=0.0))
        if tied.size > 1:
            winner = int(tie_rng.choice(tied))
    bex_vals, _ = best_excluding(rs, contains)
    priced = price_allocation(winner, rs, contrib, w_slot, qhat, bids, idx, bex_vals)
    q_row = qhat[winner]
    return MechanismOutcome(
        mechanism=mechanism,
        allocation=tuple(int(a) for a in idx[winner]),
        payments=tuple(priced["payments"]),
        ctrs=tuple(q_row),
        expected_revenue=float((q_row * priced["payments"]).sum()),
        score=float(rs[winner]),
        pre_clamp_payments=tuple(priced["pre_clamp"]),
        clamped_low=tuple(bool(x) for x in priced["clamped_low"]),
        clamped_high=tuple(bool(x) for x in priced["clamped_high"]),
        degenerate=tuple(bool(x) for x in priced["degenerate"]),
    )


def expected_revenues_np(
    rs: np.ndarray,
    contrib: np.ndarray,
    w_slot: np.ndarray,
    qhat: np.ndarray,
    bids: np.ndarray,
    idx: np.ndarray,
    contains: np.ndarray,
) -> np.ndarray:
    """Counterfactual expected revenue of every allocation (single instance)."""
    bex_vals, _ = best_excluding(rs, contains)
    n_lists, k = idx.shape
    raw = bex_vals[idx] - (rs[:, None] - contrib)
    denom = w_slot * qhat
    ok = denom >= DEGENERATE_DIVISOR
    pay = np.where(ok, raw / np.where(ok, denom, 1.0), 0.0)
    pay = np.clip(pay, 0.0, bids[idx])
    return (qhat * pay).sum(axis=1)


def expected_revenues_tensor(
    rs: Tensor,
    contrib: Tensor,
    w_slot: Tensor,
    qhat: Tensor,
    bids: np.ndarray,
    idx: np.ndarray,
    contains: np.ndarray,
) -> Tensor:
    """Differentiable expected revenue of every allocation: [B, n_lists].

    The two discrete selections (which allocation is best without ad a)
    are taken on the current score values and held fixed; gradients flow
    through the score *values*, the CTRs, and the weights.
    """
    b, n_lists = rs.shape
    k = idx.shape[1]
    rs_det = rs.data
    masked = np.where(contains[None, :, :], -np.inf, rs_det[:, None, :])  # [B, N, n_lists]
    bex_idx = masked.argmax(axis=2)  # [B, N]
    if np.any(np.isneginf(np.take_along_axis(masked, bex_idx[:, :, None], axis=2))):
        raise PaymentUndefinedError("cannot price: n_ads - 1 < n_slots")
    bex_rows = bex_idx[:, idx.reshape(-1)]  # [B, n_lists*K]
    bex_vals = ad.reshape(ad.gather_along(rs, bex_rows, axis=1), (b, n_lists, k))
    rs_minus = ad.sub(ad.reshape(rs, (b, n_lists, 1)), contrib)
    raw = ad.sub(bex_vals, rs_minus)
    pay = ad.clip(ad.safe_div(raw, ad.mul(w_slot, qhat), DEGENERATE_DIVISOR), 0.0, bids[:, idx])
    return ad.tsum(ad.mul(qhat, pay), axis=2)


# -- the full learned mechanism -------------------------------------------------


class NeuralMechanism:
    """End-to-end learned mechanism: list-wise CTRs, learned ad weights,
    argmax allocation, counterfactual pricing.

    ``unit_weights=True`` forces every ad weight to 1 (the VCG reduction).
    ``ctr_mode="pointwise"`` replaces the list-wise CTRs with each ad's
    slot-blind pCTR; score ties (permutations of one ad set) are then
    broken at random with ``tie_seed``.
    """

    def __init__(
        self,
        predictor: ListwiseCtrPredictor,
        weight_net: AdWeightNet,
        name: str = "nma",
        unit_weights: bool = False,
        ctr_mode: str = "listwise",
        tie_seed: int | None = None,
    ):
        if ctr_mode not in ("listwise", "pointwise"):
            raise ValueError(f"unknown ctr_mode {ctr_mode!r}")
        self.predictor = predictor
        self.weight_net = weight_net
        self.name = name
        self.unit_weights = unit_weights
        self.ctr_mode = ctr_mode
        self.tie_seed = tie_seed

    def _forward_arrays(self, batch: PackedBatch, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(qhat [B, n_lists, K], weights [B, N]) as plain arrays."""
        if self.ctr_mode == "listwise":
            reps = self.predictor.ad_representations(batch)
            qhat = self.predictor.predict_lists(batch, idx, reps=reps).data
            e_ad = None
        else:
            qhat = batch.pctr[:, idx]
            e_ad = None
        if self.unit_weights:
            weights = np.ones((batch.size, batch.n_ads))
        else:
            e_ad = self.predictor.embed_ads(batch)
            weights = self.weight_net.weights(e_ad).data
        return qhat, weights

    def outcomes(self, instances: list[AuctionInstance], chunk: int = 256) -> list[MechanismOutcome]:
        out: list[MechanismOutcome] = []
        tie_rng = np.random.default_rng(self.tie_seed) if self.ctr_mode == "pointwise" else None
        for start in range(0, len(instances), chunk):
            part = instances[start : start + chunk]
            batch = pack_instances(part, self.predictor.hasher)
            n = batch.n_ads
            k = self.predictor.config.n_slots
            idx = alloc_index(n, k)
            contains = contains_matrix(n, k)
            qhat, weights = self._forward_arrays(batch, idx)
            w_slot = weights[:, idx]
            contrib = w_slot * batch.bids[:, idx] * qhat
            rs = contrib.sum(axis=2)
            for i in range(batch.size):
                out.append(
                    select_and_price(
                        self.name,
                        rs[i],
                        contrib[i],
                        w_slot[i],
                        qhat[i],
                        batch.bids[i],
                        idx,
                        contains,
                        tie_rng=tie_rng,
                    )
                )
        return out
