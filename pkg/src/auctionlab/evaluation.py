"""Evaluation harness: expected-click metrics, the bid-perturbation
incentive test, prediction-quality reports, and the ablation and
sensitivity drivers.

Metrics use expected-click accounting: each displayed slot contributes its
oracle click probability (not a sampled click) to CTR, revenue, and
welfare, which removes Monte-Carlo noise from mechanism comparisons. The
oracle is available by construction in the synthetic environment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import (
    GfpMechanism,
    GspMechanism,
    OracleCtrSource,
    PredictorCtrSource,
    VcgMechanism,
    WvcgMechanism,
    ctrs_for_all,
)
from .domain import AuctionInstance
from .listwise import ListwiseCtrPredictor, pack_instances
from .mechanism import (
    DEGENERATE_DIVISOR,
    MechanismOutcome,
    NeuralMechanism,
    alloc_index,
    contains_matrix,
)
from .synth import ClickModel

# -- expected-click metrics ------------------------------------------------------


def slate_metrics(
    outcomes: list[MechanismOutcome],
    instances: list[AuctionInstance],
    click_model: ClickModel | None,
) -> dict:
    """CTR / RPM / SWPM plus clamp telemetry for one mechanism run."""
    if click_model is None:
        raise ValueError("click-model sidecar required: metrics are unidentifiable without the oracle")
    if len(outcomes) != len(instances):
        raise ValueError("one outcome per instance required")
    impressions = 0
    clicks = 0.0
    revenue = 0.0
    welfare = 0.0
    clamps_low = 0
    clamps_high = 0
    degenerate = 0
    slots = 0
    for out, inst in zip(outcomes, instances):
        tc = click_model.true_ctr(out.allocation, inst)
        bids = inst.bids()
        impressions += len(out.allocation)
        clicks += float(tc.sum())
        revenue += float((tc * np.asarray(out.payments)).sum())
        welfare += float((tc * bids[list(out.allocation)]).sum())
        clamps_low += sum(out.clamped_low)
        clamps_high += sum(out.clamped_high)
        degenerate += sum(out.degenerate)
        slots += len(out.allocation)
    return {
        "n_auctions": len(outcomes),
        "ctr": clicks / impressions,
        "rpm": revenue / impressions * 1000.0,
        "swpm": welfare / impressions * 1000.0,
        "clamp_low_rate": clamps_low / slots,
        "clamp_high_rate": clamps_high / slots,
        "degenerate_rate": degenerate / slots,
    }


def evaluate(
    mechanism,
    instances: list[AuctionInstance],
    click_model: ClickModel,
    reference_swpm: float | None = None,
) -> dict:
    """Run a mechanism over an evaluation set and report CTR/RPM/SWPM/SWMR.

    ``reference_swpm`` is the welfare-per-mille of the welfare-optimal run
    on the same set (computed with the oracle if omitted).
    """
    metrics = slate_metrics(mechanism.outcomes(instances), instances, click_model)
    if reference_swpm is None:
        n_slots = len(instances[0].display) if instances[0].display else None
        ref_mech = VcgMechanism(n_slots, OracleCtrSource(click_model))
        reference_swpm = slate_metrics(ref_mech.outcomes(instances), instances, click_model)["swpm"]
    metrics["swmr"] = metrics["swpm"] / reference_swpm if reference_swpm > 0 else float("nan")
    metrics["mechanism"] = mechanism.name
    return metrics


def vcg_reference_swpm(instances: list[AuctionInstance], click_model: ClickModel, n_slots: int) -> float:
    mech = VcgMechanism(n_slots, OracleCtrSource(click_model))
    return slate_metrics(mech.outcomes(instances), instances, click_model)["swpm"]


@dataclass
class MetricsReport:
    """Per-mechanism mean +/- std over replicates."""

    rows: list[dict] = field(default_factory=list)

    def add(self, mechanism: str, per_replicate: list[dict]) -> None:
        keys = ("ctr", "rpm", "swpm", "swmr", "clamp_low_rate", "clamp_high_rate", "degenerate_rate")
        row: dict = {"mechanism": mechanism, "replicates": len(per_replicate)}
        for k in keys:
            vals = np.array([m[k] for m in per_replicate])
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        self.rows.append(row)


# -- incentive-compatibility regret ------------------------------------------------


@dataclass(frozen=True)
class IcTestConfig:
    """Protocol for the bid-perturbation regret test: every ad of every
    sampled auction has its bid replaced by beta * value over the factor
    grid, holding everything else fixed."""

    betas: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 1.9)
    n_auctions: int = 2000
    repeats: int = 20

    def __post_init__(self):
        if any(b <= 0 for b in self.betas):
            raise ValueError("perturbation factors must be positive")
        if not any(abs(b - 1.0) < 0.25 for b in self.betas):
            raise ValueError("factor grid must probe near truthful bidding")


@dataclass
class IcrReport:
    mechanism: str
    values: list[float | None]
    fallback_repeats: int = 0  # repeats normalized by best-response utility

    @property
    def defined(self) -> list[float]:
        return [v for v in self.values if v is not None]

    @property
    def mean(self) -> float | None:
        return float(np.mean(self.defined)) if self.defined else None

    @property
    def std(self) -> float:
        d = self.defined
        return float(np.std(d, ddof=1)) if len(d) > 1 else 0.0

    @property
    def undefined_repeats(self) -> int:
        return sum(1 for v in self.values if v is None)


class ScoreAuctionResponder:
    """Fast bid-perturbation reruns for affine score auctions.

    These mechanisms rank by RS(theta, b) = sum_j coef[theta, j] * b[ad at
    slot j] with bid-independent coef = weight * ctr, so a rerun only
    re-mixes precomputed coefficients. Full enumeration, exact argmax.
    """

    def __init__(self, name: str, n_slots: int, coef_fn):
        # coef_fn(instances) -> (qhat [B, n_lists, K], w_slot [B, n_lists, K])
        self.name = name
        self.n_slots = n_slots
        self.coef_fn = coef_fn

    def prepare_many(self, instances: list[AuctionInstance], click_model: ClickModel) -> list[dict]:
        n = instances[0].n_ads
        idx = alloc_index(n, self.n_slots)
        contains = contains_matrix(n, self.n_slots)
        qhat, w_slot = self.coef_fn(instances, idx)
        out = []
        for i, inst in enumerate(instances):
            out.append(
                {
                    "idx": idx,
                    "contains": contains,
                    "coef": w_slot[i] * qhat[i],
                    "tc": click_model.true_ctr_matrix(inst, idx),
                }
            )
        return out

    def run_bids(self, ctx: dict, bids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """bids: [V, N] -> (winner rows [V], winner ads [V, K], payments [V, K])."""
        idx = ctx["idx"]
        coef = ctx["coef"]
        rs = (coef[None, :, :] * bids[:, idx]).sum(axis=2)  # [V, n_lists]
        rows = rs.argmax(axis=1)
        masked = np.where(ctx["contains"][None, :, :], -np.inf, rs[:, None, :])
        bex = masked.max(axis=2)  # [V, N]
        v_range = np.arange(bids.shape[0])
        ads = idx[rows]  # [V, K]
        bid_w = np.take_along_axis(bids, ads, axis=1)
        coef_w = coef[rows]  # [V, K]
        contrib_w = coef_w * bid_w
        rs_w = rs[v_range, rows]
        bex_w = np.take_along_axis(bex, ads, axis=1)
        ok = coef_w >= DEGENERATE_DIVISOR
        raw = np.where(ok, (bex_w - (rs_w[:, None] - contrib_w)) / np.where(ok, coef_w, 1.0), 0.0)
        pay = np.clip(raw, 0.0, bid_w)
        return rows, ads, pay


class RankByScoreResponder:
    """Bid-perturbation reruns for the position auctions (rank by
    bid * pCTR; pay own bid or the next score over own pCTR)."""

    def __init__(self, name: str, n_slots: int, second_price: bool):
        self.name = name
        self.n_slots = n_slots
        self.second_price = second_price

    def prepare_many(self, instances: list[AuctionInstance], click_model: ClickModel) -> list[dict]:
        n = instances[0].n_ads
        idx = alloc_index(n, self.n_slots)
        row_of = {tuple(row): i for i, row in enumerate(idx.tolist())}
        out = []
        for inst in instances:
            out.append(
                {
                    "pctr": inst.pctrs(),
                    "row_of": row_of,
                    "tc": click_model.true_ctr_matrix(inst, idx),
                }
            )
        return out

    def run_bids(self, ctx: dict, bids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pctr = ctx["pctr"]
        scores = bids * pctr[None, :]
        order = np.argsort(-scores, axis=1, kind="stable")
        ads = order[:, : self.n_slots]
        if self.second_price:
            sorted_scores = np.take_along_axis(scores, order, axis=1)
            nxt = np.zeros((bids.shape[0], self.n_slots))
            upto = min(scores.shape[1] - 1, self.n_slots)
            nxt[:, :upto] = sorted_scores[:, 1 : upto + 1]
            pay = nxt / pctr[ads]
        else:
            pay = np.take_along_axis(bids, ads, axis=1)
        rows = np.array([ctx["row_of"][tuple(a)] for a in ads.tolist()])
        return rows, ads, pay


def make_responder(mechanism, click_model: ClickModel) -> object:
    """Equivalent fast-rerun adapter for a mechanism object."""
    if isinstance(mechanism, NeuralMechanism):
        k = mechanism.predictor.config.n_slots

        def coef_fn(instances, idx):
            if mechanism.ctr_mode == "listwise":
                qhat = PredictorCtrSource(mechanism.predictor).list_ctrs_batch(instances, idx)
            else:
                qhat = np.stack([inst.pctrs()[idx] for inst in instances])
            if mechanism.unit_weights:
                w = np.ones((len(instances), instances[0].n_ads))
            else:
                batch = pack_instances(instances, mechanism.predictor.hasher)
                w = mechanism.weight_net.weights(mechanism.predictor.embed_ads(batch)).data
            return qhat, w[:, idx]

        return ScoreAuctionResponder(mechanism.name, k, coef_fn)
    if isinstance(mechanism, VcgMechanism):

        def coef_fn(instances, idx):
            qhat = ctrs_for_all(mechanism.ctr_source, instances, idx)
            return qhat, np.ones_like(qhat)

        return ScoreAuctionResponder("vcg", mechanism.n_slots, coef_fn)
    if isinstance(mechanism, WvcgMechanism):

        def coef_fn(instances, idx):
            qhat = ctrs_for_all(mechanism.ctr_source, instances, idx)
            w = np.broadcast_to(mechanism.weights, qhat.shape[1:])
            return qhat, np.broadcast_to(w[None], qhat.shape)

        return ScoreAuctionResponder("wvcg", mechanism.n_slots, coef_fn)
    if isinstance(mechanism, GspMechanism):
        return RankByScoreResponder("gsp", mechanism.n_slots, second_price=True)
    if isinstance(mechanism, GfpMechanism):
        return RankByScoreResponder("gfp", mechanism.n_slots, second_price=False)
    raise TypeError(f"no incentive-test adapter for {type(mechanism).__name__}")


def ic_regret(
    mechanism,
    instances: list[AuctionInstance],
    click_model: ClickModel,
    config: IcTestConfig | None = None,
    seed: int = 0,
    chunk: int = 512,
) -> IcrReport:
    """Relative ex-post regret of bid manipulation.

    For every ad of every sampled auction, the bid is replaced by
    beta * true value over the factor grid (everything else fixed), the
    mechanism reruns, and the ad's utility (oracle CTR times value minus
    payment, zero when not shown) is compared against truthful play.
    Reported as sum of positive regrets over sum of truthful utilities.
    """
    config = config or IcTestConfig()
    responder = make_responder(mechanism, click_model)
    betas = np.asarray(config.betas)
    ctx_cache: dict[int, dict] = {}
    values_report: list[float | None] = []
    fallbacks = 0
    for rep in range(config.repeats):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 808, rep)))
        sel = rng.choice(len(instances), size=min(config.n_auctions, len(instances)), replace=False)
        missing = [i for i in sel if i not in ctx_cache]
        for start in range(0, len(missing), chunk):
            part = missing[start : start + chunk]
            for i, ctx in zip(part, responder.prepare_many([instances[i] for i in part], click_model)):
                ctx_cache[i] = ctx
        total_regret = 0.0
        total_truthful = 0.0
        total_best = 0.0
        for i in sel:
            inst = instances[i]
            ctx = ctx_cache[i]
            values = inst.values()
            n = len(values)
            rows, ads, pay = responder.run_bids(ctx, values[None, :])
            tc = ctx["tc"][rows[0]]
            u_truth = np.zeros(n)
            for j, a in enumerate(ads[0]):
                u_truth[a] = tc[j] * (values[a] - pay[0, j])
            total_truthful += float(u_truth.sum())
            for a in range(n):
                bid_mat = np.tile(values, (len(betas), 1))
                bid_mat[:, a] = betas * values[a]
                rows_m, ads_m, pay_m = responder.run_bids(ctx, bid_mat)
                hit = ads_m == a  # [V, K]
                tc_m = ctx["tc"][rows_m]  # [V, K]
                u = (hit * tc_m * (values[a] - pay_m)).sum(axis=1)
                best = max(float(u.max()), float(u_truth[a]))
                total_best += best
                total_regret += max(0.0, best - float(u_truth[a]))
        # Aggregate-relative regret. A pure first-price rule leaves every
        # truthful utility at exactly zero, which would make the ratio
        # undefined for the one mechanism the test most needs to flag, so
        # in that case normalize by the best-response utilities instead.
        if total_truthful > 0:
            values_report.append(total_regret / total_truthful)
        elif total_best > 0:
            values_report.append(total_regret / total_best)
            fallbacks += 1
        else:
            values_report.append(None)
    return IcrReport(
        mechanism=getattr(mechanism, "name", responder.name),
        values=values_report,
        fallback_repeats=fallbacks,
    )


# -- prediction quality ------------------------------------------------------------


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank-based AUC with tie-averaged ranks; None if one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    uniq, inv, cnt = np.unique(scores, return_inverse=True, return_counts=True)
    hi = np.cumsum(cnt)
    avg_rank = (hi - cnt + 1 + hi) / 2.0
    ranks = avg_rank[inv]
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def ctr_quality_report(
    predictor: ListwiseCtrPredictor, instances: list[AuctionInstance], chunk: int = 1024
) -> dict:
    """AUC and logloss of list-wise predictions vs the slot-blind pCTR on
    the logged displays of an evaluation split."""
    list_scores = []
    point_scores = []
    labels = []
    for start in range(0, len(instances), chunk):
        part = instances[start : start + chunk]
        batch = pack_instances(part, predictor.hasher)
        q = predictor.predict_display(batch).data
        list_scores.append(q.reshape(-1))
        point_scores.append(np.take_along_axis(batch.pctr, batch.display, axis=1).reshape(-1))
        labels.append(batch.clicks.reshape(-1))
    list_scores = np.concatenate(list_scores)
    point_scores = np.concatenate(point_scores)
    labels = np.concatenate(labels)
    return {
        "listwise_auc": binary_auc(list_scores, labels),
        "pointwise_auc": binary_auc(point_scores, labels),
        "listwise_logloss": logloss(list_scores, labels),
        "pointwise_logloss": logloss(point_scores, labels),
        "n_slots_scored": int(labels.size),
    }


# -- ablations and sensitivity -------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_listwise_ctr", "no_learned_rank", "no_sw_loss")


def train_variant(
    variant: str,
    train_instances: list[AuctionInstance],
    base_config,
    click_model: ClickModel,
    wvcg_pool: int = 1500,
):
    """Train one ablation variant and return a runnable mechanism."""
    from .baselines import tune_wvcg
    from .training import train, train_ctr_model

    if variant == "full":
        result = train(train_instances, base_config)
        return NeuralMechanism(result.make_predictor(), result.make_weight_net())
    if variant == "no_sw_loss":
        result = train(train_instances, replace(base_config, sw_loss_weight=0.0))
        return NeuralMechanism(result.make_predictor(), result.make_weight_net())
    if variant == "no_listwise_ctr":
        result = train(train_instances, replace(base_config, use_listwise_ctr=False))
        return NeuralMechanism(
            result.make_predictor(),
            result.make_weight_net(),
            ctr_mode="pointwise",
            tie_seed=base_config.seed,
        )
    if variant == "no_learned_rank":
        result = train_ctr_model(train_instances, base_config)
        predictor = result.make_predictor()
        source = PredictorCtrSource(predictor)
        pool = train_instances[:wvcg_pool]
        params = tune_wvcg(pool, source, click_model, predictor.config.n_slots, seed=base_config.seed)
        return WvcgMechanism(predictor.config.n_slots, source, params.weights)
    raise ValueError(f"unknown ablation variant {variant!r}")


def run_ablations(
    train_instances: list[AuctionInstance],
    eval_instances: list[AuctionInstance],
    click_model: ClickModel,
    base_config,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    variants: tuple[str, ...] = ABLATION_VARIANTS,
) -> MetricsReport:
    """Train each variant across seeds and evaluate on a common split."""
    from dataclasses import replace as dc_replace

    n_slots = len(eval_instances[0].display)
    ref = vcg_reference_swpm(eval_instances, click_model, n_slots)
    report = MetricsReport()
    for variant in variants:
        per_seed = []
        for s in seeds:
            cfg = dc_replace(base_config, seed=s)
            mech = train_variant(variant, train_instances, cfg, click_model)
            per_seed.append(evaluate(mech, eval_instances, click_model, reference_swpm=ref))
        report.add(variant, per_seed)
    return report


def sweep(
    param: str,
    grid: tuple[float, ...],
    train_instances: list[AuctionInstance],
    eval_instances: list[AuctionInstance],
    click_model: ClickModel,
    base_config,
) -> list[dict]:
    """Train at each grid value with a fixed seed; returns (value, rpm, swpm) rows."""
    if param not in ("sw_loss_weight", "ctr_loss_weight"):
        raise ValueError(f"sweepable parameters are the two loss weights, got {param!r}")
    from .training import train

    n_slots = len(eval_instances[0].display)
    ref = vcg_reference_swpm(eval_instances, click_model, n_slots)
    rows = []
    for value in grid:
        cfg = replace(base_config, **{param: float(value)})
        result = train(train_instances, cfg)
        mech = NeuralMechanism(result.make_predictor(), result.make_weight_net())
        m = evaluate(mech, eval_instances, click_model, reference_swpm=ref)
        rows.append({"param": param, "value": float(value), "rpm": m["rpm"], "swpm": m["swpm"], "swmr": m["swmr"]})
    return rows
