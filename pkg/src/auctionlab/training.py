"""End-to-end training of the learned mechanism.

Each step scores every candidate allocation of every auction in the
batch, relaxes the descending sort of those scores into a row-stochastic
matrix, and minimizes

    L = L_revenue + a1 * L_order + a2 * L_ctr

where L_revenue is minus the soft-top-1 expected revenue, L_order is a
row-wise cross-entropy pulling the relaxed sort toward the
social-welfare ordering, and L_ctr is the click-prediction loss on the
logged allocation. The discrete selections inside payments are held
fixed per step; gradients flow through score values only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .domain import AuctionInstance
from .listwise import (
    FeatureHasher,
    ListwiseCtrPredictor,
    PackedBatch,
    PredictorConfig,
    list_ctr_loss,
    pack_instances,
)
from .mechanism import (
    AdWeightConfig,
    AdWeightNet,
    alloc_index,
    contains_matrix,
    expected_revenues_tensor,
    ranking_scores_tensor,
    slot_gather,
)
from .softsort import rank_scaling


MODEL_META_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last finite-epoch parameters."""

    def __init__(self, message: str, params: dict[str, np.ndarray], epoch: int):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for end-to-end training.

    ``temperature`` is the relaxed-sort temperature, ``sw_loss_weight``
    scales the welfare-ordering cross-entropy, ``ctr_loss_weight`` scales
    the click loss.
    """

    temperature: float = 1.0
    sw_loss_weight: float = 0.2
    ctr_loss_weight: float = 0.01
    learning_rate: float = 1e-3
    batch_size: int = 1024
    epochs: int = 8
    seed: int = 0
    embed_dim: int = 8
    vocab: int = 10_000
    att_hidden: int = 16
    list_hidden: tuple[int, ...] = (32, 16, 8)
    weight_hidden: tuple[int, ...] = (32, 8)
    use_listwise_ctr: bool = True   # False: slot-blind pCTR scores, no CTR net
    freeze_ctr_model: bool = False  # CTR net learns from clicks only
    max_instances: int | None = None
    eval_sample: int = 2000

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.sw_loss_weight < 0 or self.ctr_loss_weight < 0:
            raise ValueError("loss weights must be non-negative")


# Grid-searched defaults for the two benchmark shapes: "default" is the
# small desk-scale shape, "large" the wide one (more slots and candidates,
# colder sort, heavier auxiliary losses).
PRESETS: dict[str, TrainConfig] = {
    "default": TrainConfig(),
    "large": TrainConfig(
        temperature=0.1,
        sw_loss_weight=0.4,
        ctr_loss_weight=0.3,
        batch_size=8192,
        list_hidden=(60, 32, 10),
    ),
}


@dataclass
class LossBreakdown:
    revenue: float   # soft-top-1 expected revenue term
    order: float     # welfare-ordering cross-entropy
    ctr: float       # click loss on the logged allocation

    def total(self, config: TrainConfig) -> float:
        return self.revenue + config.sw_loss_weight * self.order + config.ctr_loss_weight * self.ctr


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    predictor_config: PredictorConfig
    weight_config: AdWeightConfig
    hasher: FeatureHasher
    curve: list[dict] = field(default_factory=list)

    def make_predictor(self) -> ListwiseCtrPredictor:
        return ListwiseCtrPredictor(self.predictor_config, params=self.params, hasher=self.hasher)

    def make_weight_net(self) -> AdWeightNet:
        return AdWeightNet(self.weight_config, params=self.params)


def batch_slice(packed: PackedBatch, idx: np.ndarray) -> PackedBatch:
    return PackedBatch(
        ad_rows=packed.ad_rows[idx],
        oi_rows=packed.oi_rows[idx],
        user_rows=packed.user_rows[idx],
        request_rows=packed.request_rows[idx],
        pctr=packed.pctr[idx],
        bids=packed.bids[idx],
        values=packed.values[idx],
        display=packed.display[idx] if packed.display is not None else None,
        clicks=packed.clicks[idx] if packed.clicks is not None else None,
    )


def batch_losses(
    predictor: ListwiseCtrPredictor,
    weight_net: AdWeightNet,
    batch: PackedBatch,
    config: TrainConfig,
) -> dict[str, Tensor]:
    """Build the loss graph for one batch; returns total and parts."""
    n, k = batch.n_ads, predictor.config.n_slots
    idx = alloc_index(n, k)
    contains = contains_matrix(n, k)
    b = batch.size
    n_lists = idx.shape[0]

    e_ad = predictor.embed_ads(batch)
    if config.use_listwise_ctr:
        reps = predictor.ad_representations(batch, e_ad=e_ad)
        qhat = predictor.predict_lists(batch, idx, reps=reps)
        ctr_loss = list_ctr_loss(predictor.predict_display(batch, reps=reps), batch.clicks)
    else:
        qhat = ad.constant(batch.pctr[:, idx])
        ctr_loss = ad.constant(0.0)

    qhat_rs = qhat.detach() if config.freeze_ctr_model else qhat
    e_ad_w = e_ad.detach() if config.freeze_ctr_model else e_ad
    weights = weight_net.weights(e_ad_w)
    w_slot = slot_gather(weights, idx)
    bid_slot = ad.constant(batch.bids[:, idx])
    contrib = ad.mul(ad.mul(w_slot, bid_slot), qhat_rs)
    rs = ad.tsum(contrib, axis=2)
    revenues = expected_revenues_tensor(rs, contrib, w_slot, qhat_rs, batch.bids, idx, contains)

    # Soft-top-1 expected revenue: only the first row of the relaxed
    # permutation is needed for the revenue term.
    rowsums = ad.absdiff_rowsums(rs)
    c0 = ad.sub(ad.scale(rs, float(n_lists - 1)), rowsums)
    top_row = ad.softmax(ad.scale(c0, 1.0 / config.temperature), axis=-1)
    revenue_loss = ad.scale(ad.tmean(ad.tsum(ad.mul(top_row, revenues), axis=1)), -1.0)

    if config.sw_loss_weight > 0:
        sw = (batch.bids[:, idx] * qhat_rs.data).sum(axis=2)
        sw_order = np.argsort(-sw, axis=1, kind="stable")
        logits = ad.rank_logits(rs, rowsums, rank_scaling(n_lists), 1.0 / config.temperature)
        picked = ad.log_softmax_pick(logits, sw_order)
        order_loss = ad.scale(ad.tmean(picked), -1.0)
    else:
        order_loss = ad.constant(0.0)

    total = ad.add(
        revenue_loss,
        ad.add(ad.scale(order_loss, config.sw_loss_weight), ad.scale(ctr_loss, config.ctr_loss_weight)),
    )
    return {"total": total, "revenue": revenue_loss, "order": order_loss, "ctr": ctr_loss}


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def build_models(
    instances: list[AuctionInstance], config: TrainConfig
) -> tuple[ListwiseCtrPredictor, AdWeightNet]:
    """Fresh predictor and weight net sized to the dataset, seeded init."""
    k = len(instances[0].display)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 9091)))
    hasher = FeatureHasher(
        vocab=config.vocab,
        known_users=frozenset(i.user_id for i in instances),
        known_requests=frozenset(i.request_id for i in instances),
    )
    pred_cfg = PredictorConfig(
        n_slots=k,
        embed_dim=config.embed_dim,
        vocab=config.vocab,
        att_hidden=config.att_hidden,
        list_hidden=config.list_hidden,
    )
    predictor = ListwiseCtrPredictor(pred_cfg, rng=rng, hasher=hasher)
    weight_net = AdWeightNet(AdWeightConfig(embed_dim=config.embed_dim, hidden=config.weight_hidden), rng=rng)
    return predictor, weight_net


def train(
    train_instances: list[AuctionInstance],
    config: TrainConfig,
    eval_instances: list[AuctionInstance] | None = None,
    click_model=None,
    verbose: bool = False,
) -> TrainResult:
    """Full end-to-end training loop; deterministic given config and data."""
    if not train_instances:
        raise ValueError("training set is empty")
    if config.max_instances is not None:
        train_instances = train_instances[: config.max_instances]
    predictor, weight_net = build_models(train_instances, config)
    params = {**predictor.params, **weight_net.params}
    adam = AdamState(lr=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 4242)))
    packed = pack_instances(train_instances, predictor.hasher)
    n_train = packed.size

    result = TrainResult(
        params=params,
        predictor_config=predictor.config,
        weight_config=weight_net.config,
        hasher=predictor.hasher,
    )
    last_good = _snapshot(params)
    for epoch in range(config.epochs):
        order = rng.permutation(n_train)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, n_train, config.batch_size):
            sel = order[start : start + config.batch_size]
            if sel.size < 2:
                continue
            losses = batch_losses(predictor, weight_net, batch_slice(packed, sel), config)
            total = losses["total"]
            if not np.isfinite(total.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", last_good, epoch - 1
                )
            total.backward()
            ad.adam_step(adam, params)
            ad.zero_grads(params)
            sums += [total.item(), losses["revenue"].item(), losses["order"].item(), losses["ctr"].item()]
            n_batches += 1
        row = {
            "epoch": epoch,
            "loss": float(sums[0] / n_batches),
            "revenue_loss": float(sums[1] / n_batches),
            "order_loss": float(sums[2] / n_batches),
            "ctr_loss": float(sums[3] / n_batches),
        }
        if eval_instances is not None and click_model is not None:
            from .evaluation import slate_metrics

            mech = _inference_mechanism(result, config)
            sample = eval_instances[: config.eval_sample]
            m = slate_metrics(mech.outcomes(sample), sample, click_model)
            row["eval_rpm"] = m["rpm"]
            row["eval_swpm"] = m["swpm"]
        result.curve.append(row)
        last_good = _snapshot(params)
        if verbose:
            print("  " + " ".join(f"{k}={v:.5g}" for k, v in row.items()))
    return result


def _inference_mechanism(result: TrainResult, config: TrainConfig):
    from .mechanism import NeuralMechanism

    return NeuralMechanism(
        result.make_predictor(),
        result.make_weight_net(),
        ctr_mode="listwise" if config.use_listwise_ctr else "pointwise",
        tie_seed=config.seed if not config.use_listwise_ctr else None,
    )


def save_model(out_dir, result: TrainResult) -> None:
    """Write the parameter checkpoint plus the metadata needed to rebuild
    the nets (configs and the feature-hash vocabularies)."""
    import json
    from dataclasses import asdict
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ad.save_params(out / "checkpoint.json", result.params)
    meta = {
        "schema_version": MODEL_META_VERSION,
        "predictor_config": asdict(result.predictor_config),
        "weight_config": asdict(result.weight_config),
        "hasher": {
            "vocab": result.hasher.vocab,
            "known_users": sorted(result.hasher.known_users) if result.hasher.known_users else None,
            "known_requests": sorted(result.hasher.known_requests) if result.hasher.known_requests else None,
        },
    }
    with open(out / "model_meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def load_model(model_dir) -> TrainResult:
    import json
    from pathlib import Path

    out = Path(model_dir)
    with open(out / "model_meta.json") as fh:
        meta = json.load(fh)
    if meta.get("schema_version") != MODEL_META_VERSION:
        raise ValueError(f"unsupported model meta version {meta.get('schema_version')!r}")
    params = ad.load_params(out / "checkpoint.json")
    pc = meta["predictor_config"]
    pc["list_hidden"] = tuple(pc["list_hidden"])
    wc = meta["weight_config"]
    wc["hidden"] = tuple(wc["hidden"])
    wc["input_fields"] = tuple(wc["input_fields"])
    h = meta["hasher"]
    hasher = FeatureHasher(
        vocab=h["vocab"],
        known_users=frozenset(h["known_users"]) if h["known_users"] is not None else None,
        known_requests=frozenset(h["known_requests"]) if h["known_requests"] is not None else None,
    )
    from .mechanism import AdWeightConfig as _AWC

    return TrainResult(
        params=params,
        predictor_config=PredictorConfig(**pc),
        weight_config=_AWC(**wc),
        hasher=hasher,
    )


def train_ctr_model(
    instances: list[AuctionInstance],
    config: TrainConfig,
    verbose: bool = False,
) -> TrainResult:
    """Train only the click predictor on logged displays (supervised)."""
    if config.max_instances is not None:
        instances = instances[: config.max_instances]
    predictor, weight_net = build_models(instances, config)
    params = dict(predictor.params)
    adam = AdamState(lr=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 515)))
    packed = pack_instances(instances, predictor.hasher)
    result = TrainResult(
        params={**params, **weight_net.params},
        predictor_config=predictor.config,
        weight_config=weight_net.config,
        hasher=predictor.hasher,
    )
    last_good = _snapshot(params)
    for epoch in range(config.epochs):
        order = rng.permutation(packed.size)
        total_loss = 0.0
        n_batches = 0
        for start in range(0, packed.size, config.batch_size):
            sel = order[start : start + config.batch_size]
            if sel.size < 2:
                continue
            batch = batch_slice(packed, sel)
            loss = list_ctr_loss(predictor.predict_display(batch), batch.clicks)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good, epoch - 1)
            loss.backward()
            ad.adam_step(adam, params)
            ad.zero_grads(params)
            total_loss += loss.item()
            n_batches += 1
        result.curve.append({"epoch": epoch, "loss": total_loss / n_batches})
        last_good = _snapshot(params)
        if verbose:
            print(f"  epoch {epoch}: ctr loss {total_loss / n_batches:.5f}")
    return result
