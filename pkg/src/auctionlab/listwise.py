"""Context-aware list-wise CTR prediction.

Given an ordered ad list and the request's public context (organic items,
user id, request id), predicts a click probability for every slot. The
prediction is deliberately sensitive to both the slot an ad occupies and
the ads displayed next to it:

  1. organic items attend over themselves (scaled dot-product attention),
  2. each candidate ad aggregates the organic representations through a
     small pair MLP that emits one scalar weight per (ad, organic) pair,
  3. the per-slot ad representations of one allocation are concatenated,
     with each ad's slot-blind pCTR, into a single list vector,
  4. per-slot sigmoid heads read the list vector plus user/request context.

Bids never enter any input here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .domain import FEATURE_FIELDS, Allocation, AuctionInstance


def hash_features(values: np.ndarray, field_idx: int, vocab: int) -> np.ndarray:
    """Deterministic feature-id hashing into a fixed-size table.

    Row 0 is reserved for out-of-vocabulary user/request ids.
    """
    v = np.asarray(values, dtype=np.int64)
    mixed = (v * 2654435761 + (field_idx + 1) * 40503 + 7919) % (2**31)
    return 1 + mixed % (vocab - 1)


OOV_ROW = 0


@dataclass
class FeatureHasher:
    """Maps raw sparse ids to embedding rows; unknown user/request ids
    (when a known-id vocabulary is supplied) share the OOV row."""

    vocab: int = 10_000
    known_users: frozenset[int] | None = None
    known_requests: frozenset[int] | None = None

    def ad_rows(self, feats: np.ndarray) -> np.ndarray:
        # feats [..., n_fields] -> hashed rows, one table shared across fields
        out = np.empty_like(feats, dtype=np.int64)
        for f in range(feats.shape[-1]):
            out[..., f] = hash_features(feats[..., f], f, self.vocab)
        return out

    def user_rows(self, ids: np.ndarray) -> np.ndarray:
        rows = hash_features(ids, 7, self.vocab)
        if self.known_users is not None:
            known = np.array([i in self.known_users for i in np.asarray(ids).ravel()])
            rows = np.where(known.reshape(rows.shape), rows, OOV_ROW)
        return rows

    def request_rows(self, ids: np.ndarray) -> np.ndarray:
        rows = hash_features(ids, 11, self.vocab)
        if self.known_requests is not None:
            known = np.array([i in self.known_requests for i in np.asarray(ids).ravel()])
            rows = np.where(known.reshape(rows.shape), rows, OOV_ROW)
        return rows


@dataclass
class PackedBatch:
    """Dense, hash-encoded view of a list of same-shape auction instances."""

    ad_rows: np.ndarray          # [B, N, F] embedding-table rows
    oi_rows: np.ndarray          # [B, M, F]
    user_rows: np.ndarray        # [B]
    request_rows: np.ndarray     # [B]
    pctr: np.ndarray             # [B, N]
    bids: np.ndarray             # [B, N]
    values: np.ndarray           # [B, N]
    display: np.ndarray | None   # [B, K]
    clicks: np.ndarray | None    # [B, K]

    @property
    def size(self) -> int:
        return self.ad_rows.shape[0]

    @property
    def n_ads(self) -> int:
        return self.ad_rows.shape[1]

    @property
    def n_organic(self) -> int:
        return self.oi_rows.shape[1]


def pack_instances(instances: list[AuctionInstance], hasher: FeatureHasher) -> PackedBatch:
    ad_feats = np.array([[a.features for a in inst.ads] for inst in instances], dtype=np.int64)
    oi_feats = np.array([[o.features for o in inst.organic] for inst in instances], dtype=np.int64)
    if oi_feats.size == 0:
        oi_feats = oi_feats.reshape(len(instances), 0, len(FEATURE_FIELDS))
    has_display = all(inst.display is not None for inst in instances)
    display = np.array([inst.display for inst in instances], dtype=np.int64) if has_display else None
    has_clicks = all(inst.clicks is not None for inst in instances)
    clicks = np.array([inst.clicks for inst in instances], dtype=np.float64) if has_clicks else None
    return PackedBatch(
        ad_rows=hasher.ad_rows(ad_feats),
        oi_rows=hasher.ad_rows(oi_feats),
        user_rows=hasher.user_rows(np.array([i.user_id for i in instances])),
        request_rows=hasher.request_rows(np.array([i.request_id for i in instances])),
        pctr=np.array([i.pctrs() for i in instances]),
        bids=np.array([i.bids() for i in instances]),
        values=np.array([i.values() for i in instances]),
        display=display,
        clicks=clicks,
    )


@dataclass(frozen=True)
class PredictorConfig:
    n_slots: int
    embed_dim: int = 8
    vocab: int = 10_000
    att_hidden: int = 16
    list_hidden: tuple[int, ...] = (32, 16, 8)


def _dense_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def init_predictor_params(config: PredictorConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = config.embed_dim
    k = config.n_slots
    p: dict[str, np.ndarray] = {
        "ctr.emb_ad": rng.normal(0.0, 0.1, (config.vocab, d)),
        "ctr.emb_oi": rng.normal(0.0, 0.1, (config.vocab, d)),
        "ctr.emb_user": rng.normal(0.0, 0.1, (config.vocab, d)),
        "ctr.emb_req": rng.normal(0.0, 0.1, (config.vocab, d)),
        "ctr.wq": _dense_init(rng, d, d),
        "ctr.wk": _dense_init(rng, d, d),
        "ctr.wv": _dense_init(rng, d, d),
        "ctr.att.w0": _dense_init(rng, 2 * d, config.att_hidden),
        "ctr.att.b0": np.zeros(config.att_hidden),
        "ctr.att.w1": _dense_init(rng, config.att_hidden, 1),
        "ctr.att.b1": np.zeros(1),
        "ctr.heads.w": _dense_init(rng, config.list_hidden[-1] + 2 * d, k),
        "ctr.heads.b": np.zeros(k),
    }
    width = k * (2 * d + 1)
    for i, h in enumerate(config.list_hidden):
        p[f"ctr.list.w{i}"] = _dense_init(rng, width, h)
        p[f"ctr.list.b{i}"] = np.zeros(h)
        width = h
    return {name: ad.parameter(arr, name) for name, arr in p.items()}


class ListwiseCtrPredictor:
    """Slot-level CTR prediction over whole allocations; see module docstring."""

    def __init__(
        self,
        config: PredictorConfig,
        params: dict[str, Tensor] | None = None,
        rng: np.random.Generator | None = None,
        hasher: FeatureHasher | None = None,
    ):
        self.config = config
        if params is None:
            params = init_predictor_params(config, rng or np.random.default_rng(0))
        self.params = params
        self.hasher = hasher or FeatureHasher(vocab=config.vocab)

    # -- building blocks ----------------------------------------------------

    def embed_ads(self, batch: PackedBatch) -> Tensor:
        """Mean of per-field hashed embeddings -> [B, N, d]."""
        rows = ad.take_rows(self.params["ctr.emb_ad"], batch.ad_rows)  # [B,N,F,d]
        return ad.tmean(rows, axis=2)

    def self_attend_organic(self, batch: PackedBatch) -> Tensor:
        """Scaled dot-product attention of organic items over themselves.

        Returns [B, M, d]; with no organic items the result is empty and
        downstream ad context is zero.
        """
        e_oi = ad.tmean(ad.take_rows(self.params["ctr.emb_oi"], batch.oi_rows), axis=2)
        q = ad.matmul(e_oi, self.params["ctr.wq"])
        k = ad.matmul(e_oi, self.params["ctr.wk"])
        v = ad.matmul(e_oi, self.params["ctr.wv"])
        scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(self.config.embed_dim))
        return ad.matmul(ad.softmax(scores, axis=-1), v)

    def target_attend(self, e_ad: Tensor, h_oi: Tensor) -> Tensor:
        """Ad/organic interaction: a pair MLP emits one scalar weight per
        (ad, organic item) pair, and each ad's embedding is scaled by the
        summed weights (an unnormalized attention sum). [B, N, d]."""
        b, n, d = e_ad.shape
        m = h_oi.shape[1]
        if m == 0:
            return ad.constant(np.zeros((b, n, d)))
        e_exp = ad.broadcast_to(ad.reshape(e_ad, (b, n, 1, d)), (b, n, m, d))
        h_exp = ad.broadcast_to(ad.reshape(h_oi, (b, 1, m, d)), (b, n, m, d))
        pair = ad.reshape(ad.concat([e_exp, h_exp], axis=-1), (b * n * m, 2 * d))
        hidden = ad.relu(ad.add(ad.matmul(pair, self.params["ctr.att.w0"]), self.params["ctr.att.b0"]))
        w = ad.add(ad.matmul(hidden, self.params["ctr.att.w1"]), self.params["ctr.att.b1"])
        wsum = ad.tsum(ad.reshape(w, (b, n, m)), axis=2, keepdims=True)  # [B,N,1]
        return ad.mul(e_ad, wsum)

    def ad_representations(self, batch: PackedBatch, e_ad: Tensor | None = None) -> Tensor:
        """Slot-independent per-ad features: embedding | organic context |
        slot-blind pCTR -> [B, N, 2d+1]."""
        if e_ad is None:
            e_ad = self.embed_ads(batch)
        h_oi = self.self_attend_organic(batch)
        h_ad = self.target_attend(e_ad, h_oi)
        pctr = ad.constant(batch.pctr[:, :, None])
        return ad.concat([e_ad, h_ad, pctr], axis=-1)

    def _context(self, batch: PackedBatch) -> Tensor:
        e_u = ad.take_rows(self.params["ctr.emb_user"], batch.user_rows)
        e_r = ad.take_rows(self.params["ctr.emb_req"], batch.request_rows)
        return ad.concat([e_u, e_r], axis=-1)  # [B, 2d]

    def _list_mlp(self, list_in: Tensor, ctx: Tensor) -> Tensor:
        """list_in: [rows, K*(2d+1)], ctx: [rows, 2d] -> q per slot [rows, K]."""
        h = list_in
        for i in range(len(self.config.list_hidden)):
            h = ad.relu(ad.add(ad.matmul(h, self.params[f"ctr.list.w{i}"]), self.params[f"ctr.list.b{i}"]))
        head_in = ad.concat([h, ctx], axis=-1)
        logits = ad.add(ad.matmul(head_in, self.params["ctr.heads.w"]), self.params["ctr.heads.b"])
        return ad.sigmoid(logits)

    # -- public API -----------------------------------------------------------

    def predict_lists(self, batch: PackedBatch, alloc_idx: np.ndarray, reps: Tensor | None = None) -> Tensor:
        """CTR per slot for every candidate allocation -> [B, n_lists, K].

        alloc_idx: [n_lists, K] ad indices shared by the whole batch.
        """
        k = self.config.n_slots
        b = batch.size
        n_lists = alloc_idx.shape[0]
        if reps is None:
            reps = self.ad_representations(batch)
        f = reps.shape[-1]
        gathered = ad.take_axis1(reps, alloc_idx.reshape(-1))  # [B, n_lists*K, f]
        list_in = ad.reshape(gathered, (b * n_lists, k * f))
        ctx = self._context(batch)
        ctx_rep = ad.reshape(
            ad.broadcast_to(ad.reshape(ctx, (b, 1, ctx.shape[-1])), (b, n_lists, ctx.shape[-1])),
            (b * n_lists, ctx.shape[-1]),
        )
        q = self._list_mlp(list_in, ctx_rep)
        return ad.reshape(q, (b, n_lists, k))

    def predict_display(self, batch: PackedBatch, reps: Tensor | None = None) -> Tensor:
        """CTR per slot for each instance's own logged allocation -> [B, K]."""
        if batch.display is None:
            raise ValueError("batch has no logged display")
        k = self.config.n_slots
        b, n = batch.size, batch.n_ads
        if reps is None:
            reps = self.ad_representations(batch)
        f = reps.shape[-1]
        flat = ad.reshape(reps, (b * n, f))
        rows = (np.arange(b)[:, None] * n + batch.display).reshape(-1)
        gathered = ad.reshape(ad.take_rows(flat, rows), (b, k * f))
        return self._list_mlp(gathered, self._context(batch))

    def predict_list_ctr(self, instance: AuctionInstance, alloc: Allocation) -> np.ndarray:
        """Single-instance convenience wrapper; returns K plain floats."""
        batch = pack_instances([instance], self.hasher)
        q = self.predict_lists(batch, np.asarray([alloc], dtype=np.int64))
        return q.data[0, 0]


def list_ctr_loss(predicted: Tensor, labels: np.ndarray) -> Tensor:
    """Per-slot binary cross-entropy against logged clicks, summed over
    slots and averaged over the batch."""
    y = ad.constant(labels)
    one = ad.constant(1.0)
    per_slot = -(y * ad.log(predicted)) - (one - y) * ad.log(one - predicted)
    return ad.tmean(ad.tsum(per_slot, axis=1))
