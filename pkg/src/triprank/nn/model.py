"""Attention reranker: trip encoder, candidate encoder, cross-attention scoring."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import ShapeMismatch
from ..features import N_CANDIDATE_FEATURES, N_TRIP_FEATURES
from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, glorot


@dataclass(frozen=True)
class ModelConfig:
    city_emb_dim: int = 32
    country_emb_dim: int = 32
    affiliate_emb_dim: int = 5
    trip_len: int = 50
    model_dim: int = 115
    n_trip_blocks: int = 3
    n_candidate_blocks: int = 1
    n_heads: int = 5
    head_dim: int = 23
    max_candidates: int = 500
    ff_mult: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.model_dim:
            raise ValueError(f"n_heads * head_dim = {self.n_heads * self.head_dim} != model_dim {self.model_dim}")

    @property
    def trip_raw_dim(self) -> int:
        return self.city_emb_dim + 2 * self.country_emb_dim + self.affiliate_emb_dim + N_TRIP_FEATURES

    @property
    def candidate_raw_dim(self) -> int:
        return self.city_emb_dim + self.country_emb_dim + N_CANDIDATE_FEATURES

    def to_kv(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        values = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key in kv:
                values[f.name] = kv[key] if f.type in ("str", str) else int(kv[key])
        return cls(**values)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """Small configuration for desk-scale training and gradient checks."""
        base = dict(
            city_emb_dim=8,
            country_emb_dim=4,
            affiliate_emb_dim=2,
            model_dim=16,
            n_trip_blocks=1,
            n_candidate_blocks=1,
            n_heads=2,
            head_dim=8,
        )
        base.update(overrides)
        return cls(**base)


# ----------------------------------------------------------------------
# layers


def add_dense(store: ParameterStore, name: str, d_in: int, d_out: int, rng: np.random.Generator) -> None:
    store.add(f"{name}.w", glorot(rng, (d_in, d_out)))
    store.add(f"{name}.b", np.zeros(d_out))


def add_layer_norm(store: ParameterStore, name: str, d: int) -> None:
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.s", np.zeros(d))


def add_attention(store: ParameterStore, name: str, d: int, rng: np.random.Generator) -> None:
    for part in "qkvo":
        add_dense(store, f"{name}.{part}", d, d, rng)


def add_block(store: ParameterStore, name: str, d: int, ff_mult: int, rng: np.random.Generator) -> None:
    add_attention(store, f"{name}.attn", d, rng)
    add_layer_norm(store, f"{name}.ln1", d)
    add_dense(store, f"{name}.ff1", d, ff_mult * d, rng)
    add_dense(store, f"{name}.ff2", ff_mult * d, d, rng)
    add_layer_norm(store, f"{name}.ln2", d)


def dense(store: ParameterStore, name: str, x) -> Tensor:
    return ad.dense(x, store[f"{name}.w"], store[f"{name}.b"])


def layer_norm(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, store[f"{name}.g"], store[f"{name}.s"])


def attention_heads(store: ParameterStore, name: str, queries_src, keys_vals_src, mask, n_heads: int):
    """Per-head scaled dot-product attention before the output projection.

    Returns (concatenated head outputs (b, n_q, d), attention weights (b, h, n_q, n_kv)).
    """
    q_src, kv_src = ad.as_tensor(queries_src), ad.as_tensor(keys_vals_src)
    b, n_q, d = q_src.shape
    n_kv = kv_src.shape[1]
    if kv_src.shape[0] != b or kv_src.shape[2] != d:
        raise ShapeMismatch(f"queries {q_src.shape} vs keys {kv_src.shape}")
    if d % n_heads:
        raise ShapeMismatch(f"model dim {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    def split(x: Tensor, n: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (b, n, n_heads, hd)), (0, 2, 1, 3))

    q = split(dense(store, f"{name}.q", q_src), n_q)
    k = split(dense(store, f"{name}.k", kv_src), n_kv)
    v = split(dense(store, f"{name}.v", kv_src), n_kv)
    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    key_mask = None if mask is None else (np.asarray(mask) > 0)[:, None, None, :]
    weights = ad.masked_softmax(logits, key_mask)
    heads = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, n_q, d))
    return heads, weights


def multi_head_attention(store: ParameterStore, name: str, queries_src, keys_vals_src, mask, n_heads: int) -> Tensor:
    heads, _ = attention_heads(store, name, queries_src, keys_vals_src, mask, n_heads)
    out = dense(store, f"{name}.o", heads)
    if mask is not None:
        # queries with no visible key produce zeros, not the output bias
        has_keys = (np.asarray(mask) > 0).any(axis=1).astype(out.data.dtype)
        out = ad.mul(out, has_keys[:, None, None])
    return out


def mul_residual(x: Tensor, sub: Tensor, store: ParameterStore, ln_name: str) -> Tensor:
    """LayerNorm(x * sublayer(x)): the multiplicative residual combiner."""
    return layer_norm(store, ln_name, ad.mul(x, sub))


def transformer_mul_block(store: ParameterStore, name: str, x: Tensor, mask: np.ndarray, n_heads: int) -> Tensor:
    row_mask = np.asarray(mask, dtype=x.data.dtype)[..., None]
    a = multi_head_attention(store, f"{name}.attn", x, x, mask, n_heads)
    h = ad.mul(mul_residual(x, a, store, f"{name}.ln1"), row_mask)
    f = dense(store, f"{name}.ff2", ad.relu(dense(store, f"{name}.ff1", h)))
    return ad.mul(mul_residual(h, f, store, f"{name}.ln2"), row_mask)


def positional_combine(store: ParameterStore, name: str, city_repr: Tensor, mask: np.ndarray) -> Tensor:
    """Scale each real position by a learned code of its offsets from both trip ends."""
    mask = np.asarray(mask) > 0
    b, L = mask.shape
    lengths = mask.sum(axis=1)
    pos = np.broadcast_to(np.arange(L), (b, L))
    n_table = store[f"{name}.start"].shape[0]
    start_idx = np.where(mask, np.minimum(pos, n_table - 1), 0)
    end_idx = np.where(mask, np.clip(lengths[:, None] - 1 - pos, 0, n_table - 1), 0)
    code = ad.concat(
        [ad.embedding(store[f"{name}.start"], start_idx), ad.embedding(store[f"{name}.end"], end_idx)], axis=-1
    )
    code = dense(store, f"{name}.proj", code)
    return ad.mul(ad.mul(city_repr, code), mask[..., None].astype(city_repr.data.dtype))


# ----------------------------------------------------------------------
# model


class RerankModel:
    """Scores = MultiHeadAttention(candidates, trip) . target_context."""

    def __init__(self, cfg: ModelConfig, store: ParameterStore, sizes: dict[str, int]):
        self.cfg = cfg
        self.store = store
        self.sizes = dict(sizes)

    @classmethod
    def create(cls, cfg: ModelConfig, n_cities: int, n_countries: int, n_affiliates: int, seed: int = 0) -> "RerankModel":
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        store = ParameterStore(dtype=cfg.dtype)
        store.add("emb.city", glorot(rng, (n_cities + 1, cfg.city_emb_dim)))
        store.add("emb.country", glorot(rng, (n_countries + 1, cfg.country_emb_dim)))
        store.add("emb.affiliate", glorot(rng, (n_affiliates + 1, cfg.affiliate_emb_dim)))
        add_dense(store, "trip.in", cfg.trip_raw_dim, d, rng)
        store.add("pos.start", glorot(rng, (cfg.trip_len, d // 2)))
        store.add("pos.end", glorot(rng, (cfg.trip_len, d - d // 2)))
        add_dense(store, "pos.proj", d, d, rng)
        for i in range(cfg.n_trip_blocks):
            add_block(store, f"trip.block{i}", d, cfg.ff_mult, rng)
        add_dense(store, "cand.in", cfg.candidate_raw_dim, d, rng)
        for i in range(cfg.n_candidate_blocks):
            add_block(store, f"cand.block{i}", d, cfg.ff_mult, rng)
        add_attention(store, "cross", d, rng)
        add_dense(store, "target", N_TRIP_FEATURES, d, rng)
        sizes = {"city_id": n_cities, "country": n_countries, "affiliate_id": n_affiliates}
        return cls(cfg, store, sizes)

    def _float(self, x) -> np.ndarray:
        return np.asarray(x, dtype=self.store.dtype)

    def encode_trip(self, batch: dict) -> Tensor:
        s = self.store
        raw = ad.concat(
            [
                ad.embedding(s["emb.city"], batch["trip_city"]),
                ad.embedding(s["emb.country"], batch["trip_booker"]),
                ad.embedding(s["emb.country"], batch["trip_hotel"]),
                ad.embedding(s["emb.affiliate"], batch["trip_affiliate"]),
                Tensor(self._float(batch["trip_features"])),
            ],
            axis=-1,
        )
        mask = batch["trip_mask"]
        h = ad.mul(dense(s, "trip.in", raw), self._float(mask)[..., None])
        h = positional_combine(s, "pos", h, mask)
        for i in range(self.cfg.n_trip_blocks):
            h = transformer_mul_block(s, f"trip.block{i}", h, mask, self.cfg.n_heads)
        return h

    def encode_candidates(self, batch: dict) -> Tensor:
        s = self.store
        raw = ad.concat(
            [
                ad.embedding(s["emb.city"], batch["cand_city"]),
                ad.embedding(s["emb.country"], batch["cand_country"]),
                Tensor(self._float(batch["cand_features"])),
            ],
            axis=-1,
        )
        mask = batch["cand_mask"]
        h = ad.mul(dense(s, "cand.in", raw), self._float(mask)[..., None])
        for i in range(self.cfg.n_candidate_blocks):
            h = transformer_mul_block(s, f"cand.block{i}", h, mask, self.cfg.n_heads)
        return h

    def target_vector(self, batch: dict) -> Tensor:
        return dense(self.store, "target", self._float(batch["target"]))

    def score(self, trip_enc: Tensor, trip_mask: np.ndarray, cand_enc: Tensor, target: Tensor) -> Tensor:
        if cand_enc.shape[0] != trip_enc.shape[0] or target.shape != (trip_enc.shape[0], trip_enc.shape[2]):
            raise ShapeMismatch(f"trip {trip_enc.shape}, candidates {cand_enc.shape}, target {target.shape}")
        attended = multi_head_attention(self.store, "cross", cand_enc, trip_enc, trip_mask, self.cfg.n_heads)
        b, d = target.shape
        return ad.sum_(ad.mul(attended, ad.reshape(target, (b, 1, d))), axis=-1)

    def forward(self, batch: dict) -> Tensor:
        trip = self.encode_trip(batch)
        cands = self.encode_candidates(batch)
        return self.score(trip, batch["trip_mask"], cands, self.target_vector(batch))
