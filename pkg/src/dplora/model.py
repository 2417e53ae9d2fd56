"""Mini transformer encoder with a multi-label head, a tied masked-completion
head, and low-rank adapter injection on a frozen backbone.

The encoder runs per sample on pad-trimmed sequences (so no attention
masking is needed anywhere). Heavy paths go through ``kernels``; a tape-based
traced twin of the same math lives here for gradient checking and as the
fallback for configurations the fused kernels do not cover.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from . import tensor as tz
from .errors import ConfigurationError, ContractError, DataError, DimensionError
from .tensor import Tensor

INIT_STD = 0.02

ATTN_KINDS = ("wq", "wk", "wv", "wo")
FFN_KINDS = ("w1", "w2")
LAYER_KINDS = ATTN_KINDS + FFN_KINDS


@dataclass
class ModelConfig:
    vocab_size: int = 2048
    max_seq_len: int = 128
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    n_labels: int = 14
    dropout_rate: float = 0.0
    head_trainable: bool = True
    layer_norm_eps: float = 1e-5

    def validate(self) -> None:
        for name in ("vocab_size", "max_seq_len", "d_model", "n_heads",
                     "n_layers", "d_ff", "n_labels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class LoraAdapter:
    """Low-rank factors attached to one frozen 2-D weight.

    Effective weight is ``base + scale * (b @ a)``; with ``b`` all zero the
    wrapped weight is reproduced exactly. Only ``a`` and ``b`` train.
    """

    target: str
    base: Tensor
    a: Tensor  # [r, d_out]
    b: Tensor  # [d_in, r]
    rank: int
    scale: float

    def param_count(self) -> int:
        return self.a.data.size + self.b.data.size


@dataclass
class ModelParams:
    config: ModelConfig
    emb: Tensor
    layers: list[dict[str, Tensor]]
    head_w: Tensor
    head_b: Tensor
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    init_seed: int = 0

    def weight_ids(self) -> list[str]:
        ids = ["emb"]
        for i in range(len(self.layers)):
            ids.extend(f"layer{i}.{k}" for k in LAYER_KINDS)
        ids.extend(["head.w", "head.b"])
        return ids

    def get_weight(self, wid: str) -> Tensor:
        if wid == "emb":
            return self.emb
        if wid == "head.w":
            return self.head_w
        if wid == "head.b":
            return self.head_b
        if wid.startswith("layer"):
            lid, _, kind = wid.partition(".")
            idx = int(lid[5:])
            if 0 <= idx < len(self.layers) and kind in LAYER_KINDS:
                return self.layers[idx][kind]
        raise ConfigurationError(f"unknown weight id {wid!r}")

    def backbone_entries(self) -> list[tuple[str, Tensor]]:
        out = [("emb", self.emb)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{k}", layer[k]) for k in LAYER_KINDS)
        return out

    def trainable_entries(self) -> list[tuple[str, Tensor]]:
        """Canonical (name, tensor) list; its order fixes gradient flattening."""
        out: list[tuple[str, Tensor]] = []
        if self.adapters:
            for target in sorted(self.adapters):
                ad = self.adapters[target]
                out.append((f"{target}.lora_a", ad.a))
                out.append((f"{target}.lora_b", ad.b))
            if self.config.head_trainable:
                out.append(("head.w", self.head_w))
                out.append(("head.b", self.head_b))
        else:
            out.extend(self.backbone_entries())
            out.append(("head.w", self.head_w))
            out.append(("head.b", self.head_b))
        return out

    def trainable_param_count(self) -> int:
        return sum(t.data.size for _, t in self.trainable_entries())

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.backbone_entries():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def positional_table(max_seq_len: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal positions (no trainable positional parameters).

    Scaled down to the token-embedding init scale so position does not
    drown out token identity in the residual stream.
    """
    pos = np.arange(max_seq_len, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / d_model)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return np.ascontiguousarray(INIT_STD * table)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh backbone + head, all weights N(0, 0.02^2), head bias zero."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x1817))))
    d, f = config.d_model, config.d_ff

    def w(shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    emb = w((config.vocab_size, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append({
            "wq": w((d, d)), "wk": w((d, d)), "wv": w((d, d)), "wo": w((d, d)),
            "w1": w((d, f)), "w2": w((f, d)),
        })
    head_w = w((d, config.n_labels))
    head_b = Tensor(np.zeros(config.n_labels), requires_grad=True)
    return ModelParams(config=config, emb=emb, layers=layers,
                       head_w=head_w, head_b=head_b, init_seed=seed)


def default_lora_targets(config: ModelConfig, include_ffn: bool = False) -> list[str]:
    kinds = ATTN_KINDS + (FFN_KINDS if include_ffn else ())
    return [f"layer{i}.{k}" for i in range(config.n_layers) for k in kinds]


def attach_lora(params: ModelParams, targets, rank: int, scale: float = 1.0,
                seed: int = 0) -> ModelParams:
    """Attach zero-init adapters and freeze the backbone.

    ``a`` is N(0, 0.02^2), ``b`` starts at zero, so the adapted forward is
    identical to the unadapted one until training moves ``b``.
    """
    if rank < 1:
        raise ConfigurationError(f"rank must be >= 1, got {rank}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x10AA))))
    for target in sorted(set(targets)):
        base = params.get_weight(target)
        if base.data.ndim != 2:
            raise ConfigurationError(f"lora target {target!r} is not a 2-D weight")
        d_in, d_out = base.data.shape
        if rank > min(d_in, d_out):
            raise ConfigurationError(
                f"rank {rank} exceeds min dim of {target!r} ({min(d_in, d_out)})")
        a = Tensor(rng.normal(0.0, INIT_STD, size=(rank, d_out)), requires_grad=True)
        b = Tensor(np.zeros((d_in, rank)), requires_grad=True)
        params.adapters[target] = LoraAdapter(target=target, base=base, a=a, b=b,
                                              rank=rank, scale=float(scale))
    for _, t in params.backbone_entries():
        t.requires_grad = False
    params.head_w.requires_grad = params.config.head_trainable
    params.head_b.requires_grad = params.config.head_trainable
    return params


def detach_lora(params: ModelParams) -> ModelParams:
    """Drop all adapters and unfreeze the backbone (off-the-shelf view)."""
    params.adapters.clear()
    for _, t in params.backbone_entries():
        t.requires_grad = True
    return params


def merge_adapter(adapter: LoraAdapter) -> np.ndarray:
    """Dense ``base + scale * (b @ a)``."""
    return adapter.base.data + adapter.scale * (adapter.b.data @ adapter.a.data)


def adapter_param_count(params: ModelParams) -> int:
    return sum(ad.param_count() for ad in params.adapters.values())


# ---------------------------------------------------------------------------
# fused-kernel forward paths


def _kernel_eligible(params: ModelParams) -> bool:
    """Fused kernels cover no adapters, or uniform rank on all attention
    projections of all layers (the default placement)."""
    if params.config.dropout_rate > 0.0:
        return False
    if not params.adapters:
        return True
    want = set(default_lora_targets(params.config))
    if set(params.adapters) != want:
        return False
    ranks = {ad.rank for ad in params.adapters.values()}
    scales = {ad.scale for ad in params.adapters.values()}
    return len(ranks) == 1 and len(scales) == 1


class PackedModel:
    """Stacked contiguous views of the weights in kernel calling order.

    Rebuild after any parameter mutation (stacking copies).
    """

    def __init__(self, params: ModelParams):
        if not _kernel_eligible(params):
            raise ConfigurationError("model layout not supported by fused kernels")
        cfg = params.config
        self.config = cfg
        self.emb = np.ascontiguousarray(params.emb.data)
        self.pos = positional_table(cfg.max_seq_len, cfg.d_model)
        stacks = {k: np.stack([layer[k].data for layer in params.layers])
                  for k in LAYER_KINDS}
        self.wq, self.wk, self.wv, self.wo = (stacks[k] for k in ATTN_KINDS)
        self.w1, self.w2 = (stacks[k] for k in FFN_KINDS)
        self.wc = np.ascontiguousarray(params.head_w.data)
        self.bc = np.ascontiguousarray(params.head_b.data)
        self.has_adapters = 1 if params.adapters else 0
        if params.adapters:
            first = next(iter(params.adapters.values()))
            self.scale = float(first.scale)
            self.rank = first.rank
            by_kind = {}
            for kind in ATTN_KINDS:
                ads = [params.adapters[f"layer{i}.{kind}"] for i in range(cfg.n_layers)]
                by_kind[kind] = (np.stack([ad.a.data for ad in ads]),
                                 np.stack([ad.b.data for ad in ads]))
            self.a_q, self.b_q = by_kind["wq"]
            self.a_k, self.b_k = by_kind["wk"]
            self.a_v, self.b_v = by_kind["wv"]
            self.a_o, self.b_o = by_kind["wo"]
        else:
            self.scale = 0.0
            self.rank = 0
            nl, d = cfg.n_layers, cfg.d_model
            dummy_a = np.zeros((nl, 1, d))
            dummy_b = np.zeros((nl, d, 1))
            self.a_q = self.a_k = self.a_v = self.a_o = dummy_a
            self.b_q = self.b_k = self.b_v = self.b_o = dummy_b

    def encode_args(self, ids: np.ndarray) -> tuple:
        return (ids, self.emb, self.pos, self.wq, self.wk, self.wv, self.wo,
                self.w1, self.w2, self.a_q, self.b_q, self.a_k, self.b_k,
                self.a_v, self.b_v, self.a_o, self.b_o, self.has_adapters,
                self.scale, self.config.n_heads, self.config.layer_norm_eps)


def _validate_token_matrix(config: ModelConfig, token_ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise ContractError(
            f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    bad = np.argwhere((ids < 0) | (ids >= config.vocab_size))
    if bad.size:
        r, c = bad[0]
        raise DataError(
            f"token id {ids[r, c]} out of range at position (row {r}, col {c})")
    return ids.astype(np.int64)


def trim_pad(row: np.ndarray, pad_id: int = 0) -> np.ndarray:
    """Drop trailing PAD so the encoder sees the true length."""
    nz = np.nonzero(row != pad_id)[0]
    if nz.size == 0:
        return row[:0]
    return np.ascontiguousarray(row[: nz[-1] + 1])


def encode_sequence(params: ModelParams, ids_row: np.ndarray,
                    packed: PackedModel | None = None) -> np.ndarray:
    """Final encoder layer output [T, d_model] for one trimmed sequence."""
    if packed is None:
        packed = PackedModel(params)
    ids_row = np.ascontiguousarray(np.asarray(ids_row, dtype=np.int64))
    if ids_row.size == 0:
        raise ContractError("cannot encode an empty sequence")
    return kernels.encode(*packed.encode_args(ids_row))


def forward_classify(params: ModelParams, token_ids,
                     packed: PackedModel | None = None) -> np.ndarray:
    """Logits [B, n_labels] from mean-pooled encoder output."""
    cfg = params.config
    ids = _validate_token_matrix(cfg, token_ids)
    if packed is None:
        packed = PackedModel(params)
    out = np.empty((ids.shape[0], cfg.n_labels))
    for i in range(ids.shape[0]):
        row = trim_pad(ids[i])
        if row.size == 0:
            raise ContractError(f"row {i} is all padding")
        henc = kernels.encode(*packed.encode_args(row))
        pool = henc.mean(axis=0)
        out[i] = pool @ packed.wc + packed.bc
    return out


def bce_multilabel_loss(logits, targets) -> Tensor:
    """Mean stabilized binary cross-entropy over every logit (see tensor)."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    return tz.bce_with_logits(logits, np.asarray(targets))


def forward_complete(params: ModelParams, token_ids, mask_id: int,
                     packed: PackedModel | None = None) -> np.ndarray:
    """Fill every MASK position with the argmax token of the tied head.

    Single parallel pass; argmax ties resolve to the lowest token id.
    """
    ids = np.asarray(token_ids)
    if ids.ndim != 1:
        raise DimensionError(f"forward_complete expects one sequence, got {ids.shape}")
    _validate_token_matrix(params.config, ids)
    mask_pos = np.nonzero(ids == mask_id)[0]
    if mask_pos.size == 0:
        raise ContractError("no masked positions to fill")
    if packed is None:
        packed = PackedModel(params)
    row = np.ascontiguousarray(ids.astype(np.int64))
    henc = kernels.encode(*packed.encode_args(row))
    logits = henc[mask_pos] @ packed.emb.T  # tied completion head
    filled = ids.copy()
    filled[mask_pos] = np.argmax(logits, axis=1)
    return filled


# ---------------------------------------------------------------------------
# traced (tape) twin used for gradient checking and non-kernel configs


def _traced_linear(x: Tensor, params: ModelParams, wid: str) -> Tensor:
    w = params.get_weight(wid)
    y = tz.matmul(x, w)
    ad = params.adapters.get(wid)
    if ad is not None:
        y = tz.add(y, tz.scale(tz.matmul(tz.matmul(x, ad.b), ad.a), ad.scale))
    return y


def traced_encode(params: ModelParams, ids_row: np.ndarray,
                  dropout_rng: np.random.Generator | None = None) -> Tensor:
    cfg = params.config
    ids = np.asarray(ids_row, dtype=np.int64)
    if ids.size == 0:
        raise ContractError("cannot encode an empty sequence")
    T = ids.shape[0]
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    pos = positional_table(cfg.max_seq_len, d)
    x = tz.add(tz.embedding(params.emb, ids), Tensor(pos[:T]))
    rate = cfg.dropout_rate
    for i in range(cfg.n_layers):
        q = _traced_linear(x, params, f"layer{i}.wq")
        k = _traced_linear(x, params, f"layer{i}.wk")
        v = _traced_linear(x, params, f"layer{i}.wv")
        # [T, d] -> [H, T, dh]
        qh = tz.swapaxes(tz.reshape(q, (T, H, dh)), 0, 1)
        kh = tz.swapaxes(tz.reshape(k, (T, H, dh)), 0, 1)
        vh = tz.swapaxes(tz.reshape(v, (T, H, dh)), 0, 1)
        scores = tz.scale(tz.batched_matmul(qh, tz.swapaxes(kh, 1, 2)),
                          1.0 / np.sqrt(dh))
        probs = tz.softmax_last(scores)
        ctx = tz.batched_matmul(probs, vh)
        c = tz.reshape(tz.swapaxes(ctx, 0, 1), (T, d))
        o = _traced_linear(c, params, f"layer{i}.wo")
        if rate > 0.0 and dropout_rng is not None:
            o = tz.dropout(o, rate, dropout_rng)
        u = tz.layer_norm_last(tz.add(x, o), cfg.layer_norm_eps)
        f1 = tz.gelu(_traced_linear(u, params, f"layer{i}.w1"))
        if rate > 0.0 and dropout_rng is not None:
            f1 = tz.dropout(f1, rate, dropout_rng)
        f2 = _traced_linear(f1, params, f"layer{i}.w2")
        x = tz.layer_norm_last(tz.add(u, f2), cfg.layer_norm_eps)
    return x


def traced_sample_logits(params: ModelParams, ids_row: np.ndarray,
                         dropout_rng=None) -> Tensor:
    henc = traced_encode(params, ids_row, dropout_rng)
    pool = tz.reshape(tz.mean_axis(henc, 0), (1, params.config.d_model))
    return tz.add(tz.matmul(pool, params.head_w), params.head_b)


def _traced_mlm_term(params: ModelParams, henc: Tensor, mlm_pos: np.ndarray,
                     mlm_targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of the tied completion head at masked positions."""
    T = henc.data.shape[0]
    m = len(mlm_pos)
    select = np.zeros((m, T))
    select[np.arange(m), mlm_pos] = 1.0
    hm = tz.matmul(Tensor(select), henc)
    logits = tz.matmul(hm, tz.transpose(params.emb))
    shift = logits.data.max(axis=1, keepdims=True)  # constant, cancels in lse
    e = tz.exp(tz.sub(logits, Tensor(shift)))
    lse = tz.add(tz.log(tz.sum_axis(e, 1)), Tensor(shift[:, 0]))
    onehot = np.zeros((m, params.config.vocab_size))
    onehot[np.arange(m), mlm_targets] = 1.0
    target_logit = tz.sum_axis(tz.mul(logits, Tensor(onehot)), 1)
    return tz.mean_all(tz.sub(lse, target_logit))


def traced_sample_loss(params: ModelParams, ids_row: np.ndarray,
                       target_row: np.ndarray, dropout_rng=None,
                       mlm_pos: np.ndarray | None = None,
                       mlm_targets: np.ndarray | None = None,
                       mlm_weight: float = 0.0) -> Tensor:
    henc = traced_encode(params, ids_row, dropout_rng)
    pool = tz.reshape(tz.mean_axis(henc, 0), (1, params.config.d_model))
    logits = tz.add(tz.matmul(pool, params.head_w), params.head_b)
    loss = tz.bce_with_logits(logits, np.asarray(target_row).reshape(1, -1))
    if mlm_weight != 0.0 and mlm_pos is not None and len(mlm_pos) > 0:
        mlm = _traced_mlm_term(params, henc, np.asarray(mlm_pos),
                               np.asarray(mlm_targets))
        loss = tz.add(loss, tz.scale(mlm, mlm_weight))
    return loss
