"""Memorization probe: completion similarity on training reports.

For each tagged checkpoint, mask the suffix of every probe report, let the
model fill the masked span, embed the original and the completion, and
average the cosine similarities. All checkpoints see the identical probe
set and masks; the embedding encoder is one fixed reference model for the
whole probe run so scores are comparable across checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .corpus import CLS_ID, MASK_ID, PAD_ID, UNK_ID
from .errors import ContractError

SPECIAL_IDS = (PAD_ID, UNK_ID, MASK_ID, CLS_ID)


@dataclass
class ProbeResult:
    tag: str
    report_ids: list[str]
    cosines: np.ndarray
    mean: float
    std: float
    n: int
    skipped: int = 0

    @classmethod
    def from_cosines(cls, tag: str, report_ids: list[str], cos: np.ndarray,
                     skipped: int = 0) -> "ProbeResult":
        return cls(tag=tag, report_ids=report_ids, cosines=cos,
                   mean=float(cos.mean()), std=float(cos.std()),
                   n=len(cos), skipped=skipped)


def mask_suffix(token_ids: np.ndarray, fraction: float,
                mask_id: int = MASK_ID) -> np.ndarray | None:
    """Replace the trailing ceil(f * m) non-special tokens with MASK.

    m counts non-special tokens. Returns None (probe-skip signal) when the
    sequence has fewer than 4 non-special tokens.
    """
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"mask fraction must be in (0,1), got {fraction}")
    ids = np.asarray(token_ids)
    content = np.nonzero(~np.isin(ids, SPECIAL_IDS))[0]
    if content.size < 4:
        return None
    k = math.ceil(fraction * content.size)
    out = ids.copy()
    out[content[-k:]] = mask_id
    return out


def embed_text(params: M.ModelParams, token_ids: np.ndarray,
               packed: M.PackedModel | None = None) -> np.ndarray:
    """Unit-norm mean-pooled final encoder state over non-PAD positions."""
    ids = np.asarray(token_ids)
    row = M.trim_pad(ids.astype(np.int64))
    if row.size == 0:
        raise ContractError("cannot embed an all-PAD sequence")
    return _embed_row(params, row, packed)


def _embed_row(params: M.ModelParams, row: np.ndarray,
               packed: M.PackedModel | None = None) -> np.ndarray:
    henc = M.encode_sequence(params, row, packed)
    pooled = henc.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0:
        raise ContractError("degenerate zero embedding")
    return pooled / norm


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ContractError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def run_probe(models: list[tuple[str, M.ModelParams]], probe_rows: np.ndarray,
              report_ids: list[str], fraction: float = 0.3, seed: int = 0,
              embedder: M.ModelParams | None = None) -> list[ProbeResult]:
    """Mask -> complete -> embed -> cosine, per checkpoint.

    ``embedder`` defaults to the model tagged ``off-the-shelf`` if present,
    else the first model. ``seed`` is recorded for provenance; the mask
    pattern itself is a deterministic function of (probe set, fraction).
    """
    del seed  # masks are deterministic; kept for interface stability
    if not models:
        raise ContractError("run_probe needs at least one tagged model")
    if embedder is None:
        embedder = next((p for tag, p in models if tag == "off-the-shelf"),
                        models[0][1])
    packed_embedder = M.PackedModel(embedder)

    masked_rows: list[np.ndarray | None] = []
    originals: list[np.ndarray] = []
    kept_ids: list[str] = []
    skipped = 0
    for i in range(probe_rows.shape[0]):
        row = M.trim_pad(np.asarray(probe_rows[i], dtype=np.int64))
        masked = mask_suffix(row, fraction) if row.size else None
        if masked is None:
            skipped += 1
            continue
        masked_rows.append(masked)
        originals.append(row)
        kept_ids.append(report_ids[i])
    if not masked_rows:
        raise ContractError("every probe sequence was too short to mask")

    original_embs = [embed_text(embedder, row, packed_embedder) for row in originals]

    results = []
    for tag, params in models:
        packed = M.PackedModel(params)
        cos = np.empty(len(masked_rows))
        for i, masked in enumerate(masked_rows):
            completed = M.forward_complete(params, masked, MASK_ID, packed)
            # embed completions at full length: a fill token is model output
            # even when it is PAD, so it must not be trimmed away
            comp_emb = _embed_row(embedder, completed, packed_embedder)
            cos[i] = cosine(original_embs[i], comp_emb)
        results.append(ProbeResult.from_cosines(tag, kept_ids, cos, skipped))
    return results
