"""Self-describing binary checkpoint container.

Layout: one magic line, one JSON header line (config, array manifest,
adapter metadata, seed lineage, content hash), then the raw array bytes
concatenated in manifest order. Writing the same model twice yields
byte-identical files (no timestamps, sorted keys), and loads are bit-exact.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import DataError
from .model import (LoraAdapter, ModelConfig, ModelParams, LAYER_KINDS)
from .tensor import Tensor

MAGIC = b"DPLORA-CKPT-1\n"


def _array_entries(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = [("emb", params.emb.data)]
    for i, layer in enumerate(params.layers):
        out.extend((f"layer{i}.{k}", layer[k].data) for k in LAYER_KINDS)
    out.append(("head.w", params.head_w.data))
    out.append(("head.b", params.head_b.data))
    for target in sorted(params.adapters):
        ad = params.adapters[target]
        out.append((f"{target}.lora_a", ad.a.data))
        out.append((f"{target}.lora_b", ad.b.data))
    return out


def content_hash(params: ModelParams) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(params.config.to_dict(), sort_keys=True).encode())
    for name, arr in _array_entries(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, params: ModelParams, tag: str = "",
                    meta: dict | None = None) -> str:
    """Write params + metadata; returns the content hash."""
    entries = _array_entries(params)
    manifest = []
    offset = 0
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        nbytes = arr.nbytes
        manifest.append({"name": name, "dtype": str(arr.dtype),
                         "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    chash = content_hash(params)
    header = {
        "config": params.config.to_dict(),
        "arrays": manifest,
        "adapters": {
            target: {"rank": ad.rank, "scale": ad.scale}
            for target, ad in sorted(params.adapters.items())
        },
        "init_seed": params.init_seed,
        "tag": tag,
        "content_hash": chash,
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr).tobytes())
    return chash


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Reconstruct params; returns (params, header)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path} is not a checkpoint file")
        header = json.loads(fh.readline().decode())
        blob = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for ent in header["arrays"]:
        dt = np.dtype(ent["dtype"])
        size = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"]
        arr = np.frombuffer(blob, dtype=dt, count=size, offset=start)
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()

    config = ModelConfig.from_dict(header["config"])
    adapters_meta = header.get("adapters", {})
    frozen = bool(adapters_meta)

    emb = Tensor(arrays["emb"], requires_grad=not frozen)
    layers = []
    for i in range(config.n_layers):
        layers.append({k: Tensor(arrays[f"layer{i}.{k}"], requires_grad=not frozen)
                       for k in LAYER_KINDS})
    head_w = Tensor(arrays["head.w"], requires_grad=config.head_trainable or not frozen)
    head_b = Tensor(arrays["head.b"], requires_grad=config.head_trainable or not frozen)
    params = ModelParams(config=config, emb=emb, layers=layers,
                         head_w=head_w, head_b=head_b,
                         init_seed=header.get("init_seed", 0))
    for target, ad_meta in sorted(adapters_meta.items()):
        params.adapters[target] = LoraAdapter(
            target=target,
            base=params.get_weight(target),
            a=Tensor(arrays[f"{target}.lora_a"], requires_grad=True),
            b=Tensor(arrays[f"{target}.lora_b"], requires_grad=True),
            rank=int(ad_meta["rank"]),
            scale=float(ad_meta["scale"]),
        )
    stored = header.get("content_hash")
    if stored and stored != content_hash(params):
        raise DataError(f"checkpoint {path} content hash mismatch")
    return params, header
