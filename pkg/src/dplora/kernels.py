"""Backend selection for the fused per-sample encoder kernels.

The hot inner loop of training is one fused forward+backward pass per sample
(implemented in ``_kernel_impl.py``). The same source runs two ways:

* numba ``@njit`` (default whenever numba imports), or
* plain vectorized numpy, selected with ``DPLORA_NUMBA=0`` in the env.

Both variants stay importable here (``*_py`` / ``*_nb``) so tests can check
parity and ``benchmarks/bench_kernels.py`` can compare them; the unsuffixed
names are the selected backend. The tape autodiff in ``tensor.py`` is the
correctness reference for both.

Calling contracts (all arrays float64, C-contiguous; ``ids`` int64, trimmed
of padding):

``encode(ids, emb, pos, wq, wk, wv, wo, w1, w2, a_q, b_q, a_k, b_k, a_v,
b_v, a_o, b_o, has_adapters, lscale, n_heads, eps)`` -> ``[T, d_model]``
final encoder output. Layer weights are stacked ``[n_layers, ...]``; the
eight adapter arrays are rank-``r`` factors per attention projection (pass
shape-compatible dummies with ``has_adapters=0`` when detached).

``loss_grads_base(...)`` -> ``(loss, logits, dx0, dwq, dwk, dwv, dwo, dw1,
dw2, dwc, dbc)`` for the adapter-free model; ``dx0`` is the gradient on the
embedded input rows (scatter-add into the embedding grad by token id).

``loss_grads_lora(...)`` -> ``(loss, logits, da_q, db_q, da_k, db_k, da_v,
db_v, da_o, db_o, dwc, dbc)`` for the frozen-backbone adapted model.
"""

from __future__ import annotations

import importlib.util
import os

from . import _kernel_impl as _py

NUMBA_ENABLED = False

encode_py = _py._encode
loss_grads_base_py = _py._loss_grads_base
loss_grads_lora_py = _py._loss_grads_lora

encode_nb = None
loss_grads_base_nb = None
loss_grads_lora_nb = None

_JITTED = ("_forward", "_head_and_loss", "_ln_bwd", "_backward_common",
           "_encode", "_loss_grads_base", "_loss_grads_lora")


def _load_jitted_copy():
    """Fresh copy of the impl module with every kernel numba-compiled.

    A second module instance keeps the plain-numpy functions untouched while
    the copy's globals are rebound to jitted versions (numba resolves the
    cross-calls at first compile).
    """
    import numba

    spec = importlib.util.find_spec("dplora._kernel_impl")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    jit = numba.njit(cache=True, fastmath=False)
    for name in _JITTED:
        setattr(mod, name, jit(getattr(mod, name)))
    return mod


if os.environ.get("DPLORA_NUMBA", "1") != "0":
    try:
        _nb = _load_jitted_copy()
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _nb = None
    if _nb is not None:
        encode_nb = _nb._encode
        loss_grads_base_nb = _nb._loss_grads_base
        loss_grads_lora_nb = _nb._loss_grads_lora
        NUMBA_ENABLED = True

if NUMBA_ENABLED:
    encode = encode_nb
    loss_grads_base = loss_grads_base_nb
    loss_grads_lora = loss_grads_lora_nb
else:
    encode = encode_py
    loss_grads_base = loss_grads_base_py
    loss_grads_lora = loss_grads_lora_py
