"""Backend parity: numba kernels vs the pure-numpy twins vs the tape."""

import numpy as np
import pytest

from dplora import kernels as K
from dplora import model as M
from dplora import tensor as tz


def build(rng, adapters: bool, n_layers=2, n_heads=2, d_model=12, rank=3):
    cfg = M.ModelConfig(vocab_size=40, max_seq_len=24, d_model=d_model,
                        n_heads=n_heads, n_layers=n_layers, d_ff=18, n_labels=6)
    p = M.init_params(cfg, seed=int(rng.integers(0, 1000)))
    if adapters:
        M.attach_lora(p, M.default_lora_targets(cfg), rank=rank, scale=0.7,
                      seed=int(rng.integers(0, 1000)))
        for ad in p.adapters.values():
            ad.b.data[:] = rng.normal(0, 0.05, ad.b.data.shape)
    packed = M.PackedModel(p)
    ids = rng.integers(4, cfg.vocab_size, size=int(rng.integers(3, 20))).astype(np.int64)
    y = (rng.random(cfg.n_labels) < 0.4).astype(np.float64)
    return cfg, p, packed, ids, y


NO_MLM = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 0.0)


def lora_args(cfg, packed, ids, y, mlm=NO_MLM):
    return (ids, y, packed.emb, packed.pos, packed.wq, packed.wk, packed.wv,
            packed.wo, packed.w1, packed.w2, packed.wc, packed.bc,
            packed.a_q, packed.b_q, packed.a_k, packed.b_k, packed.a_v,
            packed.b_v, packed.a_o, packed.b_o, packed.scale,
            cfg.n_heads, cfg.layer_norm_eps) + mlm


def base_args(cfg, packed, ids, y, mlm=NO_MLM):
    return (ids, y, packed.emb, packed.pos, packed.wq, packed.wk, packed.wv,
            packed.wo, packed.w1, packed.w2, packed.wc, packed.bc,
            cfg.n_heads, cfg.layer_norm_eps) + mlm


def tape_grads(p, ids, y):
    loss = M.traced_sample_loss(p, ids, y)
    for _, t in p.trainable_entries():
        t.zero_grad()
    gmap = tz.backward(loss)
    return float(loss.data), {name: gmap[t.tid] for name, t in p.trainable_entries()}


@pytest.mark.skipif(not K.NUMBA_ENABLED, reason="numba backend disabled")
class TestNumbaVsNumpy:
    def test_encode_parity(self, rng):
        for adapters in (False, True):
            cfg, p, packed, ids, y = build(rng, adapters)
            a = K.encode_nb(*packed.encode_args(ids))
            b = K.encode_py(*packed.encode_args(ids))
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_lora_grads_parity(self, rng):
        cfg, p, packed, ids, y = build(rng, adapters=True)
        a = K.loss_grads_lora_nb(*lora_args(cfg, packed, ids, y))
        b = K.loss_grads_lora_py(*lora_args(cfg, packed, ids, y))
        for ga, gb in zip(a, b):
            np.testing.assert_allclose(ga, gb, rtol=0, atol=1e-12)

    def test_base_grads_parity(self, rng):
        cfg, p, packed, ids, y = build(rng, adapters=False)
        a = K.loss_grads_base_nb(*base_args(cfg, packed, ids, y))
        b = K.loss_grads_base_py(*base_args(cfg, packed, ids, y))
        for ga, gb in zip(a, b):
            np.testing.assert_allclose(ga, gb, rtol=0, atol=1e-12)


class TestKernelsVsTape:
    @pytest.mark.parametrize("heads,layers", [(1, 1), (2, 2), (3, 3)])
    def test_lora_grads_match_tape(self, rng, heads, layers):
        d = 12 if heads != 3 else 9
        cfg, p, packed, ids, y = build(rng, adapters=True, n_layers=layers,
                                       n_heads=heads, d_model=d,
                                       rank=2 if heads == 3 else 3)
        out = K.loss_grads_lora(*lora_args(cfg, packed, ids, y))
        loss_t, named_t = tape_grads(p, ids, y)
        assert abs(out[0] - loss_t) < 1e-12

        from dplora.training import ParamView, _lora_named_grads
        named_k = _lora_named_grads(p, out)
        view = ParamView(p)
        flat_k = view.flatten_named(named_k)
        flat_t = view.flatten_named(named_t)
        scale = max(np.abs(flat_t).max(), 1e-12)
        assert np.max(np.abs(flat_k - flat_t)) / scale < 1e-10

    def test_base_grads_match_tape(self, rng):
        cfg, p, packed, ids, y = build(rng, adapters=False)
        out = K.loss_grads_base(*base_args(cfg, packed, ids, y))
        loss_t, named_t = tape_grads(p, ids, y)
        assert abs(out[0] - loss_t) < 1e-12

        from dplora.training import ParamView, _base_named_grads
        named_k = _base_named_grads(p, ids, out)
        view = ParamView(p)
        flat_k = view.flatten_named(named_k)
        flat_t = view.flatten_named(named_t)
        scale = max(np.abs(flat_t).max(), 1e-12)
        assert np.max(np.abs(flat_k - flat_t)) / scale < 1e-10

    def test_logits_match_tape(self, rng):
        cfg, p, packed, ids, y = build(rng, adapters=True)
        out = K.loss_grads_lora(*lora_args(cfg, packed, ids, y))
        logits_t = M.traced_sample_logits(p, ids).data.ravel()
        np.testing.assert_allclose(out[1], logits_t, atol=1e-12)

    def test_selected_backend_deterministic(self, rng):
        cfg, p, packed, ids, y = build(rng, adapters=True)
        a = K.loss_grads_lora(*lora_args(cfg, packed, ids, y))
        b = K.loss_grads_lora(*lora_args(cfg, packed, ids, y))
        for ga, gb in zip(a, b):
            assert np.array_equal(np.asarray(ga), np.asarray(gb))

    @pytest.mark.parametrize("adapters", [True, False])
    def test_masked_completion_term_matches_tape(self, rng, adapters):
        cfg, p, packed, ids, y = build(rng, adapters=adapters)
        ids = rng.integers(4, cfg.vocab_size, size=14).astype(np.int64)
        mlm = (np.array([2, 5, 9], dtype=np.int64),
               rng.integers(4, cfg.vocab_size, size=3).astype(np.int64), 0.8)
        if adapters:
            out = K.loss_grads_lora(*lora_args(cfg, packed, ids, y, mlm))
            from dplora.training import _lora_named_grads as namer
            named_k = namer(p, out)
        else:
            out = K.loss_grads_base(*base_args(cfg, packed, ids, y, mlm))
            from dplora.training import _base_named_grads
            named_k = _base_named_grads(p, ids, out)
        loss_t = M.traced_sample_loss(p, ids, y, mlm_pos=mlm[0],
                                      mlm_targets=mlm[1], mlm_weight=mlm[2])
        for _, t in p.trainable_entries():
            t.zero_grad()
        gmap = tz.backward(loss_t)
        named_t = {n: gmap.get(t.tid, np.zeros_like(t.data))
                   for n, t in p.trainable_entries()}
        assert abs(out[0] - float(loss_t.data)) < 1e-12
        from dplora.training import ParamView
        view = ParamView(p)
        fk, ft = view.flatten_named(named_k), view.flatten_named(named_t)
        assert np.max(np.abs(fk - ft)) / max(np.abs(ft).max(), 1e-12) < 1e-10

    def test_no_nan_inf_with_large_adapters(self, rng):
        # noised-out adapters must still produce finite passes
        cfg, p, packed, ids, y = build(rng, adapters=True)
        for ad in p.adapters.values():
            ad.a.data[:] = rng.normal(0, 20, ad.a.data.shape)
            ad.b.data[:] = rng.normal(0, 20, ad.b.data.shape)
        packed = M.PackedModel(p)
        out = K.loss_grads_lora(*lora_args(cfg, packed, ids, y))
        for g in out:
            assert np.all(np.isfinite(np.asarray(g)))
