"""Kernel bodies for the fused per-sample encoder passes.

Plain numpy source, written inside the numba-compilable subset so the same
functions serve both execution paths (see ``kernels.py`` for selection and
the calling contracts). Do not import numba here.
"""

from __future__ import annotations

import numpy as np

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def _forward(ids, emb, pos, wq, wk, wv, wo, w1, w2,
             a_q, b_q, a_k, b_k, a_v, b_v, a_o, b_o,
             has_adapters, lscale, n_heads, eps):
    """Forward pass saving everything the backward pass needs."""
    T = ids.shape[0]
    NL = wq.shape[0]
    D = emb.shape[1]
    F = w1.shape[2]
    H = n_heads
    dh = D // H
    inv = 1.0 / np.sqrt(dh)

    xs = np.empty((NL + 1, T, D))
    qs = np.empty((NL, T, D))
    ks = np.empty((NL, T, D))
    vs = np.empty((NL, T, D))
    attn = np.empty((NL, H, T, T))
    cs = np.empty((NL, T, D))
    us = np.empty((NL, T, D))
    rstd1 = np.empty((NL, T))
    p1s = np.empty((NL, T, F))
    gts = np.empty((NL, T, F))
    f1s = np.empty((NL, T, F))
    rstd2 = np.empty((NL, T))

    for t in range(T):
        xs[0, t] = emb[ids[t]] + pos[t]

    for l in range(NL):
        x = np.ascontiguousarray(xs[l])
        q = np.dot(x, wq[l])
        k = np.dot(x, wk[l])
        v = np.dot(x, wv[l])
        if has_adapters == 1:
            q += lscale * np.dot(np.dot(x, b_q[l]), a_q[l])
            k += lscale * np.dot(np.dot(x, b_k[l]), a_k[l])
            v += lscale * np.dot(np.dot(x, b_v[l]), a_v[l])
        qs[l] = q
        ks[l] = k
        vs[l] = v
        c = np.empty((T, D))
        for h in range(H):
            lo = h * dh
            hi = lo + dh
            qh = np.ascontiguousarray(q[:, lo:hi])
            kh = np.ascontiguousarray(k[:, lo:hi])
            vh = np.ascontiguousarray(v[:, lo:hi])
            s = np.dot(qh, kh.T) * inv
            for t in range(T):
                row = s[t]
                e = np.exp(row - row.max())
                s[t] = e / e.sum()
            attn[l, h] = s
            c[:, lo:hi] = np.dot(s, vh)
        cs[l] = c
        o = np.dot(c, wo[l])
        if has_adapters == 1:
            o += lscale * np.dot(np.dot(c, b_o[l]), a_o[l])

        r1 = x + o
        m1 = np.sum(r1, axis=1) / D
        cen1 = r1 - m1.reshape(T, 1)
        var1 = np.sum(cen1 * cen1, axis=1) / D
        rs1 = 1.0 / np.sqrt(var1 + eps)
        u = cen1 * rs1.reshape(T, 1)
        us[l] = u
        rstd1[l] = rs1

        p1 = np.dot(u, w1[l])
        p1s[l] = p1
        tg = np.tanh(_GELU_C0 * (p1 + _GELU_C1 * p1 * p1 * p1))
        gts[l] = tg
        f1 = 0.5 * p1 * (1.0 + tg)
        f1s[l] = f1
        f2 = np.dot(f1, w2[l])

        r2 = u + f2
        m2 = np.sum(r2, axis=1) / D
        cen2 = r2 - m2.reshape(T, 1)
        var2 = np.sum(cen2 * cen2, axis=1) / D
        rs2 = 1.0 / np.sqrt(var2 + eps)
        xs[l + 1] = cen2 * rs2.reshape(T, 1)
        rstd2[l] = rs2

    return xs, qs, ks, vs, attn, cs, us, rstd1, p1s, gts, f1s, rstd2


def _encode(ids, emb, pos, wq, wk, wv, wo, w1, w2,
            a_q, b_q, a_k, b_k, a_v, b_v, a_o, b_o,
            has_adapters, lscale, n_heads, eps):
    """Final encoder layer output [T, d_model]."""
    saved = _forward(ids, emb, pos, wq, wk, wv, wo, w1, w2,
                     a_q, b_q, a_k, b_k, a_v, b_v, a_o, b_o,
                     has_adapters, lscale, n_heads, eps)
    xs = saved[0]
    NL = wq.shape[0]
    return np.ascontiguousarray(xs[NL])


def _head_and_loss(henc, wc, bc, y):
    T = henc.shape[0]
    L = bc.shape[0]
    pool = np.sum(henc, axis=0) / T
    z = np.dot(pool, wc) + bc
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.sum(per) / L
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    dz = (sig - y) / L
    return pool, z, loss, dz


def _ln_bwd(g, y_norm, rstd):
    T, D = g.shape
    gm = np.sum(g, axis=1) / D
    gym = np.sum(g * y_norm, axis=1) / D
    return (g - gm.reshape(T, 1) - y_norm * gym.reshape(T, 1)) * rstd.reshape(T, 1)


def _backward_common(y, saved, emb, wq, wk, wv, wo, w1, w2, wc, bc,
                     n_heads, want_w_grads,
                     a_q, b_q, a_k, b_k, a_v, b_v, a_o, b_o,
                     has_adapters, lscale, mlm_pos, mlm_tgt, mlm_weight):
    """Shared reverse pass.

    The loss is the classification BCE plus ``mlm_weight`` times the mean
    masked-token cross-entropy through the tied completion head (skipped
    when no positions are given). Returns input-embedding grads (dx0),
    backbone weight grads (zeros unless ``want_w_grads``), adapter grads
    (zeros unless adapters present), head grads, and the dense tied-head
    embedding gradient (zeros unless ``want_w_grads``).
    """
    xs, qs, ks, vs, attn, cs, us, rstd1, p1s, gts, f1s, rstd2 = saved
    NL = wq.shape[0]
    T = xs.shape[1]
    D = xs.shape[2]
    F = w1.shape[2]
    H = n_heads
    dh = D // H
    inv = 1.0 / np.sqrt(dh)

    henc = np.ascontiguousarray(xs[NL])
    pool, z, loss, dz = _head_and_loss(henc, wc, bc, y)
    L = bc.shape[0]

    dwc = pool.reshape(D, 1) * dz.reshape(1, L)
    dbc = dz.copy()
    dx = np.zeros((T, D)) + (np.dot(wc, dz) / T).reshape(1, D)

    V = emb.shape[0]
    demb_tied = np.zeros((1, 1))
    if want_w_grads == 1:
        demb_tied = np.zeros((V, D))
    m = mlm_pos.shape[0]
    if m > 0 and mlm_weight != 0.0:
        hm = np.empty((m, D))
        for i in range(m):
            hm[i] = henc[mlm_pos[i]]
        logits_m = np.dot(hm, emb.T)
        dl = np.empty((m, V))
        mlm_loss = 0.0
        for i in range(m):
            row = logits_m[i]
            mx = row.max()
            e = np.exp(row - mx)
            s = e.sum()
            mlm_loss += np.log(s) + mx - row[mlm_tgt[i]]
            dl[i] = e / s
            dl[i, mlm_tgt[i]] -= 1.0
        mlm_loss /= m
        loss = loss + mlm_weight * mlm_loss
        dl *= mlm_weight / m
        dh_m = np.dot(dl, emb)
        for i in range(m):
            dx[mlm_pos[i]] += dh_m[i]
        if want_w_grads == 1:
            demb_tied = np.dot(dl.T, hm)

    dwq = np.zeros_like(wq)
    dwk = np.zeros_like(wk)
    dwv = np.zeros_like(wv)
    dwo = np.zeros_like(wo)
    dw1 = np.zeros_like(w1)
    dw2 = np.zeros_like(w2)
    da_q = np.zeros_like(a_q)
    db_q = np.zeros_like(b_q)
    da_k = np.zeros_like(a_k)
    db_k = np.zeros_like(b_k)
    da_v = np.zeros_like(a_v)
    db_v = np.zeros_like(b_v)
    da_o = np.zeros_like(a_o)
    db_o = np.zeros_like(b_o)

    for l in range(NL - 1, -1, -1):
        x = np.ascontiguousarray(xs[l])
        u = np.ascontiguousarray(us[l])
        f1 = np.ascontiguousarray(f1s[l])
        c = np.ascontiguousarray(cs[l])

        dr2 = _ln_bwd(dx, np.ascontiguousarray(xs[l + 1]), rstd2[l])
        du = dr2.copy()
        dw2_l = np.dot(f1.T, dr2)
        df1 = np.dot(dr2, w2[l].T)
        p1 = p1s[l]
        tg = gts[l]
        dgelu = 0.5 * (1.0 + tg) + 0.5 * p1 * (1.0 - tg * tg) * (
            _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * p1 * p1))
        dp1 = np.ascontiguousarray(df1 * dgelu)
        dw1_l = np.dot(u.T, dp1)
        du += np.dot(dp1, w1[l].T)
        if want_w_grads == 1:
            dw1[l] = dw1_l
            dw2[l] = dw2_l

        dr1 = _ln_bwd(du, u, rstd1[l])
        dxl = dr1.copy()
        do = dr1

        if want_w_grads == 1:
            dwo[l] = np.dot(c.T, do)
        dc = np.dot(do, wo[l].T)
        if has_adapters == 1:
            doa = np.dot(do, a_o[l].T)
            db_o[l] = lscale * np.dot(c.T, doa)
            da_o[l] = lscale * np.dot(np.dot(c, b_o[l]).T, do)
            dc += lscale * np.dot(doa, b_o[l].T)

        dq = np.empty((T, D))
        dk = np.empty((T, D))
        dv = np.empty((T, D))
        for h in range(H):
            lo = h * dh
            hi = lo + dh
            a = np.ascontiguousarray(attn[l, h])
            qh = np.ascontiguousarray(qs[l][:, lo:hi])
            kh = np.ascontiguousarray(ks[l][:, lo:hi])
            vh = np.ascontiguousarray(vs[l][:, lo:hi])
            dch = np.ascontiguousarray(dc[:, lo:hi])
            da = np.dot(dch, vh.T)
            dv[:, lo:hi] = np.dot(a.T, dch)
            dot = np.sum(da * a, axis=1).reshape(T, 1)
            ds = np.ascontiguousarray(a * (da - dot) * inv)
            dq[:, lo:hi] = np.dot(ds, kh)
            dk[:, lo:hi] = np.dot(ds.T, qh)

        dq = np.ascontiguousarray(dq)
        dk = np.ascontiguousarray(dk)
        dv = np.ascontiguousarray(dv)
        if want_w_grads == 1:
            dwq[l] = np.dot(x.T, dq)
            dwk[l] = np.dot(x.T, dk)
            dwv[l] = np.dot(x.T, dv)
        dxl += np.dot(dq, wq[l].T)
        dxl += np.dot(dk, wk[l].T)
        dxl += np.dot(dv, wv[l].T)
        if has_adapters == 1:
            dqa = np.dot(dq, a_q[l].T)
            db_q[l] = lscale * np.dot(x.T, dqa)
            da_q[l] = lscale * np.dot(np.dot(x, b_q[l]).T, dq)
            dxl += lscale * np.dot(dqa, b_q[l].T)

            dka = np.dot(dk, a_k[l].T)
            db_k[l] = lscale * np.dot(x.T, dka)
            da_k[l] = lscale * np.dot(np.dot(x, b_k[l]).T, dk)
            dxl += lscale * np.dot(dka, b_k[l].T)

            dva = np.dot(dv, a_v[l].T)
            db_v[l] = lscale * np.dot(x.T, dva)
            da_v[l] = lscale * np.dot(np.dot(x, b_v[l]).T, dv)
            dxl += lscale * np.dot(dva, b_v[l].T)

        dx = dxl

    return (loss, z, dx, dwq, dwk, dwv, dwo, dw1, dw2, dwc, dbc,
            da_q, db_q, da_k, db_k, da_v, db_v, da_o, db_o, demb_tied)


def _loss_grads_base(ids, y, emb, pos, wq, wk, wv, wo, w1, w2, wc, bc,
                     n_heads, eps, mlm_pos, mlm_tgt, mlm_weight):
    """Loss + grads for the adapter-free model (full fine-tuning).

    Returns (loss, logits, dx0, dwq, dwk, dwv, dwo, dw1, dw2, dwc, dbc,
    demb_tied); dx0 is the gradient on the embedded input rows (caller
    scatter-adds into the embedding-table gradient, then adds the dense
    tied-completion-head term demb_tied).
    """
    r0 = np.zeros((wq.shape[0], 1, wq.shape[1]))
    r0t = np.zeros((wq.shape[0], wq.shape[1], 1))
    saved = _forward(ids, emb, pos, wq, wk, wv, wo, w1, w2,
                     r0, r0t, r0, r0t, r0, r0t, r0, r0t, 0, 0.0, n_heads, eps)
    out = _backward_common(y, saved, emb, wq, wk, wv, wo, w1, w2, wc, bc,
                           n_heads, 1, r0, r0t, r0, r0t, r0, r0t, r0, r0t,
                           0, 0.0, mlm_pos, mlm_tgt, mlm_weight)
    return (out[0], out[1], out[2], out[3], out[4], out[5], out[6], out[7],
            out[8], out[9], out[10], out[19])


def _loss_grads_lora(ids, y, emb, pos, wq, wk, wv, wo, w1, w2, wc, bc,
                     a_q, b_q, a_k, b_k, a_v, b_v, a_o, b_o, lscale,
                     n_heads, eps, mlm_pos, mlm_tgt, mlm_weight):
    """Loss + grads for the frozen-backbone adapted model.

    Returns (loss, logits, da_q, db_q, da_k, db_k, da_v, db_v, da_o, db_o,
    dwc, dbc). Backbone weight grads are skipped (frozen), including the
    tied completion head's embedding gradient.
    """
    saved = _forward(ids, emb, pos, wq, wk, wv, wo, w1, w2,
                     a_q, b_q, a_k, b_k, a_v, b_v, a_o, b_o,
                     1, lscale, n_heads, eps)
    out = _backward_common(y, saved, emb, wq, wk, wv, wo, w1, w2, wc, bc,
                           n_heads, 0, a_q, b_q, a_k, b_k, a_v, b_v, a_o, b_o,
                           1, lscale, mlm_pos, mlm_tgt, mlm_weight)
    return (out[0], out[1], out[11], out[12], out[13], out[14], out[15],
            out[16], out[17], out[18], out[9], out[10])
