"""Gated self-attention with pair bias.

Two executions of the same math:

* ``gated_attention_reference`` composes fine-grained tensor ops; every
  intermediate is a separately ledgered buffer and the tape retains
  whatever each op saves (the baseline that materializes three full-size
  logits buffers).
* ``gated_attention_fused`` runs as one coarse op: a single merged QKV
  projection, a logits buffer written once and accumulated in place, and
  exactly five tensors retained for backward (merged QKV output, softmax
  output, attention context, gating projection, final output).

``subbatch_apply`` serializes a batch-like dimension to cap intermediate
activation peaks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import runtime
from . import tensor as T
from .tensor import DimensionError, DType, Tensor


def _act(arr) -> Tensor:
    """Materialize an activation under the current dtype policy."""
    dt = DType.BF16 if runtime.ctx().act_dtype is DType.BF16 else DType.F32
    return T.tensor(arr, dt)


@dataclass
class AttentionParams:
    wq: Tensor  # [C, H, c]
    wk: Tensor
    wv: Tensor
    wg: Tensor
    bg: Tensor  # [H, c]
    wo: Tensor  # [H, c, C]
    bo: Tensor  # [C]

    @property
    def heads(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[2]

    def all(self):
        return [self.wq, self.wk, self.wv, self.wg, self.bg, self.wo, self.bo]


@dataclass
class AttentionInput:
    x: Tensor  # [B, S, R, C]
    mask: Tensor  # [B, S, R] in {0, 1}
    nonbatched_bias: Tensor = None  # [H, R, R]


def _check_shapes(inp: AttentionInput, p: AttentionParams):
    b, s, r, cdim = inp.x.shape
    if p.wq.shape[0] != cdim:
        raise DimensionError(f"x channels {cdim} vs wq {p.wq.shape}")
    if inp.mask.shape != (b, s, r):
        raise DimensionError(f"mask shape {inp.mask.shape} vs x {inp.x.shape}")
    if inp.nonbatched_bias is not None:
        h = p.heads
        if inp.nonbatched_bias.shape != (h, r, r):
            raise DimensionError(
                f"nonbatched_bias shape {inp.nonbatched_bias.shape}, want {(h, r, r)}"
            )


def gated_attention_reference(inp: AttentionInput, p: AttentionParams) -> Tensor:
    """Fine-grained baseline: q/k/v/gate projections, three materialized
    logits-shaped buffers, softmax, context, gate, output projection."""
    _check_shapes(inp, p)
    b, s, r, cdim = inp.x.shape
    h, c = p.heads, p.head_dim
    hc = h * c
    x = inp.x

    def proj(w):
        w2 = T.reshape(w, (cdim, hc))
        y = T.matmul(x, w2)  # [B,S,R,Hc]
        y = T.reshape(y, (b, s, r, h, c))
        return T.transpose(y, (0, 1, 3, 2, 4))  # [B,S,H,R,c]

    q = T.scale(proj(p.wq), 1.0 / np.sqrt(c))
    k = proj(p.wk)
    v = proj(p.wv)
    kt = T.transpose(k, (0, 1, 2, 4, 3))  # [B,S,H,c,R]

    with runtime.ctx().ledger.scope("attn/logits"):
        logits = T.matmul(q, kt)  # [B,S,H,R,R]  (buffer 1)
        maskbias = T.scale(T.add(T.reshape(inp.mask, (b, s, 1, 1, r)), -1.0), 1e9)
        logits = T.add(logits, maskbias)  # buffer 2
        if inp.nonbatched_bias is not None:
            nb = T.reshape(inp.nonbatched_bias, (1, 1, h, r, r))
            logits = T.add(logits, nb)  # buffer 3
    with runtime.ctx().ledger.scope("attn/softmax"):
        w = T.softmax_lastdim(logits)

    ctx5 = T.matmul(w, v)  # [B,S,H,R,c]
    ctxf = T.reshape(T.transpose(ctx5, (0, 1, 3, 2, 4)), (b, s, r, hc))

    gp = T.add(T.matmul(x, T.reshape(p.wg, (cdim, hc))), T.reshape(p.bg, (hc,)))
    gate = T.sigmoid(gp)
    gated = T.mul(ctxf, gate)
    out = T.add(T.matmul(gated, T.reshape(p.wo, (hc, cdim))), p.bo)
    return out


def gated_attention_fused(inp: AttentionInput, p: AttentionParams) -> Tensor:
    """Coarse-grained execution: merged QKV GEMM, in-place logits
    accumulation, five retained intermediates."""
    _check_shapes(inp, p)
    b, s, r, cdim = inp.x.shape
    h, c = p.heads, p.head_dim
    hc = h * c
    inv_sqrt_c = np.float32(1.0 / np.sqrt(c))
    cx = runtime.ctx()
    cx.count_op("fused_attention")

    x = inp.x
    nb = inp.nonbatched_bias

    # (1) single merged QKV projection with a pre-concatenated weight
    wqkv = _act(
        np.concatenate(
            [p.wq.data.reshape(cdim, hc),
             p.wk.data.reshape(cdim, hc),
             p.wv.data.reshape(cdim, hc)],
            axis=1,
        )
    )
    qkv = _act(np.matmul(x.data, wqkv.data))  # [B,S,R,3Hc]  retained (1/5)

    def heads_view(flat):  # [B,S,R,Hc] -> [B,S,H,R,c]
        return flat.reshape(b, s, r, h, c).transpose(0, 1, 3, 2, 4)

    q5 = heads_view(qkv.data[..., :hc])
    k5 = heads_view(qkv.data[..., hc:2 * hc])
    v5 = heads_view(qkv.data[..., 2 * hc:])

    # (2) logits buffer written once, then biases accumulated in place
    maskbias = (inp.mask.data - 1.0) * np.float32(1e9)  # [B,S,R]
    with cx.ledger.scope("attn/logits"):
        logits = _act(np.matmul(q5, k5.swapaxes(-1, -2)) * inv_sqrt_c)
    logits.data += maskbias[:, :, None, None, :]
    if nb is not None:
        logits.data += nb.data[None, None, :, :, :]

    with cx.ledger.scope("attn/softmax"):
        m = logits.data.max(axis=-1, keepdims=True)
        e = np.exp(logits.data - m)
        w = _act(e / e.sum(axis=-1, keepdims=True))  # retained (2/5)
    logits.release()  # only q·k^T memory was held; freed before return

    ctx5 = np.matmul(w.data, v5)  # [B,S,H,R,c]
    ctxf = _act(ctx5.transpose(0, 1, 3, 2, 4).reshape(b, s, r, hc))  # retained (3/5)

    gate = _act(
        1.0 / (1.0 + np.exp(-(np.matmul(x.data, p.wg.data.reshape(cdim, hc))
                              + p.bg.data.reshape(hc))))
    )  # gating projection, retained (4/5)

    gated = ctxf.data * gate.data
    out = _act(np.matmul(gated, p.wo.data.reshape(hc, cdim)) + p.bo.data)  # (5/5)
    wqkv.release()

    wq, wk, wv, wg, bg, wo, bo = p.all()

    def bwd(gouts):
        g = gouts[0].astype(np.float32)
        wo_flat = wo.data.reshape(hc, cdim)
        gated_ = ctxf.data * gate.data
        dwo = np.matmul(gated_.reshape(-1, hc).T, g.reshape(-1, cdim))
        dbo = g.reshape(-1, cdim).sum(axis=0)
        dgated = np.matmul(g, wo_flat.T)
        dctxf = dgated * gate.data
        dgate = dgated * ctxf.data
        dgp = dgate * gate.data * (1.0 - gate.data)
        dwg = np.matmul(x.data.reshape(-1, cdim).T, dgp.reshape(-1, hc))
        dbg = dgp.reshape(-1, hc).sum(axis=0)
        dx = np.matmul(dgp, wg.data.reshape(cdim, hc).T)

        dctx5 = dctxf.reshape(b, s, r, h, c).transpose(0, 1, 3, 2, 4)
        dw = np.matmul(dctx5, v5.swapaxes(-1, -2))
        dv5 = np.matmul(w.data.swapaxes(-1, -2), dctx5)
        dlogits = w.data * (dw - (dw * w.data).sum(axis=-1, keepdims=True))
        dq5 = np.matmul(dlogits, k5) * inv_sqrt_c
        dk5 = np.matmul(dlogits.swapaxes(-1, -2), q5) * inv_sqrt_c

        def flat(d5):  # [B,S,H,R,c] -> [B,S,R,Hc]
            return d5.transpose(0, 1, 3, 2, 4).reshape(b, s, r, hc)

        dqkv = np.concatenate([flat(dq5), flat(dk5), flat(dv5)], axis=-1)
        wqkv_arr = np.concatenate(
            [wq.data.reshape(cdim, hc), wk.data.reshape(cdim, hc),
             wv.data.reshape(cdim, hc)], axis=1)
        dx = dx + np.matmul(dqkv, wqkv_arr.T)
        dwqkv = np.matmul(x.data.reshape(-1, cdim).T, dqkv.reshape(-1, 3 * hc))

        grads = [
            (x.bid, dx),
            (wq.bid, dwqkv[:, :hc].reshape(cdim, h, c)),
            (wk.bid, dwqkv[:, hc:2 * hc].reshape(cdim, h, c)),
            (wv.bid, dwqkv[:, 2 * hc:].reshape(cdim, h, c)),
            (wg.bid, dwg.reshape(cdim, h, c)),
            (bg.bid, dbg.reshape(h, c)),
            (wo.bid, dwo.reshape(h, c, cdim)),
            (bo.bid, dbo),
        ]
        if nb is not None:
            grads.append((nb.bid, dlogits.sum(axis=(0, 1))))
        return grads

    inputs = [x, inp.mask] + ([nb] if nb is not None else []) + p.all()
    tape = cx.tape
    if tape is not None:
        tape.add("gated_attention_fused", inputs, [out], [qkv, w, ctxf, gate, out], bwd)
    else:
        # nothing needs retaining without a tape
        qkv.release()
        w.release()
        ctxf.release()
        gate.release()
    return out


def subbatch_apply(f, x: Tensor, dim: int, chunk: int, companions=()) -> Tensor:
    """Apply ``f`` over sequential chunks of ``x`` along a batch-like ``dim``.

    ``companions`` are sliced along the same dim and passed to ``f`` after
    the chunk. The concatenation over chunks equals ``f(x, *companions)``
    bitwise; peak intermediate bytes inside ``f`` scale with
    ``chunk / extent(dim)``.
    """
    if chunk < 1:
        raise T.ContractError("chunk must be >= 1")
    extent = x.shape[dim]
    if chunk >= extent and not companions:
        bounds = []
    else:
        bounds = list(range(chunk, extent, chunk))
    xs = T.split(x, bounds, dim) if bounds else [x]
    comp_chunks = [T.split(cpn, bounds, dim) if bounds else [cpn] for cpn in companions]

    outs = []
    taped = runtime.ctx().tape is not None
    for i, xc in enumerate(xs):
        extras = [cc[i] for cc in comp_chunks]
        if taped:
            outs.append(f(xc, *extras))
        else:
            with runtime.Arena() as a:
                y = f(xc, *extras)
                a.keep(y)
            outs.append(y)
    if len(outs) == 1:
        return outs[0]
    return T.concat(outs, dim)
