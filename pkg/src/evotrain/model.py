"""Two-track (MSA + pair) attention model.

The trunk is a stack of identical blocks. Each block runs, in order:

1. MSA row attention, biased by a projection of the pair representation
2. MSA column attention (over the sequence dimension)
3. MSA transition (two-layer MLP)
4. Outer-product mean of the *block-input* MSA, added into the pair track
5. Triangle attention over pair rows ("starting" orientation)
6. Triangle attention over pair columns (via a transpose)
7. Pair transition

Every function takes a ``par`` adapter so the same code runs serially
(``SerialPar``: all collectives are identity) or sharded across workers
(the harness supplies an adapter whose collectives are differentiable
tape ops).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import runtime
from . import tensor as T
from .attention import (
    AttentionInput,
    AttentionParams,
    gated_attention_fused,
    gated_attention_reference,
    subbatch_apply,
)
from .prng import Prng, splitmix64
from .tensor import Tensor


# --------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    n_blocks: int = 2
    n_seq: int = 8
    n_res: int = 8
    c_m: int = 8
    c_z: int = 8
    heads: int = 2
    opm_dim: int = 4
    transition_factor: int = 4
    feat_dim: int = 8
    pad_fraction: float = 0.1

    @property
    def head_dim_m(self) -> int:
        return self.c_m // self.heads

    @property
    def head_dim_z(self) -> int:
        return self.c_z // self.heads

    def validate(self):
        if self.c_m % self.heads or self.c_z % self.heads:
            raise T.ContractError("channel dims must be divisible by heads")


@dataclass
class ExecPolicy:
    """How attention inside the model is executed."""

    fused: bool = True
    row_chunk: int = 0  # 0 disables subbatching of MSA row attention


# --------------------------------------------------------------------------
# parameters


@dataclass
class AttnModuleParams:
    ln_g: Tensor
    ln_b: Tensor
    attn: AttentionParams
    bias_ln_g: Tensor = None  # present when a pair-derived bias is used
    bias_ln_b: Tensor = None
    w_bias: Tensor = None  # [C_z, H]


@dataclass
class TransitionParams:
    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class OpmParams:
    ln_g: Tensor
    ln_b: Tensor
    w_left: Tensor  # [C_m, k]
    b_left: Tensor
    w_right: Tensor
    b_right: Tensor
    w_out: Tensor  # [k*k, C_z]
    b_out: Tensor


@dataclass
class BlockParams:
    row_attn: AttnModuleParams
    col_attn: AttnModuleParams
    msa_trans: TransitionParams
    opm: OpmParams
    tri_start: AttnModuleParams
    tri_end: AttnModuleParams
    pair_trans: TransitionParams


@dataclass
class ModelParams:
    msa_embed_w: Tensor
    msa_embed_b: Tensor
    pair_embed_w: Tensor
    pair_embed_b: Tensor
    recycle_m_g: Tensor
    recycle_m_b: Tensor
    recycle_z_g: Tensor
    recycle_z_b: Tensor
    blocks: list = field(default_factory=list)


MSA_BRANCH_MODULES = ("row_attn", "col_attn", "msa_trans", "opm")
PAIR_BRANCH_MODULES = ("tri_start", "tri_end", "pair_trans")


def _attn_params(rng: Prng, c: int, heads: int, scale: float) -> AttentionParams:
    hd = c // heads
    u = lambda *s: T.parameter(rng.uniform(s) * scale)
    return AttentionParams(
        wq=u(c, heads, hd), wk=u(c, heads, hd), wv=u(c, heads, hd),
        wg=u(c, heads, hd), bg=T.parameter(np.zeros((heads, hd), np.float32)),
        wo=u(heads, hd, c), bo=T.parameter(np.zeros((c,), np.float32)),
    )


def _attn_module(rng, c, heads, scale, bias_from=None) -> AttnModuleParams:
    ones = lambda n: T.parameter(np.ones((n,), np.float32))
    zeros = lambda n: T.parameter(np.zeros((n,), np.float32))
    p = AttnModuleParams(ln_g=ones(c), ln_b=zeros(c), attn=_attn_params(rng, c, heads, scale))
    if bias_from is not None:
        p.bias_ln_g = ones(bias_from)
        p.bias_ln_b = zeros(bias_from)
        p.w_bias = T.parameter(rng.uniform((bias_from, heads)) * scale)
    return p


def _transition(rng, c, factor, scale) -> TransitionParams:
    return TransitionParams(
        ln_g=T.parameter(np.ones((c,), np.float32)),
        ln_b=T.parameter(np.zeros((c,), np.float32)),
        w1=T.parameter(rng.uniform((c, factor * c)) * scale),
        b1=T.parameter(np.zeros((factor * c,), np.float32)),
        w2=T.parameter(rng.uniform((factor * c, c)) * scale),
        b2=T.parameter(np.zeros((c,), np.float32)),
    )


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    cfg.validate()
    rng = Prng(seed)
    scale = 0.1
    u = lambda *s: T.parameter(rng.uniform(s) * scale)
    ones = lambda n: T.parameter(np.ones((n,), np.float32))
    zeros = lambda n: T.parameter(np.zeros((n,), np.float32))
    mp = ModelParams(
        msa_embed_w=u(cfg.feat_dim, cfg.c_m), msa_embed_b=zeros(cfg.c_m),
        pair_embed_w=u(cfg.feat_dim, cfg.c_z), pair_embed_b=zeros(cfg.c_z),
        recycle_m_g=ones(cfg.c_m), recycle_m_b=zeros(cfg.c_m),
        recycle_z_g=ones(cfg.c_z), recycle_z_b=zeros(cfg.c_z),
    )
    for _ in range(cfg.n_blocks):
        mp.blocks.append(BlockParams(
            row_attn=_attn_module(rng, cfg.c_m, cfg.heads, scale, bias_from=cfg.c_z),
            col_attn=_attn_module(rng, cfg.c_m, cfg.heads, scale),
            msa_trans=_transition(rng, cfg.c_m, cfg.transition_factor, scale),
            opm=OpmParams(
                ln_g=ones(cfg.c_m), ln_b=zeros(cfg.c_m),
                w_left=u(cfg.c_m, cfg.opm_dim), b_left=zeros(cfg.opm_dim),
                w_right=u(cfg.c_m, cfg.opm_dim), b_right=zeros(cfg.opm_dim),
                w_out=u(cfg.opm_dim * cfg.opm_dim, cfg.c_z), b_out=zeros(cfg.c_z),
            ),
            tri_start=_attn_module(rng, cfg.c_z, cfg.heads, scale, bias_from=cfg.c_z),
            tri_end=_attn_module(rng, cfg.c_z, cfg.heads, scale, bias_from=cfg.c_z),
            pair_trans=_transition(rng, cfg.c_z, cfg.transition_factor, scale),
        ))
    return mp


def flatten_params(mp: ModelParams) -> list:
    """Deterministic (name, tensor) order used by the fusion engine."""
    out = [
        ("msa_embed.w", mp.msa_embed_w), ("msa_embed.b", mp.msa_embed_b),
        ("pair_embed.w", mp.pair_embed_w), ("pair_embed.b", mp.pair_embed_b),
        ("recycle_m.g", mp.recycle_m_g), ("recycle_m.b", mp.recycle_m_b),
        ("recycle_z.g", mp.recycle_z_g), ("recycle_z.b", mp.recycle_z_b),
    ]
    for i, blk in enumerate(mp.blocks):
        for mod in MSA_BRANCH_MODULES + PAIR_BRANCH_MODULES:
            sub = getattr(blk, mod)
            for fname, t in vars(sub).items():
                if isinstance(t, AttentionParams):
                    for aname, at in vars(t).items():
                        out.append((f"block{i}.{mod}.attn.{aname}", at))
                elif isinstance(t, Tensor):
                    out.append((f"block{i}.{mod}.{fname}", t))
    return out


def branch_param_names(mp: ModelParams, branch: str) -> set:
    """Names owned by the 'msa' or 'pair' branch (used by branch-parallel runs)."""
    embeds = {
        "msa": ("msa_embed.", "recycle_m."),
        "pair": ("pair_embed.", "recycle_z."),
    }[branch]
    mods = MSA_BRANCH_MODULES if branch == "msa" else PAIR_BRANCH_MODULES
    names = set()
    for name, _ in flatten_params(mp):
        if name.startswith(embeds):
            names.add(name)
        elif name.startswith("block") and name.split(".")[1] in mods:
            names.add(name)
    return names


# --------------------------------------------------------------------------
# parallelism adapter


class SerialPar:
    """Identity adapter: no sharding, every collective is a no-op."""

    size = 1
    index = 0

    def slice_np(self, arr: np.ndarray, axis: int) -> np.ndarray:
        return arr

    def allgather(self, x: Tensor, axis: int, module: str) -> Tensor:
        return x

    def reducescatter_sum(self, x: Tensor, axis: int, module: str) -> Tensor:
        return x

    def alltoall(self, x: Tensor, split_axis: int, concat_axis: int, module: str) -> Tensor:
        return x


# --------------------------------------------------------------------------
# features and synthetic data


@dataclass
class Features:
    msa_feat: np.ndarray  # [1, S, R, F]
    pair_feat: np.ndarray  # [1, R, R, F]
    msa_mask: np.ndarray  # [1, S, R]
    pair_mask: np.ndarray  # [1, R, R]


def make_features(cfg: ModelConfig, seed: int) -> Features:
    rng = Prng(seed)
    s, r, f = cfg.n_seq, cfg.n_res, cfg.feat_dim
    n_valid = r - int(np.floor(cfg.pad_fraction * r))
    msa_mask = np.ones((1, s, r), np.float32)
    msa_mask[:, :, n_valid:] = 0.0
    pair_mask = np.ones((1, r, r), np.float32)
    pair_mask[:, n_valid:, :] = 0.0
    pair_mask[:, :, n_valid:] = 0.0
    return Features(
        msa_feat=rng.uniform((1, s, r, f)).astype(np.float32),
        pair_feat=rng.uniform((1, r, r, f)).astype(np.float32),
        msa_mask=msa_mask,
        pair_mask=pair_mask,
    )


def draw_num_recycles(base_seed: int, step: int) -> int:
    """1..4 feed-forward passes per step, from the normative mixer stream."""
    return 1 + int(splitmix64(base_seed + step, 1)[0] % 4)


# --------------------------------------------------------------------------
# block submodules


def _run_attention(inp: AttentionInput, p: AttentionParams, policy: ExecPolicy,
                   chunk: int = 0) -> Tensor:
    f = gated_attention_fused if policy.fused else gated_attention_reference
    if chunk:
        nb = inp.nonbatched_bias
        return subbatch_apply(
            lambda xc, mc: f(AttentionInput(xc, mc, nb), p),
            inp.x, 1, chunk, companions=(inp.mask,),
        )
    return f(inp, p)


def _pair_bias(pair: Tensor, mod: AttnModuleParams, par, axis: int, module: str) -> Tensor:
    """[H, R, R] attention bias from the pair track; gathered when sharded."""
    z = T.layer_norm(pair, mod.bias_ln_g, mod.bias_ln_b)
    nb = T.matmul(z, mod.w_bias)  # [1, r_local, R, H]
    nb = T.transpose(T.reshape(nb, nb.shape[1:]), (2, 0, 1))  # [H, r_local, R]
    return par.allgather(nb, axis=1, module=module)


def msa_row_attention(msa: Tensor, pair: Tensor, msa_mask: Tensor,
                      blk: BlockParams, par, policy: ExecPolicy) -> Tensor:
    mod = blk.row_attn
    x = T.layer_norm(msa, mod.ln_g, mod.ln_b)
    nb = _pair_bias(pair, mod, par, axis=1, module="msa_row_attn")
    with runtime.comm_labels(module="msa_row_attn"):
        y = _run_attention(AttentionInput(x, msa_mask, nb), mod.attn, policy,
                           chunk=policy.row_chunk)
    return T.add(msa, y)


def msa_col_attention(msa: Tensor, msa_mask_t: Tensor, blk: BlockParams,
                      par, policy: ExecPolicy) -> Tensor:
    mod = blk.col_attn
    with runtime.comm_labels(module="msa_col_attn"):
        xt = par.alltoall(msa, split_axis=2, concat_axis=1, module="msa_col_attn")
        xt = T.transpose(xt, (0, 2, 1, 3))  # [1, r_local, S, C_m]
        x = T.layer_norm(xt, mod.ln_g, mod.ln_b)
        y = _run_attention(AttentionInput(x, msa_mask_t, None), mod.attn, policy)
        y = T.transpose(y, (0, 2, 1, 3))
        y = par.alltoall(y, split_axis=1, concat_axis=2, module="msa_col_attn")
    return T.add(msa, y)


def transition(x: Tensor, tp: TransitionParams) -> Tensor:
    h = T.layer_norm(x, tp.ln_g, tp.ln_b)
    h = T.relu(T.add(T.matmul(h, tp.w1), tp.b1))
    h = T.add(T.matmul(h, tp.w2), tp.b2)
    return T.add(x, h)


def outer_product_mean(msa_in: Tensor, msa_mask: Tensor, op: OpmParams,
                       par, cfg: ModelConfig) -> Tensor:
    """Pair-track update from the block-input MSA.

    The masked sums over sequences are partial per worker; numerator and
    normalizer ride a single packed reduce-scatter.
    """
    b, s, r, _ = msa_in.shape
    k = cfg.opm_dim
    x = T.layer_norm(msa_in, op.ln_g, op.ln_b)
    mask4 = T.reshape(msa_mask, (b, s, r, 1))
    a = T.mul(T.add(T.matmul(x, op.w_left), op.b_left), mask4)  # [1,S,r,k]
    c = T.mul(T.add(T.matmul(x, op.w_right), op.b_right), mask4)

    af = T.transpose(T.reshape(a, (b, s, r * k)), (0, 2, 1))  # [1, r*k, S]
    cf = T.reshape(c, (b, s, r * k))
    num = T.matmul(af, cf)  # [1, r*k, r*k]
    num = T.reshape(T.transpose(T.reshape(num, (b, r, k, r, k)), (0, 1, 3, 2, 4)),
                    (b, r, r, k * k))
    mt = T.transpose(msa_mask, (0, 2, 1))  # [1, r, S]
    norm = T.reshape(T.matmul(mt, msa_mask), (b, r, r, 1))

    packed = T.concat([num, norm], 3)
    with runtime.comm_labels(module="opm"):
        packed = par.reducescatter_sum(packed, axis=1, module="opm")
    num, norm = T.split(packed, [k * k], 3)
    out = T.mul(num, T.recip(T.add(norm, 1e-3)))
    return T.add(T.matmul(out, op.w_out), op.b_out)  # [1, r_local, r, C_z]


def triangle_attention(pair: Tensor, pair_mask: Tensor, mod: AttnModuleParams,
                       par, policy: ExecPolicy, ending: bool) -> Tensor:
    """Row-wise pair attention; the ending orientation transposes the two
    residue dimensions around the same computation."""
    module = "tri_end" if ending else "tri_start"
    with runtime.comm_labels(module=module):
        if ending:
            z = par.alltoall(pair, split_axis=2, concat_axis=1, module=module)
            z = T.transpose(z, (0, 2, 1, 3))
        else:
            z = pair
        x = T.layer_norm(z, mod.ln_g, mod.ln_b)
        nb = _pair_bias(z, mod, par, axis=1, module=module)
        y = _run_attention(AttentionInput(x, pair_mask, nb), mod.attn, policy)
        if ending:
            y = T.transpose(y, (0, 2, 1, 3))
            y = par.alltoall(y, split_axis=1, concat_axis=2, module=module)
    return T.add(pair, y)


# --------------------------------------------------------------------------
# block / trunk


@dataclass
class TrackState:
    msa: Tensor  # [1, s_local, R, C_m]
    pair: Tensor  # [1, r_local, R, C_z]


@dataclass
class Masks:
    """Local mask tensors; sliced from full copies, never communicated."""

    msa: Tensor  # rows local in S
    msa_t: Tensor  # rows local in R, columns S
    pair: Tensor  # rows local in R
    pair_t: Tensor


def make_masks(feats: Features, par) -> Masks:
    mm, pm = feats.msa_mask, feats.pair_mask
    return Masks(
        msa=T.tensor(par.slice_np(mm, 1)),
        msa_t=T.tensor(par.slice_np(np.ascontiguousarray(mm.transpose(0, 2, 1)), 1)),
        pair=T.tensor(par.slice_np(pm, 1)),
        pair_t=T.tensor(par.slice_np(np.ascontiguousarray(pm.transpose(0, 2, 1)), 1)),
    )


def evoformer_block(state: TrackState, blk: BlockParams, masks: Masks,
                    par, policy: ExecPolicy, cfg: ModelConfig) -> TrackState:
    cx = runtime.ctx()
    cx.blocks_executed += 1
    msa_in = state.msa
    msa = msa_row_attention(msa_in, state.pair, masks.msa, blk, par, policy)
    msa = msa_col_attention(msa, masks.msa_t, blk, par, policy)
    msa = transition(msa, blk.msa_trans)

    opm = outer_product_mean(msa_in, masks.msa, blk.opm, par, cfg)
    pair = T.add(state.pair, opm)
    pair = triangle_attention(pair, masks.pair, blk.tri_start, par, policy, ending=False)
    pair = triangle_attention(pair, masks.pair_t, blk.tri_end, par, policy, ending=True)
    pair = transition(pair, blk.pair_trans)
    return TrackState(msa, pair)


def embed(feats: Features, mp: ModelParams, par,
          prev: TrackState = None) -> TrackState:
    msa_f = T.tensor(par.slice_np(feats.msa_feat, 1))
    pair_f = T.tensor(par.slice_np(feats.pair_feat, 1))
    msa = T.add(T.matmul(msa_f, mp.msa_embed_w), mp.msa_embed_b)
    pair = T.add(T.matmul(pair_f, mp.pair_embed_w), mp.pair_embed_b)
    if prev is not None:
        # recycled outputs feed back through layer norms; the recycled
        # values themselves carry no gradient (plain-array re-entry)
        if par.index == 0:
            row0, rest = T.split(msa, [1], 1)
            fb = T.layer_norm(T.tensor(prev.msa.data[:, :1].copy()),
                              mp.recycle_m_g, mp.recycle_m_b)
            msa = T.concat([T.add(row0, fb), rest], 1)
        pair = T.add(pair, T.layer_norm(T.tensor(prev.pair.data.copy()),
                                        mp.recycle_z_g, mp.recycle_z_b))
    return TrackState(msa, pair)


def model_forward(cfg: ModelConfig, mp: ModelParams, feats: Features, par,
                  policy: ExecPolicy, prev: TrackState = None) -> TrackState:
    masks = make_masks(feats, par)
    state = embed(feats, mp, par, prev)
    for blk in mp.blocks:
        state = evoformer_block(state, blk, masks, par, policy, cfg)
    return state


def model_loss(state: TrackState) -> Tensor:
    return T.add(T.mean_all(T.mul(state.msa, state.msa)),
                 T.mean_all(T.mul(state.pair, state.pair)))
