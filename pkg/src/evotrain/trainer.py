"""Training-step orchestration.

One step: draw the number of recycling passes from the step-indexed seed
stream, run the forward passes (only the last one is differentiated),
run backward — optionally recomputing each block's activations from its
stored inputs — then the optimizer tail (gradient sync, global-norm clip,
Adam, EMA) through the fusion engine.

The benchmark protocol runs 105 steps, discards the first 5 and averages
counters and wall time over the remaining 100, with per-step seeds
``base_seed + step`` (base 32 by default).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import runtime
from .autodiff import Tape
from .fusion import FusionEngine, OptimConfig
from .harness import GridConfig, _local_loss, run_grid
from .prng import splitmix64
from .tensor import ContractError, DType


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, why: str):
        super().__init__(f"aborted at step {step}: {why}")
        self.step = step


@dataclass
class ExecutionPlan:
    dp: int = 1
    bp: int = 1
    dap: int = 1
    fuse_ops: bool = True
    fuse_tensors: bool = True
    recompute: tuple = ()  # subset of {"evoformer"}
    act_dtype: str = "f32"  # "f32" | "bf16"
    chunk: int = 0  # 0 = no subbatching of MSA row attention
    seed: int = 32
    steps: int = 10

    def validate(self):
        GridConfig(self.dp, self.bp, self.dap)  # axis invariants
        unknown = set(self.recompute) - {"evoformer"}
        if unknown:
            raise ContractError(f"unknown recompute stacks {sorted(unknown)}")
        if self.act_dtype not in ("f32", "bf16"):
            raise ContractError(f"act_dtype must be f32 or bf16, got {self.act_dtype!r}")
        if self.chunk < 0:
            raise ContractError("chunk must be >= 0")
        if self.recompute_on and self.grid.world > 1:
            raise ContractError("recompute is supported on single-worker plans")

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.dp, self.bp, self.dap)

    @property
    def recompute_on(self) -> bool:
        return "evoformer" in self.recompute

    @property
    def dtype(self):
        return DType.BF16 if self.act_dtype == "bf16" else None

    def policy(self) -> M.ExecPolicy:
        return M.ExecPolicy(fused=self.fuse_ops, row_chunk=self.chunk)


@dataclass
class TrainerState:
    cfg: M.ModelConfig
    plan: ExecutionPlan
    mp: M.ModelParams
    engine: FusionEngine
    step: int = 0
    history: list = field(default_factory=list)


def init_trainer(cfg: M.ModelConfig, plan: ExecutionPlan,
                 optim: OptimConfig = None) -> TrainerState:
    plan.validate()
    cfg.validate()
    mp = M.init_params(cfg, plan.seed)
    engine = FusionEngine(M.flatten_params(mp), optim or OptimConfig(),
                          fused=plan.fuse_tensors)
    return TrainerState(cfg=cfg, plan=plan, mp=mp, engine=engine)


def step_feature_seed(base_seed: int, step: int) -> int:
    """Feature stream derived from the step seed but decorrelated from the
    recycle draw (which consumes the first output of base_seed + step)."""
    return int(splitmix64(base_seed + step, 2)[1] & 0x7FFFFFFF)


# --------------------------------------------------------------------------
# serial forward/backward with per-block recompute


def recompute_grads(cfg: M.ModelConfig, mp: M.ModelParams, feats: M.Features,
                    policy: M.ExecPolicy, n_cycles: int = 1):
    """Store only block inputs during forward; re-run each block's forward
    (freshly taped) during backward. Gradients are bitwise identical to the
    direct full-tape pass."""
    par = M.SerialPar()
    named = M.flatten_params(mp)

    prev = None
    for _ in range(max(0, n_cycles - 1)):
        with runtime.Arena() as a:
            st = M.model_forward(cfg, mp, feats, par, policy, prev)
            if prev is not None:
                prev.msa.release()
                prev.pair.release()
            a.keep(st.msa, st.pair)
            prev = st

    grads_np = {}
    with runtime.Arena() as outer:
        masks = M.make_masks(feats, par)
        outer.keep(masks.msa, masks.msa_t, masks.pair, masks.pair_t)

        t_embed = Tape()
        with t_embed:
            st = M.embed(feats, mp, par, prev)
        states = [st]
        for blk in mp.blocks:
            with runtime.Arena() as a:
                st = M.evoformer_block(st, blk, masks, par, policy, cfg)
                a.keep(st.msa, st.pair)  # the only activations retained
            states.append(st)

        t_loss = Tape()
        with t_loss:
            loss = _local_loss(cfg, states[-1])
        loss_val = float(loss.data.reshape(()))
        seeds = t_loss.run_backward({loss.bid: np.ones_like(loss.data)})
        t_loss.close()
        d_msa = seeds[states[-1].msa.bid]
        d_pair = seeds[states[-1].pair.bid]

        acc: dict = {}
        for j in reversed(range(len(mp.blocks))):
            t_j = Tape()
            with t_j:
                out = M.evoformer_block(states[j], mp.blocks[j], masks, par,
                                        policy, cfg)
            g = t_j.run_backward({out.msa.bid: d_msa, out.pair.bid: d_pair})
            for bid, arr in g.items():
                if bid in acc:
                    acc[bid] = acc[bid] + arr
                else:
                    acc[bid] = arr
            d_msa = g[states[j].msa.bid]
            d_pair = g[states[j].pair.bid]
            t_j.close()

        ge = t_embed.run_backward({states[0].msa.bid: d_msa,
                                   states[0].pair.bid: d_pair})
        for bid, arr in ge.items():
            acc[bid] = acc[bid] + arr if bid in acc else arr
        t_embed.close()

        grads_np = {n: np.array(acc.get(t.bid, np.zeros(t.shape, np.float32)),
                                np.float32)
                    for n, t in named}
        outputs = (states[-1].msa.data.copy(), states[-1].pair.data.copy())
    if prev is not None:
        prev.msa.release()
        prev.pair.release()
    return loss_val, grads_np, outputs


def direct_grads(cfg, mp, feats, policy, n_cycles=1):
    """Single full-tape forward/backward (the recompute-off baseline)."""
    from .harness import _serial_grads
    return _serial_grads(cfg, mp, feats, policy, n_cycles)


# --------------------------------------------------------------------------
# steps


def train_step(ts: TrainerState, step: int):
    cfg, plan = ts.cfg, ts.plan
    cx = runtime.ctx()
    cx.comm_step = step
    cx.act_dtype = plan.dtype
    led = cx.ledger
    n_rec = M.draw_num_recycles(plan.seed, step)
    feats = M.make_features(cfg, step_feature_seed(plan.seed, step))
    policy = plan.policy()

    ops_before = cx.op_counts["total"]
    live_before = led.live_bytes
    led.reset_peak()

    comm_count = 0
    worker_ops = None
    if plan.grid.world == 1:
        if plan.recompute_on:
            loss, grads, _ = recompute_grads(cfg, ts.mp, feats, policy, n_rec)
        else:
            loss, grads, _ = direct_grads(cfg, ts.mp, feats, policy, n_rec)
    else:
        feats_by_dp = [M.make_features(
            cfg, step_feature_seed(plan.seed + 7919 * d, step))
            for d in range(plan.dp)]
        feats_by_dp[0] = feats
        res = run_grid(plan.grid, cfg, ts.mp, feats_by_dp, policy,
                       n_cycles=n_rec, act_dtype=plan.dtype, step=step)
        loss, grads = res.loss, res.grads
        comm_count = len(res.records)
        worker_ops = max(res.per_worker_ops)

    if not np.isfinite(loss):
        raise TrainingAborted(step, f"non-finite loss {loss!r}")

    launches_before = dict(ts.engine.launches.counts)
    grad_norm = ts.engine.apply(grads)
    launches = {k: ts.engine.launches.counts[k] - launches_before.get(k, 0)
                for k in ts.engine.launches.PHASES}

    cx.act_dtype = None
    metrics = {
        "step": step,
        "loss": float(loss),
        "grad_norm": float(grad_norm),
        "n_recycles": n_rec,
        "launches": launches,
        "comm_records": comm_count,
        "ledger_peak_bytes": int(led.peak_bytes - live_before),
        "op_count": int(worker_ops if worker_ops is not None
                        else cx.op_counts["total"] - ops_before),
        "blocks_executed": cx.blocks_executed,
    }
    ts.step = step + 1
    ts.history.append(metrics)
    return loss, metrics


def train_loop(ts: TrainerState, steps: int, metrics_path=None):
    fh = open(metrics_path, "w") if metrics_path else None
    losses = []
    try:
        for s in range(steps):
            loss, metrics = train_step(ts, s)
            losses.append(loss)
            if fh:
                fh.write(json.dumps(metrics, separators=(",", ":")) + "\n")
    finally:
        if fh:
            fh.close()
    return losses


COUNTER_KEYS = ("loss", "grad_norm", "n_recycles", "comm_records",
                "ledger_peak_bytes", "op_count")


def bench_protocol(ts: TrainerState, total: int = 105, discard: int = 5,
                   _spike=None):
    """Run ``total`` steps, discard the first ``discard``, and average the
    remaining ones. ``_spike`` = (step, key, amount) perturbs one step's
    counters; it exists so tests can prove discarded steps don't leak into
    the summary."""
    if total <= discard:
        raise ContractError("total must exceed the discarded prefix")
    per_step = []
    t0 = time.perf_counter()
    times = []
    for s in range(total):
        s0 = time.perf_counter()
        _, metrics = train_step(ts, s)
        times.append(time.perf_counter() - s0)
        metrics = dict(metrics)
        metrics["launch_total"] = sum(metrics["launches"].values())
        if _spike is not None and s == _spike[0]:
            metrics[_spike[1]] = metrics.get(_spike[1], 0) + _spike[2]
        per_step.append(metrics)
    wall = time.perf_counter() - t0
    kept = per_step[discard:]
    kept_times = times[discard:]
    counters = {k: float(np.mean([m[k] for m in kept]))
                for k in COUNTER_KEYS + ("launch_total",)}
    return {
        "total_steps": total,
        "discarded": discard,
        "averaged_steps": len(kept),
        "counters": counters,
        "mean_step_seconds": float(np.mean(kept_times)),
        "steps_per_second": float(1.0 / np.mean(kept_times)),
        "wall_seconds": wall,
        "seed": ts.plan.seed,
    }
