"""Multi-worker execution harness.

Workers are threads, each with its own Context (ledger, tape, counters).
They exchange data only through a ``CollectiveBus``: a rendezvous table
keyed by (group_axis, group_id, sequence number). Every member of a group
must arrive at the same sequence number with the same operation descriptor,
or the bus raises a protocol error; a member that never arrives trips a
deadlock timeout for the others.

Three axes compose a process grid:

* ``dp``  — data parallel: replicas see different samples, gradients are
  averaged.
* ``bp``  — branch parallel (size 2): the MSA stack + outer-product mean
  run on rank 0 of the pair, the pair stack on rank 1, with hand-scheduled
  broadcasts forward and one all-reduce per block backward.
* ``dap`` — dimension-sharded: activations are split along a batch-like
  dimension; collectives are recorded as differentiable tape ops, so the
  backward schedule (all-gather <-> reduce-scatter duals, all-to-all its
  own inverse) falls out of the tape.

``dp`` composes with either inner axis; ``bp`` and ``dap`` do not compose
with each other.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import runtime
from . import tensor as T
from .autodiff import Tape
from .tensor import ContractError, DType, Tensor


class ProtocolError(RuntimeError):
    """Group members disagreed about the collective being performed."""


class DeadlockError(RuntimeError):
    """A group member failed to arrive at a rendezvous in time."""


# --------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class GridConfig:
    dp: int = 1
    bp: int = 1
    dap: int = 1

    def __post_init__(self):
        if self.dp < 1 or self.bp < 1 or self.dap < 1:
            raise ContractError("grid axes must be >= 1")
        if self.bp not in (1, 2):
            raise ContractError("branch parallelism supports size 1 or 2")
        if self.bp > 1 and self.dap > 1:
            raise ContractError("bp and dap axes do not compose")

    @property
    def world(self) -> int:
        return self.dp * self.bp * self.dap

    def coords(self, rank: int):
        inner = self.bp * self.dap
        return rank // inner, (rank % inner) // self.dap, rank % self.dap

    def rank(self, dpi: int, bpi: int, dapi: int) -> int:
        return dpi * self.bp * self.dap + bpi * self.dap + dapi


@dataclass
class CommRecord:
    step: int
    phase: str
    group_axis: str
    group_id: int
    seq: int
    primitive: str
    bytes: int
    module: str


CSV_COLUMNS = ["step", "phase", "group_axis", "group_id", "seq",
               "primitive", "bytes", "module"]


def dump_comm_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.step, r.phase, r.group_axis, r.group_id, r.seq,
                        r.primitive, r.bytes, r.module])


# --------------------------------------------------------------------------
# rendezvous bus


class CollectiveBus:
    def __init__(self, timeout: float = 30.0):
        self._cond = threading.Condition()
        self._slots: dict = {}
        self.timeout = timeout

    def rendezvous(self, key, rank: int, size: int, payload, desc):
        """Block until all ``size`` members arrive at ``key``; return the
        payload list indexed by in-group rank."""
        with self._cond:
            slot = self._slots.get(key)
            if slot is None:
                slot = self._slots[key] = {"desc": desc, "pay": {}, "left": 0,
                                           "error": None}
            elif slot["error"] is None and slot["desc"] != desc:
                slot["error"] = ProtocolError(
                    f"collective mismatch at {key}: {slot['desc']} vs {desc}")
                self._cond.notify_all()
            slot["pay"][rank] = payload
            self._cond.notify_all()
            ok = self._cond.wait_for(
                lambda: slot["error"] is not None or len(slot["pay"]) == size,
                timeout=self.timeout)
            if slot["error"] is not None:
                err = slot["error"]
                self._finish(key, slot, size)
                raise err
            if not ok:
                slot["error"] = DeadlockError(
                    f"rendezvous timeout at {key} ({len(slot['pay'])}/{size} arrived)")
                self._cond.notify_all()
                raise slot["error"]
            result = [slot["pay"][r] for r in range(size)]
            self._finish(key, slot, size)
            return result

    def _finish(self, key, slot, size):
        slot["left"] += 1
        if slot["left"] == size:
            self._slots.pop(key, None)


# --------------------------------------------------------------------------
# per-axis communicator


class Comm:
    """One worker's endpoint on one grid axis."""

    def __init__(self, bus: CollectiveBus, axis: str, group_id: int,
                 rank: int, size: int):
        self.bus = bus
        self.axis = axis
        self.group_id = group_id
        self.rank = rank
        self.size = size
        self._seq = 0

    def _round(self, arr: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.float32)
        if runtime.ctx().act_dtype is DType.BF16:
            return T.bf16_round(arr)
        return arr

    def _bytes(self, arr: np.ndarray) -> int:
        el = 2 if runtime.ctx().act_dtype is DType.BF16 else 4
        return arr.size * el

    def _exchange(self, primitive: str, payload, desc_extra, module: str):
        cx = runtime.ctx()
        seq = self._seq
        self._seq += 1
        key = (self.axis, self.group_id, seq)
        desc = (primitive, module, desc_extra)
        pays = self.bus.rendezvous(key, self.rank, self.size, payload, desc)
        return seq, pays

    def _record(self, seq: int, primitive: str, nbytes: int, module: str):
        cx = runtime.ctx()
        cx.comm_records.append(CommRecord(
            step=getattr(cx, "comm_step", 0), phase=cx.comm_phase,
            group_axis=self.axis, group_id=self.group_id, seq=seq,
            primitive=primitive, bytes=nbytes, module=module))

    # -- primitives ---------------------------------------------------------

    def broadcast(self, arr, root: int, module: str) -> np.ndarray:
        payload = self._round(arr) if self.rank == root else None
        seq, pays = self._exchange("broadcast", payload, ("root", root), module)
        out = pays[root]
        self._record(seq, "broadcast", self._bytes(out), module)
        return out.copy()

    def allreduce_sum(self, arr, module: str) -> np.ndarray:
        payload = self._round(arr)
        seq, pays = self._exchange("allreduce", payload, payload.shape, module)
        out = pays[0].astype(np.float32, copy=True)
        for p in pays[1:]:
            out = out + p
        self._record(seq, "allreduce", self._bytes(payload), module)
        return out

    def allgather(self, arr, axis: int, module: str) -> np.ndarray:
        payload = self._round(arr)
        seq, pays = self._exchange("allgather", payload,
                                   ("axis", axis, payload.shape), module)
        self._record(seq, "allgather", self._bytes(payload), module)
        return np.concatenate(pays, axis=axis)

    def reducescatter_sum(self, arr, axis: int, module: str) -> np.ndarray:
        payload = self._round(arr)
        if payload.shape[axis] % self.size:
            raise ContractError(
                f"reduce-scatter axis {axis} extent {payload.shape[axis]} "
                f"not divisible by group size {self.size}")
        seq, pays = self._exchange("reducescatter", payload,
                                   ("axis", axis, payload.shape), module)
        out = pays[0].astype(np.float32, copy=True)
        for p in pays[1:]:
            out = out + p
        chunk = np.split(out, self.size, axis=axis)[self.rank]
        self._record(seq, "reducescatter", self._bytes(payload), module)
        return np.ascontiguousarray(chunk)

    def alltoall(self, arr, split_axis: int, concat_axis: int, module: str) -> np.ndarray:
        payload = self._round(arr)
        if payload.shape[split_axis] % self.size:
            raise ContractError(
                f"all-to-all split axis {split_axis} extent "
                f"{payload.shape[split_axis]} not divisible by {self.size}")
        seq, pays = self._exchange(
            "alltoall", payload, ("axes", split_axis, concat_axis, payload.shape),
            module)
        mine = [np.split(p, self.size, axis=split_axis)[self.rank] for p in pays]
        self._record(seq, "alltoall", self._bytes(payload), module)
        return np.ascontiguousarray(np.concatenate(mine, axis=concat_axis))


# --------------------------------------------------------------------------
# differentiable collectives (tape ops)


def _coll_node(name: str, x: Tensor, fwd_data: np.ndarray, bwd_fn) -> Tensor:
    out = T.tensor(fwd_data)
    tape = runtime.ctx().tape

    def bwd(gouts):
        return [(x.bid, bwd_fn(gouts[0]))]

    if tape is not None:
        tape.add(name, [x], [out], [], bwd)
    return out


class DapPar:
    """Sharded-activation adapter for the model; collectives go on the tape
    so the dual operation runs automatically during backward."""

    def __init__(self, comm: Comm):
        self.comm = comm
        self.size = comm.size
        self.index = comm.rank

    def slice_np(self, arr: np.ndarray, axis: int) -> np.ndarray:
        if arr.shape[axis] % self.size:
            raise ContractError(
                f"cannot shard extent {arr.shape[axis]} over {self.size} workers")
        return np.ascontiguousarray(np.split(arr, self.size, axis=axis)[self.index])

    def allgather(self, x: Tensor, axis: int, module: str) -> Tensor:
        c = self.comm
        data = c.allgather(x.data, axis, module)
        return _coll_node("allgather", x, data,
                          lambda g: c.reducescatter_sum(g, axis, module))

    def reducescatter_sum(self, x: Tensor, axis: int, module: str) -> Tensor:
        c = self.comm
        data = c.reducescatter_sum(x.data, axis, module)
        return _coll_node("reducescatter", x, data,
                          lambda g: c.allgather(g, axis, module))

    def alltoall(self, x: Tensor, split_axis: int, concat_axis: int, module: str) -> Tensor:
        c = self.comm
        data = c.alltoall(x.data, split_axis, concat_axis, module)
        return _coll_node("alltoall", x, data,
                          lambda g: c.alltoall(g, concat_axis, split_axis, module))


# --------------------------------------------------------------------------
# gradient helpers


def _flatten_grads(names, grads: dict) -> np.ndarray:
    return np.concatenate([np.asarray(grads[n], np.float32).ravel() for n in names])


def _unflatten(names, shapes, vec: np.ndarray) -> dict:
    out, off = {}, 0
    for n, s in zip(names, shapes):
        k = int(np.prod(s)) if s else 1
        out[n] = vec[off:off + k].reshape(s)
        off += k
    return out


def _local_loss(cfg: M.ModelConfig, state: M.TrackState) -> Tensor:
    """Partial squared-mean loss over this worker's shard; seeds are exact
    because the divisors are the *global* element counts."""
    n_m = cfg.n_seq * cfg.n_res * cfg.c_m
    n_z = cfg.n_res * cfg.n_res * cfg.c_z
    lm = T.scale(T.reduce_sum(T.mul(state.msa, state.msa)), 1.0 / n_m)
    lz = T.scale(T.reduce_sum(T.mul(state.pair, state.pair)), 1.0 / n_z)
    return T.add(lm, lz)


# --------------------------------------------------------------------------
# worker bodies


def _serial_grads(cfg, mp, feats, policy, n_cycles):
    par = M.SerialPar()
    prev = None
    for _ in range(max(0, n_cycles - 1)):
        with runtime.Arena() as a:
            st = M.model_forward(cfg, mp, feats, par, policy, prev)
            if prev is not None:
                prev.msa.release()
                prev.pair.release()
            a.keep(st.msa, st.pair)
            prev = st
    named = M.flatten_params(mp)
    tape = Tape()
    with tape:
        st = M.model_forward(cfg, mp, feats, par, policy, prev)
        loss = _local_loss(cfg, st)
    grads = tape.run_backward({loss.bid: np.ones_like(loss.data)})
    loss_val = float(loss.data.reshape(()))
    out = {n: grads.get(t.bid, np.zeros(t.shape, np.float32)).copy()
           for n, t in named}
    outputs = (st.msa.data.copy(), st.pair.data.copy())
    tape.close()
    if prev is not None:
        prev.msa.release()
        prev.pair.release()
    return loss_val, out, outputs


def _dap_step(cfg, mp, feats, policy, n_cycles, comm: Comm):
    par = DapPar(comm)
    prev = None
    for _ in range(max(0, n_cycles - 1)):
        with runtime.Arena() as a:
            st = M.model_forward(cfg, mp, feats, par, policy, prev)
            if prev is not None:
                prev.msa.release()
                prev.pair.release()
            a.keep(st.msa, st.pair)
            prev = st
    named = M.flatten_params(mp)
    names = [n for n, _ in named]
    shapes = [t.shape for _, t in named]
    tape = Tape()
    with tape:
        st = M.model_forward(cfg, mp, feats, par, policy, prev)
        loss = _local_loss(cfg, st)
    with runtime.comm_labels(phase="bwd"):
        grads = tape.run_backward({loss.bid: np.ones_like(loss.data)})
    local = {n: grads.get(t.bid, np.zeros(t.shape, np.float32)) for n, t in named}
    with runtime.comm_labels(phase="grad-sync"):
        vec = comm.allreduce_sum(_flatten_grads(names, local), module="grad_sync")
        loss_val = float(comm.allreduce_sum(
            np.array([loss.data.reshape(())], np.float32), module="loss")[0])
    out = _unflatten(names, shapes, vec)
    # full outputs, gathered once for verification (not on the tape)
    with runtime.comm_labels(phase="fwd"):
        msa_full = comm.allgather(st.msa.data, 1, module="output")
        pair_full = comm.allgather(st.pair.data, 1, module="output")
    tape.close()
    if prev is not None:
        prev.msa.release()
        prev.pair.release()
    return loss_val, out, (msa_full, pair_full)


def _bp_step(cfg, mp, feats, policy, n_cycles, comm: Comm):
    """Branch-parallel step: rank 0 owns the MSA stack and the outer-product
    mean, rank 1 owns the pair stack. Per block: three forward broadcasts
    and one backward all-reduce."""
    wid = comm.rank
    par = M.SerialPar()
    masks = M.make_masks(feats, par)
    named = M.flatten_params(mp)
    names = [n for n, _ in named]
    shapes = [t.shape for _, t in named]
    by_name = dict(named)
    msa_names = sorted(M.branch_param_names(mp, "msa"))
    pair_names = sorted(M.branch_param_names(mp, "pair"))

    # replicated recycling warm-up (no communication)
    prev = None
    for _ in range(max(0, n_cycles - 1)):
        with runtime.Arena() as a:
            st = M.model_forward(cfg, mp, feats, par, policy, prev)
            if prev is not None:
                prev.msa.release()
                prev.pair.release()
            a.keep(st.msa, st.pair)
            prev = st

    tapes = []  # kept open until backward
    grads_acc = {}

    def leaf(arr):
        return T.tensor(np.asarray(arr, np.float32))

    def accumulate(tape_grads, branch_names):
        for n in branch_names:
            t = by_name[n]
            g = tape_grads.get(t.bid)
            if g is None:
                continue
            if n in grads_acc:
                grads_acc[n] = grads_acc[n] + g
            else:
                grads_acc[n] = np.array(g, np.float32)

    # ---- forward -----------------------------------------------------------
    with runtime.comm_labels(phase="fwd"):
        embed_tape = Tape()
        with embed_tape:
            st0 = M.embed(feats, mp, par, prev)
        tapes.append(embed_tape)
        # the embedding is replicated and deterministic, so both workers
        # already hold identical msa/pair starting points: no communication
        msa_arr = st0.msa.data.copy()
        pair_arr = st0.pair.data.copy()
        embed_out = st0

        blocks = []  # per block bookkeeping for the backward pass
        for blk in mp.blocks:
            runtime.ctx().blocks_executed += 1
            rec = {}
            if wid == 0:
                msa_in = leaf(msa_arr)
                pair_in = leaf(pair_arr)
                t_opm = Tape()
                with t_opm:
                    with runtime.comm_labels(module="opm"):
                        opm = M.outer_product_mean(msa_in, masks.msa, blk.opm,
                                                   par, cfg)
                opm_arr = comm.broadcast(opm.data, root=0, module="opm")
                t_msa = Tape()
                with t_msa:
                    msa = M.msa_row_attention(msa_in, pair_in, masks.msa, blk,
                                              par, policy)
                    msa = M.msa_col_attention(msa, masks.msa_t, blk, par, policy)
                    msa = M.transition(msa, blk.msa_trans)
                msa_arr = comm.broadcast(msa.data, root=0, module="msa_stack")
                pair_arr = comm.broadcast(None, root=1, module="pair_stack")
                rec.update(t_opm=t_opm, t_msa=t_msa, msa_in=msa_in,
                           pair_in=pair_in, opm=opm, msa_out=msa)
                tapes += [t_opm, t_msa]
            else:
                opm_arr = comm.broadcast(None, root=0, module="opm")
                pair_in = leaf(pair_arr)
                opm_in = leaf(opm_arr)
                t_pair = Tape()
                with t_pair:
                    pair = T.add(pair_in, opm_in)
                    pair = M.triangle_attention(pair, masks.pair, blk.tri_start,
                                                par, policy, ending=False)
                    pair = M.triangle_attention(pair, masks.pair_t, blk.tri_end,
                                                par, policy, ending=True)
                    pair = M.transition(pair, blk.pair_trans)
                msa_arr = comm.broadcast(None, root=0, module="msa_stack")
                pair_arr = comm.broadcast(pair.data, root=1, module="pair_stack")
                rec.update(t_pair=t_pair, pair_in=pair_in, opm_in=opm_in,
                           pair_out=pair)
                tapes.append(t_pair)
            blocks.append(rec)

    # replicated loss; analytic seeds of mean(msa^2) + mean(pair^2)
    msa_fin, pair_fin = msa_arr, pair_arr
    loss_val = float(np.mean(msa_fin.astype(np.float64) ** 2)
                     + np.mean(pair_fin.astype(np.float64) ** 2))
    d_msa = (2.0 / msa_fin.size) * msa_fin
    d_pair = (2.0 / pair_fin.size) * pair_fin

    # ---- backward ----------------------------------------------------------
    with runtime.comm_labels(phase="bwd"):
        for rec in reversed(blocks):
            if wid == 0:
                g = rec["t_msa"].run_backward({rec["msa_out"].bid: d_msa})
                accumulate(g, msa_names)
                b_contrib = g.get(rec["pair_in"].bid,
                                  np.zeros_like(d_pair))
                s = comm.allreduce_sum(b_contrib + 0.0, module="pair_stack")
                d_opm = s - b_contrib  # the pair branch's d(pair_mid)
                go = rec["t_opm"].run_backward({rec["opm"].bid: d_opm})
                accumulate(go, msa_names)
                d_msa = (g.get(rec["msa_in"].bid, 0.0)
                         + go.get(rec["msa_in"].bid, 0.0))
                d_pair = s
            else:
                g = rec["t_pair"].run_backward({rec["pair_out"].bid: d_pair})
                accumulate(g, pair_names)
                a_contrib = g[rec["pair_in"].bid]
                s = comm.allreduce_sum(a_contrib, module="pair_stack")
                d_pair = s
        # embeddings: each worker closes out its own branch
        ge = embed_tape.run_backward({embed_out.msa.bid: np.asarray(d_msa) if wid == 0
                                      else np.zeros_like(embed_out.msa.data),
                                      embed_out.pair.bid: d_pair if wid == 1
                                      else np.zeros_like(embed_out.pair.data)})
        accumulate(ge, msa_names if wid == 0 else pair_names)

    # ---- gradient exchange: each branch owner broadcasts its grads ---------
    with runtime.comm_labels(phase="grad-sync"):
        # the closing broadcast of the msa-representation gradient
        comm.broadcast(np.asarray(d_msa, np.float32) if wid == 0 else None,
                       root=0, module="msa_grad")
        for n in names:
            if n not in grads_acc:
                grads_acc.setdefault(n, None)
        msa_vec = (_flatten_grads(msa_names, {
            n: grads_acc[n] if grads_acc.get(n) is not None
            else np.zeros(by_name[n].shape, np.float32) for n in msa_names})
            if wid == 0 else None)
        msa_vec = comm.broadcast(msa_vec, root=0, module="params")
        pair_vec = (_flatten_grads(pair_names, {
            n: grads_acc[n] if grads_acc.get(n) is not None
            else np.zeros(by_name[n].shape, np.float32) for n in pair_names})
            if wid == 1 else None)
        pair_vec = comm.broadcast(pair_vec, root=1, module="params")

    out = {}
    out.update(_unflatten(msa_names, [by_name[n].shape for n in msa_names], msa_vec))
    out.update(_unflatten(pair_names, [by_name[n].shape for n in pair_names], pair_vec))
    out = {n: out[n] for n in names}

    for t in tapes:
        t.close()
    if prev is not None:
        prev.msa.release()
        prev.pair.release()
    return loss_val, out, (msa_fin.copy(), pair_fin.copy())


# --------------------------------------------------------------------------
# grid runner


@dataclass
class ParallelResult:
    loss: float
    grads: dict
    records: list = field(default_factory=list)
    per_worker_records: list = field(default_factory=list)
    outputs: tuple = None  # (msa, pair) gathered full arrays, when available
    per_worker_ops: list = field(default_factory=list)


def run_grid(grid: GridConfig, cfg: M.ModelConfig, mp: M.ModelParams,
             feats_by_dp, policy: M.ExecPolicy = None, n_cycles: int = 1,
             act_dtype=None, step: int = 0, bus: CollectiveBus = None,
             timeout: float = 30.0) -> ParallelResult:
    """Run one forward/backward over the whole grid and return replica-
    identical averaged gradients plus the merged communication trace.

    ``feats_by_dp`` is one Features per data-parallel replica.
    """
    policy = policy or M.ExecPolicy()
    if len(feats_by_dp) != grid.dp:
        raise ContractError(f"need {grid.dp} feature sets, got {len(feats_by_dp)}")
    bus = bus or CollectiveBus(timeout=timeout)
    results = [None] * grid.world
    errors = [None] * grid.world

    def body(rank):
        c = runtime.Context()
        c.rank = rank
        c.act_dtype = act_dtype
        c.comm_step = step
        runtime.set_context(c)
        dpi, bpi, dapi = grid.coords(rank)
        feats = feats_by_dp[dpi]
        outputs = None
        try:
            if grid.bp == 2:
                comm = Comm(bus, "bp", dpi, bpi, 2)
                loss, grads, outputs = _bp_step(cfg, mp, feats, policy,
                                                n_cycles, comm)
            elif grid.dap > 1:
                comm = Comm(bus, "dap", dpi * grid.bp + bpi, dapi, grid.dap)
                loss, grads, outputs = _dap_step(cfg, mp, feats, policy,
                                                 n_cycles, comm)
            else:
                loss, grads, outputs = _serial_grads(cfg, mp, feats, policy,
                                                     n_cycles)
            if grid.dp > 1:
                dcomm = Comm(bus, "dp", bpi * grid.dap + dapi, dpi, grid.dp)
                names = sorted(grads)
                shapes = [np.asarray(grads[n]).shape for n in names]
                with runtime.comm_labels(phase="grad-sync"):
                    vec = dcomm.allreduce_sum(_flatten_grads(names, grads),
                                              module="grad_sync") / grid.dp
                    loss = float(dcomm.allreduce_sum(
                        np.array([loss], np.float32), module="loss")[0]) / grid.dp
                grads = _unflatten(names, shapes, vec)
            results[rank] = (loss, grads, list(c.comm_records), outputs,
                             int(c.op_counts["total"]))
        except BaseException as e:  # surfaced to the caller below
            errors[rank] = e

    threads = [threading.Thread(target=body, args=(r,), daemon=True)
               for r in range(grid.world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=timeout * 4)
    for e in errors:
        if e is not None and not isinstance(e, DeadlockError):
            raise e
    for e in errors:
        if e is not None:
            raise e
    if any(r is None for r in results):
        raise DeadlockError("one or more workers never finished")

    loss0, grads0 = results[0][0], results[0][1]
    merged = []
    for r in results:
        merged.extend(r[2])
    outputs = next((r[3] for r in results if r[3] is not None), None)
    return ParallelResult(loss=loss0, grads=grads0, records=merged,
                          per_worker_records=[r[2] for r in results],
                          outputs=outputs,
                          per_worker_ops=[r[4] for r in results])
