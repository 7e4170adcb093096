"""Tensor fusion for the optimizer path.

Parameters (and their gradients, Adam moments and EMA shadows) can live
either as per-tensor arrays or packed into contiguous pooled regions with
256-byte-aligned slots. Packed mode re-binds each parameter tensor to a
view of the pool, so the model reads updated values with no copies, and
each optimizer phase touches one buffer instead of one per parameter.

A ``LaunchCounter`` tallies how many kernel-equivalent launches each phase
issues: fused mode does (1, 2, 1, 1) launches for gradient sync / clip /
update / EMA versus (n, 2n, n, n) for n parameters unfused. The numeric
trajectory is bitwise identical between modes: every elementwise update
is the same arithmetic per element, padding slots hold zeros and stay
zero, and the clip norm is accumulated in float64 in parameter order in
both modes.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor

ALIGN = 256
REGIONS = ("params", "grads", "adam_m", "adam_v", "ema")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.1
    ema_decay: float = 0.999


@dataclass
class Slot:
    name: str
    shape: tuple
    offset: int  # bytes from region start
    nbytes: int
    padded_bytes: int


def build_layout(named_shapes, align: int = ALIGN) -> list:
    """Aligned slot table shared by all pooled regions."""
    slots, off = [], 0
    for name, shape in named_shapes:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        padded = -(-nbytes // align) * align
        slots.append(Slot(name, tuple(shape), off, nbytes, padded))
        off += padded
    return slots


def layout_total_bytes(slots) -> int:
    return slots[-1].offset + slots[-1].padded_bytes if slots else 0


class LaunchCounter:
    PHASES = ("grad_sync", "grad_clip", "opt_update", "ema")

    def __init__(self):
        self.counts = Counter()

    def hit(self, phase: str, n: int = 1):
        if phase not in self.PHASES:
            raise ContractError(f"unknown launch phase {phase!r}")
        self.counts[phase] += n

    def total(self) -> int:
        return sum(self.counts.values())


class FusionEngine:
    """Owns parameter storage and runs the optimizer tail of a step:
    gradient averaging hook, global-norm clip, Adam, EMA."""

    def __init__(self, named_params, optim: OptimConfig = None, fused: bool = True,
                 align: int = ALIGN):
        self.named_params = list(named_params)
        self.names = [n for n, _ in self.named_params]
        self.optim = optim or OptimConfig()
        self.fused = fused
        self.launches = LaunchCounter()
        self.step_count = 0
        self.slots = build_layout([(n, t.shape) for n, t in self.named_params], align)
        self._by_name = {s.name: s for s in self.slots}

        n_total = layout_total_bytes(self.slots) // 4
        if fused:
            self.regions = {r: np.zeros(n_total, np.float32) for r in REGIONS}
            self._views = {r: {} for r in REGIONS}
            for (name, t), slot in zip(self.named_params, self.slots):
                for r in REGIONS:
                    lo = slot.offset // 4
                    view = self.regions[r][lo:lo + int(np.prod(slot.shape, dtype=np.int64) or 1)]
                    self._views[r][name] = view.reshape(slot.shape)
                self._views["params"][name][...] = t.data
                self._views["ema"][name][...] = t.data
                # the model now reads and writes pooled storage directly
                t.data = self._views["params"][name]
        else:
            self.regions = None
            self._store = {
                "grads": {n: np.zeros(t.shape, np.float32) for n, t in self.named_params},
                "adam_m": {n: np.zeros(t.shape, np.float32) for n, t in self.named_params},
                "adam_v": {n: np.zeros(t.shape, np.float32) for n, t in self.named_params},
                "ema": {n: t.data.copy() for n, t in self.named_params},
            }

    # -- storage access ------------------------------------------------------

    def view(self, region: str, name: str) -> np.ndarray:
        if self.fused:
            return self._views[region][name]
        if region == "params":
            return dict(self.named_params)[name].data
        return self._store[region][name]

    def layout_rows(self) -> list:
        """Rows for the plan table: one per (parameter, region)."""
        rows = []
        for region in REGIONS:
            for s in self.slots:
                rows.append({
                    "name": s.name,
                    "shape": "x".join(map(str, s.shape)) or "1",
                    "region": region,
                    "offset": s.offset,
                    "padded_bytes": s.padded_bytes,
                })
        return rows

    # -- optimizer phases ----------------------------------------------------

    def load_grads(self, grads: dict):
        missing = [n for n in self.names if n not in grads]
        if missing:
            raise ContractError(f"missing gradients for {missing[:3]}...")
        for n in self.names:
            self.view("grads", n)[...] = np.asarray(grads[n], np.float32).reshape(
                self._by_name[n].shape)

    def grad_sync(self, reducer=None):
        """Average gradients across replicas; ``reducer(vec) -> vec`` is the
        transport (identity when running single-replica)."""
        if self.fused:
            self.launches.hit("grad_sync", 1)
            if reducer is not None:
                self.regions["grads"][...] = reducer(self.regions["grads"])
        else:
            self.launches.hit("grad_sync", len(self.names))
            if reducer is not None:
                for n in self.names:
                    g = self._store["grads"][n]
                    g[...] = reducer(g.ravel()).reshape(g.shape)

    def _global_norm(self) -> float:
        # float64 accumulation in parameter order keeps fused and unfused
        # trajectories bitwise identical
        acc = np.float64(0.0)
        for n in self.names:
            g = self.view("grads", n).astype(np.float64).ravel()
            acc += np.dot(g, g)
        return float(np.sqrt(acc))

    def clip_grads(self) -> float:
        norm = self._global_norm()
        scale = np.float32(1.0)
        if norm > self.optim.clip_norm:
            scale = np.float32(self.optim.clip_norm / norm)
        if self.fused:
            self.launches.hit("grad_clip", 2)  # norm pass + scale pass
            if scale != 1.0:
                self.regions["grads"] *= scale
        else:
            self.launches.hit("grad_clip", 2 * len(self.names))
            if scale != 1.0:
                for n in self.names:
                    self._store["grads"][n] *= scale
        return norm

    def adam_step(self):
        self.step_count += 1
        o = self.optim
        t = self.step_count
        bc1 = np.float32(1.0 - o.beta1 ** t)
        bc2 = np.float32(1.0 - o.beta2 ** t)

        def upd(p, g, m, v):
            m[...] = np.float32(o.beta1) * m + np.float32(1 - o.beta1) * g
            v[...] = np.float32(o.beta2) * v + np.float32(1 - o.beta2) * (g * g)
            mh = m / bc1
            vh = v / bc2
            p -= np.float32(o.lr) * mh / (np.sqrt(vh) + np.float32(o.eps))

        if self.fused:
            self.launches.hit("opt_update", 1)
            r = self.regions
            upd(r["params"], r["grads"], r["adam_m"], r["adam_v"])
        else:
            self.launches.hit("opt_update", len(self.names))
            for n, tns in self.named_params:
                upd(tns.data, self._store["grads"][n], self._store["adam_m"][n],
                    self._store["adam_v"][n])

    def ema_update(self):
        d = np.float32(self.optim.ema_decay)
        one_minus = np.float32(1.0) - d
        if self.fused:
            self.launches.hit("ema", 1)
            e = self.regions["ema"]
            e[...] = d * e + one_minus * self.regions["params"]
        else:
            self.launches.hit("ema", len(self.names))
            for n, tns in self.named_params:
                e = self._store["ema"][n]
                e[...] = d * e + one_minus * tns.data

    def apply(self, grads: dict, reducer=None) -> float:
        """Full optimizer tail; returns the pre-clip global gradient norm."""
        self.load_grads(grads)
        self.grad_sync(reducer)
        norm = self.clip_grads()
        self.adam_step()
        self.ema_update()
        return norm

    def params_snapshot(self) -> dict:
        return {n: t.data.copy() for n, t in self.named_params}
