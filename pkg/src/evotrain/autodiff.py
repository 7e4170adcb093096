"""Reverse-mode differentiation over the tensor op set via a recorded tape."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import runtime
from .tensor import ContractError, Tensor, tensor


@dataclass
class Node:
    op: str
    input_bids: list
    output_bids: list
    saved: list  # tensors retained for backward
    bwd: callable  # (gouts: list[np|None]) -> list[(bid, np grad)]


class Tape:
    """Eager recording tape; backward visits nodes in exact reverse order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.owned: list[Tensor] = []
        self.produced: set[int] = set()
        self.consumed = False
        self._active = False

    # -- recording ---------------------------------------------------------

    def add(self, op, inputs, outputs, saved, bwd):
        self.nodes.append(
            Node(op, [t.bid for t in inputs], [t.bid for t in outputs], list(saved), bwd)
        )
        self.produced.update(t.bid for t in outputs)
        # tensors materialized inside a coarse op count as produced here too
        extra = [t.bid for t in saved if t.bid not in self.produced]
        if extra:
            owned_bids = {t.bid for t in self.owned}
            self.produced.update(b for b in extra if b in owned_bids)

    def mark(self) -> int:
        return len(self.nodes)

    def saved_intermediates(self, since: int = 0, exclude_bids=()) -> list[int]:
        """Distinct tape-produced tensors retained for backward after ``since``."""
        exclude = set(exclude_bids)
        seen = []
        for node in self.nodes[since:]:
            for t in node.saved:
                if t.bid in self.produced and t.bid not in exclude and t.bid not in seen:
                    seen.append(t.bid)
        return seen

    # -- lifecycle ----------------------------------------------------------

    def __enter__(self):
        c = runtime.ctx()
        if c.tape is not None:
            raise ContractError("a tape is already recording on this worker")
        c.tape = self
        self._active = True
        return self

    def __exit__(self, *exc):
        runtime.ctx().tape = None
        self._active = False
        return False

    def close(self):
        """Release every tensor created while this tape was recording."""
        if self._active:
            runtime.ctx().tape = None
            self._active = False
        for t in self.owned:
            t.release()
        self.owned.clear()

    # -- backward -----------------------------------------------------------

    def run_backward(self, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        if self.consumed:
            raise ContractError("tape already consumed by a previous backward")
        self.consumed = True
        grads: dict[int, np.ndarray] = {
            bid: np.asarray(g, dtype=np.float32) for bid, g in seeds.items()
        }
        for node in reversed(self.nodes):
            gouts = [grads.get(b) for b in node.output_bids]
            if all(g is None for g in gouts):
                continue
            for bid, g in node.bwd(gouts):
                if bid in grads:
                    grads[bid] = grads[bid] + g
                else:
                    grads[bid] = np.asarray(g, dtype=np.float32)
        return grads


def backward(tape: Tape, loss: Tensor, params=()) -> dict[int, Tensor]:
    """Gradients of a scalar loss for every parameter reachable on the tape.

    Unreached params get zero gradients. The tape is consumed.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = tape.run_backward({loss.bid: np.ones_like(loss.data)})
    out = {}
    for p in params:
        g = grads.get(p.bid)
        if g is None:
            g = np.zeros(p.shape, dtype=np.float32)
        out[p.bid] = tensor(g)
    return out


def backward_seeded(tape: Tape, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Backward from explicit output gradients (used by recompute and BP)."""
    return tape.run_backward(seeds)


def grad_check(f, x: Tensor, h: float = 1e-3, max_coords: int = 64, seed: int = 0):
    """Central-difference check of the tape gradient of scalar-valued ``f``.

    Returns max |analytic - fd| over the sampled coordinates divided by the
    max sampled gradient magnitude (infinity-norm relative error).
    """
    if h <= 0:
        raise ContractError("h must be positive")
    with Tape() as tape:
        loss = f(x)
    with runtime.Arena():
        grads = backward(tape, loss, params=[x])
        analytic = grads[x.bid].data.copy()
    tape.close()

    n = x.size
    rng = np.random.default_rng(seed)
    if n <= max_coords:
        coords = np.arange(n)
    else:
        coords = rng.choice(n, size=max(32, max_coords), replace=False)

    flat = x.data.reshape(-1)
    fd = np.zeros(len(coords), dtype=np.float64)
    with runtime.Arena():
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            fp = f(x).data.reshape(()).item()
            flat[c] = orig - h
            fm = f(x).data.reshape(()).item()
            flat[c] = orig
            fd[i] = (fp - fm) / (2.0 * h)

    a = analytic.reshape(-1)[coords].astype(np.float64)
    scale = max(np.abs(a).max(), np.abs(fd).max(), 1e-8)
    return float(np.abs(a - fd).max() / scale)
