"""Per-worker execution context.

Each worker (thread) owns exactly one Context: a memory ledger, an
optional recording tape, op counters, the activation dtype policy and the
labels attached to communication records. Contexts are never shared.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager

from .ledger import MemoryLedger

_tls = threading.local()

# buffer ids are process-global so tensors remain distinct across workers
_bid_lock = threading.Lock()
_bid_counter = 0


def _global_bid() -> int:
    global _bid_counter
    with _bid_lock:
        _bid_counter += 1
        return _bid_counter


class Context:
    def __init__(self):
        self.ledger = MemoryLedger()
        self.tape = None  # set by autodiff.Tape
        self.arenas: list = []
        self.op_counts = Counter()
        self.blocks_executed = 0
        self.act_dtype = None  # None/F32 -> float32 activations; DType.BF16 -> bf16
        self._next_bid = 1
        self.comm_records: list = []
        self.comm_phase = "fwd"
        self.comm_module = ""
        self.rank = 0

    def new_bid(self) -> int:
        return _global_bid()

    def count_op(self, kind: str):
        self.op_counts[kind] += 1
        self.op_counts["total"] += 1


def ctx() -> Context:
    c = getattr(_tls, "ctx", None)
    if c is None:
        c = Context()
        _tls.ctx = c
    return c


def set_context(c: Context):
    _tls.ctx = c


@contextmanager
def fresh_context():
    """Run a block under a brand new Context (restores the old one after)."""
    old = getattr(_tls, "ctx", None)
    c = Context()
    _tls.ctx = c
    try:
        yield c
    finally:
        _tls.ctx = old


class Arena:
    """Owns every tensor created while active (unless a tape is recording);
    releases them at exit except the ones explicitly kept."""

    def __init__(self):
        self.owned = []
        self._kept = set()

    def keep(self, *tensors):
        for t in tensors:
            self._kept.add(id(t))
        return tensors[0] if len(tensors) == 1 else tensors

    def __enter__(self):
        ctx().arenas.append(self)
        return self

    def __exit__(self, *exc):
        c = ctx()
        c.arenas.remove(self)
        for t in self.owned:
            if id(t) not in self._kept:
                t.release()
        # kept tensors escape to the enclosing owner, if any
        for t in self.owned:
            if id(t) in self._kept:
                adopt(t)
        return False


def adopt(tensor):
    """Register a freshly created tensor with the active owner (tape or arena)."""
    c = ctx()
    if c.tape is not None:
        c.tape.owned.append(tensor)
    elif c.arenas:
        c.arenas[-1].owned.append(tensor)


@contextmanager
def comm_labels(phase: str = None, module: str = None):
    c = ctx()
    old = (c.comm_phase, c.comm_module)
    if phase is not None:
        c.comm_phase = phase
    if module is not None:
        c.comm_module = module
    try:
        yield
    finally:
        c.comm_phase, c.comm_module = old
