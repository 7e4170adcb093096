"""Allocation ledger: every tensor buffer is attributed to a named scope.

The ledger tracks logical tensor bytes (not allocator slack). Peaks are
maintained both globally and per scope prefix so the planner can be
cross-checked against individual scopes such as ``attn/logits``.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass


class LedgerError(Exception):
    pass


@dataclass
class LedgerEvent:
    ev: str  # "alloc" | "free"
    bid: int
    nbytes: int
    scope: str
    step: int
    shape: tuple  # internal, not part of the dump format


def _prefixes(scope: str):
    parts = scope.split("/") if scope else []
    for i in range(1, len(parts) + 1):
        yield "/".join(parts[:i])


class MemoryLedger:
    def __init__(self):
        self.events: list[LedgerEvent] = []
        self.live_bytes = 0
        self.peak_bytes = 0
        self.step = 0
        self._scope_stack: list[str] = []
        self._live: dict[int, LedgerEvent] = {}
        self._scope_live: dict[str, int] = {}
        self._scope_peak: dict[str, int] = {}

    @property
    def current_scope(self) -> str:
        return "/".join(self._scope_stack)

    @contextmanager
    def scope(self, label: str):
        self._scope_stack.append(label)
        try:
            yield
        finally:
            self._scope_stack.pop()

    def alloc(self, bid: int, nbytes: int, shape: tuple = ()):
        if bid in self._live:
            raise LedgerError(f"buffer {bid} already live")
        ev = LedgerEvent("alloc", bid, nbytes, self.current_scope, self.step, shape)
        self.events.append(ev)
        self._live[bid] = ev
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        for p in _prefixes(ev.scope):
            live = self._scope_live.get(p, 0) + nbytes
            self._scope_live[p] = live
            if live > self._scope_peak.get(p, 0):
                self._scope_peak[p] = live

    def free(self, bid: int):
        ev = self._live.pop(bid, None)
        if ev is None:
            raise LedgerError(f"free of buffer {bid} without a matching alloc")
        self.events.append(
            LedgerEvent("free", bid, ev.nbytes, ev.scope, self.step, ev.shape)
        )
        self.live_bytes -= ev.nbytes
        for p in _prefixes(ev.scope):
            self._scope_live[p] -= ev.nbytes

    def is_live(self, bid: int) -> bool:
        return bid in self._live

    def scope_peak(self, prefix: str) -> int:
        return self._scope_peak.get(prefix, 0)

    def scope_live(self, prefix: str) -> int:
        return self._scope_live.get(prefix, 0)

    def reset_peak(self):
        self.peak_bytes = self.live_bytes
        self._scope_peak = dict(self._scope_live)

    def live_count_with_shape(self, shape: tuple, exclude: tuple = ()) -> int:
        shape = tuple(shape)
        return sum(
            1
            for bid, ev in self._live.items()
            if ev.shape == shape and bid not in exclude
        )

    def live_count_with_shape_at(self, shape: tuple, index: int, exclude: tuple = ()) -> int:
        """Replay events up to (exclusive) ``index`` and count live buffers of ``shape``."""
        shape = tuple(shape)
        live = set()
        for ev in self.events[:index]:
            if ev.ev == "alloc":
                live.add((ev.bid, ev.shape))
            else:
                live.discard((ev.bid, ev.shape))
        return sum(1 for bid, s in live if s == shape and bid not in exclude)

    def dump_jsonl(self, path):
        with open(path, "w") as f:
            for ev in self.events:
                f.write(
                    json.dumps(
                        {"ev": ev.ev, "id": ev.bid, "bytes": ev.nbytes,
                         "scope": ev.scope, "step": ev.step},
                        separators=(",", ":"),
                    )
                    + "\n"
                )
