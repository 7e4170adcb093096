"""Desk-scale two-track attention training engine.

Simulates the performance techniques of large protein-structure trainers —
fused gated attention, tensor fusion, branch/sequence/data parallelism,
activation recompute, reduced-precision activations — on numpy, with
instrumented memory, communication, and kernel-launch counters so each
technique's effect is measurable and testable.
"""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig, load_config  # noqa: F401
from .trainer import ExecutionPlan, init_trainer, train_loop  # noqa: F401
