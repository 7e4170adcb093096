"""Run configuration: a JSON file with "model", "plan" and "out_dir".

Unknown keys anywhere are rejected, and every invariant violation is
reported with a path-qualified message (e.g. ``plan.dap``) before any
compute starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .model import ModelConfig
from .tensor import ContractError
from .trainer import ExecutionPlan


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    plan: ExecutionPlan
    out_dir: str = "out"


def _build(cls, data: dict, path: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}: unknown key")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


def validate(rc: RunConfig):
    m, p = rc.model, rc.plan
    for name in ("n_blocks", "n_seq", "n_res", "c_m", "c_z", "heads",
                 "opm_dim", "feat_dim"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name}: must be >= 1")
    if m.c_m % m.heads or m.c_z % m.heads:
        raise ConfigError("model.heads: must divide c_m and c_z")
    if not 0 <= m.pad_fraction < 1:
        raise ConfigError("model.pad_fraction: must be in [0, 1)")

    if p.dp < 1:
        raise ConfigError("plan.dp: must be >= 1")
    if p.bp not in (1, 2):
        raise ConfigError("plan.bp: branch parallelism supports size 1 or 2")
    if p.dap < 1:
        raise ConfigError("plan.dap: must be >= 1")
    if p.bp > 1 and p.dap > 1:
        raise ConfigError("plan.bp: bp and dap axes do not compose")
    if p.act_dtype not in ("f32", "bf16"):
        raise ConfigError("plan.act_dtype: must be 'f32' or 'bf16'")
    if p.chunk < 0:
        raise ConfigError("plan.chunk: must be >= 0")
    if set(p.recompute) - {"evoformer"}:
        raise ConfigError("plan.recompute: only the 'evoformer' stack exists")
    if p.recompute and (p.dp * p.bp * p.dap) > 1:
        raise ConfigError("plan.recompute: supported on single-worker plans only")
    if p.steps < 1:
        raise ConfigError("plan.steps: must be >= 1")
    if p.dap > 1:
        if m.n_seq % p.dap:
            raise ConfigError(
                f"plan.dap: n_seq={m.n_seq} is not divisible by dap={p.dap}")
        if m.n_res % p.dap:
            raise ConfigError(
                f"plan.dap: n_res={m.n_res} is not divisible by dap={p.dap}")
    if p.chunk and p.chunk > m.n_seq:
        raise ConfigError(f"plan.chunk: {p.chunk} exceeds n_seq={m.n_seq}")


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for k in raw:
        if k not in ("model", "plan", "out_dir"):
            raise ConfigError(f"{k}: unknown key")

    model = _build(ModelConfig, raw.get("model", {}), "model")
    plan_data = dict(raw.get("plan", {}))
    if "recompute" in plan_data:
        rc = plan_data["recompute"]
        if isinstance(rc, bool):
            rc = ("evoformer",) if rc else ()
        plan_data["recompute"] = tuple(rc)
    plan = _build(ExecutionPlan, plan_data, "plan")
    out_dir = raw.get("out_dir", "out")
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir: must be a string")

    rc = RunConfig(model=model, plan=plan, out_dir=out_dir)
    try:
        validate(rc)
    except ContractError as e:
        raise ConfigError(str(e)) from None
    return rc
