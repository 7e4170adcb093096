import json

import numpy as np
import pytest

from evotrain import model as M
from evotrain import runtime
from evotrain import trainer as TR


def mini_cfg(n_blocks=2):
    return M.ModelConfig(n_blocks=n_blocks, n_seq=8, n_res=16, c_m=32,
                         c_z=16, heads=4, opm_dim=4)


def small_cfg():
    return M.ModelConfig(n_blocks=1, n_seq=4, n_res=6, c_m=8, c_z=8, heads=2,
                         opm_dim=3)


def test_plan_validation():
    with pytest.raises(Exception):
        TR.ExecutionPlan(bp=2, dap=2).validate()
    with pytest.raises(Exception):
        TR.ExecutionPlan(act_dtype="fp8").validate()
    with pytest.raises(Exception):
        TR.ExecutionPlan(bp=2, recompute=("evoformer",)).validate()
    TR.ExecutionPlan(bp=2).validate()


def test_recompute_bitwise_and_lower_peak():
    cfg = mini_cfg()

    def run(rec):
        runtime.set_context(runtime.Context())
        mp = M.init_params(cfg, 32)
        feats = M.make_features(cfg, 9)
        led = runtime.ctx().ledger
        base = led.live_bytes
        led.reset_peak()
        f = TR.recompute_grads if rec else TR.direct_grads
        loss, grads, outputs = f(cfg, mp, feats, M.ExecPolicy(), 2)
        return loss, grads, outputs, led.peak_bytes - base

    l0, g0, o0, p0 = run(False)
    l1, g1, o1, p1 = run(True)
    assert l0 == l1
    assert all(np.array_equal(g0[n], g1[n]) for n in g0)
    assert np.array_equal(o0[0], o1[0]) and np.array_equal(o0[1], o1[1])
    assert p1 < p0


def test_recompute_peak_nearly_depth_independent():
    peaks = {}
    for depth in (1, 2, 4):
        runtime.set_context(runtime.Context())
        cfg = mini_cfg(n_blocks=depth)
        mp = M.init_params(cfg, 32)
        feats = M.make_features(cfg, 9)
        led = runtime.ctx().ledger
        base = led.live_bytes
        led.reset_peak()
        TR.recompute_grads(cfg, mp, feats, M.ExecPolicy(), 1)
        peaks[depth] = led.peak_bytes - base
    assert peaks[4] <= 1.3 * peaks[1]


def test_training_reduces_loss():
    runtime.set_context(runtime.Context())
    ts = TR.init_trainer(mini_cfg(), TR.ExecutionPlan(seed=32, steps=50))
    losses = TR.train_loop(ts, 50)
    assert all(np.isfinite(losses))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_training_deterministic_given_seed():
    def run():
        runtime.set_context(runtime.Context())
        ts = TR.init_trainer(small_cfg(), TR.ExecutionPlan(seed=5))
        return TR.train_loop(ts, 5)

    assert run() == run()


def test_metrics_jsonl(tmp_path):
    runtime.set_context(runtime.Context())
    ts = TR.init_trainer(small_cfg(), TR.ExecutionPlan(seed=1))
    path = tmp_path / "metrics.jsonl"
    TR.train_loop(ts, 3, metrics_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 3
    for key in ("step", "loss", "grad_norm", "n_recycles", "op_count",
                "ledger_peak_bytes"):
        assert key in rows[0]


def test_non_finite_loss_aborts():
    runtime.set_context(runtime.Context())
    ts = TR.init_trainer(small_cfg(), TR.ExecutionPlan(seed=1))
    for _, t in M.flatten_params(ts.mp)[:1]:
        t.data[...] = np.nan
    with pytest.raises(TR.TrainingAborted):
        TR.train_step(ts, 0)


def test_bench_discards_first_five():
    runtime.set_context(runtime.Context())
    ts = TR.init_trainer(small_cfg(), TR.ExecutionPlan(seed=2))
    clean = TR.bench_protocol(ts, total=8, discard=5)

    runtime.set_context(runtime.Context())
    ts2 = TR.init_trainer(small_cfg(), TR.ExecutionPlan(seed=2))
    spiked = TR.bench_protocol(ts2, total=8, discard=5,
                               _spike=(3, "op_count", 10**9))
    assert spiked["counters"] == clean["counters"]

    runtime.set_context(runtime.Context())
    ts3 = TR.init_trainer(small_cfg(), TR.ExecutionPlan(seed=2))
    spiked_kept = TR.bench_protocol(ts3, total=8, discard=5,
                                    _spike=(6, "op_count", 10**9))
    assert spiked_kept["counters"]["op_count"] > clean["counters"]["op_count"]


def test_bench_full_protocol_window():
    runtime.set_context(runtime.Context())
    ts = TR.init_trainer(small_cfg(), TR.ExecutionPlan(seed=3))
    out = TR.bench_protocol(ts, total=105, discard=5)
    assert out["total_steps"] == 105
    assert out["averaged_steps"] == 100


def test_recycle_seed_discipline():
    a = [M.draw_num_recycles(32, s) for s in range(100)]
    b = [M.draw_num_recycles(32, s) for s in range(100)]
    c = [M.draw_num_recycles(33, s) for s in range(100)]
    assert a == b and a != c


def test_grid_plan_trains():
    runtime.set_context(runtime.Context())
    ts = TR.init_trainer(mini_cfg(), TR.ExecutionPlan(seed=4, bp=2))
    losses = TR.train_loop(ts, 2)
    assert all(np.isfinite(losses))
    assert ts.history[0]["comm_records"] > 0
