#!/usr/bin/env python3
"""Trace the collective-communication pattern of the two simulated
parallelism schemes on a small model and tally records per (module,
primitive), next to the per-block counts the planner predicts.

Branch parallelism should cost 4 block-level records per block; sequence
parallelism costs more records but each worker holds 1/N of the activations.
"""

import argparse
from collections import Counter

from evotrain import harness as H
from evotrain import model as M
from evotrain import planner, runtime


def tally(grid, cfg, mp, feats):
    runtime.set_context(runtime.Context())
    res = H.run_grid(grid, cfg, mp, [feats])
    c = Counter()
    for r in res.per_worker_records[0]:
        stack = planner.MODULE_STACK.get(r.module, r.module)
        c[(stack, r.primitive)] += 1
    return res, c


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--blocks", type=int, default=2)
    ap.add_argument("--seed", type=int, default=32)
    args = ap.parse_args()
    cfg = M.ModelConfig(n_blocks=args.blocks, n_seq=8, n_res=16, c_m=32,
                        c_z=16, heads=4, opm_dim=4)
    runtime.set_context(runtime.Context())
    mp = M.init_params(cfg, args.seed)
    feats = M.make_features(cfg, args.seed + 1)

    for name, grid, scheme in (("branch-parallel bp=2", H.GridConfig(bp=2), "bp"),
                               ("sequence-parallel dap=2", H.GridConfig(dap=2), "dap")):
        res, counts = tally(grid, cfg, mp, feats)
        print(f"== {name}: {len(res.records)} records total ==")
        for (stack, prim), n in sorted(counts.items()):
            print(f"  {stack:12s} {prim:14s} x{n}")
        block_level = sum(n for (stack, _), n in counts.items()
                          if stack in planner.MODULE_STACK.values())
        expected = planner.comm_total(scheme, "mini" if scheme == "dap" else None)
        print(f"  block-level records per block: "
              f"{block_level / args.blocks:g} (planner: {expected})")
        assert block_level == expected * args.blocks


if __name__ == "__main__":
    main()
