#!/usr/bin/env python3
"""Finite-difference audit of the full model gradient.

Checks every parameter of the micro model against central differences
in extended precision and prints the worst coordinate per parameter.

    python3 scripts/gradient_check.py [--eps 1e-3]
"""

import argparse
import sys
import time

import numpy as np

from multigrain import tensor as T
from multigrain.checks import micro_config, micro_instance
from multigrain.docgraph import build_graph
from multigrain.encoder import ModelParams, encode
from multigrain.heads import joint_loss, score_nodes


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--scale", type=float, default=0.1)
    ap.add_argument("--tolerance", type=float, default=1e-4)
    args = ap.parse_args()

    cfg = micro_config()
    inst = micro_instance()
    graph = build_graph(inst, clips=cfg.clips)
    model = ModelParams.init(cfg, seed=args.seed, scale=args.scale)
    params = model.tensors

    def f():
        states = encode(inst, graph, model)
        scores = score_nodes(states, graph, inst, model)
        return joint_loss(scores, inst.long_target, inst.start, inst.end, inst.answer_type)

    t0 = time.time()
    worst_overall = 0.0
    with T.precision("extended"):
        T.zero_grads(params)
        with T.record_tape():
            grads = T.backward(f(), params)
        T.zero_grads(params)
        for name, p in params.items():
            flat = p.data.reshape(-1)
            g = grads[name].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + args.eps
                with T.no_grad():
                    fp = f().item()
                flat[i] = orig - args.eps
                with T.no_grad():
                    fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * args.eps)
                rel = abs(float(g[i]) - num) / max(1e-8, abs(float(g[i])) + abs(num))
                worst = max(worst, rel)
            print(f"{name:35s} worst rel err {worst:.3e}")
            worst_overall = max(worst_overall, worst)

    ok = worst_overall < args.tolerance
    print(f"\nmax relative error {worst_overall:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {args.tolerance:g}) in {time.time() - t0:.1f}s")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
