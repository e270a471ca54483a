#!/usr/bin/env python3
"""Desk-scale experiment: generate a corpus, train, and evaluate.

Runs the full pipeline in a work directory and prints the evaluation
table for the held-out documents, plus a layer study over n_layers.

    python3 scripts/end_to_end.py --workdir /tmp/run --steps 500
"""

import argparse
import json
import sys
import time
from pathlib import Path

from multigrain.encoder import EncoderConfig, ModelParams
from multigrain.evaluate import evaluate
from multigrain.predict import predict_instances
from multigrain.preprocess import PreprocessConfig, preprocess_example, write_instances
from multigrain.synthgen import CorpusSpec, build_vocab, generate_corpus
from multigrain.train import TrainConfig, train_loop, write_trace_csv


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n-docs", type=int, default=80, help="total documents; last 20%% held out")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--layers", type=int, nargs="+", default=[0, 2])
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)

    spec = CorpusSpec(seed=args.seed, n_docs=args.n_docs, answerable_frac=0.4, yesno_frac=0.1)
    examples, golds = generate_corpus(spec)
    vocab = build_vocab(spec)
    vocab.save(work / "vocab.txt")

    pp = PreprocessConfig(keep_prob=1.0, seed=args.seed)
    instances = [i for ex in examples for i in preprocess_example(ex, vocab, pp)]
    write_instances(work / "instances.jsonl", instances)

    n_train_docs = args.n_docs - args.n_docs // 5
    doc_idx = lambda i: int(i.example_id.split("-")[1])
    train = [i for i in instances if doc_idx(i) < n_train_docs]
    held = [i for i in instances if doc_idx(i) >= n_train_docs]
    gold_by_id = {g.example_id: g for g in golds}
    print(f"{len(train)} training instances, {len(held)} held-out instances")

    results = {}
    for n_layers in args.layers:
        cfg = EncoderConfig(d_h=32, m=4, n_layers=n_layers, d_ff=128, vocab_size=len(vocab))
        model = ModelParams.init(cfg, seed=0)
        tc = TrainConfig(batch_size=8, total_steps=args.steps, peak_lr=args.lr, seed=0)
        t0 = time.time()
        model, trace, _ = train_loop(train, model, tc, str(work / f"model_{n_layers}l.ckpt"))
        write_trace_csv(work / f"trace_{n_layers}l.csv", trace)
        print(f"[{n_layers} layers] {args.steps} steps in {time.time() - t0:.0f}s, "
              f"final loss {trace[-1].loss:.4f}")

        preds = predict_instances(held, model, vocab)
        report = evaluate([p.to_json() for p in preds], [gold_by_id[p.example_id] for p in preds])
        results[n_layers] = report
        print(report.format_table())
        with open(work / f"report_{n_layers}l.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2)

    print("\nlayer study (held-out):")
    for n_layers, report in sorted(results.items()):
        g = report.grains
        print(f"  {n_layers} layers: long F1 {g['long'].f1:.3f}, short F1 {g['short'].f1:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
