"""Self-contained verification suites: finite-difference gradient checks
on a micro model, attention-row properties on random graphs, the dense
attention oracle, initializer exactness, two-hop reachability via BFS,
and sweep-vs-grid agreement. Reused by the CLI (`gradcheck`, `selftest`)
and by the acceptance tests.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from . import tensor as T
from .docgraph import ClipConfig, HierGraph, NodeType, build_graph, validate_graph
from .encoder import (
    AttentionTrace,
    EncoderConfig,
    ModelParams,
    encode,
    gat_attention,
    graph_initialize,
)
from .evaluate import GrainRecord, f1_at_threshold, threshold_sweep
from .heads import joint_loss, score_nodes
from .preprocess import AnswerType, TrainingInstance
from .tensor import Tensor, finite_diff_check, precision, record_tape


# ------------------------------------------------------- fixture builders


def micro_config(**overrides) -> EncoderConfig:
    base = dict(
        d_h=8,
        m=2,
        n_layers=1,
        d_ff=8,
        vocab_size=16,
        max_len=24,
        token_clip=2,
        sent_clip=2,
        par_clip=2,
        cross_clip=4,
    )
    base.update(overrides)
    return EncoderConfig(**base)


def micro_instance() -> TrainingInstance:
    """20 real tokens, 2 content candidates, a short answer at (5, 6)."""
    L = 24
    rng = np.random.default_rng(11)
    tokens = np.zeros(L, dtype=np.int64)
    tokens[:20] = rng.integers(4, 16, size=20)
    mask = np.zeros(L, dtype=bool)
    mask[:20] = True
    sentences = np.full(L, -1, dtype=np.int64)
    sentences[0:4] = 0
    sentences[4:8] = 1
    sentences[8:11] = 2
    sentences[11:15] = 3
    sentences[15:19] = 4
    sentences[19] = 0
    return TrainingInstance(
        tokens=tokens,
        mask=mask,
        spans=[(0, 0), (4, 10), (11, 18)],
        long_target=1,
        start=5,
        end=6,
        answer_type=AnswerType.SHORT,
        sentences=sentences,
        example_id="micro",
        fragment_index=0,
        fragment_start=0,
        question_len=2,
        cand_doc_idx=[-1, 0, 1],
    )


def random_instance(rng: np.random.Generator, vocab_size: int = 32, max_len: int = 64) -> TrainingInstance:
    """A structurally valid random instance for property checks."""
    q = int(rng.integers(1, 4))
    n_cands = int(rng.integers(1, 4))
    tokens = [2] + list(rng.integers(4, vocab_size, size=q)) + [3]
    sentences = [0] * (q + 2)
    spans = [(0, 0)]
    cand_doc_idx = [-1]
    sent = 0
    for c in range(n_cands):
        start = len(tokens)
        for _ in range(int(rng.integers(1, 3))):
            sent += 1
            for _ in range(int(rng.integers(1, 5))):
                tokens.append(int(rng.integers(4, vocab_size)))
                sentences.append(sent)
        spans.append((start, len(tokens) - 1))
        cand_doc_idx.append(c)
    tokens.append(3)
    sentences.append(0)
    n = len(tokens)
    if n > max_len:
        raise ValueError("random instance exceeded max_len")
    tok = np.zeros(max_len, dtype=np.int64)
    tok[:n] = tokens
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    sents = np.full(max_len, -1, dtype=np.int64)
    sents[:n] = sentences

    t = AnswerType(int(rng.integers(0, 5)))
    l, s, e = 0, 0, 0
    if t != AnswerType.NO_ANSWER:
        l = int(rng.integers(1, len(spans)))
        if t == AnswerType.SHORT:
            a, b = spans[l]
            s = int(rng.integers(a, b + 1))
            e = int(rng.integers(s, b + 1))
    return TrainingInstance(
        tokens=tok,
        mask=mask,
        spans=spans,
        long_target=l,
        start=s,
        end=e,
        answer_type=t,
        sentences=sents,
        example_id=f"rand{rng.integers(1 << 30)}",
        fragment_index=0,
        fragment_start=0,
        question_len=q,
        cand_doc_idx=cand_doc_idx,
    )


# ------------------------------------------------------------ check suites


def micro_gradcheck(eps: float = 1e-3, seed: int = 1, scale: float = 0.1) -> float:
    """Max relative error between analytic and central-difference
    gradients of the joint loss, on the micro model in extended precision.

    The init scale keeps pre-normalization activations away from the
    high-curvature regime of layer norm, so the O(eps^2) truncation term
    of the central difference stays well under the analytic gradient.
    """
    with precision("extended"):
        cfg = micro_config()
        model = ModelParams.init(cfg, seed=seed, scale=scale)
        inst = micro_instance()
        graph = build_graph(inst, clips=cfg.clips)

        def f():
            states = encode(inst, graph, model)
            scores = score_nodes(states, graph, inst, model)
            return joint_loss(scores, inst.long_target, inst.start, inst.end, inst.answer_type)

        return finite_diff_check(f, model.tensors, eps=eps)


def attention_rows_check(trials: int = 100, seed: int = 0, tol: float = 1e-6) -> bool:
    """Every attention row in every sublayer is a probability vector over
    its neighbor set; masked entries are exactly zero."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        inst = random_instance(rng)
        m = int(rng.choice([1, 2, 4]))
        cfg = micro_config(
            d_h=4 * m,
            m=m,
            d_ff=max(8, 4 * m),
            vocab_size=32,
            max_len=64,
            n_layers=int(rng.integers(1, 3)),
        )
        model = ModelParams.init(cfg, seed=int(rng.integers(1 << 30)))
        graph = build_graph(inst, clips=cfg.clips)
        trace = AttentionTrace()
        encode(inst, graph, model, trace=trace)
        integ_rows = 0
        for rec in trace.records:
            alpha = rec["alpha"]
            if not np.allclose(alpha.sum(axis=1), 1.0, atol=tol):
                return False
            if rec["sublayer"].endswith("integ"):
                integ_rows += 1
                if (alpha[~graph.integ_mask] != 0.0).any():
                    return False
        if integ_rows == 0:
            return False
    return True


def dense_attention_oracle(
    states: np.ndarray, wq, wk, wv, wo, d_z: int
) -> np.ndarray:
    """Independent dense multi-head attention (numpy, no tape)."""
    heads = []
    for q_w, k_w, v_w in zip(wq, wk, wv):
        q = states @ q_w
        k = states @ k_w
        v = states @ v_w
        e = q @ k.T / math.sqrt(d_z)
        e = e - e.max(axis=1, keepdims=True)
        a = np.exp(e)
        a = a / a.sum(axis=1, keepdims=True)
        heads.append(a @ v)
    return np.concatenate(heads, axis=1) @ wo


def dense_oracle_check(trials: int = 20, seed: int = 0, tol: float = 1e-6) -> float:
    """gat_attention with zeroed relational tables vs the dense oracle on
    a fully connected single-level graph. Returns the max abs deviation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        cfg = micro_config(n_layers=1)
        model = ModelParams.init(cfg, seed=int(rng.integers(1 << 30)))
        prefix = "layer0.tok"
        for nm in (f"{prefix}.ak", f"{prefix}.av"):
            model.tensors[nm].data[:] = 0.0
        n = int(rng.integers(2, 9))
        states = rng.normal(size=(n, cfg.d_h))
        idx = np.arange(n)
        buckets = np.clip(idx[None, :] - idx[:, None], -cfg.token_clip, cfg.token_clip) + cfg.token_clip
        out = gat_attention(
            Tensor(states),
            np.ones((n, n), dtype=bool),
            buckets,
            model,
            prefix,
            cfg.clips.level_buckets(NodeType.TOKEN),
        )
        oracle = dense_attention_oracle(
            states,
            [model.tensors[f"{prefix}.h{k}.wq"].data for k in range(cfg.m)],
            [model.tensors[f"{prefix}.h{k}.wk"].data for k in range(cfg.m)],
            [model.tensors[f"{prefix}.h{k}.wv"].data for k in range(cfg.m)],
            model.tensors[f"{prefix}.wo"].data,
            cfg.d_z,
        )
        worst = max(worst, float(np.abs(out.data - oracle).max()))
    return worst


def initializer_check(trials: int = 50, seed: int = 0) -> float:
    """With zero relational/type embeddings every parent state must equal
    the mean of its children. Returns the max abs deviation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        cfg = micro_config()
        model = ModelParams.init(cfg, seed=int(rng.integers(1 << 30)))
        for nm in ("init.rel.sentence", "init.rel.paragraph", "init.rel.document", "init.type"):
            model.tensors[nm].data[:] = 0.0
        inst = random_instance(rng, vocab_size=16, max_len=cfg.max_len)
        graph = build_graph(inst, clips=cfg.clips)
        tok = rng.normal(size=(graph.n_tokens, cfg.d_h))
        states = graph_initialize(graph, Tensor(tok), model).data
        t, s, p = graph.n_tokens, graph.n_sents, graph.n_pars
        for sent in range(s):
            children = tok[graph.token_sent == sent]
            worst = max(worst, float(np.abs(states[t + sent] - children.mean(axis=0)).max()))
        sent_states = states[t : t + s]
        for par in range(p):
            children = sent_states[graph.sent_par == par]
            worst = max(worst, float(np.abs(states[t + s + par] - children.mean(axis=0)).max()))
        worst = max(
            worst, float(np.abs(states[-1] - states[t + s : t + s + p].mean(axis=0)).max())
        )
    return worst


def bfs_distances(adj: np.ndarray, source: int) -> np.ndarray:
    n = adj.shape[0]
    dist = np.full(n, -1)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in np.where(adj[u])[0]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def reachability_check(trials: int = 50, seed: int = 0) -> bool:
    """Exhaustive BFS: every node pair within two hops on random graphs."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        inst = random_instance(rng)
        graph = build_graph(inst)
        if validate_graph(graph) is not None:
            return False
        adj = graph.integ_mask & ~np.eye(graph.n_nodes, dtype=bool)
        for src in range(graph.n_nodes):
            dist = bfs_distances(adj, src)
            if (dist < 0).any() or dist.max() > 2:
                return False
    return True


def sweep_grid_check(trials: int = 200, seed: int = 0, grid_step: float = 1e-4) -> bool:
    """Sweep best-F1 must equal brute force over a dense threshold grid."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        n = int(rng.integers(2, 20))
        records = [
            GrainRecord(
                example_id=str(i),
                gold_has=bool(rng.random() < 0.7),
                correct=bool(rng.random() < 0.6),
                score=float(np.round(rng.normal(), 3)),
            )
            for i in range(n)
        ]
        for r in records:
            r.correct = r.correct and r.gold_has
        sweep = threshold_sweep(records)
        scores = [r.score for r in records]
        lo, hi = min(scores) - 2 * grid_step, max(scores) + 2 * grid_step
        grid = np.arange(lo, hi, grid_step)
        grid_best = max(f1_at_threshold(records, float(tau))[2] for tau in grid)
        if abs(sweep.f1 - grid_best) > 1e-12:
            return False
    return True


def selftest(verbose: bool = True) -> bool:
    """Run every property suite; print one line per suite."""
    results = []
    err = dense_oracle_check()
    results.append(("dense attention oracle (<= 1e-6)", err <= 1e-6, f"max dev {err:.2e}"))
    err = initializer_check()
    results.append(("initializer mean exactness (<= 1e-7)", err <= 1e-7, f"max dev {err:.2e}"))
    ok = attention_rows_check(trials=25)
    results.append(("attention rows are probability vectors", ok, ""))
    ok = reachability_check(trials=20)
    results.append(("two-hop reachability", ok, ""))
    ok = sweep_grid_check(trials=50)
    results.append(("threshold sweep equals grid search", ok, ""))
    all_ok = True
    for name, ok, detail in results:
        all_ok &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}".rstrip())
    return all_ok
