"""Four-granularity document graph with typed, position-bucketed edges.

Node layout is one contiguous block per level: tokens, then sentences,
then paragraphs, then the single document node. The [CLS] token doubles
as sentence 0 and paragraph 0 (the null pseudo-candidate). Cross-level
edges make the document node a hub, so any two nodes are within two hops.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .preprocess import TrainingInstance


class NodeType(IntEnum):
    TOKEN = 0
    SENTENCE = 1
    PARAGRAPH = 2
    DOCUMENT = 3


# Directed cross-level edge families (finer level, coarser level, upward?).
# Upward means finer -> coarser; each family exists in both directions.
EDGE_FAMILIES: list[tuple[NodeType, NodeType, bool]] = [
    (NodeType.TOKEN, NodeType.SENTENCE, True),
    (NodeType.TOKEN, NodeType.SENTENCE, False),
    (NodeType.SENTENCE, NodeType.PARAGRAPH, True),
    (NodeType.SENTENCE, NodeType.PARAGRAPH, False),
    (NodeType.PARAGRAPH, NodeType.DOCUMENT, True),
    (NodeType.PARAGRAPH, NodeType.DOCUMENT, False),
    (NodeType.TOKEN, NodeType.PARAGRAPH, True),
    (NodeType.TOKEN, NodeType.PARAGRAPH, False),
    (NodeType.TOKEN, NodeType.DOCUMENT, True),
    (NodeType.TOKEN, NodeType.DOCUMENT, False),
    (NodeType.SENTENCE, NodeType.DOCUMENT, True),
    (NodeType.SENTENCE, NodeType.DOCUMENT, False),
]

SELF_BUCKET = 0  # integration-pass bucket reserved for self-loops


@dataclass
class ClipConfig:
    """Relative-position clipping constants (bucket table sizes)."""

    token_clip: int = 16    # same-level token offsets in [-k, k]
    sent_clip: int = 8
    par_clip: int = 8
    cross_clip: int = 32    # ordinal of the finer node inside its container

    def integration_buckets(self) -> int:
        return 1 + len(EDGE_FAMILIES) * (self.cross_clip + 1)

    def level_buckets(self, level: NodeType) -> int:
        k = {
            NodeType.TOKEN: self.token_clip,
            NodeType.SENTENCE: self.sent_clip,
            NodeType.PARAGRAPH: self.par_clip,
        }[level]
        return 2 * k + 1


def same_level_bucket(i: int, j: int, clip: int) -> int:
    """clip(j - i, -k, k) + k; bucket k is the zero offset / self pair."""
    return int(np.clip(j - i, -clip, clip)) + clip


def family_bucket(family: int, ordinal: int, cross_clip: int) -> int:
    return 1 + family * (cross_clip + 1) + min(ordinal, cross_clip)


@dataclass
class HierGraph:
    n_tokens: int
    n_sents: int
    n_pars: int
    token_sent: np.ndarray        # [T] containing sentence per token
    sent_par: np.ndarray          # [S] containing paragraph per sentence
    token_positions: np.ndarray   # [T] instance position per token node
    clips: ClipConfig = field(default_factory=ClipConfig)

    # populated by _finalize
    token_par: np.ndarray = field(init=False)
    integ_mask: np.ndarray = field(init=False)
    integ_buckets: np.ndarray = field(init=False)
    tok_ord: np.ndarray = field(init=False)   # ordinal of token in sentence
    sent_ord: np.ndarray = field(init=False)  # ordinal of sentence in paragraph
    par_ord: np.ndarray = field(init=False)   # ordinal of paragraph in document
    tok_par_ord: np.ndarray = field(init=False)
    level_bucket_mats: dict = field(init=False)

    def __post_init__(self):
        self._finalize()

    # node-id helpers -----------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.n_tokens + self.n_sents + self.n_pars + 1

    def level_slice(self, level: NodeType) -> slice:
        t, s, p = self.n_tokens, self.n_sents, self.n_pars
        return {
            NodeType.TOKEN: slice(0, t),
            NodeType.SENTENCE: slice(t, t + s),
            NodeType.PARAGRAPH: slice(t + s, t + s + p),
            NodeType.DOCUMENT: slice(t + s + p, t + s + p + 1),
        }[level]

    def node_type(self, node: int) -> NodeType:
        for level in NodeType:
            sl = self.level_slice(level)
            if sl.start <= node < sl.stop:
                return level
        raise IndexError(node)

    def _ordinal_in(self, count_per_parent: np.ndarray) -> np.ndarray:
        """Position of each child within its parent (children in id order)."""
        ords = np.zeros(len(count_per_parent), dtype=np.int64)
        seen: dict[int, int] = {}
        for i, parent in enumerate(count_per_parent):
            ords[i] = seen.get(int(parent), 0)
            seen[int(parent)] = ords[i] + 1
        return ords

    def _finalize(self):
        if len(self.token_sent) != self.n_tokens or len(self.sent_par) != self.n_sents:
            raise ValueError("containment arrays do not match node counts")
        if self.n_tokens == 0 or self.n_sents == 0 or self.n_pars == 0:
            raise ValueError("graph requires at least one node per level")
        self.token_par = self.sent_par[self.token_sent]
        self.tok_ord = self._ordinal_in(self.token_sent)
        self.sent_ord = self._ordinal_in(self.sent_par)
        self.par_ord = np.arange(self.n_pars, dtype=np.int64)
        self.tok_par_ord = self._ordinal_in(self.token_par)

        cc = self.clips.cross_clip
        n = self.n_nodes
        mask = np.zeros((n, n), dtype=bool)
        buckets = np.zeros((n, n), dtype=np.int64)
        np.fill_diagonal(mask, True)
        # buckets already 0 == SELF_BUCKET on the diagonal

        t0 = self.level_slice(NodeType.TOKEN).start
        s0 = self.level_slice(NodeType.SENTENCE).start
        p0 = self.level_slice(NodeType.PARAGRAPH).start
        d0 = self.level_slice(NodeType.DOCUMENT).start

        def connect(family: int, fine: np.ndarray, coarse: np.ndarray, ordinal: np.ndarray, up: bool):
            b = np.array([family_bucket(family, int(o), cc) for o in ordinal])
            if up:  # coarse node attends to fine node: edge fine -> coarse
                mask[coarse, fine] = True
                buckets[coarse, fine] = b
            else:
                mask[fine, coarse] = True
                buckets[fine, coarse] = b

        toks = t0 + np.arange(self.n_tokens)
        sents = s0 + np.arange(self.n_sents)
        pars = p0 + np.arange(self.n_pars)
        doc_of = lambda ids: np.full(len(ids), d0)

        pairs = {
            (NodeType.TOKEN, NodeType.SENTENCE): (toks, s0 + self.token_sent, self.tok_ord),
            (NodeType.SENTENCE, NodeType.PARAGRAPH): (sents, p0 + self.sent_par, self.sent_ord),
            (NodeType.PARAGRAPH, NodeType.DOCUMENT): (pars, doc_of(pars), self.par_ord),
            (NodeType.TOKEN, NodeType.PARAGRAPH): (toks, p0 + self.token_par, self.tok_par_ord),
            (NodeType.TOKEN, NodeType.DOCUMENT): (toks, doc_of(toks), np.arange(self.n_tokens)),
            (NodeType.SENTENCE, NodeType.DOCUMENT): (sents, doc_of(sents), np.arange(self.n_sents)),
        }
        for fam, (fine_lv, coarse_lv, up) in enumerate(EDGE_FAMILIES):
            fine, coarse, ordinal = pairs[(fine_lv, coarse_lv)]
            connect(fam, fine, coarse, ordinal, up)

        self.integ_mask = mask
        self.integ_buckets = buckets

        self.level_bucket_mats = {}
        for level, count in (
            (NodeType.TOKEN, self.n_tokens),
            (NodeType.SENTENCE, self.n_sents),
            (NodeType.PARAGRAPH, self.n_pars),
        ):
            k = (self.clips.level_buckets(level) - 1) // 2
            idx = np.arange(count)
            self.level_bucket_mats[level] = (
                np.clip(idx[None, :] - idx[:, None], -k, k) + k
            )

    # averaging matrices for the bottom-up initializer --------------------
    def mean_matrix(self, child_parent: np.ndarray, n_parents: int) -> np.ndarray:
        m = np.zeros((n_parents, len(child_parent)))
        for child, parent in enumerate(child_parent):
            m[parent, child] = 1.0
        deg = m.sum(axis=1, keepdims=True)
        if (deg == 0).any():
            bad = int(np.where(deg[:, 0] == 0)[0][0])
            raise ValueError(f"node with zero children at parent index {bad}")
        return m / deg


def relative_position(graph: HierGraph, i: int, j: int) -> int:
    """Bucket index for the (i, j) node pair (i attends to j)."""
    ti, tj = graph.node_type(i), graph.node_type(j)
    if ti == tj and ti != NodeType.DOCUMENT:
        sl = graph.level_slice(ti)
        k = (graph.clips.level_buckets(ti) - 1) // 2
        return same_level_bucket(i - sl.start, j - sl.start, k)
    if not graph.integ_mask[i, j]:
        raise ValueError(f"no edge between nodes {i} and {j}")
    return int(graph.integ_buckets[i, j])


def build_graph(
    instance: TrainingInstance, sentence_map: np.ndarray | None = None,
    clips: ClipConfig | None = None,
) -> HierGraph:
    """Build the graph for one instance.

    `sentence_map` defaults to the instance's own sentence array. Token
    nodes are the real (non-[PAD]) positions; [CLS] is sentence 0 and
    paragraph 0; paragraph nodes follow the candidate list S in order.
    """
    if sentence_map is None:
        sentence_map = instance.sentences
    positions = np.where(instance.mask)[0]
    sent_of_pos = sentence_map[positions]
    if (sent_of_pos < 0).any():
        bad = int(positions[np.argmax(sent_of_pos < 0)])
        raise ValueError(f"token at position {bad} not covered by any sentence")
    n_sents = int(sent_of_pos.max()) + 1

    # sentence -> paragraph: paragraph p covers span S[p]; sentence 0 is [CLS]'s
    sent_par = np.zeros(n_sents, dtype=np.int64)
    for sent in range(1, n_sents):
        first_pos = int(positions[np.argmax(sent_of_pos == sent)])
        par = 0
        for p, (a, b) in enumerate(instance.spans):
            if p == 0:
                continue
            if a <= first_pos <= b:
                par = p
                break
        sent_par[sent] = par
    return HierGraph(
        n_tokens=len(positions),
        n_sents=n_sents,
        n_pars=len(instance.spans),
        token_sent=sent_of_pos.astype(np.int64),
        sent_par=sent_par,
        token_positions=positions,
        clips=clips or ClipConfig(),
    )


def validate_graph(graph: HierGraph) -> str | None:
    """Check all invariants; return None if OK, else the first violation."""
    if graph.integ_mask.shape != (graph.n_nodes, graph.n_nodes):
        return "adjacency shape does not match node count"
    if not np.diagonal(graph.integ_mask).all():
        bad = int(np.argmin(np.diagonal(graph.integ_mask)))
        return f"missing self-loop at node {bad}"
    sym = graph.integ_mask == graph.integ_mask.T
    if not sym.all():
        i, j = np.argwhere(~sym)[0]
        return f"edge ({i}, {j}) present without its reverse"
    if (graph.token_sent < 0).any() or (graph.token_sent >= graph.n_sents).any():
        return "token containment points outside sentence range"
    if (graph.sent_par < 0).any() or (graph.sent_par >= graph.n_pars).any():
        return "sentence containment points outside paragraph range"
    # containment edges must exist in the adjacency
    s0 = graph.level_slice(NodeType.SENTENCE).start
    p0 = graph.level_slice(NodeType.PARAGRAPH).start
    for tok, sent in enumerate(graph.token_sent):
        if not graph.integ_mask[tok, s0 + sent]:
            return f"containment violation: token {tok} not linked to sentence {sent}"
    for sent, par in enumerate(graph.sent_par):
        if not graph.integ_mask[s0 + sent, p0 + par]:
            return f"containment violation: sentence {sent} not linked to paragraph {par}"
    # two-hop reachability via boolean matrix product
    reach = graph.integ_mask | (graph.integ_mask @ graph.integ_mask)
    if not reach.all():
        i, j = np.argwhere(~reach)[0]
        return f"reachability violation: nodes {i} and {j} are more than 2 hops apart"
    return None


def graph_to_json(graph: HierGraph) -> dict:
    """Debug dump: adjacency with types, containers and buckets."""
    nodes = []
    for node in range(graph.n_nodes):
        level = graph.node_type(node)
        if level == NodeType.TOKEN:
            container = int(graph.token_sent[node])
        elif level == NodeType.SENTENCE:
            container = int(graph.sent_par[node - graph.level_slice(level).start])
        elif level == NodeType.PARAGRAPH:
            container = 0
        else:
            container = -1
        neigh = np.where(graph.integ_mask[node])[0]
        nodes.append(
            {
                "id": node,
                "type": level.name.lower(),
                "container": container,
                "neighbors": [
                    {"id": int(j), "bucket": int(graph.integ_buckets[node, j])}
                    for j in neigh
                ],
            }
        )
    return {"n_nodes": graph.n_nodes, "nodes": nodes}
