"""AMR parsing: node generation by an extended pointer-generator, then
biaffine edges resolved to a spanning arborescence.

Preprocessing makes graphs generable: entity subgraphs collapse to
anonymized placeholder nodes (PERSON.0 style) aligned to token spans,
sense indices are stripped so labels share vocabulary with lemmas, and
the DAG becomes a tree by replicating reentrant nodes once per extra
incoming edge.  The decoder mixes three strategies per step: copy a
source token, copy an already generated node (which is how reentrancy
is rebuilt), or emit from the node vocabulary.  Postprocessing inverts
everything.
"""

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import graphs as G
from .encoder import Linear, Mlp, _LstmDirection
from .ucca import _lstm_step

END_LABEL = "<END>"
UNK_LABEL = "<UNK>"

_ANON = re.compile(r"^[A-Z][A-Z_]*\.\d+$")
_SENSE = re.compile(r"^(.*[^\d-])-(\d{2,3})$")


def strip_sense(label):
    m = _SENSE.match(label)
    return m.group(1) if m else label


def build_sense_table(labels):
    """Most frequent full form per stripped base; ties go alphabetically."""
    counts = {}
    for lab in labels:
        base = strip_sense(lab)
        if base != lab:
            counts.setdefault(base, {})
            counts[base][lab] = counts[base].get(lab, 0) + 1
    return {base: min(c, key=lambda k: (-c[k], k)) for base, c in counts.items()}


def restore_sense(label, table):
    return table.get(label, label)


# ---------------------------------------------------------------------------
# entity anonymization

MONTHS = {
    1: ("January", "Jan"), 2: ("February", "Feb"), 3: ("March", "Mar"),
    4: ("April", "Apr"), 5: ("May", "May"), 6: ("June", "Jun"),
    7: ("July", "Jul"), 8: ("August", "Aug"), 9: ("September", "Sep"),
    10: ("October", "Oct"), 11: ("November", "Nov"), 12: ("December", "Dec"),
}


def _prefix_match(surface, word):
    a, b = surface.lower(), str(word).lower()
    return bool(a) and bool(b) and (a.startswith(b) or b.startswith(a))


def find_token_span(tokens, word_alternatives):
    """Leftmost longest run of tokens matching the word sequence.

    Each element of ``word_alternatives`` is a tuple of acceptable
    surface prefixes (month 11 also answers to November/Nov).  Returns
    (first, last_exclusive) or None.
    """
    best = None
    for s in range(len(tokens)):
        k = 0
        while (k < len(word_alternatives) and s + k < len(tokens)
               and any(_prefix_match(tokens[s + k].surface, w)
                       for w in word_alternatives[k])):
            k += 1
        if k > 0 and (best is None or k > best[0]):
            best = (k, s)
    if best is None:
        return None
    return best[1], best[1] + best[0]


def _with_month_names(key, value):
    alts = [str(value)]
    if key == "month":
        try:
            alts.extend(MONTHS[int(value)])
        except (ValueError, KeyError):
            pass
    return tuple(alts)


def anon_kind(label):
    if label.endswith("-entity"):
        return label[: -len("-entity")].upper().replace("-", "_")
    return label.upper().replace("-", "_")


@dataclass(frozen=True)
class EntityRecord:
    anon_label: str       # e.g. PERSON.0
    head_label: str       # e.g. person, date-entity
    kind: str             # "name" (op subgraph) or "attribute" (-entity node)
    ops: tuple = ()       # name op values, or aligned surfaces at inference
    properties: tuple = ()
    span: tuple = None    # (first, last_exclusive) token indices


@dataclass
class Anonymization:
    graph: G.MrpGraph
    records: tuple
    ne_tags: tuple    # per-token feature: entity kind or "O"
    skipped: tuple    # node ids left unanonymized (no token span found)


def _ordered_ops(props):
    keyed = [(k, v) for k, v in props if re.fullmatch(r"op\d+", k)]
    return tuple(v for _, v in sorted(keyed, key=lambda kv: int(kv[0][2:])))


def anonymize(g, tokens):
    """Collapse entity subgraphs to anonymized nodes aligned to tokens."""
    by_id = g.node_by_id()
    name_child = {}
    for e in g.edges:
        if e.label == "name" and by_id[e.target].label == "name":
            name_child[e.source] = e.target

    records, skipped = [], []
    counters = {}
    replaced = {}      # head node id -> anon label
    removed = set()    # name node ids folded into their head
    ne_tags = ["O"] * len(tokens)

    for n in g.nodes:
        if n.id in name_child:
            kind = anon_kind(n.label)
            ops = _ordered_ops(by_id[name_child[n.id]].properties)
            span = find_token_span(tokens, [(w,) for w in ops])
        elif n.label is not None and n.label.endswith("-entity"):
            kind = anon_kind(n.label)
            props = n.properties
            span = None
            hits = []
            for k, v in props:
                one = find_token_span(tokens, [_with_month_names(k, v)])
                if one is not None:
                    hits.extend(range(one[0], one[1]))
            if hits:
                span = (min(hits), max(hits) + 1)
            ops = ()
        else:
            continue
        if span is None:
            skipped.append(n.id)
            continue
        idx = counters.get(kind, 0)
        counters[kind] = idx + 1
        anon = f"{kind}.{idx}"
        replaced[n.id] = anon
        if n.id in name_child:
            removed.add(name_child[n.id])
            records.append(EntityRecord(anon, n.label, "name", ops=ops, span=span))
        else:
            records.append(EntityRecord(anon, n.label, "attribute",
                                        properties=n.properties, span=span))
        for t in range(span[0], span[1]):
            ne_tags[t] = kind

    nodes = []
    for n in g.nodes:
        if n.id in removed:
            continue
        if n.id in replaced:
            nodes.append(G.MrpNode(n.id, label=replaced[n.id]))
        else:
            nodes.append(n)
    edges = tuple(e for e in g.edges if e.target not in removed and e.source not in removed)
    out = G.replace(g, nodes=tuple(nodes), edges=edges)
    return Anonymization(out, tuple(records), tuple(ne_tags), tuple(skipped))


def build_ne_map(observations):
    """NE tag -> most frequent entity head label, from (tag, head) pairs."""
    counts = {}
    for tag, head in observations:
        counts.setdefault(tag, {})
        counts[tag][head] = counts[tag].get(head, 0) + 1
    return {tag: min(c, key=lambda k: (-c[k], k)) for tag, c in counts.items()}


def records_from_ne(tokens, ne_map):
    """Inference-side records: contiguous NE runs become name entities
    whose ops are the aligned surfaces."""
    records = []
    counters = {}
    i = 0
    while i < len(tokens):
        tag = tokens[i].ne
        if tag == "O" or tag not in ne_map:
            i += 1
            continue
        j = i
        while j < len(tokens) and tokens[j].ne == tag:
            j += 1
        head = ne_map[tag]
        kind = anon_kind(head)
        idx = counters.get(kind, 0)
        counters[kind] = idx + 1
        records.append(EntityRecord(f"{kind}.{idx}", head, "name",
                                    ops=tuple(t.surface for t in tokens[i:j]),
                                    span=(i, j)))
        i = j
    return tuple(records)


def expand_entities(nodes, edges, records_by_label, next_id):
    """Replace anonymized nodes by their original subgraphs in place.

    Returns (nodes, edges, flags); an anonymized-looking label with no
    record is kept verbatim and flagged.
    """
    out_nodes, flags = [], []
    extra_edges = list(edges)
    for n in nodes:
        rec = records_by_label.get(n.label)
        if rec is None:
            if n.label is not None and _ANON.match(n.label):
                flags.append(n.label)
            out_nodes.append(n)
            continue
        if rec.kind == "name":
            out_nodes.append(G.MrpNode(n.id, label=rec.head_label))
            props = tuple((f"op{k + 1}", op) for k, op in enumerate(rec.ops))
            out_nodes.append(G.MrpNode(next_id, label="name", properties=props))
            extra_edges.append(G.MrpEdge(n.id, next_id, "name"))
            next_id += 1
        else:
            out_nodes.append(G.MrpNode(n.id, label=rec.head_label,
                                       properties=rec.properties))
    return out_nodes, extra_edges, flags


# ---------------------------------------------------------------------------
# DAG -> tree

@dataclass(frozen=True)
class TreeNode:
    index: int
    label: str
    origin: int          # node id in the source graph
    parent: int          # tree index; -1 at the root
    edge_label: str = None
    copy_of: int = None  # tree index of the first replica, for leaf copies


@dataclass(frozen=True)
class AmrTree:
    nodes: tuple

    def replicas(self):
        return tuple(n for n in self.nodes if n.copy_of is not None)

    def labels(self):
        return tuple(n.label for n in self.nodes)


def _assert_acyclic(g):
    children = {}
    for e in g.edges:
        children.setdefault(e.source, []).append(e.target)
    color = {}
    def visit(u):
        color[u] = 1
        for v in children.get(u, ()):
            if color.get(v) == 1:
                raise ValueError(f"graph {g.id} has a cycle through node {v}")
            if color.get(v, 0) == 0:
                visit(v)
        color[u] = 2
    for n in g.nodes:
        if color.get(n.id, 0) == 0:
            visit(n.id)


def dag_to_tree(g):
    """Spanning tree by pre-order traversal, replicating reentrant nodes
    once per extra incoming edge; replicas beyond the first are leaves."""
    if len(g.tops) != 1:
        raise ValueError(f"graph {g.id} needs exactly one top, has {len(g.tops)}")
    _assert_acyclic(g)
    by_id = g.node_by_id()
    children = {}
    for e in g.edges:
        children.setdefault(e.source, []).append(e)
    for nid in children:
        children[nid].sort(key=lambda e: (e.label or "",
                                          by_id[e.target].label or "", e.target))

    out = []
    first_idx = {}

    def visit(nid, parent, elabel):
        idx = len(out)
        if nid in first_idx:
            out.append(TreeNode(idx, by_id[nid].label, nid, parent, elabel,
                                copy_of=first_idx[nid]))
            return
        first_idx[nid] = idx
        out.append(TreeNode(idx, by_id[nid].label, nid, parent, elabel))
        for e in children.get(nid, ()):
            visit(e.target, idx, e.label)

    visit(g.tops[0], -1, None)
    if len(first_idx) != len(g.nodes):
        missing = len(g.nodes) - len(first_idx)
        raise ValueError(f"graph {g.id}: {missing} node(s) unreachable from the top")
    return AmrTree(tuple(out))


def replication_count(g):
    """Node count the tree must have: originals plus one replica per
    extra incoming edge."""
    indeg = {}
    for e in g.edges:
        indeg[e.target] = indeg.get(e.target, 0) + 1
    return len(g.nodes) + sum(max(0, k - 1) for k in indeg.values())


# ---------------------------------------------------------------------------
# graph assembly (shared by the gold round trip and decoding)

def resolve_copies(copy_of):
    alias = list(range(len(copy_of)))
    for i, c in enumerate(copy_of):
        if c is not None:
            a = c
            while copy_of[a] is not None:
                a = copy_of[a]
            alias[i] = a
    return alias


def assemble_graph(labels, copy_of, parents, edge_labels, gid, text,
                   records=None, sense_table=None):
    """Merge copies back into reentrancies and emit the flavor-2 graph.

    ``parents[i]`` is the position of node i's head (-1 for the root);
    position 0 is always the top.  Entity expansion and sense
    restoration run when their tables are given.
    """
    alias = resolve_copies(copy_of)
    order = [i for i in range(len(labels)) if alias[i] == i]
    ids = {pos: k for k, pos in enumerate(order)}
    table = sense_table or {}
    nodes = [G.MrpNode(ids[pos], label=restore_sense(labels[pos], table))
             for pos in order]
    edges = []
    for i, p in enumerate(parents):
        if p < 0:
            continue
        edges.append(G.MrpEdge(ids[alias[p]], ids[alias[i]], edge_labels[i]))

    flags = []
    if records is not None:
        by_label = {r.anon_label: r for r in records}
        nodes, edges, flags = expand_entities(nodes, edges, by_label, len(nodes))

    graph = G.MrpGraph(id=gid, flavor=2, framework="amr", input=text,
                       tops=(ids[alias[0]],), nodes=tuple(nodes), edges=tuple(edges))
    return graph, tuple(flags)


def tree_round_trip(tree, gid, text, records=None, sense_table=None):
    parents = [n.parent for n in tree.nodes]
    edge_labels = [n.edge_label for n in tree.nodes]
    copy_of = [n.copy_of for n in tree.nodes]
    return assemble_graph(tree.labels(), copy_of, parents, edge_labels,
                          gid, text, records=records, sense_table=sense_table)


# ---------------------------------------------------------------------------
# decoder vocabulary and node features

class DecoderVocab:
    """Node-label inventory; index 0 terminates generation."""

    def __init__(self, labels):
        seen = [END_LABEL, UNK_LABEL]
        for lab in labels:
            if lab not in seen:
                seen.append(lab)
        self.labels = tuple(seen)
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def index(self, label):
        return self._index.get(label, self._index[UNK_LABEL])

    @property
    def end_index(self):
        return 0


def node_feature(encoder, label, pos=None):
    """Previous-node input through the shared feature tables: lemma slot
    holds the label, POS only for source-copied nodes, static vector
    from the label."""
    v = encoder.vocab
    lemma = ad.rows(encoder.lemma_emb, [v.lemma_id(label)])
    if pos is None:
        pos_vec = ad.Tensor(np.zeros((1, encoder.config.pos_dim)))
    else:
        pos_vec = ad.rows(encoder.pos_emb, [v.pos_id(pos)])
    static_h = encoder.static_mlp(ad.Tensor(encoder.static.matrix([label])))
    return ad.concat([lemma, pos_vec, static_h], axis=1)


def node_feature_width(encoder):
    return (encoder.config.lemma_dim + encoder.config.pos_dim
            + encoder.config.static_mlp)


# ---------------------------------------------------------------------------
# extended pointer-generator

class AmrDecoder:
    """One LSTM step per node with a three-way mixture output.

    The mixture concatenates (source-copy over tokens, decoder-copy
    over generated nodes, vocabulary) weighted by a masked softmax
    switch; the decoder-copy segment is masked while empty.
    """

    def __init__(self, params, name, enc_hidden, feat_width, hidden, n_vocab,
                 rng, att_dim=64, layers=1, dropout=0.0):
        self.hidden = hidden
        self.feat_width = feat_width
        self.n_layers = layers
        self.dropout = dropout
        self.init_mlp = Mlp(params, f"{name}.init", 4 * enc_hidden,
                            feat_width + 2 * hidden * layers, rng)
        self.cells = []
        width = feat_width
        for l in range(layers):
            self.cells.append(_LstmDirection(params, f"{name}.cell{l}", width, hidden, rng))
            width = hidden
        self.src_dec = params.new(f"{name}.src.dec", (hidden, att_dim), rng)
        self.src_enc = params.new(f"{name}.src.enc", (2 * enc_hidden, att_dim), rng)
        self.src_v = params.new(f"{name}.src.v", (att_dim, 1), rng)
        self.hist_dec = params.new(f"{name}.hist.dec", (hidden, att_dim), rng)
        self.hist_enc = params.new(f"{name}.hist.enc", (hidden, att_dim), rng)
        self.hist_v = params.new(f"{name}.hist.v", (att_dim, 1), rng)
        self.vocab_head = Linear(params, f"{name}.vocab", hidden, n_vocab, rng)
        self.switch = Linear(params, f"{name}.switch", hidden, 3, rng)

    def initial(self, finals):
        """Initial input and LSTM state from the top-layer boundary states."""
        f = finals[-1]
        packed = self.init_mlp(ad.concat([f.h_fwd, f.h_bwd, f.c_fwd, f.c_bwd], axis=1))
        w = self.hidden * self.n_layers
        x0, h, c = ad.split(packed, [self.feat_width, w, w], axis=1)
        return x0, h, c

    def top(self, h):
        """Top-layer slice of a stacked hidden state; identity when flat."""
        if self.n_layers == 1:
            return h
        return ad.split(h, [self.hidden] * self.n_layers, axis=1)[-1]

    def _attend(self, h, keys, w_dec, w_enc, v):
        mixed = ad.tanh(ad.add(ad.matmul(h, w_dec), ad.matmul(keys, w_enc)))
        return ad.transpose(ad.matmul(mixed, v))  # (1, n_keys)

    def step(self, x, h, c, token_states, history, train=False, rng=None):
        """Advance one node; returns (h, c, p, source attention).

        ``token_states`` excludes the <ROOT> row; ``history`` is the list
        of previous top-layer decoder states (may be empty).  With
        stacked cells h and c hold all layers side by side; the mixture
        reads only the top layer.
        """
        if self.n_layers == 1:
            hs, cs = [h], [c]
        else:
            hs = ad.split(h, [self.hidden] * self.n_layers, axis=1)
            cs = ad.split(c, [self.hidden] * self.n_layers, axis=1)
        cur = x
        new_h, new_c = [], []
        for l, cell in enumerate(self.cells):
            if l > 0 and train and self.dropout > 0.0:
                cur = ad.dropout(cur, self.dropout, rng)
            hl, cl = _lstm_step(cell, cur, hs[l], cs[l])
            new_h.append(hl)
            new_c.append(cl)
            cur = hl
        h2 = new_h[0] if self.n_layers == 1 else ad.concat(new_h, axis=1)
        c2 = new_c[0] if self.n_layers == 1 else ad.concat(new_c, axis=1)
        hx = new_h[-1]
        a_src = ad.softmax(self._attend(hx, token_states, self.src_dec,
                                        self.src_enc, self.src_v), axis=-1)
        vocab_p = ad.softmax(self.vocab_head(hx), axis=-1)
        gate_logits = self.switch(hx)
        if history:
            hist = ad.concat(history, axis=0)
            a_hist = ad.softmax(self._attend(hx, hist, self.hist_dec,
                                             self.hist_enc, self.hist_v), axis=-1)
        else:
            a_hist = None
            gate_logits = ad.add(gate_logits,
                                 ad.Tensor(np.array([[0.0, -1e30, 0.0]])))
        gate = ad.softmax(gate_logits, axis=-1)
        g_src, g_hist, g_voc = ad.split(gate, [1, 1, 1], axis=1)
        parts = [ad.mul(a_src, g_src)]
        if a_hist is not None:
            parts.append(ad.mul(a_hist, g_hist))
        parts.append(ad.mul(vocab_p, g_voc))
        return h2, c2, ad.concat(parts, axis=1), a_src


@dataclass
class AmrContext:
    """Everything a decoding run needs for one sentence."""
    encoder: object
    decoder: AmrDecoder
    vocab: DecoderVocab
    token_states: ad.Tensor   # (L, 2H), token rows of the encoder output
    finals: list
    lemmas: tuple
    xpos: tuple


@dataclass
class GoldSequence:
    labels: tuple      # node labels in generation order (END excluded)
    copy_of: tuple     # tree index of the first replica, else None
    src_token: tuple   # copied source position, else None
    targets: tuple     # mixture index per step, END step included


def gold_sequence(tree, ctx):
    """Generation targets with the priority decoder-copy > source-copy >
    vocabulary; the END step closes every sequence."""
    L = len(ctx.lemmas)
    labels, copy_of, src_token, targets = [], [], [], []
    first_lemma = {}
    for j, lemma in enumerate(ctx.lemmas):
        first_lemma.setdefault(lemma, j)
    for i, node in enumerate(tree.nodes):
        labels.append(node.label)
        copy_of.append(node.copy_of)
        if node.copy_of is not None:
            src_token.append(None)
            targets.append(L + node.copy_of)
        elif node.label in first_lemma:
            j = first_lemma[node.label]
            src_token.append(j)
            targets.append(j)
        else:
            src_token.append(None)
            targets.append(L + i + ctx.vocab.index(node.label))
    targets.append(L + len(tree.nodes) + ctx.vocab.end_index)
    return GoldSequence(tuple(labels), tuple(copy_of), tuple(src_token),
                        tuple(targets))


def run_teacher_forced(ctx, gold, train=False, rng=None):
    """Mixture rows, source attentions and node states under gold inputs."""
    x, h, c = ctx.decoder.initial(ctx.finals)
    ps, attns, states, history = [], [], [], []
    n = len(gold.labels)
    for i in range(n + 1):
        h, c, p, a_src = ctx.decoder.step(x, h, c, ctx.token_states, history,
                                          train=train, rng=rng)
        ps.append(p)
        attns.append(a_src)
        if i == n:
            break
        states.append(ctx.decoder.top(h))
        history.append(ctx.decoder.top(h))
        pos = None
        if gold.src_token[i] is not None:
            pos = ctx.xpos[gold.src_token[i]]
        x = node_feature(ctx.encoder, gold.labels[i], pos)
    return ps, attns, states


def decoder_loss(ps, targets):
    total = ad.Tensor(0.0)
    for p, t in zip(ps, targets):
        total = ad.add(total, ad.nll_of_probs(p, [t]))
    return total


def coverage_loss(attentions):
    """Sum over steps of sum_j min(attention, accumulated coverage)."""
    if not attentions:
        return ad.Tensor(0.0)
    cov = ad.Tensor(np.zeros(attentions[0].shape))
    total = ad.Tensor(0.0)
    for a in attentions:
        total = ad.add(total, ad.reduce_sum(ad.minimum(a, cov)))
        cov = ad.add(cov, a)
    return total


@dataclass(frozen=True)
class AmrLossWeights:
    biaf: float = 0.39
    label: float = 0.395
    cov: float = 0.339

    def __post_init__(self):
        for v in (self.biaf, self.label, self.cov):
            if not 0.0 <= v <= 1.0:
                raise ValueError("loss weights must lie in [0, 1]")
        if self.biaf + self.cov > 1.0 + 1e-12:
            raise ValueError("biaffine and coverage weights exceed the budget")


def amr_loss(edge_loss, label_loss, dec_loss, cov_loss, weights=AmrLossWeights()):
    inner = ad.add(ad.mul(label_loss, weights.label),
                   ad.mul(edge_loss, 1.0 - weights.label))
    total = ad.add(ad.mul(inner, weights.biaf), ad.mul(cov_loss, weights.cov))
    return ad.add(total, ad.mul(dec_loss, 1.0 - weights.biaf - weights.cov))


def amr_edge_targets(tree):
    """Biaffine targets over generated positions; no top row, the first
    position is the root by construction."""
    n = len(tree.nodes)
    target = np.zeros((n, n))
    labeled = []
    for node in tree.nodes:
        if node.parent >= 0:
            target[node.parent, node.index] = 1.0
            labeled.append((node.parent, node.index, node.edge_label))
    return target, labeled


def amr_edge_loss(scores, tree):
    """(edge BCE, label CE) over generated positions.

    Unlike the token frameworks there is no top row to charge: the
    first generated position is the root by construction.
    """
    target, labeled = amr_edge_targets(tree)
    edge = ad.binary_cross_entropy(scores.edge_probs, target)
    if not labeled:
        return edge, ad.Tensor(0.0)
    pairs = [(p, j) for p, j, _ in labeled]
    classes = [scores.labels.index(lab) for _, _, lab in labeled]
    label = ad.cross_entropy_logits(scores.label_logits_at(pairs), classes)
    return edge, label


# ---------------------------------------------------------------------------
# beam search

@dataclass
class AmrGeneration:
    labels: tuple
    kinds: tuple       # "src" | "dec" | "vocab" per node
    copy_of: tuple
    src_token: tuple
    states: list       # decoder state per node
    attentions: list
    log_prob: float
    truncated: bool = False

    @property
    def normalized_score(self):
        return self.log_prob / max(1, len(self.labels) + 1)


@dataclass
class _Hyp:
    labels: tuple = ()
    kinds: tuple = ()
    copy_of: tuple = ()
    src_token: tuple = ()
    states: tuple = ()
    attns: tuple = ()
    log_prob: float = 0.0
    h: object = None
    c: object = None
    x: object = None
    finished: bool = False
    truncated: bool = False


def _to_generation(hyp):
    return AmrGeneration(hyp.labels, hyp.kinds, hyp.copy_of, hyp.src_token,
                         list(hyp.states), list(hyp.attns), hyp.log_prob,
                         truncated=hyp.truncated)


def _decode_index(ctx, idx, labels):
    """Resolve a mixture index to (kind, label, copy_of, src_token, pos)."""
    L = len(ctx.lemmas)
    if idx < L:
        return "src", ctx.lemmas[idx], None, idx, ctx.xpos[idx]
    if idx < L + len(labels):
        return "dec", labels[idx - L], idx - L, None, None
    return "vocab", ctx.vocab.labels[idx - L - len(labels)], None, None, None


def default_cap(n_tokens):
    return max(8, 2 * n_tokens + 2)


def greedy_decode(ctx, cap=None):
    """Argmax rollout; the single-slot beam is exactly this, so it is
    implemented directly rather than left to emerge from pruning."""
    L = len(ctx.lemmas)
    if cap is None:
        cap = default_cap(L)
    x, h, c = ctx.decoder.initial(ctx.finals)
    hyp = _Hyp(h=h, c=c, x=x)
    for step in range(cap + 1):
        h, c, p, a_src = ctx.decoder.step(hyp.x, hyp.h, hyp.c,
                                          ctx.token_states, list(hyp.states))
        row = p.data[0]
        end_at = L + len(hyp.labels) + ctx.vocab.end_index
        order = np.argsort(-row, kind="stable")
        idx = int(order[0])
        if idx == end_at and step == 0:
            idx = int(order[1])  # empty graphs are not a thing
        logp = hyp.log_prob + float(np.log(max(row[idx], 1e-12)))
        if idx == end_at:
            hyp = _Hyp(hyp.labels, hyp.kinds, hyp.copy_of, hyp.src_token,
                       hyp.states, hyp.attns + (a_src,), logp, finished=True)
            return _to_generation(hyp)
        kind, label, copy, src, pos = _decode_index(ctx, idx, hyp.labels)
        hyp = _Hyp(hyp.labels + (label,), hyp.kinds + (kind,),
                   hyp.copy_of + (copy,), hyp.src_token + (src,),
                   hyp.states + (ctx.decoder.top(h),), hyp.attns + (a_src,), logp,
                   h=h, c=c, x=node_feature(ctx.encoder, label, pos))
    hyp.truncated = True
    return _to_generation(hyp)


def beam_search(ctx, width=5, cap=None):
    """Length-normalized beam over the mixture.

    Finished hypotheses accumulate without displacing live ones, so a
    path ending early never cuts exploration short; the best finish by
    normalized score wins at the end.
    """
    if width < 1:
        raise ValueError("beam width must be positive")
    if width == 1:
        return greedy_decode(ctx, cap)
    L = len(ctx.lemmas)
    if cap is None:
        cap = default_cap(L)
    x0, h0, c0 = ctx.decoder.initial(ctx.finals)
    beams = [_Hyp(h=h0, c=c0, x=x0)]
    done = []
    for step in range(cap + 1):
        candidates = []
        for hyp in beams:
            h, c, p, a_src = ctx.decoder.step(hyp.x, hyp.h, hyp.c,
                                              ctx.token_states, list(hyp.states))
            row = p.data[0]
            end_at = L + len(hyp.labels) + ctx.vocab.end_index
            order = np.argsort(-row, kind="stable")[: width + 1]
            for idx in order:
                idx = int(idx)
                logp = hyp.log_prob + float(np.log(max(row[idx], 1e-12)))
                if idx == end_at:
                    if step == 0:
                        continue  # empty graphs are not a thing
                    # node states exclude the closing step
                    done.append(_Hyp(hyp.labels, hyp.kinds, hyp.copy_of,
                                     hyp.src_token, hyp.states,
                                     hyp.attns + (a_src,), logp, finished=True))
                    continue
                kind, label, copy, src, pos = _decode_index(ctx, idx, hyp.labels)
                candidates.append(_Hyp(
                    hyp.labels + (label,), hyp.kinds + (kind,),
                    hyp.copy_of + (copy,), hyp.src_token + (src,),
                    hyp.states + (ctx.decoder.top(h),), hyp.attns + (a_src,), logp,
                    h=h, c=c, x=node_feature(ctx.encoder, label, pos)))
        beams = sorted(candidates, key=lambda c: -c.log_prob)[:width]
        if not beams:
            break
    if not done:
        for hyp in beams:
            hyp.truncated = True
        done = beams
    return _to_generation(max(
        done, key=lambda h: (_to_generation(h).normalized_score,
                             -len(h.labels), tuple(h.labels))))


# ---------------------------------------------------------------------------
# maximum spanning arborescence

def _find_cycle(parents, root):
    n = len(parents)
    color = [0] * n
    for start in range(n):
        if start == root or color[start]:
            continue
        path = []
        u = start
        while u != root and not color[u]:
            color[u] = 1
            path.append(u)
            u = parents[u]
        if u != root and color[u] == 1:
            cyc = [u]
            v = parents[u]
            while v != u:
                cyc.append(v)
                v = parents[v]
            return cyc
        for v in path:
            color[v] = 2
    return None


def chu_liu_edmonds(scores, root=0):
    """Maximum spanning arborescence; returns the parent of each node
    (-1 at the root).  Scores are parent-major: scores[i, j] is edge
    i -> j."""
    n = scores.shape[0]
    parents = np.full(n, -1, dtype=int)
    if n == 1:
        return parents
    s = np.asarray(scores, dtype=float).copy()
    np.fill_diagonal(s, -np.inf)
    s[:, root] = -np.inf
    for j in range(n):
        if j == root:
            continue
        parents[j] = int(np.argmax(s[:, j]))
        if not np.isfinite(s[parents[j], j]):
            raise ValueError("no usable incoming edge; score matrix is degenerate")
    cyc = _find_cycle(parents, root)
    if cyc is None:
        return parents

    in_cycle = set(cyc)
    keep = [v for v in range(n) if v not in in_cycle]
    index = {v: k for k, v in enumerate(keep)}
    super_idx = len(keep)
    m = len(keep) + 1
    s2 = np.full((m, m), -np.inf)
    entry_choice = {}
    exit_choice = {}
    for u in keep:
        for v in keep:
            if u != v:
                s2[index[u], index[v]] = s[u, v]
        gains = [s[u, v] - s[parents[v], v] for v in cyc]
        k = int(np.argmax(gains))
        entry_choice[u] = cyc[k]
        s2[index[u], super_idx] = gains[k]
        outs = [s[v, u] for v in cyc]
        k = int(np.argmax(outs))
        exit_choice[u] = cyc[k]
        s2[super_idx, index[u]] = outs[k]

    # cycle nodes keep their in-cycle parents except where the chosen
    # entry edge breaks the cycle
    sub = chu_liu_edmonds(s2, root=index[root])
    for j2, p2 in enumerate(sub):
        if p2 < 0:
            continue
        if j2 == super_idx:
            u = keep[p2]
            parents[entry_choice[u]] = u
        elif p2 == super_idx:
            parents[keep[j2]] = exit_choice[keep[j2]]
        else:
            parents[keep[j2]] = keep[p2]
    return parents


def arborescence_score(scores, parents, root=0):
    return float(sum(scores[p, j] for j, p in enumerate(parents) if j != root))


def decode_graph(gen, pair_scores, edge_labels, gid, text,
                 records=None, sense_table=None):
    """Arborescence over generated positions, labels by per-edge argmax,
    then copy merging, sense restoration and entity expansion."""
    n = len(gen.labels)
    if n == 0:
        node = G.MrpNode(0, label=UNK_LABEL)
        return G.MrpGraph(id=gid, flavor=2, framework="amr", input=text,
                          tops=(0,), nodes=(node,), edges=()), ("empty",)
    probs = np.clip(pair_scores.edge_probs.data, 1e-9, None)
    parents = chu_liu_edmonds(np.log(probs), root=0)
    label_probs = pair_scores.label_probs()
    chosen = [None] * n
    for j, p in enumerate(parents):
        if p >= 0:
            chosen[j] = edge_labels[int(np.argmax(label_probs[p, j]))]
    return assemble_graph(list(gen.labels), list(gen.copy_of), parents, chosen,
                          gid, text, records=records, sense_table=sense_table)


# ---------------------------------------------------------------------------
# synthetic gold DAGs (harness + corpus)

def sample_dag(rng, gid="a0", n_nodes=None, reentrancy_rate=0.4):
    """Random single-top acyclic graph with AMR-flavored labels."""
    pool = ["want-01", "believe-01", "dog", "cat", "boy", "girl", "run-02",
            "see-01", "house", "big", "city", "visit-01"]
    roles = ["ARG0", "ARG1", "ARG2", "mod", "time", "location"]
    n = int(rng.integers(2, 9)) if n_nodes is None else n_nodes
    labels = [str(rng.choice(pool)) for _ in range(n)]
    edges = []
    for j in range(1, n):
        p = int(rng.integers(0, j))
        edges.append(G.MrpEdge(p, j, str(rng.choice(roles))))
    pairs = {(e.source, e.target) for e in edges}
    for _ in range(int(rng.integers(0, 3))):
        if n < 3 or rng.random() > reentrancy_rate:
            continue
        j = int(rng.integers(1, n))
        i = int(rng.integers(0, j))
        if (i, j) not in pairs:
            pairs.add((i, j))
            edges.append(G.MrpEdge(i, j, str(rng.choice(roles))))
    nodes = tuple(G.MrpNode(k, label=labels[k]) for k in range(n))
    return G.MrpGraph(id=gid, flavor=2, framework="amr",
                      input=" ".join(labels), tops=(0,),
                      nodes=nodes, edges=tuple(edges))
