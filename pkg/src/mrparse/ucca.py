"""UCCA parsing as pointing plus biaffine edge prediction.

Non-terminal generation is a pointing problem: each non-terminal is
inserted immediately left of the starting token of its yield span, so a
graph serializes to a pointer sequence terminated by the <ROOT>
position.  Compound terminals are flattened with virtual CT edges from
the leftmost constituent token.  A pointer network with additive
attention emits the sequence; the interleaved states, positional
encodings and an extra biLSTM feed the shared biaffine scorers (primary
edges + labels, and an independent remote-edge scorer).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import graphs as G
from .encoder import Mlp, _LstmDirection

CT_LABEL = "CT"
REMOTE_ATTR = "remote"


def is_remote(edge):
    return bool(edge.attribute_map().get(REMOTE_ATTR, False))


# ---------------------------------------------------------------------------
# serialization

ROOT_SLOT = ("root",)


def build_slots(pointers, n_tokens):
    """Interleave non-terminal slots into the token sequence.

    Pointer k (1-based token position; 0 terminates) inserts slot
    ("nt", k) immediately left of the pointed token, after all earlier
    insertions, which puts outer nodes before inner ones at a shared
    position.
    """
    slots = [ROOT_SLOT] + [("tok", j) for j in range(n_tokens)]
    for k, p in enumerate(pointers):
        if p == 0:
            break
        if not 1 <= p <= n_tokens:
            raise ValueError(f"pointer {p} outside 1..{n_tokens}")
        slots.insert(slots.index(("tok", p - 1)), ("nt", k))
    return slots


@dataclass(frozen=True)
class UccaSerialization:
    pointers: tuple        # token positions, 1-based, trailing 0 terminator
    slots: tuple
    slot_of_node: tuple    # (node id, slot index) pairs
    edges: tuple           # (parent slot, child slot, label) incl CT
    tops: tuple            # slot indices
    remotes: tuple         # (parent slot, child slot)

    def slot_map(self):
        return dict(self.slot_of_node)


def serialize_ucca(g, tokens):
    """Gold graph -> pointer problem, or None when it cannot be aligned.

    Returns None for graphs with tokenization discrepancies, non-tree
    primary structure, or non-terminals without terminal descendants;
    such graphs are dropped from training.
    """
    align = G.align_ucca_tokens(g, tokens)
    if align is None:
        return None
    terminals = set(align)
    primary = [e for e in g.edges if not is_remote(e) and e.label != CT_LABEL]

    children = {}
    parents = {}
    for e in primary:
        children.setdefault(e.source, []).append(e.target)
        if e.target in parents:
            return None  # reentrant primary structure
        parents[e.target] = e.source

    nonterms = [n.id for n in g.nodes if n.id not in terminals]

    def yield_start(nid):
        best = None
        seen = set()
        stack = [nid]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            if cur in terminals:
                lo = align[cur][0]
                best = lo if best is None else min(best, lo)
            stack.extend(children.get(cur, ()))
        return best

    depth = {t: 0 for t in g.tops}
    frontier = list(g.tops)
    while frontier:
        nxt = []
        for nid in frontier:
            for ch in children.get(nid, ()):
                if ch not in depth:
                    depth[ch] = depth[nid] + 1
                    nxt.append(ch)
        frontier = nxt

    starts = {}
    for nid in nonterms:
        s = yield_start(nid)
        if s is None or nid not in depth:
            return None
        starts[nid] = s

    order = sorted(nonterms, key=lambda nid: (starts[nid], depth[nid]))
    pointers = tuple(starts[nid] + 1 for nid in order) + (0,)
    slots = build_slots(pointers, len(tokens))

    slot_of = {}
    for k, nid in enumerate(order):
        slot_of[nid] = slots.index(("nt", k))
    for nid, (lo, _) in align.items():
        slot_of[nid] = slots.index(("tok", lo))

    edges = [(slot_of[e.source], slot_of[e.target], e.label) for e in primary]
    for nid, (lo, hi) in align.items():
        head = slots.index(("tok", lo))
        for j in range(lo + 1, hi):
            edges.append((head, slots.index(("tok", j)), CT_LABEL))

    remotes = tuple((slot_of[e.source], slot_of[e.target])
                    for e in g.edges if is_remote(e))
    return UccaSerialization(
        pointers=pointers, slots=tuple(slots),
        slot_of_node=tuple(sorted(slot_of.items())),
        edges=tuple(edges), tops=tuple(slot_of[t] for t in g.tops),
        remotes=remotes)


def deserialize_ucca(pointers, edges, tops, remotes, tokens, text, gid):
    """Pointer sequence + slot-level decisions -> flavor-1 graph.

    CT chains merge into one terminal anchored over the full span; slots
    with no primary incidence are dropped; node ids follow slot order.
    """
    slots = build_slots(pointers, len(tokens))

    head = {}
    for i, j, label in edges:
        if label == CT_LABEL and slots[i][0] == "tok" and slots[j][0] == "tok":
            if j not in head or i < head[j]:
                head[j] = i

    def resolve(s):
        seen = set()
        while s in head and s not in seen:
            seen.add(s)
            s = head[s]
        return s

    members = {}
    for j in head:
        members.setdefault(resolve(j), set()).add(j)

    primary = []
    for i, j, label in edges:
        if label == CT_LABEL:
            continue  # consumed by merging; CT never surfaces in output
        ri, rj = resolve(i), resolve(j)
        if ri != rj and (ri, rj, label) not in primary:
            primary.append((ri, rj, label))
    top_slots = sorted({resolve(t) for t in tops})

    incident = set(top_slots)
    for i, j, _ in primary:
        incident.update((i, j))
    kept = [s for s in range(1, len(slots))
            if s in incident and s not in head]

    ids = {s: k for k, s in enumerate(kept)}
    nodes = []
    for s in kept:
        kind = slots[s][0]
        if kind == "nt":
            nodes.append(G.MrpNode(ids[s]))
        else:
            toks = sorted({slots[m][1] for m in members.get(s, ())} | {slots[s][1]})
            anchor = G.Anchor(tokens[toks[0]].anchor.start, tokens[toks[-1]].anchor.end)
            nodes.append(G.MrpNode(ids[s], anchors=(anchor,)))

    out_edges = [G.MrpEdge(ids[i], ids[j], label)
                 for i, j, label in primary if i in ids and j in ids]
    seen_remote = set()
    for i, j in remotes:
        ri, rj = resolve(i), resolve(j)
        if ri in ids and rj in ids and ri != rj and (ri, rj) not in seen_remote:
            seen_remote.add((ri, rj))
            out_edges.append(G.MrpEdge(ids[ri], ids[rj], None,
                                       attributes=((REMOTE_ATTR, True),)))

    return G.MrpGraph(id=gid, flavor=1, framework="ucca", input=text,
                      tops=tuple(ids[s] for s in top_slots if s in ids),
                      nodes=tuple(nodes), edges=tuple(out_edges))


def gold_matrices(ser, n_slots):
    """Targets for the biaffine scorers: edge matrix (row 0 = tops),
    labeled cells, and the remote matrix."""
    edge_t = np.zeros((n_slots, n_slots))
    labeled = []
    for i, j, label in ser.edges:
        edge_t[i, j] = 1.0
        labeled.append((i, j, label))
    for t in ser.tops:
        edge_t[0, t] = 1.0
    remote_t = np.zeros((n_slots, n_slots))
    for i, j in ser.remotes:
        remote_t[i, j] = 1.0
    return edge_t, labeled, remote_t


# ---------------------------------------------------------------------------
# pointer network

def sinusoidal_positions(n, dim):
    """The standard fixed position signal: sin/cos pairs over geometric
    wavelengths."""
    pos = np.arange(n)[:, None]
    idx = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, 2 * (idx // 2) / dim)
    enc = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return enc


def _lstm_step(cell, x, h, c):
    hsz = cell.hidden
    z = ad.add(ad.add(ad.matmul(x, cell.wx), ad.matmul(h, cell.wh)), cell.b)
    gi, gf, gg, go = ad.split(z, [hsz] * 4, axis=1)
    c2 = ad.add(ad.mul(ad.sigmoid(gf), c), ad.mul(ad.sigmoid(gi), ad.tanh(gg)))
    h2 = ad.mul(ad.sigmoid(go), ad.tanh(c2))
    return h2, c2


class UccaDecoder:
    """Autoregressive pointer over encoder positions.

    The LSTM state starts from the concatenated final states of the top
    ``use_layers`` encoder layers; additive attention scores every
    position including <ROOT>, whose selection terminates decoding.
    """

    def __init__(self, params, name, enc_hidden, use_layers, rng,
                 att_dim=64, bullet_dim=32):
        self.use_layers = use_layers
        self.hidden = 2 * enc_hidden * use_layers
        self.cell = _LstmDirection(params, f"{name}.cell", 2 * enc_hidden,
                                   self.hidden, rng)
        self.w_dec = params.new(f"{name}.att.dec", (self.hidden, att_dim), rng)
        self.w_enc = params.new(f"{name}.att.enc", (2 * enc_hidden, att_dim), rng)
        self.v = params.new(f"{name}.att.v", (att_dim, 1), rng)
        self.r = params.new(f"{name}.r", (1, bullet_dim), rng)
        self.bullet_mlp = Mlp(params, f"{name}.bullet", bullet_dim, 2 * enc_hidden, rng)

    def init_state(self, finals):
        use = finals[-self.use_layers:]
        h = ad.concat([f.h_fwd for f in use] + [f.h_bwd for f in use], axis=1)
        c = ad.concat([f.c_fwd for f in use] + [f.c_bwd for f in use], axis=1)
        return h, c

    def attend(self, h_dec, states):
        mixed = ad.tanh(ad.add(ad.matmul(h_dec, self.w_dec),
                               ad.matmul(states, self.w_enc)))
        return ad.transpose(ad.matmul(mixed, self.v))  # (1, n_positions)

    def bullet(self):
        return self.bullet_mlp(self.r)


@dataclass
class PointerDecode:
    pointers: tuple        # includes the 0 terminator unless truncated
    logits: list           # one (1, n_positions) Tensor per step
    fed_positions: tuple   # encoder position fed at each step
    truncated: bool = False


def pointer_decode(enc_out, decoder, gold_pointers=None, cap=None):
    """Run the decoder; teacher-forced when gold_pointers is given.

    Free-running mode stops on <ROOT> or after ``cap`` steps (default
    twice the token count); hitting the cap sets the truncated flag.
    """
    states = enc_out.top
    n_pos = states.shape[0]
    if cap is None:
        cap = max(1, 2 * (n_pos - 1))
    h, c = decoder.init_state(enc_out.finals)
    x_pos = 0  # first input is the <ROOT> encoder state
    logits, pointers, fed = [], [], []
    step = 0
    while True:
        fed.append(x_pos)
        h, c = _lstm_step(decoder.cell, ad.rows(states, [x_pos]), h, c)
        a = decoder.attend(h, states)
        logits.append(a)
        if gold_pointers is not None:
            p = gold_pointers[step]
        else:
            p = int(np.argmax(a.data[0]))
        pointers.append(p)
        step += 1
        if gold_pointers is not None:
            if step == len(gold_pointers):
                return PointerDecode(tuple(pointers), logits, tuple(fed))
        elif p == 0:
            return PointerDecode(tuple(pointers), logits, tuple(fed))
        elif step >= cap:
            return PointerDecode(tuple(pointers), logits, tuple(fed), truncated=True)
        x_pos = p


def pointer_loss(logits, gold_pointers):
    """Summed cross-entropy of each attention row against the gold pointer."""
    total = ad.Tensor(0.0)
    for row, p in zip(logits, gold_pointers):
        total = ad.add(total, ad.cross_entropy_logits(row, [p]))
    return total


# ---------------------------------------------------------------------------
# node states

@dataclass
class NodeStates:
    slots: tuple
    pre_positional: ad.Tensor  # interleaved encoder/pointer rows
    states: ad.Tensor          # after positional encoding + extra biLSTM


def build_node_states(enc_out, pointers, decoder, extra_lstm, pe_dim=16,
                      train=False, rng=None):
    states = enc_out.top
    slots = build_slots(pointers, states.shape[0] - 1)
    bullet = decoder.bullet()
    rows = []
    for slot in slots:
        if slot[0] == "nt":
            rows.append(bullet)
        elif slot[0] == "tok":
            rows.append(ad.rows(states, [slot[1] + 1]))
        else:
            rows.append(ad.rows(states, [0]))
    pre = ad.concat(rows, axis=0)
    pe = ad.Tensor(sinusoidal_positions(len(slots), pe_dim))
    with_pos = ad.concat([pre, pe], axis=1)
    out = extra_lstm.run(with_pos, train=train, rng=rng)
    return NodeStates(slots=tuple(slots), pre_positional=pre, states=out.top)


# ---------------------------------------------------------------------------
# loss and ensembling

@dataclass(frozen=True)
class UccaLossWeights:
    edge: float = 0.3
    label: float = 0.3
    remote: float = 0.2
    dec: float = 0.2


def ucca_loss(edge_loss, label_loss, remote_loss, dec_loss,
              weights=UccaLossWeights()):
    total = ad.mul(edge_loss, weights.edge)
    total = ad.add(total, ad.mul(label_loss, weights.label))
    total = ad.add(total, ad.mul(remote_loss, weights.remote))
    return ad.add(total, ad.mul(dec_loss, weights.dec))


@dataclass
class UccaPrediction:
    pointers: tuple
    edge_probs: np.ndarray    # (n_slots, n_slots)
    label_probs: np.ndarray   # (n_slots, n_slots, n_labels)
    remote_probs: np.ndarray  # (n_slots, n_slots)


def decode_graph(pred, labels, tokens, text, gid):
    """Threshold the matrices and rebuild the graph.

    Primary edges are strictly above 0.5 off the diagonal, row 0 marks
    tops; the remote matrix is thresholded independently and cannot add
    or remove primary structure.
    """
    n = pred.edge_probs.shape[0]
    edges = []
    for i in range(1, n):
        for j in range(1, n):
            if i != j and pred.edge_probs[i, j] > 0.5:
                edges.append((i, j, labels[int(np.argmax(pred.label_probs[i, j]))]))
    tops = [j for j in range(1, n) if pred.edge_probs[0, j] > 0.5]
    remotes = [(i, j) for i in range(1, n) for j in range(1, n)
               if i != j and pred.remote_probs[i, j] > 0.5]
    return deserialize_ucca(pred.pointers, edges, tops, remotes, tokens, text, gid)


def voting_ensemble(members):
    """Two-step combination: majority pointer sequence first (ties break
    toward the lexicographically smaller sequence), then the matrices of
    the winning members are averaged."""
    if not members:
        raise ValueError("voting_ensemble needs at least one member")
    counts = {}
    for m in members:
        counts[m.pointers] = counts.get(m.pointers, 0) + 1
    top_count = max(counts.values())
    best = min(p for p, c in counts.items() if c == top_count)
    chosen = [m for m in members if m.pointers == best]
    return UccaPrediction(
        pointers=best,
        edge_probs=np.mean([m.edge_probs for m in chosen], axis=0),
        label_probs=np.mean([m.label_probs for m in chosen], axis=0),
        remote_probs=np.mean([m.remote_probs for m in chosen], axis=0))


# ---------------------------------------------------------------------------
# synthetic gold graphs (round-trip harness + desk-scale corpora)

def sample_graph(rng, tokens, gid="u0", text=None, remote_rate=0.3):
    """Random gold-like UCCA tree over the given tokens.

    Terminals may merge adjacent tokens into compounds; every
    non-terminal dominates at least one terminal; the single top is a
    non-terminal covering the whole sentence.  Used by the round-trip
    harness and the synthetic corpus builder.
    """
    if text is None:
        text = " ".join(t.surface for t in tokens)
    edge_labels = ["A", "C", "D", "E", "H", "L", "P", "U"]

    spans = []
    i = 0
    while i < len(tokens):
        size = 1
        if len(tokens) - i >= 2 and rng.random() < 0.15:
            size = int(rng.integers(2, min(4, len(tokens) - i + 1)))
        spans.append((i, i + size))
        i += size

    nodes = []
    edges = []

    def new_node(**kw):
        nid = len(nodes)
        nodes.append(G.MrpNode(nid, **kw))
        return nid

    def grow(lo, hi, budget):
        # builds a subtree over spans[lo:hi], returns its root node id
        if hi - lo == 1 and (budget <= 0 or rng.random() < 0.5):
            a, b = spans[lo]
            return new_node(anchors=(G.Anchor(tokens[a].anchor.start,
                                              tokens[b - 1].anchor.end),))
        nid = new_node()
        n_children = int(rng.integers(1, min(4, hi - lo) + 1))
        cuts = sorted(rng.choice(np.arange(lo + 1, hi), size=n_children - 1,
                                 replace=False)) if n_children > 1 else []
        bounds = [lo] + [int(c) for c in cuts] + [hi]
        for a, b in zip(bounds[:-1], bounds[1:]):
            child = grow(a, b, budget - 1)
            edges.append(G.MrpEdge(nid, child, str(rng.choice(edge_labels))))
        return nid

    root = grow(0, len(spans), budget=3)
    if nodes[root].anchors:  # ensure a non-terminal top
        top = new_node()
        edges.append(G.MrpEdge(top, root, "H"))
        root = top

    nonterms = [n.id for n in nodes if not n.anchors]
    if len(nodes) > 1 and rng.random() < remote_rate:
        src = int(rng.choice(nonterms))
        existing = {(e.source, e.target) for e in edges}
        candidates = [n.id for n in nodes
                      if n.id != src and (src, n.id) not in existing]
        if candidates:
            tgt = int(rng.choice(candidates))
            edges.append(G.MrpEdge(src, tgt, None, attributes=((REMOTE_ATTR, True),)))

    return G.MrpGraph(id=gid, flavor=1, framework="ucca", input=text,
                      tops=(root,), nodes=tuple(nodes), edges=tuple(edges))
