"""Bilexical dependency heads (DM and PSD).

Edges come from the shared biaffine scorer; this module adds what is
specific to the two frameworks: the DM frame classifier (type plus
arguments two to five), the joint training loss, and lexicon-driven
postprocessing that turns decoded positions into full graphs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import graphs as G
from .biaffine import decode_flavor0
from .encoder import Classifier

NONE_ARG = "<NONE>"
UNK_SYM = "<UNK>"

N_ARG_HEADS = 4  # arguments two to five; the first is implied by the type


def parse_frame(s):
    """Split a frame string `type:a1-a2-...` into (type, argument tuple)."""
    if ":" not in s:
        return s, ()
    head, args = s.split(":", 1)
    return head, tuple(a for a in args.split("-") if a)


def render_frame(ftype, args):
    return f"{ftype}:{'-'.join(args)}" if args else ftype


@dataclass(frozen=True)
class FrameEntry:
    lemma: str
    pos: str      # empty when the lexicon keys on lemma alone
    frame: str    # DM: frame type; PSD: frame identifier
    args: tuple   # DM: full argument tuple; PSD: required arguments
    freq: int


class FrameLexicon:
    """Frame inventory with corpus frequencies.

    File format: one `lemma<TAB>pos<TAB>frame<TAB>args<TAB>freq` row per
    entry, args hyphen-joined (may be empty, like pos).  Order in the
    file is preserved and breaks ties deterministically.
    """

    def __init__(self, entries):
        self.entries = list(entries)
        self._by_lemma = {}
        self._by_lemma_pos = {}
        for e in self.entries:
            self._by_lemma.setdefault(e.lemma, []).append(e)
            self._by_lemma_pos.setdefault((e.lemma, e.pos), []).append(e)

    @classmethod
    def load(cls, path):
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                cols = line.split("\t")
                if len(cols) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 5 columns")
                lemma, pos, frame, args, freq = cols
                entries.append(FrameEntry(lemma, pos, frame,
                                          tuple(a for a in args.split("-") if a), int(freq)))
        return cls(entries)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write("\t".join([e.lemma, e.pos, e.frame, "-".join(e.args), str(e.freq)]))
                fh.write("\n")

    def by_lemma(self, lemma):
        return self._by_lemma.get(lemma, [])

    def by_lemma_pos(self, lemma, pos):
        return self._by_lemma_pos.get((lemma, pos), [])

    def first_arg_for_type(self, ftype):
        """Most frequent first argument observed with a frame type."""
        weights = {}
        for e in self.entries:
            if e.frame == ftype and e.args:
                weights[e.args[0]] = weights.get(e.args[0], 0) + e.freq
        if not weights:
            return None
        return max(sorted(weights), key=lambda a: weights[a])


class SpecialLabelTable:
    """(surface, POS) -> special node label, e.g. #PersPron."""

    def __init__(self, table):
        self.table = dict(table)

    @classmethod
    def load(cls, path):
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                cols = line.split("\t")
                if len(cols) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 columns")
                table[(cols[0], cols[1])] = cols[2]
        return cls(table)

    def lookup(self, surface, xpos, upos):
        for key in ((surface, xpos), (surface, upos),
                    (surface.lower(), xpos), (surface.lower(), upos)):
            if key in self.table:
                return self.table[key]
        return None


@dataclass
class FramePrediction:
    """Per-node frame distributions: one type head, four argument heads."""
    type_logits: ad.Tensor   # (P, n_types)
    arg_logits: list         # N_ARG_HEADS tensors (P, n_arg_classes)
    types: list
    arg_classes: list

    def type_probs(self):
        return _softmax_np(self.type_logits.data)

    def arg_probs(self, k):
        return _softmax_np(self.arg_logits[k].data)


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class FrameClassifier:
    def __init__(self, params, name, in_dim, types, arg_classes, rng,
                 hidden=600, drop=0.0):
        if NONE_ARG not in arg_classes:
            raise ValueError(f"argument inventory must contain {NONE_ARG}")
        self.types = list(types)
        self.arg_classes = list(arg_classes)
        self.drop = drop
        self.type_head = Classifier(params, f"{name}.type", in_dim, hidden,
                                    len(self.types), rng)
        self.arg_heads = [Classifier(params, f"{name}.arg{k + 2}", in_dim, hidden,
                                     len(self.arg_classes), rng)
                          for k in range(N_ARG_HEADS)]

    def predict(self, states, train=False, rng=None):
        return FramePrediction(
            type_logits=self.type_head(states, drop=self.drop, rng=rng, train=train),
            arg_logits=[h(states, drop=self.drop, rng=rng, train=train)
                        for h in self.arg_heads],
            types=self.types,
            arg_classes=self.arg_classes,
        )

    def frame_targets(self, frame):
        """(type index, four argument class indices) for a gold frame string."""
        ftype, args = parse_frame(frame)
        t = self.types.index(ftype) if ftype in self.types else self.types.index(UNK_SYM)
        arg_ids = []
        for k in range(N_ARG_HEADS):
            sym = args[k + 1] if len(args) > k + 1 else NONE_ARG
            if sym not in self.arg_classes:
                sym = NONE_ARG
            arg_ids.append(self.arg_classes.index(sym))
        return t, arg_ids


def frame_loss(pred, positions, gold_frames, classifier):
    """Summed CE of type and argument heads over the given node positions."""
    if not positions:
        return ad.Tensor(0.0)
    type_targets = []
    arg_targets = [[] for _ in range(N_ARG_HEADS)]
    for frame in gold_frames:
        t, arg_ids = classifier.frame_targets(frame)
        type_targets.append(t)
        for k in range(N_ARG_HEADS):
            arg_targets[k].append(arg_ids[k])
    total = ad.cross_entropy_logits(ad.rows(pred.type_logits, positions),
                                    np.array(type_targets))
    for k in range(N_ARG_HEADS):
        total = ad.add(total, ad.cross_entropy_logits(ad.rows(pred.arg_logits[k], positions),
                                                      np.array(arg_targets[k])))
    return total


def sdp_joint_loss(dm_edge, dm_label, psd_edge, psd_label, dm_frame,
                   lam_label, lam_frame):
    """lam_label (label_dm + label_psd + lam_frame*frame_dm) + (1-lam_label)(edge_dm + edge_psd)."""
    if not 0.0 <= lam_label <= 1.0:
        raise ValueError(f"lam_label must lie in [0,1], got {lam_label}")
    label_part = ad.add(ad.add(dm_label, psd_label), ad.mul(dm_frame, lam_frame))
    edge_part = ad.add(dm_edge, psd_edge)
    return ad.add(ad.mul(label_part, lam_label), ad.mul(edge_part, 1.0 - lam_label))


# ---------------------------------------------------------------------------
# frame reconstruction

def joint_probability(type_probs, arg_probs_rows, ftype, args, types, arg_classes):
    """y_type * prod over argument heads, 0 when a symbol is unpredictable."""
    if ftype not in types:
        return 0.0
    p = type_probs[types.index(ftype)]
    for k in range(N_ARG_HEADS):
        sym = args[k + 1] if len(args) > k + 1 else NONE_ARG
        if sym not in arg_classes:
            return 0.0
        p *= arg_probs_rows[k][arg_classes.index(sym)]
    return p


def reconstruct_dm_frame(type_probs, arg_probs_rows, lemma, lexicon, types, arg_classes):
    """Highest empirically scaled likelihood among the lexicon candidates.

    score(candidate) = p_joint * freq / sum(candidate freqs); with no
    lexicon entry the unfiltered joint argmax is rendered instead.
    """
    candidates = lexicon.by_lemma(lemma) if lexicon is not None else []
    if not candidates:
        ftype = types[int(np.argmax(type_probs))]
        args = []
        first = lexicon.first_arg_for_type(ftype) if lexicon is not None else None
        if first is not None:
            args.append(first)
            for k in range(N_ARG_HEADS):
                sym = arg_classes[int(np.argmax(arg_probs_rows[k]))]
                if sym == NONE_ARG:
                    break
                args.append(sym)
        return render_frame(ftype, tuple(args))
    total_freq = sum(e.freq for e in candidates)
    best, best_score = None, -1.0
    for e in candidates:
        p = joint_probability(type_probs, arg_probs_rows, e.frame, e.args, types, arg_classes)
        score = p * (e.freq / total_freq if total_freq > 0 else 0.0)
        if score > best_score:
            best, best_score = e, score
    return render_frame(best.frame, best.args)


def strip_label_suffix(label):
    """PSD functor labels drop their role suffix: "ACT-arg" -> "ACT"."""
    return label.split("-", 1)[0]


def reconstruct_psd_frame(lemma, pos, outgoing_labels, lexicon):
    """Most frequent candidate whose required arguments are all present."""
    candidates = lexicon.by_lemma_pos(lemma, pos) if lexicon is not None else []
    if not candidates:
        return None
    present = {strip_label_suffix(l) for l in outgoing_labels}
    survivors = [e for e in candidates if set(e.args) <= present]
    pool = survivors if survivors else candidates
    best = pool[0]
    for e in pool[1:]:
        if e.freq > best.freq:
            best = e
    return best.frame


def assign_node_labels(token_indices, tokens, special_table, framework):
    """Token lemma, except PSD hits in the special-label dictionary."""
    labels = {}
    for i in token_indices:
        tok = tokens[i]
        label = tok.lemma
        if framework == "psd" and special_table is not None:
            hit = special_table.lookup(tok.surface, tok.xpos, tok.upos)
            if hit is not None:
                label = hit
        labels[i] = label
    return labels


# ---------------------------------------------------------------------------
# gold extraction and graph building

def node_token_map(graph, tokens):
    """Flavor-0 node -> token index via anchor overlap; must be unique."""
    mapping = {}
    for node in graph.nodes:
        hits = [t.index for t in tokens if any(a.overlaps(t.anchor) for a in node.anchors)]
        if len(hits) != 1:
            raise ValueError(f"{graph.id}: node {node.id} anchors to {len(hits)} tokens")
        mapping[node.id] = hits[0]
    return mapping


def gold_targets(graph, tokens, label_index):
    """Position-space supervision: edges (i, j, class), tops, frames.

    Positions are token index + 1 (0 is <ROOT>).
    """
    tok_of = node_token_map(graph, tokens)
    edges = [(tok_of[e.source] + 1, tok_of[e.target] + 1, label_index[e.label])
             for e in graph.edges]
    tops = [tok_of[t] + 1 for t in graph.tops]
    frames = {}
    for node in graph.nodes:
        props = node.property_map()
        if "frame" in props:
            frames[tok_of[node.id] + 1] = props["frame"]
    return edges, tops, frames


@dataclass
class SdpResources:
    dm_lexicon: FrameLexicon = None
    psd_lexicon: FrameLexicon = None
    special_labels: SpecialLabelTable = None


def build_graph(framework, sid, tokens, text, scores, frame_pred=None,
                resources=None):
    """Decode pair scores into a complete flavor-0 graph."""
    resources = resources or SdpResources()
    decoded = decode_flavor0(scores)
    token_ids = [p - 1 for p in decoded.kept]
    labels = assign_node_labels(token_ids, tokens, resources.special_labels, framework)

    node_id_of = {tok: idx for idx, tok in enumerate(token_ids)}
    out_edges_of = {}
    for i, j, lab in decoded.edges:
        out_edges_of.setdefault(i - 1, []).append(lab)

    nodes = []
    for tok_idx in token_ids:
        tok = tokens[tok_idx]
        props = [("pos", tok.xpos)]
        if framework == "dm" and frame_pred is not None:
            frame = reconstruct_dm_frame(
                frame_pred.type_probs()[tok_idx + 1],
                [frame_pred.arg_probs(k)[tok_idx + 1] for k in range(N_ARG_HEADS)],
                tok.lemma, resources.dm_lexicon,
                frame_pred.types, frame_pred.arg_classes)
            props.append(("frame", frame))
        elif framework == "psd":
            frame = reconstruct_psd_frame(tok.lemma, tok.xpos,
                                          out_edges_of.get(tok_idx, []),
                                          resources.psd_lexicon)
            if frame is not None:
                props.append(("frame", frame))
        nodes.append(G.MrpNode(node_id_of[tok_idx], label=labels[tok_idx],
                               properties=tuple(props), anchors=(tok.anchor,)))

    edges = tuple(G.MrpEdge(node_id_of[i - 1], node_id_of[j - 1], lab)
                  for i, j, lab in decoded.edges)
    tops = tuple(node_id_of[p - 1] for p in decoded.tops)
    return G.MrpGraph(id=sid, flavor=0, framework=framework, input=text,
                      tops=tops, nodes=tuple(nodes), edges=edges)


def collect_inventories(gold_graphs):
    """Label/type/argument inventories from training graphs, file order."""
    labels = []
    types = [UNK_SYM]
    arg_classes = [NONE_ARG]
    for g in gold_graphs:
        for e in g.edges:
            if e.label not in labels:
                labels.append(e.label)
        for n in g.nodes:
            props = n.property_map()
            if "frame" in props:
                ftype, args = parse_frame(props["frame"])
                if ftype not in types:
                    types.append(ftype)
                for a in args:
                    if a not in arg_classes:
                        arg_classes.append(a)
    return labels, types, arg_classes
