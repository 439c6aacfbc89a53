"""Biaffine edge/label scoring and threshold decoding.

The same head design serves every framework: specialize the encoder
states through four small MLPs, score all ordered position pairs with a
bilinear-plus-linear form for edge existence, and with per-class
bilinear forms for edge labels.  Position 0 is <ROOT>; a directed edge
from it marks a top node.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import Mlp


@dataclass
class PairScores:
    """All-pairs scores for one sentence.

    edge_probs[i, j] is the probability of an edge from position i to
    position j (sigmoid applied).  label_logits holds raw class scores
    for the pair at flat index i * n + j.
    """
    edge_probs: ad.Tensor    # (P, P)
    label_logits: ad.Tensor  # (P*P, C)
    n_positions: int
    labels: list

    def label_logits_at(self, pairs):
        """Rows of label logits for (i, j) position pairs."""
        idx = [i * self.n_positions + j for i, j in pairs]
        return ad.rows(self.label_logits, idx)

    def label_probs(self):
        """(P, P, C) softmax over classes, as plain numpy."""
        flat = self.label_logits.data
        shifted = flat - flat.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=-1, keepdims=True)
        n = self.n_positions
        return probs.reshape(n, n, len(self.labels))

    def best_labels(self):
        """(P, P) argmax class indices; ties go to the lowest index."""
        n = self.n_positions
        return self.label_logits.data.argmax(axis=-1).reshape(n, n)


class BiaffineHead:
    """Edge and label scorer over a node-state sequence."""

    def __init__(self, params, name, in_dim, labels, rng,
                 edge_mlp=600, label_mlp=600,
                 input_dropout=0.0, edge_dropout=0.0, label_dropout=0.0):
        if not labels:
            raise ValueError("label inventory must be nonempty")
        self.labels = list(labels)
        self.input_dropout = input_dropout
        self.edge_dropout = edge_dropout
        self.label_dropout = label_dropout
        self.edge_from = Mlp(params, f"{name}.edge_from", in_dim, edge_mlp, rng)
        self.edge_to = Mlp(params, f"{name}.edge_to", in_dim, edge_mlp, rng)
        self.label_from = Mlp(params, f"{name}.label_from", in_dim, label_mlp, rng)
        self.label_to = Mlp(params, f"{name}.label_to", in_dim, label_mlp, rng)
        self.u_edge = params.new(f"{name}.u_edge", (edge_mlp, edge_mlp), rng)
        self.w_edge = params.new(f"{name}.w_edge", (2 * edge_mlp, 1), rng)
        self.b_edge = params.new_from(f"{name}.b_edge", 0.0)
        c = len(self.labels)
        self.u_label = params.new(f"{name}.u_label", (c, label_mlp, label_mlp), rng)
        self.w_label = params.new(f"{name}.w_label", (c, 1, label_mlp), rng)
        self._edge_width = edge_mlp

    def score(self, states, train=False, rng=None):
        """Score all ordered pairs of positions; returns :class:`PairScores`."""
        if train and self.input_dropout > 0.0:
            states = ad.dropout(states, self.input_dropout, rng)

        ef = self.edge_from(states)
        et = self.edge_to(states)
        lf = self.label_from(states)
        lt = self.label_to(states)
        if train and self.edge_dropout > 0.0:
            ef = ad.dropout(ef, self.edge_dropout, rng)
            et = ad.dropout(et, self.edge_dropout, rng)
        if train and self.label_dropout > 0.0:
            lf = ad.dropout(lf, self.label_dropout, rng)
            lt = ad.dropout(lt, self.label_dropout, rng)

        n = states.shape[0]

        # edge: x'Uy + W[x;y] + b over all pairs at once
        quad = ad.matmul(ad.matmul(ef, self.u_edge), ad.transpose(et))
        w_from, w_to = ad.split(self.w_edge, [self._edge_width] * 2, axis=0)
        lin = ad.add(ad.matmul(ef, w_from), ad.transpose(ad.matmul(et, w_to)))
        edge_probs = ad.sigmoid(ad.add(ad.add(quad, lin), self.b_edge))

        # labels: per class x'U_c y + W_c y (no bias, no x term)
        c = len(self.labels)
        width = lf.shape[1]
        lf3 = ad.reshape(lf, (1, n, width))
        tt3 = ad.reshape(ad.transpose(lt), (1, width, n))
        quad_l = ad.matmul(ad.matmul(lf3, self.u_label), tt3)   # (C, n, n)
        lin_l = ad.matmul(self.w_label, tt3)                    # (C, 1, n)
        scores = ad.add(quad_l, lin_l)
        label_logits = ad.transpose(ad.reshape(scores, (c, n * n)))

        return PairScores(edge_probs=edge_probs, label_logits=label_logits,
                          n_positions=n, labels=self.labels)


@dataclass
class Flavor0Decode:
    """Decoded positions: edges as (from, to, label), tops, kept positions."""
    edges: list
    tops: list
    kept: list


def decode_flavor0(scores):
    """Threshold decoding for token-anchored graphs.

    An edge (i, j) between real positions is adopted iff its probability
    strictly exceeds 0.5; row 0 marks top nodes (several allowed); real
    positions that are neither tops nor incident to an edge are dropped.
    """
    p = scores.edge_probs.data
    best = scores.best_labels()
    n = scores.n_positions
    edges = []
    incident = set()
    for i in range(1, n):
        for j in range(1, n):
            if p[i, j] > 0.5:
                edges.append((i, j, scores.labels[best[i, j]]))
                incident.add(i)
                incident.add(j)
    tops = [j for j in range(1, n) if p[0, j] > 0.5]
    kept = sorted(incident | set(tops))
    return Flavor0Decode(edges=edges, tops=tops, kept=kept)


def edge_and_label_loss(scores, gold_edges, gold_tops):
    """Summed BCE over every cell plus CE over gold edges.

    ``gold_edges`` are (from, to, class index) in position space (root
    row excluded); ``gold_tops`` are positions j, charged via cell (0, j).
    """
    n = scores.n_positions
    target = np.zeros((n, n))
    for i, j, _ in gold_edges:
        target[i, j] = 1.0
    for j in gold_tops:
        target[0, j] = 1.0
    edge_loss = ad.binary_cross_entropy(scores.edge_probs, target)

    if gold_edges:
        logits = scores.label_logits_at([(i, j) for i, j, _ in gold_edges])
        classes = np.array([c for _, _, c in gold_edges], dtype=np.int64)
        label_loss = ad.cross_entropy_logits(logits, classes)
    else:
        label_loss = ad.Tensor(0.0)
    return edge_loss, label_loss
