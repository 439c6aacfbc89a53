"""Component-wise graph scoring.

A predicted graph is compared to gold by first establishing a node
correspondence, then counting matched tuples per component (tops, node
labels, node properties, anchors, labeled edges, edge attributes).
Anchored frameworks get a deterministic correspondence from character
overlap; the unanchored one searches for the bijection that maximizes
matched tuples.  Counts pool across sentences within a framework
(micro) and frameworks average unweighted (macro).

Scores are labeled "MRP-F1 (toolkit)": the official scorer's
correspondence tie-breaking is not public, so bit-equality with it is
not claimed.
"""

import itertools
import json
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import graphs as G

COMPONENTS = ("tops", "labels", "properties", "anchors", "edges", "attributes")
HILL_CLIMB_RESTARTS = 20
EXHAUSTIVE_LIMIT = 8


@dataclass
class Counts:
    gold: int = 0
    pred: int = 0
    matched: int = 0

    def __add__(self, other):
        return Counts(self.gold + other.gold, self.pred + other.pred,
                      self.matched + other.matched)

    @property
    def precision(self):
        return self.matched / self.pred if self.pred else 0.0

    @property
    def recall(self):
        return self.matched / self.gold if self.gold else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def _anchor_chars(node):
    out = set()
    for a in node.anchors:
        out.update(range(a.start, a.end))
    return frozenset(out)


def anchor_signatures(g):
    """Character set per node: own anchors, or the union over non-remote
    descendants for unanchored internal nodes (the UCCA yield)."""
    children = {}
    for e in g.edges:
        if e.attribute_map().get("remote"):
            continue
        children.setdefault(e.source, []).append(e.target)
    own = {n.id: _anchor_chars(n) for n in g.nodes}
    memo = {}

    def sig(nid, stack):
        if nid in memo:
            return memo[nid]
        if own[nid] or nid in stack:
            return own[nid]
        stack = stack | {nid}
        acc = set()
        for ch in children.get(nid, ()):
            acc.update(sig(ch, stack))
        memo[nid] = frozenset(acc)
        return memo[nid]

    return {n.id: sig(n.id, frozenset()) for n in g.nodes}


def _trimmed_anchor_set(node, text):
    out = set()
    for a in node.anchors:
        s, e = a.start, a.end
        while s < e and text[s].isspace():
            s += 1
        while e > s and text[e - 1].isspace():
            e -= 1
        if s < e:
            out.add((s, e))
    return frozenset(out)


def _anchor_set(node):
    return frozenset((a.start, a.end) for a in node.anchors)


class _PairMatcher:
    """Precomputed tuple structures for one gold/pred pair; ``counts``
    and ``matched`` evaluate a candidate correspondence."""

    def __init__(self, gold, pred, lenient=False):
        self.gold, self.pred = gold, pred
        self.lenient = lenient
        self.gold_label = {n.id: n.label for n in gold.nodes}
        self.pred_label = {n.id: n.label for n in pred.nodes}
        self.gold_props = {n.id: Counter(n.properties) for n in gold.nodes}
        self.pred_props = {n.id: Counter(n.properties) for n in pred.nodes}
        if lenient:
            self.gold_anchor = {n.id: _trimmed_anchor_set(n, gold.input)
                                for n in gold.nodes}
            self.pred_anchor = {n.id: _trimmed_anchor_set(n, pred.input)
                                for n in pred.nodes}
        else:
            self.gold_anchor = {n.id: _anchor_set(n) for n in gold.nodes}
            self.pred_anchor = {n.id: _anchor_set(n) for n in pred.nodes}
        self.pred_tops = set(pred.tops)
        self.pred_edges = Counter((e.source, e.target, e.label)
                                  for e in pred.edges)
        self.pred_attrs = Counter((e.source, e.target, e.label, k, v)
                                  for e in pred.edges
                                  for k, v in e.attributes)
        self.n_gold_labels = sum(1 for n in gold.nodes if n.label is not None)
        self.n_pred_labels = sum(1 for n in pred.nodes if n.label is not None)
        self.n_gold_props = sum(len(n.properties) for n in gold.nodes)
        self.n_pred_props = sum(len(n.properties) for n in pred.nodes)
        self.n_gold_anchors = sum(1 for s in self.gold_anchor.values() if s)
        self.n_pred_anchors = sum(1 for s in self.pred_anchor.values() if s)
        self.n_gold_attrs = sum(len(e.attributes) for e in gold.edges)
        self.n_pred_attrs = sum(len(e.attributes) for e in pred.edges)

    def counts(self, m):
        g, p = self.gold, self.pred
        out = {}
        top_hits = sum(1 for t in g.tops if m.get(t) in self.pred_tops)
        out["tops"] = Counts(len(g.tops), len(p.tops), top_hits)

        lab_hits = sum(1 for n, lab in self.gold_label.items()
                       if lab is not None and m.get(n) is not None
                       and self.pred_label.get(m[n]) == lab)
        out["labels"] = Counts(self.n_gold_labels, self.n_pred_labels, lab_hits)

        prop_hits = 0
        for n, props in self.gold_props.items():
            if m.get(n) is None:
                continue
            other = self.pred_props.get(m[n], Counter())
            prop_hits += sum(min(c, other[kv]) for kv, c in props.items())
        out["properties"] = Counts(self.n_gold_props, self.n_pred_props,
                                   prop_hits)

        anch_hits = sum(1 for n, s in self.gold_anchor.items()
                        if s and m.get(n) is not None
                        and self.pred_anchor.get(m[n]) == s)
        out["anchors"] = Counts(self.n_gold_anchors, self.n_pred_anchors,
                                anch_hits)

        mapped_edges = Counter()
        mapped_attrs = Counter()
        for e in g.edges:
            s, t = m.get(e.source), m.get(e.target)
            if s is None or t is None:
                continue
            mapped_edges[(s, t, e.label)] += 1
            for k, v in e.attributes:
                mapped_attrs[(s, t, e.label, k, v)] += 1
        edge_hits = sum(min(c, self.pred_edges[key])
                        for key, c in mapped_edges.items())
        attr_hits = sum(min(c, self.pred_attrs[key])
                        for key, c in mapped_attrs.items())
        out["edges"] = Counts(len(g.edges), len(p.edges), edge_hits)
        out["attributes"] = Counts(self.n_gold_attrs, self.n_pred_attrs,
                                   attr_hits)
        out["all"] = sum(out.values(), Counts())
        return out

    def matched(self, m):
        return self.counts(m)["all"].matched


def _improve_by_swaps(values, gold_ids, objective):
    """Hill climbing over pair swaps (and, for small problems, 3-cycles,
    which plain swaps cannot escape) in deterministic order.

    ``gold_ids`` rows holding None are a spare pool: their values are
    unmapped predicted nodes available to swap in.
    """
    def as_mapping():
        return {g: v for g, v in zip(gold_ids, values)
                if g is not None and v is not None}

    n = len(values)
    best = objective(as_mapping())
    improved = True
    while improved:
        improved = False
        for i in range(n):
            for j in range(i + 1, n):
                if values[i] == values[j]:
                    continue
                values[i], values[j] = values[j], values[i]
                score = objective(as_mapping())
                if score > best:
                    best = score
                    improved = True
                else:
                    values[i], values[j] = values[j], values[i]
        if improved or n > 12:
            continue
        for i, j, k in itertools.combinations(range(n), 3):
            for _ in range(2):
                values[i], values[j], values[k] = (values[j], values[k],
                                                   values[i])
                score = objective(as_mapping())
                if score > best:
                    best = score
                    improved = True
                    break
            else:
                # third rotation restores the original assignment
                values[i], values[j], values[k] = (values[j], values[k],
                                                   values[i])
            if improved:
                break
    return best


def _node_depths(g):
    """BFS depth from the tops over non-remote edges; unreached nodes
    sit below everything."""
    children = {}
    for e in g.edges:
        if e.attribute_map().get("remote"):
            continue
        children.setdefault(e.source, []).append(e.target)
    depth = {t: 0 for t in g.tops}
    frontier = list(g.tops)
    while frontier:
        new = []
        for u in frontier:
            for v in children.get(u, ()):
                if v not in depth:
                    depth[v] = depth[u] + 1
                    new.append(v)
        frontier = new
    return {n.id: depth.get(n.id, len(g.nodes)) for n in g.nodes}


def _anchored_correspondence(gold, pred, matcher):
    """Greedy by character overlap, then deterministic swap refinement.

    Depth breaks ties between nodes with identical character yields
    (unary chains), so a parent pairs with a parent.
    """
    sig_g = anchor_signatures(gold)
    sig_p = anchor_signatures(pred)
    dep_g, dep_p = _node_depths(gold), _node_depths(pred)
    cands = []
    for gn in gold.nodes:
        for pn in pred.nodes:
            a, b = sig_g[gn.id], sig_p[pn.id]
            union = len(a | b)
            if union == 0:
                jac = 1.0  # both unanchored with empty yields
            else:
                inter = len(a & b)
                if inter == 0:
                    continue
                jac = inter / union
            label_miss = 0 if gn.label == pn.label else 1
            ddiff = abs(dep_g[gn.id] - dep_p[pn.id])
            cands.append((-jac, ddiff, label_miss, gn.id, pn.id))
    cands.sort()
    m = {}
    used = set()
    for _, _, _, gid, pid in cands:
        if gid in m or pid in used:
            continue
        m[gid] = pid
        used.add(pid)

    gold_ids = sorted(n.id for n in gold.nodes)
    free = [p for p in sorted(n.id for n in pred.nodes) if p not in used]
    values = [m.get(g) for g in gold_ids] + free
    ids = gold_ids + [None] * len(free)  # rows with no gold node are a pool
    _improve_by_swaps(values, ids, matcher.matched)
    return {g: v for g, v in zip(ids, values) if g is not None and v is not None}


def _search_correspondence(gold, pred, matcher, seed, restarts, exhaustive_ok):
    gold_ids = sorted(n.id for n in gold.nodes)
    pred_ids = sorted(n.id for n in pred.nodes)
    if not gold_ids or not pred_ids:
        return {}
    if (exhaustive_ok and len(gold_ids) <= EXHAUSTIVE_LIMIT
            and len(pred_ids) <= EXHAUSTIVE_LIMIT):
        return _exhaustive_correspondence(gold_ids, pred_ids, matcher)
    rng = np.random.default_rng(seed)
    slots = pred_ids + [None] * max(0, len(gold_ids) - len(pred_ids))
    best_m, best_score = {}, -1
    for _ in range(restarts):
        work = [slots[i] for i in rng.permutation(len(slots))]
        score = _improve_by_swaps(
            work, gold_ids + [None] * (len(work) - len(gold_ids)),
            matcher.matched)
        if score > best_score:
            best_score = score
            best_m = {g: v for g, v in zip(gold_ids, work) if v is not None}
    return best_m


def _exhaustive_correspondence(gold_ids, pred_ids, matcher):
    best_m, best_score = {}, -1
    if len(gold_ids) <= len(pred_ids):
        for combo in itertools.permutations(pred_ids, len(gold_ids)):
            m = dict(zip(gold_ids, combo))
            score = matcher.matched(m)
            if score > best_score:
                best_score, best_m = score, m
    else:
        for combo in itertools.permutations(gold_ids, len(pred_ids)):
            m = {g: p for g, p in zip(combo, pred_ids)}
            score = matcher.matched(m)
            if score > best_score:
                best_score, best_m = score, m
    return best_m


def correspondence(gold, pred, lenient=False, seed=0, method="auto"):
    """Node mapping gold id -> pred id used for tuple matching.

    ``method`` is for oracle tests: "exhaustive" and "hillclimb" force
    the unanchored search strategy regardless of graph size.
    """
    matcher = _PairMatcher(gold, pred, lenient=lenient)
    if gold.flavor in (0, 1):
        return _anchored_correspondence(gold, pred, matcher)
    if method == "exhaustive":
        g = sorted(n.id for n in gold.nodes)
        p = sorted(n.id for n in pred.nodes)
        if not g or not p:
            return {}
        return _exhaustive_correspondence(g, p, matcher)
    return _search_correspondence(gold, pred, matcher, seed,
                                  HILL_CLIMB_RESTARTS,
                                  exhaustive_ok=(method == "auto"))


def mrp_f1(gold, pred, lenient=False, seed=0, method="auto"):
    """Per-component Counts (plus pooled "all") for one sentence."""
    if gold.framework != pred.framework:
        raise ValueError(f"framework mismatch: {gold.framework} vs "
                         f"{pred.framework} for {gold.id}")
    if gold.id != pred.id:
        raise ValueError(f"sentence id mismatch: {gold.id} vs {pred.id}")
    matcher = _PairMatcher(gold, pred, lenient=lenient)
    m = correspondence(gold, pred, lenient=lenient, seed=seed, method=method)
    return matcher.counts(m)


class ScoreReport:
    """Accumulated counts per framework with micro P/R/F1 per component
    and an unweighted macro average across frameworks."""

    def __init__(self):
        self.by_framework = {}

    def add(self, framework, component_counts):
        slot = self.by_framework.setdefault(
            framework, {c: Counts() for c in COMPONENTS + ("all",)})
        for c, counts in component_counts.items():
            slot[c] = slot[c] + counts

    def framework_f1(self, framework):
        return self.by_framework[framework]["all"].f1

    def macro_f1(self, frameworks=G.FRAMEWORKS):
        total = 0.0
        for fw in frameworks:
            if fw in self.by_framework:
                total += self.framework_f1(fw)
            else:
                warnings.warn(f"no scores for framework {fw}; counted as 0")
        return total / len(frameworks)

    def to_json(self):
        doc = {}
        for fw, comps in sorted(self.by_framework.items()):
            doc[fw] = {c: {"gold": k.gold, "pred": k.pred, "matched": k.matched,
                           "precision": k.precision, "recall": k.recall,
                           "f1": k.f1}
                       for c, k in comps.items()}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            doc["macro_f1"] = self.macro_f1()
        return doc

    def format_table(self):
        cols = COMPONENTS + ("all",)
        header = f"{'framework':<10}" + "".join(f"{c:>12}" for c in cols)
        lines = [header, "-" * len(header)]
        for fw in G.FRAMEWORKS:
            if fw not in self.by_framework:
                continue
            comps = self.by_framework[fw]
            row = f"{fw:<10}" + "".join(f"{comps[c].f1:>12.4f}" for c in cols)
            lines.append(row)
        present = [fw for fw in G.FRAMEWORKS if fw in self.by_framework]
        if present:
            mean = sum(self.framework_f1(fw) for fw in present) / len(present)
            lines.append(f"{'mean':<10}" + " " * 12 * (len(cols) - 1)
                         + f"{mean:>12.4f}")
        return "\n".join(lines)


def macro_average(report, frameworks=G.FRAMEWORKS):
    return report.macro_f1(frameworks)


def sdp_labeled_f1(gold, pred):
    """F1 over labeled directed dependencies with the top attachment
    counted as a virtual root dependency.

    Nodes are keyed by their first anchor when they have one, so the two
    graphs may number their nodes differently.
    """
    def tuples(g):
        key = {n.id: (n.anchors[0].start, n.anchors[0].end) if n.anchors else n.id
               for n in g.nodes}
        c = Counter()
        for e in g.edges:
            c[(key[e.source], key[e.target], e.label)] += 1
        for t in g.tops:
            c[("top", key[t])] += 1
        return c

    a, b = tuples(gold), tuples(pred)
    if not a and not b:
        return 1.0  # vacuously perfect
    matched = sum(min(c, b[key]) for key, c in a.items())
    total_a, total_b = sum(a.values()), sum(b.values())
    p = matched / total_b if total_b else 0.0
    r = matched / total_a if total_a else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def write_report(report, path):
    with open(path, "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
