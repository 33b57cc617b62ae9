"""Edge-weight-based spatial clustering for graph structures.

Pipeline: map edge probabilities to distances with arctanh(1-p)/p, build a
minimum spanning forest with Kruskal's algorithm (directed edges are used
as plain connectivity candidates), replay the accepted merges into a
single-linkage hierarchy, condense it under a minimum cluster size, and
select clusters by excess-of-mass stability on the lambda = 1/distance
scale.  Edges whose probability falls below ``threshold`` are removed up
front, so they can never join two clusters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .tracks import UNLABELED
from .validation import check_probabilities

MIN_DISTANCE = 1e-12  # distances are clamped before inverting into lambda


class MissingProbabilityError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterParams:
    min_cluster_size: int = 4
    threshold: float = 0.2

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


def transform_weights(p):
    """Map probabilities to nonnegative distances: arctanh(1 - p) / p.

    Strictly decreasing on (0, 1]; p is clamped to [1e-6, 1] first.
    """
    p = np.clip(np.asarray(p, dtype=float), 1e-6, 1.0)
    return np.arctanh(1.0 - p) / p


class UnionFind:
    """Union by rank with path compression; deterministic root choice."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.rank = np.zeros(n, dtype=np.int64)

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return int(root)

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        elif self.rank[ra] == self.rank[rb]:
            if rb < ra:  # attach the larger index under the smaller
                ra, rb = rb, ra
            self.rank[ra] += 1
        self.parent[rb] = ra
        return True


def kruskal_mst(n: int, src, dst, weights):
    """Minimum spanning forest edges in acceptance order.

    Edges are sorted by (weight, src, dst); returns an (k, 3) float array of
    rows (src, dst, weight).  Disconnected input yields one tree per
    component.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    order = np.lexsort((dst, src, weights))
    uf = UnionFind(n)
    rows = []
    for idx in order:
        u, v, w = int(src[idx]), int(dst[idx]), float(weights[idx])
        if uf.union(u, v):
            rows.append((u, v, w))
            if len(rows) == n - 1:
                break
    return np.array(rows, dtype=float).reshape(-1, 3)


@dataclass
class LinkageTree:
    """Merge events replayed in Kruskal acceptance order.

    Leaves are 0..n-1; merge i creates node n+i.  ``merges`` rows are
    (child_a, child_b, distance, merged_size) with nondecreasing distance.
    """

    n_points: int
    merges: np.ndarray  # (k, 4)


def build_linkage(n: int, mst_rows) -> LinkageTree:
    mst_rows = np.asarray(mst_rows, dtype=float).reshape(-1, 3)
    uf = UnionFind(n)
    comp_node = np.arange(n, dtype=np.int64)  # current cluster node per root
    comp_size = np.ones(n, dtype=np.int64)
    merges = []
    next_node = n
    for u, v, w in mst_rows:
        ru, rv = uf.find(int(u)), uf.find(int(v))
        a, b = comp_node[ru], comp_node[rv]
        size = comp_size[ru] + comp_size[rv]
        merges.append((min(a, b), max(a, b), w, size))
        uf.union(ru, rv)
        r = uf.find(ru)
        comp_node[r] = next_node
        comp_size[r] = size
        next_node += 1
    return LinkageTree(n_points=n, merges=np.array(merges, dtype=float).reshape(-1, 4))


@dataclass
class CondensedTree:
    """Cluster hierarchy pruned by minimum cluster size.

    ``rows`` are fall-out / split events (parent, child, lambda, size);
    children below ``n_points`` are points, otherwise cluster nodes.
    """

    n_points: int
    rows: list = field(default_factory=list)           # (parent, child, lam, size)
    parent_of: dict = field(default_factory=dict)      # cluster -> parent cluster (-1 root)
    birth: dict = field(default_factory=dict)          # cluster -> lambda at creation
    size: dict = field(default_factory=dict)           # cluster -> member count

    def cluster_ids(self):
        return sorted(self.birth)

    def death(self, cid: int) -> float:
        lams = [r[2] for r in self.rows if r[0] == cid]
        return max(lams) if lams else self.birth[cid]

    def stability(self) -> dict:
        stab = {cid: 0.0 for cid in self.birth}
        for parent, _child, lam, size in self.rows:
            stab[parent] += (lam - self.birth[parent]) * size
        return stab


def _node_lambda(distance: float) -> float:
    return 1.0 / max(float(distance), MIN_DISTANCE)


def condense(linkage: LinkageTree, min_cluster_size: int = 4, root_birth_lambda: float = 0.0) -> CondensedTree:
    """Walk the hierarchy top-down; splits where both sides reach
    ``min_cluster_size`` create child clusters, smaller sides fall out as
    points at the split's lambda."""
    n = linkage.n_points
    merges = linkage.merges
    k = len(merges)
    children = {}
    node_size = {}
    node_dist = {}
    merged_away = np.zeros(n + k, dtype=bool)
    for i, (a, b, w, size) in enumerate(merges):
        node = n + i
        children[node] = (int(a), int(b))
        node_size[node] = int(size)
        node_dist[node] = float(w)
        merged_away[int(a)] = True
        merged_away[int(b)] = True

    def leaves_of(node: int):
        out = []
        stack = [node]
        while stack:
            cur = stack.pop()
            if cur < n:
                out.append(cur)
            else:
                stack.extend(children[cur])
        return sorted(out)

    def size_of(node: int) -> int:
        return 1 if node < n else node_size[node]

    tree = CondensedTree(n_points=n)
    next_cluster = n
    roots = [node for node in range(n + k) if not merged_away[node]]
    # deterministic root order: by smallest contained leaf
    roots.sort(key=lambda nd: leaves_of(nd)[0])
    stack: list[tuple[int, int]] = []
    for root in roots:
        if size_of(root) < min_cluster_size:
            continue  # whole component is noise
        cid = next_cluster
        next_cluster += 1
        tree.parent_of[cid] = -1
        tree.birth[cid] = root_birth_lambda
        tree.size[cid] = size_of(root)
        stack.append((root, cid))
    while stack:
        node, cid = stack.pop()
        a, b = children[node]
        lam = _node_lambda(node_dist[node])
        sa, sb = size_of(a), size_of(b)
        if sa >= min_cluster_size and sb >= min_cluster_size:
            for side, ssize in ((a, sa), (b, sb)):
                new_id = next_cluster
                next_cluster += 1
                tree.parent_of[new_id] = cid
                tree.birth[new_id] = lam
                tree.size[new_id] = ssize
                tree.rows.append((cid, new_id, lam, ssize))
                stack.append((side, new_id))
        elif sa >= min_cluster_size or sb >= min_cluster_size:
            big, small = (a, b) if sa >= min_cluster_size else (b, a)
            for p in leaves_of(small):
                tree.rows.append((cid, p, lam, 1))
            stack.append((big, cid))
        else:
            for p in leaves_of(a) + leaves_of(b):
                tree.rows.append((cid, p, lam, 1))
    return tree


def _eom_selection(tree: CondensedTree) -> set[int]:
    """Excess-of-mass rule: bottom-up, a node beats its children when its
    stability is at least their combined running stability (parent wins
    ties); selecting a node deselects every descendant."""
    stab = tree.stability()
    kids: dict[int, list[int]] = {}
    for cid, parent in tree.parent_of.items():
        if parent != -1:
            kids.setdefault(parent, []).append(cid)
    running = dict(stab)
    selected = {cid: True for cid in tree.birth}
    for cid in sorted(tree.birth, reverse=True):
        child_total = sum(running[c] for c in kids.get(cid, ()))
        if kids.get(cid) and stab[cid] < child_total:
            running[cid] = child_total
            selected[cid] = False
        else:
            running[cid] = stab[cid]
            queue = list(kids.get(cid, ()))
            while queue:
                c = queue.pop()
                selected[c] = False
                queue.extend(kids.get(c, ()))
    return {cid for cid, sel in selected.items() if sel}


def select_clusters(tree: CondensedTree) -> np.ndarray:
    """Stability-selected cluster labels per point; -1 marks noise."""
    chosen = sorted(_eom_selection(tree))
    label_of = {cid: i for i, cid in enumerate(chosen)}
    labels = np.full(tree.n_points, UNLABELED, dtype=np.int64)
    resolve: dict[int, int] = {}

    def resolve_cluster(cid: int) -> int:
        seenpath = []
        cur = cid
        while cur != -1 and cur not in resolve:
            if cur in label_of:
                resolve[cur] = label_of[cur]
                break
            seenpath.append(cur)
            cur = tree.parent_of[cur]
        final = resolve.get(cur, UNLABELED) if cur != -1 else UNLABELED
        for c in seenpath:
            resolve[c] = final
        return final

    for parent, child, _lam, _size in tree.rows:
        if child < tree.n_points:
            labels[child] = resolve_cluster(parent)
    return labels


def cluster_probabilities(n_vertices: int, src, dst, probabilities, params: ClusterParams = ClusterParams()):
    """Full clustering pipeline on an edge-probability graph.

    Returns (labels, condensed_tree).  Labels are per-vertex cluster ids
    with -1 for noise.
    """
    p = check_probabilities(probabilities)
    w = transform_weights(p)
    w_cut = float(transform_weights(np.array([params.threshold]))[0])
    keep = w <= w_cut  # strictly above the cut can never join clusters
    mst = kruskal_mst(n_vertices, np.asarray(src)[keep], np.asarray(dst)[keep], w[keep])
    linkage = build_linkage(n_vertices, mst)
    tree = condense(linkage, params.min_cluster_size, root_birth_lambda=1.0 / max(w_cut, MIN_DISTANCE))
    labels = select_clusters(tree)
    return labels, tree


def cluster(g, params: ClusterParams = ClusterParams()):
    """Cluster a TrackGraph that carries edge probabilities; returns labels
    aligned with the graph's vertex order (and stores them on the graph)."""
    if g.probabilities is None:
        raise MissingProbabilityError("graph edges carry no probabilities; score the graph first")
    labels, tree = cluster_probabilities(g.n_vertices, g.src, g.dst, g.probabilities, params)
    g.cluster_labels = labels
    return labels, tree


class EwscamClusterer(BaseEstimator, ClusterMixin):
    """Estimator facade: ``fit`` accepts a TrackGraph with probabilities or
    an (m, 3) array of [src_index, dst_index, probability] rows."""

    def __init__(self, min_cluster_size=4, threshold=0.2):
        self.min_cluster_size = min_cluster_size
        self.threshold = threshold

    def fit(self, X, y=None):
        params = ClusterParams(min_cluster_size=self.min_cluster_size, threshold=self.threshold)
        if hasattr(X, "probabilities"):
            labels, tree = cluster(X, params)
        else:
            rows = np.asarray(X, dtype=float)
            if rows.ndim != 2 or rows.shape[1] != 3:
                raise ValueError("expected a TrackGraph or an (m, 3) array [src, dst, p]")
            n = int(rows[:, :2].max()) + 1 if len(rows) else 0
            labels, tree = cluster_probabilities(
                n, rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64), rows[:, 2], params
            )
        self.labels_ = labels
        self.condensed_tree_ = tree
        return self


# ---------------------------------------------------------------------------
# condensed tree export


def condensed_tree_to_dict(tree: CondensedTree) -> dict:
    stab = tree.stability()
    sel = _eom_selection(tree)
    return {
        "n_points": tree.n_points,
        "clusters": [
            {
                "id": cid,
                "parent": tree.parent_of[cid],
                "lambda_birth": tree.birth[cid],
                "lambda_death": tree.death(cid),
                "size": tree.size[cid],
                "stability": stab[cid],
                "selected": cid in sel,
            }
            for cid in tree.cluster_ids()
        ],
    }


def export_condensed_json(tree: CondensedTree, path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(condensed_tree_to_dict(tree), fh, sort_keys=True, indent=1)
        fh.write("\n")


def export_condensed_dot(tree: CondensedTree, path) -> None:
    """Graphviz rendering of the cluster hierarchy; selected clusters are
    drawn with a double outline."""
    doc = condensed_tree_to_dict(tree)
    lines = ["digraph condensed_tree {", '  node [shape=circle, fontsize=10];']
    for c in doc["clusters"]:
        shape = "doublecircle" if c["selected"] else "circle"
        label = f"#{c['id']}\\nsize={c['size']}\\nl=[{c['lambda_birth']:.3g},{c['lambda_death']:.3g}]"
        lines.append(f'  n{c["id"]} [shape={shape}, label="{label}"];')
    for c in doc["clusters"]:
        if c["parent"] != -1:
            lines.append(f'  n{c["parent"]} -> n{c["id"]};')
    lines.append("}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
