"""Hierarchical visual vocabulary: recursive K-means tree, incremental CF tree,
BoW vectors and similarity scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# --- clustering features ----------------------------------------------------

@dataclass
class ClusteringFeature:
    """Additive cluster summary: count, linear sum and squared sum."""

    n: int
    ls: np.ndarray
    ss: float

    @staticmethod
    def of(x):
        x = np.asarray(x, dtype=float)
        return ClusteringFeature(1, x.copy(), float(x @ x))

    def merged(self, other) -> "ClusteringFeature":
        return ClusteringFeature(self.n + other.n, self.ls + other.ls,
                                 self.ss + other.ss)

    def add_point(self, x):
        self.n += 1
        self.ls = self.ls + x
        self.ss = self.ss + float(x @ x)

    @property
    def centroid(self):
        return self.ls / self.n

    @property
    def radius(self) -> float:
        """RMS distance of the summarized points to the centroid."""
        c = self.centroid
        var = self.ss / self.n - float(c @ c)
        return float(np.sqrt(max(var, 0.0)))


# --- seeded K-means ---------------------------------------------------------

def _kmeans(points, weights, k, rng, max_iters=25, tol=1e-6):
    """Weighted Lloyd iteration with k-means++ seeding.

    Returns (centers (k, D), labels (N,), inertia).  Deterministic for a
    given generator state; empty clusters are re-seeded to the farthest point.
    """
    n = len(points)
    k = min(k, n)
    # k-means++ seeding
    centers = np.empty((k, points.shape[1]))
    p = weights / weights.sum()
    centers[0] = points[rng.choice(n, p=p)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        w = weights * d2
        total = w.sum()
        if total <= 0:
            centers[i] = points[int(np.argmax(d2))]
        else:
            centers[i] = points[rng.choice(n, p=w / total)]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))

    prev_inertia = np.inf
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iters):
        dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)
        inertia = float(np.sum(weights * dist[np.arange(n), labels]))
        for i in range(k):
            sel = labels == i
            wsum = weights[sel].sum()
            if wsum > 0:
                centers[i] = (weights[sel, None] * points[sel]).sum(axis=0) / wsum
            else:
                far = int(np.argmax(dist[np.arange(n), labels]))
                centers[i] = points[far]
        if prev_inertia - inertia <= tol * max(prev_inertia, 1e-30):
            break
        prev_inertia = inertia
    dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dist, axis=1)
    inertia = float(np.sum(weights * dist[np.arange(n), labels]))
    return centers, labels, inertia


# --- vocabulary tree --------------------------------------------------------

@dataclass
class TreeNode:
    centroid: np.ndarray
    children: list = field(default_factory=list)
    word_id: int = -1
    cf: ClusteringFeature | None = None

    @property
    def is_leaf(self):
        return not self.children


@dataclass
class VocabularyTree:
    branching: int
    depth: int
    dim: int
    root: TreeNode
    words: list            # leaf nodes indexed by word_id
    idf: np.ndarray        # per-word weights, ones until a database sets them

    @property
    def num_words(self):
        return len(self.words)

    def quantize(self, descriptor) -> int:
        """Greedy nearest-centroid descent; ties go to the lower child index."""
        node = self.root
        x = np.asarray(descriptor, dtype=float)
        while not node.is_leaf:
            d = [float(np.sum((x - c.centroid) ** 2)) for c in node.children]
            node = node.children[int(np.argmin(d))]
        return node.word_id

    def quantization_error(self, descriptors) -> float:
        total = 0.0
        for x in np.asarray(descriptors, dtype=float):
            w = self.quantize(x)
            total += float(np.sum((x - self.words[w].centroid) ** 2))
        return total


def build_kmeans_tree(descriptors, branching, depth, seed=0, weights=None) -> VocabularyTree:
    """Recursive seeded K-means down to `depth` levels (or until a node holds
    at most `branching` descriptors)."""
    descriptors = np.atleast_2d(np.asarray(descriptors, dtype=float))
    if len(descriptors) == 0:
        raise ValueError("need at least one descriptor")
    if weights is None:
        weights = np.ones(len(descriptors))
    weights = np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)
    words = []

    def make_leaf(pts, wts):
        wsum = wts.sum()
        centroid = (wts[:, None] * pts).sum(axis=0) / wsum
        cf = ClusteringFeature(int(round(wsum)), (wts[:, None] * pts).sum(axis=0),
                               float(np.sum(wts * np.einsum("ij,ij->i", pts, pts))))
        node = TreeNode(centroid, word_id=len(words), cf=cf)
        words.append(node)
        return node

    def build(pts, wts, level):
        if level == depth or len(pts) == 1:
            return make_leaf(pts, wts)
        if len(pts) <= branching:
            # few enough points: each distinct descriptor becomes a word
            uniq, inv = np.unique(pts, axis=0, return_inverse=True)
            if len(uniq) == 1:
                return make_leaf(pts, wts)
            node = TreeNode(pts.mean(axis=0))
            for i in range(len(uniq)):
                sel = inv == i
                node.children.append(make_leaf(pts[sel], wts[sel]))
            return node
        centers, labels, _ = _kmeans(pts, wts, branching, rng)
        node = TreeNode(centers.mean(axis=0))
        for i in range(len(centers)):
            sel = labels == i
            if not np.any(sel):
                continue
            child = build(pts[sel], wts[sel], level + 1)
            node.children.append(child)
        if len(node.children) == 1:
            # degenerate split: collapse to the single child
            return node.children[0]
        return node

    root = build(descriptors, weights, 0)
    # word ids were assigned in DFS construction order; re-index to be safe
    for wid, node in enumerate(words):
        node.word_id = wid
    return VocabularyTree(branching, depth, descriptors.shape[1], root,
                          words, np.ones(len(words)))


# --- BIRCH-style CF tree ----------------------------------------------------

class CFNode:
    __slots__ = ("is_leaf", "cfs", "children")

    def __init__(self, is_leaf):
        self.is_leaf = is_leaf
        self.cfs = []        # one CF per entry
        self.children = []   # parallel to cfs for internal nodes

    def entry_count(self):
        return len(self.cfs)


class CFTree:
    """Single-pass clustering-feature tree; never stores raw descriptors."""

    def __init__(self, dim, leaf_radius_threshold=0.5, max_children=10):
        self.dim = dim
        self.leaf_radius_threshold = leaf_radius_threshold
        self.max_children = max_children
        self.root = CFNode(is_leaf=True)

    # insertion ------------------------------------------------------------

    def insert(self, descriptor):
        x = np.asarray(descriptor, dtype=float)
        split = self._insert(self.root, x)
        if split is not None:
            new_root = CFNode(is_leaf=False)
            for node in split:
                new_root.children.append(node)
                new_root.cfs.append(_node_cf(node))
            self.root = new_root

    def _insert(self, node, x):
        """Returns None or a (left, right) pair when the node split."""
        if node.is_leaf:
            if node.cfs:
                d = [np.sum((x - cf.centroid) ** 2) for cf in node.cfs]
                i = int(np.argmin(d))
                merged = node.cfs[i].merged(ClusteringFeature.of(x))
                if merged.radius <= self.leaf_radius_threshold:
                    node.cfs[i] = merged
                    return None
            node.cfs.append(ClusteringFeature.of(x))
        else:
            d = [np.sum((x - cf.centroid) ** 2) for cf in node.cfs]
            i = int(np.argmin(d))
            child_split = self._insert(node.children[i], x)
            if child_split is None:
                node.cfs[i] = _node_cf(node.children[i])
            else:
                left, right = child_split
                node.children[i] = left
                node.cfs[i] = _node_cf(left)
                node.children.append(right)
                node.cfs.append(_node_cf(right))
        if node.entry_count() > self.max_children:
            return self._split(node)
        return None

    def _split(self, node):
        """BIRCH split: seed with the two farthest entries, assign the rest."""
        cents = np.array([cf.centroid for cf in node.cfs])
        n = len(cents)
        d = np.sum((cents[:, None, :] - cents[None, :, :]) ** 2, axis=2)
        i, j = np.unravel_index(int(np.argmax(d)), d.shape)
        left, right = CFNode(node.is_leaf), CFNode(node.is_leaf)
        for k in range(n):
            target = left if d[k, i] <= d[k, j] else right
            target.cfs.append(node.cfs[k])
            if not node.is_leaf:
                target.children.append(node.children[k])
        return left, right

    # queries --------------------------------------------------------------

    def leaves(self):
        """All leaf-level clustering features, in deterministic order."""
        out = []

        def walk(node):
            if node.is_leaf:
                out.extend(node.cfs)
            else:
                for child in node.children:
                    walk(child)

        walk(self.root)
        return out

    def total_cf(self):
        cfs = self.leaves()
        if not cfs:
            return None
        total = cfs[0]
        for cf in cfs[1:]:
            total = total.merged(cf)
        return total


def _node_cf(node):
    total = None
    for cf in node.cfs:
        total = cf if total is None else total.merged(cf)
    return total


def cf_insert(tree: CFTree, descriptor):
    """Insert one descriptor; returns the tree for chaining."""
    tree.insert(descriptor)
    return tree


def cf_global_refine(tree: CFTree, branching, depth, seed=0) -> VocabularyTree:
    """Weighted hierarchical K-means over the CF leaf centroids."""
    cfs = tree.leaves()
    if not cfs:
        raise ValueError("empty CF tree")
    centroids = np.array([cf.centroid for cf in cfs])
    weights = np.array([float(cf.n) for cf in cfs])
    return build_kmeans_tree(centroids, branching, depth, seed=seed, weights=weights)


# --- bag of words -----------------------------------------------------------

@dataclass
class BowVector:
    """Sparse L2-normalized word->weight map (empty allowed)."""

    weights: dict = field(default_factory=dict)

    def __bool__(self):
        return bool(self.weights)

    @property
    def support(self):
        return set(self.weights)


def bow_from_counts(counts: dict, idf) -> BowVector:
    """tf-idf weights from raw word counts, L2 normalized."""
    total = sum(counts.values())
    if total == 0:
        return BowVector()
    weights = {}
    for word, c in counts.items():
        w = (c / total) * float(idf[word])
        if w > 0:
            weights[word] = w
    norm = np.sqrt(sum(w * w for w in weights.values()))
    if norm == 0:
        return BowVector()
    return BowVector({w: v / norm for w, v in sorted(weights.items())})


def word_counts(tree: VocabularyTree, features) -> dict:
    counts = {}
    for desc in features.descriptors:
        w = tree.quantize(desc)
        counts[w] = counts.get(w, 0) + 1
    return counts


def compute_bow(tree: VocabularyTree, features) -> BowVector:
    """tf-idf BoW of a feature set using the tree's current idf weights."""
    return bow_from_counts(word_counts(tree, features), tree.idf)


def similarity(a: BowVector, b: BowVector) -> float:
    """Sparse inner product; 1.0 for identical nonempty vectors."""
    if len(a.weights) > len(b.weights):
        a, b = b, a
    return float(sum(w * b.weights.get(k, 0.0) for k, w in a.weights.items()))
