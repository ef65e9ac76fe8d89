"""Graph data model, bundle IO, synthetic generation, homophily, edges, splits.

A graph bundle is a directory of plain text files (UTF-8, LF):

    edges.tsv      one undirected edge per line: "u<TAB>v", 0-based ids
    features.csv   row v = comma-separated real features of node v
    labels.tsv     one integer class id per line
    splits.tsv     optional: "node<TAB>{train|val|test}" per line

Graphs are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import GraphDataError

log = logging.getLogger(__name__)

EDGE_CLASSES = ("intra_id", "intra_ood", "inter")


@dataclass(frozen=True)
class Graph:
    """Undirected graph with node features, class labels, and ID/OOD flags.

    `edges` stores each undirected edge once as (min, max), lexicographically
    sorted. `indptr`/`indices` hold the symmetric CSR adjacency with both
    directions and no self-loops. identity[v] is 0 for in-distribution
    nodes and 1 for out-of-distribution nodes.
    """

    num_nodes: int
    edges: np.ndarray          # (m, 2) int64, u < v
    indptr: np.ndarray         # (num_nodes + 1,) int64
    indices: np.ndarray        # (2m,) int64
    features: np.ndarray       # (num_nodes, d) float64
    labels: np.ndarray         # (num_nodes,) int64
    identity: np.ndarray       # (num_nodes,) int8

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint boolean node masks for train/val/test."""

    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        t, v, s = self.train_mask, self.val_mask, self.test_mask
        if not (len(t) == len(v) == len(s)):
            raise GraphDataError("split masks must have equal length")
        if np.any((t.astype(int) + v.astype(int) + s.astype(int)) > 1):
            raise GraphDataError("split masks overlap")


@dataclass(frozen=True)
class EdgePartition:
    """Indices into Graph.edges keyed by endpoint identity flags."""

    intra_id: np.ndarray
    intra_ood: np.ndarray
    inter: np.ndarray


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model with Gaussian class-mean features."""

    classes: int
    nodes_per_class: int
    p_intra: float
    p_inter: float
    feature_dim: int
    class_mean_separation: float
    ood_classes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "ood_classes", frozenset(int(c) for c in self.ood_classes))
        if self.classes < 1:
            raise GraphDataError("degenerate block model: needs at least 1 class")
        if self.nodes_per_class < 1:
            raise GraphDataError("nodes_per_class must be positive")
        if not (0.0 <= self.p_inter <= self.p_intra <= 1.0):
            raise GraphDataError("homophilic generation needs 0 <= p_inter <= p_intra <= 1")
        if self.feature_dim < 1:
            raise GraphDataError("feature_dim must be positive")
        if self.class_mean_separation < 0:
            raise GraphDataError("class_mean_separation must be >= 0")
        if not self.ood_classes or not self.ood_classes < set(range(self.classes)):
            raise GraphDataError("ood_classes must be a proper nonempty subset of the classes")


def _canonical_edges(edges: np.ndarray) -> np.ndarray:
    """Sort endpoints within each edge, then lexicographically, then dedup."""
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo = edges.min(axis=1)
    hi = edges.max(axis=1)
    pairs = np.stack([lo, hi], axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    keep = np.ones(len(pairs), dtype=bool)
    keep[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
    return np.ascontiguousarray(pairs[keep])


def _build_csr(num_nodes: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    counts = np.bincount(src, minlength=num_nodes)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return indptr, dst.astype(np.int64)


def make_graph(num_nodes: int, edges, features, labels, identity) -> Graph:
    """Assemble a Graph, canonicalizing edges and validating every invariant."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    identity = np.asarray(identity, dtype=np.int8)

    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise GraphDataError(f"feature matrix must have {num_nodes} rows, got {features.shape}")
    if labels.shape != (num_nodes,):
        raise GraphDataError("label vector length mismatch")
    if identity.shape != (num_nodes,):
        raise GraphDataError("identity vector length mismatch")
    if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
        raise GraphDataError("edge endpoint out of range")
    if len(edges) and np.any(edges[:, 0] == edges[:, 1]):
        raise GraphDataError("self-loops must be dropped before graph assembly")
    if len(labels) and labels.min() < 0:
        raise GraphDataError("labels must be >= 0")
    # each class maps to exactly one identity flag
    for c in np.unique(labels):
        flags = np.unique(identity[labels == c])
        if len(flags) > 1:
            raise GraphDataError(f"class {c} maps to both identity flags")

    edges = _canonical_edges(edges)
    indptr, indices = _build_csr(num_nodes, edges)
    return Graph(num_nodes=num_nodes, edges=edges, indptr=indptr, indices=indices,
                 features=features, labels=labels, identity=identity)


# ---------------------------------------------------------------------------
# bundle IO


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise GraphDataError(f"missing bundle file: {path}")
    text = path.read_text(encoding="utf-8")
    return [ln for ln in text.split("\n") if ln.strip()]


def load_graph_bundle(path, ood_classes) -> Graph:
    """Load a bundle directory; identity[v] = 1 iff labels[v] is in ood_classes.

    Self-loops and duplicate undirected edges are dropped with a logged
    warning count. Labels must be contiguous from 0.
    """
    root = Path(path)
    ood_classes = {int(c) for c in ood_classes}
    if not ood_classes:
        raise GraphDataError("ood_classes is empty; at least one class must be out-of-distribution")

    label_lines = _read_lines(root / "labels.tsv")
    try:
        labels = np.array([int(ln.strip()) for ln in label_lines], dtype=np.int64)
    except ValueError as exc:
        raise GraphDataError(f"labels.tsv: {exc}") from None
    num_nodes = len(labels)

    feat_lines = _read_lines(root / "features.csv")
    if len(feat_lines) != num_nodes:
        raise GraphDataError(f"features.csv has {len(feat_lines)} rows, labels.tsv has {num_nodes}")
    width = feat_lines[0].count(",") + 1
    features = np.empty((num_nodes, width))
    for i, ln in enumerate(feat_lines):
        parts = ln.split(",")
        if len(parts) != width:
            raise GraphDataError(f"features.csv row {i} has {len(parts)} values, expected {width}")
        try:
            features[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise GraphDataError(f"features.csv row {i}: {exc}") from None

    edge_lines = _read_lines(root / "edges.tsv")
    raw = np.empty((len(edge_lines), 2), dtype=np.int64)
    for i, ln in enumerate(edge_lines):
        parts = ln.split("\t")
        if len(parts) != 2:
            raise GraphDataError(f"edges.tsv line {i}: expected two tab-separated ids")
        try:
            raw[i] = (int(parts[0]), int(parts[1]))
        except ValueError as exc:
            raise GraphDataError(f"edges.tsv line {i}: {exc}") from None
    if len(raw) and (raw.min() < 0 or raw.max() >= num_nodes):
        raise GraphDataError("edges.tsv references a node id out of range")

    self_loops = int((raw[:, 0] == raw[:, 1]).sum()) if len(raw) else 0
    clean = raw[raw[:, 0] != raw[:, 1]] if len(raw) else raw
    canonical = _canonical_edges(clean)
    duplicates = len(clean) - len(canonical)
    if self_loops or duplicates:
        log.warning("dropped %d self-loop(s) and %d duplicate edge(s) while loading %s",
                    self_loops, duplicates, root)

    present = set(np.unique(labels).tolist())
    expected = set(range(int(labels.max()) + 1)) if num_nodes else set()
    if present != expected:
        raise GraphDataError(f"labels must be contiguous from 0; missing {sorted(expected - present)}")
    unknown = ood_classes - present
    if unknown:
        raise GraphDataError(f"ood_classes references unknown class(es) {sorted(unknown)}")
    if ood_classes >= present:
        raise GraphDataError("ood_classes covers every class; at least one ID class is required")

    identity = np.isin(labels, sorted(ood_classes)).astype(np.int8)
    return make_graph(num_nodes, canonical, features, labels, identity)


def save_graph_bundle(graph: Graph, path) -> None:
    """Write a Graph back out in bundle format (round-trips exactly)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    with open(root / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        for row in graph.features:
            # repr round-trips doubles exactly
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(root / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for y in graph.labels:
            fh.write(f"{y}\n")


def load_splits(path, num_nodes: int) -> SplitAssignment:
    """Read a splits.tsv file into masks. Unlisted nodes land in no mask."""
    names = {"train": 0, "val": 1, "test": 2}
    masks = np.zeros((3, num_nodes), dtype=bool)
    for i, ln in enumerate(_read_lines(Path(path))):
        parts = ln.split("\t")
        if len(parts) != 2 or parts[1] not in names:
            raise GraphDataError(f"splits.tsv line {i}: expected 'node<TAB>train|val|test'")
        node = int(parts[0])
        if not 0 <= node < num_nodes:
            raise GraphDataError(f"splits.tsv line {i}: node id {node} out of range")
        masks[names[parts[1]], node] = True
    return SplitAssignment(train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


def save_splits(splits: SplitAssignment, path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        for name, mask in (("train", splits.train_mask), ("val", splits.val_mask),
                           ("test", splits.test_mask)):
            for node in np.flatnonzero(mask):
                fh.write(f"{node}\t{name}\n")


# ---------------------------------------------------------------------------
# homophily


def node_homophily(graph: Graph, node_labels) -> float:
    """Mean over degree>=1 nodes of the same-label neighbor fraction.

    Isolated nodes are excluded: the per-node ratio divides by the degree
    and is undefined at 0.
    """
    node_labels = np.asarray(node_labels)
    if node_labels.shape != (graph.num_nodes,):
        raise GraphDataError("label vector length mismatch")
    deg = graph.degrees
    if not np.any(deg > 0):
        raise GraphDataError("homophily is undefined on an edgeless graph")
    owners = np.repeat(np.arange(graph.num_nodes), deg)
    same = (node_labels[owners] == node_labels[graph.indices]).astype(np.float64)
    sums = np.zeros(graph.num_nodes)
    np.add.at(sums, owners, same)
    active = deg > 0
    return float((sums[active] / deg[active]).mean())


def identity_homophily(graph: Graph, mapping) -> float:
    """Homophily of the labels pushed through a class -> {0,1} mapping."""
    present = np.unique(graph.labels)
    missing = [int(c) for c in present if int(c) not in mapping]
    if missing:
        raise GraphDataError(f"mapping undefined for class(es) {missing}")
    lut = np.zeros(int(present.max()) + 1, dtype=np.int64)
    for c in present:
        lut[int(c)] = int(mapping[int(c)])
    return node_homophily(graph, lut[graph.labels])


def relabel_for_training(graph: Graph) -> tuple[Graph, dict[int, int]]:
    """Permute class ids so ID classes occupy 0..C_id-1.

    Classifier heads index class columns directly, so the ID label space
    must be dense from zero. Sorted ID classes come first, sorted OOD
    classes after; identity flags are untouched. Returns the relabeled
    graph and the old -> new class map. Already-ordered graphs come back
    with unchanged label values.
    """
    present = np.unique(graph.labels)
    id_classes = [int(c) for c in present if graph.identity[graph.labels == c][0] == 0]
    ood_classes = [int(c) for c in present if int(c) not in id_classes]
    class_map = {old: new for new, old in enumerate(id_classes + ood_classes)}
    lut = np.zeros(int(present.max()) + 1, dtype=np.int64)
    for old, new in class_map.items():
        lut[old] = new
    return replace(graph, labels=lut[graph.labels]), class_map


# ---------------------------------------------------------------------------
# edge partition / filtering


def partition_edges(graph: Graph) -> EdgePartition:
    """Split edge indices into intra-ID, intra-OOD, and inter classes."""
    a = graph.identity[graph.edges[:, 0]]
    b = graph.identity[graph.edges[:, 1]]
    idx = np.arange(graph.num_edges, dtype=np.int64)
    return EdgePartition(
        intra_id=idx[(a == 0) & (b == 0)],
        intra_ood=idx[(a == 1) & (b == 1)],
        inter=idx[a != b],
    )


def filter_edges(graph: Graph, keep, removal_fraction: float, seed: int) -> Graph:
    """Subsample edge classes NOT named in `keep` by `removal_fraction`.

    Kept classes pass through untouched; each other class loses
    round(fraction * count) edges chosen uniformly under the seed.
    Fraction 0 is the identity transformation; fraction 1 deletes the
    class entirely. The result shares features/labels with the input.
    """
    keep = set(keep)
    unknown = keep - set(EDGE_CLASSES)
    if unknown:
        raise GraphDataError(f"unknown edge class(es) {sorted(unknown)}; valid: {EDGE_CLASSES}")
    if not 0.0 <= removal_fraction <= 1.0:
        raise GraphDataError("removal_fraction must lie in [0, 1]")

    part = partition_edges(graph)
    rng = np.random.default_rng(seed)
    selected = np.ones(graph.num_edges, dtype=bool)
    for name in EDGE_CLASSES:  # fixed order keeps the rng stream deterministic
        if name in keep:
            continue
        members = getattr(part, name)
        n_drop = int(round(removal_fraction * len(members)))
        if n_drop:
            drop = rng.choice(members, size=n_drop, replace=False)
            selected[drop] = False

    new_edges = graph.edges[selected]
    if len(new_edges) == 0:
        log.warning("edge filter produced an edgeless graph")
    indptr, indices = _build_csr(graph.num_nodes, new_edges)
    return Graph(num_nodes=graph.num_nodes, edges=new_edges, indptr=indptr,
                 indices=indices, features=graph.features, labels=graph.labels,
                 identity=graph.identity)


# ---------------------------------------------------------------------------
# splits


def make_splits(graph: Graph, n_train_per_class: int = 20, n_val_per_class: int = 10,
                seed: int = 0) -> SplitAssignment:
    """Per-class training/validation sampling; everything else is test.

    Train takes n_train_per_class nodes from every ID class. Validation
    takes n_val_per_class more from every ID class plus the same total
    count of OOD nodes. Sampling is uniform without replacement and fully
    determined by the seed.
    """
    rng = np.random.default_rng(seed)
    id_classes = sorted(int(c) for c in np.unique(graph.labels[graph.identity == 0]))
    if not id_classes:
        raise GraphDataError("no ID classes present")

    train = np.zeros(graph.num_nodes, dtype=bool)
    val = np.zeros(graph.num_nodes, dtype=bool)
    need = n_train_per_class + n_val_per_class
    for c in id_classes:
        members = np.flatnonzero((graph.labels == c) & (graph.identity == 0))
        if len(members) < need:
            raise GraphDataError(
                f"class {c} has {len(members)} nodes, needs {need} for train+val")
        chosen = rng.choice(members, size=need, replace=False)
        train[chosen[:n_train_per_class]] = True
        val[chosen[n_train_per_class:]] = True

    ood_members = np.flatnonzero(graph.identity == 1)
    n_val_ood = n_val_per_class * len(id_classes)
    if len(ood_members) < n_val_ood:
        raise GraphDataError(
            f"{len(ood_members)} OOD nodes available, validation needs {n_val_ood}")
    val[rng.choice(ood_members, size=n_val_ood, replace=False)] = True

    test = ~(train | val)
    return SplitAssignment(train_mask=train, val_mask=val, test_mask=test)


# ---------------------------------------------------------------------------
# synthetic graphs


def sbm_generate(spec: SbmSpec, seed: int) -> Graph:
    """Block-model graph with Gaussian class-mean features.

    Each class mean sits at class_mean_separation times a deterministic
    (seed-drawn) unit direction; features add unit isotropic noise.
    """
    rng = np.random.default_rng(seed)
    n = spec.classes * spec.nodes_per_class
    labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.nodes_per_class)

    directions = rng.standard_normal((spec.classes, spec.feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    features = directions[labels] * spec.class_mean_separation \
        + rng.standard_normal((n, spec.feature_dim))

    prob = np.where(labels[:, None] == labels[None, :], spec.p_intra, spec.p_inter)
    draw = rng.random((n, n))
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    adj = (draw < prob) & upper
    edges = np.argwhere(adj).astype(np.int64)

    identity = np.isin(labels, sorted(spec.ood_classes)).astype(np.int8)
    return make_graph(n, edges, features, labels, identity)


def er_generate(num_nodes: int, p: float, num_classes: int, seed: int) -> Graph:
    """Erdős–Rényi graph with uniform random labels (property-test fodder)."""
    rng = np.random.default_rng(seed)
    draw = rng.random((num_nodes, num_nodes))
    upper = np.triu(np.ones((num_nodes, num_nodes), dtype=bool), k=1)
    edges = np.argwhere((draw < p) & upper).astype(np.int64)
    labels = rng.integers(0, num_classes, size=num_nodes)
    identity = np.zeros(num_nodes, dtype=np.int8)
    features = np.zeros((num_nodes, 1))
    return make_graph(num_nodes, edges, features, labels, identity)
