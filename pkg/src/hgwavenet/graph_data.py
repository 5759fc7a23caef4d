"""Dynamic-graph ingestion, snapshot partitioning, diffusion stacks and graph statistics."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations, islice
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path

log = logging.getLogger(__name__)


class EdgeParseError(ValueError):
    pass


class NegativeSamplingError(RuntimeError):
    pass


@dataclass
class Snapshot:
    index: int
    edges: np.ndarray  # (E, 2) int64, canonical (min, max), unique, no self-loops
    num_nodes: int

    def __post_init__(self):
        self.edges = canonical_edges(self.edges)
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= self.num_nodes):
            raise ValueError(f"snapshot {self.index}: node id outside [0, {self.num_nodes})")

    def edge_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edges.tolist()))


@dataclass
class DynamicGraph:
    snapshots: list[Snapshot]
    split: int
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        T = len(self.snapshots) - 1
        if not 1 <= self.split <= T:
            raise ValueError(f"split must lie in [1, {T}], got {self.split}")
        sizes = {s.num_nodes for s in self.snapshots}
        if len(sizes) != 1:
            raise ValueError("snapshots disagree on the node count")
        idx = [s.index for s in self.snapshots]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("snapshot indices must be strictly increasing")

    @property
    def num_nodes(self) -> int:
        return self.snapshots[0].num_nodes

    def __len__(self):
        return len(self.snapshots)

    def union(self) -> Snapshot:
        edges = np.concatenate([s.edges for s in self.snapshots]) if self.snapshots else np.zeros((0, 2))
        return Snapshot(-1, edges, self.num_nodes)


@dataclass
class DiffusionStack:
    powers: list[sp.csr_matrix]

    @property
    def K(self) -> int:
        return len(self.powers) - 1


@dataclass
class EdgeSampleBatch:
    positives: np.ndarray
    negatives: np.ndarray
    seed: int | None = None


def canonical_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return e
    return np.unique(e, axis=0)


# ----------------------------------------------------------------------------- ingestion

def load_edge_stream(source, fmt: str = "tsv"):
    """Parse ``src<TAB>dst<TAB>timestamp`` lines.

    ``source`` may be a path, bytes, text or a binary/text stream.  Node ids are
    remapped to ``[0, N)`` in order of first appearance.  Returns
    ``(edges (E,2) int64, timestamps (E,) int64, N)``.
    """
    if fmt != "tsv":
        raise ValueError(f"unsupported edge-stream format {fmt!r}")
    text = _read_text(source)
    ids: dict[str, int] = {}
    src, dst, ts = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise EdgeParseError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        try:
            a, b, t = (int(p) for p in parts)
        except ValueError:
            raise EdgeParseError(f"line {lineno}: non-integer field in {line!r}") from None
        for raw in (a, b):
            ids.setdefault(str(raw), len(ids))
        src.append(ids[str(a)])
        dst.append(ids[str(b)])
        ts.append(t)
    if not src:
        raise EdgeParseError("empty edge stream")
    edges = np.stack([np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)], axis=1)
    return edges, np.array(ts, dtype=np.int64), len(ids)


def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode()
    if hasattr(source, "read"):
        data = source.read()
        return data.decode() if isinstance(data, bytes) else data
    if isinstance(source, str) and ("\n" in source or "\t" in source):
        return source
    return Path(source).read_text()


def partition_snapshots(edges, timestamps, num_nodes: int, num_snapshots: int,
                        split: int | float | str = 0.7) -> DynamicGraph:
    """Bucket timestamps into ``num_snapshots`` equal-width intervals over [min, max].

    ``split`` is either an integer snapshot index, a train fraction, or a
    ``"train:test"`` ratio string such as ``"8:3"``.
    """
    if num_snapshots < 2:
        raise ValueError("num_snapshots must be at least 2")
    ts = np.asarray(timestamps, dtype=np.float64)
    lo, hi = ts.min(), ts.max()
    if hi > lo:
        b = np.floor((ts - lo) / (hi - lo) * num_snapshots).astype(np.int64)
        b = np.minimum(b, num_snapshots - 1)
    else:
        b = np.zeros(len(ts), dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64)
    snaps, warnings = [], []
    for t in range(num_snapshots):
        s = Snapshot(t, edges[b == t], num_nodes)
        if len(s.edges) == 0:
            msg = f"snapshot {t} is empty"
            warnings.append(msg)
            log.warning(msg)
        snaps.append(s)
    return DynamicGraph(snaps, resolve_split(split, num_snapshots), warnings)


def resolve_split(split, num_snapshots: int) -> int:
    if isinstance(split, str):
        if ":" in split:
            a, b = (int(x) for x in split.split(":"))
            if a + b != num_snapshots:
                raise ValueError(f"split ratio {split} does not add up to {num_snapshots} snapshots")
            return a
        split = float(split) if "." in split else int(split)
    if isinstance(split, float):
        return max(1, min(num_snapshots - 1, int(round(split * num_snapshots))))
    return int(split)


def load_snapshot_dir(path, split: int | float | str = 0.7) -> DynamicGraph:
    """Read ``snapshots/000.tsv, 001.tsv, ...`` (``src<TAB>dst`` per line)."""
    root = Path(path)
    if (root / "snapshots").is_dir():
        root = root / "snapshots"
    files = sorted(root.glob("*.tsv"))
    if not files:
        raise FileNotFoundError(f"no snapshot .tsv files under {root}")
    ids: dict[str, int] = {}
    raw = []
    for f in files:
        pairs = []
        for lineno, line in enumerate(f.read_text().splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise EdgeParseError(f"{f.name} line {lineno}: expected 2 fields")
            for p in parts[:2]:
                ids.setdefault(p, len(ids))
            pairs.append((ids[parts[0]], ids[parts[1]]))
        raw.append(pairs)
    n = len(ids)
    snaps = [Snapshot(t, np.array(p, dtype=np.int64).reshape(-1, 2), n) for t, p in enumerate(raw)]
    return DynamicGraph(snaps, resolve_split(split, len(snaps)))


def load_dataset(path, fmt: str = "tsv", num_snapshots: int | None = None,
                 split: int | float | str = 0.7) -> DynamicGraph:
    if fmt == "snapshots":
        return load_snapshot_dir(path, split)
    edges, ts, n = load_edge_stream(path, fmt)
    if num_snapshots is None:
        raise ValueError("num_snapshots is required for an edge stream")
    return partition_snapshots(edges, ts, n, num_snapshots, split)


# ----------------------------------------------------------------------------- diffusion

def normalized_adjacency(s: Snapshot) -> sp.csr_matrix:
    """Row-normalised (symmetrised adjacency + self-loops)."""
    n = s.num_nodes
    e = s.edges
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # duplicate entries collapse to a single edge
    deg = np.asarray(a.sum(axis=1)).ravel()
    return sp.diags(1.0 / deg) @ a


def build_diffusion_stack(s: Snapshot, K: int) -> DiffusionStack:
    if K < 0:
        raise ValueError("K must be nonnegative")
    a = normalized_adjacency(s).tocsr()
    powers = [sp.identity(s.num_nodes, format="csr")]
    for _ in range(K):
        nxt = (powers[-1] @ a).tocsr()
        nxt.sort_indices()
        powers.append(nxt)
    for p in powers:
        p.sort_indices()
    return DiffusionStack(powers)


def stationary_truncation(a, alpha: float, K: int) -> np.ndarray:
    """Truncated restart-walk series ``sum_k alpha (1-alpha)^k A^k`` (dense)."""
    a = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    pw = np.eye(a.shape[0])
    for k in range(K + 1):
        out += alpha * (1 - alpha) ** k * pw
        pw = pw @ a
    return out


# ----------------------------------------------------------------------------- sampling

def sample_negative_edges(s: Snapshot, count: int, seed) -> EdgeSampleBatch:
    """Uniform rejection sampling of pairs (i != j) absent from the snapshot (either direction)."""
    n = s.num_nodes
    rng = np.random.default_rng(seed)
    taken = set(s.edge_set())
    negatives = []
    budget = 1000 * max(count, 1)
    rejections = 0
    while len(negatives) < count:
        need = count - len(negatives)
        cand = rng.integers(0, n, size=(max(2 * need, 16), 2))
        for i, j in cand.tolist():
            key = (i, j) if i < j else (j, i)
            if i == j or key in taken:
                rejections += 1
                if rejections > budget:
                    raise NegativeSamplingError(
                        f"could not draw {count} negatives from snapshot {s.index}: graph too dense")
                continue
            negatives.append((i, j))
            if len(negatives) == count:
                break
    neg = np.array(negatives, dtype=np.int64).reshape(-1, 2)
    return EdgeSampleBatch(s.edges.copy(), neg, seed)


# ----------------------------------------------------------------------------- gromov delta

def _largest_component(s: Snapshot):
    n = s.num_nodes
    e = s.edges
    a = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    a = a + a.T
    _, labels = connected_components(a, directed=False)
    big = np.argmax(np.bincount(labels))
    keep = np.flatnonzero(labels == big)
    return a[keep][:, keep], keep


def _quad_delta(dist, q):
    w, x, y, z = q.T
    s1 = dist[w, x] + dist[y, z]
    s2 = dist[w, y] + dist[x, z]
    s3 = dist[w, z] + dist[x, y]
    s = np.sort(np.stack([s1, s2, s3], axis=1), axis=1)
    return (s[:, 2] - s[:, 1]) / 2.0


def gromov_delta_estimate(s: Snapshot, num_quadruples: int = 1_000_000, seed=0,
                          chunk: int = 4096) -> float:
    """Four-point Gromov hyperbolicity on the largest connected component.

    Exhaustive when the component has at most ``num_quadruples`` 4-subsets;
    otherwise the max over a seeded stream of quadruples drawn in fixed-size
    chunks (so a larger budget always extends a smaller one).
    """
    adj, keep = _largest_component(s)
    m = len(keep)
    if m < 4:
        log.warning("largest component has %d < 4 nodes; delta reported as 0", m)
        return 0.0
    dist = shortest_path(adj, unweighted=True, directed=False)
    if math.comb(m, 4) <= num_quadruples:
        best = 0.0
        it = combinations(range(m), 4)
        while True:
            block = np.array(list(islice(it, 65536)), dtype=np.int64).reshape(-1, 4)
            if len(block) == 0:
                break
            best = max(best, float(_quad_delta(dist, block).max()))
        return best
    rng = np.random.default_rng(seed)
    best = 0.0
    drawn = 0
    while drawn < num_quadruples:
        q = rng.integers(0, m, size=(chunk, 4))
        q = q[: num_quadruples - drawn]
        best = max(best, float(_quad_delta(dist, q).max()))
        drawn += len(q)
    return best


# ----------------------------------------------------------------------------- stats / fixtures

def graph_stats(g: DynamicGraph, num_quadruples: int = 1_000_000, seed=0) -> dict:
    union = g.union()
    return {
        "nodes": g.num_nodes,
        "edges": int(len(union.edges)),
        "snapshots": len(g.snapshots),
        "delta_estimate": gromov_delta_estimate(union, num_quadruples, seed),
    }


def synthetic_dynamic_graph(num_nodes: int = 60, num_snapshots: int = 8, split=None,
                            branching: int = 3, persistence: float = 0.8,
                            edges_per_snapshot: int | None = None, seed=0) -> DynamicGraph:
    """Tree-structured communities with persistent, slowly drifting edges.

    Nodes hang off a random ``branching``-ary hierarchy; each snapshot keeps a
    ``persistence`` fraction of the previous snapshot's edges and refills with
    pairs drawn preferentially between hierarchy-close nodes.
    """
    rng = np.random.default_rng(seed)
    parent = np.full(num_nodes, -1)
    for i in range(1, num_nodes):
        parent[i] = rng.integers(max(0, (i - 1) // branching - 1), (i - 1) // branching + 1)
    depth = np.zeros(num_nodes, dtype=int)
    for i in range(1, num_nodes):
        depth[i] = depth[parent[i]] + 1
    tree = np.stack([np.arange(1, num_nodes), parent[1:]], axis=1)
    tree_snap = Snapshot(0, tree, num_nodes)
    hops = shortest_path(normalized_adjacency(tree_snap) > 0, unweighted=True, directed=False)
    weight = np.exp(-1.2 * hops)
    np.fill_diagonal(weight, 0.0)
    weight = np.triu(weight)
    flat = weight.ravel() / weight.sum()
    target = edges_per_snapshot or 2 * num_nodes
    current = set()
    snaps = []
    for t in range(num_snapshots):
        kept = {e for e in current if rng.random() < persistence}
        while len(kept) < target:
            k = rng.choice(flat.size, p=flat)
            i, j = divmod(int(k), num_nodes)
            kept.add((i, j))
        current = kept
        snaps.append(Snapshot(t, np.array(sorted(current), dtype=np.int64), num_nodes))
    if split is None:
        split = max(1, num_snapshots - max(1, num_snapshots // 4))
    return DynamicGraph(snaps, resolve_split(split, num_snapshots))


def write_edge_stream(g: DynamicGraph, path) -> None:
    """Write a graph as a ``src<TAB>dst<TAB>snapshot`` stream."""
    buf = io.StringIO()
    for s in g.snapshots:
        for i, j in s.edges.tolist():
            buf.write(f"{i}\t{j}\t{s.index}\n")
    Path(path).write_text(buf.getvalue())
