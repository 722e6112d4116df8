"""Budgeted episode memory with concept condensation.

Encoded episodes are stored per class. When an increment would exceed the
global unit budget K, per-class reduction targets are computed and each
over-target class is condensed by greedily merging its closest items
(episodes and concept pairs) into centroid/diagonal-variance concept pairs.

Unit accounting: an episode costs 1 unit, a concept pair costs 2 (centroid +
covariance diagonal). Distances are squared Euclidean (same ordering as
Euclidean). Ties break on the lowest (i, j) item-index pair; a merged item
takes over the smaller of the two constituent indices.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, FormatError, InvariantError

STORE_MAGIC = b"EECM"
STORE_VERSION = 1


@dataclass
class EncodedEpisode:
    """One flattened latent embedding with its class label and source task."""

    embedding: np.ndarray
    label: int
    task: int

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.embedding).all():
            raise InvariantError("episode embedding must be finite")


@dataclass
class ConceptPair:
    """Centroid + per-dimension population variance of merged episodes."""

    centroid: np.ndarray
    variance: np.ndarray
    weight: int
    label: int
    task: int
    constituents: list | None = None  # test-mode log of member embeddings

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(-1)
        self.variance = np.asarray(self.variance, dtype=np.float64).reshape(-1)
        if self.variance.shape != self.centroid.shape:
            raise InvariantError("centroid/variance length mismatch")
        if (self.variance < -1e-12).any():
            raise InvariantError("variance entries must be nonnegative")
        self.variance = np.maximum(self.variance, 0.0)
        if self.weight < 2:
            raise InvariantError("a concept pair summarizes at least 2 episodes")


Item = EncodedEpisode | ConceptPair


def item_units(item: Item) -> int:
    return 1 if isinstance(item, EncodedEpisode) else 2


def _vec(item: Item) -> np.ndarray:
    return item.embedding if isinstance(item, EncodedEpisode) else item.centroid


def _weight(item: Item) -> int:
    return 1 if isinstance(item, EncodedEpisode) else item.weight


class MemoryStore:
    """Per-class episode/concept collections under a global unit budget.

    capacity == 0 means unlimited. `track_constituents` keeps a per-pair log
    of member embeddings so tests can recompute centroids/variances from
    scratch; leave it off for real runs.
    """

    def __init__(self, latent_dim: int, capacity: int = 0,
                 track_constituents: bool = False):
        self.latent_dim = latent_dim
        self.capacity = capacity
        self.track_constituents = track_constituents
        self.classes: dict[int, list[Item]] = {}
        self.ae_blobs: dict[int, bytes] = {}

    def items(self, label: int) -> list[Item]:
        return self.classes.get(label, [])

    def class_units(self, label: int) -> int:
        return sum(item_units(it) for it in self.items(label))

    def episodes(self, label: int | None = None) -> list[EncodedEpisode]:
        labels = [label] if label is not None else sorted(self.classes)
        return [it for lb in labels for it in self.items(lb)
                if isinstance(it, EncodedEpisode)]

    def pairs(self, label: int | None = None) -> list[ConceptPair]:
        labels = [label] if label is not None else sorted(self.classes)
        return [it for lb in labels for it in self.items(lb)
                if isinstance(it, ConceptPair)]

    def tasks(self) -> list[int]:
        return sorted({it.task for items in self.classes.values() for it in items})


def memory_units(store: MemoryStore) -> int:
    """Total stored units: episodes x1 + concept pairs x2."""
    return sum(store.class_units(lb) for lb in store.classes)


def insert_episodes(store: MemoryStore, episodes: list[EncodedEpisode]) -> None:
    """Append episodes to their class buckets (no condensation, no dedup)."""
    for ep in episodes:
        if ep.embedding.shape[0] != store.latent_dim:
            raise InvariantError(
                f"episode dim {ep.embedding.shape[0]} != store dim "
                f"{store.latent_dim}")
        store.classes.setdefault(ep.label, []).append(ep)


def merge_items(a: Item, b: Item, track_constituents: bool = False) -> ConceptPair:
    """Merge two same-class items into a concept pair via pooled moments.

    centroid = weighted mean; variance = exact population variance of the
    union of constituents per dimension; weight = sum of weights; task is
    the earlier of the two task ids.
    """
    if a.label != b.label:
        raise InvariantError(f"cannot merge labels {a.label} and {b.label}")
    wa, wb = _weight(a), _weight(b)
    ca, cb = _vec(a), _vec(b)
    va = a.variance if isinstance(a, ConceptPair) else np.zeros_like(ca)
    vb = b.variance if isinstance(b, ConceptPair) else np.zeros_like(cb)
    w = wa + wb
    centroid = (wa * ca + wb * cb) / w
    variance = (wa * va + wb * vb) / w + (wa * wb) * (ca - cb) ** 2 / (w * w)
    constituents = None
    if track_constituents:
        constituents = []
        for it in (a, b):
            if isinstance(it, ConceptPair):
                if it.constituents is None:
                    raise InvariantError("constituent log missing on merged pair")
                constituents.extend(it.constituents)
            else:
                constituents.append(it.embedding)
    return ConceptPair(centroid, variance, w, a.label,
                       min(a.task, b.task), constituents)


def reduction_targets(store: MemoryStore, incoming_count: int,
                      capacity: int) -> dict[int, int]:
    """Per-class unit targets so that stored + incoming units fit capacity.

    No reduction if everything fits (or capacity == 0, unlimited). Otherwise
    each old class y is floored to N_y * (1 - K_r / K_prev), adjusted to a
    value its composition can actually reach (>= 2 units for multi-item
    classes; even for all-pair classes); residual over-budget units are then
    removed from the largest classes first.
    """
    counts = {lb: store.class_units(lb) for lb in sorted(store.classes)}
    if capacity <= 0:
        return counts
    if incoming_count > capacity:
        raise BudgetError(
            f"incoming {incoming_count} units exceed capacity {capacity}")
    k_prev = sum(counts.values())
    if k_prev + incoming_count <= capacity:
        return counts
    k_r = k_prev + incoming_count - capacity
    frac = 1.0 - k_r / k_prev

    def feasible(label: int, target: int) -> int:
        items = store.items(label)
        units = counts[label]
        n_eps = sum(1 for it in items if isinstance(it, EncodedEpisode))
        target = min(target, units)
        floor = 1 if (len(items) == 1 and n_eps == 1) else min(2, units)
        target = max(target, floor)
        # all-pair classes can only shed units two at a time
        if n_eps == 0 and (units - target) % 2 == 1:
            target = max(target - 1, floor)
        return target

    targets = {lb: feasible(lb, int(np.floor(n * frac)))
               for lb, n in counts.items()}
    # flooring already keeps the sum under budget; this pass covers the
    # feasibility adjustments that may have pushed a class back up
    while sum(targets.values()) + incoming_count > capacity:
        candidates = [lb for lb in targets
                      if targets[lb] > feasible(lb, 0)]
        if not candidates:
            raise BudgetError("cannot reduce stored classes to fit capacity")
        biggest = max(candidates, key=lambda lb: (targets[lb], -lb))
        targets[biggest] = feasible(biggest, targets[biggest] - 1)
    return targets


def _pairwise_sq_dists(vecs: np.ndarray) -> np.ndarray:
    """Upper-triangular squared-distance matrix, +inf elsewhere."""
    n = vecs.shape[0]
    d = np.full((n, n), np.inf)
    if n <= 1024:
        for i in range(n - 1):
            d[i, i + 1:] = ((vecs[i + 1:] - vecs[i]) ** 2).sum(axis=1)
    else:
        sq = (vecs * vecs).sum(axis=1)
        gram = vecs @ vecs.T
        full = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
        iu = np.triu_indices(n, k=1)
        d[iu] = full[iu]
    return d


def condense_class(store: MemoryStore, label: int, target_units: int) -> None:
    """Greedily merge the closest same-class items until units <= target.

    The merged pair replaces the lower-indexed constituent. Merges that
    would make the exact target unreachable (overshooting it, or stranding
    an all-pair class with an odd remaining gap) are skipped while a
    reachable alternative exists.
    """
    items = store.items(label)
    units = store.class_units(label)
    gap = units - target_units
    if gap <= 0 or len(items) < 2:
        return

    n = len(items)
    vecs = np.stack([_vec(it) for it in items])
    dist = _pairwise_sq_dists(vecs)
    alive = np.ones(n, dtype=bool)
    is_pair = np.array([isinstance(it, ConceptPair) for it in items])
    objs: list[Item | None] = list(items)
    n_eps = int((~is_pair).sum())

    def admissible(i: int, j: int) -> bool:
        dec = int(is_pair[i]) + int(is_pair[j])
        if dec > gap:
            return False
        rest = gap - dec
        if rest == 0:
            return True
        # dec 0 consumes 2 episodes, dec 1 consumes 1, dec 2 none
        eps_after = n_eps - (2, 1, 0)[dec]
        return eps_after >= 1 or rest % 2 == 0

    while gap > 0 and alive.sum() >= 2:
        i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
        if not np.isfinite(dist[i, j]):
            break
        if not admissible(i, j):
            masked = dist.copy()
            cand = None
            while True:
                flat = int(np.argmin(masked))
                a, b = np.unravel_index(flat, masked.shape)
                if not np.isfinite(masked[a, b]):
                    break
                if admissible(a, b):
                    cand = (a, b)
                    break
                masked[a, b] = np.inf
            if cand is None:
                # target unreachable from here; fall back to closest merge
                cand = (i, j)
            i, j = cand
        dec = int(is_pair[i]) + int(is_pair[j])
        merged = merge_items(objs[i], objs[j],
                             track_constituents=store.track_constituents)
        n_eps -= (2, 1, 0)[dec]
        gap -= dec
        # merged item takes slot i (the smaller index); slot j dies
        objs[i] = merged
        objs[j] = None
        is_pair[i] = True
        alive[j] = False
        vecs[i] = merged.centroid
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        others = np.where(alive)[0]
        others = others[others != i]
        if others.size:
            d = ((vecs[others] - vecs[i]) ** 2).sum(axis=1)
            lo = others[others < i]
            hi = others[others > i]
            dist[lo, i] = d[: lo.size]
            dist[i, hi] = d[lo.size:]

    store.classes[label] = [it for it in objs if it is not None]


def enforce_budget(store: MemoryStore, incoming: list[EncodedEpisode],
                   capacity: int) -> None:
    """Condense old classes to their reduction targets, then insert incoming."""
    targets = reduction_targets(store, len(incoming), capacity)
    for label, target in targets.items():
        condense_class(store, label, target)
    insert_episodes(store, incoming)
    if capacity > 0 and memory_units(store) > capacity:
        raise BudgetError(
            f"store holds {memory_units(store)} units after condensation, "
            f"capacity is {capacity}")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _write_vec(buf: io.BytesIO, vec: np.ndarray) -> None:
    buf.write(vec.astype("<f4").tobytes())


def save_store(store: MemoryStore, path: str) -> None:
    """Write the store in the EECM v1 binary format (little-endian, f32)."""
    buf = io.BytesIO()
    buf.write(STORE_MAGIC)
    buf.write(struct.pack("<III", STORE_VERSION, store.latent_dim,
                          len(store.classes)))
    for label in sorted(store.classes):
        eps = store.episodes(label)
        pairs = store.pairs(label)
        buf.write(struct.pack("<III", label, len(eps), len(pairs)))
        for ep in eps:
            _write_vec(buf, ep.embedding)
            buf.write(struct.pack("<I", ep.task))
        for pr in pairs:
            _write_vec(buf, pr.centroid)
            _write_vec(buf, pr.variance)
            buf.write(struct.pack("<II", pr.weight, pr.task))
    buf.write(struct.pack("<I", len(store.ae_blobs)))
    for task in sorted(store.ae_blobs):
        blob = store.ae_blobs[task]
        buf.write(struct.pack("<IQ", task, len(blob)))
        buf.write(blob)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(
                f"truncated store file: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_store(path: str) -> MemoryStore:
    """Read a store written by `save_store`; corrupt input raises FormatError."""
    try:
        with open(path, "rb") as fh:
            r = _Reader(fh.read())
    except OSError as exc:
        raise FormatError(f"cannot read store file {path}: {exc}") from exc
    if r.take(4) != STORE_MAGIC:
        raise FormatError("bad magic: not an EECM store file")
    version, latent_dim, class_count = r.unpack("<III")
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}")
    if latent_dim < 1 or latent_dim > 1 << 24:
        raise FormatError(f"implausible latent dimension {latent_dim}")
    store = MemoryStore(latent_dim)
    vec_bytes = 4 * latent_dim
    for _ in range(class_count):
        label, n_eps, n_pairs = r.unpack("<III")
        items: list[Item] = []
        for _ in range(n_eps):
            emb = np.frombuffer(r.take(vec_bytes), dtype="<f4").astype(np.float64)
            (task,) = r.unpack("<I")
            items.append(EncodedEpisode(emb, label, task))
        for _ in range(n_pairs):
            cen = np.frombuffer(r.take(vec_bytes), dtype="<f4").astype(np.float64)
            var = np.frombuffer(r.take(vec_bytes), dtype="<f4").astype(np.float64)
            weight, task = r.unpack("<II")
            if weight < 2:
                raise FormatError(f"concept pair with weight {weight} < 2")
            items.append(ConceptPair(cen, var, weight, label, task))
        store.classes[label] = items
    (blob_count,) = r.unpack("<I")
    for _ in range(blob_count):
        task, length = r.unpack("<IQ")
        store.ae_blobs[task] = r.take(length)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes in store file")
    return store


def stores_equal(a: MemoryStore, b: MemoryStore) -> bool:
    """Exact equality of contents (embeddings, pairs, blobs)."""
    if a.latent_dim != b.latent_dim or sorted(a.classes) != sorted(b.classes):
        return False
    for label in a.classes:
        ia, ib = a.items(label), b.items(label)
        ea = [x for x in ia if isinstance(x, EncodedEpisode)]
        eb = [x for x in ib if isinstance(x, EncodedEpisode)]
        pa = [x for x in ia if isinstance(x, ConceptPair)]
        pb = [x for x in ib if isinstance(x, ConceptPair)]
        if len(ea) != len(eb) or len(pa) != len(pb):
            return False
        for x, y in zip(ea, eb):
            if x.task != y.task or not np.array_equal(x.embedding, y.embedding):
                return False
        for x, y in zip(pa, pb):
            if (x.task != y.task or x.weight != y.weight
                    or not np.array_equal(x.centroid, y.centroid)
                    or not np.array_equal(x.variance, y.variance)):
                return False
    return a.ae_blobs == b.ae_blobs
