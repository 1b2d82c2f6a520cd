"""Visual vocabulary: seeded k-means over descriptors, TF-IDF weighted
BoW quantization with a single l2 normalization, and a sparse inverted
index whose scores match a dense scan.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, TrainingError

BKV1_MAGIC = b"BKV1"


@dataclass
class Vocabulary:
    centers: np.ndarray  # (k, dim) float32
    idf: np.ndarray  # (k,) float32
    training_meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.centers.astype("<f4").tobytes())
        h.update(self.idf.astype("<f4").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class BowVector:
    """Sparse l2-normalized vector: sorted word indices + positive weights."""

    indices: np.ndarray  # int64, sorted ascending
    values: np.ndarray  # float64

    @property
    def empty(self) -> bool:
        return len(self.indices) == 0

    @staticmethod
    def empty_vector() -> "BowVector":
        return BowVector(np.zeros(0, np.int64), np.zeros(0, np.float64))


def _assign(descs: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-center index per row, ties to the lowest center index."""
    d2 = (
        (descs**2).sum(axis=1)[:, None]
        - 2.0 * descs @ centers.T
        + (centers**2).sum(axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def train_vocab(
    descriptor_groups: list[np.ndarray], k: int = 1000, seed: int = 0
) -> Vocabulary:
    """k-means++ seeded Lloyd clustering over all descriptors, with IDF
    computed per training image group: idf_w = ln(N / n_w), 0 when the
    word fires in no group or in every group.

    descriptor_groups: one float array (n_i, 128) per training image.
    """
    groups = [np.asarray(g, dtype=np.float64).reshape(-1, 128)
              for g in descriptor_groups if len(g)]
    if not groups:
        raise TrainingError("no descriptors provided")
    data = np.vstack(groups)
    n = len(data)
    if n < k:
        raise TrainingError(f"{n} descriptors < k={k}")

    rng = np.random.default_rng(seed)
    # k-means++ seeding
    centers = np.empty((k, data.shape[1]))
    first = int(rng.integers(n))
    centers[0] = data[first]
    closest = ((data - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[i] = data[idx]
        d = ((data - centers[i]) ** 2).sum(axis=1)
        closest = np.minimum(closest, d)

    iterations = 0
    inertia = 0.0
    prev_inertia = np.inf
    for it in range(100):
        iterations = it + 1
        labels = _assign(data, centers)
        cur = float(((data - centers[labels]) ** 2).sum())
        # Lloyd monotonicity: (re)assignment and the mean update never
        # increase inertia (reseeded empty clusters had no members)
        assert cur <= prev_inertia * (1 + 1e-12) + 1e-12
        prev_inertia = cur
        new_centers = centers.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, data)
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        # re-seed empty clusters to the point farthest from its center
        empties = np.nonzero(~nonempty)[0]
        if len(empties):
            dist_own = ((data - new_centers[labels]) ** 2).sum(axis=1)
            order = np.argsort(-dist_own, kind="stable")
            for j, c in enumerate(empties):
                new_centers[c] = data[order[j]]
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < 1e-4:
            break
    labels = _assign(data, centers)
    inertia = float(((data - centers[labels]) ** 2).sum())

    centers32 = centers.astype(np.float32)
    # IDF over training groups against the final centers
    n_groups = len(groups)
    n_w = np.zeros(k, dtype=np.int64)
    for g in groups:
        words = np.unique(_assign(g, centers32.astype(np.float64)))
        n_w[words] += 1
    idf = np.zeros(k, dtype=np.float64)
    fired = n_w > 0
    idf[fired] = np.log(n_groups / n_w[fired])
    return Vocabulary(
        centers=centers32,
        idf=idf.astype(np.float32),
        training_meta={
            "descriptor_count": int(n),
            "iterations": iterations,
            "inertia": inertia,
            "seed": seed,
        },
    )


def quantize(voc: Vocabulary, descriptors: np.ndarray,
             degenerate: np.ndarray | None = None) -> BowVector:
    """BoW of a descriptor set: nearest-center histogram, tf * idf,
    one final l2 normalization.  Degenerate descriptors are excluded."""
    descs = np.asarray(descriptors, dtype=np.float64).reshape(-1, 128)
    if degenerate is not None:
        descs = descs[~np.asarray(degenerate, dtype=bool)]
    if len(descs) == 0:
        return BowVector.empty_vector()
    labels = _assign(descs, voc.centers.astype(np.float64))
    counts = np.bincount(labels, minlength=voc.k).astype(np.float64)
    tf = counts / len(descs)
    weights = tf * voc.idf.astype(np.float64)
    nz = np.nonzero(weights > 0)[0]
    if len(nz) == 0:
        return BowVector.empty_vector()
    vals = weights[nz]
    vals = vals / np.linalg.norm(vals)
    return BowVector(indices=nz.astype(np.int64), values=vals)


def bow_dot(a: BowVector, b: BowVector) -> float:
    """Sparse dot product over the intersection of supports."""
    if a.empty or b.empty:
        return 0.0
    ia = np.clip(np.searchsorted(b.indices, a.indices), 0, len(b.indices) - 1)
    hit = b.indices[ia] == a.indices
    return float(np.dot(a.values[hit], b.values[ia[hit]]))


def bow_distance(a: BowVector, b: BowVector) -> float:
    """Squared l2 distance between normalized vectors, computed as
    2 - 2 (a . b) so that ties agree bit-for-bit with cosine ranking
    (the union-of-supports sum is the same quantity up to rounding).

    Conventions: both empty -> 0; one empty -> 2 (keeps ranking total).
    """
    if a.empty and b.empty:
        return 0.0
    if a.empty or b.empty:
        return 2.0
    return 2.0 - 2.0 * bow_dot(a, b)


@dataclass
class InvertedIndex:
    image_ids: list[str]
    # per word: (ordinals int64 sorted, weights float64)
    postings: dict[int, tuple[np.ndarray, np.ndarray]]
    empty_ordinals: np.ndarray  # ordinals of images with empty BoW
    k: int

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    def sparsity(self) -> float:
        nnz = sum(len(o) for o, _ in self.postings.values())
        return 1.0 - nnz / (self.n_images * self.k) if self.n_images else 1.0

    def reconstruct(self, ordinal: int) -> BowVector:
        idx, vals = [], []
        for word, (ords, ws) in sorted(self.postings.items()):
            pos = np.searchsorted(ords, ordinal)
            if pos < len(ords) and ords[pos] == ordinal:
                idx.append(word)
                vals.append(ws[pos])
        if not idx:
            return BowVector.empty_vector()
        return BowVector(np.asarray(idx, np.int64), np.asarray(vals, np.float64))


def index_build(bows: list[tuple[str, BowVector]], k: int) -> InvertedIndex:
    ids = [iid for iid, _ in bows]
    if len(set(ids)) != len(ids):
        raise ParameterError("duplicate image_id in index build")
    postings: dict[int, tuple[list, list]] = {}
    empty = []
    for ordinal, (_, bow) in enumerate(bows):
        if bow.empty:
            empty.append(ordinal)
            continue
        for word, val in zip(bow.indices.tolist(), bow.values.tolist()):
            postings.setdefault(word, ([], []))
            postings[word][0].append(ordinal)
            postings[word][1].append(val)
    packed = {
        w: (np.asarray(o, np.int64), np.asarray(v, np.float64))
        for w, (o, v) in postings.items()
    }
    return InvertedIndex(
        image_ids=ids,
        postings=packed,
        empty_ordinals=np.asarray(empty, np.int64),
        k=k,
    )


def index_score(
    idx: InvertedIndex, q: BowVector, top_t: int
) -> list[tuple[str, float]]:
    """Top-t smallest squared-l2 BoW distances via the postings of the
    query's support; ties broken by image_id lexicographic order."""
    if top_t < 1:
        raise ParameterError("top_t must be >= 1")
    n = idx.n_images
    if n == 0:
        return []
    if q.empty:
        dists = np.full(n, 2.0)
        dists[idx.empty_ordinals] = 0.0
    else:
        dots = np.zeros(n)
        ord_chunks, val_chunks = [], []
        for word, qv in zip(q.indices.tolist(), q.values.tolist()):
            entry = idx.postings.get(word)
            if entry is None:
                continue
            ords, ws = entry
            ord_chunks.append(ords)
            val_chunks.append(ws * qv)
        if ord_chunks:
            all_ords = np.concatenate(ord_chunks)
            all_vals = np.concatenate(val_chunks)
            dots = np.bincount(all_ords, weights=all_vals, minlength=n)
        dists = 2.0 - 2.0 * dots
    order = sorted(range(n), key=lambda i: (dists[i], idx.image_ids[i]))
    return [(idx.image_ids[i], float(dists[i])) for i in order[:top_t]]


# ---------------------------------------------------------------------------
# Vocabulary file: magic "BKV1", k u32, dim u32, k x dim f32 centers,
# k f32 idf.
# ---------------------------------------------------------------------------


def save_vocab(voc: Vocabulary, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(BKV1_MAGIC)
        k, dim = voc.centers.shape
        fh.write(struct.pack("<II", k, dim))
        fh.write(voc.centers.astype("<f4").tobytes())
        fh.write(voc.idf.astype("<f4").tobytes())


def load_vocab(path: str) -> Vocabulary:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != BKV1_MAGIC:
        raise FormatError(f"bad magic in vocabulary file {path!r}")
    k, dim = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * k * dim + 4 * k
    if len(raw) < need:
        raise FormatError(f"truncated vocabulary file {path!r}")
    centers = np.frombuffer(raw, dtype="<f4", count=k * dim, offset=12)
    idf = np.frombuffer(raw, dtype="<f4", count=k, offset=12 + 4 * k * dim)
    return Vocabulary(
        centers=centers.reshape(k, dim).copy(), idf=idf.copy()
    )
