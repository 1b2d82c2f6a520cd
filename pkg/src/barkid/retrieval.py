"""Signature database construction, binary persistence, and the query
pipeline: full-scan scoring by BoW / LR / GV and the two-stage
BoW-prefilter -> rerank pipeline.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import image as im
from .descriptor import (
    DESCRIPTOR_DIM,
    BuiltinProvider,
    ExternalProvider,
    describe_from_gradients,
)
from .detector import DetectorConfig, Keypoint, detect
from .errors import LoadError, ParameterError
from .matching import GvParams, match_score, neighbor_table
from .vocabulary import (
    BowVector,
    InvertedIndex,
    Vocabulary,
    bow_distance,
    index_build,
    index_score,
    quantize,
)

BKDB_MAGIC = b"BKDB"
BKDB_VERSION = 1


@dataclass
class ImageSignature:
    image_id: str
    keypoints: list[Keypoint]
    descriptors: np.ndarray  # (n, 128) float32
    degenerate: np.ndarray  # (n,) bool
    bow: BowVector
    surface_id: str | None = None


@dataclass
class SignatureDb:
    signatures: list[ImageSignature]
    vocab_hash: str
    config_hash: str
    index: InvertedIndex
    # cached GV neighbor tables per signature, keyed by alpha
    _neighbor_cache: dict = field(default_factory=dict, repr=False)

    def by_id(self, image_id: str) -> ImageSignature:
        for s in self.signatures:
            if s.image_id == image_id:
                return s
        raise KeyError(image_id)

    def neighbor_tables(self, alpha: int) -> list[np.ndarray]:
        if alpha not in self._neighbor_cache:
            self._neighbor_cache[alpha] = [
                neighbor_table(s.keypoints, alpha) for s in self.signatures
            ]
        return self._neighbor_cache[alpha]


@dataclass
class RetrievalResult:
    ranking: list[tuple[str, float]]  # (image_id, score)
    method: str
    timings_ms: dict[str, float] = field(default_factory=dict)


def config_hash(cfg: DetectorConfig, descriptor_source: str = "builtin") -> str:
    payload = json.dumps(
        {
            "gamma": cfg.gamma,
            "phi": cfg.phi,
            "sigma_blur": cfg.sigma_blur,
            "octaves": cfg.octaves,
            "scales_per_octave": cfg.scales_per_octave,
            "contrast_threshold": cfg.contrast_threshold,
            "edge_ratio_threshold": cfg.edge_ratio_threshold,
            "descriptor": descriptor_source,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def extract_signature(
    image_id: str,
    img: im.Image,
    cfg: DetectorConfig,
    provider,
    voc: Vocabulary,
    surface_id: str | None = None,
) -> ImageSignature:
    """detect -> describe -> quantize.  Degenerate descriptors stay in the
    descriptor list (flagged) but are excluded from the BoW and matching.

    The built-in descriptor reads the blurred downsized image; external
    providers are keyed by (image_id, keypoint index) against keypoints
    detected here.
    """
    kps = detect(img, cfg)
    n = len(kps)
    descs = np.zeros((n, DESCRIPTOR_DIM), dtype=np.float32)
    degen = np.zeros(n, dtype=bool)
    if n:
        if isinstance(provider, BuiltinProvider):
            gray = im.to_grayscale(img)
            small = im.downsample(gray, cfg.phi)
            plane = small.as_float() / 255.0
            if cfg.sigma_blur > 0:
                plane = im.gaussian_blur_f(plane, cfg.sigma_blur)
            grad = im.gradients_f(plane)
            for i, kp in enumerate(kps):
                d = describe_from_gradients(grad, kp)
                descs[i] = d.values
                degen[i] = d.degenerate
        elif isinstance(provider, ExternalProvider):
            for i in range(n):
                d = provider.get(image_id, i)
                descs[i] = d.values
                degen[i] = d.degenerate
        else:
            raise ParameterError(f"unknown descriptor provider {provider!r}")
    bow = quantize(voc, descs, degen)
    return ImageSignature(
        image_id=image_id,
        keypoints=kps,
        descriptors=descs,
        degenerate=degen,
        bow=bow,
        surface_id=surface_id,
    )


def build_db(
    signatures: list[ImageSignature],
    voc: Vocabulary,
    cfg_hash: str,
) -> SignatureDb:
    index = index_build([(s.image_id, s.bow) for s in signatures], voc.k)
    return SignatureDb(
        signatures=signatures,
        vocab_hash=voc.content_hash(),
        config_hash=cfg_hash,
        index=index,
    )


def _rank(entries: list[tuple[str, float]], descending: bool) -> list[tuple[str, float]]:
    return sorted(entries, key=lambda e: (-e[1] if descending else e[1], e[0]))


def query_full(
    db: SignatureDb,
    s_q: ImageSignature,
    method: str,
    ratio: float = 0.8,
    gv_params: GvParams = GvParams(),
) -> RetrievalResult:
    """Score every database signature (excluding the query's own id)."""
    if method not in ("bow", "lr", "gv"):
        raise ParameterError(f"unknown method {method!r}")
    t0 = time.perf_counter()
    entries = []
    if method == "bow":
        for s in db.signatures:
            if s.image_id == s_q.image_id:
                continue
            entries.append((s.image_id, bow_distance(s_q.bow, s.bow)))
        ranking = _rank(entries, descending=False)
    else:
        tables = db.neighbor_tables(gv_params.alpha) if method == "gv" else None
        nq = (
            neighbor_table(s_q.keypoints, gv_params.alpha)
            if method == "gv"
            else None
        )
        for i, s in enumerate(db.signatures):
            if s.image_id == s_q.image_id:
                continue
            g = match_score(
                s_q.descriptors,
                s_q.keypoints,
                s.descriptors,
                s.keypoints,
                method,
                ratio=ratio,
                gv_params=gv_params,
                q_degenerate=s_q.degenerate,
                i_degenerate=s.degenerate,
                nq_table=nq,
                ni_table=tables[i] if tables else None,
            )
            entries.append((s.image_id, float(g)))
        ranking = _rank(entries, descending=True)
    elapsed = (time.perf_counter() - t0) * 1000.0
    return RetrievalResult(
        ranking=ranking, method=method, timings_ms={"scan": elapsed}
    )


def query_two_stage(
    db: SignatureDb,
    s_q: ImageSignature,
    top_t: int = 200,
    rerank: str = "gv",
    ratio: float = 0.8,
    gv_params: GvParams = GvParams(),
) -> RetrievalResult:
    """BoW prefilter through the inverted index, then rerank only the
    top_t candidates; the remainder keeps its BoW ordering after the
    reranked block."""
    if top_t < 1:
        raise ParameterError("top_t must be >= 1")
    if rerank not in ("lr", "gv"):
        raise ParameterError(f"unknown rerank method {rerank!r}")
    t0 = time.perf_counter()
    prefilter = [
        (iid, d)
        for iid, d in index_score(db.index, s_q.bow, db.index.n_images)
        if iid != s_q.image_id
    ]
    t1 = time.perf_counter()
    head, tail = prefilter[:top_t], prefilter[top_t:]
    ordinal = {s.image_id: i for i, s in enumerate(db.signatures)}
    tables = db.neighbor_tables(gv_params.alpha) if rerank == "gv" else None
    nq = (
        neighbor_table(s_q.keypoints, gv_params.alpha) if rerank == "gv" else None
    )
    rescored = []
    for iid, _ in head:
        s = db.signatures[ordinal[iid]]
        g = match_score(
            s_q.descriptors,
            s_q.keypoints,
            s.descriptors,
            s.keypoints,
            rerank,
            ratio=ratio,
            gv_params=gv_params,
            q_degenerate=s_q.degenerate,
            i_degenerate=s.degenerate,
            nq_table=nq,
            ni_table=tables[ordinal[iid]] if tables else None,
        )
        rescored.append((iid, float(g)))
    t2 = time.perf_counter()
    ranking = _rank(rescored, descending=True) + tail
    return RetrievalResult(
        ranking=ranking,
        method=f"bow+{rerank}",
        timings_ms={
            "prefilter": (t1 - t0) * 1000.0,
            "rerank": (t2 - t1) * 1000.0,
        },
    )


# ---------------------------------------------------------------------------
# Persistence: binary container "BKDB".
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def save_db(db: SignatureDb, path: str) -> None:
    parts = [BKDB_MAGIC, struct.pack("<I", BKDB_VERSION)]
    parts.append(_pack_str(db.vocab_hash))
    parts.append(_pack_str(db.config_hash))
    parts.append(struct.pack("<Q", len(db.signatures)))
    for s in db.signatures:
        parts.append(_pack_str(s.image_id))
        parts.append(_pack_str(s.surface_id if s.surface_id is not None else ""))
        parts.append(struct.pack("<B", 1 if s.surface_id is not None else 0))
        parts.append(struct.pack("<I", len(s.keypoints)))
        kp = np.asarray(
            [[k.x, k.y, k.scale, k.orientation, k.response] for k in s.keypoints],
            dtype="<f8",
        )
        parts.append(kp.tobytes())
        parts.append(s.descriptors.astype("<f4").tobytes())
        parts.append(np.packbits(s.degenerate).tobytes())
        parts.append(struct.pack("<I", len(s.bow.indices)))
        parts.append(s.bow.indices.astype("<u4").tobytes())
        parts.append(s.bow.values.astype("<f8").tobytes())
    # inverted index postings
    parts.append(struct.pack("<I", db.index.k))
    parts.append(struct.pack("<I", len(db.index.postings)))
    for word in sorted(db.index.postings):
        ords, ws = db.index.postings[word]
        parts.append(struct.pack("<II", word, len(ords)))
        parts.append(ords.astype("<u4").tobytes())
        parts.append(ws.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise LoadError("truncated database file")
        chunk = self.raw[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def take_str(self) -> str:
        n = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_db(path: str, voc: Vocabulary) -> SignatureDb:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(4) != BKDB_MAGIC:
        raise LoadError(f"bad magic in database file {path!r}")
    version = r.unpack("<I")
    if version != BKDB_VERSION:
        raise LoadError(f"unsupported database version {version}")
    vocab_hash = r.take_str()
    if vocab_hash != voc.content_hash():
        raise LoadError("vocabulary hash mismatch")
    cfg_hash = r.take_str()
    n_sigs = r.unpack("<Q")
    signatures = []
    for _ in range(n_sigs):
        image_id = r.take_str()
        surface_id = r.take_str()
        has_surface = r.unpack("<B")
        n_kp = r.unpack("<I")
        kp_arr = np.frombuffer(r.take(8 * 5 * n_kp), dtype="<f8").reshape(n_kp, 5)
        kps = [
            Keypoint(x=row[0], y=row[1], scale=row[2], orientation=row[3],
                     response=row[4])
            for row in kp_arr
        ]
        descs = np.frombuffer(
            r.take(4 * DESCRIPTOR_DIM * n_kp), dtype="<f4"
        ).reshape(n_kp, DESCRIPTOR_DIM).copy()
        degen_bytes = r.take((n_kp + 7) // 8)
        degen = np.unpackbits(
            np.frombuffer(degen_bytes, dtype=np.uint8), count=n_kp
        ).astype(bool)
        n_bow = r.unpack("<I")
        idx = np.frombuffer(r.take(4 * n_bow), dtype="<u4").astype(np.int64)
        vals = np.frombuffer(r.take(8 * n_bow), dtype="<f8").copy()
        bow = (
            BowVector(indices=idx, values=vals)
            if n_bow
            else BowVector.empty_vector()
        )
        signatures.append(
            ImageSignature(
                image_id=image_id,
                keypoints=kps,
                descriptors=descs,
                degenerate=degen,
                bow=bow,
                surface_id=surface_id if has_surface else None,
            )
        )
    k = r.unpack("<I")
    n_words = r.unpack("<I")
    postings = {}
    for _ in range(n_words):
        word, n_post = r.unpack("<II")
        ords = np.frombuffer(r.take(4 * n_post), dtype="<u4").astype(np.int64)
        ws = np.frombuffer(r.take(8 * n_post), dtype="<f8").copy()
        postings[word] = (ords, ws)
    empty = np.asarray(
        [i for i, s in enumerate(signatures) if s.bow.empty], np.int64
    )
    index = InvertedIndex(
        image_ids=[s.image_id for s in signatures],
        postings=postings,
        empty_ordinals=empty,
        k=k,
    )
    # consistency: every stored BoW must reconstruct exactly from postings
    per_ordinal: dict[int, list[tuple[int, float]]] = {}
    for word in sorted(postings):
        ords, ws = postings[word]
        for o, wgt in zip(ords.tolist(), ws.tolist()):
            per_ordinal.setdefault(o, []).append((word, wgt))
    for ordinal, s in enumerate(signatures):
        pairs = per_ordinal.get(ordinal, [])
        idx = np.asarray([p[0] for p in pairs], np.int64)
        vals = np.asarray([p[1] for p in pairs], np.float64)
        if not (
            np.array_equal(idx, s.bow.indices)
            and np.array_equal(vals, s.bow.values)
        ):
            raise LoadError(f"index inconsistent for image {s.image_id!r}")
    return SignatureDb(
        signatures=signatures,
        vocab_hash=vocab_hash,
        config_hash=cfg_hash,
        index=index,
    )
