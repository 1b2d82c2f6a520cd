"""Retrieval metrics (P@K, R@K, PR curves, AP/mAP, R-P), the synthetic
self-similar texture corpus used as ground truth for end-to-end tests,
and single-threaded timing benchmarks.
"""

from __future__ import annotations

import csv
import json
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import image as im
from .errors import ParameterError
from .matching import GvParams, match_score, neighbor_table
from .registration import Homography, ManifestImage, SurfaceManifest, project_many
from .vocabulary import bow_distance, index_score

# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _hits(ranking: list[str], relevant: set[str], k: int) -> int:
    return sum(1 for iid in ranking[:k] if iid in relevant)


def precision_at_k(ranking: list[str], relevant: set[str], k: int) -> float:
    if not 1 <= k <= len(ranking):
        raise ParameterError(f"K={k} out of range 1..{len(ranking)}")
    return _hits(ranking, relevant, k) / k


def recall_at_k(ranking: list[str], relevant: set[str], k: int) -> float | None:
    if not 1 <= k <= len(ranking):
        raise ParameterError(f"K={k} out of range 1..{len(ranking)}")
    if not relevant:
        return None
    return _hits(ranking, relevant, k) / len(relevant)


def pr_curve(ranking: list[str], relevant: set[str]) -> list[tuple[float, float]]:
    """One (recall, precision) point per relevant image at its rank,
    sorted by recall ascending.  Relevant images missing from the ranking
    contribute a point at (full recall budget, precision 0 at the end)."""
    if not relevant:
        raise ParameterError("relevant set must be non-empty")
    n_rel = len(relevant)
    points = []
    hits = 0
    for rank, iid in enumerate(ranking, start=1):
        if iid in relevant:
            hits += 1
            points.append((hits / n_rel, hits / rank))
    # relevant images absent from the ranking: precision 0 at rank -> inf
    for missing in range(hits + 1, n_rel + 1):
        points.append((missing / n_rel, 0.0))
    return points


def average_precision(ranking: list[str], relevant: set[str]) -> float:
    """Mean of the precisions at each relevant image's rank."""
    pts = pr_curve(ranking, relevant)
    return float(np.mean([p for _, p in pts]))


def mean_average_precision(
    rankings: dict[str, list[str]], gt: dict[str, set[str]]
) -> float:
    """Mean per-query AP; queries with an empty relevant set are excluded
    with a warning."""
    aps = []
    for qid, ranking in rankings.items():
        relevant = gt.get(qid, set())
        if not relevant:
            warnings.warn(f"query {qid!r} has no relevant images; excluded")
            continue
        aps.append(average_precision(ranking, relevant))
    return float(np.mean(aps)) if aps else 0.0


def r_precision(ranking: list[str], relevant: set[str]) -> float:
    """Precision at rank |relevant|."""
    if not relevant:
        raise ParameterError("relevant set must be non-empty")
    k = min(len(relevant), len(ranking))
    return _hits(ranking, relevant, k) / len(relevant)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthCorpus:
    images: dict[str, im.Image]
    manifests: list[SurfaceManifest]
    ground_truth: dict[str, set[str]]  # query image_id -> relevant image_ids
    surfaces: dict[str, list[str]]  # surface_id -> image_ids
    warps: dict[str, Homography] = field(default_factory=dict)


def _bandpass_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Self-similar texture: band-pass filtered white noise in [0, 255]."""
    noise = rng.standard_normal((size, size))
    low = im.gaussian_blur_f(noise, 1.5)
    lower = im.gaussian_blur_f(noise, 4.0)
    band = low - lower
    band = (band - band.min()) / (band.max() - band.min() + 1e-12)
    return band * 255.0


def _corner_jitter_homography(
    rng: np.random.Generator, w: int, h: int, magnitude: float, offset: tuple[int, int]
) -> Homography:
    """Homography mapping view coords to texture coords: view corners go
    to the (offset) texture window corners, each jittered by <= magnitude
    pixels."""
    ox, oy = offset
    src = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)]
    dst = []
    for x, y in src:
        jx = rng.uniform(-magnitude, magnitude) if magnitude > 0 else 0.0
        jy = rng.uniform(-magnitude, magnitude) if magnitude > 0 else 0.0
        dst.append((x + ox + jx, y + oy + jy))
    from .registration import estimate_homography

    hom, _ = estimate_homography(list(zip(src, dst)))
    return hom


def synth_corpus(
    seed: int,
    surfaces: int,
    views_per_surface: int,
    warp_magnitude: float,
    illum_jitter: float,
    size: int = 256,
) -> SynthCorpus:
    """Procedural corpus: per surface a band-pass noise texture; each view
    is a known homography warp plus brightness/contrast/gamma jitter and
    mild additive noise.  Fiducial correspondences are the four view
    corners mapped through the known warp.  With zero warp and zero
    jitter, all views of a surface are bit-identical."""
    if surfaces < 2 or views_per_surface < 2:
        raise ParameterError("need >= 2 surfaces and >= 2 views")
    rng = np.random.default_rng(seed)
    pad = int(np.ceil(warp_magnitude)) + 4 if warp_magnitude > 0 else 0
    tex_size = size + 2 * pad
    images: dict[str, im.Image] = {}
    manifests = []
    gt: dict[str, set[str]] = {}
    surf_map: dict[str, list[str]] = {}
    warps: dict[str, Homography] = {}

    for si in range(surfaces):
        surface_id = f"s{si:03d}"
        texture = _bandpass_texture(rng, tex_size)
        view_ids = []
        manifest_images = []
        for vi in range(views_per_surface):
            image_id = f"{surface_id}_v{vi:02d}"
            hom = _corner_jitter_homography(
                rng, size, size, warp_magnitude, (pad, pad)
            )
            if warp_magnitude == 0:
                view = texture[pad : pad + size, pad : pad + size].copy()
            else:
                xs, ys = np.meshgrid(
                    np.arange(size, dtype=np.float64),
                    np.arange(size, dtype=np.float64),
                )
                pts = np.column_stack([xs.ravel(), ys.ravel()])
                src = project_many(hom, pts)
                view = im._bilinear_sample(
                    texture, src[:, 0], src[:, 1]
                ).reshape(size, size)
            if illum_jitter > 0:
                gain = 1.0 + rng.uniform(-illum_jitter, illum_jitter)
                bias = rng.uniform(-illum_jitter, illum_jitter) * 64.0
                gamma = 1.0 + rng.uniform(-illum_jitter, illum_jitter) * 0.5
                v01 = np.clip(view / 255.0, 0.0, 1.0) ** gamma
                view = v01 * 255.0 * gain + bias
                view = view + rng.standard_normal(view.shape) * 2.0
            img = im.Image(np.clip(np.rint(view), 0, 255).astype(np.uint8))
            images[image_id] = img
            view_ids.append(image_id)
            warps[image_id] = hom
            corners = [
                (0.0, 0.0),
                (size - 1.0, 0.0),
                (size - 1.0, size - 1.0),
                (0.0, size - 1.0),
            ]
            ref = project_many(hom, np.asarray(corners))
            manifest_images.append(
                ManifestImage(
                    image_id=image_id,
                    path=f"{image_id}.png",
                    correspondences=[
                        (c, (float(r[0]), float(r[1])))
                        for c, r in zip(corners, ref)
                    ],
                )
            )
        manifests.append(
            SurfaceManifest(
                surface_id=surface_id,
                reference_image_id=view_ids[0],
                images=manifest_images,
            )
        )
        surf_map[surface_id] = view_ids
        for iid in view_ids:
            gt[iid] = set(view_ids) - {iid}
    return SynthCorpus(
        images=images,
        manifests=manifests,
        ground_truth=gt,
        surfaces=surf_map,
        warps=warps,
    )


# ---------------------------------------------------------------------------
# Reports and benchmarks
# ---------------------------------------------------------------------------


@dataclass
class MethodReport:
    map: float
    p_at_1: float
    r_precision: float
    r_at_k: dict[int, float]
    pr_points: list[tuple[float, float]]  # mean precision at each recall level
    map_std: float = 0.0


@dataclass
class EvalReport:
    methods: dict[str, MethodReport]
    query_count: int
    corpus_size: int
    timings_ms: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "query_count": self.query_count,
            "corpus_size": self.corpus_size,
            "timings_ms": self.timings_ms,
            "methods": {
                name: {
                    "mAP": m.map,
                    "mAP_std": m.map_std,
                    "P@1": m.p_at_1,
                    "R-P": m.r_precision,
                    "R@K": {str(k): v for k, v in m.r_at_k.items()},
                    "pr_curve": m.pr_points,
                }
                for name, m in self.methods.items()
            },
        }


def evaluate_rankings(
    rankings: dict[str, list[str]],
    gt: dict[str, set[str]],
    r_at_k_values: tuple[int, ...] = (1, 5, 10, 25, 50, 100, 200),
) -> MethodReport:
    """Aggregate metrics over queries.  The spread reported alongside mAP
    is the standard deviation over queries."""
    aps, p1s, rps = [], [], []
    r_at_k: dict[int, list[float]] = {k: [] for k in r_at_k_values}
    pr_acc: list[list[float]] = []
    for qid, ranking in rankings.items():
        relevant = gt[qid]
        if not relevant:
            continue
        aps.append(average_precision(ranking, relevant))
        p1s.append(precision_at_k(ranking, relevant, 1))
        rps.append(r_precision(ranking, relevant))
        for k in r_at_k_values:
            if k <= len(ranking):
                r_at_k[k].append(recall_at_k(ranking, relevant, k))
        pr_acc.append([p for _, p in pr_curve(ranking, relevant)])
    n_rel = max((len(gt[q]) for q in rankings if gt[q]), default=0)
    mean_pr = []
    if pr_acc and all(len(row) == n_rel for row in pr_acc):
        arr = np.asarray(pr_acc)
        mean_pr = [
            ((i + 1) / n_rel, float(arr[:, i].mean())) for i in range(n_rel)
        ]
    return MethodReport(
        map=float(np.mean(aps)) if aps else 0.0,
        map_std=float(np.std(aps)) if aps else 0.0,
        p_at_1=float(np.mean(p1s)) if p1s else 0.0,
        r_precision=float(np.mean(rps)) if rps else 0.0,
        r_at_k={k: float(np.mean(v)) for k, v in r_at_k.items() if v},
        pr_points=mean_pr,
    )


def bench_compare(
    db,
    queries,
    methods: tuple[str, ...] = ("bow", "lr", "gv"),
    min_comparisons: int = 100,
    ratio: float = 0.8,
    gv_params: GvParams = GvParams(),
) -> dict[str, dict[str, float]]:
    """Mean/median single-thread per-comparison wall time per method.

    BoW is timed through the inverted index over the whole database
    (amortized per comparison), matching how it is deployed; LR and GV
    are timed per signature pair.  One warm-up pass precedes timing.
    """
    out: dict[str, dict[str, float]] = {}
    sigs = db.signatures
    desc_counts = [len(s.keypoints) for s in sigs]
    pairs = []
    qi = 0
    while len(pairs) < min_comparisons:
        q = queries[qi % len(queries)]
        s = sigs[len(pairs) % len(sigs)]
        pairs.append((q, s))
        qi += 1
    for method in methods:
        if method == "bow":
            index_score(db.index, queries[0].bow, db.index.n_images)  # warm-up
            reps = max(1, min_comparisons // max(1, db.index.n_images)) + 1
            t0 = time.perf_counter()
            for _ in range(reps):
                for q in queries[: max(1, min(len(queries), 5))]:
                    index_score(db.index, q.bow, db.index.n_images)
            elapsed = time.perf_counter() - t0
            n_comp = reps * max(1, min(len(queries), 5)) * db.index.n_images
            out[method] = {
                "mean_ms": elapsed / n_comp * 1000.0,
                "median_ms": elapsed / n_comp * 1000.0,
                "comparisons": n_comp,
            }
        else:
            q0, s0 = pairs[0]
            _time_one_pair(q0, s0, method, ratio, gv_params)  # warm-up
            times = []
            for q, s in pairs:
                times.append(_time_one_pair(q, s, method, ratio, gv_params))
            out[method] = {
                "mean_ms": float(np.mean(times) * 1000.0),
                "median_ms": float(np.median(times) * 1000.0),
                "comparisons": len(times),
            }
    out["_meta"] = {
        "mean_descriptors_per_signature": float(np.mean(desc_counts)),
        "db_size": len(sigs),
    }
    return out


def _time_one_pair(q, s, method, ratio, gv_params) -> float:
    t0 = time.perf_counter()
    match_score(
        q.descriptors,
        q.keypoints,
        s.descriptors,
        s.keypoints,
        method,
        ratio=ratio,
        gv_params=gv_params,
        q_degenerate=q.degenerate,
        i_degenerate=s.degenerate,
    )
    return time.perf_counter() - t0


# ---------------------------------------------------------------------------
# Report writers
# ---------------------------------------------------------------------------


def write_report_json(report: EvalReport, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)


def write_report_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "mAP", "mAP_std", "P@1", "R-P"])
        for name, m in sorted(report.methods.items()):
            writer.writerow(
                [name, f"{m.map:.6f}", f"{m.map_std:.6f}",
                 f"{m.p_at_1:.6f}", f"{m.r_precision:.6f}"]
            )


def write_pr_svg(report: EvalReport, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name, m in sorted(report.methods.items()):
        if m.pr_points:
            rec = [r for r, _ in m.pr_points]
            prec = [p for _, p in m.pr_points]
            ax.plot(rec, prec, marker="o", label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
