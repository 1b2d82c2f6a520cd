"""Command-line surface: synth, patches, vocab, index, query, eval,
bench, sweep.

Configuration comes from an optional JSON file (--config) with flag
overrides (flags win).  Every command writes a run-manifest JSON with
the resolved configuration and input hashes.  Errors exit nonzero with
a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import errors as err
from . import image as im
from .descriptor import (
    BuiltinProvider,
    crop_patch,
    load_descriptor_file,
)
from .detector import DetectorConfig, detect
from .evalbench import (
    EvalReport,
    bench_compare,
    evaluate_rankings,
    synth_corpus,
    write_pr_svg,
    write_report_csv,
    write_report_json,
)
from .matching import GvParams
from .registration import (
    SurfaceManifest,
    build_patch_dataset,
    consolidate_keypoints,
    estimate_homography,
    homography_to_json,
    write_patch_manifest,
)
from .retrieval import (
    build_db,
    config_hash,
    extract_signature,
    load_db,
    query_full,
    query_two_stage,
    save_db,
)
from .vocabulary import load_vocab, save_vocab, train_vocab

EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_FORMAT = 4
EXIT_TRAINING = 5
EXIT_VALIDATION = 6
EXIT_LOAD = 7
EXIT_OTHER = 1

_KNOWN_CONFIG_KEYS = {
    "gamma", "phi", "sigma", "descriptor", "method", "ratio", "alpha",
    "rho", "top_t", "seed", "out", "k", "surfaces", "views", "warp",
    "illum", "size", "min_spacing", "max_queries", "contrast",
}


def _threads() -> int:
    env = os.environ.get("BARKID_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir_or_file: str, command: str, cfg: dict,
                        inputs: list[str]) -> None:
    if os.path.isdir(out_dir_or_file):
        path = os.path.join(out_dir_or_file, "run_manifest.json")
    else:
        path = out_dir_or_file + ".manifest.json"
    payload = {
        "command": command,
        "config": cfg,
        "input_hashes": {
            p: _sha256_file(p) for p in inputs if os.path.isfile(p)
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.isfile(path):
        raise err.BarkidError(f"config file not found: {path!r}")
    with open(path) as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - _KNOWN_CONFIG_KEYS
    if unknown:
        raise err.ParameterError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _resolve(args, cfg_file: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in cfg_file:
        return cfg_file[key]
    return default


def _detector_config(args, cfg_file: dict, gamma_default: int = 500) -> DetectorConfig:
    cfg = DetectorConfig(
        gamma=int(_resolve(args, cfg_file, "gamma", gamma_default)),
        phi=float(_resolve(args, cfg_file, "phi", 2.0)),
        sigma_blur=float(_resolve(args, cfg_file, "sigma", 0.0)),
        contrast_threshold=float(_resolve(args, cfg_file, "contrast", 0.03)),
    )
    cfg.validate()
    return cfg


def _provider(args, cfg_file: dict):
    spec = _resolve(args, cfg_file, "descriptor", "builtin")
    if spec == "builtin":
        return BuiltinProvider(), "builtin"
    if spec.startswith("external:"):
        path = spec.split(":", 1)[1]
        if not os.path.isfile(path):
            raise err.BarkidError(f"descriptor file not found: {path!r}")
        return load_descriptor_file(path), spec
    raise err.ParameterError(f"unknown descriptor source {spec!r}")


def _load_corpus(corpus_dir: str):
    """Read corpus.json + images written by cmd_synth."""
    meta_path = os.path.join(corpus_dir, "corpus.json")
    if not os.path.isfile(meta_path):
        raise err.BarkidError(f"corpus metadata not found: {meta_path!r}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    manifests = [SurfaceManifest.from_json(m) for m in meta["surfaces"]]
    gt = {q: set(v) for q, v in meta["ground_truth"].items()}
    images = {}
    surface_of = {}
    for man in manifests:
        for mi in man.images:
            images[mi.image_id] = im.read_image(
                os.path.join(corpus_dir, mi.path)
            )
            surface_of[mi.image_id] = man.surface_id
    return manifests, images, gt, surface_of, meta_path


def _extract_all(images: dict, cfg: DetectorConfig, provider, voc,
                 surface_of: dict | None = None):
    surface_of = surface_of or {}

    def one(item):
        iid, img = item
        return extract_signature(
            iid, img, cfg, provider, voc, surface_id=surface_of.get(iid)
        )

    items = sorted(images.items())
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        sigs = list(pool.map(one, items))
    return sigs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg_file = _load_config_file(args.config)
    out = _resolve(args, cfg_file, "out", None)
    if not out:
        raise err.ParameterError("--out is required")
    seed = int(_resolve(args, cfg_file, "seed", 0))
    surfaces = int(_resolve(args, cfg_file, "surfaces", 20))
    views = int(_resolve(args, cfg_file, "views", 12))
    warp = float(_resolve(args, cfg_file, "warp", 6.0))
    illum = float(_resolve(args, cfg_file, "illum", 0.25))
    size = int(_resolve(args, cfg_file, "size", 256))
    corpus = synth_corpus(seed, surfaces, views, warp, illum, size=size)
    os.makedirs(out, exist_ok=True)
    for iid, img in corpus.images.items():
        im.write_image(img, os.path.join(out, f"{iid}.png"))
    meta = {
        "seed": seed,
        "surfaces_count": surfaces,
        "views_per_surface": views,
        "warp_magnitude": warp,
        "illum_jitter": illum,
        "size": size,
        "surfaces": [m.to_json() for m in corpus.manifests],
        "ground_truth": {
            q: sorted(v) for q, v in corpus.ground_truth.items()
        },
    }
    with open(os.path.join(out, "corpus.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    _write_run_manifest(out, "synth", meta | {"out": out}, [])
    print(f"wrote {len(corpus.images)} images to {out}")
    return 0


def cmd_patches(args) -> int:
    cfg_file = _load_config_file(args.config)
    out = _resolve(args, cfg_file, "out", None)
    if not out:
        raise err.ParameterError("--out is required")
    # gamma is lifted during dataset building: pool the maximum number of
    # keypoints before the spacing filter
    det_cfg = _detector_config(args, cfg_file, gamma_default=5000)
    min_spacing = float(_resolve(args, cfg_file, "min_spacing", 32.0))
    manifests, images, _, _, meta_path = _load_corpus(args.corpus)
    os.makedirs(out, exist_ok=True)
    all_rows = []
    homs = {}
    for man in manifests:
        per_image = {
            mi.image_id: detect(images[mi.image_id], det_cfg)
            for mi in man.images
        }
        aligned = consolidate_keypoints(
            man, per_image, images, min_spacing=min_spacing
        )
        rows = build_patch_dataset(man, aligned, images, out)
        all_rows.extend(rows)
        for mi in man.images:
            h, _ = estimate_homography(mi.correspondences)
            homs[mi.image_id] = homography_to_json(h)
    write_patch_manifest(all_rows, os.path.join(out, "manifest.jsonl"))
    with open(os.path.join(out, "homographies.json"), "w") as fh:
        json.dump(homs, fh, indent=2, sort_keys=True)
    _write_run_manifest(
        out, "patches",
        {"gamma": det_cfg.gamma, "phi": det_cfg.phi,
         "sigma": det_cfg.sigma_blur, "min_spacing": min_spacing,
         "corpus": args.corpus, "out": out},
        [meta_path],
    )
    print(f"wrote {len(all_rows)} patches to {out}")
    return 0


def cmd_vocab(args) -> int:
    cfg_file = _load_config_file(args.config)
    out = _resolve(args, cfg_file, "out", None)
    if not out:
        raise err.ParameterError("--out is required")
    k = int(_resolve(args, cfg_file, "k", 1000))
    seed = int(_resolve(args, cfg_file, "seed", 0))
    det_cfg = _detector_config(args, cfg_file)
    provider, desc_spec = _provider(args, cfg_file)
    _, images, _, _, meta_path = _load_corpus(args.corpus)
    # vocabulary training needs no BoW; use a placeholder with idf zeros
    from .vocabulary import Vocabulary

    dummy = Vocabulary(
        centers=np.zeros((1, 128), np.float32), idf=np.zeros(1, np.float32)
    )
    sigs = _extract_all(images, det_cfg, provider, dummy)
    groups = [
        s.descriptors[~s.degenerate] for s in sigs if np.any(~s.degenerate)
    ]
    voc = train_vocab(groups, k=k, seed=seed)
    save_vocab(voc, out)
    with open(out + ".meta.json", "w") as fh:
        json.dump(voc.training_meta, fh, indent=2, sort_keys=True)
    _write_run_manifest(
        out, "vocab",
        {"k": k, "seed": seed, "gamma": det_cfg.gamma, "phi": det_cfg.phi,
         "sigma": det_cfg.sigma_blur, "descriptor": desc_spec,
         "corpus": args.corpus, "out": out},
        [meta_path],
    )
    print(f"trained vocabulary k={k} -> {out}")
    return 0


def cmd_index(args) -> int:
    cfg_file = _load_config_file(args.config)
    out = _resolve(args, cfg_file, "out", None)
    if not out:
        raise err.ParameterError("--out is required")
    det_cfg = _detector_config(args, cfg_file)
    provider, desc_spec = _provider(args, cfg_file)
    voc = load_vocab(args.vocab)
    _, images, _, surface_of, meta_path = _load_corpus(args.corpus)
    sigs = _extract_all(images, det_cfg, provider, voc, surface_of)
    db = build_db(sigs, voc, config_hash(det_cfg, desc_spec))
    save_db(db, out)
    if args.export_patch_requests:
        _export_patch_requests(images, sigs, det_cfg, args.export_patch_requests)
    _write_run_manifest(
        out, "index",
        {"gamma": det_cfg.gamma, "phi": det_cfg.phi,
         "sigma": det_cfg.sigma_blur, "descriptor": desc_spec,
         "corpus": args.corpus, "vocab": args.vocab, "out": out},
        [meta_path, args.vocab],
    )
    print(f"indexed {len(sigs)} signatures -> {out}")
    return 0


def _export_patch_requests(images, sigs, det_cfg, out_dir) -> None:
    """Per-keypoint 64x64 crops of the unblurred downsized image, keyed
    (image_id, keypoint_index), for external descriptor computation."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for s in sigs:
        base = im.downsample(images[s.image_id], det_cfg.phi)
        img_dir = os.path.join(out_dir, s.image_id)
        os.makedirs(img_dir, exist_ok=True)
        for i, kp in enumerate(s.keypoints):
            patch = crop_patch(base, kp, image_id=s.image_id)
            path = os.path.join(img_dir, f"{i:05d}.png")
            im.write_image(im.Image(patch.pixels), path)
            rows.append(
                {"image_id": s.image_id, "keypoint_index": i, "path": path}
            )
    with open(os.path.join(out_dir, "requests.jsonl"), "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _method_params(args, cfg_file):
    ratio = float(_resolve(args, cfg_file, "ratio", 0.8))
    gv = GvParams(
        alpha=int(_resolve(args, cfg_file, "alpha", 15)),
        rho=float(_resolve(args, cfg_file, "rho", 0.33)),
    )
    gv.validate()
    return ratio, gv


def cmd_query(args) -> int:
    cfg_file = _load_config_file(args.config)
    det_cfg = _detector_config(args, cfg_file)
    provider, desc_spec = _provider(args, cfg_file)
    method = _resolve(args, cfg_file, "method", "gv")
    ratio, gv = _method_params(args, cfg_file)
    voc = load_vocab(args.vocab)
    db = load_db(args.db, voc)
    img = im.read_image(args.image)
    image_id = args.image_id or os.path.splitext(os.path.basename(args.image))[0]
    s_q = extract_signature(image_id, img, det_cfg, provider, voc)
    top_t = _resolve(args, cfg_file, "top_t", None)
    if args.two_stage:
        res = query_two_stage(
            db, s_q, top_t=int(top_t or 200), rerank=method,
            ratio=ratio, gv_params=gv,
        )
    else:
        res = query_full(db, s_q, method, ratio=ratio, gv_params=gv)
        if top_t:
            res.ranking = res.ranking[: int(top_t)]
    payload = {
        "query": image_id,
        "method": res.method,
        "timings_ms": res.timings_ms,
        "ranking": [
            {"image_id": iid, "score": score} for iid, score in res.ranking
        ],
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        _write_run_manifest(
            args.out, "query",
            {"method": method, "ratio": ratio, "alpha": gv.alpha,
             "rho": gv.rho, "descriptor": desc_spec},
            [args.db, args.vocab, args.image],
        )
    else:
        print(text)
    return 0


def _rankings_for_db(db, method, ratio, gv, top_t=None, max_queries=None):
    rankings = {}
    queries = db.signatures[: max_queries or len(db.signatures)]
    for s_q in queries:
        if top_t:
            res = query_two_stage(
                db, s_q, top_t=top_t, rerank=method, ratio=ratio, gv_params=gv
            )
        else:
            res = query_full(db, s_q, method, ratio=ratio, gv_params=gv)
        rankings[s_q.image_id] = [iid for iid, _ in res.ranking]
    return rankings


def cmd_eval(args) -> int:
    cfg_file = _load_config_file(args.config)
    ratio, gv = _method_params(args, cfg_file)
    max_queries = _resolve(args, cfg_file, "max_queries", None)
    voc = load_vocab(args.vocab)
    db = load_db(args.db, voc)
    _, _, gt, _, meta_path = _load_corpus(args.corpus)
    methods = (args.methods or "bow,lr,gv").split(",")
    out = args.out
    os.makedirs(out, exist_ok=True)
    reports = {}
    for method in methods:
        rankings = _rankings_for_db(
            db, method, ratio, gv,
            max_queries=int(max_queries) if max_queries else None,
        )
        reports[method] = evaluate_rankings(rankings, gt)
    report = EvalReport(
        methods=reports,
        query_count=int(max_queries) if max_queries else len(db.signatures),
        corpus_size=len(db.signatures),
    )
    write_report_json(report, os.path.join(out, "report.json"))
    write_report_csv(report, os.path.join(out, "report.csv"))
    write_pr_svg(report, os.path.join(out, "pr_curves.svg"))
    _write_run_manifest(
        out, "eval",
        {"methods": methods, "ratio": ratio, "alpha": gv.alpha, "rho": gv.rho},
        [args.db, args.vocab, meta_path],
    )
    for name, m in report.methods.items():
        print(f"{name}: mAP={m.map:.4f} P@1={m.p_at_1:.4f} R-P={m.r_precision:.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg_file = _load_config_file(args.config)
    ratio, gv = _method_params(args, cfg_file)
    voc = load_vocab(args.vocab)
    db = load_db(args.db, voc)
    queries = db.signatures[:5]
    table = bench_compare(db, queries, ratio=ratio, gv_params=gv)
    text = json.dumps(table, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        _write_run_manifest(
            args.out, "bench", {"ratio": ratio, "alpha": gv.alpha,
                                "rho": gv.rho},
            [args.db, args.vocab],
        )
    print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg_file = _load_config_file(args.config)
    ratio, gv = _method_params(args, cfg_file)
    seed = int(_resolve(args, cfg_file, "seed", 0))
    k = int(_resolve(args, cfg_file, "k", 256))
    max_queries = int(_resolve(args, cfg_file, "max_queries", 36))
    gamma = int(_resolve(args, cfg_file, "gamma", 500))
    phis = [float(v) for v in args.phi_grid.split(",")]
    sigmas = [float(v) for v in args.sigma_grid.split(",")]
    _, images, gt, surface_of, meta_path = _load_corpus(args.corpus)
    rows = []
    for phi in phis:
        for sigma in sigmas:
            det_cfg = DetectorConfig(gamma=gamma, phi=phi, sigma_blur=sigma)
            from .vocabulary import Vocabulary

            dummy = Vocabulary(
                centers=np.zeros((1, 128), np.float32),
                idf=np.zeros(1, np.float32),
            )
            sigs = _extract_all(images, det_cfg, BuiltinProvider(), dummy,
                                surface_of)
            groups = [
                s.descriptors[~s.degenerate]
                for s in sigs if np.any(~s.degenerate)
            ]
            voc = train_vocab(groups, k=k, seed=seed)
            from .vocabulary import quantize

            for s in sigs:
                s.bow = quantize(voc, s.descriptors, s.degenerate)
            db = build_db(sigs, voc, config_hash(det_cfg, "builtin"))
            rankings = _rankings_for_db(
                db, "gv", ratio, gv, max_queries=max_queries
            )
            rep = evaluate_rankings(rankings, gt)
            counts = [len(s.keypoints) for s in sigs]
            rows.append(
                {
                    "phi": phi,
                    "sigma": sigma,
                    "mAP": rep.map,
                    "avg_keypoints": float(np.mean(counts)),
                    "std_keypoints": float(np.std(counts)),
                }
            )
            print(f"phi={phi} sigma={sigma} mAP={rep.map:.4f} "
                  f"kp={np.mean(counts):.1f}+-{np.std(counts):.1f}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["phi", "sigma", "mAP", "avg_keypoints",
                            "std_keypoints"]
        )
        writer.writeheader()
        writer.writerows(rows)
    _write_run_manifest(
        args.out, "sweep",
        {"phi_grid": phis, "sigma_grid": sigmas, "k": k, "seed": seed},
        [meta_path],
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override")
    p.add_argument("--gamma", type=int)
    p.add_argument("--phi", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--descriptor", help="builtin | external:<path>")
    p.add_argument("--ratio", type=float)
    p.add_argument("--alpha", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--top-t", dest="top_t", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="barkid", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--surfaces", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--warp", type=float)
    p.add_argument("--illum", type=float)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("patches", help="build a keypoint-aligned patch dataset")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--min-spacing", dest="min_spacing", type=float)
    p.set_defaults(func=cmd_patches)

    p = sub.add_parser("vocab", help="train a visual vocabulary")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("index", help="extract signatures and build a database")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")
    p.add_argument("--export-patch-requests", dest="export_patch_requests")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank database images against a query")
    _add_common(p)
    p.add_argument("--db", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--image-id", dest="image_id")
    p.add_argument("--method")
    p.add_argument("--two-stage", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="retrieval metrics over a corpus")
    _add_common(p)
    p.add_argument("--db", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--methods")
    p.add_argument("--max-queries", dest="max_queries", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="timing benchmarks per method")
    _add_common(p)
    p.add_argument("--db", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="(phi, sigma) hyperparameter grid")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--phi-grid", dest="phi_grid", default="1.0,1.5,2.0")
    p.add_argument("--sigma-grid", dest="sigma_grid", default="0,3")
    p.add_argument("--k", type=int)
    p.add_argument("--max-queries", dest="max_queries", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


_ERROR_CODES = [
    (err.ParameterError, "parameter_error", EXIT_CONFIG),
    (err.FormatError, "format_error", EXIT_FORMAT),
    (err.TrainingError, "training_error", EXIT_TRAINING),
    (err.ValidationError, "validation_error", EXIT_VALIDATION),
    (err.ExtractionError, "extraction_error", EXIT_VALIDATION),
    (err.EstimationError, "estimation_error", EXIT_VALIDATION),
    (err.LoadError, "load_error", EXIT_LOAD),
    (FileNotFoundError, "missing_input", EXIT_MISSING_INPUT),
    (err.BarkidError, "error", EXIT_MISSING_INPUT),
]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        for klass, name, code in _ERROR_CODES:
            if isinstance(exc, klass):
                print(
                    json.dumps({"error": name, "code": code,
                                "message": str(exc)}),
                    file=sys.stderr,
                )
                return code
        print(
            json.dumps({"error": "internal_error", "code": EXIT_OTHER,
                        "message": f"{type(exc).__name__}: {exc}"}),
            file=sys.stderr,
        )
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
