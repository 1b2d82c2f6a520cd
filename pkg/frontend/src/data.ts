import * as fs from "node:fs";
import * as path from "node:path";
import { PNG } from "pngjs";
import { Rng } from "./rng.js";
import { PATCH_SIZE } from "./model.js";

/** One patch record from the archive manifest: a 64x64 crop of one view,
 * aligned to a physical surface keypoint. */
export interface PatchRecord {
  surfaceId: string;
  keypointId: string;
  imageId: string;
  /** RGB bytes, length 64*64*3 (grayscale sources are replicated). */
  pixels: Uint8Array;
}

/** Patches grouped by physical keypoint; train/val split is by surface so
 * validation textures are never seen during optimization. */
export interface PatchDataset {
  /** keypoint key -> patch records (>= 2 each). */
  groups: Map<string, PatchRecord[]>;
  surfaces: string[];
}

export function readPngRgb(filePath: string): Uint8Array {
  const png = PNG.sync.read(fs.readFileSync(filePath));
  const n = png.width * png.height;
  const out = new Uint8Array(n * 3);
  for (let i = 0; i < n; ++i) {
    out[i * 3] = png.data[i * 4];
    out[i * 3 + 1] = png.data[i * 4 + 1];
    out[i * 3 + 2] = png.data[i * 4 + 2];
  }
  return out;
}

/** Load a patch archive (PNG tree + JSONL manifest). Keypoints with fewer
 * than two patches cannot form a positive pair and are dropped with a
 * warning. */
export function loadPatchArchive(dir: string): PatchDataset {
  const manifest = path.join(dir, "manifest.jsonl");
  const lines = fs
    .readFileSync(manifest, "utf8")
    .split("\n")
    .filter((l) => l.trim().length > 0);
  const groups = new Map<string, PatchRecord[]>();
  const surfaces = new Set<string>();
  for (const line of lines) {
    const row = JSON.parse(line);
    const pngPath = path.isAbsolute(row.path)
      ? row.path
      : path.join(dir, row.surface_id, row.keypoint_id, `${row.image_id}.png`);
    const rec: PatchRecord = {
      surfaceId: row.surface_id,
      keypointId: `${row.surface_id}/${row.keypoint_id}`,
      imageId: row.image_id,
      pixels: readPngRgb(pngPath),
    };
    surfaces.add(rec.surfaceId);
    const group = groups.get(rec.keypointId);
    if (group) group.push(rec);
    else groups.set(rec.keypointId, [rec]);
  }
  for (const [key, recs] of [...groups]) {
    if (recs.length < 2) {
      console.warn(`dropping keypoint ${key}: only ${recs.length} patch(es)`);
      groups.delete(key);
    }
  }
  return { groups, surfaces: [...surfaces].sort() };
}

/** Deterministic split by surface: every valFraction-th surface (at least
 * one) goes to validation, the rest to training. */
export function splitBySurface(
  ds: PatchDataset,
  valFraction = 0.25,
  seed = 0,
): { train: PatchDataset; val: PatchDataset } {
  const order = new Rng(seed).shuffle([...ds.surfaces]);
  const nVal = Math.max(1, Math.round(order.length * valFraction));
  const valSet = new Set(order.slice(0, nVal));
  const pick = (want: (s: string) => boolean): PatchDataset => {
    const groups = new Map<string, PatchRecord[]>();
    const surfaces = new Set<string>();
    for (const [key, recs] of ds.groups) {
      if (want(recs[0].surfaceId)) {
        groups.set(key, recs);
        surfaces.add(recs[0].surfaceId);
      }
    }
    return { groups, surfaces: [...surfaces].sort() };
  };
  return {
    train: pick((s) => !valSet.has(s)),
    val: pick((s) => valSet.has(s)),
  };
}

export interface NPairBatch {
  /** Parallel arrays: anchors[i] and positives[i] show the same keypoint. */
  anchors: PatchRecord[];
  positives: PatchRecord[];
}

/** One epoch of N-pair batches: every keypoint appears once per pass, with
 * its two patches drawn uniformly from the unordered pairs, so each patch
 * has equal probability of co-occurring with every other patch of its
 * keypoint. For each anchor the other pairs' positives act as negatives.
 */
export function* buildBatches(
  ds: PatchDataset,
  batchKeypoints: number,
  seed: number,
): Generator<NPairBatch> {
  if (batchKeypoints < 2) throw new Error("batchKeypoints must be >= 2");
  const rng = new Rng(seed);
  const keys = rng.shuffle([...ds.groups.keys()].sort());
  for (let start = 0; start < keys.length; start += batchKeypoints) {
    const chunk = keys.slice(start, start + batchKeypoints);
    if (chunk.length < 2) break; // a single keypoint has no negatives
    const anchors: PatchRecord[] = [];
    const positives: PatchRecord[] = [];
    for (const key of chunk) {
      const recs = ds.groups.get(key)!;
      const [a, b] = rng.distinctPair(recs.length);
      anchors.push(recs[a]);
      positives.push(recs[b]);
    }
    for (let i = 0; i < anchors.length; ++i) {
      if (anchors[i].keypointId !== positives[i].keypointId) {
        throw new Error("positive pair crosses keypoints");
      }
    }
    yield { anchors, positives };
  }
}

// ---------------------------------------------------------------------------
// Preprocessing and augmentation
// ---------------------------------------------------------------------------

const N = PATCH_SIZE * PATCH_SIZE;

/** Map 8-bit pixels into (-1, 1): (x - 127.5) / 128 per channel. */
export function preprocess(pixels: Uint8Array | Float32Array): Float32Array {
  const out = new Float32Array(pixels.length);
  for (let i = 0; i < pixels.length; ++i) out[i] = (pixels[i] - 127.5) / 128.0;
  return out;
}

function gaussianKernel(sigma: number): Float32Array {
  const radius = Math.max(1, Math.ceil(2.5 * sigma));
  const k = new Float32Array(2 * radius + 1);
  let sum = 0;
  for (let i = -radius; i <= radius; ++i) {
    const v = Math.exp(-(i * i) / (2 * sigma * sigma));
    k[i + radius] = v;
    sum += v;
  }
  for (let i = 0; i < k.length; ++i) k[i] /= sum;
  return k;
}

/** Separable Gaussian blur of a 64x64x3 float patch, edge-replicated. */
export function blurPatch(pix: Float32Array, sigma: number): Float32Array {
  if (sigma <= 0) return pix;
  const k = gaussianKernel(sigma);
  const radius = (k.length - 1) / 2;
  const tmp = new Float32Array(pix.length);
  const out = new Float32Array(pix.length);
  const size = PATCH_SIZE;
  for (let y = 0; y < size; ++y) {
    for (let x = 0; x < size; ++x) {
      for (let c = 0; c < 3; ++c) {
        let acc = 0;
        for (let t = -radius; t <= radius; ++t) {
          const xx = Math.min(size - 1, Math.max(0, x + t));
          acc += k[t + radius] * pix[(y * size + xx) * 3 + c];
        }
        tmp[(y * size + x) * 3 + c] = acc;
      }
    }
  }
  for (let y = 0; y < size; ++y) {
    for (let x = 0; x < size; ++x) {
      for (let c = 0; c < 3; ++c) {
        let acc = 0;
        for (let t = -radius; t <= radius; ++t) {
          const yy = Math.min(size - 1, Math.max(0, y + t));
          acc += k[t + radius] * tmp[(yy * size + x) * 3 + c];
        }
        out[(y * size + x) * 3 + c] = acc;
      }
    }
  }
  return out;
}

/** Training-time jitter applied before normalization: global brightness
 * +-25%, per-channel color +-10%, Gaussian blur sigma in [0, 1.5].
 * Validation and export paths never call this. */
export function augment(pixels: Uint8Array, rng: Rng): Float32Array {
  const brightness = rng.uniform(0.75, 1.25);
  const color = [
    rng.uniform(0.9, 1.1),
    rng.uniform(0.9, 1.1),
    rng.uniform(0.9, 1.1),
  ];
  const sigma = rng.uniform(0.0, 1.5);
  let out: Float32Array = new Float32Array(pixels.length);
  for (let i = 0; i < N; ++i) {
    for (let c = 0; c < 3; ++c) {
      const v = pixels[i * 3 + c] * brightness * color[c];
      out[i * 3 + c] = Math.min(255, Math.max(0, v));
    }
  }
  out = blurPatch(out, sigma);
  return preprocess(out);
}

/** Stack preprocessed patches into the flat N x 64 x 64 x 3 buffer that
 * feeds tf.tensor4d. */
export function stack(patches: Float32Array[]): Float32Array {
  const out = new Float32Array(patches.length * N * 3);
  for (let i = 0; i < patches.length; ++i) out.set(patches[i], i * N * 3);
  return out;
}
