import * as tf from "@tensorflow/tfjs";
import { PatchDataset, PatchRecord, preprocess, stack } from "./data.js";
import { Rng } from "./rng.js";
import { EMBEDDING_DIM, PATCH_SIZE } from "./model.js";

/** P@1 over groups of `groupSize` keypoints: embed two patches per
 * keypoint, and for each patch find its nearest other patch in the group
 * (squared l2, ties broken by index); a hit means the nearest patch shows
 * the same keypoint. Returns the mean over groups; an underfull tail
 * group still counts if it has at least two keypoints.
 *
 * `embeddings` holds one unit 128-vector per patch, two consecutive rows
 * per keypoint.
 */
export function pAt1FromEmbeddings(
  embeddings: Float32Array,
  nKeypoints: number,
  groupSize = 50,
): number {
  const groupScores: number[] = [];
  for (let g = 0; g < nKeypoints; g += groupSize) {
    const kps = Math.min(groupSize, nKeypoints - g);
    if (kps < 2) break;
    const base = g * 2;
    const m = kps * 2;
    let hits = 0;
    for (let q = 0; q < m; ++q) {
      let best = -1;
      let bestD = Infinity;
      for (let c = 0; c < m; ++c) {
        if (c === q) continue;
        let d = 0;
        for (let k = 0; k < EMBEDDING_DIM; ++k) {
          const diff =
            embeddings[(base + q) * EMBEDDING_DIM + k] -
            embeddings[(base + c) * EMBEDDING_DIM + k];
          d += diff * diff;
        }
        if (d < bestD) {
          bestD = d;
          best = c;
        }
      }
      // Partner of patch q is q^1 (rows are paired consecutively).
      if (best === (q ^ 1)) hits += 1;
    }
    groupScores.push(hits / m);
  }
  if (groupScores.length === 0) throw new Error("validation set too small");
  return groupScores.reduce((a, b) => a + b, 0) / groupScores.length;
}

/** Draw the per-keypoint validation pairs once (two patches per keypoint,
 * fixed seed) so the validation score is comparable across iterations. */
export function drawValidationPairs(
  ds: PatchDataset,
  seed: number,
): PatchRecord[] {
  const rng = new Rng(seed);
  const keys = [...ds.groups.keys()].sort();
  const out: PatchRecord[] = [];
  for (const key of keys) {
    const recs = ds.groups.get(key)!;
    const [a, b] = rng.distinctPair(recs.length);
    out.push(recs[a], recs[b]);
  }
  return out;
}

/** Embed validation patches (no augmentation) and compute P@1. */
export function validatePAt1(
  model: tf.LayersModel,
  valPairs: PatchRecord[],
  groupSize = 50,
): number {
  const emb = tf.tidy(() => {
    const x = tf.tensor4d(
      stack(valPairs.map((r) => preprocess(r.pixels))),
      [valPairs.length, PATCH_SIZE, PATCH_SIZE, 3],
    );
    return model.predict(x) as tf.Tensor2D;
  });
  const data = emb.dataSync() as Float32Array;
  emb.dispose();
  return pAt1FromEmbeddings(data, valPairs.length / 2, groupSize);
}
