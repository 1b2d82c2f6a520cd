import { PatchDataset, PatchRecord, blurPatch } from "../src/data.js";
import { PATCH_SIZE } from "../src/model.js";
import { Rng } from "../src/rng.js";

const N = PATCH_SIZE * PATCH_SIZE;

/** Distinct random texture per keypoint: low-frequency grayscale blobs
 * (8x8 noise bilinearly upsampled to 64x64, lightly smoothed). */
export function makeTexture(rng: Rng): Float32Array {
  const grid = 8;
  const coarse = new Float32Array(grid * grid);
  for (let i = 0; i < coarse.length; ++i) coarse[i] = rng.uniform(30, 225);
  const out = new Float32Array(N * 3);
  const scale = grid / PATCH_SIZE;
  for (let y = 0; y < PATCH_SIZE; ++y) {
    for (let x = 0; x < PATCH_SIZE; ++x) {
      const gy = Math.min(grid - 1.001, y * scale);
      const gx = Math.min(grid - 1.001, x * scale);
      const y0 = Math.floor(gy);
      const x0 = Math.floor(gx);
      const fy = gy - y0;
      const fx = gx - x0;
      const v =
        coarse[y0 * grid + x0] * (1 - fy) * (1 - fx) +
        coarse[y0 * grid + x0 + 1] * (1 - fy) * fx +
        coarse[(y0 + 1) * grid + x0] * fy * (1 - fx) +
        coarse[(y0 + 1) * grid + x0 + 1] * fy * fx;
      for (let c = 0; c < 3; ++c) out[(y * PATCH_SIZE + x) * 3 + c] = v;
    }
  }
  return blurPatch(out, 1.0);
}

/** One jittered view of a texture: strong brightness/contrast jitter,
 * additive noise, and occasional blur, so an untrained embedding does not
 * already solve the retrieval task. */
export function jitterView(texture: Float32Array, rng: Rng): Uint8Array {
  const gain = rng.uniform(0.5, 1.5);
  const bias = rng.uniform(-40, 40);
  const sigma = rng.uniform(0, 1.2);
  const noisy = new Float32Array(texture.length);
  for (let i = 0; i < texture.length; ++i) {
    const noise = (rng.next() + rng.next() + rng.next() - 1.5) * 24.0;
    noisy[i] = texture[i] * gain + bias + noise;
  }
  const blurred = blurPatch(noisy, sigma);
  const out = new Uint8Array(texture.length);
  for (let i = 0; i < texture.length; ++i) {
    out[i] = Math.round(Math.min(255, Math.max(0, blurred[i])));
  }
  return out;
}

/** Synthetic in-memory dataset: `surfaces` x `kpsPerSurface` keypoints,
 * each a distinct texture seen in `views` jittered patches. */
export function makeToyDataset(
  surfaces: number,
  kpsPerSurface: number,
  views: number,
  seed: number,
): PatchDataset {
  const rng = new Rng(seed);
  const groups = new Map<string, PatchRecord[]>();
  const surfaceIds: string[] = [];
  for (let s = 0; s < surfaces; ++s) {
    const surfaceId = `toy${s.toString().padStart(3, "0")}`;
    surfaceIds.push(surfaceId);
    for (let k = 0; k < kpsPerSurface; ++k) {
      const keypointId = `${surfaceId}/kp${k.toString().padStart(5, "0")}`;
      const texture = makeTexture(rng);
      const recs: PatchRecord[] = [];
      for (let v = 0; v < views; ++v) {
        recs.push({
          surfaceId,
          keypointId,
          imageId: `${surfaceId}_v${v.toString().padStart(2, "0")}`,
          pixels: jitterView(texture, rng),
        });
      }
      groups.set(keypointId, recs);
    }
  }
  return { groups, surfaces: surfaceIds };
}
