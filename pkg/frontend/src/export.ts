import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";
import { DescriptorRecord, writeBkd1 } from "./bkd1.js";
import { preprocess, readPngRgb, stack } from "./data.js";
import { EMBEDDING_DIM, PATCH_SIZE } from "./model.js";

export interface PatchRequest {
  imageId: string;
  keypointIndex: number;
  path: string;
}

/** Read the engine's requests.jsonl: one 64x64 crop per database
 * keypoint, keyed (image_id, keypoint_index). */
export function readPatchRequests(requestsPath: string): PatchRequest[] {
  const base = path.dirname(requestsPath);
  return fs
    .readFileSync(requestsPath, "utf8")
    .split("\n")
    .filter((l) => l.trim().length > 0)
    .map((line) => {
      const row = JSON.parse(line);
      return {
        imageId: row.image_id as string,
        keypointIndex: row.keypoint_index as number,
        path: path.isAbsolute(row.path)
          ? row.path
          : path.resolve(base, "..", row.path),
      };
    });
}

/** Embed requested patches (evaluation mode, no augmentation) and return
 * BKD1 records in request order. */
export function embedRequests(
  model: tf.LayersModel,
  requests: PatchRequest[],
  batchSize = 256,
): DescriptorRecord[] {
  const out: DescriptorRecord[] = [];
  for (let start = 0; start < requests.length; start += batchSize) {
    const chunk = requests.slice(start, start + batchSize);
    const emb = tf.tidy(() => {
      const x = tf.tensor4d(
        stack(chunk.map((r) => preprocess(readPngRgb(r.path)))),
        [chunk.length, PATCH_SIZE, PATCH_SIZE, 3],
      );
      return model.predict(x) as tf.Tensor2D;
    });
    const data = emb.dataSync() as Float32Array;
    emb.dispose();
    for (let i = 0; i < chunk.length; ++i) {
      out.push({
        imageId: chunk[i].imageId,
        keypointIndex: chunk[i].keypointIndex,
        values: data.slice(i * EMBEDDING_DIM, (i + 1) * EMBEDDING_DIM),
      });
    }
  }
  return out;
}

/** requests.jsonl -> BKD1 descriptor file the engine can load. */
export function exportDescriptors(
  model: tf.LayersModel,
  requestsPath: string,
  outPath: string,
): number {
  const requests = readPatchRequests(requestsPath);
  const records = embedRequests(model, requests);
  writeBkd1(outPath, records);
  return records.length;
}
