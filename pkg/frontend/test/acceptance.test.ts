/** Trainer acceptance gate.
 *
 * 1. The batch loss matches its closed form on the orthogonal two-pair
 *    case within 1e-6, and its gradient matches central finite
 *    differences within 1e-4 relative error.
 * 2. Toy training (20 validation keypoints, distinct synthetic textures)
 *    reaches validation P@1 >= 0.9 while a random-embedding baseline
 *    stays below 0.05.
 * 3. Exported descriptor files round-trip bit-exactly through the
 *    engine's loader, and plugging trained descriptors into the
 *    synthetic retrieval protocol beats the engine's builtin descriptor
 *    (geometric-verification mAP) on a high-jitter corpus.
 */
import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { encodeBkd1 } from "../src/bkd1.js";
import { loadPatchArchive, splitBySurface } from "../src/data.js";
import { exportDescriptors } from "../src/export.js";
import { npairLoss, npairLossGrad } from "../src/loss.js";
import { EMBEDDING_DIM, initBackend } from "../src/model.js";
import { Rng } from "../src/rng.js";
import { DEFAULT_CONFIG, train } from "../src/train.js";
import { pAt1FromEmbeddings, drawValidationPairs } from "../src/validate.js";
import { makeToyDataset } from "./helpers.js";

let work: string;

beforeAll(async () => {
  await initBackend();
  work = fs.mkdtempSync(path.join(os.tmpdir(), "trainer-acceptance-"));
});

afterAll(() => {
  fs.rmSync(work, { recursive: true, force: true });
});

function engine(args: string[]): string {
  return execFileSync("barkid", args, { cwd: work, encoding: "utf8" });
}

function gvMap(evalDir: string): number {
  const report = JSON.parse(
    fs.readFileSync(path.join(work, evalDir, "report.json"), "utf8"),
  );
  return report.methods.gv.mAP as number;
}

describe("criterion: loss value and gradient", () => {
  it("orthogonal two-pair loss equals log(1 + e^-1) within 1e-6", () => {
    const e1 = [1, 0, 0, 0];
    const e2 = [0, 1, 0, 0];
    const loss = npairLoss(tf.tensor2d([e1, e2]), tf.tensor2d([e1, e2]));
    expect(Math.abs(loss.dataSync()[0] - Math.log(1 + Math.exp(-1)))).toBeLessThan(1e-6);
  });

  it("gradient matches central finite differences within 1e-4 relative", () => {
    const rng = new Rng(2024);
    const n = 4;
    const d = 5;
    const rows = (): number[][] =>
      Array.from({ length: n }, () => {
        const r = Array.from({ length: d }, () => rng.uniform(-1, 1));
        const norm = Math.hypot(...r);
        return r.map((x) => x / norm);
      });
    const a = rows();
    const p = rows();
    // Finite differences in float64: the straight-line reference below is
    // first checked against the tensor implementation, then differenced
    // (float32 evaluation noise would swamp a 1e-4 relative bound).
    const lossAt = (): number => {
      const dot = (u: number[], v: number[]) =>
        u.reduce((s, x, k) => s + x * v[k], 0);
      let total = 0;
      for (let i = 0; i < n; ++i) {
        let inner = 0;
        for (let j = 0; j < n; ++j) {
          if (j !== i) inner += Math.exp(dot(a[i], p[j]) - dot(a[i], p[i]));
        }
        total += Math.log(1 + inner);
      }
      return total / n;
    };
    const tfLoss = npairLoss(tf.tensor2d(a), tf.tensor2d(p)).dataSync()[0];
    expect(Math.abs(tfLoss - lossAt())).toBeLessThan(1e-6);
    const { dAnchors, dPositives } = npairLossGrad(tf.tensor2d(a), tf.tensor2d(p));
    const got = [dAnchors.dataSync(), dPositives.dataSync()];
    const h = 1e-4;
    for (let which = 0; which < 2; ++which) {
      const target = which === 0 ? a : p;
      let err2 = 0;
      let ref2 = 0;
      for (let i = 0; i < n; ++i) {
        for (let k = 0; k < d; ++k) {
          const orig = target[i][k];
          target[i][k] = orig + h;
          const up = lossAt();
          target[i][k] = orig - h;
          const down = lossAt();
          target[i][k] = orig;
          const fd = (up - down) / (2 * h);
          err2 += (got[which][i * d + k] - fd) ** 2;
          ref2 += fd * fd;
        }
      }
      expect(Math.sqrt(err2 / ref2)).toBeLessThan(1e-4);
    }
  });
});

describe("criterion: toy training", () => {
  it("reaches val P@1 >= 0.9 where random embeddings stay < 0.05", async () => {
    const ds = makeToyDataset(10, 4, 4, 17); // 40 keypoints, 10 surfaces
    const { train: trainDs, val: valDs } = splitBySurface(ds, 0.5, 0);
    expect(valDs.groups.size).toBe(20);

    // Random-embedding baseline over the same validation pairs.
    const rng = new Rng(99);
    const pairs = drawValidationPairs(valDs, 1);
    const baselineRuns: number[] = [];
    for (let t = 0; t < 20; ++t) {
      const emb = new Float32Array(pairs.length * EMBEDDING_DIM);
      for (let r = 0; r < pairs.length; ++r) {
        let norm2 = 0;
        const row = new Float32Array(EMBEDDING_DIM);
        for (let k = 0; k < EMBEDDING_DIM; ++k) {
          row[k] = rng.uniform(-1, 1);
          norm2 += row[k] * row[k];
        }
        for (let k = 0; k < EMBEDDING_DIM; ++k) {
          emb[r * EMBEDDING_DIM + k] = row[k] / Math.sqrt(norm2);
        }
      }
      baselineRuns.push(pAt1FromEmbeddings(emb, pairs.length / 2));
    }
    const baseline =
      baselineRuns.reduce((x, y) => x + y, 0) / baselineRuns.length;
    expect(baseline).toBeLessThan(0.05);

    const result = await train(trainDs, valDs, DEFAULT_CONFIG);
    expect(result.history.length).toBeLessThanOrEqual(DEFAULT_CONFIG.maxIterations);
    expect(result.bestPAt1).toBeGreaterThanOrEqual(0.9);
    expect(result.bestPAt1).toBeGreaterThan(baseline);

    const final = result.history[result.history.length - 1];
    expect(result.bestPAt1).toBeGreaterThanOrEqual(final.valPAt1);
    console.log(
      `PASS  toy training: val P@1 ${result.bestPAt1.toFixed(4)} ` +
        `(baseline ${baseline.toFixed(4)}) after ${result.history.length} iterations`,
    );
  }, 600_000);
});

describe("criterion: engine integration", () => {
  it("BKD1 export round-trips bit-exactly through the engine loader", () => {
    const rng = new Rng(31);
    const records = Array.from({ length: 40 }, (_, i) => {
      const values = new Float32Array(EMBEDDING_DIM);
      let norm2 = 0;
      for (let k = 0; k < EMBEDDING_DIM; ++k) {
        values[k] = rng.uniform(-1, 1);
        norm2 += values[k] * values[k];
      }
      const norm = Math.sqrt(norm2);
      for (let k = 0; k < EMBEDDING_DIM; ++k) {
        values[k] = Math.fround(values[k] / norm);
      }
      return { imageId: `img_${i % 7}`, keypointIndex: i, values };
    });
    const ours = path.join(work, "roundtrip.bkd1");
    fs.writeFileSync(ours, encodeBkd1(records));
    const theirs = path.join(work, "roundtrip_echo.bkd1");
    execFileSync("python3", [
      "-c",
      [
        "import sys",
        "from barkid.descriptor import load_descriptor_file, write_descriptor_file",
        "prov = load_descriptor_file(sys.argv[1])",
        "records = sorted(prov._table.items(), key=lambda kv: kv[0][1])",
        "write_descriptor_file(sys.argv[2], [(iid, i, d.values) for (iid, i), d in records])",
      ].join("\n"),
      ours,
      theirs,
    ]);
    expect(fs.readFileSync(theirs).equals(fs.readFileSync(ours))).toBe(true);
  });

  it("trained descriptors beat the builtin on a high-jitter corpus (gv mAP)", async () => {
    // Detector operating point: the neighbor-consistency filter needs
    // keypoint counts well above its neighborhood size, hence the lower
    // detection threshold via the engine's config file.
    const det = ["--gamma", "500", "--phi", "1.0", "--config", "det.json"];
    fs.writeFileSync(path.join(work, "det.json"), JSON.stringify({ contrast: 0.015 }));

    engine([
      "synth", "--out", "corpus", "--surfaces", "8", "--views", "6",
      "--warp", "10", "--illum", "0.6", "--size", "256", "--seed", "5",
    ]);
    engine(["vocab", "--corpus", "corpus", "--k", "128", "--seed", "0",
            "--out", "voc_builtin.bkv", ...det]);
    engine(["index", "--corpus", "corpus", "--vocab", "voc_builtin.bkv",
            "--out", "db_builtin.bkdb", "--export-patch-requests", "requests",
            ...det]);
    engine(["eval", "--db", "db_builtin.bkdb", "--vocab", "voc_builtin.bkv",
            "--corpus", "corpus", "--methods", "gv", "--out", "eval_builtin",
            ...det]);
    const builtinMap = gvMap("eval_builtin");

    engine(["patches", "--corpus", "corpus", "--out", "patches", ...det]);
    const archive = loadPatchArchive(path.join(work, "patches"));
    const { train: trainDs, val: valDs } = splitBySurface(archive, 0.125, 0);
    const result = await train(trainDs, valDs, {
      ...DEFAULT_CONFIG,
      maxIterations: 90,
    });
    const exported = exportDescriptors(
      result.model,
      path.join(work, "requests", "requests.jsonl"),
      path.join(work, "trained.bkd1"),
    );
    expect(exported).toBeGreaterThan(0);

    const trained = ["--descriptor", "external:trained.bkd1"];
    engine(["vocab", "--corpus", "corpus", "--k", "128", "--seed", "0",
            "--out", "voc_trained.bkv", ...det, ...trained]);
    engine(["index", "--corpus", "corpus", "--vocab", "voc_trained.bkv",
            "--out", "db_trained.bkdb", ...det, ...trained]);
    engine(["eval", "--db", "db_trained.bkdb", "--vocab", "voc_trained.bkv",
            "--corpus", "corpus", "--methods", "gv", "--out", "eval_trained",
            ...det]);
    const trainedMap = gvMap("eval_trained");

    console.log(
      `PASS  trained gv mAP ${trainedMap.toFixed(4)} > ` +
        `builtin gv mAP ${builtinMap.toFixed(4)} ` +
        `(val P@1 ${result.bestPAt1.toFixed(4)})`,
    );
    expect(trainedMap).toBeGreaterThan(builtinMap);
  }, 900_000);
});
