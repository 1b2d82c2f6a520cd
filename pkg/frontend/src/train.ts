import * as tf from "@tensorflow/tfjs";
import {
  NPairBatch,
  PatchDataset,
  augment,
  buildBatches,
  stack,
} from "./data.js";
import { npairLoss } from "./loss.js";
import { PATCH_SIZE, buildModel } from "./model.js";
import { Rng } from "./rng.js";
import { drawValidationPairs, validatePAt1 } from "./validate.js";

export interface TrainConfig {
  batchKeypoints: number; // keypoints per N-pair batch
  maxIterations: number; // one iteration = one pass, one pair per keypoint
  learningRate: number;
  plateauHalve: number; // halve LR after this many iterations without improvement
  plateauStop: number; // early-stop after this many iterations without improvement
  valGroupSize: number;
  seed: number;
  verbose?: boolean;
}

export const DEFAULT_CONFIG: TrainConfig = {
  batchKeypoints: 32,
  maxIterations: 200,
  learningRate: 1e-4,
  plateauHalve: 20,
  plateauStop: 40,
  valGroupSize: 50,
  seed: 0,
};

export interface IterationRecord {
  iteration: number;
  meanLoss: number;
  valPAt1: number;
  learningRate: number;
}

export interface TrainResult {
  model: tf.LayersModel; // weights of the best-validation checkpoint
  history: IterationRecord[];
  bestPAt1: number;
  bestIteration: number;
  parameterCount: number;
}

function batchTensors(batch: NPairBatch, rng: Rng): [tf.Tensor4D, tf.Tensor4D] {
  const shape: [number, number, number, number] = [
    batch.anchors.length,
    PATCH_SIZE,
    PATCH_SIZE,
    3,
  ];
  const a = tf.tensor4d(
    stack(batch.anchors.map((r) => augment(r.pixels, rng))),
    shape,
  );
  const p = tf.tensor4d(
    stack(batch.positives.map((r) => augment(r.pixels, rng))),
    shape,
  );
  return [a, p];
}

/** N-pair metric-learning loop: Adam, halve the learning rate when the
 * validation P@1 plateaus for `plateauHalve` iterations, stop after
 * `plateauStop` stagnant iterations or `maxIterations`, and return the
 * checkpoint with the best validation P@1. */
export async function train(
  trainDs: PatchDataset,
  valDs: PatchDataset,
  config: TrainConfig = DEFAULT_CONFIG,
): Promise<TrainResult> {
  const model = buildModel(config.seed);
  const valPairs = drawValidationPairs(valDs, config.seed + 1);
  let lr = config.learningRate;
  let optimizer = tf.train.adam(lr);
  const augRng = new Rng(config.seed + 2);

  const history: IterationRecord[] = [];
  let bestPAt1 = -1;
  let bestIteration = -1;
  let bestWeights: tf.Tensor[] | null = null;
  let sinceBest = 0;

  for (let it = 0; it < config.maxIterations; ++it) {
    let lossSum = 0;
    let nBatches = 0;
    for (const batch of buildBatches(
      trainDs,
      config.batchKeypoints,
      config.seed + 1000 + it,
    )) {
      const [a, p] = batchTensors(batch, augRng);
      const loss = optimizer.minimize(
        () =>
          npairLoss(
            model.apply(a, { training: true }) as tf.Tensor2D,
            model.apply(p, { training: true }) as tf.Tensor2D,
          ),
        true,
      ) as tf.Scalar;
      const value = loss.dataSync()[0];
      loss.dispose();
      a.dispose();
      p.dispose();
      if (!Number.isFinite(value)) {
        throw new Error(
          `loss diverged at iteration ${it} (loss=${value}); ` +
            `state: lr=${lr}, best P@1=${bestPAt1} @ ${bestIteration}`,
        );
      }
      lossSum += value;
      nBatches += 1;
    }
    const valPAt1 = validatePAt1(model, valPairs, config.valGroupSize);
    history.push({
      iteration: it,
      meanLoss: lossSum / Math.max(1, nBatches),
      valPAt1,
      learningRate: lr,
    });
    if (config.verbose) {
      console.log(
        `iter ${it}: loss=${(lossSum / Math.max(1, nBatches)).toFixed(4)} ` +
          `val P@1=${valPAt1.toFixed(4)} lr=${lr.toExponential(1)}`,
      );
    }

    if (valPAt1 > bestPAt1) {
      bestPAt1 = valPAt1;
      bestIteration = it;
      sinceBest = 0;
      if (bestWeights) bestWeights.forEach((w) => w.dispose());
      bestWeights = model.getWeights().map((w) => w.clone());
    } else {
      sinceBest += 1;
      if (sinceBest > 0 && sinceBest % config.plateauHalve === 0) {
        lr /= 2;
        optimizer.dispose();
        optimizer = tf.train.adam(lr);
      }
      if (sinceBest >= config.plateauStop) break;
    }
  }
  optimizer.dispose();
  if (bestWeights) {
    model.setWeights(bestWeights);
    bestWeights.forEach((w) => w.dispose());
  }
  return {
    model,
    history,
    bestPAt1,
    bestIteration,
    parameterCount: model.countParams(),
  };
}
