import * as tf from "@tensorflow/tfjs";
import "@tensorflow/tfjs-backend-wasm";

export const PATCH_SIZE = 64;
export const EMBEDDING_DIM = 128;

/** Select the wasm backend (XNNPACK matMul) with a fallback to the plain
 * JS backend; call once before building or running models. */
export async function initBackend(): Promise<string> {
  try {
    await tf.setBackend("wasm");
  } catch {
    await tf.setBackend("cpu");
  }
  await tf.ready();
  return tf.getBackend();
}

/** Final layer: project onto the unit hypersphere. Normalization stands
 * in for weight regularization; embeddings are unit-norm by construction. */
class L2Normalize extends tf.layers.Layer {
  static className = "L2Normalize";

  computeOutputShape(inputShape: tf.Shape): tf.Shape {
    return inputShape;
  }

  call(inputs: tf.Tensor | tf.Tensor[]): tf.Tensor {
    const x = Array.isArray(inputs) ? inputs[0] : inputs;
    return tf.tidy(() => {
      const norm = tf.add(tf.norm(x, "euclidean", -1, true), 1e-12);
      return tf.div(x, norm);
    });
  }
}
tf.serialization.registerClass(L2Normalize);

/** Fold non-overlapping block x block windows into the channel axis:
 * [N, H, W, C] -> [N, H/b, W/b, b*b*C]. A following dense layer acting on
 * the channel axis is then exactly a stride-b convolution with a b x b
 * kernel, but trains through plain matMul kernels (the wasm backend has
 * no convolution-gradient kernels). */
class Patchify extends tf.layers.Layer {
  static className = "Patchify";
  readonly block: number;

  constructor(config: { block: number; name?: string }) {
    super(config as object);
    this.block = config.block;
  }

  computeOutputShape(inputShape: tf.Shape): tf.Shape {
    const [n, h, w, c] = inputShape as number[];
    return [n, h / this.block, w / this.block, c * this.block * this.block];
  }

  call(inputs: tf.Tensor | tf.Tensor[]): tf.Tensor {
    const x = (Array.isArray(inputs) ? inputs[0] : inputs) as tf.Tensor4D;
    const b = this.block;
    return tf.tidy(() => {
      const [n, h, w, c] = x.shape;
      const blocks = tf.reshape(x, [n, h / b, b, w / b, b, c]);
      const rows = tf.transpose(blocks, [0, 1, 3, 2, 4, 5]);
      return tf.reshape(rows, [n, h / b, w / b, b * b * c]);
    });
  }

  getConfig(): tf.serialization.ConfigDict {
    return { ...super.getConfig(), block: this.block };
  }
}
tf.serialization.registerClass(Patchify);

/** Patch-embedding backbone: 64x64x3 -> 128-d unit vector. Three
 * patchify+dense stages (stride-b convolutions in matMul form) shrink the
 * grid 64 -> 16 -> 8 -> 4, then a linear projection and l2 normalization.
 * A desk-scale extractor (~360k parameters) rather than a pre-trained
 * classification trunk; the downstream engine only depends on the
 * 64x64x3 -> unit 128-d contract.
 */
export function buildModel(seed = 0): tf.LayersModel {
  let s = seed;
  const dense = (units: number, activation?: "relu") =>
    tf.layers.dense({
      units,
      activation,
      kernelInitializer: tf.initializers.heNormal({ seed: s++ }),
      biasInitializer: "zeros",
    });
  const model = tf.sequential();
  model.add(tf.layers.inputLayer({ inputShape: [PATCH_SIZE, PATCH_SIZE, 3] }));
  model.add(new Patchify({ block: 4 })); // 16x16x48
  model.add(dense(64, "relu"));
  model.add(new Patchify({ block: 2 })); // 8x8x256
  model.add(dense(128, "relu"));
  model.add(new Patchify({ block: 2 })); // 4x4x512
  model.add(dense(128, "relu"));
  model.add(tf.layers.flatten()); // 2048
  model.add(dense(EMBEDDING_DIM));
  model.add(new L2Normalize({}));
  return model;
}

/** Embed a batch of preprocessed patches; returns N x 128 unit rows. */
export function embed(model: tf.LayersModel, patches: tf.Tensor4D): tf.Tensor2D {
  return model.predict(patches) as tf.Tensor2D;
}

/** Serialize a model to plain JSON (topology + base64 weight buffer) so
 * checkpoints survive without a filesystem IO handler. Internal format:
 * the engine never reads these. */
export async function saveModelJson(model: tf.LayersModel): Promise<string> {
  let artifacts: tf.io.ModelArtifacts | null = null;
  await model.save(
    tf.io.withSaveHandler(async (a) => {
      artifacts = a;
      return { modelArtifactsInfo: { dateSaved: new Date(), modelTopologyType: "JSON" } };
    }),
  );
  const a = artifacts! as tf.io.ModelArtifacts;
  const weights = Buffer.from(a.weightData as ArrayBuffer).toString("base64");
  return JSON.stringify({
    modelTopology: a.modelTopology,
    weightSpecs: a.weightSpecs,
    weightDataB64: weights,
  });
}

export async function loadModelJson(json: string): Promise<tf.LayersModel> {
  const obj = JSON.parse(json);
  const raw = Buffer.from(obj.weightDataB64, "base64");
  const weightData = raw.buffer.slice(
    raw.byteOffset,
    raw.byteOffset + raw.byteLength,
  );
  return tf.loadLayersModel(
    tf.io.fromMemory({
      modelTopology: obj.modelTopology,
      weightSpecs: obj.weightSpecs,
      weightData,
    }),
  );
}
