import * as tf from "@tensorflow/tfjs";

/** Multi-class N-pair loss over a batch of (anchor, positive) embedding
 * pairs, where every other pair's positive serves as a negative:
 *
 *   L = (1/N) sum_i log(1 + sum_{j != i} exp(a_i . p_j - a_i . p_i))
 *
 * Computed as a row-wise logSumExp of the similarity matrix with the
 * diagonal subtracted (the j = i term contributes exp(0) = 1), which is
 * the numerically stable form of the same quantity.
 */
export function npairLoss(anchors: tf.Tensor2D, positives: tf.Tensor2D): tf.Scalar {
  if (
    anchors.shape[0] !== positives.shape[0] ||
    anchors.shape[1] !== positives.shape[1]
  ) {
    throw new Error(
      `shape mismatch: anchors ${anchors.shape} vs positives ${positives.shape}`,
    );
  }
  return tf.tidy(() => {
    const logits = tf.matMul(anchors, positives, false, true); // [i][j] = a_i . p_j
    const diag = tf.sum(tf.mul(anchors, positives), 1, true); // a_i . p_i
    const shifted = tf.sub(logits, diag);
    return tf.mean(tf.logSumExp(shifted, 1)) as tf.Scalar;
  });
}

/** Gradients of npairLoss with respect to both inputs. */
export function npairLossGrad(
  anchors: tf.Tensor2D,
  positives: tf.Tensor2D,
): { dAnchors: tf.Tensor2D; dPositives: tf.Tensor2D } {
  const grads = tf.grads((a, p) =>
    npairLoss(a as tf.Tensor2D, p as tf.Tensor2D),
  )([anchors, positives]);
  return {
    dAnchors: grads[0] as tf.Tensor2D,
    dPositives: grads[1] as tf.Tensor2D,
  };
}
