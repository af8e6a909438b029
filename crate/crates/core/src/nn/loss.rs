use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Sigmoid cross-entropy on a single logit.
    BinaryCe,
    /// Softmax cross-entropy; multi-hot targets are normalized to sum to one.
    CategoricalCe,
    /// Independent sigmoid cross-entropy per label, averaged over labels.
    PerLabelBinaryCe,
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(z: &[f32]) -> Vec<f32> {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn normalized_target(t: &[f32]) -> Vec<f32> {
    let s: f32 = t.iter().sum();
    if s > 0.0 {
        t.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / t.len() as f32; t.len()]
    }
}

impl LossKind {
    /// Mean loss over the batch and gradient w.r.t. the logits.
    ///
    /// `targets` is row-major `[batch, outputs]` with values in `{0, 1}`.
    pub fn loss_and_grad(self, logits: &Tensor, targets: &[f32]) -> (f64, Tensor) {
        let n = logits.batch();
        let d = logits.sample_len();
        assert_eq!(targets.len(), n * d, "target matrix does not match logits");
        let mut grad = vec![0.0f32; n * d];
        let mut total = 0.0f64;
        match self {
            LossKind::BinaryCe | LossKind::PerLabelBinaryCe => {
                let scale = 1.0 / (n * d) as f32;
                for ((z, y), g) in logits.data().iter().zip(targets).zip(grad.iter_mut()) {
                    let (z64, y64) = (*z as f64, *y as f64);
                    total += z64.max(0.0) - z64 * y64 + (-z64.abs()).exp().ln_1p();
                    *g = (sigmoid(*z) - y) * scale;
                }
                total /= (n * d) as f64;
            }
            LossKind::CategoricalCe => {
                let scale = 1.0 / n as f32;
                for s in 0..n {
                    let z = &logits.data()[s * d..(s + 1) * d];
                    let t = normalized_target(&targets[s * d..(s + 1) * d]);
                    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let lse = m + z.iter().map(|v| (*v as f64 - m).exp()).sum::<f64>().ln();
                    total += t
                        .iter()
                        .zip(z)
                        .map(|(ti, zi)| *ti as f64 * (lse - *zi as f64))
                        .sum::<f64>();
                    let p = softmax_row(z);
                    for j in 0..d {
                        grad[s * d + j] = (p[j] - t[j]) * scale;
                    }
                }
                total /= n as f64;
            }
        }
        (total, Tensor::from_vec(logits.shape(), grad).expect("grad shape"))
    }

    pub fn loss(self, logits: &Tensor, targets: &[f32]) -> f64 {
        self.loss_and_grad(logits, targets).0
    }

    /// Output probabilities for the logits (sigmoid or softmax).
    pub fn activate(self, logits: &Tensor) -> Vec<f32> {
        match self {
            LossKind::BinaryCe | LossKind::PerLabelBinaryCe => logits.data().iter().map(|&z| sigmoid(z)).collect(),
            LossKind::CategoricalCe => {
                let d = logits.sample_len();
                logits.data().chunks(d).flat_map(softmax_row).collect()
            }
        }
    }
}
