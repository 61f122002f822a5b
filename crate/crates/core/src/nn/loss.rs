use crate::error::{Result, TameError};
use crate::tensor::Tensor;

/// Mean cross-entropy of `softmax(scores)` against `labels`, and its gradient with respect to
/// `scores`.
///
/// `scores` are the sigmoid outputs of the network, so the loss stays bounded: for `k` classes it
/// lies in `[ln(1 + (k - 1)/e), ln(e + k - 1)]`.
pub fn softmax_cross_entropy(scores: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [n, k] = *scores.shape() else {
        return Err(TameError::Shape {
            expected: vec![labels.len(), 0],
            actual: scores.shape().to_vec(),
        });
    };
    if n != labels.len() || n == 0 {
        return Err(TameError::Shape {
            expected: vec![labels.len(), k],
            actual: scores.shape().to_vec(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(TameError::Label { label, classes: k });
    }

    let mut grad = vec![0.0f32; n * k];
    let mut total = 0.0f32;
    let scale = 1.0 / n as f32;
    for (i, (row, &label)) in scores.data().chunks_exact(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let g = &mut grad[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (gj, &s) in g.iter_mut().zip(row) {
            *gj = (s - max).exp();
            sum += *gj;
        }
        total += sum.ln() - (row[label] - max);
        for gj in g.iter_mut() {
            *gj = *gj / sum * scale;
        }
        g[label] -= scale;
    }
    Ok((total * scale, Tensor::new(vec![n, k], grad)?))
}
