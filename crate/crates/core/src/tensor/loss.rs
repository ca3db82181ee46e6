use super::Tensor;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (loss, mut probs) = forward(logits, labels)?;
    let k = logits.dims()[1];
    let batch = labels.len() as f64;
    for (row, &y) in labels.iter().enumerate() {
        probs[row * k + y] -= 1.0;
    }
    probs.iter_mut().for_each(|p| *p /= batch);
    Ok((loss, Tensor::new(logits.dims().to_vec(), probs)?))
}

/// Returns the mean loss and the row-wise softmax probabilities.
pub(crate) fn forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(Error::shape("softmax_xent logits", &[labels.len(), 0], d));
    }
    let k = d[1];
    let mut probs = vec![0.0; logits.numel()];
    let mut total = 0.0;
    for (row, (z, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                client: None,
                sample: row,
                label: y,
                classes: k,
            });
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = &mut probs[row * k..(row + 1) * k];
        let mut sum = 0.0;
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - max).exp();
            sum += *pi;
        }
        p.iter_mut().for_each(|v| *v /= sum);
        total += sum.ln() - (z[y] - max);
    }
    Ok((total / labels.len() as f64, probs))
}
