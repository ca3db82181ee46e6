//! Accuracy and loss evaluation, the sample-weighted loss gap and the
//! discrepancy radii between nested submodels.

use crate::data::{downsample, upsample, Dataset};
use crate::error::{Error, Result};
use crate::local::{argmax_rows, LocalModel, EVAL_CHUNK};
use crate::tensor::{softmax_xent, Tensor};

/// Anything that maps `[n, C, H, H]` images to `[n, K]` logits.
pub trait Submodel {
    fn input_size(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Submodel for LocalModel {
    fn input_size(&self) -> usize {
        LocalModel::input_size(self)
    }

    fn num_classes(&self) -> usize {
        LocalModel::num_classes(self)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        LocalModel::logits(self, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean softmax cross-entropy.
    pub loss: f64,
    /// Fraction of samples whose argmax (lowest index on ties) equals the label.
    pub accuracy: f64,
    pub samples: usize,
}

/// Evaluates `model` on all of `data` in chunks. The model is only read.
pub fn evaluate(model: &dyn Submodel, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Metric("cannot evaluate on an empty dataset".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        let (loss, _) = softmax_xent(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        samples: data.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskGap {
    pub samples: usize,
    pub alpha: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub accuracy: f64,
}

/// Per-task losses with their `alpha_m = n_m / sum n` weights and the
/// weighted aggregates; `radii[j - 1]` holds the level-`j` discrepancy radius.
#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub tasks: Vec<TaskGap>,
    pub train_loss: f64,
    pub test_loss: f64,
    /// `train_loss - test_loss`.
    pub gap: f64,
    pub radii: Vec<f64>,
}

/// Weighted training and test losses over tasks.
pub fn weighted_gap(train: &[f64], test: &[f64], samples: &[usize]) -> Result<GapReport> {
    if train.is_empty() || train.len() != test.len() || train.len() != samples.len() {
        return Err(Error::Metric(format!(
            "need equally long, nonempty loss lists, got {}, {} and {}",
            train.len(),
            test.len(),
            samples.len()
        )));
    }
    let total: usize = samples.iter().sum();
    if total == 0 {
        return Err(Error::Metric("total sample count is zero".into()));
    }
    let tasks: Vec<TaskGap> = samples
        .iter()
        .zip(train.iter().zip(test))
        .map(|(&n, (&tr, &te))| TaskGap {
            samples: n,
            alpha: n as f64 / total as f64,
            train_loss: tr,
            test_loss: te,
            accuracy: f64::NAN,
        })
        .collect();
    let train_loss = tasks.iter().map(|t| t.alpha * t.train_loss).sum::<f64>();
    let test_loss = tasks.iter().map(|t| t.alpha * t.test_loss).sum::<f64>();
    Ok(GapReport {
        tasks,
        train_loss,
        test_loss,
        gap: train_loss - test_loss,
        radii: Vec::new(),
    })
}

/// Brings `[n, C, H, H]` images to side `to` by block means or pixel repetition.
pub fn resize(x: &Tensor, to: usize) -> Result<Tensor> {
    let h = x.dims()[x.dims().len() - 1];
    if to <= h {
        downsample(x, to)
    } else {
        upsample(x, to)
    }
}

/// One level of a nested model family: its model and the master classes of its labels.
pub struct Level<'a> {
    pub model: &'a dyn Submodel,
    pub classes: &'a [usize],
}

/// Root mean squared logit difference between levels `j` and `j - 1`
/// (1-based), over every sample of the evaluation sets of levels `m >= j`.
///
/// Only the first `K_{j-1}` logits are compared; for `j = 1` the previous
/// level is the zero function and all `K_1` logits count. Levels must be
/// ordered so that each label set extends the previous one as a prefix.
pub fn discrepancy_radius(j: usize, levels: &[Level<'_>], sets: &[&Dataset]) -> Result<f64> {
    if j == 0 || j > levels.len() {
        return Err(Error::Metric(format!("level {j} outside 1..={}", levels.len())));
    }
    if sets.len() != levels.len() {
        return Err(Error::Metric(format!("{} evaluation sets for {} levels", sets.len(), levels.len())));
    }
    for w in 1..j {
        let (prev, cur) = (levels[w - 1].classes, levels[w].classes);
        if prev.len() > cur.len() || cur[..prev.len()] != *prev {
            return Err(Error::Metric(format!(
                "label set of level {} is not a prefix of level {}; the radius is undefined",
                w,
                w + 1
            )));
        }
    }
    let cur = levels[j - 1].model;
    let prev = if j > 1 { Some(levels[j - 2].model) } else { None };
    let k = prev.map_or(cur.num_classes(), |p| p.num_classes());
    let mut sum = 0.0;
    let mut count = 0usize;
    for set in &sets[j - 1..] {
        if set.is_empty() {
            continue;
        }
        let fc = cur.logits(&resize(&set.images, cur.input_size())?)?;
        let fp = match prev {
            Some(p) => Some(p.logits(&resize(&set.images, p.input_size())?)?),
            None => None,
        };
        let kc = cur.num_classes();
        for i in 0..set.len() {
            let a = &fc.data()[i * kc..i * kc + k];
            match &fp {
                Some(fp) => {
                    let kp = prev.expect("previous level").num_classes();
                    let b = &fp.data()[i * kp..i * kp + k];
                    sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                }
                None => sum += a.iter().map(|x| x * x).sum::<f64>(),
            }
        }
        count += set.len();
    }
    if count == 0 {
        return Err(Error::Metric(format!("no evaluation samples for level {j}")));
    }
    Ok((sum / count as f64).sqrt())
}

/// Radii of every level, in level order.
pub fn discrepancy_radii(levels: &[Level<'_>], sets: &[&Dataset]) -> Result<Vec<f64>> {
    (1..=levels.len()).map(|j| discrepancy_radius(j, levels, sets)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_counts_average_plainly() {
        let r = weighted_gap(&[1.0, 3.0], &[2.0, 2.0], &[5, 5]).unwrap();
        assert_eq!((r.train_loss, r.test_loss, r.gap), (2.0, 2.0, 0.0));
        let one = weighted_gap(&[0.7], &[0.2], &[3]).unwrap();
        assert_eq!(one.gap, 0.7 - 0.2);
        assert!(weighted_gap(&[1.0], &[], &[1]).is_err());
    }
}
