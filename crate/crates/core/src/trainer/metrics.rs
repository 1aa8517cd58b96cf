//! Concept prediction and the binary classification / reconstruction metrics.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ceiling reported when the masked reconstruction is exact.
pub const PSNR_CAP: f64 = 99.0;

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// Position `j` of sample `i` is predicted present when its row is at least as
/// close (by cosine) to the positive prototype of concept `j` as to the
/// antonym. `bank` is `[2M, E]` in model space.
pub fn predict_concepts<T: Real>(concepts: &Tensor<T>, bank: &Tensor<T>) -> Result<Vec<Vec<bool>>> {
    let s = concepts.shape();
    if s.len() != 3 || bank.shape() != [2 * s[1], s[2]] {
        return Err(Error::dim("predict_concepts", s, bank.shape()));
    }
    let (b, m, e) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let sample = concepts.outer(i);
        let row_preds = (0..m)
            .map(|j| {
                let row = &sample[j * e..(j + 1) * e];
                let (pos, neg) = (bank.outer(2 * j), bank.outer(2 * j + 1));
                let rn = dot(row, row).sqrt();
                if rn == 0.0 {
                    log::warn!("zero-norm concept row {j} of sample {i}; comparing raw dot products");
                    return dot(row, pos) >= dot(row, neg);
                }
                let cp = dot(row, pos) / (rn * dot(pos, pos).sqrt());
                let cn = dot(row, neg) / (rn * dot(neg, neg).sqrt());
                cp >= cn
            })
            .collect();
        out.push(row_preds);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BinaryScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    /// Precision, recall and F1 are 0 when undefined.
    pub fn scores(&self) -> BinaryScores {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BinaryScores {
            accuracy: ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_),
            precision,
            recall,
            f1,
        }
    }
}

/// Per-concept confusion counts over `(predicted, actual)` label rows.
pub fn confusions(predicted: &[Vec<bool>], actual: &[Vec<bool>]) -> Result<Vec<Confusion>> {
    if predicted.len() != actual.len() {
        return Err(Error::dim("confusions", &[predicted.len()], &[actual.len()]));
    }
    let m = actual.first().map_or(0, Vec::len);
    let mut out = vec![Confusion::default(); m];
    for (p, a) in predicted.iter().zip(actual) {
        if p.len() != m || a.len() != m {
            return Err(Error::dim("confusions", &[p.len()], &[a.len()]));
        }
        for j in 0..m {
            out[j].add(p[j], a[j]);
        }
    }
    Ok(out)
}

/// Unweighted mean of every score across concepts.
pub fn macro_average(per_concept: &[BinaryScores]) -> BinaryScores {
    let n = per_concept.len().max(1) as f64;
    let sum = |f: fn(&BinaryScores) -> f64| per_concept.iter().map(f).sum::<f64>() / n;
    BinaryScores {
        accuracy: sum(|s| s.accuracy),
        precision: sum(|s| s.precision),
        recall: sum(|s| s.recall),
        f1: sum(|s| s.f1),
    }
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}
