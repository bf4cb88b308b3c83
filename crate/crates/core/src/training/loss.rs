use rand::Rng;

use super::TrainError;
use crate::encoder::Matrix;

/// Hinge loss `max(0, margin - sim_pos + sim_neg)`.
pub fn margin_loss(sim_pos: f64, sim_neg: f64, margin: f64) -> f64 {
    (margin - sim_pos + sim_neg).max(0.0)
}

/// Mean over rows of the cross-entropy of `softmax(row / τ)` against the
/// diagonal. Row `i` scores query `i` against every code in the batch.
pub fn in_batch_softmax_loss(sim: &Matrix, temperature: f64) -> Result<f64, TrainError> {
    let b = sim.rows;
    if b < 2 || sim.cols != b {
        return Err(TrainError::BatchTooSmall(b));
    }
    let total: f64 = (0..b)
        .map(|i| {
            let row = sim.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let lse = max + row.iter().map(|s| (s / temperature - max).exp()).sum::<f64>().ln();
            lse - row[i] / temperature
        })
        .sum();
    Ok(total / b as f64)
}

/// Row-wise softmax probabilities of `sim / τ`.
pub(crate) fn softmax_rows(sim: &Matrix, temperature: f64) -> Matrix {
    let mut out = Matrix::zeros(sim.rows, sim.cols);
    for i in 0..sim.rows {
        let scaled: Vec<f64> = sim.row(i).iter().map(|s| s / temperature).collect();
        out.row_mut(i).copy_from_slice(&crate::encoder::softmax(&scaled));
    }
    out
}

/// For each position draws a different pool index uniformly at random.
pub fn sample_negatives<R: Rng>(positives: &[usize], pool_len: usize, rng: &mut R) -> Result<Vec<usize>, TrainError> {
    if pool_len < 2 {
        return Err(TrainError::CorpusTooSmall(pool_len));
    }
    Ok(positives
        .iter()
        .map(|&pos| {
            let r = rng.random_range(0..pool_len - 1);
            if r >= pos {
                r + 1
            } else {
                r
            }
        })
        .collect())
}

/// Index of the most similar off-diagonal column per row; ties go to the
/// smallest index.
pub fn mine_hard_negatives(sim: &Matrix) -> Result<Vec<usize>, TrainError> {
    if sim.rows < 2 || sim.cols != sim.rows {
        return Err(TrainError::BatchTooSmall(sim.rows));
    }
    Ok((0..sim.rows)
        .map(|i| {
            let mut best = usize::MAX;
            for (j, &s) in sim.row(i).iter().enumerate() {
                if j != i && (best == usize::MAX || s > sim.row(i)[best]) {
                    best = j;
                }
            }
            best
        })
        .collect())
}
