//! Learning encoder parameters from (docstring, code) pairs.
//!
//! Batches are built as (query = docstring, positive = paired code,
//! negative = other code). Cosine is symmetric, so this is the same
//! objective as ranking descriptions for a given snippet, oriented the way
//! retrieval runs. Two objectives are available: a hinge on one negative per
//! pair, and a softmax over all codes in the batch.

mod loss;
mod optim;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{in_batch_softmax_loss, margin_loss, mine_hard_negatives, sample_negatives};
pub use optim::{clip_global_norm, Adam};

use crate::corpus::{CorpusSplit, Language};
use crate::encoder::{backward, dot, encode, encode_with_trace, EncoderError, EncoderParams, Matrix, Modality};
use crate::tokenizer::{TokenIdSequence, Tokenizer};

/// Backward passes are split into this many fixed chunks whose gradients are
/// summed in order, so results do not depend on the thread count.
const GRADIENT_CHUNKS: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("need at least 2 entries to draw negatives, have {0}")]
    CorpusTooSmall(usize),
    #[error("in-batch objectives need a square batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch} (first id {first_id})")]
    NonFinite { epoch: usize, batch: usize, first_id: String },
    #[error("parameters became non-finite after epoch {epoch}, batch {batch}")]
    NonFiniteParams { epoch: usize, batch: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Margin,
    InBatchSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Hardest in-batch negative instead of a random one, from epoch 2 on.
    pub hard_mining: bool,
    pub temperature: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Margin,
            margin: 0.5,
            batch_size: 256,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
            hard_mining: true,
            temperature: 0.05,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.margin.is_nan() || self.margin <= 0.0 {
            return bad("margin must be positive");
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.batch_size == 0 || self.loss == LossKind::InBatchSoftmax && self.batch_size < 2 {
            return bad("batch_size must be at least 2 for in-batch softmax and at least 1 otherwise");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// A corpus entry after tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub id: String,
    pub language: Language,
    pub doc: TokenIdSequence,
    pub code: TokenIdSequence,
}

/// Tokenizes a split; entries that tokenize to nothing are skipped and
/// their ids returned.
pub fn encode_pairs(split: &CorpusSplit, tokenizer: &Tokenizer) -> (Vec<EncodedPair>, Vec<String>) {
    let mut cache = HashMap::new();
    let mut pairs = Vec::with_capacity(split.len());
    let mut skipped = Vec::new();
    for entry in &split.entries {
        match tokenizer.encode_entry(entry, &mut cache) {
            Ok((doc, code)) => pairs.push(EncodedPair { id: entry.id.clone(), language: entry.language, doc, code }),
            Err(_) => skipped.push(entry.id.clone()),
        }
    }
    (pairs, skipped)
}

#[derive(Debug, Clone)]
pub enum Negatives<'a> {
    /// One given negative per batch row.
    Sampled(Vec<&'a EncodedPair>),
    /// The most similar other code in the batch, chosen under the current
    /// parameters.
    HardestInBatch,
}

#[derive(Debug, Clone)]
pub enum Objective<'a> {
    Margin { margin: f64, negatives: Negatives<'a> },
    InBatchSoftmax { temperature: f64 },
}

/// Loss value and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: EncoderParams,
    /// Mined negative per row, when hard mining was used.
    pub hard_negatives: Option<Vec<usize>>,
}

struct BatchItems<'a> {
    items: Vec<(&'a [u32], Modality)>,
    batch: usize,
}

fn batch_items<'a>(batch: &[&'a EncodedPair], objective: &Objective<'a>) -> Result<BatchItems<'a>, TrainError> {
    let b = batch.len();
    if b == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    let mut items: Vec<(&[u32], Modality)> = Vec::with_capacity(3 * b);
    items.extend(batch.iter().map(|p| (p.doc.ids(), Modality::Query)));
    items.extend(batch.iter().map(|p| (p.code.ids(), Modality::Code(p.language))));
    match objective {
        Objective::Margin { negatives: Negatives::Sampled(negs), .. } => {
            if negs.len() != b {
                return Err(TrainError::InvalidConfig(format!("{} negatives for a batch of {b}", negs.len())));
            }
            items.extend(negs.iter().map(|n| (n.code.ids(), Modality::Code(n.language))));
        }
        Objective::Margin { negatives: Negatives::HardestInBatch, .. } | Objective::InBatchSoftmax { .. } => {
            if b < 2 {
                return Err(TrainError::BatchTooSmall(b));
            }
        }
    }
    Ok(BatchItems { items, batch: b })
}

fn forward_outputs(params: &EncoderParams, items: &[(&[u32], Modality)]) -> Result<Vec<Vec<f64>>, TrainError> {
    items
        .par_iter()
        .map(|(ids, modality)| encode(params, ids, *modality).map(|e| e.values).map_err(TrainError::from))
        .collect()
}

fn similarity(outputs: &[Vec<f64>], b: usize) -> Matrix {
    let mut sim = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            sim.row_mut(i)[j] = dot(&outputs[i], &outputs[b + j]);
        }
    }
    sim
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Loss, gradient per encoded output, and mined negatives if any.
type OutputGrads = (f64, Vec<Vec<f64>>, Option<Vec<usize>>);

/// Loss and its gradient with respect to every encoded output.
fn loss_and_output_grads(
    outputs: &[Vec<f64>],
    b: usize,
    objective: &Objective<'_>,
) -> Result<OutputGrads, TrainError> {
    let d = outputs[0].len();
    let mut grads = vec![vec![0.0; d]; outputs.len()];
    let inv_b = 1.0 / b as f64;
    match objective {
        Objective::Margin { margin, negatives } => {
            let (neg_index, mined): (Vec<usize>, Option<Vec<usize>>) = match negatives {
                Negatives::Sampled(_) => ((0..b).map(|i| 2 * b + i).collect(), None),
                Negatives::HardestInBatch => {
                    let mined = mine_hard_negatives(&similarity(outputs, b))?;
                    (mined.iter().map(|&j| b + j).collect(), Some(mined))
                }
            };
            let mut total = 0.0;
            for (i, &n) in neg_index.iter().enumerate() {
                let (q, c) = (i, b + i);
                let sp = dot(&outputs[q], &outputs[c]);
                let sn = dot(&outputs[q], &outputs[n]);
                let l = margin_loss(sp, sn, *margin);
                total += l;
                if l > 0.0 {
                    let (oq, oc, on) = (outputs[q].clone(), &outputs[c], &outputs[n]);
                    add_scaled(&mut grads[q], on, inv_b);
                    add_scaled(&mut grads[q], oc, -inv_b);
                    add_scaled(&mut grads[c], &oq, -inv_b);
                    add_scaled(&mut grads[n], &oq, inv_b);
                }
            }
            Ok((total * inv_b, grads, mined))
        }
        Objective::InBatchSoftmax { temperature } => {
            let sim = similarity(outputs, b);
            let loss = in_batch_softmax_loss(&sim, *temperature)?;
            let probs = loss::softmax_rows(&sim, *temperature);
            for i in 0..b {
                for j in 0..b {
                    let target = if i == j { 1.0 } else { 0.0 };
                    let ds = (probs.row(i)[j] - target) * inv_b / temperature;
                    if ds == 0.0 {
                        continue;
                    }
                    let (oq, oc) = (outputs[i].clone(), outputs[b + j].clone());
                    add_scaled(&mut grads[i], &oc, ds);
                    add_scaled(&mut grads[b + j], &oq, ds);
                }
            }
            Ok((loss, grads, None))
        }
    }
}

/// Forward-only batch loss.
pub fn objective_loss(params: &EncoderParams, batch: &[&EncodedPair], objective: &Objective<'_>) -> Result<f64, TrainError> {
    let items = batch_items(batch, objective)?;
    let outputs = forward_outputs(params, &items.items)?;
    loss_and_output_grads(&outputs, items.batch, objective).map(|(l, _, _)| l)
}

/// Batch loss multiplied by `weight`, with exact analytic gradients.
pub fn objective_gradients(
    params: &EncoderParams,
    batch: &[&EncodedPair],
    objective: &Objective<'_>,
    weight: f64,
) -> Result<BatchGradients, TrainError> {
    let items = batch_items(batch, objective)?;
    let outputs = forward_outputs(params, &items.items)?;
    let (loss, mut out_grads, hard_negatives) = loss_and_output_grads(&outputs, items.batch, objective)?;
    for g in &mut out_grads {
        for x in g.iter_mut() {
            *x *= weight;
        }
    }

    let work: Vec<usize> = (0..items.items.len()).filter(|&i| out_grads[i].iter().any(|&x| x != 0.0)).collect();
    let chunk_len = work.len().div_ceil(GRADIENT_CHUNKS).max(1);
    let partials: Vec<Result<EncoderParams, TrainError>> = work
        .par_chunks(chunk_len)
        .map(|chunk| {
            let mut acc = EncoderParams::zeros(*params.config());
            for &i in chunk {
                let (ids, modality) = items.items[i];
                let trace = encode_with_trace(params, ids, modality)?;
                backward(params, &trace, &out_grads[i], &mut acc);
            }
            Ok(acc)
        })
        .collect();
    let mut grads = EncoderParams::zeros(*params.config());
    for partial in partials {
        grads.add_scaled(&partial?, 1.0);
    }
    Ok(BatchGradients { loss: loss * weight, grads, hard_negatives })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-pair training loss over the epoch.
    pub loss: f64,
    pub learning_rate: f64,
}

impl std::fmt::Display for EpochReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch {} loss {:.6} lr {}", self.epoch, self.loss, self.learning_rate)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: Vec<EpochReport>,
}

/// Runs `config.epochs` epochs of shuffled mini-batch training.
///
/// `on_epoch` sees every epoch's report together with the parameters at the
/// end of that epoch.
pub fn train<F>(config: &TrainConfig, pairs: &[EncodedPair], mut params: EncoderParams, mut on_epoch: F) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochReport, &EncoderParams) -> Result<(), TrainError>,
{
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if pairs.len() < 2 {
        return Err(TrainError::CorpusTooSmall(pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(*params.config());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let objective = match config.loss {
                LossKind::InBatchSoftmax if batch.len() < 2 => continue,
                LossKind::InBatchSoftmax => Objective::InBatchSoftmax { temperature: config.temperature },
                LossKind::Margin if config.hard_mining && epoch > 1 && batch.len() >= 2 => {
                    Objective::Margin { margin: config.margin, negatives: Negatives::HardestInBatch }
                }
                LossKind::Margin => {
                    let negs = sample_negatives(chunk, pairs.len(), &mut rng)?;
                    Objective::Margin {
                        margin: config.margin,
                        negatives: Negatives::Sampled(negs.iter().map(|&n| &pairs[n]).collect()),
                    }
                }
            };
            let mut result = objective_gradients(&params, &batch, &objective, 1.0)?;
            if !result.loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: batch_no, first_id: batch[0].id.clone() });
            }
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut result.grads, max);
            }
            adam.step(&mut params, &result.grads, config.learning_rate);
            if !params.all_finite() {
                return Err(TrainError::NonFiniteParams { epoch, batch: batch_no });
            }
            loss_sum += result.loss * batch.len() as f64;
            seen += batch.len();
        }
        let report = EpochReport {
            epoch,
            loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            learning_rate: config.learning_rate,
        };
        on_epoch(&report, &params)?;
        log.push(report);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn pair(i: u32, language: Language, vocab: u32) -> EncodedPair {
        let doc = vec![3 + i % (vocab - 3), 3 + (i * 7 + 1) % (vocab - 3)];
        let code = vec![3 + (i * 3 + 2) % (vocab - 3), 3 + i % (vocab - 3), 3 + (i * 5) % (vocab - 3)];
        EncodedPair {
            id: format!("p{i}"),
            language,
            doc: TokenIdSequence::new(doc, 64).unwrap(),
            code: TokenIdSequence::new(code, 256).unwrap(),
        }
    }

    fn toy(n: u32) -> Vec<EncodedPair> {
        (0..n).map(|i| pair(i, Language::ALL[i as usize % 6], 40)).collect()
    }

    #[test]
    fn inactive_hinge_gives_zero_gradients() {
        let params = EncoderParams::init(EncoderConfig::new(40, 6, 1), 1);
        let pairs = toy(4);
        let batch: Vec<&EncodedPair> = pairs[..2].iter().collect();
        // Margin far below any achievable violation.
        let objective = Objective::Margin { margin: 1e-9 - 2.0, negatives: Negatives::Sampled(vec![&pairs[2], &pairs[3]]) };
        let r = objective_gradients(&params, &batch, &objective, 1.0).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.grads.squared_norm(), 0.0);
    }

    #[test]
    fn doubled_loss_doubles_gradients_exactly() {
        let params = EncoderParams::init(EncoderConfig::new(40, 6, 2), 2);
        let pairs = toy(6);
        let batch: Vec<&EncodedPair> = pairs[..3].iter().collect();
        for objective in [
            Objective::Margin { margin: 0.5, negatives: Negatives::Sampled(vec![&pairs[3], &pairs[4], &pairs[5]]) },
            Objective::InBatchSoftmax { temperature: 0.1 },
        ] {
            let once = objective_gradients(&params, &batch, &objective, 1.0).unwrap();
            let twice = objective_gradients(&params, &batch, &objective, 2.0).unwrap();
            assert_eq!(twice.loss, 2.0 * once.loss);
            let mut doubled = once.grads.clone();
            doubled.scale(2.0);
            assert_eq!(twice.grads, doubled);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { margin: 0.0, ..Default::default() },
            TrainConfig { temperature: -1.0, ..Default::default() },
            TrainConfig { loss: LossKind::InBatchSoftmax, batch_size: 1, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let params = EncoderParams::init(EncoderConfig::new(40, 6, 1), 3);
        let config = TrainConfig { learning_rate: 0.0, epochs: 3, batch_size: 4, ..Default::default() };
        let out = train(&config, &toy(10), params.clone(), |_, _| Ok(())).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let params = EncoderParams::init(EncoderConfig::new(40, 6, 1), 3);
        for loss in [LossKind::Margin, LossKind::InBatchSoftmax] {
            let config = TrainConfig { loss, epochs: 3, batch_size: 4, learning_rate: 1e-2, seed: 9, ..Default::default() };
            let a = train(&config, &toy(11), params.clone(), |_, _| Ok(())).unwrap();
            let b = train(&config, &toy(11), params.clone(), |_, _| Ok(())).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.params, b.params);
            assert_ne!(a.params, params);
        }
    }

    #[test]
    fn hard_mining_reports_choice() {
        let params = EncoderParams::init(EncoderConfig::new(40, 6, 1), 4);
        let pairs = toy(5);
        let batch: Vec<&EncodedPair> = pairs.iter().collect();
        let objective = Objective::Margin { margin: 0.5, negatives: Negatives::HardestInBatch };
        let r = objective_gradients(&params, &batch, &objective, 1.0).unwrap();
        let mined = r.hard_negatives.unwrap();
        assert_eq!(mined.len(), 5);
        assert!(mined.iter().enumerate().all(|(i, &j)| i != j && j < 5));
    }

    #[test]
    fn errors_surface() {
        let params = EncoderParams::init(EncoderConfig::new(40, 6, 1), 4);
        let pairs = toy(1);
        assert!(matches!(
            train(&TrainConfig::default(), &[], params.clone(), |_, _| Ok(())),
            Err(TrainError::EmptyCorpus)
        ));
        assert!(matches!(
            train(&TrainConfig::default(), &pairs, params.clone(), |_, _| Ok(())),
            Err(TrainError::CorpusTooSmall(1))
        ));
        let batch = vec![&pairs[0]];
        assert!(matches!(
            objective_loss(&params, &batch, &Objective::InBatchSoftmax { temperature: 0.05 }),
            Err(TrainError::BatchTooSmall(1))
        ));
    }
}
