use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Language;

/// Number of alignment maps: one per code language plus the query side.
pub const ALIGN_MAPS: usize = Language::ALL.len() + 1;
/// Index of the query/docstring alignment map.
pub const QUERY_MAP: usize = Language::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Identity => 1.0,
        }
    }
}

/// Which side of the bi-encoder an input belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    /// Natural-language queries and docstrings.
    Query,
    Code(Language),
}

impl Modality {
    pub fn align_index(self) -> usize {
        match self {
            Modality::Query => QUERY_MAP,
            Modality::Code(lang) => lang.index(),
        }
    }

    /// 0 for the query side, 1 for code; selects the attention vectors.
    pub fn side(self) -> usize {
        match self {
            Modality::Query => 0,
            Modality::Code(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, dim: usize, layers: usize) -> Self {
        Self { vocab_size, dim, layers, nonlinearity: Nonlinearity::Tanh }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Row-major `[dim × dim]`, output index first.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Every learnable tensor of the encoder. The same type doubles as the
/// gradient accumulator.
///
/// Values are held in `f64` for arithmetic but initialization and optimizer
/// steps keep them `f32`-representable, so a checkpoint round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    /// Row-major `[vocab_size × dim]`.
    pub embed: Vec<f64>,
    /// [`ALIGN_MAPS`] row-major `[dim × dim]` maps, ordered as
    /// [`Language::ALL`] then the query map.
    pub align: Vec<Vec<f64>>,
    pub mlp: Vec<DenseLayer>,
    /// Attention scoring vectors, query side for layers `0..=L` then code side.
    pub attn: Vec<Vec<f64>>,
    /// Length `L + 1`; softmax gives the per-layer fusion weights.
    pub fusion_logits: Vec<f64>,
    pub fusion_scale: f64,
}

impl EncoderParams {
    /// All-zero tensors of the right shapes.
    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.dim;
        let l = config.layers;
        Self {
            config,
            embed: vec![0.0; config.vocab_size * d],
            align: vec![vec![0.0; d * d]; ALIGN_MAPS],
            mlp: (0..l).map(|_| DenseLayer { weight: vec![0.0; d * d], bias: vec![0.0; d] }).collect(),
            attn: vec![vec![0.0; d]; 2 * (l + 1)],
            fusion_logits: vec![0.0; l + 1],
            fusion_scale: 0.0,
        }
    }

    /// Seeded initialization: uniform(±0.05) embeddings, identity query map,
    /// identity plus uniform(±0.01) code maps, fan-in scaled MLP weights,
    /// zero attention vectors (mean pooling), uniform fusion and unit scale.
    pub fn init(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let d = config.dim;
        for x in &mut p.embed {
            *x = rng.random_range(-0.05..0.05);
        }
        for (m, map) in p.align.iter_mut().enumerate() {
            for i in 0..d {
                map[i * d + i] = 1.0;
            }
            if m != QUERY_MAP {
                for x in map.iter_mut() {
                    *x += rng.random_range(-0.01..0.01);
                }
            }
        }
        let bound = (1.0 / d as f64).sqrt();
        for layer in &mut p.mlp {
            for w in &mut layer.weight {
                *w = rng.random_range(-bound..bound);
            }
        }
        p.fusion_scale = 1.0;
        p.round_to_f32();
        p
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn attn_vector(&self, modality: Modality, layer: usize) -> &[f64] {
        &self.attn[modality.side() * (self.config.layers + 1) + layer]
    }

    pub fn attn_index(&self, modality: Modality, layer: usize) -> usize {
        modality.side() * (self.config.layers + 1) + layer
    }

    pub fn embedding_row(&self, id: u32) -> &[f64] {
        let d = self.config.dim;
        &self.embed[id as usize * d..(id as usize + 1) * d]
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embed];
        out.extend(self.align.iter().map(Vec::as_slice));
        for layer in &self.mlp {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.extend(self.attn.iter().map(Vec::as_slice));
        out.push(&self.fusion_logits);
        out.push(std::slice::from_ref(&self.fusion_scale));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embed];
        out.extend(self.align.iter_mut().map(Vec::as_mut_slice));
        for layer in &mut self.mlp {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.extend(self.attn.iter_mut().map(Vec::as_mut_slice));
        out.push(&mut self.fusion_logits);
        out.push(std::slice::from_mut(&mut self.fusion_scale));
        out
    }

    /// Human-readable tensor names, aligned with [`EncoderParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embed".to_string()];
        out.extend(Language::ALL.iter().map(|l| format!("align.{l}")));
        out.push("align.query".into());
        for j in 0..self.mlp.len() {
            out.push(format!("mlp.{}.weight", j + 1));
            out.push(format!("mlp.{}.bias", j + 1));
        }
        for side in ["query", "code"] {
            for j in 0..=self.config.layers {
                out.push(format!("attn.{side}.{j}"));
            }
        }
        out.push("fusion_logits".into());
        out.push("fusion_scale".into());
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// Adds `scale * other` elementwise.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Snaps every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}
