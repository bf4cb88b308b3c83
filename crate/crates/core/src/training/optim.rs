use crate::encoder::{EncoderConfig, EncoderParams};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: EncoderParams,
    second: EncoderParams,
    step: i32,
}

impl Adam {
    pub fn new(config: EncoderConfig) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: EncoderParams::zeros(config),
            second: EncoderParams::zeros(config),
            step: 0,
        }
    }

    /// Applies one update and snaps parameters back to `f32` precision.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = (p[i] - update) as f32 as f64;
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut EncoderParams, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}
