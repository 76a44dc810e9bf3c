//! Small differentiable autoregressive policy with a hand-written backward pass.
//!
//! The state features are the mean embedding of the last `context_len` tokens of the
//! history and a one-hot of `prompt_key mod 10`. One `tanh` projection feeds a linear
//! output head over the vocabulary. A teacher state adds `hint_gain[h]` to the logit
//! of its hinted answer token `h`; the student path never sees the hint.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::EnvState;

/// Width of the prompt-key one-hot feature.
pub const PROMPT_FEATURES: usize = 10;

/// Inputs of one policy evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyContext<'a> {
    pub prompt_key: u64,
    /// Most recent tokens, oldest first, at most `context_len` long.
    pub recent: &'a [u32],
    pub hint: Option<u32>,
}

impl<'a> PolicyContext<'a> {
    pub fn from_state(state: &'a EnvState, context_len: usize) -> Self {
        Self {
            prompt_key: state.prompt_key,
            recent: state.recent(context_len),
            hint: state.answer_hint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// `vocab_size x hidden`.
    pub token_embeddings: Array2<f64>,
    /// `hidden x (hidden + PROMPT_FEATURES)`.
    pub context_weights: Array2<f64>,
    pub context_bias: Array1<f64>,
    /// `vocab_size x hidden`.
    pub output_weights: Array2<f64>,
    pub output_bias: Array1<f64>,
    /// Teacher logit boost per hinted token.
    pub hint_gain: Array1<f64>,
    pub context_len: usize,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    tokens: Vec<u32>,
    input: Array1<f64>,
    hidden: Array1<f64>,
    hint: Option<u32>,
    pub logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, hidden: usize, context_len: usize) -> Self {
        Self {
            token_embeddings: Array2::zeros((vocab_size, hidden)),
            context_weights: Array2::zeros((hidden, hidden + PROMPT_FEATURES)),
            context_bias: Array1::zeros(hidden),
            output_weights: Array2::zeros((vocab_size, hidden)),
            output_bias: Array1::zeros(vocab_size),
            hint_gain: Array1::zeros(vocab_size),
            context_len,
        }
    }

    /// Uniform `[-scale, scale]` weights, zero biases, constant hint gain.
    pub fn random<R: Rng>(
        vocab_size: usize,
        hidden: usize,
        context_len: usize,
        scale: f64,
        hint_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(vocab_size, hidden, context_len);
        for w in p
            .token_embeddings
            .iter_mut()
            .chain(p.context_weights.iter_mut())
            .chain(p.output_weights.iter_mut())
        {
            *w = rng.gen_range(-scale..=scale);
        }
        p.hint_gain.fill(hint_gain);
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.output_bias.len()
    }

    pub fn hidden(&self) -> usize {
        self.context_bias.len()
    }

    /// Zero-valued parameters of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.hidden(), self.context_len)
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("token_embeddings", self.token_embeddings.as_slice().unwrap()),
            ("context_weights", self.context_weights.as_slice().unwrap()),
            ("context_bias", self.context_bias.as_slice().unwrap()),
            ("output_weights", self.output_weights.as_slice().unwrap()),
            ("output_bias", self.output_bias.as_slice().unwrap()),
            ("hint_gain", self.hint_gain.as_slice().unwrap()),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            ("token_embeddings", self.token_embeddings.as_slice_mut().unwrap()),
            ("context_weights", self.context_weights.as_slice_mut().unwrap()),
            ("context_bias", self.context_bias.as_slice_mut().unwrap()),
            ("output_weights", self.output_weights.as_slice_mut().unwrap()),
            ("output_bias", self.output_bias.as_slice_mut().unwrap()),
            ("hint_gain", self.hint_gain.as_slice_mut().unwrap()),
        ]
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, scale: f64, other: &PolicyParams) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    fn features(&self, ctx: &PolicyContext<'_>) -> Array1<f64> {
        let d = self.hidden();
        let mut x = Array1::zeros(d + PROMPT_FEATURES);
        if !ctx.recent.is_empty() {
            let mut pooled = x.slice_mut(s![..d]);
            for &tok in ctx.recent {
                pooled += &self.token_embeddings.row(tok as usize);
            }
            pooled /= ctx.recent.len() as f64;
        }
        x[d + (ctx.prompt_key % PROMPT_FEATURES as u64) as usize] = 1.0;
        x
    }

    pub fn forward(&self, ctx: &PolicyContext<'_>) -> Forward {
        let input = self.features(ctx);
        let hidden = (self.context_weights.dot(&input) + &self.context_bias).mapv(f64::tanh);
        let mut logits = (self.output_weights.dot(&hidden) + &self.output_bias).to_vec();
        if let Some(h) = ctx.hint {
            logits[h as usize] += self.hint_gain[h as usize];
        }
        Forward {
            tokens: ctx.recent.to_vec(),
            input,
            hidden,
            hint: ctx.hint,
            logits,
        }
    }

    pub fn logits(&self, ctx: &PolicyContext<'_>) -> Vec<f64> {
        self.forward(ctx).logits
    }

    /// Accumulates into `grad` the gradient given `d_logits`, the derivative of a
    /// scalar with respect to the logits of `fwd`.
    pub fn backward(&self, fwd: &Forward, d_logits: &[f64], grad: &mut PolicyParams) {
        let d = self.hidden();
        let dz = Array1::from(d_logits.to_vec());
        grad.output_bias += &dz;
        for (j, &g) in d_logits.iter().enumerate() {
            if g != 0.0 {
                grad.output_weights.row_mut(j).scaled_add(g, &fwd.hidden);
            }
        }
        if let Some(h) = fwd.hint {
            grad.hint_gain[h as usize] += d_logits[h as usize];
        }
        let dh = self.output_weights.t().dot(&dz);
        let du = &dh * &fwd.hidden.mapv(|v| 1.0 - v * v);
        grad.context_bias += &du;
        for (i, &g) in du.iter().enumerate() {
            if g != 0.0 {
                grad.context_weights.row_mut(i).scaled_add(g, &fwd.input);
            }
        }
        if fwd.tokens.is_empty() {
            return;
        }
        let dx = self.context_weights.t().dot(&du);
        let d_pooled = dx.slice(s![..d]).mapv(|v| v / fwd.tokens.len() as f64);
        for &tok in &fwd.tokens {
            grad.token_embeddings
                .row_mut(tok as usize)
                .scaled_add(1.0, &d_pooled);
        }
    }
}

/// Student or teacher logits for an environment state.
pub fn policy_logits(params: &PolicyParams, state: &EnvState) -> Vec<f64> {
    params.logits(&PolicyContext::from_state(state, params.context_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::policy_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(19, 4, 3);
        let state = EnvState::new(12345);
        let z = policy_logits(&p, &state);
        assert!((policy_entropy(&z) - 19f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hint_only_moves_hinted_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::random(19, 4, 3, 0.5, 1.3, &mut rng);
        let mut state = EnvState::new(77);
        state.history = vec![0, 5, 2];
        let student = policy_logits(&p, &state);
        state.answer_hint = Some(11);
        let teacher = policy_logits(&p, &state);
        for (j, (s, t)) in student.iter().zip(&teacher).enumerate() {
            if j == 11 {
                assert_eq!(*t, s + 1.3);
            } else {
                assert_eq!(s, t);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParams::random(19, 6, 2, 0.3, 0.0, &mut rng);
        let ctx = PolicyContext {
            prompt_key: 4,
            recent: &[3, 9],
            hint: None,
        };
        assert_eq!(p.logits(&ctx), p.logits(&ctx));
    }

    #[test]
    fn parameter_count() {
        let p = PolicyParams::zeros(19, 4, 2);
        assert_eq!(p.num_params(), 19 * 4 + 4 * 14 + 4 + 19 * 4 + 19 + 19);
    }
}
