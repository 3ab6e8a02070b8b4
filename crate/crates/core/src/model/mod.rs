//! The four learnable networks (input embedding, low-level module,
//! high-level module, output head) plus the halting head, assembled from
//! bias-free transformer blocks.

pub mod block;
pub mod params;

pub use block::{
    attention, block_backward, block_forward, module_backward, module_forward, rms_norm,
    rms_norm_inplace, BlockCache, ModuleCache, Rope,
};
pub use params::{BlockWeights, ParamGroup, Parameters};

use crate::config::ModelConfig;
use crate::error::{HrmError, Result};
use crate::num::Real;
use crate::rng::{seeded, trunc_normal_array};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const ROPE_BASE: f64 = 10000.0;

/// Which dynamics the segment forward pass runs.
///
/// Baselines share the tokenizer, training loop, optimizer and halting
/// machinery with the two-timescale model: `Feedforward` is a plain block
/// stack, `Recurrent` re-applies one stack with shared weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ModelKind {
    Hrm,
    Feedforward,
    Recurrent { loops: usize },
}

/// Fixed initial hidden states, sampled once at model creation and never
/// resampled or trained.
#[derive(Clone, Debug)]
pub struct InitialState<F: Real> {
    pub z_h: Array2<F>,
    pub z_l: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub params: Parameters<F>,
    pub init_state: InitialState<F>,
    rope: Rope<F>,
}

impl<F: Real> Model<F> {
    /// Build the two-timescale model; all randomness flows from
    /// `config.seed`.
    pub fn new_hrm(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let params = Parameters::init(
            &config,
            config.blocks_per_module,
            config.blocks_per_module,
            &mut rng,
        );
        // Truncated normal, standard deviation 1, truncation 2; kept fixed.
        let z_h = trunc_normal_array(&mut rng, config.seq_len, config.hidden_dim, 1.0);
        let z_l = trunc_normal_array(&mut rng, config.seq_len, config.hidden_dim, 1.0);
        let rope = Rope::new(config.seq_len, config.head_dim(), ROPE_BASE);
        Ok(Model { kind: ModelKind::Hrm, params, init_state: InitialState { z_h, z_l }, rope, config })
    }

    /// Build a baseline. `config.blocks_per_module` is the stack depth; a
    /// recurrent baseline starts from a zero state so that one loop equals
    /// the feedforward stack exactly.
    pub fn new_baseline(config: ModelConfig, kind: ModelKind) -> Result<Self> {
        config.validate()?;
        if kind == ModelKind::Hrm {
            return Self::new_hrm(config);
        }
        if let ModelKind::Recurrent { loops } = kind {
            if loops == 0 {
                return Err(HrmError::Config("recurrent loops must be >= 1".into()));
            }
        }
        let mut rng = seeded(config.seed);
        let params = Parameters::init(&config, config.blocks_per_module, 0, &mut rng);
        let zero = Array2::zeros((config.seq_len, config.hidden_dim));
        let rope = Rope::new(config.seq_len, config.head_dim(), ROPE_BASE);
        Ok(Model {
            kind,
            params,
            init_state: InitialState { z_h: zero.clone(), z_l: zero },
            rope,
            config,
        })
    }

    pub fn rope(&self) -> &Rope<F> {
        &self.rope
    }

    pub fn rms_eps(&self) -> F {
        F::c(self.config.rms_eps)
    }

    /// Token embedding lookup scaled by sqrt(hidden_dim).
    pub fn embed_input(&self, tokens: &[u16]) -> Result<Array2<F>> {
        embed_input(tokens, &self.params.embed, self.config.seq_len)
    }

    /// Per-position linear map onto the vocabulary; scores are normalized by
    /// the loss / prediction path, not here.
    pub fn output_head(&self, z: &Array2<F>) -> Array2<F> {
        z.dot(&self.params.out_head)
    }

    /// Halt/continue logits from the position-0 state vector.
    pub fn q_head_logits(&self, z: &Array2<F>) -> (F, F) {
        let row = z.row(0);
        let l = &self.params.q_head;
        let mut halt = F::zero();
        let mut cont = F::zero();
        for (i, v) in row.iter().enumerate() {
            halt += *v * l[[i, 0]];
            cont += *v * l[[i, 1]];
        }
        (halt, cont)
    }
}

pub fn embed_input<F: Real>(
    tokens: &[u16],
    table: &Array2<F>,
    seq_len: usize,
) -> Result<Array2<F>> {
    if tokens.len() != seq_len {
        return Err(HrmError::Input(format!(
            "token sequence length {} != configured seq_len {}",
            tokens.len(),
            seq_len
        )));
    }
    let vocab = table.nrows();
    let d = table.ncols();
    let scale = F::c((d as f64).sqrt());
    let mut out = Array2::zeros((seq_len, d));
    for (p, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= vocab {
            return Err(HrmError::Input(format!(
                "token id {t} out of range for vocab {vocab}"
            )));
        }
        for j in 0..d {
            out[[p, j]] = table[[t, j]] * scale;
        }
    }
    Ok(out)
}

/// Accumulate the embedding-table gradient for `d_xt = d loss / d x_tilde`.
pub fn embed_backward<F: Real>(d_xt: &Array2<F>, tokens: &[u16], g_table: &mut Array2<F>) {
    let d = g_table.ncols();
    let scale = F::c((d as f64).sqrt());
    for (p, &t) in tokens.iter().enumerate() {
        for j in 0..d {
            g_table[[t as usize, j]] += d_xt[[p, j]] * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            seq_len: 4,
            hidden_dim: 16,
            n_heads: 2,
            blocks_per_module: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn embed_scales_rows_by_sqrt_d() {
        let m = Model::<f64>::new_hrm(tiny_cfg()).unwrap();
        let x = m.embed_input(&[0, 0, 0, 0]).unwrap();
        let scale = (16f64).sqrt();
        for p in 0..4 {
            for j in 0..16 {
                assert_eq!(x[[p, j]], m.params.embed[[0, j]] * scale);
            }
        }
    }

    #[test]
    fn embed_rejects_out_of_range_token() {
        let m = Model::<f64>::new_hrm(tiny_cfg()).unwrap();
        assert!(m.embed_input(&[0, 1, 2, 6]).is_err());
        assert!(m.embed_input(&[0, 1, 2]).is_err());
    }

    #[test]
    fn embed_then_tied_unembed_recovers_tokens() {
        // Orthogonal embedding rows: argmax of logits under a tied head
        // recovers the token.
        let cfg = tiny_cfg();
        let mut m = Model::<f64>::new_hrm(cfg).unwrap();
        m.params.embed = Array2::zeros((6, 16));
        for t in 0..6 {
            m.params.embed[[t, t]] = 1.0 + 0.1 * t as f64;
        }
        m.params.out_head = m.params.embed.t().to_owned();
        let tokens = [3u16, 0, 5, 2];
        let x = m.embed_input(&tokens).unwrap();
        let logits = m.output_head(&x);
        for (p, &t) in tokens.iter().enumerate() {
            let row = logits.row(p);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, t as usize);
        }
    }

    #[test]
    fn initial_state_is_bounded_and_fixed() {
        let m1 = Model::<f64>::new_hrm(tiny_cfg()).unwrap();
        let m2 = Model::<f64>::new_hrm(tiny_cfg()).unwrap();
        assert_eq!(m1.init_state.z_h, m2.init_state.z_h);
        assert_eq!(m1.init_state.z_l, m2.init_state.z_l);
        assert!(m1.init_state.z_h.iter().all(|v| v.abs() <= 2.0));
        assert!(m1.init_state.z_l.iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn initial_state_std_matches_truncated_normal() {
        let cfg = ModelConfig {
            seq_len: 400,
            hidden_dim: 128,
            vocab_size: 6,
            ..ModelConfig::default()
        };
        let m = Model::<f64>::new_hrm(cfg).unwrap();
        let n = m.init_state.z_h.len() + m.init_state.z_l.len();
        assert!(n >= 100_000);
        let sumsq: f64 = m
            .init_state
            .z_h
            .iter()
            .chain(m.init_state.z_l.iter())
            .map(|v| v * v)
            .sum();
        let std = (sumsq / n as f64).sqrt();
        assert!((std - 0.88).abs() / 0.88 < 0.05, "std {std}");
    }

    #[test]
    fn q_head_zero_weights_give_even_logits() {
        let mut m = Model::<f64>::new_hrm(tiny_cfg()).unwrap();
        m.params.q_head.fill(0.0);
        let z = Array2::from_elem((4, 16), 0.7);
        let (h, c) = m.q_head_logits(&z);
        assert_eq!(h, 0.0);
        assert_eq!(c, 0.0);
    }
}
