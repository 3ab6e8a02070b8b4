use crate::error::{HrmError, Result};
use serde::{Deserialize, Serialize};

/// Architecture and training hyperparameters.
///
/// `cycles` is the number of high-level updates per forward pass and
/// `steps_per_cycle` the number of low-level steps under each fixed
/// high-level state, so one segment runs `cycles * steps_per_cycle`
/// low-level updates.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub blocks_per_module: usize,
    /// Gated-MLP inner width as a multiple of `hidden_dim` (rounded).
    pub expansion: f64,
    /// N: high-level cycles per segment.
    pub cycles: usize,
    /// T: low-level steps per cycle.
    pub steps_per_cycle: usize,
    /// Segment cap for halting.
    pub m_max: u32,
    /// Probability of forcing a minimum segment count sampled from
    /// {2..m_max} instead of 1.
    pub epsilon_explore: f64,
    /// Use the stablemax normalizer in the sequence loss instead of softmax.
    pub use_stablemax: bool,
    pub rms_eps: f64,
    pub lr: f64,
    pub warmup_steps: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 11,
            seq_len: 81,
            hidden_dim: 128,
            n_heads: 4,
            blocks_per_module: 2,
            expansion: 4.0,
            cycles: 2,
            steps_per_cycle: 2,
            m_max: 8,
            epsilon_explore: 0.1,
            use_stablemax: true,
            rms_eps: 1e-6,
            lr: 3e-4,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(HrmError::Config(msg));
        if self.vocab_size == 0 || self.seq_len == 0 || self.hidden_dim == 0 {
            return err("vocab_size, seq_len and hidden_dim must be positive".into());
        }
        if self.n_heads == 0 || self.blocks_per_module == 0 {
            return err("n_heads and blocks_per_module must be positive".into());
        }
        if self.hidden_dim % (2 * self.n_heads) != 0 {
            return err(format!(
                "hidden_dim {} must be divisible by 2*n_heads = {}",
                self.hidden_dim,
                2 * self.n_heads
            ));
        }
        if self.cycles < 1 || self.steps_per_cycle < 1 {
            return err("cycles and steps_per_cycle must be at least 1".into());
        }
        if self.m_max < 1 {
            return err("m_max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon_explore) {
            return err(format!(
                "epsilon_explore {} outside [0, 1]",
                self.epsilon_explore
            ));
        }
        if self.epsilon_explore > 0.0 && self.m_max < 2 {
            return err("epsilon_explore > 0 requires m_max >= 2".into());
        }
        if self.inner_dim() == 0 {
            return err(format!("expansion {} gives empty MLP width", self.expansion));
        }
        if self.rms_eps <= 0.0 {
            return err("rms_eps must be positive".into());
        }
        if self.lr <= 0.0 {
            return err("lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1/beta2 must be in [0, 1)".into());
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be non-negative".into());
        }
        Ok(())
    }

    /// Gated-MLP inner width: `round(expansion * hidden_dim)`.
    pub fn inner_dim(&self) -> usize {
        (self.expansion * self.hidden_dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Total low-level steps in one segment.
    pub fn total_steps(&self) -> usize {
        self.cycles * self.steps_per_cycle
    }
}
