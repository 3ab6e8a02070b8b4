//! One forward pass ("segment") of the two-timescale recurrence, and the
//! one-step gradient that records only the final low-level and high-level
//! updates.
//!
//! A segment runs `N*T` low-level steps; the high-level state updates after
//! every `T`-th low-level step using the freshly written low-level state.
//! All but the last low-level/high-level update run outside gradient
//! recording, so the backward pass touches exactly: output head, final
//! high-level update, final low-level update, input embedding. The carry
//! handed to the next segment never transmits gradients.

use crate::error::{HrmError, Result};
use crate::model::{
    embed_backward, module_backward, module_forward, Model, ModelKind, ModuleCache, Parameters,
};
use crate::num::{sigmoid, Real};
use ndarray::Array2;

/// The state pair carried between segments. `severed` marks that the values
/// are plain constants with no gradient history; segments refuse to start
/// from a non-severed carry.
#[derive(Clone, Debug)]
pub struct Carry<F: Real> {
    pub z_h: Array2<F>,
    pub z_l: Array2<F>,
    pub severed: bool,
}

impl<F: Real> Carry<F> {
    pub fn is_finite(&self) -> bool {
        self.z_h.iter().all(|v| v.is_finite()) && self.z_l.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepCounters {
    pub l_steps: usize,
    pub h_steps: usize,
}

/// Optional per-step state snapshots `(i, z_l^i, z_h^i)` for analysis;
/// `i = 0` holds the carry the segment started from, so an enabled trace has
/// `N*T + 1` entries.
#[derive(Clone, Debug)]
pub struct StateTrace<F: Real> {
    pub snapshots: Vec<StateSnapshot<F>>,
}

#[derive(Clone, Debug)]
pub struct StateSnapshot<F: Real> {
    pub step: usize,
    pub z_l: Array2<F>,
    pub z_h: Array2<F>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SegmentOptions {
    /// Record the intermediates needed by `segment_backward`.
    pub grad: bool,
    /// Capture per-step state snapshots (memory cost `N*T*seq*d`).
    pub trace: bool,
}

/// Intermediates of the recorded tail of a segment.
#[derive(Clone, Debug)]
pub enum SegmentCache<F: Real> {
    Hrm {
        tokens: Vec<u16>,
        l_cache: ModuleCache<F>,
        h_cache: ModuleCache<F>,
        z_final: Array2<F>,
    },
    Stack {
        tokens: Vec<u16>,
        stack_cache: ModuleCache<F>,
        z_final: Array2<F>,
    },
}

#[derive(Clone, Debug)]
pub struct SegmentOutput<F: Real> {
    /// Gradient-severed state for the next segment.
    pub carry: Carry<F>,
    /// Pre-normalization scores, `seq_len x vocab`.
    pub logits: Array2<F>,
    /// Halt/continue logits and their sigmoids.
    pub q_logits: (F, F),
    pub q: (F, F),
    pub counters: StepCounters,
    pub trace: Option<StateTrace<F>>,
    pub cache: Option<SegmentCache<F>>,
}

impl<F: Real> Model<F> {
    /// Fresh severed carry holding the fixed initial states.
    pub fn init_carry(&self) -> Carry<F> {
        Carry {
            z_h: self.init_state.z_h.clone(),
            z_l: self.init_state.z_l.clone(),
            severed: true,
        }
    }

    /// One low-level update: merge (z_l, z_h, x_tilde) and run the L stack.
    pub fn l_step(&self, z_l: &Array2<F>, z_h: &Array2<F>, x_tilde: &Array2<F>) -> Array2<F> {
        module_forward(
            &[z_l, z_h, x_tilde],
            &self.params.l_blocks,
            self.rope(),
            self.config.n_heads,
            self.rms_eps(),
            false,
        )
        .0
    }

    /// One high-level update: merge (z_h, z_l) and run the H stack.
    pub fn h_step(&self, z_h: &Array2<F>, z_l: &Array2<F>) -> Array2<F> {
        module_forward(
            &[z_h, z_l],
            &self.params.h_blocks,
            self.rope(),
            self.config.n_heads,
            self.rms_eps(),
            false,
        )
        .0
    }

    pub fn segment_forward(
        &self,
        carry: &Carry<F>,
        tokens: &[u16],
        opts: SegmentOptions,
    ) -> Result<SegmentOutput<F>> {
        if !carry.severed {
            return Err(HrmError::Input(
                "segment_forward requires a gradient-severed carry".into(),
            ));
        }
        match self.kind {
            ModelKind::Hrm => self.segment_hrm(carry, tokens, opts),
            ModelKind::Feedforward => self.segment_stack(carry, tokens, opts, 1),
            ModelKind::Recurrent { loops } => self.segment_stack(carry, tokens, opts, loops),
        }
    }

    fn segment_hrm(
        &self,
        carry: &Carry<F>,
        tokens: &[u16],
        opts: SegmentOptions,
    ) -> Result<SegmentOutput<F>> {
        let cfg = &self.config;
        let x_tilde = self.embed_input(tokens)?;
        let total = cfg.total_steps();
        let mut z_l = carry.z_l.clone();
        let mut z_h = carry.z_h.clone();
        let mut counters = StepCounters::default();
        let mut trace = opts.trace.then(|| StateTrace {
            snapshots: vec![StateSnapshot { step: 0, z_l: z_l.clone(), z_h: z_h.clone() }],
        });

        // Steps 1..N*T-1 run outside gradient recording.
        for i in 1..total {
            z_l = self.l_step(&z_l, &z_h, &x_tilde);
            counters.l_steps += 1;
            if i % cfg.steps_per_cycle == 0 {
                z_h = self.h_step(&z_h, &z_l);
                counters.h_steps += 1;
            }
            if let Some(t) = &mut trace {
                t.snapshots.push(StateSnapshot { step: i, z_l: z_l.clone(), z_h: z_h.clone() });
            }
        }

        // Final low-level and high-level updates: the only recorded steps.
        let (z_l_new, l_cache) = module_forward(
            &[&z_l, &z_h, &x_tilde],
            &self.params.l_blocks,
            self.rope(),
            cfg.n_heads,
            self.rms_eps(),
            opts.grad,
        );
        counters.l_steps += 1;
        let (z_h_new, h_cache) = module_forward(
            &[&z_h, &z_l_new],
            &self.params.h_blocks,
            self.rope(),
            cfg.n_heads,
            self.rms_eps(),
            opts.grad,
        );
        counters.h_steps += 1;
        if let Some(t) = &mut trace {
            t.snapshots.push(StateSnapshot {
                step: total,
                z_l: z_l_new.clone(),
                z_h: z_h_new.clone(),
            });
        }

        let logits = self.output_head(&z_h_new);
        let q_logits = self.q_head_logits(&z_h_new);
        let cache = opts.grad.then(|| SegmentCache::Hrm {
            tokens: tokens.to_vec(),
            l_cache: l_cache.unwrap(),
            h_cache: h_cache.unwrap(),
            z_final: z_h_new.clone(),
        });
        Ok(SegmentOutput {
            carry: Carry { z_h: z_h_new, z_l: z_l_new, severed: true },
            logits,
            q_logits,
            q: (sigmoid(q_logits.0), sigmoid(q_logits.1)),
            counters,
            trace,
            cache,
        })
    }

    /// Baseline dynamics: `loops` applications of the single stack with the
    /// input representation re-injected each time; only the last application
    /// is recorded. A feedforward baseline is the `loops == 1` case with a
    /// zero state, i.e. a plain depth-`blocks_per_module` stack.
    fn segment_stack(
        &self,
        carry: &Carry<F>,
        tokens: &[u16],
        opts: SegmentOptions,
        loops: usize,
    ) -> Result<SegmentOutput<F>> {
        let cfg = &self.config;
        let x_tilde = self.embed_input(tokens)?;
        let mut state = carry.z_l.clone();
        let mut trace = opts.trace.then(|| StateTrace {
            snapshots: vec![StateSnapshot { step: 0, z_l: state.clone(), z_h: carry.z_h.clone() }],
        });
        for i in 1..loops {
            state = module_forward(
                &[&state, &x_tilde],
                &self.params.l_blocks,
                self.rope(),
                cfg.n_heads,
                self.rms_eps(),
                false,
            )
            .0;
            if let Some(t) = &mut trace {
                t.snapshots.push(StateSnapshot {
                    step: i,
                    z_l: state.clone(),
                    z_h: carry.z_h.clone(),
                });
            }
        }
        let (z_final, stack_cache) = module_forward(
            &[&state, &x_tilde],
            &self.params.l_blocks,
            self.rope(),
            cfg.n_heads,
            self.rms_eps(),
            opts.grad,
        );
        if let Some(t) = &mut trace {
            t.snapshots.push(StateSnapshot {
                step: loops,
                z_l: z_final.clone(),
                z_h: carry.z_h.clone(),
            });
        }
        let logits = self.output_head(&z_final);
        let q_logits = self.q_head_logits(&z_final);
        let cache = opts.grad.then(|| SegmentCache::Stack {
            tokens: tokens.to_vec(),
            stack_cache: stack_cache.unwrap(),
            z_final: z_final.clone(),
        });
        Ok(SegmentOutput {
            carry: Carry { z_h: carry.z_h.clone(), z_l: z_final, severed: true },
            logits,
            q_logits,
            q: (sigmoid(q_logits.0), sigmoid(q_logits.1)),
            counters: StepCounters::default(),
            trace,
            cache,
        })
    }

    /// Backward pass for a recorded segment. `d_logits` is the upstream
    /// gradient on the output scores, `d_q_logits` the upstream gradient on
    /// the two halting logits. Returns gradients for every parameter tensor;
    /// states entering the recorded steps are treated as constants.
    pub fn segment_backward(
        &self,
        out: &SegmentOutput<F>,
        d_logits: &Array2<F>,
        d_q_logits: (F, F),
    ) -> Result<Parameters<F>> {
        let cache = out.cache.as_ref().ok_or_else(|| {
            HrmError::Input("segment_backward requires a segment recorded with grad=true".into())
        })?;
        let mut grads = self.params.zeros_like();
        let cfg = &self.config;

        let (z_final, tokens) = match cache {
            SegmentCache::Hrm { z_final, tokens, .. } => (z_final, tokens),
            SegmentCache::Stack { z_final, tokens, .. } => (z_final, tokens),
        };

        // Output head.
        grads.out_head += &z_final.t().dot(d_logits);
        let mut dz = d_logits.dot(&self.params.out_head.t());
        // Halting head reads position 0.
        let d = cfg.hidden_dim;
        for i in 0..d {
            grads.q_head[[i, 0]] += z_final[[0, i]] * d_q_logits.0;
            grads.q_head[[i, 1]] += z_final[[0, i]] * d_q_logits.1;
            dz[[0, i]] += self.params.q_head[[i, 0]] * d_q_logits.0
                + self.params.q_head[[i, 1]] * d_q_logits.1;
        }

        let d_x_tilde = match cache {
            SegmentCache::Hrm { l_cache, h_cache, .. } => {
                // High-level inputs were (z_h_prev, z_l_final): the gradient on
                // the merged input flows to z_l_final; z_h_prev is constant.
                let d_zl = module_backward(
                    h_cache,
                    &self.params.h_blocks,
                    &mut grads.h_blocks,
                    self.rope(),
                    cfg.n_heads,
                    self.rms_eps(),
                    &dz,
                );
                // Low-level inputs were (z_l_prev, z_h_prev, x_tilde): only
                // x_tilde carries gradient onward.
                module_backward(
                    l_cache,
                    &self.params.l_blocks,
                    &mut grads.l_blocks,
                    self.rope(),
                    cfg.n_heads,
                    self.rms_eps(),
                    &d_zl,
                )
            }
            SegmentCache::Stack { stack_cache, .. } => module_backward(
                stack_cache,
                &self.params.l_blocks,
                &mut grads.l_blocks,
                self.rope(),
                cfg.n_heads,
                self.rms_eps(),
                &dz,
            ),
        };
        embed_backward(&d_x_tilde, tokens, &mut grads.embed);
        Ok(grads)
    }
}
