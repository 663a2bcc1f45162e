//! Multimodal residual networks: stacked learning blocks that add a
//! question shortcut to an elementwise-product joint residual, followed by a
//! linear answer classifier.
//!
//! With `H_0 = q`, block `l` computes
//!
//! ```text
//! H_l = W'_l · H_{l-1} + σ(W_q,l · H_{l-1}) ⊙ σ(W_2,l · σ(W_1,l · v))
//! ```
//!
//! and the same visual vector `v` feeds every block.

mod block;
mod variant;

pub use block::{BlockOutput, Dense, LearningBlock, ResidualParts};
pub use variant::{Shortcut, Variant, VariantSpec};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrnConfig {
    pub variant: Variant,
    pub blocks: usize,
    pub question_dim: usize,
    pub visual_dim: usize,
    pub joint_dim: usize,
    pub answers: usize,
    pub bias: bool,
}

impl Default for MrnConfig {
    fn default() -> Self {
        Self {
            variant: Variant::B,
            blocks: 3,
            question_dim: 32,
            visual_dim: 64,
            joint_dim: 64,
            answers: 20,
            bias: true,
        }
    }
}

impl MrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("at least one learning block is required".into()));
        }
        if [self.question_dim, self.visual_dim, self.joint_dim, self.answers].contains(&0) {
            return Err(Error::Config(format!("dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Learnable scalars in blocks and classifier, computed from the
    /// dimensions alone. Question and word embeddings are not counted.
    pub fn param_count(&self) -> usize {
        let spec = self.variant.spec();
        let d = self.joint_dim;
        let b = usize::from(self.bias);
        let dense = |i: usize, o: usize| i * o + b * o;
        let mut total = 0;
        for l in 0..self.blocks {
            let input = if l == 0 { self.question_dim } else { d };
            total += match spec.shortcut {
                Shortcut::Linear => dense(input, d),
                Shortcut::IdentityAfterFirst if l == 0 => dense(input, d),
                _ => 0,
            };
            total += dense(input, d) + (spec.question_depth - 1) * dense(d, d);
            total += dense(self.visual_dim, d) + (spec.visual_depth - 1) * dense(d, d);
            if spec.visual_shortcut && l == 0 {
                total += dense(self.visual_dim, d);
            }
        }
        total + dense(d, self.answers)
    }
}

/// Largest joint dimension whose [`MrnConfig::param_count`] fits `target`.
pub fn solve_dim_for_budget(template: &MrnConfig, target: usize) -> Result<usize> {
    let count = |d: usize| {
        MrnConfig {
            joint_dim: d,
            ..*template
        }
        .param_count()
    };
    if count(1) > target {
        return Err(Error::Config(format!(
            "budget {target} is below the smallest model ({} parameters)",
            count(1)
        )));
    }
    let (mut lo, mut hi) = (1usize, 2usize);
    while count(hi) <= target {
        lo = hi;
        hi *= 2;
    }
    // count(lo) <= target < count(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct MrnOutput {
    /// `H_0 = q, H_1, …, H_L` (after any per-block hook).
    pub hidden: Vec<Var>,
    pub logits: Var,
}

impl MrnOutput {
    pub fn last_hidden(&self) -> Var {
        *self.hidden.last().expect("at least H_0")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrnModel {
    pub config: MrnConfig,
    pub blocks: Vec<LearningBlock>,
    pub classifier: Dense,
}

impl MrnModel {
    pub fn new(store: &mut ParamStore, prefix: &str, config: MrnConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.variant.spec();
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let input = if l == 0 { config.question_dim } else { config.joint_dim };
            blocks.push(LearningBlock::new(
                store,
                &format!("{prefix}.block{}", l + 1),
                spec,
                l,
                input,
                config.visual_dim,
                config.joint_dim,
                config.bias,
            )?);
        }
        let classifier = Dense::new(
            store,
            &format!("{prefix}.classifier"),
            config.joint_dim,
            config.answers,
            config.bias,
        );
        Ok(Self {
            config,
            blocks,
            classifier,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(LearningBlock::params).collect();
        ids.extend(self.classifier.params());
        ids
    }

    /// Exact number of learnable scalars registered by this model.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.params().iter().map(|&id| store.get(id).len()).sum()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, q: Var, v: Var) -> Result<MrnOutput> {
        self.forward_with(tape, p, q, v, |_, h| Ok(h))
    }

    /// Forward pass with `hook` applied to each block output before it feeds
    /// the next block (dropout goes here).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q: Var,
        v: Var,
        mut hook: impl FnMut(&mut Tape, Var) -> Result<Var>,
    ) -> Result<MrnOutput> {
        let mut hidden = vec![q];
        let mut carry = None;
        let mut h = q;
        for block in &self.blocks {
            let out = block.forward(tape, p, h, v, carry)?;
            carry = out.visual_carry;
            h = hook(tape, out.hidden)?;
            hidden.push(h);
        }
        let logits = self.classifier.forward(tape, p, h)?;
        Ok(MrnOutput { hidden, logits })
    }
}
