use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

use super::variant::{Shortcut, VariantSpec};

/// Affine map `x·W + b` on row batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: store.add(format!("{name}.w"), &[in_dim, out_dim]),
            bias: bias.then(|| store.add(format!("{name}.b"), &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }

    pub fn scalar_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Pieces of one block's joint residual `F = M ⊙ V`.
#[derive(Clone, Copy, Debug)]
pub struct ResidualParts {
    /// Question mask `σ(…W_q·q)`.
    pub mask: Var,
    /// Visual embedding `σ(W_2 σ(W_1 v))` (or `σ(W_v v)` for one layer).
    pub visual: Var,
    pub residual: Var,
}

/// One learning block: `H = shortcut(q) + F(q, v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningBlock {
    pub index: usize,
    pub spec: VariantSpec,
    pub in_dim: usize,
    pub joint_dim: usize,
    /// `None` means identity (or no shortcut for [`Shortcut::Absent`]).
    pub shortcut: Option<Dense>,
    pub question: Vec<Dense>,
    pub visual: Vec<Dense>,
    pub visual_shortcut: Option<Dense>,
}

/// What a block hands to the next one.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub hidden: Var,
    /// Projected visual shortcut carried forward by variant (e).
    pub visual_carry: Option<Var>,
}

impl LearningBlock {
    /// `index` is zero-based; block 0 receives the question vector.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: VariantSpec,
        index: usize,
        in_dim: usize,
        visual_dim: usize,
        joint_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        if in_dim == 0 || visual_dim == 0 || joint_dim == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        let name = |s: &str| format!("{prefix}.{s}");
        let shortcut = match spec.shortcut {
            Shortcut::Linear => Some(Dense::new(store, &name("w_q_short"), in_dim, joint_dim, bias)),
            Shortcut::IdentityAfterFirst if index == 0 => {
                Some(Dense::new(store, &name("w_q_short"), in_dim, joint_dim, bias))
            }
            Shortcut::IdentityAfterFirst => {
                if in_dim != joint_dim {
                    return Err(Error::Config(format!(
                        "identity shortcut in block {} needs input dim {in_dim} == joint dim {joint_dim}",
                        index + 1
                    )));
                }
                None
            }
            Shortcut::Absent => None,
        };
        let question = match spec.question_depth {
            1 => vec![Dense::new(store, &name("w_q"), in_dim, joint_dim, bias)],
            2 => vec![
                Dense::new(store, &name("w_q1"), in_dim, joint_dim, bias),
                Dense::new(store, &name("w_q2"), joint_dim, joint_dim, bias),
            ],
            d => return Err(Error::Config(format!("question depth {d} unsupported"))),
        };
        let visual = match spec.visual_depth {
            1 => vec![Dense::new(store, &name("w_v"), visual_dim, joint_dim, bias)],
            2 => vec![
                Dense::new(store, &name("w_1"), visual_dim, joint_dim, bias),
                Dense::new(store, &name("w_2"), joint_dim, joint_dim, bias),
            ],
            d => return Err(Error::Config(format!("visual depth {d} unsupported"))),
        };
        let visual_shortcut = (spec.visual_shortcut && index == 0)
            .then(|| Dense::new(store, &name("w_v_short"), visual_dim, joint_dim, bias));
        Ok(Self {
            index,
            spec,
            in_dim,
            joint_dim,
            shortcut,
            question,
            visual,
            visual_shortcut,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.shortcut
            .iter()
            .chain(&self.question)
            .chain(&self.visual)
            .chain(&self.visual_shortcut)
            .flat_map(Dense::params)
            .collect()
    }

    /// Parameters of the question mask only.
    pub fn mask_params(&self) -> Vec<ParamId> {
        self.question.iter().flat_map(Dense::params).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.shortcut
            .iter()
            .chain(&self.question)
            .chain(&self.visual)
            .chain(&self.visual_shortcut)
            .map(Dense::scalar_count)
            .sum()
    }

    fn tanh_chain(tape: &mut Tape, p: &Bound, layers: &[Dense], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in layers {
            let pre = layer.forward(tape, p, h)?;
            h = tape.tanh(pre);
        }
        Ok(h)
    }

    fn check(&self, tape: &Tape, q_in: Var, v: Var) -> Result<()> {
        let (_, qd) = tape.value(q_in).dims2()?;
        let (_, vd) = tape.value(v).dims2()?;
        if qd != self.in_dim || vd != self.visual[0].in_dim || tape.shape(q_in)[0] != tape.shape(v)[0] {
            return Err(Error::dim("learning block", tape.shape(q_in), tape.shape(v)));
        }
        Ok(())
    }

    /// Mask, visual embedding and their product.
    pub fn residual_parts(&self, tape: &mut Tape, p: &Bound, q_in: Var, v: Var) -> Result<ResidualParts> {
        self.check(tape, q_in, v)?;
        let mask = Self::tanh_chain(tape, p, &self.question, q_in)?;
        let visual = Self::tanh_chain(tape, p, &self.visual, v)?;
        let residual = tape.mul(mask, visual)?;
        Ok(ResidualParts { mask, visual, residual })
    }

    /// Joint residual `F(q, v)`.
    pub fn joint_residual(&self, tape: &mut Tape, p: &Bound, q_in: Var, v: Var) -> Result<Var> {
        Ok(self.residual_parts(tape, p, q_in, v)?.residual)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q_in: Var,
        v: Var,
        visual_carry: Option<Var>,
    ) -> Result<BlockOutput> {
        let f = self.joint_residual(tape, p, q_in, v)?;
        let mut hidden = match (&self.shortcut, self.spec.shortcut) {
            (_, Shortcut::Absent) => f,
            (Some(s), _) => {
                let sc = s.forward(tape, p, q_in)?;
                tape.add(sc, f)?
            }
            (None, _) => tape.add(q_in, f)?,
        };
        // Variant (e): the first block projects v to the joint space; later
        // blocks add that projection again through an identity shortcut.
        let mut carry = visual_carry;
        if let Some(vs) = &self.visual_shortcut {
            carry = Some(vs.forward(tape, p, v)?);
        }
        if self.spec.visual_shortcut {
            let c = carry.ok_or_else(|| Error::Contract("visual shortcut has nothing to carry".into()))?;
            hidden = tape.add(hidden, c)?;
        }
        Ok(BlockOutput {
            hidden,
            visual_carry: carry,
        })
    }
}
