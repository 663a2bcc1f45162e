//! GRU question encoder with an optional TrimZero execution path.
//!
//! Gating follows Cho et al.:
//!
//! ```text
//! z = σ(x·W_z + h·U_z + b_z)
//! r = σ(x·W_r + h·U_r + b_r)
//! ñ = tanh(x·W_n + (r ⊙ h)·U_n + b_n)
//! h' = z ⊙ h + (1 − z) ⊙ ñ
//! ```
//!
//! The encoding of a question is the hidden state after its last real token.
//! Token id 0 is padding and never influences the result.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// Padded token matrix. Rows shorter than `max_len` are filled with [`PAD_ID`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionBatch {
    tokens: Vec<usize>,
    lengths: Vec<usize>,
    max_len: usize,
}

impl QuestionBatch {
    /// Pads `seqs` to the longest length. Every sequence needs at least one
    /// token and must not contain the pad id.
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        let max_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        Self::padded_to(seqs, max_len)
    }

    pub fn padded_to<S: AsRef<[usize]>>(seqs: &[S], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty question batch".into()));
        }
        let mut tokens = vec![PAD_ID; seqs.len() * max_len];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            if s.is_empty() || s.len() > max_len {
                return Err(Error::Contract(format!(
                    "sequence {i} has length {} (max {max_len})",
                    s.len()
                )));
            }
            if s.contains(&PAD_ID) {
                return Err(Error::Contract(format!("sequence {i} contains the pad id")));
            }
            tokens[i * max_len..i * max_len + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Ok(Self {
            tokens,
            lengths,
            max_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn token(&self, row: usize, t: usize) -> usize {
        self.tokens[row * self.max_len + t]
    }

    pub fn row(&self, row: usize) -> &[usize] {
        &self.tokens[row * self.max_len..(row + 1) * self.max_len]
    }

    fn column(&self, t: usize, rows: impl Iterator<Item = usize>) -> Vec<usize> {
        rows.map(|r| self.token(r, t)).collect()
    }
}

/// Dropout masks applied inside the recurrence. Masks already include the
/// inverted-dropout scaling and cover every row of the batch.
#[derive(Clone, Debug, Default)]
pub enum GruMasks {
    #[default]
    None,
    /// A fresh `batch × embed` mask for the input of every time step.
    PerStep(Vec<Tensor>),
    /// One mask per sequence for the inputs and one for the recurrent state,
    /// reused at every time step.
    PerSequence { input: Tensor, hidden: Tensor },
}

/// Row-level work done by one encoder call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepStats {
    /// Row-steps actually computed.
    pub row_steps: usize,
    /// Row-steps a padded batch would compute (`batch × max_len`).
    pub padded_row_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruEncoder {
    pub config: GruConfig,
    pub embedding: ParamId,
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_n: ParamId,
    u_n: ParamId,
    b_n: ParamId,
}

impl GruEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: GruConfig) -> Self {
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let mut p = |name: &str, shape: &[usize]| store.add(format!("{prefix}.{name}"), shape);
        Self {
            config,
            embedding: p("embedding", &[config.vocab_size, e]),
            w_z: p("w_z", &[e, h]),
            u_z: p("u_z", &[h, h]),
            b_z: p("b_z", &[h]),
            w_r: p("w_r", &[e, h]),
            u_r: p("u_r", &[h, h]),
            b_r: p("b_r", &[h]),
            w_n: p("w_n", &[e, h]),
            u_n: p("u_n", &[h, h]),
            b_n: p("b_n", &[h]),
        }
    }

    /// Every parameter except the word embedding.
    pub fn recurrent_params(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_n, self.u_n, self.b_n,
        ]
    }

    fn check_tokens(&self, batch: &QuestionBatch) -> Result<()> {
        let v = self.config.vocab_size;
        match batch.tokens.iter().find(|&&t| t >= v) {
            Some(&t) => Err(Error::Index {
                what: "token id",
                index: t,
                bound: v,
            }),
            None => Ok(()),
        }
    }

    /// One recurrence step. `h_gate` is the (possibly masked) state fed to the
    /// recurrent matrices, `h` the state carried into the convex update.
    fn cell(&self, tape: &mut Tape, p: &Bound, x: Var, h_gate: Var, h: Var) -> Result<Var> {
        let z_in = tape.linear(x, p[self.w_z], Some(p[self.b_z]))?;
        let z_rec = tape.matmul(h_gate, p[self.u_z])?;
        let z_pre = tape.add(z_in, z_rec)?;
        let z = tape.sigmoid(z_pre);

        let r_in = tape.linear(x, p[self.w_r], Some(p[self.b_r]))?;
        let r_rec = tape.matmul(h_gate, p[self.u_r])?;
        let r_pre = tape.add(r_in, r_rec)?;
        let r = tape.sigmoid(r_pre);

        let rh = tape.mul(r, h_gate)?;
        let n_in = tape.linear(x, p[self.w_n], Some(p[self.b_n]))?;
        let n_rec = tape.matmul(rh, p[self.u_n])?;
        let n_pre = tape.add(n_in, n_rec)?;
        let n = tape.tanh(n_pre);

        let keep = tape.mul(z, h)?;
        let one_minus_z = tape.one_minus(z);
        let update = tape.mul(one_minus_z, n)?;
        tape.add(keep, update)
    }

    fn select_mask(mask: &Tensor, rows: &[usize]) -> Tensor {
        let c = mask.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(mask.row(r));
        }
        Tensor::new(vec![rows.len(), c], data).expect("mask rows")
    }

    /// Inputs for step `t` restricted to `rows`, with any masks applied.
    fn step_inputs(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &QuestionBatch,
        masks: &GruMasks,
        t: usize,
        rows: &[usize],
        h: Var,
    ) -> Result<(Var, Var)> {
        let ids = batch.column(t, rows.iter().copied());
        let x = tape.gather_rows(p[self.embedding], &ids)?;
        match masks {
            GruMasks::None => Ok((x, h)),
            GruMasks::PerStep(m) => {
                let mt = tape.constant(Self::select_mask(&m[t], rows));
                Ok((tape.mul(x, mt)?, h))
            }
            GruMasks::PerSequence { input, hidden } => {
                let mi = tape.constant(Self::select_mask(input, rows));
                let mh = tape.constant(Self::select_mask(hidden, rows));
                Ok((tape.mul(x, mi)?, tape.mul(h, mh)?))
            }
        }
    }

    fn check_masks(&self, batch: &QuestionBatch, masks: &GruMasks) -> Result<()> {
        let b = batch.batch_size();
        let (e, h) = (self.config.embed_dim, self.config.hidden_dim);
        let ok = match masks {
            GruMasks::None => true,
            GruMasks::PerStep(m) => m.len() >= batch.max_len() && m.iter().all(|t| t.shape() == [b, e]),
            GruMasks::PerSequence { input, hidden } => input.shape() == [b, e] && hidden.shape() == [b, h],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("dropout masks do not match the batch".into()))
        }
    }

    /// Runs every row for every time step and freezes finished rows with a
    /// 0/1 mask.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &QuestionBatch, masks: &GruMasks) -> Result<Var> {
        self.check_tokens(batch)?;
        self.check_masks(batch, masks)?;
        let b = batch.batch_size();
        let hd = self.config.hidden_dim;
        let all: Vec<usize> = (0..b).collect();
        let mut h = tape.constant(Tensor::zeros(&[b, hd]));
        for t in 0..batch.max_len() {
            let (x, h_gate) = self.step_inputs(tape, p, batch, masks, t, &all, h)?;
            let h_new = self.cell(tape, p, x, h_gate, h)?;
            let mut active = Tensor::zeros(&[b, hd]);
            for (i, &len) in batch.lengths().iter().enumerate() {
                if len > t {
                    active.data_mut()[i * hd..(i + 1) * hd].fill(1.0);
                }
            }
            let inactive = active.map(|a| 1.0 - a);
            let m_on = tape.constant(active);
            let m_off = tape.constant(inactive);
            let a = tape.mul(h_new, m_on)?;
            let c = tape.mul(h, m_off)?;
            h = tape.add(a, c)?;
        }
        Ok(h)
    }

    /// TrimZero: rows are sorted by length so the rows still active at step
    /// `t` form a prefix, and only that prefix is computed.
    pub fn forward_trimzero(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &QuestionBatch,
        masks: &GruMasks,
    ) -> Result<(Var, StepStats)> {
        self.check_tokens(batch)?;
        self.check_masks(batch, masks)?;
        let b = batch.batch_size();
        let hd = self.config.hidden_dim;
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| batch.lengths()[j].cmp(&batch.lengths()[i]));

        let mut h = tape.constant(Tensor::zeros(&[b, hd]));
        let mut row_steps = 0;
        for t in 0..batch.max_len() {
            let active = order.iter().take_while(|&&r| batch.lengths()[r] > t).count();
            if active == 0 {
                break;
            }
            row_steps += active;
            let rows = &order[..active];
            let h_act = if active == b {
                h
            } else {
                let prefix: Vec<usize> = (0..active).collect();
                tape.gather_rows(h, &prefix)?
            };
            let (x, h_gate) = self.step_inputs(tape, p, batch, masks, t, rows, h_act)?;
            let h_new = self.cell(tape, p, x, h_gate, h_act)?;
            h = if active == b {
                h_new
            } else {
                let rest: Vec<usize> = (active..b).collect();
                let tail = tape.gather_rows(h, &rest)?;
                tape.concat_rows(h_new, tail)?
            };
        }
        let mut inverse = vec![0; b];
        for (pos, &r) in order.iter().enumerate() {
            inverse[r] = pos;
        }
        let out = tape.gather_rows(h, &inverse)?;
        Ok((
            out,
            StepStats {
                row_steps,
                padded_row_steps: b * batch.max_len(),
            },
        ))
    }
}
