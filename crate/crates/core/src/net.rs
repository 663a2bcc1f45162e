//! The full answering network: GRU question encoder, toy CNN, MRN stack.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::encoders::{CnnConfig, GruConfig, GruEncoder, GruMasks, QuestionBatch, ToyCnn};
use crate::error::{Error, Result};
use crate::evaluation::Predictor;
use crate::model::{MrnConfig, MrnModel, MrnOutput, Variant};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::training::init_params;

/// Joint embedding size of the default toy model.
pub const DEFAULT_JOINT_DIM: usize = 64;

/// Rows per forward pass when scoring or encoding many examples.
const CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub gru: GruConfig,
    pub cnn: CnnConfig,
    pub mrn: MrnConfig,
}

impl NetConfig {
    /// Default toy sizes for `data`, with the given MRN shape.
    pub fn toy(data: &Dataset, variant: Variant, blocks: usize, joint_dim: usize) -> Self {
        let [channels, height, width] = data.config.image_shape();
        let gru = GruConfig {
            vocab_size: data.question_vocab.len(),
            embed_dim: 32,
            hidden_dim: 32,
        };
        let cnn = CnnConfig {
            channels,
            height,
            width,
            ..CnnConfig::default()
        };
        let mrn = MrnConfig {
            variant,
            blocks,
            question_dim: gru.hidden_dim,
            visual_dim: cnn.out_dim,
            joint_dim,
            answers: data.answers.len(),
            bias: true,
        };
        Self { gru, cnn, mrn }
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        self.mrn.validate()?;
        if self.gru.vocab_size < 2 || self.gru.embed_dim == 0 || self.gru.hidden_dim == 0 {
            return Err(Error::Config(format!("bad question encoder config {:?}", self.gru)));
        }
        if self.mrn.question_dim != self.gru.hidden_dim {
            return Err(Error::Config(format!(
                "question_dim {} differs from GRU hidden size {}",
                self.mrn.question_dim, self.gru.hidden_dim
            )));
        }
        if self.mrn.visual_dim != self.cnn.out_dim {
            return Err(Error::Config(format!(
                "visual_dim {} differs from CNN output size {}",
                self.mrn.visual_dim, self.cnn.out_dim
            )));
        }
        Ok(())
    }

    /// Whether `data` can be fed to a network with this config.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let [c, h, w] = data.config.image_shape();
        if [c, h, w] != [self.cnn.channels, self.cnn.height, self.cnn.width] {
            return Err(Error::dim(
                "dataset images",
                &[c, h, w],
                &[self.cnn.channels, self.cnn.height, self.cnn.width],
            ));
        }
        if data.answers.len() != self.mrn.answers {
            return Err(Error::Config(format!(
                "dataset has {} answers, model has {}",
                data.answers.len(),
                self.mrn.answers
            )));
        }
        if data.question_vocab.len() > self.gru.vocab_size {
            return Err(Error::Config(
                "question vocabulary larger than the embedding table".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaNet {
    pub config: NetConfig,
    pub store: ParamStore,
    pub gru: GruEncoder,
    pub cnn: ToyCnn,
    pub mrn: MrnModel,
}

impl VqaNet {
    /// Registers every parameter, all zero.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let gru = GruEncoder::new(&mut store, "gru", config.gru);
        let cnn = ToyCnn::new(&mut store, "cnn", config.cnn)?;
        let mrn = MrnModel::new(&mut store, "mrn", config.mrn)?;
        Ok(Self {
            config,
            store,
            gru,
            cnn,
            mrn,
        })
    }

    /// [`VqaNet::new`] followed by uniform initialisation.
    pub fn initialized(config: NetConfig, range: f64, seed: u64) -> Result<Self> {
        let mut net = Self::new(config)?;
        init_params(&mut net.store, range, seed)?;
        Ok(net)
    }

    pub fn is_cnn_param(&self, id: ParamId) -> bool {
        self.cnn.params().contains(&id)
    }

    pub fn question_batch(data: &Dataset, indices: &[usize]) -> Result<QuestionBatch> {
        let seqs: Vec<&[usize]> = indices
            .iter()
            .map(|&i| data.examples[i].question_ids.as_slice())
            .collect();
        QuestionBatch::from_sequences(&seqs)
    }

    pub fn encode_question(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &QuestionBatch,
        masks: &GruMasks,
        trimzero: bool,
    ) -> Result<Var> {
        if trimzero {
            Ok(self.gru.forward_trimzero(tape, p, batch, masks)?.0)
        } else {
            self.gru.forward(tape, p, batch, masks)
        }
    }

    pub fn encode_images(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Var> {
        self.cnn.forward(tape, p, images)
    }

    /// CNN features `[n, visual_dim]` for `indices`, without gradients.
    pub fn image_features(&self, data: &Dataset, indices: &[usize]) -> Result<Tensor> {
        let d = self.config.cnn.out_dim;
        let mut out = Vec::with_capacity(indices.len() * d);
        for chunk in indices.chunks(CHUNK) {
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape);
            let img = tape.constant(data.images(chunk));
            let v = self.encode_images(&mut tape, &p, img)?;
            out.extend_from_slice(tape.value(v).data());
        }
        Tensor::new(vec![indices.len(), d], out)
    }

    /// Full forward pass for a batch with precomputed or on-tape visual
    /// features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &QuestionBatch,
        visual: Var,
        trimzero: bool,
    ) -> Result<MrnOutput> {
        let q = self.encode_question(tape, p, batch, &GruMasks::None, trimzero)?;
        self.mrn.forward(tape, p, q, visual)
    }

    /// Pre-softmax scores with optional cached features (rows aligned with
    /// `indices`).
    pub fn scores_with(&self, data: &Dataset, indices: &[usize], features: Option<&Tensor>) -> Result<Vec<Vec<f64>>> {
        self.config.check_dataset(data)?;
        let mut out = Vec::with_capacity(indices.len());
        let d = self.config.cnn.out_dim;
        for (c, chunk) in indices.chunks(CHUNK).enumerate() {
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape);
            let v = match features {
                Some(f) => {
                    let start = c * CHUNK * d;
                    let rows = f.data()[start..start + chunk.len() * d].to_vec();
                    tape.constant(Tensor::new(vec![chunk.len(), d], rows)?)
                }
                None => {
                    let img = tape.constant(data.images(chunk));
                    self.encode_images(&mut tape, &p, img)?
                }
            };
            let batch = Self::question_batch(data, chunk)?;
            let o = self.forward(&mut tape, &p, &batch, v, true)?;
            let logits = tape.value(o.logits);
            let a = logits.shape()[1];
            out.extend(logits.data().chunks(a).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

impl Predictor for VqaNet {
    fn scores(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.scores_with(data, indices, None)
    }
}

/// A network paired with cached image features for a whole dataset.
pub struct CachedPredictor<'a> {
    pub net: &'a VqaNet,
    /// `[data.len(), visual_dim]`, one row per example.
    pub features: &'a Tensor,
}

impl Predictor for CachedPredictor<'_> {
    fn scores(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let d = self.net.config.cnn.out_dim;
        let mut rows = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            rows.extend_from_slice(self.features.row(i));
        }
        let f = Tensor::new(vec![indices.len(), d], rows)?;
        self.net.scores_with(data, indices, Some(&f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};

    fn setup() -> (Dataset, VqaNet) {
        let data = generate(&GenConfig {
            examples: 40,
            ..GenConfig::default()
        })
        .unwrap();
        let cfg = NetConfig::toy(&data, Variant::B, 2, 16);
        let net = VqaNet::initialized(cfg, 0.08, 3).unwrap();
        (data, net)
    }

    #[test]
    fn cached_and_direct_scores_agree() {
        let (data, net) = setup();
        let idx: Vec<usize> = (0..data.len()).collect();
        let direct = net.scores(&data, &idx).unwrap();
        let feats = net.image_features(&data, &idx).unwrap();
        let cached = CachedPredictor {
            net: &net,
            features: &feats,
        }
        .scores(&data, &idx[5..12])
        .unwrap();
        for (a, b) in direct[5..12].iter().zip(&cached) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        let (data, net) = setup();
        let mut cfg = net.config;
        cfg.mrn.visual_dim = 7;
        assert!(VqaNet::new(cfg).is_err());
        let mut cfg = net.config;
        cfg.mrn.answers = 3;
        let small = VqaNet::new(cfg).unwrap();
        assert!(small.scores(&data, &[0]).is_err());
    }
}
