//! Uniform initialisation, RMSProp, dropout and the mini-batch training loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Color, Dataset, Scene, ShapeKind, Split};
use crate::encoders::GruMasks;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, AnswerType, EvalReport, Predictor, Protocol};
use crate::net::{CachedPredictor, VqaNet};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// RNG streams derived from the training seed.
const STREAM_ORDER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_PRETRAIN: u64 = 3;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws every scalar of `store` i.i.d. from `uniform(-range, range)`, in
/// registration order.
pub fn init_params(store: &mut ParamStore, range: f64, seed: u64) -> Result<()> {
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Config(format!("init range must be positive, got {range}")));
    }
    let mut rng = seeded(seed, 0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = rng.gen_range(-range..range);
        }
    }
    Ok(())
}

/// `s ← decay·s + (1−decay)·g²`, `p ← p − lr·g/(√s + eps)`.
pub fn rmsprop_step(param: &mut [f64], grad: &[f64], state: &mut [f64], lr: f64, decay: f64, eps: f64) {
    assert!(
        param.len() == grad.len() && grad.len() == state.len(),
        "rmsprop shapes differ"
    );
    for ((p, &g), s) in param.iter_mut().zip(grad).zip(state.iter_mut()) {
        *s = decay * *s + (1.0 - decay) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
}

/// Running mean of squared gradients, one tensor per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmspropState {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub mean_square: Vec<Tensor>,
}

impl RmspropState {
    pub fn new(store: &ParamStore, lr: f64, decay: f64, eps: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            mean_square: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    /// Updates the parameters whose entry in `trainable` is set.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], trainable: &[bool]) {
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if trainable[k] {
                rmsprop_step(
                    store.get_mut(id).data_mut(),
                    grads[k].data(),
                    self.mean_square[k].data_mut(),
                    self.lr,
                    self.decay,
                    self.eps,
                );
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    #[default]
    Standard,
    Bayesian,
}

impl fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropoutMode::Standard => "standard",
            DropoutMode::Bayesian => "bayesian",
        })
    }
}

impl FromStr for DropoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(DropoutMode::Standard),
            "bayesian" => Ok(DropoutMode::Bayesian),
            _ => Err(Error::Config(format!("unknown dropout mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub rate: f64,
    pub mode: DropoutMode,
}

impl Dropout {
    pub fn new(rate: f64, mode: DropoutMode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Self { rate, mode })
    }

    /// Inverted-dropout mask: `1/(1−rate)` where kept, 0 elsewhere.
    pub fn mask(&self, rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let keep = 1.0 - self.rate;
        let mut m = Tensor::zeros(shape);
        for x in m.data_mut() {
            if rng.gen::<f64>() < keep {
                *x = 1.0 / keep;
            }
        }
        m
    }

    fn active(&self, phase: Phase) -> bool {
        phase == Phase::Train && self.rate > 0.0
    }

    /// Applies a fresh mask to `x` on the tape.
    pub fn apply(&self, tape: &mut Tape, x: Var, rng: &mut impl Rng, phase: Phase) -> Result<Var> {
        if !self.active(phase) {
            return Ok(x);
        }
        let m = tape.constant(self.mask(rng, tape.shape(x)));
        tape.mul(x, m)
    }

    /// Masks for the question encoder: a fresh input mask per time step in
    /// standard mode; one input and one recurrent mask per sequence in
    /// Bayesian mode.
    pub fn gru_masks(
        &self,
        rng: &mut impl Rng,
        batch: usize,
        steps: usize,
        embed: usize,
        hidden: usize,
        phase: Phase,
    ) -> GruMasks {
        if !self.active(phase) {
            return GruMasks::None;
        }
        match self.mode {
            DropoutMode::Standard => GruMasks::PerStep((0..steps).map(|_| self.mask(rng, &[batch, embed])).collect()),
            DropoutMode::Bayesian => GruMasks::PerSequence {
                input: self.mask(rng, &[batch, embed]),
                hidden: self.mask(rng, &[batch, hidden]),
            },
        }
    }
}

/// Dropout on a plain tensor. In Bayesian mode a rank-3 `[batch, time, …]`
/// input shares one mask across the time axis.
pub fn dropout(x: &Tensor, rate: f64, mode: DropoutMode, seed: u64, phase: Phase) -> Result<Tensor> {
    let d = Dropout::new(rate, mode)?;
    if !d.active(phase) {
        return Ok(x.clone());
    }
    let mut rng = seeded(seed, 0);
    let s = x.shape();
    let mask = match (mode, s.len()) {
        (DropoutMode::Bayesian, 3) => {
            let per_seq = d.mask(&mut rng, &[s[0], s[2]]);
            let mut m = Tensor::zeros(s);
            for b in 0..s[0] {
                for t in 0..s[1] {
                    let off = (b * s[1] + t) * s[2];
                    m.data_mut()[off..off + s[2]].copy_from_slice(per_seq.row(b));
                }
            }
            m
        }
        _ => d.mask(&mut rng, s),
    };
    let data = x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
    Tensor::new(s.to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub dropout: f64,
    pub dropout_mode: DropoutMode,
    pub seed: u64,
    pub init_range: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
    pub freeze_cnn: bool,
    pub finetune_embedding: bool,
    pub finetune_gru: bool,
    pub trimzero: bool,
    /// Iterations between validation rows of the metrics log.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            iterations: 5000,
            learning_rate: 3e-4,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            dropout: 0.0,
            dropout_mode: DropoutMode::Standard,
            seed: 1,
            init_range: 0.08,
            clip: None,
            freeze_cnn: true,
            finetune_embedding: true,
            finetune_gru: true,
            trimzero: true,
            eval_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Dropout::new(self.dropout, self.dropout_mode)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.init_range > 0.0) {
            return bad(format!("init range must be positive, got {}", self.init_range));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_eps > 0.0) {
            return bad("learning rate must be >= 0, decay in [0, 1), eps > 0".into());
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return bad("clip threshold must be positive".into());
        }
        if self.eval_interval == 0 {
            return bad("eval interval must be at least 1".into());
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    /// Mean mini-batch loss since the previous row.
    pub train_loss: f64,
    pub val_overall: f64,
    pub val_yn: f64,
    pub val_num: f64,
    pub val_other: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss of every iteration.
    pub losses: Vec<f64>,
    pub curve: Vec<MetricRow>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("iteration,train_loss,val_overall,val_yn,val_num,val_other\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.train_loss, r.val_overall, r.val_yn, r.val_num, r.val_other
        ));
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Which parameters receive updates, by store position.
pub fn trainable_mask(net: &VqaNet, cfg: &TrainConfig) -> Vec<bool> {
    let emb = net.gru.embedding;
    let rec = net.gru.recurrent_params();
    net.store
        .ids()
        .map(|id| {
            if net.is_cnn_param(id) {
                !cfg.freeze_cnn
            } else if id == emb {
                cfg.finetune_embedding
            } else if rec.contains(&id) {
                cfg.finetune_gru
            } else {
                true
            }
        })
        .collect()
}

fn clip_global_norm(grads: &mut [Tensor], trainable: &[bool], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .flat_map(|(g, _)| g.data())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Validation accuracy by answer type, using cached features when available.
fn validate_split(net: &VqaNet, data: &Dataset, features: Option<&Tensor>, split: Split) -> Result<Option<EvalReport>> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Ok(None);
    }
    let r = match features {
        Some(f) => {
            let p = CachedPredictor { net, features: f };
            evaluate(&p, data, &idx, Protocol::OpenEnded, false)?
        }
        None => evaluate(net as &dyn Predictor, data, &idx, Protocol::OpenEnded, false)?,
    };
    Ok(Some(r))
}

/// Trains `net` in place on the Train split for `cfg.iterations` mini-batches.
/// Batches are drawn from a per-epoch shuffle; every random choice derives
/// from `cfg.seed`.
pub fn train(net: &mut VqaNet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    net.config.check_dataset(data)?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Contract("no training examples".into()));
    }
    let drop = Dropout::new(cfg.dropout, cfg.dropout_mode)?;
    let trainable = trainable_mask(net, cfg);
    let mut opt = RmspropState::new(&net.store, cfg.learning_rate, cfg.rms_decay, cfg.rms_eps);
    let mut order_rng = seeded(cfg.seed, STREAM_ORDER);
    let mut drop_rng = seeded(cfg.seed, STREAM_DROPOUT);
    let d = net.config.cnn.out_dim;

    let all: Vec<usize> = (0..data.len()).collect();
    let features = if cfg.freeze_cnn {
        Some(net.image_features(data, &all)?)
    } else {
        None
    };

    let mut order = train_idx.clone();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut curve = Vec::new();
    let mut since = 0.0;
    let mut since_n = 0usize;

    for it in 1..=cfg.iterations {
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        while batch_idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }

        let mut tape = Tape::new();
        let p = net.store.bind(&mut tape, |id| trainable[id.index()]);
        let batch = VqaNet::question_batch(data, &batch_idx)?;
        let v = match &features {
            Some(f) => {
                let mut rows = Vec::with_capacity(batch_idx.len() * d);
                for &i in &batch_idx {
                    rows.extend_from_slice(f.row(i));
                }
                tape.constant(Tensor::new(vec![batch_idx.len(), d], rows)?)
            }
            None => {
                let img = tape.constant(data.images(&batch_idx));
                net.encode_images(&mut tape, &p, img)?
            }
        };
        let g = &net.config.gru;
        let masks = drop.gru_masks(
            &mut drop_rng,
            batch.batch_size(),
            batch.max_len(),
            g.embed_dim,
            g.hidden_dim,
            Phase::Train,
        );
        let q = net.encode_question(&mut tape, &p, &batch, &masks, cfg.trimzero)?;
        let out = net.mrn.forward_with(&mut tape, &p, q, v, |t, h| {
            drop.apply(t, h, &mut drop_rng, Phase::Train)
        })?;
        let targets: Vec<usize> = batch_idx.iter().map(|&i| data.examples[i].answer_id).collect();
        let loss = tape.softmax_cross_entropy(out.logits, &targets)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                what: format!("training loss is {lv}"),
            });
        }
        let gr = tape.backward(loss)?;
        let mut grads = p.grads(&gr);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                what: "non-finite gradient".into(),
            });
        }
        if let Some(c) = cfg.clip {
            clip_global_norm(&mut grads, &trainable, c);
        }
        opt.step(&mut net.store, &grads, &trainable);
        losses.push(lv);
        since += lv;
        since_n += 1;

        if it % cfg.eval_interval == 0 || it == cfg.iterations {
            let r = validate_split(net, data, features.as_ref(), Split::Val)?;
            let acc = |t| r.as_ref().map_or(0.0, |r| r.by_type(t));
            curve.push(MetricRow {
                iteration: it,
                train_loss: since / since_n as f64,
                val_overall: r.as_ref().map_or(0.0, EvalReport::overall),
                val_yn: acc(AnswerType::YesNo),
                val_num: acc(AnswerType::Number),
                val_other: acc(AnswerType::Other),
            });
            since = 0.0;
            since_n = 0;
        }
    }
    Ok(TrainReport { losses, curve })
}

/// Regression targets for visual pretraining: the count of every
/// (colour, shape) pair, of every colour and of every shape.
pub fn scene_attributes(scene: &Scene) -> Vec<f64> {
    let mut t = Vec::with_capacity(27);
    for c in Color::ALL {
        for s in ShapeKind::ALL {
            t.push(scene.objects.iter().filter(|o| o.color == c && o.shape == s).count() as f64);
        }
    }
    t.extend(
        Color::ALL
            .iter()
            .map(|&c| scene.objects.iter().filter(|o| o.color == c).count() as f64),
    );
    t.extend(
        ShapeKind::ALL
            .iter()
            .map(|&s| scene.objects.iter().filter(|o| o.shape == s).count() as f64),
    );
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 1,
        }
    }
}

/// Fits the CNN, through a throwaway linear head, to regress
/// [`scene_attributes`] of Train-split images under squared error. Only CNN
/// parameters of `net` change. Returns the loss of every iteration.
pub fn pretrain_cnn(net: &mut VqaNet, data: &Dataset, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    net.config.check_dataset(data)?;
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) {
        return Err(Error::Config("pretraining needs batch >= 1 and lr >= 0".into()));
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Contract("no training examples".into()));
    }
    let n_attr = scene_attributes(&data.examples[0].scene).len();
    let mut head = ParamStore::new();
    let hw = head.add("head.w", &[net.config.cnn.out_dim, n_attr]);
    let hb = head.add("head.b", &[n_attr]);
    init_params(&mut head, 0.08, cfg.seed ^ 0x5eed)?;
    let trainable: Vec<bool> = net.store.ids().map(|id| net.is_cnn_param(id)).collect();
    let mut opt = RmspropState::new(&net.store, cfg.learning_rate, 0.99, 1e-8);
    let mut head_opt = RmspropState::new(&head, cfg.learning_rate, 0.99, 1e-8);
    let mut rng = seeded(cfg.seed, STREAM_PRETRAIN);
    let mut order = train_idx;
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let p = net.store.bind(&mut tape, |id| trainable[id.index()]);
        let h = head.bind_all(&mut tape);
        let img = tape.constant(data.images(&batch));
        let v = net.encode_images(&mut tape, &p, img)?;
        let pred = tape.linear(v, h[hw], Some(h[hb]))?;
        let target: Vec<f64> = batch
            .iter()
            .flat_map(|&i| scene_attributes(&data.examples[i].scene))
            .collect();
        let target = tape.constant(Tensor::new(vec![batch.len(), n_attr], target)?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                what: format!("pretraining loss is {lv}"),
            });
        }
        let g = tape.backward(loss)?;
        opt.step(&mut net.store, &p.grads(&g), &trainable);
        head_opt.step(&mut head, &h.grads(&g), &[true, true]);
        losses.push(lv);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};
    use crate::model::Variant;
    use crate::net::NetConfig;

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut a = ParamStore::new();
        a.add("w", &[50, 40]);
        let mut b = a.clone();
        init_params(&mut a, 0.08, 9).unwrap();
        init_params(&mut b, 0.08, 9).unwrap();
        assert_eq!(a, b);
        init_params(&mut b, 0.08, 10).unwrap();
        assert_ne!(a, b);
        assert!(a.get(a.find("w").unwrap()).data().iter().all(|x| x.abs() < 0.08));
        assert!(init_params(&mut a, 0.0, 1).is_err());
        assert!(init_params(&mut a, -1.0, 1).is_err());
    }

    #[test]
    fn rmsprop_scalar_and_zero_grad() {
        let (mut p, mut s) = ([1.0], [0.0]);
        rmsprop_step(&mut p, &[2.0], &mut s, 0.1, 0.5, 1e-8);
        // s = 0.5·0 + 0.5·4 = 2; p = 1 − 0.1·2/(√2 + 1e-8)
        assert_eq!(s[0], 2.0);
        assert_eq!(p[0], 1.0 - 0.1 * 2.0 / (2f64.sqrt() + 1e-8));
        let before = p[0];
        rmsprop_step(&mut p, &[0.0], &mut s, 0.1, 0.5, 1e-8);
        assert_eq!(p[0], before);
        assert_eq!(s[0], 1.0);
    }

    #[test]
    fn rmsprop_constant_gradient_approaches_lr() {
        let (mut p, mut s) = ([0.0], [0.0]);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            rmsprop_step(&mut p, &[-3.0], &mut s, 0.01, 0.99, 1e-8);
            last = p[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
    }

    #[test]
    fn dropout_identities_and_errors() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(dropout(&x, 0.0, DropoutMode::Standard, 1, Phase::Train).unwrap(), x);
        assert_eq!(dropout(&x, 0.9, DropoutMode::Bayesian, 1, Phase::Eval).unwrap(), x);
        assert!(dropout(&x, 1.0, DropoutMode::Standard, 1, Phase::Train).is_err());
        assert!(dropout(&x, -0.1, DropoutMode::Standard, 1, Phase::Train).is_err());
    }

    #[test]
    fn bayesian_mask_shared_over_time() {
        let x = Tensor::filled(&[4, 5, 6], 1.0);
        let y = dropout(&x, 0.5, DropoutMode::Bayesian, 3, Phase::Train).unwrap();
        for b in 0..4 {
            for t in 1..5 {
                let off = |t: usize| (b * 5 + t) * 6;
                assert_eq!(y.data()[off(0)..off(0) + 6], y.data()[off(t)..off(t) + 6]);
            }
        }
        let z = dropout(&x, 0.5, DropoutMode::Standard, 3, Phase::Train).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    fn tiny_setup(examples: usize) -> (Dataset, VqaNet) {
        let data = generate(&GenConfig {
            examples,
            ..GenConfig::default()
        })
        .unwrap();
        let cfg = NetConfig::toy(&data, Variant::B, 2, 16);
        let net = VqaNet::initialized(cfg, 0.08, 5).unwrap();
        (data, net)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (data, mut net) = tiny_setup(30);
        let before = net.store.clone();
        let cfg = TrainConfig {
            iterations: 3,
            batch_size: 4,
            learning_rate: 0.0,
            eval_interval: 3,
            ..TrainConfig::default()
        };
        train(&mut net, &data, &cfg).unwrap();
        assert_eq!(net.store, before);
    }

    #[test]
    fn frozen_cnn_untouched_and_runs_repeat() {
        let (data, net0) = tiny_setup(30);
        let cfg = TrainConfig {
            iterations: 6,
            batch_size: 4,
            learning_rate: 1e-2,
            dropout: 0.3,
            eval_interval: 3,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (net0.clone(), net0.clone());
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, net0.store);
        for id in net0.cnn.params() {
            assert_eq!(a.store.get(id), net0.store.get(id));
        }
        assert_eq!(ra.curve.len(), 2);
    }

    #[test]
    fn unfrozen_cnn_moves() {
        let (data, net0) = tiny_setup(12);
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 2,
            learning_rate: 1e-2,
            freeze_cnn: false,
            eval_interval: 2,
            ..TrainConfig::default()
        };
        let mut a = net0.clone();
        train(&mut a, &data, &cfg).unwrap();
        let id = net0.cnn.params()[0];
        assert_ne!(a.store.get(id), net0.store.get(id));
    }

    #[test]
    fn huge_learning_rate_reports_iteration() {
        let (data, mut net) = tiny_setup(30);
        for id in net.store.ids().collect::<Vec<_>>() {
            let s = net.store.get(id).shape().to_vec();
            net.store.set(id, Tensor::filled(&s, 1e300));
        }
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        match train(&mut net, &data, &cfg) {
            Err(Error::Numerical { iteration, .. }) => assert_eq!(iteration, 1),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn attributes_count_objects() {
        use crate::data::Object;
        let scene = Scene {
            grid: 4,
            objects: vec![
                Object {
                    shape: ShapeKind::Circle,
                    color: Color::Red,
                    row: 0,
                    col: 0,
                },
                Object {
                    shape: ShapeKind::Circle,
                    color: Color::Blue,
                    row: 1,
                    col: 0,
                },
            ],
        };
        let a = scene_attributes(&scene);
        assert_eq!(a.len(), 27);
        assert_eq!(a.iter().sum::<f64>(), 6.0);
        assert_eq!(a[1], 1.0); // red circle
        assert_eq!(a[18], 1.0); // red
        assert_eq!(a[25], 2.0); // circles
    }

    #[test]
    fn pretraining_touches_only_the_cnn() {
        let (data, net0) = tiny_setup(20);
        let mut net = net0.clone();
        let cfg = PretrainConfig {
            iterations: 3,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let losses = pretrain_cnn(&mut net, &data, &cfg).unwrap();
        assert_eq!(losses.len(), 3);
        for id in net.store.ids() {
            assert_eq!(
                net.store.get(id) != net0.store.get(id),
                net.is_cnn_param(id),
                "{}",
                net.store.name(id)
            );
        }
    }

    #[test]
    fn metrics_csv_header() {
        let s = metrics_csv(&[MetricRow {
            iteration: 10,
            train_loss: 1.5,
            val_overall: 0.5,
            val_yn: 1.0,
            val_num: 0.25,
            val_other: 0.0,
        }]);
        assert_eq!(
            s,
            "iteration,train_loss,val_overall,val_yn,val_num,val_other\n10,1.5,0.5,1,0.25,0\n"
        );
    }
}
