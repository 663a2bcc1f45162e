//! Central finite-difference checks of every differentiable path.
//!
//! Each check compares the tape gradient `a` with `n = (f(x+h) − f(x−h)) / 2h`
//! entry by entry and reports `max |a − n| / max(|a|, |n|, FLOOR)` per input
//! tensor.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OpKind, Tape, Var};
use crate::encoders::{CnnConfig, GruConfig, GruMasks, QuestionBatch};
use crate::error::Result;
use crate::model::{MrnConfig, Variant};
use crate::net::{NetConfig, VqaNet};
use crate::params::Bound;
use crate::tensor::Tensor;
use crate::visualization::{attention_effect_loss, attention_loss_against, block_residual};

/// Magnitude below which errors are measured absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries checked per tensor; larger tensors are sampled.
    pub max_entries: usize,
    pub seed: u64,
    /// Corrupts the backward rule of one op on the analytic tape.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: 1024,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    /// Input tensor (parameter name for model suites).
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<Check>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {:<12} {:<28} entries={:<4} max_rel_err={:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.entries,
                c.max_rel_error
            );
        }
        let _ = writeln!(
            s,
            "{} of {} checks passed (tolerance {:e})",
            self.checks.len() - self.failures().count(),
            self.checks.len(),
            self.tolerance
        );
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Loss<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Checks `loss` with respect to every tensor in `inputs`.
pub fn check_function(
    suite: &str,
    inputs: &[(String, Tensor)],
    loss: &Loss<'_>,
    cfg: &GradcheckConfig,
) -> Result<Vec<Check>> {
    let mut tape = Tape::new();
    if let Some(k) = cfg.fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = loss(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut checks = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[k]);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let idx: Vec<usize> = if t.len() <= cfg.max_entries {
            (0..t.len()).collect()
        } else {
            let mut v = sample(&mut rng, t.len(), cfg.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for &i in &idx {
            let x = t.data()[i];
            values[k].data_mut()[i] = x + cfg.step;
            let fp = eval(&values)?;
            values[k].data_mut()[i] = x - cfg.step;
            let fm = eval(&values)?;
            values[k].data_mut()[i] = x;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let e = relative_error(analytic.data()[i], numeric);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        checks.push(Check {
            suite: suite.to_string(),
            name: name.clone(),
            entries: idx.len(),
            max_rel_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(checks)
}

fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

fn named(pairs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let m = tape.mul(out, rv)?;
    Ok(tape.sum(m))
}

/// One check per primitive operation.
pub fn op_suite(cfg: &GradcheckConfig) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b5);
    let mut out = Vec::new();
    let r34 = random(&mut rng, &[3, 4], 1.0);
    let mut run = |suite: &str, inputs: Vec<(&str, Tensor)>, f: &Loss<'_>| -> Result<()> {
        out.extend(check_function(suite, &named(inputs), f, cfg)?);
        Ok(())
    };

    let a = random(&mut rng, &[3, 5], 1.0);
    let b = random(&mut rng, &[5, 4], 1.0);
    run("matmul", vec![("a", a), ("b", b)], &|t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, &r34)
    })?;
    let r34_ref = &r34;
    for (suite, kind) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let x = random(&mut rng, &[3, 4], 1.0);
        let y = random(&mut rng, &[3, 4], 1.0);
        let s = random(&mut rng, &[1], 1.0);
        let f = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let op = |t: &mut Tape, a, b| match kind {
                0 => t.add(a, b),
                1 => t.sub(a, b),
                _ => t.mul(a, b),
            };
            let o = op(t, v[0], v[1])?;
            let o = op(t, o, v[2])?;
            let o = op(t, v[2], o)?;
            project(t, o, r34_ref)
        };
        run(suite, vec![("x", x), ("y", y), ("scalar", s)], &f)?;
    }
    let x = random(&mut rng, &[3, 4], 1.0);
    let bias = random(&mut rng, &[4], 1.0);
    run("add_bias", vec![("x", x), ("bias", bias)], &|t, v| {
        let o = t.add_bias(v[0], v[1])?;
        project(t, o, &r34)
    })?;
    let x = random(&mut rng, &[3, 4], 1.0);
    run("affine", vec![("x", x)], &|t, v| {
        let o = t.scale(v[0], -1.7);
        let o = t.add_scalar(o, 0.3);
        let o = t.one_minus(o);
        project(t, o, &r34)
    })?;
    let x = random(&mut rng, &[3, 4], 2.0);
    run("tanh", vec![("x", x)], &|t, v| {
        let o = t.tanh(v[0]);
        project(t, o, &r34)
    })?;
    let x = random(&mut rng, &[3, 4], 3.0);
    run("sigmoid", vec![("x", x)], &|t, v| {
        let o = t.sigmoid(v[0]);
        project(t, o, &r34)
    })?;
    let x = random(&mut rng, &[3, 4], 1.0);
    run("sum_mean", vec![("x", x)], &|t, v| {
        let sq = t.mul(v[0], v[0])?;
        let s = t.sum(sq);
        let m = t.mean(v[0]);
        let m = t.scale(m, 3.0);
        t.mul(s, m)
    })?;
    let x = random(&mut rng, &[4, 5], 2.0);
    run("softmax_ce", vec![("logits", x)], &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 3, 3, 4])
    })?;
    let x = random(&mut rng, &[4, 4], 1.0);
    let r54 = random(&mut rng, &[5, 4], 1.0);
    run("gather_rows", vec![("src", x)], &|t, v| {
        let o = t.gather_rows(v[0], &[2, 0, 2, 3, 2])?;
        project(t, o, &r54)
    })?;
    let x = random(&mut rng, &[2, 4], 1.0);
    let y = random(&mut rng, &[1, 4], 1.0);
    let r34b = r34.clone();
    run("concat_rows", vec![("top", x), ("bottom", y)], &|t, v| {
        let o = t.concat_rows(v[0], v[1])?;
        project(t, o, &r34b)
    })?;
    let x = random(&mut rng, &[2, 6], 1.0);
    run("reshape", vec![("x", x)], &|t, v| {
        let o = t.reshape(v[0], &[3, 4])?;
        project(t, o, &r34)
    })?;
    let x = random(&mut rng, &[2, 2, 5, 6], 1.0);
    let w = random(&mut rng, &[3, 2, 3, 3], 1.0);
    let bias = random(&mut rng, &[3], 1.0);
    let rc = random(&mut rng, &[2, 3, 5, 6], 1.0);
    run("conv2d", vec![("input", x), ("weight", w), ("bias", bias)], &|t, v| {
        let o = t.conv2d(v[0], v[1], v[2])?;
        project(t, o, &rc)
    })?;
    let x = random(&mut rng, &[2, 3, 4, 6], 1.0);
    let rp = random(&mut rng, &[2, 3, 2, 3], 1.0);
    run("avg_pool2", vec![("x", x)], &|t, v| {
        let o = t.avg_pool2(v[0])?;
        project(t, o, &rp)
    })?;
    Ok(out)
}

/// Small dimensions that still exercise every layer of the full network.
pub fn small_net_config(variant: Variant, blocks: usize) -> NetConfig {
    let gru = GruConfig {
        vocab_size: 9,
        embed_dim: 5,
        hidden_dim: 6,
    };
    let cnn = CnnConfig {
        channels: 3,
        height: 8,
        width: 8,
        conv1: 2,
        conv2: 3,
        kernel: 3,
        out_dim: 7,
    };
    let mrn = MrnConfig {
        variant,
        blocks,
        question_dim: 6,
        visual_dim: 7,
        joint_dim: 5,
        answers: 6,
        bias: true,
    };
    NetConfig { gru, cnn, mrn }
}

struct Fixture {
    net: VqaNet,
    batch: QuestionBatch,
    images: Tensor,
    targets: Vec<usize>,
}

fn fixture(variant: Variant, blocks: usize, seed: u64) -> Result<Fixture> {
    let net = VqaNet::initialized(small_net_config(variant, blocks), 0.5, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf17);
    let batch = QuestionBatch::from_sequences(&[vec![3, 1, 4, 1], vec![5], vec![2, 6, 5]])?;
    let images = Tensor::new(vec![3, 3, 8, 8], (0..3 * 3 * 64).map(|_| rng.gen::<f64>()).collect())?;
    Ok(Fixture {
        net,
        batch,
        images,
        targets: vec![1, 4, 0],
    })
}

/// Answer loss of the whole network, one check per named parameter plus the
/// input image.
fn network_checks(suite: &str, fx: &Fixture, trimzero: bool, cfg: &GradcheckConfig) -> Result<Vec<Check>> {
    let net = &fx.net;
    let mut inputs: Vec<(String, Tensor)> = net
        .store
        .ids()
        .map(|id| (net.store.name(id).to_string(), net.store.get(id).clone()))
        .collect();
    inputs.push(("image".to_string(), fx.images.clone()));
    let n = net.store.len();
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let p = Bound::from_vars(v[..n].to_vec());
        let feats = net.encode_images(t, &p, v[n])?;
        let q = net.encode_question(t, &p, &fx.batch, &GruMasks::None, trimzero)?;
        let out = net.mrn.forward(t, &p, q, feats)?;
        t.softmax_cross_entropy(out.logits, &fx.targets)
    };
    check_function(suite, &inputs, &f, cfg)
}

/// The full L=3 reference network (variant b), TrimZero question path.
pub fn model_suite(cfg: &GradcheckConfig) -> Result<Vec<Check>> {
    network_checks("model-b-L3", &fixture(Variant::B, 3, cfg.seed)?, true, cfg)
}

/// Remaining variants, the padded question path and a dropout-masked
/// question path.
pub fn variant_suite(cfg: &GradcheckConfig) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for v in [Variant::A, Variant::C, Variant::D, Variant::E, Variant::Mn] {
        let fx = fixture(v, 3, cfg.seed + 1)?;
        out.extend(network_checks(&format!("model-{v}-L3"), &fx, false, cfg)?);
    }
    let fx = fixture(Variant::B, 2, cfg.seed + 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0);
    let masks = GruMasks::PerSequence {
        input: random(&mut rng, &[3, 5], 2.0),
        hidden: random(&mut rng, &[3, 6], 2.0),
    };
    let net = &fx.net;
    let inputs: Vec<(String, Tensor)> = net
        .gru
        .recurrent_params()
        .iter()
        .chain(std::iter::once(&net.gru.embedding))
        .map(|&id| (net.store.name(id).to_string(), net.store.get(id).clone()))
        .collect();
    let ids: Vec<_> = net
        .gru
        .recurrent_params()
        .into_iter()
        .chain([net.gru.embedding])
        .collect();
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let all = net.store.bind_frozen(t);
        let mut vars: Vec<Var> = net.store.ids().map(|id| all[id]).collect();
        for (k, id) in ids.iter().enumerate() {
            vars[id.index()] = v[k];
        }
        let p = Bound::from_vars(vars);
        let q = net.gru.forward_trimzero(t, &p, &fx.batch, &masks)?.0;
        let r = random(&mut ChaCha8Rng::seed_from_u64(3), &[3, 6], 1.0);
        project(t, q, &r)
    };
    out.extend(check_function("gru-dropout", &inputs, &f, cfg)?);
    Ok(out)
}

/// Pixel gradient of every block's attention effect, `F` held constant.
pub fn attention_suite(cfg: &GradcheckConfig) -> Result<Vec<Check>> {
    let fx = fixture(Variant::B, 3, cfg.seed + 3)?;
    let net = &fx.net;
    let image = Tensor::new(vec![1, 3, 8, 8], fx.images.data()[..3 * 64].to_vec())?;
    let mut tape = Tape::new();
    let p = net.store.bind_frozen(&mut tape);
    let img = tape.constant(image.clone());
    let v = net.encode_images(&mut tape, &p, img)?;
    let single = QuestionBatch::from_sequences(&[fx.batch.row(0)[..fx.batch.lengths()[0]].to_vec()])?;
    let q = net.encode_question(&mut tape, &p, &single, &GruMasks::None, false)?;
    let hidden = net.mrn.forward(&mut tape, &p, q, v)?.hidden;
    let mut out = Vec::new();
    for (l, block) in net.mrn.blocks.iter().enumerate() {
        let q_in = tape.value(hidden[l]).clone();
        let qv = tape.constant(q_in.clone());
        let f0 = block_residual(&mut tape, &p, block, qv, v)?;
        // Analytic side detaches F on its own tape; the numeric side
        // differentiates against the residual recorded at the base image.
        let analytic = |t: &mut Tape, vs: &[Var]| -> Result<Var> {
            let p = net.store.bind_frozen(t);
            let feats = net.encode_images(t, &p, vs[0])?;
            let q = t.constant(q_in.clone());
            if t.requires_grad(vs[0]) {
                attention_effect_loss(t, &p, block, q, feats)
            } else {
                attention_loss_against(t, &p, block, q, feats, &f0)
            }
        };
        out.extend(check_function(
            &format!("attention-{}", l + 1),
            &[("image".to_string(), image.clone())],
            &analytic,
            cfg,
        )?);
    }
    Ok(out)
}

pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut checks = op_suite(cfg)?;
    checks.extend(model_suite(cfg)?);
    checks.extend(variant_suite(cfg)?);
    checks.extend(attention_suite(cfg)?);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        checks,
    })
}
