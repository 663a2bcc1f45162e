mod common;

use proptest::prelude::*;

use mrn::autodiff::Tape;
use mrn::data::{generate, Dataset, GenConfig, Split};
use mrn::encoders::GruMasks;
use mrn::experiment::{prepare, RunSettings};
use mrn::model::Variant;
use mrn::net::{NetConfig, VqaNet, DEFAULT_JOINT_DIM};
use mrn::params::ParamStore;
use mrn::training::{dropout, init_params, rmsprop_step, train, DropoutMode, Phase, PretrainConfig, TrainConfig};
use mrn::Tensor;

#[test]
fn init_draws_are_uniform_in_range() {
    let r = 0.08;
    let mut store = ParamStore::new();
    let id = store.add("w", &[400, 300]);
    store.add("b", &[7]);
    init_params(&mut store, r, 17).unwrap();
    let x = store.get(id).data();
    let n = x.len() as f64;
    assert!(n >= 1e5);
    let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(lo > -r && hi < r, "{lo} {hi}");
    assert!(lo < -0.99 * r && hi > 0.99 * r);
    let mean = x.iter().sum::<f64>() / n;
    // Var(U(−r, r)) = r²/3.
    let sigma = r / 3f64.sqrt() / n.sqrt();
    assert!(mean.abs() < 3.0 * sigma, "mean {mean}, 3σ {}", 3.0 * sigma);
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!((var / (r * r / 3.0) - 1.0).abs() < 0.02);

    let mut again = ParamStore::new();
    again.add("w", &[400, 300]);
    again.add("b", &[7]);
    init_params(&mut again, r, 17).unwrap();
    assert_eq!(store, again);
    assert!(init_params(&mut again, 0.0, 17).is_err());
}

proptest! {
    #[test]
    fn rmsprop_matches_scalar_recurrence(
        steps in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8),
        lr in 1e-4f64..0.1,
        decay in 0.0f64..0.999,
    ) {
        let eps = 1e-8;
        let mut p = vec![0.5, -0.25, 1.0, 0.0];
        let mut s = vec![0.0; 4];
        let mut op = p.clone();
        let mut os = s.clone();
        for g in &steps {
            rmsprop_step(&mut p, g, &mut s, lr, decay, eps);
            for k in 0..4 {
                os[k] = decay * os[k] + (1.0 - decay) * g[k] * g[k];
                op[k] -= lr * g[k] / (os[k].sqrt() + eps);
            }
        }
        for k in 0..4 {
            prop_assert!((p[k] - op[k]).abs() <= 1e-15 * (1.0 + op[k].abs()));
            prop_assert!((s[k] - os[k]).abs() <= 1e-15 * (1.0 + os[k]));
            prop_assert!(s[k] >= 0.0);
        }
    }
}

#[test]
fn dropout_is_unbiased_in_expectation() {
    let x = Tensor::new(vec![2, 3, 4], (0..24).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
    for mode in [DropoutMode::Standard, DropoutMode::Bayesian] {
        let mut sum = vec![0.0; x.len()];
        let draws = 10_000;
        for seed in 0..draws {
            let y = dropout(&x, 0.3, mode, seed, Phase::Train).unwrap();
            for (s, v) in sum.iter_mut().zip(y.data()) {
                *s += v;
            }
        }
        for (s, v) in sum.iter().zip(x.data()) {
            let mean = s / draws as f64;
            assert!((mean / v - 1.0).abs() < 0.02, "{mode}: {mean} vs {v}");
        }
        assert_eq!(dropout(&x, 0.3, mode, 5, Phase::Eval).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, mode, 5, Phase::Train).unwrap(), x);
    }
}

fn overfit_set() -> Dataset {
    generate(&GenConfig {
        examples: 50,
        seed: 21,
        train_ratio: 1.0,
        val_ratio: 0.0,
        ..GenConfig::default()
    })
    .unwrap()
}

#[test]
fn overfits_fifty_examples() {
    let data = overfit_set();
    let s = RunSettings {
        train: TrainConfig {
            iterations: 800,
            batch_size: 25,
            learning_rate: 3e-3,
            eval_interval: 800,
            ..TrainConfig::default()
        },
        pretrain: PretrainConfig {
            iterations: 0,
            ..PretrainConfig::default()
        },
    };
    let (net, report) = mrn::experiment::fit(&data, NetConfig::toy(&data, Variant::B, 3, 64), &s).unwrap();
    let idx = data.indices(Split::Train);
    assert_eq!(idx.len(), 50);
    let scores = mrn::evaluation::Predictor::scores(&net, &data, &idx).unwrap();
    let wrong: Vec<usize> = idx
        .iter()
        .zip(&scores)
        .filter(|(&i, s)| {
            let best = (0..s.len()).fold(0, |b, a| if s[a] > s[b] { a } else { b });
            best != data.examples[i].answer_id
        })
        .map(|(&i, _)| i)
        .collect();
    assert!(
        wrong.is_empty(),
        "misfit {wrong:?}, final loss {}",
        report.losses.last().unwrap()
    );
}

fn batch_loss(net: &VqaNet, data: &Dataset, idx: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let p = net.store.bind_frozen(&mut tape);
    let img = tape.constant(data.images(idx));
    let v = net.encode_images(&mut tape, &p, img).unwrap();
    let batch = VqaNet::question_batch(data, idx).unwrap();
    let q = net
        .encode_question(&mut tape, &p, &batch, &GruMasks::None, true)
        .unwrap();
    let out = net.mrn.forward(&mut tape, &p, q, v).unwrap();
    let targets: Vec<usize> = idx.iter().map(|&i| data.examples[i].answer_id).collect();
    let l = tape.softmax_cross_entropy(out.logits, &targets).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn default_config_loss_falls_over_first_hundred_iterations() {
    let data = generate(&GenConfig::default()).unwrap();
    let s = RunSettings::default();
    let mut net = prepare(&data, NetConfig::toy(&data, Variant::B, 3, DEFAULT_JOINT_DIM), &s).unwrap();
    let fixed: Vec<usize> = data.indices(Split::Train)[..s.train.batch_size].to_vec();
    let before = batch_loss(&net, &data, &fixed);
    let cfg = TrainConfig {
        iterations: 100,
        eval_interval: 100,
        ..s.train
    };
    let report = train(&mut net, &data, &cfg).unwrap();
    let after = batch_loss(&net, &data, &fixed);
    assert!(after < before, "{after} >= {before}");
    let head: f64 = report.losses[..10].iter().sum();
    let tail: f64 = report.losses[90..].iter().sum();
    assert!(tail < head);
}

#[test]
fn same_seed_same_curve_and_parameters() {
    let data = overfit_set();
    let s = RunSettings {
        train: TrainConfig {
            iterations: 20,
            batch_size: 8,
            eval_interval: 5,
            dropout: 0.3,
            dropout_mode: DropoutMode::Bayesian,
            ..TrainConfig::default()
        },
        pretrain: PretrainConfig {
            iterations: 5,
            batch_size: 8,
            ..PretrainConfig::default()
        },
    };
    let cfg = NetConfig::toy(&data, Variant::E, 2, 16);
    let (a, ra) = mrn::experiment::fit(&data, cfg, &s).unwrap();
    let (b, rb) = mrn::experiment::fit(&data, cfg, &s).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.store, b.store);
    let mut other = s;
    other.train.seed += 1;
    let (_, rc) = mrn::experiment::fit(&data, cfg, &other).unwrap();
    assert_ne!(ra.losses, rc.losses);
}
