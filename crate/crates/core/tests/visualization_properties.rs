mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{directional_derivative, dot};
use mrn::autodiff::Tape;
use mrn::data::{Dataset, Split};
use mrn::experiment::{fit, RunSettings};
use mrn::model::Variant;
use mrn::net::{NetConfig, VqaNet};
use mrn::training::{PretrainConfig, TrainConfig};
use mrn::visualization::{
    attention_gradient, attention_loss_against, attention_value_and_gradient, block_residual, hidden_states,
    render_heatmap,
};
use mrn::Tensor;

fn trained(variant: Variant, iterations: usize) -> (Dataset, VqaNet) {
    let data = common::small_dataset(150, 31);
    let s = RunSettings {
        train: TrainConfig {
            iterations,
            batch_size: 16,
            learning_rate: 3e-3,
            eval_interval: iterations.max(1),
            ..TrainConfig::default()
        },
        pretrain: PretrainConfig {
            iterations: 10,
            batch_size: 16,
            ..PretrainConfig::default()
        },
    };
    let (net, _) = fit(&data, NetConfig::toy(&data, variant, 3, 12), &s).unwrap();
    (data, net)
}

fn random_like(rng: &mut impl Rng, t: &Tensor) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Runs `f` on a frozen tape holding the visual features of `image`.
fn with_image<T>(
    net: &VqaNet,
    image: &Tensor,
    f: impl FnOnce(&mut Tape, &mrn::params::Bound, mrn::autodiff::Var) -> T,
) -> T {
    let mut tape = Tape::new();
    let p = net.store.bind_frozen(&mut tape);
    let s = image.shape();
    let img = tape.constant(image.clone().reshaped(&[1, s[0], s[1], s[2]]).unwrap());
    let v = net.encode_images(&mut tape, &p, img).unwrap();
    f(&mut tape, &p, v)
}

#[test]
fn gradient_matches_directional_derivatives() {
    for variant in [Variant::B, Variant::E] {
        let (data, net) = trained(variant, 20);
        let i = data.indices(Split::Test)[1];
        let (image, question) = (data.image(i), data.examples[i].question_ids.clone());
        let hidden = hidden_states(&net, &image, &question).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for block in 1..=3 {
            let b = &net.mrn.blocks[block - 1];
            let q_in = &hidden[block - 1];
            let f0 = with_image(&net, &image, |t, p, v| {
                let q = t.constant(q_in.clone());
                block_residual(t, p, b, q, v).unwrap()
            });
            let g = attention_gradient(&net, &image, &question, block).unwrap();
            for _ in 0..20 {
                let d = random_like(&mut rng, &image);
                let numeric = directional_derivative(
                    |x| {
                        with_image(&net, x, |t, p, v| {
                            let q = t.constant(q_in.clone());
                            let l = attention_loss_against(t, p, b, q, v, &f0).unwrap();
                            t.value(l).data()[0]
                        })
                    },
                    &image,
                    &d,
                    1e-5,
                );
                let analytic = dot(&g, &d);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "{variant} block {block}: {analytic} vs {numeric}");
            }
        }
    }
}

#[test]
fn single_pixel_perturbations_match() {
    let (data, net) = trained(Variant::C, 20);
    let i = data.indices(Split::Test)[3];
    let (image, question) = (data.image(i), data.examples[i].question_ids.clone());
    let hidden = hidden_states(&net, &image, &question).unwrap();
    let block = 2;
    let b = &net.mrn.blocks[block - 1];
    let q_in = &hidden[block - 1];
    let f0 = with_image(&net, &image, |t, p, v| {
        let q = t.constant(q_in.clone());
        block_residual(t, p, b, q, v).unwrap()
    });
    let g = attention_gradient(&net, &image, &question, block).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let k = rng.gen_range(0..image.len());
        let mut d = Tensor::zeros(image.shape());
        d.data_mut()[k] = 1.0;
        let numeric = directional_derivative(
            |x| {
                with_image(&net, x, |t, p, v| {
                    let q = t.constant(q_in.clone());
                    let l = attention_loss_against(t, p, b, q, v, &f0).unwrap();
                    t.value(l).data()[0]
                })
            },
            &image,
            &d,
            1e-4,
        );
        let analytic = g.data()[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-3, "pixel {k}: {analytic} vs {numeric}");
    }
}

#[test]
fn holding_f_constant_changes_the_gradient() {
    let (data, net) = trained(Variant::B, 20);
    let i = data.indices(Split::Test)[0];
    let (image, question) = (data.image(i), data.examples[i].question_ids.clone());
    let hidden = hidden_states(&net, &image, &question).unwrap();
    for block in 1..=3 {
        let (a, ga) = attention_value_and_gradient(&net, &image, &hidden[block - 1], block, true).unwrap();
        let (b, gb) = attention_value_and_gradient(&net, &image, &hidden[block - 1], block, false).unwrap();
        assert_eq!(a, b);
        assert!(ga.max_abs_diff(&gb) > 1e-8, "block {block}");
    }
}

#[test]
fn saturated_masks_give_zero_gradient() {
    let (data, mut net) = trained(Variant::B, 5);
    let blocks = net.mrn.blocks.clone();
    for b in &blocks {
        for id in b.mask_params() {
            let shape = net.store.get(id).shape().to_vec();
            let n = shape.iter().product();
            let fill = if net.store.name(id).ends_with(".b") { 1e3 } else { 0.0 };
            net.store.set(id, Tensor::new(shape, vec![fill; n]).unwrap());
        }
    }
    for &i in &data.indices(Split::Test)[..5] {
        let (image, question) = (data.image(i), &data.examples[i].question_ids);
        for block in 1..=3 {
            let g = attention_gradient(&net, &image, question, block).unwrap();
            assert!(g.data().iter().all(|&x| x == 0.0));
            let h = render_heatmap(&g, block).unwrap();
            assert_eq!(h.selected(), 0);
        }
    }
}

#[test]
fn blocks_attend_differently() {
    let (data, net) = trained(Variant::B, 60);
    let i = data.indices(Split::Test)[2];
    let (image, question) = (data.image(i), &data.examples[i].question_ids);
    let g: Vec<Tensor> = (1..=3)
        .map(|b| attention_gradient(&net, &image, question, b).unwrap())
        .collect();
    assert!(g[0].max_abs_diff(&g[1]) > 1e-9);
    assert!(g[1].max_abs_diff(&g[2]) > 1e-9);
    assert!(attention_gradient(&net, &image, question, 0).is_err());
    assert!(attention_gradient(&net, &image, question, 4).is_err());
}

proptest! {
    #[test]
    fn threshold_is_mean_plus_population_std(
        c in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        seed in any::<u64>(),
        ties in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c * h * w;
        // Integer-valued entries make exact ties with τ possible.
        let data: Vec<f64> = (0..n)
            .map(|_| if ties { rng.gen_range(-2i32..=2) as f64 } else { rng.gen_range(-1.0..1.0) })
            .collect();
        let raw = Tensor::new(vec![c, h, w], data.clone()).unwrap();
        let hm = render_heatmap(&raw, 1).unwrap();
        let plane = h * w;
        let sal: Vec<f64> = (0..plane).map(|k| (0..c).map(|ch| data[ch * plane + k].abs()).sum()).collect();
        let mean = sal.iter().sum::<f64>() / plane as f64;
        let std = (sal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / plane as f64).sqrt();
        prop_assert!((hm.threshold - (mean + std)).abs() <= 1e-12 * (1.0 + mean + std));
        for (k, &want) in sal.iter().enumerate() {
            let got = hm.saliency.data()[k];
            prop_assert!((got - want).abs() <= 1e-15);
            prop_assert_eq!(hm.mask[k], got > hm.threshold);
        }
        // Nothing exceeds τ when the saliency is constant.
        if sal.iter().all(|&s| s == sal[0]) {
            prop_assert_eq!(hm.selected(), 0);
        }
    }
}

#[test]
fn single_spike_is_exactly_selected() {
    let mut raw = Tensor::zeros(&[3, 4, 5]);
    raw.data_mut()[20 + 7] = -1.0;
    let h = render_heatmap(&raw, 1).unwrap();
    let sel: Vec<usize> = (0..20).filter(|&k| h.mask[k]).collect();
    assert_eq!(sel, vec![7]);
    // N = 20: mean 1/20, std √19/20.
    assert!((h.threshold - (1.0 + 19f64.sqrt()) / 20.0).abs() < 1e-15);
}

#[test]
fn value_on_threshold_is_not_selected() {
    let raw = Tensor::new(vec![1, 1, 4], vec![0.0, 0.0, 2.0, -2.0]).unwrap();
    let h = render_heatmap(&raw, 1).unwrap();
    assert_eq!(h.threshold, 2.0);
    assert_eq!(h.mask, vec![false; 4]);
}
