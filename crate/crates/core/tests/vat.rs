use amt_core::model::{stack, ModelOutput, Transcriber, TranscriberConfig, TranscriberParams};
use amt_core::nn::Graph;
use amt_core::vat::{
    bce_divergence, compute_adversarial_perturbation, lds, lds_var, reference_heads, vat_gradient, VatConfig,
    BCE_DELTA,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini(two_channel: bool) -> Transcriber {
    Transcriber::new(TranscriberConfig {
        depth: 1,
        base_channels: 4,
        attention_window: 5,
        two_channel,
        n_mels: 16,
        n_pitches: 88,
    })
    .unwrap()
}

fn spec(t: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((t, 16), |_| rng.gen_range(0.0..1.0))
}

fn output(post: Array2<f64>, onset: Option<Array2<f64>>) -> ModelOutput {
    ModelOutput {
        frame_features: post.clone(),
        posteriorgram: post,
        onset,
    }
}

fn entropy(p: &Array2<f64>) -> f64 {
    p.iter()
        .map(|&p| {
            let p = p.clamp(BCE_DELTA, 1.0 - BCE_DELTA);
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / p.len() as f64
}

#[test]
fn half_probabilities_give_ln2_per_term() {
    let half = Array2::from_elem((4, 88), 0.5);
    let o = output(half.clone(), Some(half));
    let ln2 = std::f64::consts::LN_2;
    assert!((bce_divergence(&o, &o, false).unwrap() - ln2).abs() < 1e-12);
    assert!((bce_divergence(&o, &o, true).unwrap() - 2.0 * ln2).abs() < 1e-12);
}

#[test]
fn confident_self_divergence_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = Array2::from_shape_fn((5, 88), |_| if rng.gen_bool(0.5) { BCE_DELTA } else { 1.0 - BCE_DELTA });
    let o = output(p, None);
    let d = bce_divergence(&o, &o, false).unwrap();
    assert!(d >= 0.0 && d <= 2.0 * BCE_DELTA * (-BCE_DELTA.ln() + 1.0), "{d}");
}

#[test]
fn two_by_two_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p: Array2<f64> = Array2::from_shape_fn((2, 2), |_| rng.gen_range(0.01..0.99));
    let q: Array2<f64> = Array2::from_shape_fn((2, 2), |_| rng.gen_range(0.01..0.99));
    let mut expected = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let (a, b) = (p[[i, j]], q[[i, j]]);
            expected += -(a * b.ln() + (1.0 - a) * (1.0 - b).ln());
        }
    }
    expected /= 4.0;
    let got = bce_divergence(&output(p, None), &output(q, None), false).unwrap();
    assert!((got - expected).abs() < 1e-10);
}

#[test]
fn divergence_shape_mismatch_is_an_error() {
    let a = output(Array2::from_elem((2, 88), 0.5), None);
    let b = output(Array2::from_elem((3, 88), 0.5), None);
    assert!(bce_divergence(&a, &b, false).is_err());
    assert!(bce_divergence(&a, &a, true).is_err());
}

#[test]
fn zero_epsilon_gives_zero_perturbation() {
    let model = mini(true);
    let cfg = VatConfig {
        epsilon: 0.0,
        ..VatConfig::default()
    };
    let r = compute_adversarial_perturbation(&model, &model.init_params(0), &spec(8, 0), &cfg, 0).unwrap();
    assert!(r.values.iter().all(|&v| v == 0.0));
}

#[test]
fn rows_have_norm_epsilon() {
    let model = mini(true);
    for (seed, eps) in [(0, 1.0), (1, 1.5), (2, 2.0)] {
        let cfg = VatConfig {
            epsilon: eps,
            power_iterations: 2,
            include_onset: seed % 2 == 0,
            ..VatConfig::default()
        };
        let r = compute_adversarial_perturbation(&model, &model.init_params(seed), &spec(12, seed), &cfg, seed).unwrap();
        assert_eq!(r.values.dim(), (12, 16));
        assert_eq!(r.degenerate_rows, 0);
        for row in r.values.rows() {
            let norm = row.dot(&row).sqrt();
            assert!((norm - eps).abs() / eps < 1e-5, "row norm {norm}");
        }
    }
}

#[test]
fn vanishing_gradient_yields_zero_rows() {
    let model = mini(true);
    let mut params = model.init_params(0);
    for v in params.0.values_mut() {
        v.fill(0.0);
    }
    let r = compute_adversarial_perturbation(&model, &params, &spec(8, 1), &VatConfig::default(), 0).unwrap();
    assert_eq!(r.degenerate_rows, 8);
    assert!(r.values.iter().all(|&v| v == 0.0));
}

#[test]
fn zero_epsilon_lds_is_posterior_entropy() {
    let model = mini(true);
    let cfg = VatConfig {
        epsilon: 0.0,
        ..VatConfig::default()
    };
    for seed in 0..3 {
        let params = model.init_params(seed);
        let x = spec(9, seed + 10);
        let value = lds(&model, &params, &[&x], &cfg, seed).unwrap();
        let post = model.transcribe(&params, &x).unwrap().posteriorgram;
        assert!((value - entropy(&post)).abs() < 1e-6);
    }
}

#[test]
fn saturated_posteriorgram_has_near_zero_lds() {
    let model = mini(false);
    let mut params: TranscriberParams = model.init_params(0);
    // A large positive output bias saturates every sigmoid.
    let names = params.0.names().to_vec();
    let bias = names.iter().position(|n| n == "attention.value.bias").unwrap();
    params.0.values_mut()[bias].fill(60.0);
    let w = names.iter().position(|n| n == "attention.value.weight").unwrap();
    params.0.values_mut()[w].fill(0.0);
    let cfg = VatConfig {
        epsilon: 0.0,
        ..VatConfig::default()
    };
    let value = lds(&model, &params, &[&spec(8, 2)], &cfg, 0).unwrap();
    assert!(value < 1e-5, "{value}");
}

#[test]
fn duplicated_batch_leaves_lds_unchanged() {
    let model = mini(true);
    let params = model.init_params(4);
    let x = spec(10, 5);
    let cfg = VatConfig {
        epsilon: 1.5,
        include_onset: true,
        ..VatConfig::default()
    };
    let single = lds(&model, &params, &[&x], &cfg, 3).unwrap();
    let double = lds(&model, &params, &[&x, &x], &cfg, 3).unwrap();
    assert!((single - double).abs() < 1e-6, "{single} vs {double}");
}

#[test]
fn lds_is_nonnegative_and_onset_term_adds() {
    let model = mini(true);
    for seed in 0..4 {
        let params = model.init_params(seed);
        let x = spec(8, seed);
        let post_only = lds(&model, &params, &[&x], &VatConfig::default(), seed).unwrap();
        let both = lds(
            &model,
            &params,
            &[&x],
            &VatConfig {
                include_onset: true,
                ..VatConfig::default()
            },
            seed,
        )
        .unwrap();
        assert!(post_only >= 0.0);
        assert!(both >= post_only - 1e-9);
    }
}

#[test]
fn lds_rejects_empty_batch_and_bad_config() {
    let model = mini(true);
    let params = model.init_params(0);
    assert!(lds(&model, &params, &[], &VatConfig::default(), 0).is_err());
    let bad = VatConfig {
        power_iterations: 0,
        ..VatConfig::default()
    };
    assert!(lds(&model, &params, &[&spec(8, 0)], &bad, 0).is_err());
}

#[test]
fn parameter_gradient_flows_only_through_the_perturbed_branch() {
    let model = mini(true);
    let params = model.init_params(6);
    let x = stack(&[&spec(8, 6)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = ndarray::ArrayD::from_shape_fn(x.raw_dim(), |_| rng.gen_range(-0.3..0.3));

    let reference = {
        let g = Graph::new();
        let p = params.0.bind(&g, false);
        reference_heads(&model.forward(&p, g.constant(x.clone())), true).unwrap()
    };

    // Live perturbed branch: θ receives gradient.
    let g = Graph::new();
    let p = params.0.bind(&g, true);
    let value = lds_var(&model, &p, &x, &reference, &r, true);
    let mut grads = g.backward(value);
    assert!(params.0.collect_grads(&mut grads, &p).sq_norm() > 0.0);

    // Same computation with the perturbed branch cut: nothing reaches θ,
    // since the reference is a detached constant.
    let g = Graph::new();
    let p = params.0.bind(&g, false);
    let value = lds_var(&model, &p, &x, &reference, &r, true);
    assert!(!value.requires_grad());
}

#[test]
fn vat_gradient_matches_finite_differences() {
    let model = mini(true);
    let params = model.init_params(12);
    let x = spec(8, 13);
    let xs = stack(&[&x]).unwrap();
    let reference_out = model.transcribe(&params, &x).unwrap();
    let reference = {
        let g = Graph::new();
        let p = params.0.bind(&g, false);
        reference_heads(&model.forward(&p, g.constant(xs.clone())), true).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let r = ndarray::ArrayD::from_shape_fn(xs.raw_dim(), |_| rng.gen_range(-0.2..0.2));
    let grad = vat_gradient(&model, &params.0, &xs, &reference, &r, true);
    let divergence = |r: &ndarray::ArrayD<f64>| {
        let shifted = &x + &r.view().into_dimensionality::<ndarray::Ix3>().unwrap().index_axis(ndarray::Axis(0), 0);
        bce_divergence(&reference_out, &model.transcribe(&params, &shifted).unwrap(), true).unwrap()
    };
    let h = 1e-3;
    for _ in 0..10 {
        let idx = ndarray::IxDyn(&[0, rng.gen_range(0..8), rng.gen_range(0..16)]);
        let mut plus = r.clone();
        plus[&idx] += h;
        let mut minus = r.clone();
        minus[&idx] -= h;
        let numeric = (divergence(&plus) - divergence(&minus)) / (2.0 * h);
        let analytic = grad[&idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-9);
        assert!(rel < 1e-3, "{idx:?}: {analytic} vs {numeric}");
    }
}
