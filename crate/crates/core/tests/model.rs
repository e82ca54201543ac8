use amt_core::model::{stack, Reconstructor, Transcriber, TranscriberConfig, TranscriberParams};
use amt_core::nn::{bce_mean, Graph, ParamSet, Tensor};
use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini() -> TranscriberConfig {
    TranscriberConfig {
        depth: 1,
        base_channels: 4,
        attention_window: 5,
        two_channel: true,
        n_mels: 16,
        n_pitches: 88,
    }
}

fn random_spec(t: usize, f: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((t, f), |_| rng.gen_range(0.0..1.0))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn full_size_shapes() {
    let model = Transcriber::new(TranscriberConfig {
        depth: 1,
        base_channels: 2,
        ..TranscriberConfig::default()
    })
    .unwrap();
    let params = model.init_params(0);
    let spec = random_spec(640, 229, 1);
    let out = model.transcribe(&params, &spec).unwrap();
    assert_eq!(out.posteriorgram.dim(), (640, 88));
    assert_eq!(out.frame_features.dim(), (640, 88));
    assert_eq!(out.onset.as_ref().unwrap().dim(), (640, 88));
    assert!(out.posteriorgram.iter().all(|&p| p > 0.0 && p < 1.0));

    let recon = Reconstructor::new(model.config()).unwrap();
    let rp = recon.init_params(0);
    let x = recon.reconstruct(&rp, &out.posteriorgram).unwrap();
    assert_eq!(x.dim(), (640, 229));
    assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn single_channel_has_no_onset() {
    let model = Transcriber::new(TranscriberConfig {
        two_channel: false,
        ..mini()
    })
    .unwrap();
    let out = model.transcribe(&model.init_params(3), &random_spec(12, 16, 2)).unwrap();
    assert!(out.onset.is_none());
    assert_eq!(out.posteriorgram.dim(), (12, 88));
}

#[test]
fn deterministic_given_seed() {
    let model = Transcriber::new(mini()).unwrap();
    let spec = random_spec(10, 16, 4);
    let a = model.transcribe(&model.init_params(7), &spec).unwrap();
    let b = model.transcribe(&model.init_params(7), &spec).unwrap();
    assert_eq!(a, b);
    let c = model.transcribe(&model.init_params(8), &spec).unwrap();
    assert_ne!(a.posteriorgram, c.posteriorgram);
}

#[test]
fn second_pass_is_the_same_function() {
    let model = Transcriber::new(mini()).unwrap();
    let params = model.init_params(1);
    let spec = random_spec(9, 16, 5);
    assert_eq!(
        model.transcribe(&params, &spec).unwrap(),
        model.second_pass(&params, &spec).unwrap()
    );
}

#[test]
fn rejects_bad_inputs() {
    let model = Transcriber::new(mini()).unwrap();
    let params = model.init_params(1);
    assert!(model.transcribe(&params, &random_spec(4, 16, 0)).is_err());
    assert!(model.transcribe(&params, &random_spec(8, 15, 0)).is_err());
    let mut bad = random_spec(8, 16, 0);
    bad[[3, 3]] = f64::NAN;
    assert!(model.transcribe(&params, &bad).is_err());

    let recon = Reconstructor::new(&mini()).unwrap();
    assert!(recon
        .reconstruct(&recon.init_params(0), &Array2::zeros((8, 87)))
        .is_err());

    assert!(Transcriber::new(TranscriberConfig {
        attention_window: 4,
        ..mini()
    })
    .is_err());
    assert!(Transcriber::new(TranscriberConfig { depth: 0, ..mini() }).is_err());
}

#[test]
fn receptive_field_matches_analytic_radius() {
    let config = TranscriberConfig {
        depth: 2,
        base_channels: 4,
        attention_window: 5,
        two_channel: true,
        n_mels: 32,
        n_pitches: 88,
    };
    let model = Transcriber::new(config).unwrap();
    // three convolutions per level on the deepest path plus the bottleneck
    let expected = 3 * 2 + 1 + 2;
    assert_eq!(model.receptive_radius(), expected);

    let params = model.init_params(11);
    let t = 48;
    let t0 = 24;
    let spec = random_spec(t, 32, 6);
    let base = model.transcribe(&params, &spec).unwrap().posteriorgram;
    let mut bumped = spec.clone();
    for f in 0..32 {
        bumped[[t0, f]] += 1.0;
    }
    let moved = model.transcribe(&params, &bumped).unwrap().posteriorgram;
    let changed: Vec<usize> = (0..t)
        .filter(|&r| base.row(r) != moved.row(r))
        .collect();
    let lo = *changed.first().unwrap();
    let hi = *changed.last().unwrap();
    assert_eq!(t0 - lo, expected, "left reach");
    assert_eq!(hi - t0, expected, "right reach");
}

/// Scalar loss used by the gradient checks: BCE of both probability heads
/// against fixed random targets.
fn loss_value(model: &Transcriber, params: &ParamSet, x: &Tensor, targets: &(Tensor, Tensor)) -> f64 {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let out = model.forward(&p, g.constant(x.clone()));
    bce_mean(&targets.0, out.post, 1e-7)
        .add(bce_mean(&targets.1, out.onset.unwrap(), 1e-7))
        .scalar()
}

#[test]
fn miniature_gradients_match_finite_differences() {
    let model = Transcriber::new(mini()).unwrap();
    let TranscriberParams(params) = model.init_params(21);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = stack(&[&random_spec(8, 16, 3)]).unwrap();
    let target = |rng: &mut ChaCha8Rng| Tensor::from_shape_fn(IxDyn(&[1, 8, 88]), |_| rng.gen_range(0.0..1.0));
    let targets = (target(&mut rng), target(&mut rng));

    let g = Graph::new();
    let p = params.bind(&g, true);
    let xv = g.leaf(x.clone());
    let out = model.forward(&p, xv);
    let loss = bce_mean(&targets.0, out.post, 1e-7).add(bce_mean(&targets.1, out.onset.unwrap(), 1e-7));
    let mut grads = g.backward(loss);
    let gx = grads.take_or_zeros(xv);
    let gp = params.collect_grads(&mut grads, &p);

    let h = 1e-3;
    for _ in 0..20 {
        let idx = rng.gen_range(0..params.numel());
        let v = params.get_flat(idx).unwrap();
        let mut plus = params.clone();
        plus.set_flat(idx, v + h);
        let mut minus = params.clone();
        minus.set_flat(idx, v - h);
        let numeric = (loss_value(&model, &plus, &x, &targets) - loss_value(&model, &minus, &x, &targets)) / (2.0 * h);
        let analytic = gp.get_flat(idx).unwrap();
        assert!(
            rel_err(analytic, numeric) < 1e-3,
            "param {idx} ({}): analytic {analytic} numeric {numeric}",
            params.names()[0]
        );
    }
    for _ in 0..20 {
        let idx = [0, rng.gen_range(0..8), rng.gen_range(0..16)];
        let mut plus = x.clone();
        plus[IxDyn(&idx)] += h;
        let mut minus = x.clone();
        minus[IxDyn(&idx)] -= h;
        let numeric = (loss_value(&model, &params, &plus, &targets) - loss_value(&model, &params, &minus, &targets)) / (2.0 * h);
        let analytic = gx[IxDyn(&idx)];
        assert!(rel_err(analytic, numeric) < 1e-3, "input {idx:?}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn reconstructor_input_gradient_matches_finite_differences() {
    let recon = Reconstructor::new(&mini()).unwrap();
    let params = recon.init_params(5);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let post = Array2::from_shape_fn((8, 88), |_| rng.gen_range(0.0..1.0));
    let x = stack(&[&post]).unwrap();
    let mean_out = |x: &Tensor| {
        let g = Graph::new();
        let p = params.0.bind(&g, false);
        recon.forward(&p, g.constant(x.clone())).mean().scalar()
    };

    let g = Graph::new();
    let p = params.0.bind(&g, false);
    let xv = g.leaf(x.clone());
    let mut grads = g.backward(recon.forward(&p, xv).mean());
    let gx = grads.take_or_zeros(xv);
    let h = 1e-3;
    for _ in 0..30 {
        let idx = [0, rng.gen_range(0..8), rng.gen_range(0..88)];
        let mut plus = x.clone();
        plus[IxDyn(&idx)] += h;
        let mut minus = x.clone();
        minus[IxDyn(&idx)] -= h;
        let numeric = (mean_out(&plus) - mean_out(&minus)) / (2.0 * h);
        assert!(rel_err(gx[IxDyn(&idx)], numeric) < 1e-3, "{idx:?}: {} vs {numeric}", gx[IxDyn(&idx)]);
    }
}

#[test]
fn second_pass_loss_is_sensitive_to_reconstructor_weights() {
    let config = mini();
    let model = Transcriber::new(config.clone()).unwrap();
    let recon = Reconstructor::new(&config).unwrap();
    let theta = model.init_params(2);
    let phi = recon.init_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = stack(&[&random_spec(8, 16, 8)]).unwrap();
    let label = Tensor::from_shape_fn(IxDyn(&[1, 8, 88]), |_| f64::from(rng.gen_bool(0.2)));

    let loss = |phi: &ParamSet| {
        let g = Graph::new();
        let p = theta.0.bind(&g, false);
        let q = phi.bind(&g, false);
        let first = model.forward(&p, g.constant(x.clone()));
        let second = model.forward(&p, recon.forward(&q, first.post));
        bce_mean(&label, second.post, 1e-7).scalar()
    };

    let g = Graph::new();
    let p = theta.0.bind(&g, true);
    let q = phi.0.bind(&g, true);
    let first = model.forward(&p, g.constant(x.clone()));
    let second = model.forward(&p, recon.forward(&q, first.post));
    let mut grads = g.backward(bce_mean(&label, second.post, 1e-7));
    let gq = phi.0.collect_grads(&mut grads, &q);
    let gp = theta.0.collect_grads(&mut grads, &p);
    assert!(gp.sq_norm() > 0.0);
    assert!(gq.sq_norm() > 0.0);

    let h = 1e-3;
    let mut sensitive = 0;
    for _ in 0..10 {
        let idx = rng.gen_range(0..phi.0.numel());
        let v = phi.0.get_flat(idx).unwrap();
        let mut plus = phi.0.clone();
        plus.set_flat(idx, v + h);
        let mut minus = phi.0.clone();
        minus.set_flat(idx, v - h);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        if numeric.abs() > 1e-9 {
            sensitive += 1;
        }
        assert!(rel_err(gq.get_flat(idx).unwrap(), numeric) < 1e-3);
    }
    assert!(sensitive > 0);
}
