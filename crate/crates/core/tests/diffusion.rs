mod common;

use polyforge_core::autograd::ParamSet;
use polyforge_core::denoiser::{build_denoiser, AttentionFlags, DenoiserConfig};
use polyforge_core::diffusion::{
    convert_prediction, ddpm_sample, draw_noise, ema_update, loss_and_grad_with_draws,
    training_loss, v_target, EmaState, NoisePredictor, PredictionKind, SamplerOptions,
};
use polyforge_core::exec::{self, Mode};
use polyforge_core::schedule::NoiseSchedule;
use polyforge_core::spatial::{boxes_to_mask, BBox};
use polyforge_core::{Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Zero;

impl NoisePredictor for Zero {
    fn predict(&self, x: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn zero_predictor_loss_is_unit_noise_energy() {
    let s = NoiseSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<Tensor> = (0..200).map(|_| uniform(&[3, 8, 8], &mut rng)).collect();
    let l = training_loss(&Zero, &s, PredictionKind::Epsilon, &batch, &mut rng).unwrap();
    // 38400 unit normals: standard error of the mean square is about 0.007.
    assert!((l - 1.0).abs() < 0.03, "loss {l}");
}

#[test]
fn zero_predictor_v_loss_matches_target_energy() {
    // E[v^2] = ab * 1 + (1 - ab) * x0^2 with x0 = 0 reduces to mean ab.
    let s = NoiseSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch: Vec<Tensor> = (0..400).map(|_| Tensor::zeros(&[1, 8, 8])).collect();
    let l = training_loss(&Zero, &s, PredictionKind::V, &batch, &mut rng).unwrap();
    let mean_ab = s.alpha_bar().iter().sum::<f64>() / s.steps() as f64;
    assert!((l - mean_ab).abs() < 0.03, "loss {l} vs {mean_ab}");
}

#[test]
fn v_target_by_hand() {
    let s = NoiseSchedule::linear(2, 0.36, 0.36).unwrap();
    // alpha_bar[0] = 0.64: sqrt 0.8, complement 0.6.
    let x0 = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
    let eps = Tensor::new(vec![2], vec![0.5, 2.0]).unwrap();
    let v = v_target(&s, 0, &x0, &eps);
    assert!((v[0] - (0.8 * 0.5 - 0.6 * 1.0)).abs() < 1e-12);
    assert!((v[1] - (0.8 * 2.0 + 0.6 * 0.5)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn epsilon_conversion_inverts_forward_process(t in 0usize..1000, seed in any::<u64>()) {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = uniform(&[2, 3, 3], &mut rng);
        let eps = uniform(&[2, 3, 3], &mut rng);
        let xt = s.forward_sample(&x0, t, &eps).unwrap();
        let (e, x) = convert_prediction(PredictionKind::Epsilon, &s, t, &xt, &eps, false).unwrap();
        prop_assert_eq!(e.data(), eps.data());
        let tol = 1e-12 / s.sqrt_alpha_bar()[t];
        prop_assert!(x.max_abs_diff(&x0) <= tol.max(1e-12));
    }

    #[test]
    fn v_conversion_recovers_both_components(t in 0usize..1000, seed in any::<u64>()) {
        let s = NoiseSchedule::default_linear().rescale_zero_terminal_snr(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = uniform(&[2, 3, 3], &mut rng);
        let eps = uniform(&[2, 3, 3], &mut rng);
        let xt = s.forward_sample(&x0, t, &eps).unwrap();
        let v = Tensor::new(vec![2, 3, 3], v_target(&s, t, &x0, &eps)).unwrap();
        let (e, x) = convert_prediction(PredictionKind::V, &s, t, &xt, &v, false).unwrap();
        prop_assert!(e.max_abs_diff(&eps) < 1e-12);
        prop_assert!(x.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn clipped_estimate_stays_in_range(t in 0usize..1000, seed in any::<u64>()) {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(-5.0..5.0));
        let out = Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(-5.0..5.0));
        for kind in [PredictionKind::Epsilon, PredictionKind::V] {
            let (_, x0) = convert_prediction(kind, &s, t, &xt, &out, true).unwrap();
            prop_assert!(x0.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}

fn params_of(values: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("w", vec![values.len()], values.to_vec());
    p
}

#[test]
fn ema_geometric_convergence() {
    // Constant params p: s_k = p + d^k (s_0 - p).
    let mut shadow = params_of(&[4.0, -2.0]);
    let target = params_of(&[1.0, 1.0]);
    let d = 0.9;
    for _ in 0..10 {
        ema_update(&mut shadow, &target, d).unwrap();
    }
    let f = d.powi(10);
    let got = &shadow.tensors()[0].data;
    assert!((got[0] - (1.0 + f * 3.0)).abs() < 1e-12);
    assert!((got[1] - (1.0 - f * 3.0)).abs() < 1e-12);
}

#[test]
fn ema_decay_endpoints() {
    let mut shadow = params_of(&[3.0]);
    ema_update(&mut shadow, &params_of(&[7.0]), 1.0).unwrap();
    assert_eq!(shadow.tensors()[0].data, vec![3.0]);
    ema_update(&mut shadow, &params_of(&[7.0]), 0.0).unwrap();
    assert_eq!(shadow.tensors()[0].data, vec![7.0]);
    assert!(ema_update(&mut shadow, &params_of(&[7.0, 1.0]), 0.5).is_err());
}

#[test]
fn ema_warmup_first_update_copies_params() {
    let mut ema = EmaState::new(&params_of(&[0.0]), 0.99, 100).unwrap();
    assert_eq!(ema.effective_decay(), 0.0);
    ema.update(&params_of(&[5.0])).unwrap();
    assert_eq!(ema.shadow.tensors()[0].data, vec![5.0]);
    for _ in 0..200 {
        ema.update(&params_of(&[5.0])).unwrap();
    }
    assert_eq!(ema.effective_decay(), 0.99);
    assert!(EmaState::new(&params_of(&[0.0]), 1.5, 0).is_err());
}

fn oracle(mu: Vec<f64>) -> common::GaussianOracle {
    common::GaussianOracle {
        schedule: NoiseSchedule::default_linear(),
        mu,
    }
}

#[test]
fn gaussian_sampler_small_scale() {
    let mu = vec![0.5, -1.0, 2.0, 0.0];
    let model = oracle(mu.clone());
    let s = model.schedule.clone();
    let sub = s.subsequence(100).unwrap();
    let opts = SamplerOptions {
        kind: PredictionKind::Epsilon,
        clip_x0: false,
    };
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    for _ in 0..n {
        let (img, mask) = ddpm_sample(&model, &s, &sub, &opts, [4, 1, 1], None, &mut rng).unwrap();
        let v: Vec<f64> = img.data().iter().chain(mask.data()).copied().collect();
        for i in 0..4 {
            sum[i] += v[i];
            sq[i] += v[i] * v[i];
        }
    }
    for i in 0..4 {
        let m = sum[i] / n as f64;
        let var = sq[i] / n as f64 - m * m;
        let se = (1.0 / n as f64).sqrt();
        assert!((m - mu[i]).abs() < 4.0 * se, "mean {i}: {m} vs {}", mu[i]);
        assert!((var - 1.0).abs() < 0.12, "variance {i}: {var}");
    }
}

#[test]
fn conditioning_mask_is_returned_exactly() {
    let model = oracle(vec![0.0; 2 * 8 * 8]);
    let s = model.schedule.clone();
    let sub = s.subsequence(20).unwrap();
    let mask = boxes_to_mask(&[BBox::new(1, 2, 4, 3)], 8, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (img, m) = ddpm_sample(
        &model,
        &s,
        &sub,
        &SamplerOptions::default(),
        [2, 8, 8],
        Some(&mask),
        &mut rng,
    )
    .unwrap();
    assert_eq!(img.shape(), &[1, 8, 8]);
    assert_eq!(m.data(), mask.data());
}

#[test]
fn sampler_is_deterministic_per_seed() {
    let model = oracle(vec![0.1; 3 * 8 * 8]);
    let s = model.schedule.clone();
    let sub = s.subsequence(10).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ddpm_sample(
            &model,
            &s,
            &sub,
            &SamplerOptions::default(),
            [3, 8, 8],
            None,
            &mut rng,
        )
        .unwrap()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3).0, run(4).0);
}

#[test]
fn batch_gradient_identical_across_execution_modes() {
    let cfg = DenoiserConfig {
        in_channels: 2,
        base_width: 4,
        channel_multipliers: [1, 2, 2],
        layers_per_block: 1,
        attention: AttentionFlags::none(),
        time_embed_dim: 8,
        ..DenoiserConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = build_denoiser(&cfg, &mut rng).unwrap();
    let s = NoiseSchedule::default_linear();
    let batch: Vec<Tensor> = (0..4).map(|_| uniform(&[2, 8, 8], &mut rng)).collect();
    let draws = draw_noise(&batch, &s, &mut rng);
    let before = exec::mode();
    exec::set_mode(Mode::Sequential);
    let seq =
        loss_and_grad_with_draws(&model, &s, PredictionKind::Epsilon, &batch, &draws).unwrap();
    exec::set_mode(Mode::Parallel);
    let par =
        loss_and_grad_with_draws(&model, &s, PredictionKind::Epsilon, &batch, &draws).unwrap();
    exec::set_mode(before);
    assert_eq!(seq.0.to_bits(), par.0.to_bits());
    assert_eq!(seq.1, par.1);
}
