//! Finite-difference validation of reverse-mode gradients over a grid of
//! model configurations and training schemes.
//!
//! Token-drop plans in this grid place their drop locations strictly below
//! the gradient horizon: selection indices and fusion weights then depend
//! only on frozen parameters and stay bitwise fixed under perturbation of
//! any trainable scalar, so central differences probe exactly the function
//! the tape differentiates. The fused-row backward rule itself is checked
//! separately with pinned indices and weights.

use bsr_core::gradcheck::{finite_diff_check, DEFAULT_STEP};
use bsr_core::policy::{BsrPlan, ResidualPlan, TrainScheme};
use bsr_core::tape::{ParamId, ParamSet, Stage, TapeBuilder, TapeMode};
use bsr_core::tensor::Tensor;
use bsr_core::train::softmax_cross_entropy;
use bsr_core::vit::{vit_forward, ViTConfig, ViTModel};
use bsr_core::Result;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn config_a() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 2,
        embed_dim: 16,
        heads: 2,
        ffn_mult: 2,
        depth: 2,
        num_classes: 3,
    }
}

fn config_b() -> ViTConfig {
    ViTConfig {
        image_size: 12,
        patch_size: 4,
        channels: 1,
        embed_dim: 24,
        heads: 3,
        ffn_mult: 2,
        depth: 3,
        num_classes: 4,
    }
}

fn config_c() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        heads: 4,
        ffn_mult: 3,
        depth: 4,
        num_classes: 2,
    }
}

/// Jitters every parameter so no activation sits in a dead regime and every
/// trainable coordinate carries a measurable gradient.
fn liven<R: Rng>(model: &mut ViTModel, rng: &mut R) {
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params.data_mut(id) {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

/// Builds a jittered model under `scheme`, takes one reverse pass, and
/// returns the max relative error of central differences over every
/// trainable scalar.
fn max_fd_error(config: &ViTConfig, scheme: TrainScheme, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = match &scheme {
        TrainScheme::Residual(plan) => {
            ViTModel::with_side_blocks(config, &plan.side_blocks, &mut rng).unwrap()
        }
        _ => ViTModel::new(config, &mut rng).unwrap(),
    };
    liven(&mut model, &mut rng);
    model.apply_scheme(&scheme).unwrap();

    let s = config.image_size;
    let pixels: Vec<f64> =
        (0..config.channels * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let image = Tensor::new(&[config.channels, s, s], pixels).unwrap();
    let label = (seed as usize) % config.num_classes;

    let pass = vit_forward(&model, &scheme, &image, TapeMode::Training).unwrap();
    let (_, dlogits) = softmax_cross_entropy(pass.logits.data(), label).unwrap();
    let seed_grad = Tensor::new(&[config.num_classes], dlogits).unwrap();
    let grads = pass.tape.backward(&model.params, pass.logits_id, &seed_grad, &[]).unwrap();

    let base = model.clone();
    let loss = move |ps: &ParamSet| -> Result<f64> {
        let mut m = base.clone();
        m.params = ps.clone();
        let p = vit_forward(&m, &scheme, &image, TapeMode::Inference)?;
        Ok(softmax_cross_entropy(p.logits.data(), label)?.0)
    };

    let mut params = model.params.clone();
    let report = finite_diff_check(&mut params, &grads, loss, DEFAULT_STEP).unwrap();
    assert!(report.checked > 0, "no trainable scalars were checked");
    if report.max_err >= TOL && report.worst.is_some() {
        let w = report.worst.as_ref().unwrap();
        eprintln!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    report.max_err
}

#[test]
fn full_scheme_matches_finite_differences_on_config_a() {
    assert!(max_fd_error(&config_a(), TrainScheme::Full, 11) < TOL);
}

#[test]
fn full_scheme_matches_finite_differences_on_config_b() {
    assert!(max_fd_error(&config_b(), TrainScheme::Full, 12) < TOL);
}

#[test]
fn full_scheme_matches_finite_differences_on_config_c() {
    assert!(max_fd_error(&config_c(), TrainScheme::Full, 13) < TOL);
}

#[test]
fn head_only_matches_finite_differences_on_config_a() {
    assert!(max_fd_error(&config_a(), TrainScheme::HeadOnly, 21) < TOL);
}

#[test]
fn head_only_matches_finite_differences_on_config_b() {
    assert!(max_fd_error(&config_b(), TrainScheme::HeadOnly, 22) < TOL);
}

#[test]
fn head_only_matches_finite_differences_on_config_c() {
    assert!(max_fd_error(&config_c(), TrainScheme::HeadOnly, 23) < TOL);
}

#[test]
fn dropless_selective_plans_match_finite_differences() {
    let all = BsrPlan::new(&[0, 1], &[], 0.5, false).unwrap();
    assert!(max_fd_error(&config_a(), TrainScheme::Bsr(all), 31) < TOL);
    let tail = BsrPlan::new(&[1, 2], &[], 0.5, false).unwrap();
    assert!(max_fd_error(&config_b(), TrainScheme::Bsr(tail), 32) < TOL);
}

#[test]
fn plans_dropping_below_the_horizon_match_finite_differences() {
    let cases: [(ViTConfig, &[usize], &[usize], f64, u64); 5] = [
        (config_a(), &[1], &[0], 0.5, 41),
        (config_b(), &[2], &[0, 1], 0.5, 42),
        (config_b(), &[1, 2], &[0], 0.3, 43),
        (config_c(), &[3], &[1, 2], 0.5, 44),
        (config_c(), &[2, 3], &[0, 1], 0.6, 45),
    ];
    for (config, trainable, drops, rate, seed) in cases {
        let plan = BsrPlan::new(trainable, drops, rate, false).unwrap();
        let err = max_fd_error(&config, TrainScheme::Bsr(plan), seed);
        assert!(err < TOL, "trainable {trainable:?} drops {drops:?}: max err {err:.3e}");
    }
}

#[test]
fn residual_side_parameters_match_finite_differences() {
    let one = ResidualPlan::new(&[1]).unwrap();
    assert!(max_fd_error(&config_b(), TrainScheme::Residual(one), 51) < TOL);
    let two = ResidualPlan::new(&[1, 3]).unwrap();
    assert!(max_fd_error(&config_c(), TrainScheme::Residual(two), 52) < TOL);
}

/// The fused-row rule in isolation: with pinned row indices and fusion
/// weights, the reverse rule (scatter the fused row's gradient to each
/// dropped row, scaled by its weight) must agree with central differences
/// through a trainable projection on both sides.
#[test]
fn select_fuse_backward_matches_finite_differences_with_pinned_metadata() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamSet::new();
    let w_data: Vec<f64> = (0..12).map(|_| rng.random_range(-0.8..0.8)).collect();
    let w = params.add("w", &[4, 3], w_data, Stage::Block(0)).unwrap();
    let u_data: Vec<f64> = (0..6).map(|_| rng.random_range(-0.8..0.8)).collect();
    let u = params.add("u", &[3, 2], u_data, Stage::Block(0)).unwrap();
    params.set_trainable(w, true);
    params.set_trainable(u, true);

    let x_data: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(&[5, 4], x_data).unwrap();
    let coef_data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coef = Tensor::new(&[3, 2], coef_data).unwrap();

    let kept = [0, 2];
    let dropped = [1, 3, 4];
    let weights = [0.5, 0.3, 0.2];

    let run = |p: &ParamSet| -> Result<(f64, bsr_core::tape::GradientTable)> {
        let mut tb = TapeBuilder::new(p, TapeMode::Training, 0);
        tb.set_stage(Stage::Block(0));
        let xin = tb.input(&x)?;
        let h = tb.matmul(xin, p.find("w").unwrap())?;
        let act = tb.gelu(h)?;
        let fused = tb.select_fuse(act, &kept, &dropped, &weights)?;
        let out = tb.matmul(fused, p.find("u").unwrap())?;
        let loss = tb
            .value_data(out)
            .iter()
            .zip(coef.data())
            .map(|(v, c)| v * c)
            .sum();
        let grads = tb.finish().backward(p, out, &coef, &[])?;
        Ok((loss, grads))
    };

    let (_, grads) = run(&params).unwrap();
    let report = finite_diff_check(
        &mut params,
        &grads,
        |p| run(p).map(|(loss, _)| loss),
        DEFAULT_STEP,
    )
    .unwrap();
    assert_eq!(report.checked, 18);
    assert!(report.max_err < 1e-9, "max err {:.3e}", report.max_err);
}
