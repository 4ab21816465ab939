//! Byte-exact reconciliation of live training tapes against the analytical
//! activation-memory model, plus mutation tests proving the audit and the
//! retention machinery actually bite.

use bsr_core::memory::tape_audit;
use bsr_core::policy::{BsrPlan, ResidualPlan, TrainScheme};
use bsr_core::tape::{BufferRole, Stage, TapeMode};
use bsr_core::tensor::Tensor;
use bsr_core::vit::{vit_forward, ViTConfig, ViTModel};
use bsr_core::Error;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn random_image(config: &ViTConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.image_size;
    let pixels: Vec<f64> =
        (0..config.channels * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[config.channels, s, s], pixels).unwrap()
}

/// Records one training-mode pass and checks the tape against the exact-mode
/// estimate, cell by cell and in total.
fn audit_pair(config: &ViTConfig, scheme: &TrainScheme, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ViTModel::new(config, &mut rng).unwrap();
    model.apply_scheme(scheme).unwrap();
    let image = random_image(config, seed ^ 0xABCD);
    let pass = vit_forward(&model, scheme, &image, TapeMode::Training).unwrap();
    let report = tape_audit(&pass.tape, config, scheme).unwrap();
    assert!(
        report.is_consistent(),
        "{scheme:?}: expected {} actual {} — {:?}",
        report.expected_total,
        report.actual_total,
        report.mismatches
    );
    assert!(report.actual_total > 0);
}

fn bsr(trainable: &[usize], drops: &[usize], rate: f64) -> TrainScheme {
    TrainScheme::Bsr(BsrPlan::new(trainable, drops, rate, false).unwrap())
}

#[test]
fn toy_tapes_match_the_model_to_the_byte() {
    let config = ViTConfig::toy(4);
    let plans = [
        TrainScheme::Full,
        TrainScheme::HeadOnly,
        bsr(&[1, 3], &[], 0.5),
        bsr(&[1, 3], &[1, 2], 0.5),
        bsr(&[2, 3], &[0, 1], 0.5),
        bsr(&[0, 1, 2, 3], &[1, 2], 0.3),
        bsr(&[3], &[0, 1, 2], 0.7),
    ];
    for (i, scheme) in plans.into_iter().enumerate() {
        audit_pair(&config, &scheme, 100 + i as u64);
    }
}

#[test]
fn two_block_tapes_match_the_model_to_the_byte() {
    let config = config_a();
    let plans = [
        TrainScheme::Full,
        TrainScheme::HeadOnly,
        bsr(&[0, 1], &[0], 0.5),
        bsr(&[1], &[0], 0.5),
    ];
    for (i, scheme) in plans.into_iter().enumerate() {
        audit_pair(&config, &scheme, 200 + i as u64);
    }
}

#[test]
fn three_block_tapes_match_the_model_to_the_byte() {
    let config = config_b();
    let plans = [
        TrainScheme::Full,
        bsr(&[1, 2], &[1], 0.4),
        bsr(&[2], &[0, 1], 0.5),
        TrainScheme::HeadOnly,
    ];
    for (i, scheme) in plans.into_iter().enumerate() {
        audit_pair(&config, &scheme, 300 + i as u64);
    }
}

#[test]
fn four_block_tapes_match_the_model_to_the_byte() {
    let config = config_c();
    let plans = [
        TrainScheme::Full,
        bsr(&[2, 3], &[2], 0.5),
        bsr(&[0, 2], &[1, 3], 0.6),
        bsr(&[3], &[1, 2], 0.5),
        TrainScheme::HeadOnly,
    ];
    for (i, scheme) in plans.into_iter().enumerate() {
        audit_pair(&config, &scheme, 400 + i as u64);
    }
}

#[test]
fn deit_small_default_plan_tape_matches_the_model_to_the_byte() {
    let config = ViTConfig::deit_small(100);
    let scheme = TrainScheme::Bsr(BsrPlan::default_plan());
    audit_pair(&config, &scheme, 500);
}

#[test]
fn blocks_below_the_horizon_retain_nothing() {
    let config = ViTConfig::toy(4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = ViTModel::new(&config, &mut rng).unwrap();

    let scheme = TrainScheme::HeadOnly;
    model.apply_scheme(&scheme).unwrap();
    let image = random_image(&config, 9);
    let pass = vit_forward(&model, &scheme, &image, TapeMode::Training).unwrap();
    for ((stage, _), bytes) in pass.tape.retention_ledger() {
        assert!(
            !matches!(stage, Stage::Block(_)),
            "head-only tape retains {bytes} bytes in {stage:?}"
        );
    }

    let scheme = bsr(&[2, 3], &[0, 1], 0.5);
    model.apply_scheme(&scheme).unwrap();
    let pass = vit_forward(&model, &scheme, &image, TapeMode::Training).unwrap();
    for ((stage, _), bytes) in pass.tape.retention_ledger() {
        if let Stage::Block(i) = stage {
            assert!(i >= 2, "block {i} below the horizon retains {bytes} bytes");
        }
    }
}

#[test]
fn force_retaining_an_extra_buffer_fails_the_audit_naming_its_role() {
    let config = ViTConfig::toy(4);
    let scheme = bsr(&[1, 3], &[2], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = ViTModel::new(&config, &mut rng).unwrap();
    model.apply_scheme(&scheme).unwrap();
    let image = random_image(&config, 17);
    let mut pass = vit_forward(&model, &scheme, &image, TapeMode::Training).unwrap();

    let retained: Vec<_> = pass.tape.retained_values().iter().map(|&(v, _)| v).collect();
    let extra = pass
        .tape
        .nodes()
        .iter()
        .filter(|n| matches!(n.stage, Stage::Block(_)))
        .map(|n| n.out)
        .find(|out| !retained.contains(out))
        .expect("some block-stage node output is not retained");
    pass.tape.force_retain(extra, BufferRole::GeluInput);

    let report = tape_audit(&pass.tape, &config, &scheme).unwrap();
    assert!(!report.is_consistent());
    assert!(report.actual_total > report.expected_total);
    assert!(
        report.mismatches.iter().any(|m| m.role == "gelu" && m.actual_bytes > m.expected_bytes),
        "mismatches do not name the forced role: {:?}",
        report.mismatches
    );
}

#[test]
fn deleting_any_single_retained_buffer_breaks_backward_naming_its_role() {
    let config = ViTConfig::toy(4);
    let scheme = bsr(&[1, 3], &[1, 2], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut model = ViTModel::new(&config, &mut rng).unwrap();
    model.apply_scheme(&scheme).unwrap();
    let image = random_image(&config, 23);

    let baseline = vit_forward(&model, &scheme, &image, TapeMode::Training).unwrap();
    let targets = baseline.tape.retained_values();
    assert!(targets.len() > 20, "expected a rich retention set, got {}", targets.len());
    let seed = Tensor::new(&[config.num_classes], vec![1.0; config.num_classes]).unwrap();

    for (value, role) in targets {
        let mut pass = vit_forward(&model, &scheme, &image, TapeMode::Training).unwrap();
        pass.tape.drop_value_data(value);
        let err = pass
            .tape
            .backward(&model.params, pass.logits_id, &seed, &[])
            .expect_err("backward must fail once a retained buffer is gone");
        match err {
            Error::RetentionViolation { role: got, value: at } => {
                assert_eq!(at, value.0, "violation should point at the deleted value");
                assert_eq!(got, role, "violation role should match the retention role");
            }
            other => panic!("expected a retention violation, got {other:?}"),
        }
    }
}

#[test]
fn side_block_tapes_sit_between_head_only_and_full() {
    let config = ViTConfig::toy(4);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut model = ViTModel::with_side_blocks(&config, &[1, 3], &mut rng).unwrap();
    let image = random_image(&config, 31);

    let mut bytes = Vec::new();
    for scheme in [
        TrainScheme::HeadOnly,
        TrainScheme::Residual(ResidualPlan::new(&[1, 3]).unwrap()),
        TrainScheme::Full,
    ] {
        model.apply_scheme(&scheme).unwrap();
        let pass = vit_forward(&model, &scheme, &image, TapeMode::Training).unwrap();
        bytes.push(pass.tape.retained_bytes());
    }
    assert!(bytes[0] < bytes[1], "side blocks must retain more than head-only: {bytes:?}");
    assert!(bytes[1] < bytes[2], "side blocks must retain less than full: {bytes:?}");
}
