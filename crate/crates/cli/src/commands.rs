//! Implementations of the `bsr` subcommands. Argument parsing lives in
//! [`crate::cli`]; everything here works on resolved inputs and returns
//! [`CliError`] values that the binary maps to exit codes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use bsr_core::gradcheck::{finite_diff_check, DEFAULT_STEP};
use bsr_core::memory::{bytes_to_mb, count_flops, estimate_total, tape_audit, AccountingMode};
use bsr_core::policy::{BsrPlan, TrainScheme};
use bsr_core::tape::{ParamSet, TapeMode};
use bsr_core::tensor::Tensor;
use bsr_core::train::{
    evaluate, finetune, make_synthetic, softmax_cross_entropy, Dataset, LrSchedule, MetricsRow,
    OptimizerKind, Split, SynthSpec, TrainConfig,
};
use bsr_core::vit::{vit_forward, ViTConfig, ViTModel};
use bsr_core::Result as CoreResult;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::csvio::{self, CompareRow, SearchRow};
use crate::inputs::{plan_from_pairs, resolve_config, resolve_scheme};
use crate::{checkpoint, read_text, write_file, CliError};

/// Gradient checks and search-time training stay desk-sized.
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const TOY_MAX_WIDTH: usize = 64;
pub const TOY_MAX_DEPTH: usize = 4;

/// Optimizer selection as it appears on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OptChoice {
    Adamw,
    Sgd,
}

/// Learning-rate schedule selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SchedChoice {
    Constant,
    Cosine,
}

/// Training hyperparameters shared by the training commands.
#[derive(Debug, Clone)]
pub struct TrainKnobs {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptChoice,
    pub schedule: SchedChoice,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

fn resolve(config_spec: &str, plan_spec: &str) -> Result<(ViTConfig, TrainScheme), CliError> {
    let config = resolve_config(config_spec)?;
    let (scheme, warnings) = resolve_scheme(plan_spec, &config)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok((config, scheme))
}

fn build_model(config: &ViTConfig, scheme: &TrainScheme, seed: u64) -> Result<ViTModel, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match scheme {
        TrainScheme::Residual(plan) => {
            ViTModel::with_side_blocks(config, &plan.side_blocks, &mut rng)?
        }
        _ => ViTModel::new(config, &mut rng)?,
    })
}

fn random_image<R: Rng>(config: &ViTConfig, rng: &mut R) -> Result<Tensor, CliError> {
    let s = config.image_size;
    let pixels: Vec<f64> =
        (0..config.channels * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::new(&[config.channels, s, s], pixels)?)
}

/// The synthetic grid task sized for `config`; `target` moves the class
/// signal to its shifted cells and adds distractors.
fn synth_spec(config: &ViTConfig, target: bool) -> SynthSpec {
    let base = SynthSpec {
        classes: config.num_classes,
        image_size: config.image_size,
        channels: config.channels,
        grid: 4,
        noise: 0.05,
        shift: 0.0,
        nuisance: 0.0,
    };
    if target {
        SynthSpec { shift: 1.0, nuisance: 0.6, ..base }
    } else {
        base
    }
}

fn datasets(
    config: &ViTConfig,
    knobs: &TrainKnobs,
    target: bool,
) -> Result<(Dataset, Dataset), CliError> {
    let spec = synth_spec(config, target);
    let train = make_synthetic(&spec, knobs.train_size, knobs.seed.wrapping_add(1))?;
    let test = make_synthetic(&spec, knobs.test_size, knobs.seed.wrapping_add(2))?;
    Ok((train, test))
}

fn train_config(knobs: &TrainKnobs, steps_per_epoch: usize) -> TrainConfig {
    let optimizer = match knobs.optimizer {
        OptChoice::Adamw => OptimizerKind::adamw(),
        OptChoice::Sgd => OptimizerKind::sgd(),
    };
    let schedule = match knobs.schedule {
        SchedChoice::Constant => LrSchedule::Constant(knobs.lr),
        SchedChoice::Cosine => {
            LrSchedule::Cosine { base: knobs.lr, total_steps: knobs.epochs * steps_per_epoch }
        }
    };
    TrainConfig {
        epochs: knobs.epochs,
        batch_size: knobs.batch,
        optimizer,
        schedule,
        seed: knobs.seed,
    }
}

fn summarize(label: &str, rows: &[MetricsRow]) {
    if let Some(train) = rows.iter().rev().find(|r| r.split == Split::Train) {
        println!("{label}: final train loss {:.4}", train.loss);
    }
    if let Some(test) = rows.iter().rev().find(|r| r.split == Split::Test) {
        println!("{label}: test loss {:.4}, test accuracy {:.3}", test.loss, test.accuracy);
    }
}

// ── analyze ──

pub fn analyze(
    config_spec: &str,
    plan_spec: &str,
    batch: usize,
    mode: AccountingMode,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (config, scheme) = resolve(config_spec, plan_spec)?;
    let report = estimate_total(&config, &scheme, batch, mode)?;
    println!(
        "activation memory, {} plan, {} mode, batch {}",
        scheme.label(),
        report.mode.label(),
        report.batch
    );
    println!("{:>5} {:>14} {:>10}", "block", "bytes", "MB");
    for (i, block) in report.per_block.iter().enumerate() {
        println!("{:>5} {:>14} {:>10.2}", i, block.total(), bytes_to_mb(block.total()));
    }
    println!("{:>5} {:>14} {:>10.2}", "head", report.head.total(), bytes_to_mb(report.head.total()));
    println!("frozen blocks    {:>10.2} MB", bytes_to_mb(report.frozen_total));
    println!("trainable + head {:>10.2} MB", bytes_to_mb(report.trainable_total));
    println!("total            {:>10.2} MB ({} bytes)", report.grand_total_mb(), report.grand_total);
    println!("reduction vs full fine-tune: {:.2}x", report.reduce_ratio);
    if let Some(path) = out {
        write_file(path, csvio::memory_csv(&report).as_bytes())?;
    }
    Ok(())
}

// ── flops ──

pub fn flops(
    config_spec: &str,
    plan_spec: &str,
    batch: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (config, scheme) = resolve(config_spec, plan_spec)?;
    let report = count_flops(&config, &scheme, batch)?;
    println!("forward MACs, {} plan, batch {}", scheme.label(), report.batch);
    println!("{:>5} {:>16}", "block", "MACs");
    println!("{:>5} {:>16}", "embed", report.patch_embed);
    for (i, block) in report.per_block.iter().enumerate() {
        println!("{:>5} {:>16}", i, block.total());
    }
    println!("{:>5} {:>16}", "head", report.head);
    println!("total {:.3} GMacs", report.gmacs());
    if let Some(path) = out {
        write_file(path, csvio::flops_csv(&report).as_bytes())?;
    }
    Ok(())
}

// ── gradcheck ──

/// Jitters every parameter so no activation sits in a dead regime.
fn jitter<R: Rng>(model: &mut ViTModel, rng: &mut R) {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params.data_mut(id) {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

pub fn gradcheck(
    config_spec: &str,
    plan_spec: &str,
    seed: u64,
    corrupt: bool,
) -> Result<(), CliError> {
    let config = resolve_config(config_spec)?;
    if config.embed_dim > TOY_MAX_WIDTH || config.depth > TOY_MAX_DEPTH {
        return Err(CliError::Validation(format!(
            "gradcheck runs 2 forward passes per trainable scalar and is limited to \
             embed_dim <= {TOY_MAX_WIDTH} and depth <= {TOY_MAX_DEPTH}; got {} and {}",
            config.embed_dim, config.depth
        )));
    }
    let (scheme, warnings) = resolve_scheme(plan_spec, &config)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if let TrainScheme::Bsr(plan) = &scheme {
        if plan.drop_locations.iter().any(|&d| d >= plan.grad_horizon()) {
            eprintln!(
                "note: drop locations at or above the gradient horizon re-select tokens \
                 under perturbation, which finite differences see and the tape's fixed \
                 fusion weights do not"
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = match &scheme {
        TrainScheme::Residual(plan) => {
            ViTModel::with_side_blocks(&config, &plan.side_blocks, &mut rng)?
        }
        _ => ViTModel::new(&config, &mut rng)?,
    };
    jitter(&mut model, &mut rng);
    model.apply_scheme(&scheme)?;
    let image = random_image(&config, &mut rng)?;
    let label = (seed as usize) % config.num_classes;

    let pass = vit_forward(&model, &scheme, &image, TapeMode::Training)?;
    let (_, dlogits) = softmax_cross_entropy(pass.logits.data(), label)?;
    let seed_grad = Tensor::new(&[config.num_classes], dlogits)?;
    let mut grads = pass.tape.backward(&model.params, pass.logits_id, &seed_grad, &[])?;

    if corrupt {
        let target = model
            .params
            .iter()
            .find(|(id, e)| e.trainable && grads.param(*id).is_some())
            .map(|(id, _)| id);
        if let Some(id) = target {
            let mut g = grads.param(id).unwrap().clone();
            for v in g.data_mut() {
                *v *= 1.5;
            }
            grads.insert_param(id, g);
            eprintln!("note: corrupting the analytic gradient of {}", model.params.name(id));
        }
    }

    let base = model.clone();
    let loss_scheme = scheme.clone();
    let loss_image = image.clone();
    let loss = move |ps: &ParamSet| -> CoreResult<f64> {
        let mut m = base.clone();
        m.params = ps.clone();
        let p = vit_forward(&m, &loss_scheme, &loss_image, TapeMode::Inference)?;
        Ok(softmax_cross_entropy(p.logits.data(), label)?.0)
    };

    let mut probe = model.params.clone();
    let report = finite_diff_check(&mut probe, &grads, loss, DEFAULT_STEP)?;
    println!("checked {} trainable scalars", report.checked);
    println!("max relative error: {:.3e}", report.max_err);
    if let Some(w) = &report.worst {
        println!(
            "largest gap: {}[{}] analytic {:.6e} vs numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if report.passes(GRADCHECK_TOL) {
        println!("gradient check passed (tolerance {GRADCHECK_TOL:e})");
        Ok(())
    } else {
        println!("gradient check FAILED (tolerance {GRADCHECK_TOL:e})");
        Err(CliError::Numeric(format!(
            "finite differences disagree with the tape: max relative error {:.3e}",
            report.max_err
        )))
    }
}

// ── audit ──

pub fn audit(
    config_spec: &str,
    plan_spec: &str,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (config, scheme) = resolve(config_spec, plan_spec)?;
    let mut model = build_model(&config, &scheme, seed)?;
    model.apply_scheme(&scheme)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11D17);
    let image = random_image(&config, &mut rng)?;
    let pass = vit_forward(&model, &scheme, &image, TapeMode::Training)?;
    let report = tape_audit(&pass.tape, &config, &scheme)?;
    println!(
        "exact-mode model predicts {} bytes; the tape retains {} bytes",
        report.expected_total, report.actual_total
    );
    if report.is_consistent() {
        println!("tape audit passed: every (stage, role) cell matches to the byte");
        if let Some(path) = out {
            let exact = estimate_total(&config, &scheme, 1, AccountingMode::Exact)?;
            write_file(path, csvio::memory_csv(&exact).as_bytes())?;
        }
        Ok(())
    } else {
        for m in &report.mismatches {
            println!(
                "mismatch at {:?} role {}: expected {} bytes, tape has {}",
                m.stage, m.role, m.expected_bytes, m.actual_bytes
            );
        }
        Err(CliError::Numeric(format!(
            "tape audit failed: {} (stage, role) cells disagree",
            report.mismatches.len()
        )))
    }
}

// ── pretrain ──

pub fn pretrain(
    config_spec: &str,
    knobs: &TrainKnobs,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<(), CliError> {
    let config = resolve_config(config_spec)?;
    let mut model = build_model(&config, &TrainScheme::Full, knobs.seed)?;
    let (train, test) = datasets(&config, knobs, false)?;
    let tc = train_config(knobs, train.len().div_ceil(knobs.batch));
    let rows = finetune(&mut model, &TrainScheme::Full, &train, &test, &tc)?;
    summarize("pretrain", &rows);
    checkpoint::save(&model.params, out)?;
    println!("checkpoint written to {}", out.display());
    if let Some(path) = metrics {
        write_file(path, csvio::metrics_csv(&rows).as_bytes())?;
    }
    Ok(())
}

// ── finetune ──

pub fn finetune_cmd(
    config_spec: &str,
    plan_spec: &str,
    ckpt: &Path,
    knobs: &TrainKnobs,
    metrics: Option<&Path>,
    save: Option<&Path>,
) -> Result<(), CliError> {
    let (config, scheme) = resolve(config_spec, plan_spec)?;
    let side = match &scheme {
        TrainScheme::Residual(plan) => plan.side_blocks.clone(),
        _ => Vec::new(),
    };
    let mut model = checkpoint::load_model(&config, &side, knobs.seed, ckpt)?;
    let (train, test) = datasets(&config, knobs, true)?;
    let tc = train_config(knobs, train.len().div_ceil(knobs.batch));
    let rows = finetune(&mut model, &scheme, &train, &test, &tc)?;
    summarize(scheme.label(), &rows);
    if let Some(path) = metrics {
        write_file(path, csvio::metrics_csv(&rows).as_bytes())?;
    }
    if let Some(path) = save {
        checkpoint::save(&model.params, path)?;
        println!("checkpoint written to {}", path.display());
    }
    Ok(())
}

// ── compare ──

pub fn compare(
    config_spec: &str,
    ckpt: &Path,
    knobs: &TrainKnobs,
    mem_batch: usize,
    mode: AccountingMode,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let config = resolve_config(config_spec)?;
    let bsr = resolve_scheme("default", &config)?.0;
    let schemes = [TrainScheme::Full, TrainScheme::HeadOnly, bsr];
    let (train, test) = datasets(&config, knobs, true)?;
    let mut rows = Vec::new();
    for scheme in schemes {
        let mut model = checkpoint::load_model(&config, &[], knobs.seed, ckpt)?;
        let tc = train_config(knobs, train.len().div_ceil(knobs.batch));
        finetune(&mut model, &scheme, &train, &test, &tc)?;
        let eval = evaluate(&model, &scheme, &test)?;
        let memory = estimate_total(&config, &scheme, mem_batch, mode)?;
        let flops = count_flops(&config, &scheme, mem_batch)?;
        println!(
            "{:<8} accuracy {:.3}  memory {:.1} MB  flops {:.2} GMacs",
            scheme.label(),
            eval.accuracy,
            memory.grand_total_mb(),
            flops.gmacs()
        );
        rows.push(CompareRow {
            scheme: String::from(scheme.label()),
            accuracy: eval.accuracy,
            memory_bytes: memory.grand_total,
            flops_gmacs: flops.gmacs(),
        });
    }
    if let Some(path) = out {
        write_file(path, csvio::compare_csv(&rows).as_bytes())?;
    }
    Ok(())
}

// ── plan-search ──

/// Canonical plan key: dot-joined trainable blocks, drop locations and rate.
pub fn plan_key(plan: &BsrPlan) -> String {
    let join =
        |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(".");
    format!("t{} d{} r{}", join(&plan.trainable_blocks), join(&plan.drop_locations), plan.drop_rate)
}

/// Grid files hold one plan per line: `;`-separated `key = value` segments
/// in the plan-file dialect. Blank lines and `#` comments are skipped.
pub fn parse_grid(text: &str) -> Result<Vec<BsrPlan>, CliError> {
    let mut plans = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let what = format!("grid line {}", lineno + 1);
        let mut pairs = BTreeMap::new();
        for segment in line.split(';') {
            let segment = segment.trim();
            if segment.is_empty() {
                continue;
            }
            let (key, value) = segment.split_once('=').ok_or_else(|| {
                CliError::Validation(format!("{what}: expected `key = value`, got `{segment}`"))
            })?;
            if pairs.insert(key.trim().to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Validation(format!(
                    "{what}: duplicate key `{}`",
                    key.trim()
                )));
            }
        }
        plans.push(plan_from_pairs(&pairs, &what)?);
    }
    Ok(plans)
}

fn thread_cap(jobs: usize) -> Result<usize, CliError> {
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8);
    let cap = match std::env::var("BSR_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
            CliError::Validation(format!("BSR_THREADS must be a positive integer, got `{v}`"))
        })?,
        Err(_) => default,
    };
    Ok(cap.min(jobs).max(1))
}

fn search_one(
    config: &ViTConfig,
    plan: &BsrPlan,
    knobs: &TrainKnobs,
    batch: usize,
    mode: AccountingMode,
    ckpt: Option<&Path>,
) -> Result<SearchRow, CliError> {
    let scheme = TrainScheme::Bsr(plan.clone());
    let memory = estimate_total(config, &scheme, batch, mode)?;
    let flops = count_flops(config, &scheme, batch)?;
    let accuracy = if knobs.epochs == 0 {
        f64::NAN
    } else {
        let mut model = match ckpt {
            Some(path) => checkpoint::load_model(config, &[], knobs.seed, path)?,
            None => build_model(config, &scheme, knobs.seed)?,
        };
        let (train, test) = datasets(config, knobs, true)?;
        let tc = train_config(knobs, train.len().div_ceil(knobs.batch));
        let rows = finetune(&mut model, &scheme, &train, &test, &tc)?;
        rows.iter()
            .rev()
            .find(|r| r.split == Split::Test)
            .map(|r| r.accuracy)
            .unwrap_or(f64::NAN)
    };
    Ok(SearchRow {
        plan: plan_key(plan),
        memory_bytes: memory.grand_total,
        flops_gmacs: flops.gmacs(),
        accuracy,
    })
}

fn run_search(
    config: &ViTConfig,
    plans: &[BsrPlan],
    knobs: &TrainKnobs,
    batch: usize,
    mode: AccountingMode,
    ckpt: Option<&Path>,
) -> Result<Vec<SearchRow>, CliError> {
    if plans.is_empty() {
        return Ok(Vec::new());
    }
    let threads = thread_cap(plans.len())?;
    if threads == 1 {
        return plans.iter().map(|p| search_one(config, p, knobs, batch, mode, ckpt)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<SearchRow, CliError>>>> =
        plans.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= plans.len() {
                    break;
                }
                let row = search_one(config, &plans[i], knobs, batch, mode, ckpt);
                *slots[i].lock().unwrap() = Some(row);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

/// Evaluates every plan in the grid and ranks ascending by memory (plan key
/// breaks ties), so the cheapest plan leads the table.
pub fn plan_search(
    config_spec: &str,
    grid_path: &Path,
    budget: usize,
    knobs: &TrainKnobs,
    batch: usize,
    mode: AccountingMode,
    ckpt: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let config = resolve_config(config_spec)?;
    let plans = parse_grid(&read_text(grid_path)?)?;
    if plans.len() > budget {
        return Err(CliError::Validation(format!(
            "grid holds {} plans, over the budget of {budget}",
            plans.len()
        )));
    }
    if knobs.epochs > 0 && (config.embed_dim > TOY_MAX_WIDTH || config.depth > TOY_MAX_DEPTH) {
        return Err(CliError::Validation(format!(
            "search-time training is limited to embed_dim <= {TOY_MAX_WIDTH} and depth <= \
             {TOY_MAX_DEPTH}; rerun with --epochs 0 for an analysis-only ranking"
        )));
    }
    for plan in &plans {
        for w in TrainScheme::Bsr(plan.clone()).validate(config.depth, config.seq_len())? {
            eprintln!("warning: {}: {w}", plan_key(plan));
        }
    }
    let mut rows = run_search(&config, &plans, knobs, batch, mode, ckpt)?;
    rows.sort_by(|a, b| {
        a.memory_bytes.cmp(&b.memory_bytes).then_with(|| a.plan.cmp(&b.plan))
    });
    println!("{:<26} {:>12} {:>10} {:>9}", "plan", "memory (MB)", "GMacs", "accuracy");
    for r in &rows {
        let acc = if r.accuracy.is_nan() { String::from("n/a") } else { format!("{:.3}", r.accuracy) };
        println!(
            "{:<26} {:>12.1} {:>10.2} {:>9}",
            r.plan,
            bytes_to_mb(r.memory_bytes),
            r.flops_gmacs,
            acc
        );
    }
    if let Some(path) = out {
        write_file(path, csvio::search_csv(&rows).as_bytes())?;
    }
    Ok(())
}
