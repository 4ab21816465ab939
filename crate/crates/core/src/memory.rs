//! Analytical activation-memory and FLOPs model, plus the tape audit that
//! proves the analytical exact mode equals the live tape byte-for-byte.
//!
//! Two accounting modes:
//! - [`AccountingMode::Paper`]: counts what a frozen block must keep for
//!   backward through its non-linear ops (QKV heads, softmax probabilities,
//!   GELU input) and, for trainable blocks, the six in-block linear-op input
//!   activations. LayerNorm bookkeeping is folded into those lines.
//! - [`AccountingMode::Exact`]: mirrors the tape's retention rules exactly —
//!   LayerNorm keeps its normalized input and per-row stats instead of the
//!   raw input, and the head stage keeps its final-LayerNorm buffers and the
//!   classifier input row.
//!
//! Bytes are counted at the 4-byte training width ([`ACCOUNT_WIDTH`]);
//! megabytes are `2^20` bytes. Token-drop index lists and fusion weights
//! count as zero bytes in both modes, matching the tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::policy::TrainScheme;
use crate::tape::{Stage, Tape, ACCOUNT_WIDTH};
use crate::vit::ViTConfig;
use crate::{Error, Result};

/// Bytes per mebibyte.
pub const MB: f64 = 1048576.0;

/// Converts an accounting byte count to MB (`2^20` bytes).
pub fn bytes_to_mb(bytes: u64) -> f64 {
    bytes as f64 / MB
}

/// Which activation-accounting rules to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccountingMode {
    Paper,
    Exact,
}

impl AccountingMode {
    pub fn label(self) -> &'static str {
        match self {
            AccountingMode::Paper => "paper",
            AccountingMode::Exact => "exact",
        }
    }
}

// ── Per-block memory ──

/// Retained bytes of one block (or the head stage), split by role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockMemory {
    pub qkv_bytes: u64,
    pub softmax_bytes: u64,
    pub gelu_bytes: u64,
    pub linear_extras_bytes: u64,
    pub ln_stat_bytes: u64,
    pub ln_xhat_bytes: u64,
}

/// Role labels in report order (lexicographic, matching CSV emission).
pub const ROLE_LABELS: [&str; 6] =
    ["gelu", "linear_extras", "ln_stat", "ln_xhat", "qkv", "softmax"];

impl BlockMemory {
    pub fn total(&self) -> u64 {
        self.qkv_bytes
            + self.softmax_bytes
            + self.gelu_bytes
            + self.linear_extras_bytes
            + self.ln_stat_bytes
            + self.ln_xhat_bytes
    }

    /// `(label, bytes)` pairs in [`ROLE_LABELS`] order.
    pub fn roles(&self) -> [(&'static str, u64); 6] {
        [
            ("gelu", self.gelu_bytes),
            ("linear_extras", self.linear_extras_bytes),
            ("ln_stat", self.ln_stat_bytes),
            ("ln_xhat", self.ln_xhat_bytes),
            ("qkv", self.qkv_bytes),
            ("softmax", self.softmax_bytes),
        ]
    }

    fn scaled(&self, k: u64) -> BlockMemory {
        BlockMemory {
            qkv_bytes: self.qkv_bytes * k,
            softmax_bytes: self.softmax_bytes * k,
            gelu_bytes: self.gelu_bytes * k,
            linear_extras_bytes: self.linear_extras_bytes * k,
            ln_stat_bytes: self.ln_stat_bytes * k,
            ln_xhat_bytes: self.ln_xhat_bytes * k,
        }
    }
}

/// Per-sample retained bytes of one encoder block seeing `t_mhsa` tokens in
/// attention and `t_ffn` tokens in its FFN.
pub fn block_memory(
    config: &ViTConfig,
    t_mhsa: usize,
    t_ffn: usize,
    trainable: bool,
    mode: AccountingMode,
) -> BlockMemory {
    let w = ACCOUNT_WIDTH;
    let l = config.embed_dim as u64;
    let h = config.heads as u64;
    let f = config.ffn_mult as u64;
    let tm = t_mhsa as u64;
    let tf = t_ffn as u64;

    let mut m = BlockMemory {
        // Q, K and V in per-head layout: 3 * t * L.
        qkv_bytes: 3 * tm * l * w,
        // One t x t probability map per head.
        softmax_bytes: h * tm * tm * w,
        // FFN hidden activation: t * (f * L).
        gelu_bytes: tf * f * l * w,
        ..BlockMemory::default()
    };
    match mode {
        AccountingMode::Paper => {
            if trainable {
                // Inputs of LN1, QKV and the attention projection at t_mhsa;
                // inputs of LN2, fc1 and the (f*L)-wide fc2 at t_ffn.
                m.linear_extras_bytes = (3 * tm + (2 + f) * tf) * l * w;
            }
        }
        AccountingMode::Exact => {
            // Both LayerNorms keep xhat plus per-row (mean, 1/std).
            m.ln_xhat_bytes = (tm + tf) * l * w;
            m.ln_stat_bytes = 2 * (tm + tf) * w;
            if trainable {
                // Inputs of QKV and the attention projection at t_mhsa;
                // inputs of fc1 and the (f*L)-wide fc2 at t_ffn.
                m.linear_extras_bytes = (2 * tm + (1 + f) * tf) * l * w;
            }
        }
    }
    m
}

/// Per-sample retained bytes of the head stage (final LayerNorm plus
/// classifier input) at `t_final` tokens.
pub fn head_memory(config: &ViTConfig, t_final: usize, mode: AccountingMode) -> BlockMemory {
    let w = ACCOUNT_WIDTH;
    let l = config.embed_dim as u64;
    let t = t_final as u64;
    let mut m = BlockMemory {
        // The classifier always trains: its input row is retained.
        linear_extras_bytes: l * w,
        ..BlockMemory::default()
    };
    if mode == AccountingMode::Exact {
        m.ln_xhat_bytes = t * l * w;
        m.ln_stat_bytes = 2 * t * w;
    }
    m
}

// ── Whole-model estimate ──

/// Activation-memory estimate for a whole configuration, batch-scaled.
#[derive(Debug, Clone)]
pub struct MemoryReport {
    pub mode: AccountingMode,
    pub batch: usize,
    /// One entry per encoder block, batch-scaled; zero below the horizon.
    pub per_block: Vec<BlockMemory>,
    /// Head stage (final LayerNorm + classifier input), batch-scaled.
    pub head: BlockMemory,
    /// Bytes in frozen in-path blocks.
    pub frozen_total: u64,
    /// Bytes in trainable blocks plus the head stage.
    pub trainable_total: u64,
    pub grand_total: u64,
    /// Full fine-tuning footprint under the same mode/batch, divided by this
    /// scheme's footprint.
    pub reduce_ratio: f64,
}

impl MemoryReport {
    pub fn grand_total_mb(&self) -> f64 {
        bytes_to_mb(self.grand_total)
    }
}

fn scheme_trains_block(scheme: &TrainScheme, i: usize) -> bool {
    match scheme {
        TrainScheme::Full => true,
        TrainScheme::HeadOnly => false,
        TrainScheme::Bsr(plan) => plan.trainable_blocks.contains(&i),
        TrainScheme::Residual(_) => false,
    }
}

fn per_sample_total(config: &ViTConfig, scheme: &TrainScheme, mode: AccountingMode) -> u64 {
    let depth = config.depth;
    let horizon = scheme.horizon(depth);
    let schedule = scheme.token_schedule(config.seq_len(), depth);
    let mut total = 0;
    for (i, &(tm, tf)) in schedule.per_block.iter().enumerate() {
        if i >= horizon {
            total += block_memory(config, tm, tf, scheme_trains_block(scheme, i), mode).total();
        }
    }
    total + head_memory(config, schedule.final_tokens(), mode).total()
}

/// Builds the batch-scaled activation-memory report for `scheme`.
///
/// The residual-adapter baseline is measured on the tape rather than
/// modeled analytically.
pub fn estimate_total(
    config: &ViTConfig,
    scheme: &TrainScheme,
    batch: usize,
    mode: AccountingMode,
) -> Result<MemoryReport> {
    config.validate()?;
    if batch == 0 {
        return Err(Error::Plan(String::from("batch size must be positive")));
    }
    if matches!(scheme, TrainScheme::Residual(_)) {
        return Err(Error::Plan(String::from(
            "the residual-adapter baseline is not covered by the analytical model; audit its tape instead",
        )));
    }
    scheme.validate(config.depth, config.seq_len())?;

    let depth = config.depth;
    let horizon = scheme.horizon(depth);
    let schedule = scheme.token_schedule(config.seq_len(), depth);
    let k = batch as u64;

    let mut per_block = Vec::with_capacity(depth);
    let mut frozen_total = 0;
    let mut trainable_total = 0;
    for (i, &(tm, tf)) in schedule.per_block.iter().enumerate() {
        if i < horizon {
            per_block.push(BlockMemory::default());
            continue;
        }
        let trainable = scheme_trains_block(scheme, i);
        let m = block_memory(config, tm, tf, trainable, mode).scaled(k);
        if trainable {
            trainable_total += m.total();
        } else {
            frozen_total += m.total();
        }
        per_block.push(m);
    }
    let head = head_memory(config, schedule.final_tokens(), mode).scaled(k);
    trainable_total += head.total();
    let grand_total = frozen_total + trainable_total;

    let baseline = per_sample_total(config, &TrainScheme::Full, mode) * k;
    Ok(MemoryReport {
        mode,
        batch,
        per_block,
        head,
        frozen_total,
        trainable_total,
        grand_total,
        reduce_ratio: baseline as f64 / grand_total as f64,
    })
}

// ── FLOPs ──

/// Forward multiply-accumulate counts of one block, batch-scaled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockFlops {
    pub qkv: u64,
    pub scores: u64,
    pub apply: u64,
    pub proj: u64,
    pub ffn: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.scores + self.apply + self.proj + self.ffn
    }
}

/// Forward MAC counts for a whole configuration, batch-scaled.
///
/// Only matrix products count: the patch projection, QKV, score and value
/// products, attention projection, the two FFN layers and the classifier.
/// Bias adds, LayerNorm, softmax and GELU are excluded.
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub batch: usize,
    pub patch_embed: u64,
    pub per_block: Vec<BlockFlops>,
    pub head: u64,
    pub total_macs: u64,
}

impl FlopsReport {
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

/// Counts forward MACs under `scheme`'s token schedule.
pub fn count_flops(config: &ViTConfig, scheme: &TrainScheme, batch: usize) -> Result<FlopsReport> {
    config.validate()?;
    if batch == 0 {
        return Err(Error::Plan(String::from("batch size must be positive")));
    }
    if matches!(scheme, TrainScheme::Residual(_)) {
        return Err(Error::Plan(String::from(
            "the residual-adapter baseline is not covered by the analytical model",
        )));
    }
    scheme.validate(config.depth, config.seq_len())?;

    let k = batch as u64;
    let l = config.embed_dim as u64;
    let f = config.ffn_mult as u64;
    let schedule = scheme.token_schedule(config.seq_len(), config.depth);

    let patch_embed = config.num_patches() as u64 * config.patch_dim() as u64 * l * k;
    let mut per_block = Vec::with_capacity(config.depth);
    let mut total = patch_embed;
    for &(tm, tf) in &schedule.per_block {
        let (tm, tf) = (tm as u64, tf as u64);
        let b = BlockFlops {
            qkv: tm * l * 3 * l * k,
            // h * t^2 * d = t^2 * L per product.
            scores: tm * tm * l * k,
            apply: tm * tm * l * k,
            proj: tm * l * l * k,
            ffn: 2 * tf * l * f * l * k,
        };
        total += b.total();
        per_block.push(b);
    }
    let head = l * config.num_classes as u64 * k;
    total += head;
    Ok(FlopsReport { batch, patch_embed, per_block, head, total_macs: total })
}

// ── Tape audit ──

/// One (stage, role) cell where the tape and the exact-mode model disagree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditMismatch {
    pub stage: Stage,
    pub role: &'static str,
    pub expected_bytes: u64,
    pub actual_bytes: u64,
}

impl core::fmt::Display for AuditMismatch {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{:?}/{}: expected {} bytes, tape holds {}",
            self.stage, self.role, self.expected_bytes, self.actual_bytes
        )
    }
}

/// Outcome of comparing a recorded tape against the exact-mode estimate.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub expected_total: u64,
    pub actual_total: u64,
    pub mismatches: Vec<AuditMismatch>,
}

impl AuditReport {
    /// True when every (stage, role) cell and the totals agree exactly.
    pub fn is_consistent(&self) -> bool {
        self.mismatches.is_empty() && self.expected_total == self.actual_total
    }
}

/// Compares a single-sample training tape against the exact-mode analytical
/// estimate, cell by cell. Every (block, role) pair must match to the byte.
pub fn tape_audit(tape: &Tape, config: &ViTConfig, scheme: &TrainScheme) -> Result<AuditReport> {
    let expected = estimate_total(config, scheme, 1, AccountingMode::Exact)?;
    let ledger = tape.retention_ledger();

    let mut actual_by_cell: alloc::collections::BTreeMap<(Stage, &'static str), u64> =
        alloc::collections::BTreeMap::new();
    for ((stage, role), bytes) in &ledger {
        *actual_by_cell.entry((*stage, role.report_label())).or_insert(0) += bytes;
    }
    if let Some(((stage, role), bytes)) =
        actual_by_cell.iter().find(|((s, _), _)| *s == Stage::PatchEmbed)
    {
        return Err(Error::Plan(format!(
            "tape retains {bytes} bytes ({role}) in the frozen patch-embed stage at {stage:?}"
        )));
    }

    let mut mismatches = Vec::new();
    let mut stages: Vec<(Stage, &BlockMemory)> = expected
        .per_block
        .iter()
        .enumerate()
        .map(|(i, m)| (Stage::Block(i), m))
        .collect();
    stages.push((Stage::Head, &expected.head));
    for (stage, m) in stages {
        for (role, want) in m.roles() {
            let got = actual_by_cell.get(&(stage, role)).copied().unwrap_or(0);
            if got != want {
                mismatches.push(AuditMismatch {
                    stage,
                    role,
                    expected_bytes: want,
                    actual_bytes: got,
                });
            }
        }
    }

    let actual_total = tape.retained_bytes();
    if actual_total != tape.recompute_retained_bytes() {
        return Err(Error::Plan(String::from(
            "tape running byte counter disagrees with its own arena",
        )));
    }
    Ok(AuditReport { expected_total: expected.grand_total, actual_total, mismatches })
}
