//! Block-selection plans, token-drop schedules and importance scoring.
//!
//! A [`BsrPlan`] names the trainable encoder blocks, the blocks after whose
//! attention stage tokens are dropped, and the drop rate. The gradient
//! horizon is the lowest trainable block: nothing below it is retained or
//! visited by backward. Token importance follows the class-attention rule:
//! row 0 of the pre-softmax score map, softmaxed per head over image tokens,
//! then averaged across heads; dropped tokens are fused into a single token
//! with score-proportional weights.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::vit::AttentionState;
use crate::{Error, Result};

// ── Plans ──

/// Which parameters train and where tokens are dropped.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainScheme {
    /// Every block trainable, no token dropping.
    Full,
    /// Only the classifier head and final LayerNorm train.
    HeadOnly,
    /// Selected blocks train; tokens drop at the plan's locations.
    Bsr(BsrPlan),
    /// Frozen backbone with trainable low-width side blocks.
    Residual(ResidualPlan),
}

impl TrainScheme {
    /// Lowest block index gradients reach. `depth` means "no block at all".
    pub fn horizon(&self, depth: usize) -> usize {
        match self {
            TrainScheme::Full => 0,
            TrainScheme::HeadOnly => depth,
            TrainScheme::Bsr(plan) => plan.grad_horizon(),
            TrainScheme::Residual(plan) => plan.side_blocks.first().copied().unwrap_or(depth),
        }
    }

    /// Drop rate applied after block `index`'s attention stage, if any.
    pub fn drop_at(&self, index: usize) -> Option<f64> {
        match self {
            TrainScheme::Bsr(plan) if plan.drop_locations.contains(&index) => Some(plan.drop_rate),
            _ => None,
        }
    }

    /// Stable label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            TrainScheme::Full => "ft-full",
            TrainScheme::HeadOnly => "ft-last",
            TrainScheme::Bsr(_) => "bsr",
            TrainScheme::Residual(_) => "residual",
        }
    }

    pub fn validate(&self, depth: usize, seq_len: usize) -> Result<Vec<PlanWarning>> {
        match self {
            TrainScheme::Full | TrainScheme::HeadOnly => Ok(Vec::new()),
            TrainScheme::Bsr(plan) => plan.validate(depth, seq_len),
            TrainScheme::Residual(plan) => {
                plan.validate(depth)?;
                Ok(Vec::new())
            }
        }
    }

    /// Per-block (attention tokens, FFN tokens) under this scheme.
    pub fn token_schedule(&self, seq_len: usize, depth: usize) -> TokenSchedule {
        match self {
            TrainScheme::Bsr(plan) => token_schedule(seq_len, depth, plan),
            _ => TokenSchedule { per_block: vec![(seq_len, seq_len); depth] },
        }
    }
}

/// Trainable-block set plus token-drop configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BsrPlan {
    /// Sorted, duplicate-free block indices that train.
    pub trainable_blocks: Vec<usize>,
    /// Sorted, duplicate-free block indices after whose attention tokens drop.
    pub drop_locations: Vec<usize>,
    /// Fraction of image tokens dropped at each location, in (0, 1).
    pub drop_rate: f64,
    /// Forbid drop locations below block 3 (early drops hurt accuracy).
    pub strict: bool,
}

/// Non-fatal plan diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanWarning {
    /// Every trainable block sits in the terminal third of the encoder,
    /// which tends to transfer poorly.
    TerminalTrainableBlocks,
    /// Every trainable block precedes every drop location, so the expensive
    /// early blocks are retained at full token count.
    TrainableBeforeAllDrops,
}

impl core::fmt::Display for PlanWarning {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PlanWarning::TerminalTrainableBlocks => {
                write!(f, "all trainable blocks are in the terminal third of the encoder")
            }
            PlanWarning::TrainableBeforeAllDrops => {
                write!(f, "all trainable blocks precede all drop locations (memory-hostile)")
            }
        }
    }
}

impl BsrPlan {
    pub fn new(trainable: &[usize], drops: &[usize], rate: f64, strict: bool) -> Result<BsrPlan> {
        if trainable.is_empty() {
            return Err(Error::Plan(String::from(
                "plan needs at least one trainable block (use the head-only mode otherwise)",
            )));
        }
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Plan(format!("drop rate must lie in (0, 1), got {rate}")));
        }
        let trainable_blocks = sorted_unique(trainable, "trainable block")?;
        let drop_locations = sorted_unique(drops, "drop location")?;
        Ok(BsrPlan { trainable_blocks, drop_locations, drop_rate: rate, strict })
    }

    /// Preset for 12-block encoders: blocks 3, 7, 11 train; half the image
    /// tokens drop after blocks 3, 6 and 9.
    pub fn default_plan() -> BsrPlan {
        BsrPlan::new(&[3, 7, 11], &[3, 6, 9], 0.5, true).expect("preset is valid")
    }

    /// All blocks trainable, no drops.
    pub fn full(depth: usize) -> BsrPlan {
        let all: Vec<usize> = (0..depth).collect();
        BsrPlan::new(&all, &[], 0.5, false).expect("full plan is valid")
    }

    /// Lowest trainable block index.
    pub fn grad_horizon(&self) -> usize {
        self.trainable_blocks[0]
    }

    pub fn validate(&self, depth: usize, seq_len: usize) -> Result<Vec<PlanWarning>> {
        for &b in self.trainable_blocks.iter().chain(&self.drop_locations) {
            if b >= depth {
                return Err(Error::Plan(format!("block index {b} out of range for depth {depth}")));
            }
        }
        if self.strict {
            if let Some(&early) = self.drop_locations.iter().find(|&&d| d < 3) {
                return Err(Error::Plan(format!(
                    "strict plan forbids drop locations below block 3, got {early}"
                )));
            }
        }
        let schedule = token_schedule(seq_len, depth, self);
        for &d in &self.drop_locations {
            let (t_mhsa, _) = schedule.per_block[d];
            if t_mhsa < 3 {
                return Err(Error::Plan(format!(
                    "drop at block {d} would act on {t_mhsa} tokens; at least 3 are required"
                )));
            }
        }
        let mut warnings = Vec::new();
        if self.grad_horizon() * 3 >= depth * 2 {
            warnings.push(PlanWarning::TerminalTrainableBlocks);
        }
        if let (Some(&max_t), Some(&min_d)) =
            (self.trainable_blocks.last(), self.drop_locations.first())
        {
            if max_t < min_d {
                warnings.push(PlanWarning::TrainableBeforeAllDrops);
            }
        }
        Ok(warnings)
    }
}

fn sorted_unique(xs: &[usize], what: &str) -> Result<Vec<usize>> {
    let mut v = xs.to_vec();
    v.sort_unstable();
    if v.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Plan(format!("duplicate {what} in plan")));
    }
    Ok(v)
}

/// Side-block placement for the residual-adapter baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPlan {
    /// Sorted, duplicate-free block indices that carry a trainable side block.
    pub side_blocks: Vec<usize>,
}

impl ResidualPlan {
    pub fn new(side: &[usize]) -> Result<ResidualPlan> {
        if side.is_empty() {
            return Err(Error::Plan(String::from("residual plan needs at least one side block")));
        }
        Ok(ResidualPlan { side_blocks: sorted_unique(side, "side block")? })
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if let Some(&bad) = self.side_blocks.iter().find(|&&b| b >= depth) {
            return Err(Error::Plan(format!("side block {bad} out of range for depth {depth}")));
        }
        Ok(())
    }
}

// ── Token schedule ──

/// Per-block token counts: `(attention tokens, FFN tokens)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSchedule {
    pub per_block: Vec<(usize, usize)>,
}

impl TokenSchedule {
    /// Token count entering the head stage.
    pub fn final_tokens(&self) -> usize {
        self.per_block.last().map(|&(_, f)| f).unwrap_or(0)
    }
}

/// Sequence length after one drop: of `t - 1` image tokens,
/// `K = ceil((1-rate) * (t-1))` are kept and the rest fuse into one token
/// (none is appended when nothing is dropped).
pub fn tokens_after_drop(t: usize, rate: f64) -> usize {
    let images = t - 1;
    let kept = libm::ceil((1.0 - rate) * images as f64) as usize;
    let dropped = images - kept;
    1 + kept + usize::from(dropped > 0)
}

/// Unrolls the drop locations into per-block token counts. Drops apply after
/// the attention stage, so a drop block sees the full count in attention and
/// the reduced count in its FFN.
pub fn token_schedule(seq_len: usize, depth: usize, plan: &BsrPlan) -> TokenSchedule {
    let mut per_block = Vec::with_capacity(depth);
    let mut t = seq_len;
    for i in 0..depth {
        let t_mhsa = t;
        if plan.drop_locations.contains(&i) {
            t = tokens_after_drop(t, plan.drop_rate);
        }
        per_block.push((t_mhsa, t));
    }
    TokenSchedule { per_block }
}

// ── Importance scoring and selection ──

/// Mean class-attention mass per image token.
///
/// Per head, row 0 of the pre-softmax score map (`q_class @ K^T / sqrt(d)`)
/// restricted to image tokens is softmaxed, and the per-head distributions
/// are averaged. The result has one entry per image token and sums to 1.
pub fn compute_token_importance(state: &AttentionState) -> Result<Vec<f64>> {
    let shape = state.q.shape();
    let (heads, t, d) = (shape[0], shape[1], shape[2]);
    if t < 2 {
        return Err(Error::Dimension(String::from(
            "importance needs at least one image token besides the class token",
        )));
    }
    let scale = 1.0 / libm::sqrt(d as f64);
    let qd = state.q.data();
    let kd = state.k.data();
    let mut mean = vec![0.0; t - 1];
    let mut row = vec![0.0; t - 1];
    let mut probs = vec![0.0; t - 1];
    for h in 0..heads {
        let q_cls = &qd[h * t * d..h * t * d + d];
        for j in 1..t {
            let k_row = &kd[(h * t + j) * d..(h * t + j + 1) * d];
            row[j - 1] = scale * q_cls.iter().zip(k_row).map(|(a, b)| a * b).sum::<f64>();
        }
        crate::tape::softmax_into(&row, &mut probs);
        for (m, p) in mean.iter_mut().zip(&probs) {
            *m += p / heads as f64;
        }
    }
    Ok(mean)
}

/// Outcome of ranking image tokens at one drop location, expressed in row
/// indices of the `[t, embed]` activation (row 0 is the class token).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelection {
    /// Class row plus kept image rows, in original order.
    pub kept_rows: Vec<usize>,
    /// Dropped image rows, ascending.
    pub dropped_rows: Vec<usize>,
    /// Fusion weights aligned with `dropped_rows`; they sum to 1 when
    /// anything is dropped.
    pub weights: Vec<f64>,
}

impl TokenSelection {
    /// Sequence length after applying this selection.
    pub fn output_len(&self) -> usize {
        self.kept_rows.len() + usize::from(!self.dropped_rows.is_empty())
    }
}

/// Ranks image tokens by importance and splits them into kept and fused
/// sets. Keeps the `ceil((1-rate) * n)` highest-scoring tokens (ties resolve
/// toward the lower index); fusion weights are the dropped tokens' scores
/// renormalized to sum to 1.
pub fn select_tokens(scores: &[f64], rate: f64) -> Result<TokenSelection> {
    if scores.len() < 2 {
        return Err(Error::Dimension(format!(
            "token selection needs at least 2 image tokens, got {}",
            scores.len()
        )));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Plan(format!("drop rate must lie in (0, 1), got {rate}")));
    }
    let n = scores.len();
    let kept_count = libm::ceil((1.0 - rate) * n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("scores are finite").then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..kept_count].to_vec();
    let mut dropped: Vec<usize> = order[kept_count..].to_vec();
    kept.sort_unstable();
    dropped.sort_unstable();
    let total: f64 = dropped.iter().map(|&i| scores[i]).sum();
    let weights: Vec<f64> = if dropped.is_empty() {
        Vec::new()
    } else if total > 0.0 {
        dropped.iter().map(|&i| scores[i] / total).collect()
    } else {
        vec![1.0 / dropped.len() as f64; dropped.len()]
    };
    Ok(TokenSelection {
        kept_rows: core::iter::once(0).chain(kept.iter().map(|&i| i + 1)).collect(),
        dropped_rows: dropped.iter().map(|&i| i + 1).collect(),
        weights,
    })
}
