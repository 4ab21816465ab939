//! Reverse-mode autodiff over a write-once tape with selective retention.
//!
//! Every forward op appends a [`TapeNode`] and allocates its output in a
//! value arena. At record time the tape decides which buffers must survive
//! for backward (the *retained* set); [`TapeBuilder::finish`] frees
//! everything else. Backward then walks the nodes in reverse and may only
//! read retained buffers — reading anything else is a
//! [`Error::RetentionViolation`], which turns accidental over-freeing into a
//! hard error instead of a silent wrong gradient.
//!
//! Retention rules:
//! - ops linear in their input (matmul by a parameter, bias add, residual
//!   add, row gather/fuse, reshapes) retain nothing unless the parameter is
//!   trainable, in which case the input activation is kept for the weight
//!   gradient;
//! - non-linear ops keep exactly what their backward reads: GELU its input,
//!   row softmax its output, attention scores Q and K, attention apply V,
//!   LayerNorm the normalized input and the per-row (mean, 1/std) pair;
//! - nodes recorded before the gradient horizon, or on an inference tape,
//!   retain nothing and are never visited by backward.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn_acc, Tensor};
use crate::{Error, Result};

/// Bytes per element used for activation accounting (fp32 training width).
pub const ACCOUNT_WIDTH: u64 = 4;

// ── Identifiers ──

/// Index of a value in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ValueId(pub usize);

/// Index of a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

// ── Classification ──

/// Where in the network an op executes.
///
/// Drives gradient-horizon skipping and per-block memory attribution.
/// `PatchEmbed` parameters are never trainable, so backward never visits
/// that stage; `Head` (final LayerNorm + classifier) is always visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    PatchEmbed,
    Block(usize),
    Head,
}

impl Stage {
    /// True when gradients flow through this stage for the given horizon.
    pub fn in_grad_path(self, horizon: usize) -> bool {
        match self {
            Stage::PatchEmbed => false,
            Stage::Block(i) => i >= horizon,
            Stage::Head => true,
        }
    }
}

/// Why a buffer was kept alive for backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BufferRole {
    /// Per-head queries kept by the score op.
    Q,
    /// Per-head keys kept by the score op.
    K,
    /// Per-head values kept by the apply op.
    V,
    /// Row-softmax output (its backward needs the probabilities, not the input).
    SoftmaxProbs,
    /// GELU input.
    GeluInput,
    /// Per-row (mean, 1/std) pair of a LayerNorm.
    LnStats,
    /// Normalized LayerNorm input.
    LnXhat,
    /// Input activation of a trainable linear op, kept for the weight gradient.
    LinearInput,
}

impl BufferRole {
    /// Column label used in memory reports.
    pub fn report_label(self) -> &'static str {
        match self {
            BufferRole::Q | BufferRole::K | BufferRole::V => "qkv",
            BufferRole::SoftmaxProbs => "softmax",
            BufferRole::GeluInput => "gelu",
            BufferRole::LnStats => "ln_stat",
            BufferRole::LnXhat => "ln_xhat",
            BufferRole::LinearInput => "linear_extras",
        }
    }
}

/// Whether an op's input gradient depends on the op's input value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearityClass {
    /// Backward through the input needs only parameters (`dx = g @ W^T`).
    LinearInInput,
    /// Backward needs forward activations.
    NonLinearInInput,
}

/// Whether a tape records for training or pure inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    /// Retain what backward needs (subject to the gradient horizon).
    Training,
    /// Retain nothing; backward is unavailable.
    Inference,
}

// ── Ops ──

/// Recorded operation. Index lists and fusion weights are node metadata and
/// contribute nothing to retained bytes.
#[derive(Debug, Clone)]
pub enum Op {
    /// `y = x @ w` with `x: [m,k]`, `w: [k,n]`.
    MatMulParam { x: ValueId, w: ParamId, m: usize, k: usize, n: usize },
    /// `y[i,j] = x[i,j] + b[j]`.
    AddBias { x: ValueId, b: ParamId },
    /// `y = x + p` elementwise (position embedding).
    AddParam { x: ValueId, p: ParamId },
    /// `y = [row; x]` (class-token prepend).
    PrependParamRow { x: ValueId, row: ParamId },
    /// `y = a + b` elementwise (residual).
    Add { a: ValueId, b: ValueId },
    /// `y = c * x`.
    Scale { x: ValueId, c: f64 },
    /// `y[j] = x[index[j]]` over rows.
    GatherRows { x: ValueId, index: Vec<usize> },
    /// `y = [x[kept...]; sum_i weights[i] * x[dropped[i]]]` over rows.
    SelectFuse { x: ValueId, kept: Vec<usize>, dropped: Vec<usize>, weights: Vec<f64> },
    /// Columns `offset .. offset + heads*head_dim` of `x: [t, c]` reshaped to `[heads, t, head_dim]`.
    HeadsFromCols { x: ValueId, offset: usize, heads: usize, head_dim: usize },
    /// `[heads, t, head_dim]` back to `[t, heads*head_dim]`.
    MergeHeads { x: ValueId },
    /// Row-wise `y = gamma * xhat + beta`; `xhat` and `stats` are aux values.
    LayerNorm { x: ValueId, gamma: ParamId, beta: ParamId, xhat: ValueId, stats: ValueId, eps: f64 },
    /// Elementwise `x * Phi(x)` (exact, erf-based).
    Gelu { x: ValueId },
    /// Stable softmax over the last axis.
    SoftmaxRows { x: ValueId },
    /// Per-head `q @ k^T * scale` with `q, k: [h, t, d]`.
    AttnScores { q: ValueId, k: ValueId, scale: f64 },
    /// Per-head `probs @ v`.
    AttnApply { probs: ValueId, v: ValueId },
}

/// One recorded op plus everything backward needs to know about it.
#[derive(Debug, Clone)]
pub struct TapeNode {
    pub op: Op,
    pub out: ValueId,
    pub linearity: LinearityClass,
    pub stage: Stage,
    /// True when the op owns a trainable parameter (weight grads wanted).
    pub trainable: bool,
    /// Buffers this node caused to be retained.
    pub retained: Vec<(BufferRole, ValueId)>,
}

// ── Parameters ──

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
    pub stage: Stage,
}

/// Flat, name-addressable parameter store shared by model, tape and optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, stage: Stage) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "parameter {name}: shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        self.entries.push(ParamEntry {
            name: String::from(name),
            shape: shape.to_vec(),
            data,
            trainable: false,
            stage,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Number of scalars across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }
}

// ── Tape ──

#[derive(Debug, Clone)]
struct Slot {
    shape: Vec<usize>,
    data: Option<Vec<f64>>,
    retained: Option<BufferRole>,
}

impl Slot {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Finalized recording of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    slots: Vec<Slot>,
    nodes: Vec<TapeNode>,
    mode: TapeMode,
    horizon: usize,
    retained_bytes: u64,
    finalized: bool,
}

impl Tape {
    fn new(mode: TapeMode, horizon: usize) -> Tape {
        Tape {
            slots: Vec::new(),
            nodes: Vec::new(),
            mode,
            horizon,
            retained_bytes: 0,
            finalized: false,
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    /// First block index through which gradients flow.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn num_values(&self) -> usize {
        self.slots.len()
    }

    pub fn value_shape(&self, id: ValueId) -> &[usize] {
        &self.slots[id.0].shape
    }

    /// Data of a value, if it survived finalization.
    pub fn value_data(&self, id: ValueId) -> Option<&[f64]> {
        self.slots[id.0].data.as_deref()
    }

    /// Running total of retained activation bytes at [`ACCOUNT_WIDTH`].
    pub fn retained_bytes(&self) -> u64 {
        self.retained_bytes
    }

    /// Recomputes the retained-bytes total from the arena (consistency check).
    pub fn recompute_retained_bytes(&self) -> u64 {
        self.slots
            .iter()
            .filter(|s| s.retained.is_some())
            .map(|s| s.numel() as u64 * ACCOUNT_WIDTH)
            .sum()
    }

    /// Retained bytes broken down by (stage of the retaining node, role).
    pub fn retention_ledger(&self) -> BTreeMap<(Stage, BufferRole), u64> {
        let mut ledger = BTreeMap::new();
        for node in &self.nodes {
            for &(role, vid) in &node.retained {
                let bytes = self.slots[vid.0].numel() as u64 * ACCOUNT_WIDTH;
                *ledger.entry((node.stage, role)).or_insert(0) += bytes;
            }
        }
        ledger
    }

    /// Test hook: frees one value's storage without updating the retention
    /// ledger, so backward trips a retention violation.
    pub fn drop_value_data(&mut self, id: ValueId) {
        self.slots[id.0].data = None;
    }

    /// All `(value, role)` pairs currently retained, in recording order.
    pub fn retained_values(&self) -> Vec<(ValueId, BufferRole)> {
        self.nodes
            .iter()
            .flat_map(|n| n.retained.iter().map(|&(r, v)| (v, r)))
            .collect()
    }

    /// Test hook: marks one extra value as retained (under `role`, attributed
    /// to the node that produced it), so audits against the analytical model
    /// report a surplus.
    pub fn force_retain(&mut self, id: ValueId, role: BufferRole) {
        if self.slots[id.0].retained.is_some() {
            return;
        }
        self.slots[id.0].retained = Some(role);
        self.retained_bytes += self.slots[id.0].numel() as u64 * ACCOUNT_WIDTH;
        if let Some(node) = self.nodes.iter_mut().find(|n| n.out == id) {
            node.retained.push((role, id));
        }
    }

    fn read_retained(&self, id: ValueId, role: BufferRole) -> Result<&[f64]> {
        self.slots[id.0]
            .data
            .as_deref()
            .ok_or(Error::RetentionViolation { role, value: id.0 })
    }

    /// Reverse sweep. `seed` is d(loss)/d(output); gradients for values listed
    /// in `keep_values` are extracted into the result alongside the trainable
    /// parameter gradients.
    pub fn backward(
        &self,
        params: &ParamSet,
        output: ValueId,
        seed: &Tensor,
        keep_values: &[ValueId],
    ) -> Result<GradientTable> {
        if self.mode == TapeMode::Inference {
            return Err(Error::Plan(String::from("backward is unavailable on an inference tape")));
        }
        debug_assert!(self.finalized, "backward before finish()");
        let out_slot = &self.slots[output.0];
        if seed.numel() != out_slot.numel() {
            return Err(Error::Dimension(format!(
                "seed has {} elements, output value has {}",
                seed.numel(),
                out_slot.numel()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        grads[output.0] = Some(seed.data().to_vec());
        let mut table = GradientTable::default();

        for node in self.nodes.iter().rev() {
            if !node.stage.in_grad_path(self.horizon) {
                continue;
            }
            let Some(g) = grads[node.out.0].clone() else { continue };
            self.backward_node(node, &g, params, &mut grads, &mut table)?;
        }

        for &id in keep_values {
            if let Some(g) = grads[id.0].take() {
                let t = Tensor::new(&self.slots[id.0].shape, g).expect("slot shape consistent");
                table.values.insert(id, t);
            }
        }
        for (pid, g) in table.params.iter() {
            if !g.data().iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    params.entry(*pid).name
                )));
            }
        }
        Ok(table)
    }

    fn backward_node(
        &self,
        node: &TapeNode,
        g: &[f64],
        params: &ParamSet,
        grads: &mut Vec<Option<Vec<f64>>>,
        table: &mut GradientTable,
    ) -> Result<()> {
        match &node.op {
            Op::MatMulParam { x, w, m, k, n } => {
                let wd = params.data(*w);
                let mut dx = vec![0.0; m * k];
                matmul_nt(g, wd, *m, *n, *k, &mut dx);
                acc_value(grads, &self.slots, *x, &dx);
                if node.trainable {
                    let xd = self.read_retained(*x, BufferRole::LinearInput)?;
                    let dw = table.param_slot(params, *w);
                    matmul_tn_acc(xd, g, *m, *k, *n, dw);
                }
            }
            Op::AddBias { x, b } => {
                acc_value(grads, &self.slots, *x, g);
                if node.trainable {
                    let n = params.data(*b).len();
                    let db = table.param_slot(params, *b);
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                }
            }
            Op::AddParam { x, p } => {
                acc_value(grads, &self.slots, *x, g);
                if node.trainable {
                    let dp = table.param_slot(params, *p);
                    for (d, gi) in dp.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::PrependParamRow { x, row } => {
                let cols = self.slots[x.0].shape[1];
                acc_value(grads, &self.slots, *x, &g[cols..]);
                if node.trainable {
                    let dr = table.param_slot(params, *row);
                    for (d, gi) in dr.iter_mut().zip(&g[..cols]) {
                        *d += gi;
                    }
                }
            }
            Op::Add { a, b } => {
                acc_value(grads, &self.slots, *a, g);
                acc_value(grads, &self.slots, *b, g);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                acc_value(grads, &self.slots, *x, &dx);
            }
            Op::GatherRows { x, index } => {
                let cols = self.slots[x.0].shape[1];
                let mut dx = vec![0.0; self.slots[x.0].numel()];
                for (j, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        dx[src * cols + c] += g[j * cols + c];
                    }
                }
                acc_value(grads, &self.slots, *x, &dx);
            }
            Op::SelectFuse { x, kept, dropped, weights } => {
                let cols = self.slots[x.0].shape[1];
                let mut dx = vec![0.0; self.slots[x.0].numel()];
                for (j, &src) in kept.iter().enumerate() {
                    for c in 0..cols {
                        dx[src * cols + c] += g[j * cols + c];
                    }
                }
                if !dropped.is_empty() {
                    let fused_row = kept.len();
                    for (&src, &w) in dropped.iter().zip(weights) {
                        for c in 0..cols {
                            dx[src * cols + c] += w * g[fused_row * cols + c];
                        }
                    }
                }
                acc_value(grads, &self.slots, *x, &dx);
            }
            Op::HeadsFromCols { x, offset, heads, head_dim } => {
                let cols = self.slots[x.0].shape[1];
                let t = self.slots[x.0].shape[0];
                let mut dx = vec![0.0; self.slots[x.0].numel()];
                for h in 0..*heads {
                    for i in 0..t {
                        for j in 0..*head_dim {
                            dx[i * cols + offset + h * head_dim + j] +=
                                g[(h * t + i) * head_dim + j];
                        }
                    }
                }
                acc_value(grads, &self.slots, *x, &dx);
            }
            Op::MergeHeads { x } => {
                let s = &self.slots[x.0].shape;
                let (h, t, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; self.slots[x.0].numel()];
                for hh in 0..h {
                    for i in 0..t {
                        for j in 0..d {
                            dx[(hh * t + i) * d + j] += g[i * h * d + hh * d + j];
                        }
                    }
                }
                acc_value(grads, &self.slots, *x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, stats, .. } => {
                let xh = self.read_retained(*xhat, BufferRole::LnXhat)?;
                let st = self.read_retained(*stats, BufferRole::LnStats)?;
                let gam = params.data(*gamma);
                let cols = gam.len();
                let rows = self.slots[x.0].shape[0];
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    let inv = st[i * 2 + 1];
                    let grow = &g[i * cols..(i + 1) * cols];
                    let xrow = &xh[i * cols..(i + 1) * cols];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..cols {
                        let gx = grow[c] * gam[c];
                        m1 += gx;
                        m2 += gx * xrow[c];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for c in 0..cols {
                        let gx = grow[c] * gam[c];
                        dx[i * cols + c] = inv * (gx - m1 - xrow[c] * m2);
                    }
                }
                acc_value(grads, &self.slots, *x, &dx);
                if node.trainable {
                    {
                        let dgamma = table.param_slot(params, *gamma);
                        for i in 0..rows {
                            for c in 0..cols {
                                dgamma[c] += g[i * cols + c] * xh[i * cols + c];
                            }
                        }
                    }
                    let dbeta = table.param_slot(params, *beta);
                    for i in 0..rows {
                        for c in 0..cols {
                            dbeta[c] += g[i * cols + c];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xd = self.read_retained(*x, BufferRole::GeluInput)?;
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| gi * gelu_derivative(xi))
                    .collect();
                acc_value(grads, &self.slots, *x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let p = self.read_retained(node.out, BufferRole::SoftmaxProbs)?;
                let cols = *self.slots[x.0].shape.last().expect("softmax input has an axis");
                let mut dx = vec![0.0; p.len()];
                for (row_p, (row_g, row_dx)) in p
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols).zip(dx.chunks_exact_mut(cols)))
                {
                    let dot: f64 = row_p.iter().zip(row_g).map(|(pi, gi)| pi * gi).sum();
                    for c in 0..cols {
                        row_dx[c] = row_p[c] * (row_g[c] - dot);
                    }
                }
                acc_value(grads, &self.slots, *x, &dx);
            }
            Op::AttnScores { q, k, scale } => {
                let qd = self.read_retained(*q, BufferRole::Q)?;
                let kd = self.read_retained(*k, BufferRole::K)?;
                let s = &self.slots[q.0].shape;
                let (h, t, d) = (s[0], s[1], s[2]);
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                for hh in 0..h {
                    let gh = &g[hh * t * t..(hh + 1) * t * t];
                    let qh = &qd[hh * t * d..(hh + 1) * t * d];
                    let kh = &kd[hh * t * d..(hh + 1) * t * d];
                    // dq_h = scale * g_h @ k_h ; dk_h = scale * g_h^T @ q_h
                    let mut tmp = vec![0.0; t * d];
                    matmul_nn(gh, kh, t, t, d, &mut tmp);
                    for (dst, v) in dq[hh * t * d..(hh + 1) * t * d].iter_mut().zip(&tmp) {
                        *dst += scale * v;
                    }
                    let mut tmp2 = vec![0.0; t * d];
                    matmul_tn_acc(gh, qh, t, t, d, &mut tmp2);
                    for (dst, v) in dk[hh * t * d..(hh + 1) * t * d].iter_mut().zip(&tmp2) {
                        *dst += scale * v;
                    }
                }
                acc_value(grads, &self.slots, *q, &dq);
                acc_value(grads, &self.slots, *k, &dk);
            }
            Op::AttnApply { probs, v } => {
                let pd = self.read_retained(*probs, BufferRole::SoftmaxProbs)?;
                let vd = self.read_retained(*v, BufferRole::V)?;
                let s = &self.slots[v.0].shape;
                let (h, t, d) = (s[0], s[1], s[2]);
                let mut dp = vec![0.0; pd.len()];
                let mut dv = vec![0.0; vd.len()];
                for hh in 0..h {
                    let gh = &g[hh * t * d..(hh + 1) * t * d];
                    let ph = &pd[hh * t * t..(hh + 1) * t * t];
                    let vh = &vd[hh * t * d..(hh + 1) * t * d];
                    // dp_h = g_h @ v_h^T ; dv_h = p_h^T @ g_h
                    matmul_nt(gh, vh, t, d, t, &mut dp[hh * t * t..(hh + 1) * t * t]);
                    matmul_tn_acc(ph, gh, t, t, d, &mut dv[hh * t * d..(hh + 1) * t * d]);
                }
                acc_value(grads, &self.slots, *probs, &dp);
                acc_value(grads, &self.slots, *v, &dv);
            }
        }
        Ok(())
    }
}

fn acc_value(grads: &mut [Option<Vec<f64>>], slots: &[Slot], id: ValueId, src: &[f64]) {
    let entry = grads[id.0].get_or_insert_with(|| vec![0.0; slots[id.0].numel()]);
    for (d, s) in entry.iter_mut().zip(src) {
        *d += s;
    }
}

// ── Gradients ──

/// Gradients produced by one backward sweep, keyed deterministically.
#[derive(Debug, Clone, Default)]
pub struct GradientTable {
    params: BTreeMap<ParamId, Tensor>,
    values: BTreeMap<ValueId, Tensor>,
}

impl GradientTable {
    fn param_slot(&mut self, params: &ParamSet, id: ParamId) -> &mut [f64] {
        self.params
            .entry(id)
            .or_insert_with(|| Tensor::zeros(params.shape(id)))
            .data_mut()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn value(&self, id: ValueId) -> Option<&Tensor> {
        self.values.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Inserts or replaces one parameter gradient.
    pub fn insert_param(&mut self, id: ParamId, grad: Tensor) {
        self.params.insert(id, grad);
    }

    /// Accumulates another table (same topology) into this one, in place.
    pub fn merge(&mut self, other: &GradientTable) {
        for (id, g) in other.params.iter() {
            match self.params.get_mut(id) {
                Some(mine) => {
                    for (d, s) in mine.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    /// Scales every parameter gradient by `c`.
    pub fn scale(&mut self, c: f64) {
        for g in self.params.values_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
}

// ── Recording ──

/// Records one forward pass against a fixed parameter set.
pub struct TapeBuilder<'p> {
    params: &'p ParamSet,
    tape: Tape,
    stage: Stage,
}

impl<'p> TapeBuilder<'p> {
    pub fn new(params: &'p ParamSet, mode: TapeMode, horizon: usize) -> TapeBuilder<'p> {
        TapeBuilder { params, tape: Tape::new(mode, horizon), stage: Stage::PatchEmbed }
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    fn in_grad_path(&self) -> bool {
        self.tape.mode == TapeMode::Training && self.stage.in_grad_path(self.tape.horizon)
    }

    fn alloc(&mut self, shape: &[usize], data: Vec<f64>) -> Result<ValueId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!(
                "op at {:?} produced a non-finite value",
                self.stage
            )));
        }
        self.tape.slots.push(Slot { shape: shape.to_vec(), data: Some(data), retained: None });
        Ok(ValueId(self.tape.slots.len() - 1))
    }

    fn retain(&mut self, node_retained: &mut Vec<(BufferRole, ValueId)>, id: ValueId, role: BufferRole) {
        let slot = &mut self.tape.slots[id.0];
        debug_assert!(slot.retained.is_none(), "value retained twice");
        slot.retained = Some(role);
        self.tape.retained_bytes += slot.numel() as u64 * ACCOUNT_WIDTH;
        node_retained.push((role, id));
    }

    fn push_node(
        &mut self,
        op: Op,
        out: ValueId,
        linearity: LinearityClass,
        trainable: bool,
        retained: Vec<(BufferRole, ValueId)>,
    ) {
        self.tape.nodes.push(TapeNode {
            op,
            out,
            linearity,
            stage: self.stage,
            trainable,
            retained,
        });
    }

    /// Forward-time view of a value (always present before `finish`).
    pub fn value_data(&self, id: ValueId) -> &[f64] {
        self.tape.slots[id.0].data.as_deref().expect("value live during recording")
    }

    pub fn value_shape(&self, id: ValueId) -> &[usize] {
        &self.tape.slots[id.0].shape
    }

    /// Copies a value out as a tensor.
    pub fn tensor(&self, id: ValueId) -> Tensor {
        Tensor::new(self.value_shape(id), self.value_data(id).to_vec())
            .expect("slot shape consistent")
    }

    pub fn retained_bytes(&self) -> u64 {
        self.tape.retained_bytes
    }

    /// Seals the recording: storage of every non-retained value is freed.
    pub fn finish(mut self) -> Tape {
        for slot in &mut self.tape.slots {
            if slot.retained.is_none() {
                slot.data = None;
            }
        }
        self.tape.finalized = true;
        self.tape
    }

    // ── Ops ──

    /// Introduces a leaf value (no producing node).
    pub fn input(&mut self, t: &Tensor) -> Result<ValueId> {
        self.alloc(t.shape(), t.data().to_vec())
    }

    /// `y = x @ w`; retains `x` when `w` is trainable.
    pub fn matmul(&mut self, x: ValueId, w: ParamId) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        let ws = self.params.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Dimension(format!(
                "matmul: value {xs:?} incompatible with parameter {:?} {ws:?}",
                self.params.entry(w).name
            )));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value_data(x), self.params.data(w), m, k, n, &mut out);
        let outv = self.alloc(&[m, n], out)?;
        let trainable = self.params.is_trainable(w);
        let mut retained = Vec::new();
        if trainable && self.in_grad_path() {
            self.retain(&mut retained, x, BufferRole::LinearInput);
        }
        self.push_node(
            Op::MatMulParam { x, w, m, k, n },
            outv,
            LinearityClass::LinearInInput,
            trainable,
            retained,
        );
        Ok(outv)
    }

    /// `y[i,j] = x[i,j] + b[j]`; retains nothing (bias grad is a column sum).
    pub fn add_bias(&mut self, x: ValueId, b: ParamId) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| Error::Dimension(String::from("add_bias on a scalar")))?;
        if self.params.data(b).len() != n {
            return Err(Error::Dimension(format!(
                "add_bias: bias {} has {} elements, rows have {n}",
                self.params.entry(b).name,
                self.params.data(b).len()
            )));
        }
        let bd = self.params.data(b).to_vec();
        let out: Vec<f64> = self
            .value_data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let outv = self.alloc(&xs, out)?;
        let trainable = self.params.is_trainable(b);
        self.push_node(Op::AddBias { x, b }, outv, LinearityClass::LinearInInput, trainable, Vec::new());
        Ok(outv)
    }

    /// `y = x + p` elementwise.
    pub fn add_param(&mut self, x: ValueId, p: ParamId) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        if self.params.data(p).len() != self.value_data(x).len() {
            return Err(Error::Dimension(format!(
                "add_param: {} shape {:?} vs value {xs:?}",
                self.params.entry(p).name,
                self.params.shape(p)
            )));
        }
        let out: Vec<f64> = self
            .value_data(x)
            .iter()
            .zip(self.params.data(p))
            .map(|(a, b)| a + b)
            .collect();
        let outv = self.alloc(&xs, out)?;
        let trainable = self.params.is_trainable(p);
        self.push_node(Op::AddParam { x, p }, outv, LinearityClass::LinearInInput, trainable, Vec::new());
        Ok(outv)
    }

    /// `y = [row; x]`.
    pub fn prepend_param_row(&mut self, x: ValueId, row: ParamId) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        let cols = xs[1];
        if self.params.data(row).len() != cols {
            return Err(Error::Dimension(format!(
                "prepend_param_row: row {} has {} elements, matrix has {cols} columns",
                self.params.entry(row).name,
                self.params.data(row).len()
            )));
        }
        let mut out = self.params.data(row).to_vec();
        out.extend_from_slice(self.value_data(x));
        let outv = self.alloc(&[xs[0] + 1, cols], out)?;
        let trainable = self.params.is_trainable(row);
        self.push_node(
            Op::PrependParamRow { x, row },
            outv,
            LinearityClass::LinearInInput,
            trainable,
            Vec::new(),
        );
        Ok(outv)
    }

    /// `y = a + b` elementwise (residual connection).
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value_shape(a) != self.value_shape(b) {
            return Err(Error::Dimension(format!(
                "add: shapes differ, {:?} vs {:?}",
                self.value_shape(a),
                self.value_shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value_data(a)
            .iter()
            .zip(self.value_data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value_shape(a).to_vec();
        let outv = self.alloc(&shape, out)?;
        self.push_node(Op::Add { a, b }, outv, LinearityClass::LinearInInput, false, Vec::new());
        Ok(outv)
    }

    /// `y = c * x`.
    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let out: Vec<f64> = self.value_data(x).iter().map(|v| v * c).collect();
        let shape = self.value_shape(x).to_vec();
        let outv = self.alloc(&shape, out)?;
        self.push_node(Op::Scale { x, c }, outv, LinearityClass::LinearInInput, false, Vec::new());
        Ok(outv)
    }

    /// Gathers rows of a rank-2 value.
    pub fn gather_rows(&mut self, x: ValueId, index: &[usize]) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        let rows = xs[0];
        let cols = xs[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("gather_rows: row {bad} out of {rows}")));
        }
        let xd = self.value_data(x);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let outv = self.alloc(&[index.len(), cols], out)?;
        self.push_node(
            Op::GatherRows { x, index: index.to_vec() },
            outv,
            LinearityClass::LinearInInput,
            false,
            Vec::new(),
        );
        Ok(outv)
    }

    /// Keeps `kept` rows in order and appends one weighted fusion of the
    /// `dropped` rows (skipped when `dropped` is empty). Indices and weights
    /// are node metadata: they occupy no retained bytes.
    pub fn select_fuse(
        &mut self,
        x: ValueId,
        kept: &[usize],
        dropped: &[usize],
        weights: &[f64],
    ) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        let rows = xs[0];
        let cols = xs[1];
        if kept.is_empty() {
            return Err(Error::Dimension(String::from("select_fuse: kept set is empty")));
        }
        if dropped.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "select_fuse: {} dropped rows but {} weights",
                dropped.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = kept.iter().chain(dropped).find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("select_fuse: row {bad} out of {rows}")));
        }
        let xd = self.value_data(x);
        let out_rows = kept.len() + usize::from(!dropped.is_empty());
        let mut out = Vec::with_capacity(out_rows * cols);
        for &i in kept {
            out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        if !dropped.is_empty() {
            let mut fused = vec![0.0; cols];
            for (&i, &w) in dropped.iter().zip(weights) {
                for c in 0..cols {
                    fused[c] += w * xd[i * cols + c];
                }
            }
            out.extend_from_slice(&fused);
        }
        let outv = self.alloc(&[out_rows, cols], out)?;
        self.push_node(
            Op::SelectFuse {
                x,
                kept: kept.to_vec(),
                dropped: dropped.to_vec(),
                weights: weights.to_vec(),
            },
            outv,
            LinearityClass::LinearInInput,
            false,
            Vec::new(),
        );
        Ok(outv)
    }

    /// Reshapes columns `offset..offset+heads*head_dim` of `x: [t, c]` into
    /// `[heads, t, head_dim]`.
    pub fn heads_from_cols(
        &mut self,
        x: ValueId,
        offset: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        let (t, c) = (xs[0], xs[1]);
        if offset + heads * head_dim > c {
            return Err(Error::Dimension(format!(
                "heads_from_cols: columns {offset}..{} exceed width {c}",
                offset + heads * head_dim
            )));
        }
        let xd = self.value_data(x);
        let mut out = vec![0.0; heads * t * head_dim];
        for h in 0..heads {
            for i in 0..t {
                for j in 0..head_dim {
                    out[(h * t + i) * head_dim + j] = xd[i * c + offset + h * head_dim + j];
                }
            }
        }
        let outv = self.alloc(&[heads, t, head_dim], out)?;
        self.push_node(
            Op::HeadsFromCols { x, offset, heads, head_dim },
            outv,
            LinearityClass::LinearInInput,
            false,
            Vec::new(),
        );
        Ok(outv)
    }

    /// `[heads, t, head_dim]` back to `[t, heads*head_dim]`.
    pub fn merge_heads(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("merge_heads expects rank 3, got {xs:?}")));
        }
        let (h, t, d) = (xs[0], xs[1], xs[2]);
        let xd = self.value_data(x);
        let mut out = vec![0.0; t * h * d];
        for hh in 0..h {
            for i in 0..t {
                for j in 0..d {
                    out[i * h * d + hh * d + j] = xd[(hh * t + i) * d + j];
                }
            }
        }
        let outv = self.alloc(&[t, h * d], out)?;
        self.push_node(Op::MergeHeads { x }, outv, LinearityClass::LinearInInput, false, Vec::new());
        Ok(outv)
    }

    /// Row-wise LayerNorm. Retains the normalized input and per-row
    /// (mean, 1/std) stats; backward always reads both, so they are kept for
    /// frozen and trainable blocks alike.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ParamId, beta: ParamId, eps: f64) -> Result<ValueId> {
        let xs = self.value_shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!("layer_norm expects rank 2, got {xs:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        if self.params.data(gamma).len() != cols || self.params.data(beta).len() != cols {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma/beta width mismatch against {cols} columns"
            )));
        }
        let xd = self.value_data(x).to_vec();
        let gam = self.params.data(gamma).to_vec();
        let bet = self.params.data(beta).to_vec();
        let mut xhat = vec![0.0; rows * cols];
        let mut stats = vec![0.0; rows * 2];
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            stats[i * 2] = mean;
            stats[i * 2 + 1] = inv;
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                xhat[i * cols + c] = xh;
                out[i * cols + c] = gam[c] * xh + bet[c];
            }
        }
        let xhat_v = self.alloc(&[rows, cols], xhat)?;
        let stats_v = self.alloc(&[rows, 2], stats)?;
        let outv = self.alloc(&xs, out)?;
        let trainable = self.params.is_trainable(gamma);
        let mut retained = Vec::new();
        if self.in_grad_path() {
            self.retain(&mut retained, xhat_v, BufferRole::LnXhat);
            self.retain(&mut retained, stats_v, BufferRole::LnStats);
        }
        self.push_node(
            Op::LayerNorm { x, gamma, beta, xhat: xhat_v, stats: stats_v, eps },
            outv,
            LinearityClass::NonLinearInInput,
            trainable,
            retained,
        );
        Ok(outv)
    }

    /// Exact GELU `x * Phi(x)`; retains its input.
    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let out: Vec<f64> = self.value_data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.value_shape(x).to_vec();
        let outv = self.alloc(&shape, out)?;
        let mut retained = Vec::new();
        if self.in_grad_path() {
            self.retain(&mut retained, x, BufferRole::GeluInput);
        }
        self.push_node(Op::Gelu { x }, outv, LinearityClass::NonLinearInInput, false, retained);
        Ok(outv)
    }

    /// Stable softmax over the last axis; retains its output (the backward
    /// Jacobian is a function of the probabilities alone).
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.value_shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Dimension(String::from("softmax_rows on a scalar")))?;
        let xd = self.value_data(x);
        let mut out = vec![0.0; xd.len()];
        for (row, out_row) in xd.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            softmax_into(row, out_row);
        }
        let outv = self.alloc(&shape, out)?;
        let mut retained = Vec::new();
        if self.in_grad_path() {
            self.retain(&mut retained, outv, BufferRole::SoftmaxProbs);
        }
        self.push_node(Op::SoftmaxRows { x }, outv, LinearityClass::NonLinearInInput, false, retained);
        Ok(outv)
    }

    /// Per-head scaled score map `q @ k^T * scale`; retains `q` and `k`.
    pub fn attn_scores(&mut self, q: ValueId, k: ValueId, scale: f64) -> Result<ValueId> {
        let qs = self.value_shape(q).to_vec();
        let ks = self.value_shape(k).to_vec();
        if qs.len() != 3 || qs != ks {
            return Err(Error::Dimension(format!(
                "attn_scores: expected matching [h,t,d] operands, got {qs:?} and {ks:?}"
            )));
        }
        let (h, t, d) = (qs[0], qs[1], qs[2]);
        let qd = self.value_data(q);
        let kd = self.value_data(k);
        let mut out = vec![0.0; h * t * t];
        for hh in 0..h {
            let qh = &qd[hh * t * d..(hh + 1) * t * d];
            let kh = &kd[hh * t * d..(hh + 1) * t * d];
            let oh = &mut out[hh * t * t..(hh + 1) * t * t];
            matmul_nt(qh, kh, t, d, t, oh);
            for v in oh.iter_mut() {
                *v *= scale;
            }
        }
        let outv = self.alloc(&[h, t, t], out)?;
        let mut retained = Vec::new();
        if self.in_grad_path() {
            self.retain(&mut retained, q, BufferRole::Q);
            self.retain(&mut retained, k, BufferRole::K);
        }
        self.push_node(
            Op::AttnScores { q, k, scale },
            outv,
            LinearityClass::NonLinearInInput,
            false,
            retained,
        );
        Ok(outv)
    }

    /// Per-head `probs @ v`; retains `v` (the probabilities are already
    /// retained by the softmax node that produced them).
    pub fn attn_apply(&mut self, probs: ValueId, v: ValueId) -> Result<ValueId> {
        let ps = self.value_shape(probs).to_vec();
        let vs = self.value_shape(v).to_vec();
        if ps.len() != 3 || vs.len() != 3 || ps[0] != vs[0] || ps[1] != ps[2] || ps[2] != vs[1] {
            return Err(Error::Dimension(format!(
                "attn_apply: probs {ps:?} incompatible with values {vs:?}"
            )));
        }
        let (h, t, d) = (vs[0], vs[1], vs[2]);
        let pd = self.value_data(probs);
        let vd = self.value_data(v);
        let mut out = vec![0.0; h * t * d];
        for hh in 0..h {
            let ph = &pd[hh * t * t..(hh + 1) * t * t];
            let vh = &vd[hh * t * d..(hh + 1) * t * d];
            matmul_nn(ph, vh, t, t, d, &mut out[hh * t * d..(hh + 1) * t * d]);
        }
        let outv = self.alloc(&[h, t, d], out)?;
        let mut retained = Vec::new();
        if self.in_grad_path() {
            self.retain(&mut retained, v, BufferRole::V);
        }
        self.push_node(
            Op::AttnApply { probs, v },
            outv,
            LinearityClass::NonLinearInInput,
            false,
            retained,
        );
        Ok(outv)
    }
}

// ── Scalar kernels ──

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF via erf.
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx of exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    phi_cdf + x * pdf
}

/// Numerically stable softmax of one row.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = libm::exp(v - max);
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
