//! Pre-LN Vision Transformer recorded on the autodiff tape.
//!
//! Every block is `x + MHSA(LN(x))` followed by `y + FFN(LN(y))`; token
//! dropping (when the scheme asks for it) happens between the two, so the
//! attention stage of a drop block sees the full sequence and its FFN the
//! reduced one. The patch projection, class token and position table are
//! always frozen; the final LayerNorm and classifier head always train.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::policy::{compute_token_importance, select_tokens, TrainScheme};
use crate::tape::{ParamId, ParamSet, Stage, Tape, TapeBuilder, TapeMode, ValueId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// LayerNorm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-6;

// ── Configuration ──

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// DeiT-S: 224px, 16px patches, width 384, 6 heads, 12 blocks.
    pub fn deit_small(num_classes: usize) -> ViTConfig {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 384,
            heads: 6,
            ffn_mult: 4,
            depth: 12,
            num_classes,
        }
    }

    /// ViT-B: width 768, 12 heads, 12 blocks.
    pub fn vit_base(num_classes: usize) -> ViTConfig {
        ViTConfig { embed_dim: 768, heads: 12, ..ViTConfig::deit_small(num_classes) }
    }

    /// Desk-scale model for training experiments and gradient checks.
    pub fn toy(num_classes: usize) -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            heads: 2,
            ffn_mult: 2,
            depth: 4,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.channels == 0
            || self.embed_dim == 0
            || self.heads == 0
            || self.ffn_mult == 0
            || self.depth == 0
            || self.num_classes == 0
        {
            return Err(Error::Plan(String::from("config fields must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Plan(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Plan(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens (`N`).
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token (`N + 1`).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.embed_dim * self.ffn_mult
    }

    /// Flattened patch length (`P*P*C`).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

// ── Parameters ──

/// Parameter ids of one encoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParamIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl BlockParamIds {
    pub fn all(&self) -> [ParamId; 12] {
        [
            self.ln1_g, self.ln1_b, self.qkv_w, self.qkv_b, self.proj_w, self.proj_b,
            self.ln2_g, self.ln2_b, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
        ]
    }
}

/// Parameter ids of a quarter-width residual side block.
#[derive(Debug, Clone, Copy)]
pub struct SideParamIds {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub block: BlockParamIds,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

/// Model parameters plus the id map into the [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub params: ParamSet,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParamIds>,
    side: Vec<Option<SideParamIds>>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Weight init: normal(0, 0.02) clipped to two standard deviations.
fn trunc_normal<R: Rng>(rng: &mut R) -> f64 {
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid sigma");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 0.04 {
            return x;
        }
    }
}

fn init_weight<R: Rng>(rng: &mut R, numel: usize) -> Vec<f64> {
    (0..numel).map(|_| trunc_normal(rng)).collect()
}

impl ViTModel {
    /// Fresh model with truncated-normal weights, zero biases, unit LN gains.
    pub fn new<R: Rng>(config: &ViTConfig, rng: &mut R) -> Result<ViTModel> {
        ViTModel::build(config, &[], rng)
    }

    /// Fresh model carrying quarter-width side blocks at `side_at`.
    pub fn with_side_blocks<R: Rng>(
        config: &ViTConfig,
        side_at: &[usize],
        rng: &mut R,
    ) -> Result<ViTModel> {
        ViTModel::build(config, side_at, rng)
    }

    fn build<R: Rng>(config: &ViTConfig, side_at: &[usize], rng: &mut R) -> Result<ViTModel> {
        config.validate()?;
        let l = config.embed_dim;
        let t = config.seq_len();
        let mut p = ParamSet::new();

        let patch_w = p.add(
            "patch.w",
            &[config.patch_dim(), l],
            init_weight(rng, config.patch_dim() * l),
            Stage::PatchEmbed,
        )?;
        let patch_b = p.add("patch.b", &[l], vec![0.0; l], Stage::PatchEmbed)?;
        let cls = p.add("cls", &[l], init_weight(rng, l), Stage::PatchEmbed)?;
        let pos = p.add("pos", &[t, l], init_weight(rng, t * l), Stage::PatchEmbed)?;

        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(add_block_params(&mut p, &format!("block{i}"), Stage::Block(i), l, config.ffn_dim(), rng)?);
        }

        let mut side: Vec<Option<SideParamIds>> = vec![None; config.depth];
        if !side_at.is_empty() {
            if l % 4 != 0 || (l / 4) % config.heads != 0 {
                return Err(Error::Plan(format!(
                    "side blocks need a quarter width divisible by {} heads, embed dim is {l}",
                    config.heads
                )));
            }
            let ls = l / 4;
            for &i in side_at {
                if i >= config.depth {
                    return Err(Error::Plan(format!(
                        "side block {i} out of range for depth {}",
                        config.depth
                    )));
                }
                let name = format!("side{i}");
                let down_w = p.add(&format!("{name}.down.w"), &[l, ls], init_weight(rng, l * ls), Stage::Block(i))?;
                let down_b = p.add(&format!("{name}.down.b"), &[ls], vec![0.0; ls], Stage::Block(i))?;
                let block = add_block_params(&mut p, &name, Stage::Block(i), ls, ls * config.ffn_mult, rng)?;
                let up_w = p.add(&format!("{name}.up.w"), &[ls, l], init_weight(rng, ls * l), Stage::Block(i))?;
                let up_b = p.add(&format!("{name}.up.b"), &[l], vec![0.0; l], Stage::Block(i))?;
                side[i] = Some(SideParamIds { down_w, down_b, block, up_w, up_b });
            }
        }

        let ln_f_g = p.add("ln_f.g", &[l], vec![1.0; l], Stage::Head)?;
        let ln_f_b = p.add("ln_f.b", &[l], vec![0.0; l], Stage::Head)?;
        let head_w = p.add(
            "head.w",
            &[l, config.num_classes],
            init_weight(rng, l * config.num_classes),
            Stage::Head,
        )?;
        let head_b = p.add("head.b", &[config.num_classes], vec![0.0; config.num_classes], Stage::Head)?;

        Ok(ViTModel {
            config: config.clone(),
            params: p,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            side,
            ln_f_g,
            ln_f_b,
            head_w,
            head_b,
        })
    }

    pub fn block_ids(&self, i: usize) -> &BlockParamIds {
        &self.blocks[i]
    }

    pub fn side_ids(&self, i: usize) -> Option<&SideParamIds> {
        self.side[i].as_ref()
    }

    /// Marks the trainable parameter set for `scheme`. The patch projection,
    /// class token and position table stay frozen under every scheme; the
    /// final LayerNorm and head always train.
    pub fn apply_scheme(&mut self, scheme: &TrainScheme) -> Result<()> {
        let depth = self.config.depth;
        scheme.validate(depth, self.config.seq_len())?;
        let ids: Vec<ParamId> = self.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.params.set_trainable(id, false);
        }
        match scheme {
            TrainScheme::Full => {
                for i in 0..depth {
                    self.set_block_trainable(self.blocks[i], true);
                }
            }
            TrainScheme::HeadOnly => {}
            TrainScheme::Bsr(plan) => {
                for &i in &plan.trainable_blocks {
                    self.set_block_trainable(self.blocks[i], true);
                }
            }
            TrainScheme::Residual(plan) => {
                for &i in &plan.side_blocks {
                    let side = self.side[i].ok_or_else(|| {
                        Error::Plan(format!("model was built without a side block at {i}"))
                    })?;
                    self.params.set_trainable(side.down_w, true);
                    self.params.set_trainable(side.down_b, true);
                    self.params.set_trainable(side.up_w, true);
                    self.params.set_trainable(side.up_b, true);
                    self.set_block_trainable(side.block, true);
                }
            }
        }
        self.params.set_trainable(self.ln_f_g, true);
        self.params.set_trainable(self.ln_f_b, true);
        self.params.set_trainable(self.head_w, true);
        self.params.set_trainable(self.head_b, true);
        Ok(())
    }

    fn set_block_trainable(&mut self, ids: BlockParamIds, trainable: bool) {
        for id in ids.all() {
            self.params.set_trainable(id, trainable);
        }
    }
}

fn add_block_params<R: Rng>(
    p: &mut ParamSet,
    name: &str,
    stage: Stage,
    width: usize,
    ffn: usize,
    rng: &mut R,
) -> Result<BlockParamIds> {
    Ok(BlockParamIds {
        ln1_g: p.add(&format!("{name}.ln1.g"), &[width], vec![1.0; width], stage)?,
        ln1_b: p.add(&format!("{name}.ln1.b"), &[width], vec![0.0; width], stage)?,
        qkv_w: p.add(&format!("{name}.qkv.w"), &[width, 3 * width], init_weight(rng, width * 3 * width), stage)?,
        qkv_b: p.add(&format!("{name}.qkv.b"), &[3 * width], vec![0.0; 3 * width], stage)?,
        proj_w: p.add(&format!("{name}.proj.w"), &[width, width], init_weight(rng, width * width), stage)?,
        proj_b: p.add(&format!("{name}.proj.b"), &[width], vec![0.0; width], stage)?,
        ln2_g: p.add(&format!("{name}.ln2.g"), &[width], vec![1.0; width], stage)?,
        ln2_b: p.add(&format!("{name}.ln2.b"), &[width], vec![0.0; width], stage)?,
        fc1_w: p.add(&format!("{name}.fc1.w"), &[width, ffn], init_weight(rng, width * ffn), stage)?,
        fc1_b: p.add(&format!("{name}.fc1.b"), &[ffn], vec![0.0; ffn], stage)?,
        fc2_w: p.add(&format!("{name}.fc2.w"), &[ffn, width], init_weight(rng, ffn * width), stage)?,
        fc2_b: p.add(&format!("{name}.fc2.b"), &[width], vec![0.0; width], stage)?,
    })
}

// ── Forward ──

/// Per-head attention tensors of one block, copied out of the tape.
#[derive(Debug, Clone)]
pub struct AttentionState {
    /// `[heads, t, head_dim]`
    pub q: Tensor,
    /// `[heads, t, head_dim]`
    pub k: Tensor,
    /// `[heads, t, head_dim]`
    pub v: Tensor,
    /// `[heads, t, t]`, rows sum to 1.
    pub probs: Tensor,
}

/// Everything one recorded forward pass produces.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub tape: Tape,
    pub logits_id: ValueId,
    /// Tape value entering each block.
    pub block_inputs: Vec<ValueId>,
    pub states: Vec<AttentionState>,
    /// Per-block (attention tokens, FFN tokens) actually seen at runtime.
    pub token_counts: Vec<(usize, usize)>,
}

/// Flattens an image `[C, S, S]` into patch rows `[N, P*P*C]`; row `n` walks
/// channel-major over the patch at grid position `n` (row-major grid).
pub fn extract_patches(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let s = config.image_size;
    let c = config.channels;
    let p = config.patch_size;
    if image.shape() != [c, s, s] {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match config [{c}, {s}, {s}]",
            image.shape()
        )));
    }
    let g = config.grid();
    let d = image.data();
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out.push(d[ch * s * s + (gy * p + py) * s + (gx * p + px)]);
                    }
                }
            }
        }
    }
    Tensor::new(&[config.num_patches(), config.patch_dim()], out)
}

/// Attention stage of one block: QKV projection, scaled per-head scores,
/// row softmax, value mixing and output projection.
pub fn mhsa_forward(
    b: &mut TapeBuilder,
    ids: &BlockParamIds,
    heads: usize,
    x: ValueId,
) -> Result<(ValueId, AttentionState)> {
    let width = b.value_shape(x)[1];
    if width % heads != 0 {
        return Err(Error::Dimension(format!("width {width} not divisible by {heads} heads")));
    }
    let d = width / heads;
    let qkv = b.matmul(x, ids.qkv_w)?;
    let qkv = b.add_bias(qkv, ids.qkv_b)?;
    let q = b.heads_from_cols(qkv, 0, heads, d)?;
    let k = b.heads_from_cols(qkv, width, heads, d)?;
    let v = b.heads_from_cols(qkv, 2 * width, heads, d)?;
    let scores = b.attn_scores(q, k, 1.0 / libm::sqrt(d as f64))?;
    let probs = b.softmax_rows(scores)?;
    let ctx = b.attn_apply(probs, v)?;
    let merged = b.merge_heads(ctx)?;
    let out = b.matmul(merged, ids.proj_w)?;
    let out = b.add_bias(out, ids.proj_b)?;
    let state = AttentionState {
        q: b.tensor(q),
        k: b.tensor(k),
        v: b.tensor(v),
        probs: b.tensor(probs),
    };
    Ok((out, state))
}

/// One pre-LN encoder block; `drop` carries the rate when this block is a
/// drop location. Returns the output value, the attention state and the
/// (attention, FFN) token counts.
pub fn block_forward(
    b: &mut TapeBuilder,
    ids: &BlockParamIds,
    heads: usize,
    x: ValueId,
    drop: Option<f64>,
) -> Result<(ValueId, AttentionState, (usize, usize))> {
    let t_mhsa = b.value_shape(x)[0];
    let ln1 = b.layer_norm(x, ids.ln1_g, ids.ln1_b, LN_EPS)?;
    let (attn, state) = mhsa_forward(b, ids, heads, ln1)?;
    let mut y = b.add(x, attn)?;
    if let Some(rate) = drop {
        let scores = compute_token_importance(&state)?;
        let sel = select_tokens(&scores, rate)?;
        y = b.select_fuse(y, &sel.kept_rows, &sel.dropped_rows, &sel.weights)?;
    }
    let t_ffn = b.value_shape(y)[0];
    let ln2 = b.layer_norm(y, ids.ln2_g, ids.ln2_b, LN_EPS)?;
    let h = b.matmul(ln2, ids.fc1_w)?;
    let h = b.add_bias(h, ids.fc1_b)?;
    let h = b.gelu(h)?;
    let h = b.matmul(h, ids.fc2_w)?;
    let h = b.add_bias(h, ids.fc2_b)?;
    let out = b.add(y, h)?;
    Ok((out, state, (t_mhsa, t_ffn)))
}

/// Quarter-width side branch: down-projection, full encoder block, up-projection.
pub fn side_forward(
    b: &mut TapeBuilder,
    side: &SideParamIds,
    heads: usize,
    x: ValueId,
) -> Result<ValueId> {
    let down = b.matmul(x, side.down_w)?;
    let down = b.add_bias(down, side.down_b)?;
    let (block_out, _, _) = block_forward(b, &side.block, heads, down, None)?;
    let up = b.matmul(block_out, side.up_w)?;
    b.add_bias(up, side.up_b)
}

/// Records a full forward pass over pre-extracted patches `[N, P*P*C]`.
pub fn forward_patches(
    model: &ViTModel,
    scheme: &TrainScheme,
    patches: &Tensor,
    mode: TapeMode,
) -> Result<ForwardPass> {
    let config = &model.config;
    let expected = [config.num_patches(), config.patch_dim()];
    if patches.shape() != expected {
        return Err(Error::Dimension(format!(
            "patch matrix shape {:?} does not match config {expected:?}",
            patches.shape()
        )));
    }
    if let TrainScheme::Residual(plan) = scheme {
        for &i in &plan.side_blocks {
            if model.side[i].is_none() {
                return Err(Error::Plan(format!("model was built without a side block at {i}")));
            }
        }
    }
    let depth = config.depth;
    let horizon = scheme.horizon(depth);
    let mut b = TapeBuilder::new(&model.params, mode, horizon);

    b.set_stage(Stage::PatchEmbed);
    let input = b.input(patches)?;
    let proj = b.matmul(input, model.patch_w)?;
    let proj = b.add_bias(proj, model.patch_b)?;
    let with_cls = b.prepend_param_row(proj, model.cls)?;
    let mut x = b.add_param(with_cls, model.pos)?;

    let mut block_inputs = Vec::with_capacity(depth);
    let mut states = Vec::with_capacity(depth);
    let mut token_counts = Vec::with_capacity(depth);
    for i in 0..depth {
        b.set_stage(Stage::Block(i));
        block_inputs.push(x);
        let side = match scheme {
            TrainScheme::Residual(plan) if plan.side_blocks.contains(&i) => model.side[i],
            _ => None,
        };
        let (main_out, state, counts) =
            block_forward(&mut b, &model.blocks[i], config.heads, x, scheme.drop_at(i))?;
        x = match side {
            Some(side_ids) => {
                let s = side_forward(&mut b, &side_ids, config.heads, x)?;
                b.add(main_out, s)?
            }
            None => main_out,
        };
        states.push(state);
        token_counts.push(counts);
    }

    b.set_stage(Stage::Head);
    let ln = b.layer_norm(x, model.ln_f_g, model.ln_f_b, LN_EPS)?;
    let cls_row = b.gather_rows(ln, &[0])?;
    let logits_mat = b.matmul(cls_row, model.head_w)?;
    let logits_id = b.add_bias(logits_mat, model.head_b)?;
    let logits = Tensor::new(&[config.num_classes], b.value_data(logits_id).to_vec())?;
    let tape = b.finish();
    Ok(ForwardPass { logits, tape, logits_id, block_inputs, states, token_counts })
}

/// Records a full forward pass from an image `[C, S, S]`.
pub fn vit_forward(
    model: &ViTModel,
    scheme: &TrainScheme,
    image: &Tensor,
    mode: TapeMode,
) -> Result<ForwardPass> {
    let patches = extract_patches(image, &model.config)?;
    forward_patches(model, scheme, &patches, mode)
}
