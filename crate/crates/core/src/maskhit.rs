//! The region transformer: patch features plus 2D positions in, class token
//! out, with masked-autoencoder pretraining and risk/intermediate heads.
//!
//! Architecture: learned patch embedding, learned 2D positional table over
//! the region window, a class token, pre-layer-norm attention blocks with a
//! GELU MLP, and a final layer norm. Attention keys are the present patch
//! slots only; absent slots get zero attention mass everywhere. All forward
//! paths run on the [`crate::autodiff`] tape, so gradients are exact.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Tape, Var};
use crate::cohort::IntermediateTargets;
use crate::error::{Error, Result};
use crate::fx;
use crate::linalg::Matrix;
use crate::rng::{stream, tags};

/// Architecture constants. Paper scale is 12 layers and 8 heads over
/// 400-slot regions; desk defaults keep the same shape but small.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    /// Width of the featurizer output fed to the patch embedding.
    pub feature_dim: usize,
    pub max_slots: usize,
    pub region_side: usize,
    pub mask_ratio: f64,
}

impl TransformerConfig {
    /// Full-scale configuration matching the published architecture.
    pub fn paper() -> Self {
        TransformerConfig {
            n_layers: 12,
            n_heads: 8,
            model_dim: 128,
            mlp_dim: 256,
            feature_dim: 32,
            max_slots: 400,
            region_side: 20,
            mask_ratio: 0.5,
        }
    }

    /// Small configuration for laptop-scale runs and tests.
    pub fn desk() -> Self {
        TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            model_dim: 32,
            mlp_dim: 64,
            feature_dim: 32,
            max_slots: 400,
            region_side: 20,
            mask_ratio: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim == 0 || self.mlp_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("transformer dims must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} not in (0, 1)", self.mask_ratio)));
        }
        if self.region_side == 0 || self.max_slots == 0 {
            return Err(Error::Config("region_side and max_slots must be positive".into()));
        }
        if self.max_slots != self.region_side * self.region_side {
            return Err(Error::Config(format!(
                "max_slots {} must equal region_side² = {} (a full window fills every slot)",
                self.max_slots,
                self.region_side * self.region_side
            )));
        }
        Ok(())
    }
}

/// One region's model input: feature rows, in-window positions, and the
/// present/masked flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBatch {
    pub features: Matrix,
    pub positions: Vec<(u16, u16)>,
    pub present: Vec<bool>,
    pub masked: Vec<bool>,
}

impl RegionBatch {
    /// A batch with every slot present and nothing masked.
    pub fn full(features: Matrix, positions: Vec<(u16, u16)>) -> Self {
        let n = features.rows();
        RegionBatch { features, positions, present: vec![true; n], masked: vec![false; n] }
    }

    pub fn n_slots(&self) -> usize {
        self.features.rows()
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn validate(&self, cfg: &TransformerConfig) -> Result<()> {
        let n = self.features.rows();
        if self.positions.len() != n || self.present.len() != n || self.masked.len() != n {
            return Err(Error::Shape("region batch field lengths disagree".into()));
        }
        if self.features.cols() != cfg.feature_dim {
            return Err(Error::Shape(format!(
                "feature width {} != configured feature_dim {}",
                self.features.cols(),
                cfg.feature_dim
            )));
        }
        if n > cfg.max_slots {
            return Err(Error::Shape(format!("{n} slots exceed max_slots {}", cfg.max_slots)));
        }
        if !self.present.iter().any(|&p| p) {
            return Err(Error::Empty("region batch has no present slot".into()));
        }
        for (i, &(r, c)) in self.positions.iter().enumerate() {
            if r as usize >= cfg.region_side || c as usize >= cfg.region_side {
                return Err(Error::Shape(format!("position {:?} outside region side", (r, c))));
            }
            if self.masked[i] && !self.present[i] {
                return Err(Error::Shape("masked slot is not present".into()));
            }
        }
        Ok(())
    }
}

/// The six stage-1 targets; ordinals carry their class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    LargestAdenomaSize,
    NAdenomas,
    LargestSerratedSize,
    NSerrated,
    MostAdvancedSerrated,
    MostAdvancedAdenoma,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::LargestAdenomaSize,
        Target::NAdenomas,
        Target::LargestSerratedSize,
        Target::NSerrated,
        Target::MostAdvancedSerrated,
        Target::MostAdvancedAdenoma,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Target::LargestAdenomaSize => "largest_adenoma_size",
            Target::NAdenomas => "n_adenomas",
            Target::LargestSerratedSize => "largest_serrated_size",
            Target::NSerrated => "n_serrated",
            Target::MostAdvancedSerrated => "most_advanced_serrated",
            Target::MostAdvancedAdenoma => "most_advanced_adenoma",
        }
    }

    /// Number of ordinal classes, or `None` for count regression.
    pub fn classes(&self) -> Option<usize> {
        match self {
            Target::LargestAdenomaSize | Target::LargestSerratedSize => Some(5),
            Target::MostAdvancedSerrated => Some(5),
            Target::MostAdvancedAdenoma => Some(4),
            Target::NAdenomas | Target::NSerrated => None,
        }
    }

    fn head_width(&self) -> usize {
        self.classes().unwrap_or(1)
    }

    fn of(&self, t: &IntermediateTargets) -> f64 {
        match self {
            Target::LargestAdenomaSize => t.largest_adenoma_size as f64,
            Target::NAdenomas => t.n_adenomas as f64,
            Target::LargestSerratedSize => t.largest_serrated_size as f64,
            Target::NSerrated => t.n_serrated as f64,
            Target::MostAdvancedSerrated => t.most_advanced_serrated as f64,
            Target::MostAdvancedAdenoma => t.most_advanced_adenoma as f64,
        }
    }
}

/// A stage-1 target selection: one target, the four colonoscopy ones, or all
/// six.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpec {
    Single(Target),
    AllColonoscopy,
    All,
}

impl TargetSpec {
    pub fn parse(name: &str) -> Result<TargetSpec> {
        if name == "all" {
            return Ok(TargetSpec::All);
        }
        if name == "all_colonoscopy" || name == "all-colonoscopy" {
            return Ok(TargetSpec::AllColonoscopy);
        }
        for t in Target::ALL {
            if t.name() == name {
                return Ok(TargetSpec::Single(t));
            }
        }
        Err(Error::Config(format!(
            "unknown intermediate target `{name}`; valid: largest_adenoma_size, n_adenomas, \
             largest_serrated_size, n_serrated, most_advanced_serrated, most_advanced_adenoma, \
             all_colonoscopy, all"
        )))
    }

    pub fn name(&self) -> &'static str {
        match self {
            TargetSpec::Single(t) => t.name(),
            TargetSpec::AllColonoscopy => "all_colonoscopy",
            TargetSpec::All => "all",
        }
    }

    pub fn targets(&self) -> Vec<Target> {
        match self {
            TargetSpec::Single(t) => vec![*t],
            TargetSpec::AllColonoscopy => vec![
                Target::LargestAdenomaSize,
                Target::NAdenomas,
                Target::LargestSerratedSize,
                Target::NSerrated,
            ],
            TargetSpec::All => Target::ALL.to_vec(),
        }
    }
}

/// Count targets are divided by this scale inside the regression loss.
pub const COUNT_SCALE: f64 = 2.0;

const TENSORS_PER_LAYER: usize = 16;
const IDX_EMBED_W: usize = 0;
const IDX_EMBED_B: usize = 1;
const IDX_POS: usize = 2;
const IDX_CLS: usize = 3;
const IDX_MASK: usize = 4;
const LAYER_BASE: usize = 5;

/// All learnable tensors, stored flat in a fixed, named order so the
/// optimizer, checkpoints, and freezing all agree on the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    cfg: TransformerConfig,
    tensors: Vec<Matrix>,
}

fn tensor_specs(cfg: &TransformerConfig) -> Vec<(String, usize, usize)> {
    let m = cfg.model_dim;
    let d = cfg.feature_dim;
    let side2 = cfg.region_side * cfg.region_side;
    let mut specs: Vec<(String, usize, usize)> = vec![
        ("embed.w".into(), d, m),
        ("embed.b".into(), 1, m),
        ("pos".into(), side2, m),
        ("cls".into(), 1, m),
        ("mask".into(), 1, m),
    ];
    for l in 0..cfg.n_layers {
        for (name, r, c) in [
            ("ln1.g", 1, m),
            ("ln1.b", 1, m),
            ("attn.wq", m, m),
            ("attn.bq", 1, m),
            ("attn.wk", m, m),
            ("attn.bk", 1, m),
            ("attn.wv", m, m),
            ("attn.bv", 1, m),
            ("attn.wo", m, m),
            ("attn.bo", 1, m),
            ("ln2.g", 1, m),
            ("ln2.b", 1, m),
            ("mlp.w1", m, cfg.mlp_dim),
            ("mlp.b1", 1, cfg.mlp_dim),
            ("mlp.w2", cfg.mlp_dim, m),
            ("mlp.b2", 1, m),
        ] {
            specs.push((format!("layer{l}.{name}"), r, c));
        }
    }
    specs.push(("final_ln.g".into(), 1, m));
    specs.push(("final_ln.b".into(), 1, m));
    specs.push(("recon.w".into(), m, d));
    specs.push(("recon.b".into(), 1, d));
    specs.push(("risk.w".into(), m, 1));
    specs.push(("risk.b".into(), 1, 1));
    for t in Target::ALL {
        specs.push((format!("head.{}.w", t.name()), m, t.head_width()));
        specs.push((format!("head.{}.b", t.name()), 1, t.head_width()));
    }
    specs
}

impl ModelParams {
    /// Seeded initialization: N(0, 0.02) weights, zero biases, unit norm
    /// gains.
    pub fn init(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, &[tags::INIT]);
        let mut tensors = Vec::new();
        for (name, r, c) in tensor_specs(&cfg) {
            tensors.push(init_tensor(&name, r, c, &mut rng));
        }
        Ok(ModelParams { cfg, tensors })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        tensor_specs(&self.cfg).into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&Matrix> {
        let names = self.names();
        names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn set_tensor(&mut self, name: &str, value: Matrix) -> Result<()> {
        let names = self.names();
        let i = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown tensor `{name}`")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, got {:?}",
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Indices of the risk head tensors.
    pub fn risk_head_indices(&self) -> Vec<usize> {
        let base = LAYER_BASE + self.cfg.n_layers * TENSORS_PER_LAYER;
        vec![base + 4, base + 5]
    }

    /// Indices of the intermediate head tensors for the given spec.
    pub fn head_indices(&self, spec: TargetSpec) -> Vec<usize> {
        let base = LAYER_BASE + self.cfg.n_layers * TENSORS_PER_LAYER + 6;
        let mut out = Vec::new();
        for t in spec.targets() {
            let k = Target::ALL.iter().position(|x| *x == t).unwrap();
            out.push(base + 2 * k);
            out.push(base + 2 * k + 1);
        }
        out
    }

    /// Everything except the task heads (risk + intermediate): the tensors
    /// the freeze contract must leave untouched.
    pub fn backbone_indices(&self) -> Vec<usize> {
        let head_base = LAYER_BASE + self.cfg.n_layers * TENSORS_PER_LAYER + 4;
        (0..head_base).collect()
    }

    /// Reinitialize the risk head from a fresh seeded stream.
    pub fn reinit_risk_head(&mut self, seed: u64) {
        let mut rng = stream(seed, &[tags::HEAD_INIT]);
        let specs = tensor_specs(&self.cfg);
        for i in self.risk_head_indices() {
            let (name, r, c) = &specs[i];
            self.tensors[i] = init_tensor(name, *r, *c, &mut rng);
        }
    }
}

fn init_tensor(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    if name.ends_with(".g") {
        Matrix::from_fn(rows, cols, |_, _| 1.0)
    } else if name.ends_with(".b") && !name.ends_with("ln1.b") && !name.ends_with("ln2.b") {
        // Biases start at zero; layer-norm biases too, but they share the
        // suffix rule below anyway.
        Matrix::zeros(rows, cols)
    } else if name.ends_with(".b") {
        Matrix::zeros(rows, cols)
    } else {
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.02)
    }
}

/// Per-layer, per-head attention weights: `layers[l][h]` has one query row
/// per sequence position (class token first) and one column per slot.
#[derive(Debug, Clone)]
pub struct Attention {
    pub layers: Vec<Vec<Matrix>>,
}

impl Attention {
    /// Class-token attention over slots, averaged over layers and heads.
    pub fn class_row_mean(&self) -> Vec<f64> {
        let n = self.layers[0][0].cols();
        let mut out = vec![0.0; n];
        let mut count = 0.0;
        for layer in &self.layers {
            for head in layer {
                for (o, v) in out.iter_mut().zip(head.row(0)) {
                    *o += v;
                }
                count += 1.0;
            }
        }
        for o in &mut out {
            *o /= count;
        }
        out
    }
}

/// Parameter tensors registered on a tape, in layout order.
pub struct ParamVars {
    vars: Vec<Var>,
}

pub fn params_to_tape(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    ParamVars { vars: params.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[LAYER_BASE + l * TENSORS_PER_LAYER + k]
    }
}

/// Forward pass on an existing tape. Returns the class-token output var and
/// the recorded attention, plus the final sequence var for reconstruction.
pub struct ForwardVars {
    pub class_token: Var,
    pub final_seq: Var,
    pub attention: Attention,
}

pub fn forward_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &TransformerConfig,
    batch: &RegionBatch,
) -> Result<ForwardVars> {
    batch.validate(cfg)?;
    let n = batch.n_slots();
    let heads = cfg.n_heads;
    let dh = cfg.model_dim / heads;

    let features = tape.leaf(batch.features.clone());
    let embedded = tape.matmul(features, pv.at(IDX_EMBED_W));
    let mut x = tape.add_row(embedded, pv.at(IDX_EMBED_B));
    if batch.masked.iter().any(|&m| m) {
        let mask_rows = tape.repeat_row(pv.at(IDX_MASK), n);
        x = tape.row_select(x, mask_rows, batch.masked.clone());
    }
    let pos_idx: Vec<usize> = batch
        .positions
        .iter()
        .map(|&(r, c)| r as usize * cfg.region_side + c as usize)
        .collect();
    let pos = tape.gather_rows(pv.at(IDX_POS), pos_idx);
    let x = tape.add(x, pos);
    let mut seq = tape.concat_rows(pv.at(IDX_CLS), x);

    let slot_rows: Vec<usize> = (1..=n).collect();
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let normed = tape.layer_norm(seq, pv.layer(l, 0), pv.layer(l, 1));
        let q = tape.matmul(normed, pv.layer(l, 2));
        let q = tape.add_row(q, pv.layer(l, 3));
        let k = tape.matmul(normed, pv.layer(l, 4));
        let k = tape.add_row(k, pv.layer(l, 5));
        let v = tape.matmul(normed, pv.layer(l, 6));
        let v = tape.add_row(v, pv.layer(l, 7));
        let k_slots = tape.slice_rows(k, slot_rows.clone());
        let v_slots = tape.slice_rows(v, slot_rows.clone());

        let mut head_ctx: Option<Var> = None;
        let mut head_attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k_slots, h * dh, dh);
            let vh = tape.slice_cols(v_slots, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, 1.0 / fx::sqrt(dh as f64));
            let attn = tape.softmax_rows(scores, batch.present.clone());
            head_attn.push(tape.value(attn).clone());
            let ctx = tape.matmul(attn, vh);
            head_ctx = Some(match head_ctx {
                Some(prev) => tape.concat_cols(prev, ctx),
                None => ctx,
            });
        }
        attention.push(head_attn);
        let ctx = head_ctx.expect("n_heads >= 1");
        let proj = tape.matmul(ctx, pv.layer(l, 8));
        let proj = tape.add_row(proj, pv.layer(l, 9));
        seq = tape.add(seq, proj);

        let normed2 = tape.layer_norm(seq, pv.layer(l, 10), pv.layer(l, 11));
        let hidden = tape.matmul(normed2, pv.layer(l, 12));
        let hidden = tape.add_row(hidden, pv.layer(l, 13));
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, pv.layer(l, 14));
        let out = tape.add_row(out, pv.layer(l, 15));
        seq = tape.add(seq, out);
    }
    let final_base = LAYER_BASE + cfg.n_layers * TENSORS_PER_LAYER;
    let final_seq = tape.layer_norm(seq, pv.at(final_base), pv.at(final_base + 1));
    let class_token = tape.slice_rows(final_seq, vec![0]);
    Ok(ForwardVars { class_token, final_seq, attention: Attention { layers: attention } })
}

/// Run a region through the model and return the class token with the
/// attention weights.
pub fn forward_region(params: &ModelParams, batch: &RegionBatch) -> Result<(Vec<f64>, Attention)> {
    let mut tape = Tape::new();
    let pv = params_to_tape(&mut tape, params);
    let fwd = forward_on_tape(&mut tape, &pv, &params.cfg, batch)?;
    let cls = tape.value(fwd.class_token).row(0).to_vec();
    Ok((cls, fwd.attention))
}

/// Arithmetic mean of class tokens; errors on an empty list.
pub fn aggregate_patient(class_tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = class_tokens
        .first()
        .ok_or_else(|| Error::Empty("aggregate_patient: no class tokens".into()))?;
    let mut out = vec![0.0; first.len()];
    for t in class_tokens {
        if t.len() != first.len() {
            return Err(Error::Shape("class token widths disagree".into()));
        }
        for (o, v) in out.iter_mut().zip(t) {
            *o += v;
        }
    }
    let n = class_tokens.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// Flag `round_half_up(mask_ratio * present)` present slots as masked,
/// at least one, chosen without replacement.
pub fn mae_mask(
    batch: &RegionBatch,
    mask_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RegionBatch> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Config(format!("mask_ratio {mask_ratio} not in (0, 1)")));
    }
    let present: Vec<usize> =
        (0..batch.n_slots()).filter(|&i| batch.present[i]).collect();
    if present.len() < 2 {
        return Err(Error::Empty("mae_mask needs at least 2 present slots".into()));
    }
    let count = (fx::floor(mask_ratio * present.len() as f64 + 0.5) as usize).max(1);
    let mut chosen = present;
    chosen.shuffle(rng);
    chosen.truncate(count);
    let mut masked = vec![false; batch.n_slots()];
    for i in chosen {
        masked[i] = true;
    }
    Ok(RegionBatch { masked, ..batch.clone() })
}

/// Masked-reconstruction loss on a tape: MSE between the reconstruction head
/// output at masked positions and `targets` at those rows.
pub fn mae_loss_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &TransformerConfig,
    batch: &RegionBatch,
    targets: &Matrix,
) -> Result<Var> {
    if targets.shape() != batch.features.shape() {
        return Err(Error::Shape("mae targets must match feature shape".into()));
    }
    let masked_rows: Vec<usize> =
        (0..batch.n_slots()).filter(|&i| batch.masked[i]).collect();
    if masked_rows.is_empty() {
        return Err(Error::Empty("mae_loss: no masked slots".into()));
    }
    let fwd = forward_on_tape(tape, pv, cfg, batch)?;
    // Shift by one: row 0 of the sequence is the class token.
    let out_rows: Vec<usize> = masked_rows.iter().map(|&r| r + 1).collect();
    let picked = tape.slice_rows(fwd.final_seq, out_rows);
    let final_base = LAYER_BASE + cfg.n_layers * TENSORS_PER_LAYER;
    let recon = tape.matmul(picked, pv.at(final_base + 2));
    let recon = tape.add_row(recon, pv.at(final_base + 3));
    let mut target = Matrix::zeros(masked_rows.len(), targets.cols());
    for (i, &r) in masked_rows.iter().enumerate() {
        target.row_mut(i).copy_from_slice(targets.row(r));
    }
    Ok(tape.mse_vs(recon, target))
}

/// Masked-reconstruction loss as a plain number.
pub fn mae_loss(params: &ModelParams, batch: &RegionBatch, targets: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params_to_tape(&mut tape, params);
    let loss = mae_loss_on_tape(&mut tape, &pv, &params.cfg, batch, targets)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Risk logit from a patient embedding on a tape.
pub fn risk_logit_on_tape(tape: &mut Tape, pv: &ParamVars, cfg: &TransformerConfig, emb: Var) -> Var {
    let final_base = LAYER_BASE + cfg.n_layers * TENSORS_PER_LAYER;
    let z = tape.matmul(emb, pv.at(final_base + 4));
    tape.add_row(z, pv.at(final_base + 5))
}

/// Risk probability from a patient embedding: sigmoid of an affine map.
pub fn risk_head(params: &ModelParams, embedding: &[f64]) -> Result<f64> {
    if embedding.len() != params.cfg.model_dim {
        return Err(Error::Shape(format!(
            "embedding width {} != model_dim {}",
            embedding.len(),
            params.cfg.model_dim
        )));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("embedding is not finite".into()));
    }
    let final_base = LAYER_BASE + params.cfg.n_layers * TENSORS_PER_LAYER;
    let w = &params.tensors[final_base + 4];
    let b = &params.tensors[final_base + 5];
    let z = embedding.iter().enumerate().map(|(i, &v)| v * w.get(i, 0)).sum::<f64>() + b.get(0, 0);
    Ok(fx::sigmoid(z))
}

/// Output of one intermediate head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    /// Softmax class scores for an ordinal target.
    Classes(Vec<f64>),
    /// Non-negative count estimate.
    Count(f64),
}

/// Intermediate-target predictions from a patient embedding; `spec` selects
/// one target, the colonoscopy four, or all six.
pub fn intermediate_head(
    params: &ModelParams,
    embedding: &[f64],
    spec: TargetSpec,
) -> Result<Vec<(Target, HeadOutput)>> {
    if embedding.len() != params.cfg.model_dim {
        return Err(Error::Shape("embedding width mismatch".into()));
    }
    let base = LAYER_BASE + params.cfg.n_layers * TENSORS_PER_LAYER + 6;
    let mut out = Vec::new();
    for t in spec.targets() {
        let k = Target::ALL.iter().position(|x| *x == t).unwrap();
        let w = &params.tensors[base + 2 * k];
        let b = &params.tensors[base + 2 * k + 1];
        let width = t.head_width();
        let mut logits = vec![0.0; width];
        for (j, logit) in logits.iter_mut().enumerate() {
            *logit =
                embedding.iter().enumerate().map(|(i, &v)| v * w.get(i, j)).sum::<f64>()
                    + b.get(0, j);
        }
        let output = match t.classes() {
            Some(_) => {
                let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let exps: Vec<f64> = logits.iter().map(|&z| fx::exp(z - max)).collect();
                let denom: f64 = exps.iter().sum();
                HeadOutput::Classes(exps.into_iter().map(|e| e / denom).collect())
            }
            None => HeadOutput::Count(fx::softplus(logits[0])),
        };
        out.push((t, output));
    }
    Ok(out)
}

/// Stage-1 loss on a tape: cross-entropy for ordinals, squared error on the
/// softplus output for counts, summed over the spec's targets.
pub fn intermediate_loss_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &TransformerConfig,
    emb: Var,
    truth: &IntermediateTargets,
    spec: TargetSpec,
) -> Result<Var> {
    let base = LAYER_BASE + cfg.n_layers * TENSORS_PER_LAYER + 6;
    let mut total: Option<Var> = None;
    for t in spec.targets() {
        let k = Target::ALL.iter().position(|x| *x == t).unwrap();
        let z = tape.matmul(emb, pv.at(base + 2 * k));
        let logits = tape.add_row(z, pv.at(base + 2 * k + 1));
        let loss = match t.classes() {
            Some(classes) => {
                let class = t.of(truth) as usize;
                if class >= classes {
                    return Err(Error::Config(format!(
                        "{} ordinal {} out of range (max {})",
                        t.name(),
                        class,
                        classes - 1
                    )));
                }
                tape.ce_logits_row(logits, class)
            }
            None => {
                // Counts are regressed on a 1/COUNT_SCALE grid so the squared
                // error stays commensurate with the cross-entropy terms.
                let pred = tape.softplus(logits);
                let scaled = tape.scale(pred, 1.0 / COUNT_SCALE);
                tape.mse_vs(scaled, Matrix::from_vec(1, 1, vec![t.of(truth) / COUNT_SCALE]))
            }
        };
        total = Some(match total {
            Some(prev) => tape.add(prev, loss),
            None => loss,
        });
    }
    total.ok_or_else(|| Error::Empty("no targets in spec".into()))
}

/// Build a scalar loss over parameter vars and return (loss value, exact
/// gradients aligned with [`ModelParams::tensors`]). Gradients of tensors the
/// loss never touches are zero.
pub fn grad<F>(params: &ModelParams, build: F) -> Result<(f64, Vec<Matrix>)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = params_to_tape(&mut tape, params);
    let loss = build(&mut tape, &pv)?;
    let loss_value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    Ok((loss_value, collect_grads(&grads, &pv, params)))
}

pub fn collect_grads(grads: &Gradients, pv: &ParamVars, params: &ModelParams) -> Vec<Matrix> {
    pv.vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| match grads.of(v) {
            Some(g) => g.clone(),
            None => Matrix::zeros(t.rows(), t.cols()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            model_dim: 8,
            mlp_dim: 12,
            feature_dim: 5,
            max_slots: 16,
            region_side: 4,
            mask_ratio: 0.5,
        }
    }

    fn random_batch(cfg: &TransformerConfig, n: usize, seed: u64) -> RegionBatch {
        let mut rng = stream(seed, &[1]);
        let features = Matrix::from_fn(n, cfg.feature_dim, |_, _| {
            rand::Rng::gen_range(&mut rng, -1.0..1.0)
        });
        let positions: Vec<(u16, u16)> = (0..n)
            .map(|i| ((i / cfg.region_side) as u16, (i % cfg.region_side) as u16))
            .collect();
        RegionBatch::full(features, positions)
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.model_dim = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());
        assert!(TransformerConfig::desk().validate().is_ok());
        assert!(TransformerConfig::paper().validate().is_ok());
    }

    #[test]
    fn single_present_slot_gets_full_attention() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, 3).unwrap();
        let batch = random_batch(&cfg, 1, 5);
        let (_, attn) = forward_region(&params, &batch).unwrap();
        for layer in &attn.layers {
            for head in layer {
                assert_eq!(head.get(0, 0), 1.0);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_absent_slots_get_zero() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, 4).unwrap();
        let mut batch = random_batch(&cfg, 6, 6);
        batch.present[2] = false;
        batch.present[5] = false;
        let (_, attn) = forward_region(&params, &batch).unwrap();
        for layer in &attn.layers {
            for head in layer {
                for q in 0..head.rows() {
                    let sum: f64 = head.row(q).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row {q} sums to {sum}");
                    assert_eq!(head.get(q, 2), 0.0);
                    assert_eq!(head.get(q, 5), 0.0);
                }
            }
        }
    }

    #[test]
    fn permuting_slots_preserves_class_token() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, 7).unwrap();
        let batch = random_batch(&cfg, 9, 8);
        let (cls, _) = forward_region(&params, &batch).unwrap();

        let perm: Vec<usize> = vec![4, 0, 7, 2, 8, 1, 6, 3, 5];
        let features = Matrix::from_fn(9, cfg.feature_dim, |r, c| batch.features.get(perm[r], c));
        let positions: Vec<(u16, u16)> = perm.iter().map(|&i| batch.positions[i]).collect();
        let permuted = RegionBatch::full(features, positions);
        let (cls_p, _) = forward_region(&params, &permuted).unwrap();
        for (a, b) in cls.iter().zip(&cls_p) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_regions_give_identical_class_tokens() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, 9).unwrap();
        let batch = random_batch(&cfg, 7, 10);
        let (a, _) = forward_region(&params, &batch).unwrap();
        let (b, _) = forward_region(&params, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_patient_cases() {
        let v = vec![1.0, -2.0, 3.0];
        assert_eq!(aggregate_patient(&[v.clone()]).unwrap(), v);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let zero = aggregate_patient(&[v.clone(), neg]).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        let sixty_four = vec![v.clone(); 64];
        assert_eq!(aggregate_patient(&sixty_four).unwrap(), v);
        assert!(matches!(aggregate_patient(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn mae_mask_counts() {
        let cfg = TransformerConfig { max_slots: 400, region_side: 20, ..tiny_cfg() };
        let batch = random_batch(&cfg, 400, 11);
        let mut rng = stream(1, &[2]);
        let masked = mae_mask(&batch, 0.5, &mut rng).unwrap();
        assert_eq!(masked.masked.iter().filter(|&&m| m).count(), 200);

        let batch = random_batch(&cfg, 10, 12);
        let masked = mae_mask(&batch, 0.05, &mut rng).unwrap();
        assert_eq!(masked.masked.iter().filter(|&&m| m).count(), 1);
        for i in 0..masked.n_slots() {
            assert!(!masked.masked[i] || masked.present[i]);
        }

        let mut one = random_batch(&cfg, 3, 13);
        one.present = vec![true, false, false];
        assert!(matches!(mae_mask(&one, 0.5, &mut rng), Err(Error::Empty(_))));
    }

    #[test]
    fn mae_loss_hand_case_and_target_invariance() {
        // Zero-layer model with zeroed final gain: reconstruction equals the
        // recon bias for every input.
        let cfg = TransformerConfig {
            n_layers: 0,
            n_heads: 1,
            model_dim: 4,
            mlp_dim: 4,
            feature_dim: 2,
            max_slots: 4,
            region_side: 2,
            mask_ratio: 0.5,
        };
        let mut params = ModelParams::init(cfg, 1).unwrap();
        params.set_tensor("final_ln.g", Matrix::zeros(1, 4)).unwrap();
        params.set_tensor("recon.w", Matrix::zeros(4, 2)).unwrap();
        params.set_tensor("recon.b", Matrix::from_vec(1, 2, vec![1.0, 1.0])).unwrap();
        let mut batch = random_batch(&cfg, 2, 14);
        batch.masked = vec![true, false];
        let targets = Matrix::zeros(2, 2);
        let loss = mae_loss(&params, &batch, &targets).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);

        // Recon bias equal to the target: loss 0.
        params.set_tensor("recon.b", Matrix::zeros(1, 2)).unwrap();
        let loss = mae_loss(&params, &batch, &targets).unwrap();
        assert_eq!(loss, 0.0);

        // Changing targets at unmasked rows cannot change the loss.
        let params = ModelParams::init(cfg, 2).unwrap();
        let t1 = Matrix::zeros(2, 2);
        let mut t2 = Matrix::zeros(2, 2);
        t2.row_mut(1).copy_from_slice(&[9.0, -4.0]);
        let l1 = mae_loss(&params, &batch, &t1).unwrap();
        let l2 = mae_loss(&params, &batch, &t2).unwrap();
        assert_eq!(l1, l2);

        // No masked slots is an error.
        let full = RegionBatch::full(batch.features.clone(), batch.positions.clone());
        assert!(matches!(mae_loss(&params, &full, &t1), Err(Error::Empty(_))));
    }

    #[test]
    fn risk_head_cases() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(cfg, 5).unwrap();
        params.set_tensor("risk.w", Matrix::zeros(8, 1)).unwrap();
        params.set_tensor("risk.b", Matrix::zeros(1, 1)).unwrap();
        let emb = vec![0.3; 8];
        assert_eq!(risk_head(&params, &emb).unwrap(), 0.5);

        params.set_tensor("risk.b", Matrix::from_vec(1, 1, vec![1.7])).unwrap();
        let p = risk_head(&params, &emb).unwrap();
        assert!((p - fx::sigmoid(1.7)).abs() < 1e-15);

        // Monotone in the logit.
        let mut last = 0.0;
        for i in 0..10 {
            params
                .set_tensor("risk.b", Matrix::from_vec(1, 1, vec![i as f64]))
                .unwrap();
            let p = risk_head(&params, &emb).unwrap();
            assert!(p > last && p < 1.0);
            last = p;
        }
    }

    #[test]
    fn intermediate_head_uniform_and_all() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(cfg, 6).unwrap();
        params.set_tensor("head.largest_adenoma_size.w", Matrix::zeros(8, 5)).unwrap();
        params.set_tensor("head.largest_adenoma_size.b", Matrix::zeros(1, 5)).unwrap();
        let emb = vec![0.1; 8];
        let out = intermediate_head(&params, &emb, TargetSpec::parse("largest_adenoma_size").unwrap())
            .unwrap();
        match &out[0].1 {
            HeadOutput::Classes(p) => {
                assert_eq!(p.len(), 5);
                for &x in p {
                    assert!((x - 0.2).abs() < 1e-12);
                }
            }
            _ => panic!("expected classes"),
        }

        let all = intermediate_head(&params, &emb, TargetSpec::All).unwrap();
        assert_eq!(all.len(), 6);
        let colo = intermediate_head(&params, &emb, TargetSpec::AllColonoscopy).unwrap();
        assert_eq!(colo.len(), 4);

        assert!(TargetSpec::parse("nonsense").is_err());
    }

    #[test]
    fn all_colonoscopy_loss_is_sum_of_parts() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, 8).unwrap();
        let truth = IntermediateTargets {
            largest_adenoma_size: 2,
            n_adenomas: 3,
            largest_serrated_size: 1,
            n_serrated: 0,
            most_advanced_serrated: 4,
            most_advanced_adenoma: 1,
        };
        let emb_values = vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.2, 0.1, 0.5];
        let eval = |spec: TargetSpec| -> f64 {
            let mut tape = Tape::new();
            let pv = params_to_tape(&mut tape, &params);
            let emb = tape.leaf(Matrix::row_vec(emb_values.clone()));
            let loss = intermediate_loss_on_tape(&mut tape, &pv, &cfg, emb, &truth, spec).unwrap();
            tape.value(loss).get(0, 0)
        };
        let total = eval(TargetSpec::AllColonoscopy);
        let parts: f64 = [
            Target::LargestAdenomaSize,
            Target::NAdenomas,
            Target::LargestSerratedSize,
            Target::NSerrated,
        ]
        .into_iter()
        .map(|t| eval(TargetSpec::Single(t)))
        .sum();
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn grad_of_constant_loss_is_zero_and_linear_is_coefficient() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, 10).unwrap();
        let (_, grads) = grad(&params, |tape, _pv| {
            Ok(tape.leaf(Matrix::from_vec(1, 1, vec![3.0])))
        })
        .unwrap();
        for g in &grads {
            assert_eq!(g.max_abs(), 0.0);
        }

        // Loss = 4.5 * risk.b
        let (_, grads) = grad(&params, |tape, pv| {
            let base = LAYER_BASE + cfg.n_layers * TENSORS_PER_LAYER;
            Ok(tape.scale(pv.at(base + 5), 4.5))
        })
        .unwrap();
        let names = params.names();
        let i = names.iter().position(|n| n == "risk.b").unwrap();
        assert_eq!(grads[i].get(0, 0), 4.5);
    }

    #[test]
    fn head_and_backbone_index_layout() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, 11).unwrap();
        let names = params.names();
        for i in params.risk_head_indices() {
            assert!(names[i].starts_with("risk."));
        }
        for i in params.head_indices(TargetSpec::All) {
            assert!(names[i].starts_with("head."));
        }
        for i in params.backbone_indices() {
            assert!(!names[i].starts_with("risk.") && !names[i].starts_with("head."));
        }
        assert_eq!(names.len(), params.tensors().len());
    }
}
