//! Training regimes: masked pretraining, direct risk fine-tuning, guided
//! two-stage fine-tuning, and patient-level inference.
//!
//! All loops walk patients in a seeded shuffled order with a fixed gradient
//! reduction order, so a (config, seed) pair reproduces checkpoints bit for
//! bit. Slides are prepared once up front (tissue grid + frozen patch
//! features); regions are resampled every epoch.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::clinical::mlp::class_weights;
use crate::cohort::{Cohort, IntermediateTargets};
use crate::error::{Error, Result};
use crate::featurizer::{rows_for_region, Extractor, ExtractorConfig};
use crate::fx;
use crate::linalg::Matrix;
use crate::maskhit::{
    self, collect_grads, forward_on_tape, mae_loss_on_tape, mae_mask, params_to_tape,
    risk_logit_on_tape, HeadOutput, ModelParams, ParamVars, RegionBatch, Target, TargetSpec,
    TransformerConfig,
};
use crate::rng::{derive_seed, stream, tags};
use crate::tiling::{cover_regions, sample_regions, subsample_patches, tile, tissue_mask, Region};

pub use crate::cohort::IntermediateTargets as Targets;

/// Slide tiling settings shared by training, evaluation, and rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilingConfig {
    pub patch_px: u32,
    pub brightness_threshold: f64,
    pub min_tissue_fraction: f64,
}

impl TilingConfig {
    pub fn new(patch_px: u32) -> Self {
        TilingConfig {
            patch_px,
            brightness_threshold: crate::tiling::DEFAULT_BRIGHTNESS_THRESHOLD,
            min_tissue_fraction: crate::tiling::DEFAULT_MIN_TISSUE_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Masked pretraining epochs (paper scale: 200).
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub regions_per_patient_train: usize,
    pub patch_fraction_train: f64,
    pub max_regions_eval: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_transformer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 3,
            finetune_epochs: 8,
            regions_per_patient_train: 4,
            patch_fraction_train: 0.25,
            max_regions_eval: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            freeze_transformer: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions_per_patient_train == 0 || self.max_regions_eval == 0 || self.batch_size == 0
        {
            return Err(Error::Config("region, eval, and batch counts must be >= 1".into()));
        }
        if !(self.patch_fraction_train > 0.0 && self.patch_fraction_train <= 1.0) {
            return Err(Error::Config(format!(
                "patch_fraction_train {} not in (0, 1]",
                self.patch_fraction_train
            )));
        }
        if self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning_rate must be > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Training stage recorded in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Intermediate,
    Risk,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Intermediate => "intermediate",
            Stage::Risk => "risk",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "pretrained" => Ok(Stage::Pretrained),
            "intermediate" => Ok(Stage::Intermediate),
            "risk" => Ok(Stage::Risk),
            other => Err(Error::Config(format!("unknown stage tag `{other}`"))),
        }
    }
}

/// Model weights plus the provenance needed to reuse them safely.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub extractor: ExtractorConfig,
    pub stage: Stage,
}

/// One training-log entry: optimizer step, stage tag, batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
}

/// A slide reduced to its tissue grid and frozen per-patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSlide {
    pub grid: crate::tiling::PatchGrid,
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPatient {
    pub id: String,
    pub label: bool,
    pub intermediates: IntermediateTargets,
    pub clinical: crate::clinical::ClinicalRecord,
    pub slides: Vec<PreparedSlide>,
}

/// A cohort after tiling and featurization; training and inference read only
/// this form.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCohort {
    pub schema: crate::clinical::ClinicalSchema,
    pub extractor: ExtractorConfig,
    pub tiling: TilingConfig,
    pub patients: Vec<PreparedPatient>,
}

impl PreparedCohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> PreparedCohort {
        PreparedCohort {
            schema: self.schema.clone(),
            extractor: self.extractor,
            tiling: self.tiling,
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }
}

/// Tile and featurize every slide once; slides without tissue keep an empty
/// grid and contribute no regions later.
pub fn prepare_cohort(
    cohort: &Cohort,
    extractor: &Extractor,
    tiling: &TilingConfig,
) -> Result<PreparedCohort> {
    let mut patients = Vec::with_capacity(cohort.patients.len());
    for p in &cohort.patients {
        let mut slides = Vec::with_capacity(p.slides.len());
        for s in &p.slides {
            let mask = tissue_mask(
                &s.image,
                tiling.patch_px,
                tiling.brightness_threshold,
                tiling.min_tissue_fraction,
            )?;
            let grid = tile(&s.image, tiling.patch_px, &mask)?;
            let features = extractor.extract_grid(&s.image, &grid)?;
            slides.push(PreparedSlide { grid, features });
        }
        patients.push(PreparedPatient {
            id: p.id.clone(),
            label: p.label,
            intermediates: p.intermediates,
            clinical: p.clinical.clone(),
            slides,
        });
    }
    Ok(PreparedCohort {
        schema: cohort.schema.clone(),
        extractor: extractor.config(),
        tiling: *tiling,
        patients,
    })
}

/// Sample up to `k` regions pooled across a patient's slides; regions within
/// one slide never overlap.
fn sample_patient_regions(
    patient: &PreparedPatient,
    k: usize,
    side: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Region)> {
    let mut pooled = Vec::new();
    for (si, slide) in patient.slides.iter().enumerate() {
        for region in sample_regions(&slide.grid, k, side, rng) {
            pooled.push((si, region));
        }
    }
    if pooled.len() > k {
        pooled.shuffle(rng);
        pooled.truncate(k);
        pooled.sort_by_key(|(si, r)| (*si, r.origin));
    }
    pooled
}

/// The deterministic non-overlapping cover pooled across slides, capped at
/// `max_regions` by seeded sampling without replacement.
fn eval_regions(
    patient: &PreparedPatient,
    max_regions: usize,
    side: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Region)> {
    let mut pooled = Vec::new();
    for (si, slide) in patient.slides.iter().enumerate() {
        for region in cover_regions(&slide.grid, side) {
            pooled.push((si, region));
        }
    }
    if pooled.len() > max_regions {
        pooled.shuffle(rng);
        pooled.truncate(max_regions);
        pooled.sort_by_key(|(si, r)| (*si, r.origin));
    }
    pooled
}

fn region_batch(patient: &PreparedPatient, slide_idx: usize, region: &Region) -> RegionBatch {
    let slide = &patient.slides[slide_idx];
    RegionBatch::full(rows_for_region(&slide.features, region), region.positions.clone())
}

/// SGD with momentum and cosine step-size decay over the planned step count.
struct Sgd {
    base_lr: f64,
    momentum: f64,
    total_steps: usize,
    step: usize,
    velocity: Vec<Matrix>,
}

impl Sgd {
    fn new(params: &ModelParams, cfg: &TrainConfig, total_steps: usize) -> Self {
        Sgd {
            base_lr: cfg.learning_rate,
            momentum: cfg.momentum,
            total_steps,
            step: 0,
            velocity: params
                .tensors()
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    /// Apply one step; `trainable` masks which tensors may move.
    fn apply(&mut self, params: &mut ModelParams, grads: &[Matrix], trainable: &[bool]) {
        let lr = if self.total_steps <= 1 {
            self.base_lr
        } else {
            let t = self.step as f64 / (self.total_steps - 1) as f64;
            self.base_lr * 0.5 * (1.0 + fx::cos(core::f64::consts::PI * t))
        };
        self.step += 1;
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let v = &mut self.velocity[i];
            *v = v.scale(self.momentum);
            v.add_assign_scaled(&grads[i], -lr);
            tensor.add_assign(v);
        }
    }
}

enum Objective<'a> {
    Mae,
    Risk { weights: (f64, f64) },
    Intermediate { spec: TargetSpec },
    _Phantom(&'a ()),
}

/// Shared epoch loop. Returns the per-step log.
fn run_stage(
    params: &mut ModelParams,
    prepared: &PreparedCohort,
    tcfg: &TransformerConfig,
    cfg: &TrainConfig,
    epochs: usize,
    objective: &Objective,
    stage_tag: &str,
    stream_tag: u64,
    trainable: &[bool],
    log: &mut Vec<TrainLogRow>,
    step_offset: usize,
) -> Result<()> {
    let n = prepared.len();
    if n == 0 {
        return Err(Error::Empty("training cohort is empty".into()));
    }
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = Sgd::new(params, cfg, epochs * batches_per_epoch);
    let mut step = step_offset;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, &[stream_tag, epoch as u64, 0]));
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let pv = params_to_tape(&mut tape, params);
            let mut batch_loss: Option<Var> = None;
            let mut contributing = 0usize;
            for &pi in chunk {
                let patient = &prepared.patients[pi];
                let mut rng = stream(cfg.seed, &[stream_tag, epoch as u64, 1 + pi as u64]);
                let loss = patient_loss(
                    &mut tape, &pv, tcfg, cfg, patient, objective, &mut rng,
                )?;
                let Some(loss) = loss else { continue };
                contributing += 1;
                batch_loss = Some(match batch_loss {
                    Some(prev) => tape.add(prev, loss),
                    None => loss,
                });
            }
            let Some(total) = batch_loss else { continue };
            let loss_var = tape.scale(total, 1.0 / contributing as f64);
            let loss_value = tape.value(loss_var).get(0, 0);
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!(
                    "{stage_tag} diverged at step {step}: loss {loss_value}"
                )));
            }
            let grads = tape.backward(loss_var)?;
            let grads = collect_grads(&grads, &pv, params);
            opt.apply(params, &grads, trainable);
            log.push(TrainLogRow { step, stage: stage_tag.to_string(), loss: loss_value });
            step += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::Numerical(format!("{stage_tag}: parameters diverged")));
    }
    Ok(())
}

/// One patient's loss on the tape, or `None` when no region is available.
fn patient_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    tcfg: &TransformerConfig,
    cfg: &TrainConfig,
    patient: &PreparedPatient,
    objective: &Objective,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var>> {
    let side = tcfg.region_side as u32;
    let regions =
        sample_patient_regions(patient, cfg.regions_per_patient_train, side, rng);
    if regions.is_empty() {
        return Ok(None);
    }
    match objective {
        Objective::Mae => {
            let mut total: Option<Var> = None;
            let mut count = 0usize;
            for (si, region) in &regions {
                let batch = region_batch(patient, *si, region);
                if batch.present_count() < 2 {
                    continue;
                }
                let masked = mae_mask(&batch, tcfg.mask_ratio, rng)?;
                let targets = batch.features.clone();
                let loss = mae_loss_on_tape(tape, pv, tcfg, &masked, &targets)?;
                count += 1;
                total = Some(match total {
                    Some(prev) => tape.add(prev, loss),
                    None => loss,
                });
            }
            Ok(total.map(|t| tape.scale(t, 1.0 / count as f64)))
        }
        Objective::Risk { .. } | Objective::Intermediate { .. } => {
            let mut tokens: Option<Var> = None;
            let mut count = 0usize;
            for (si, region) in &regions {
                let region = subsample_patches(region, cfg.patch_fraction_train, rng)?;
                if region.is_empty() {
                    continue;
                }
                let batch = region_batch(patient, *si, &region);
                let fwd = forward_on_tape(tape, pv, tcfg, &batch)?;
                count += 1;
                tokens = Some(match tokens {
                    Some(prev) => tape.concat_rows(prev, fwd.class_token),
                    None => fwd.class_token,
                });
            }
            let Some(tokens) = tokens else { return Ok(None) };
            let _ = count;
            let emb = tape.mean_rows(tokens);
            let loss = match objective {
                Objective::Risk { weights } => {
                    let logit = risk_logit_on_tape(tape, pv, tcfg, emb);
                    let (w_pos, w_neg) = *weights;
                    let (target, weight) =
                        if patient.label { (1.0, w_pos) } else { (0.0, w_neg) };
                    tape.bce_logit(logit, target, weight)
                }
                Objective::Intermediate { spec } => maskhit::intermediate_loss_on_tape(
                    tape,
                    pv,
                    tcfg,
                    emb,
                    &patient.intermediates,
                    *spec,
                )?,
                Objective::Mae | Objective::_Phantom(_) => unreachable!(),
            };
            Ok(Some(loss))
        }
        Objective::_Phantom(_) => unreachable!(),
    }
}

/// Masked-autoencoder pretraining from a fresh initialization. Zero epochs
/// returns the initialization itself, tagged `pretrained`.
pub fn pretrain(
    prepared: &PreparedCohort,
    tcfg: &TransformerConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
    tcfg.validate()?;
    cfg.validate()?;
    let mut params = ModelParams::init(*tcfg, cfg.seed)?;
    let mut log = Vec::new();
    let trainable = vec![true; params.tensors().len()];
    run_stage(
        &mut params,
        prepared,
        tcfg,
        cfg,
        cfg.pretrain_epochs,
        &Objective::Mae,
        "pretrain",
        tags::PRETRAIN,
        &trainable,
        &mut log,
        0,
    )?;
    Ok((Checkpoint { params, extractor: prepared.extractor, stage: Stage::Pretrained }, log))
}

fn risk_objective(prepared: &PreparedCohort) -> Objective<'static> {
    let n = prepared.len();
    let pos = prepared.patients.iter().filter(|p| p.label).count();
    Objective::Risk { weights: class_weights(n, pos) }
}

/// Direct fine-tuning: transformer and risk head trained end to end on the
/// 5-year label.
pub fn finetune_direct(
    checkpoint: &Checkpoint,
    prepared: &PreparedCohort,
    tcfg: &TransformerConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
    tcfg.validate()?;
    cfg.validate()?;
    if checkpoint.stage != Stage::Pretrained {
        return Err(Error::Config(format!(
            "finetune_direct expects a pretrained checkpoint, got `{}`",
            checkpoint.stage.name()
        )));
    }
    if checkpoint.extractor != prepared.extractor {
        return Err(Error::Config("checkpoint and cohort featurizer configs differ".into()));
    }
    let mut params = checkpoint.params.clone();
    let mut log = Vec::new();
    let trainable = vec![true; params.tensors().len()];
    run_stage(
        &mut params,
        prepared,
        tcfg,
        cfg,
        cfg.finetune_epochs,
        &risk_objective(prepared),
        "risk",
        tags::FINETUNE,
        &trainable,
        &mut log,
        0,
    )?;
    Ok((Checkpoint { params, extractor: prepared.extractor, stage: Stage::Risk }, log))
}

/// Output of guided fine-tuning: the stage-1 (intermediate) checkpoint and
/// the stage-2 risk checkpoint.
#[derive(Debug, Clone)]
pub struct GuidedOutput {
    pub stage1: Checkpoint,
    pub stage2: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// Guided two-stage fine-tuning: stage 1 trains the intermediate heads end
/// to end; stage 2 swaps in a fresh risk head and trains it with the
/// transformer frozen (`cfg.freeze_transformer`) or free.
pub fn finetune_guided(
    checkpoint: &Checkpoint,
    prepared: &PreparedCohort,
    target_spec: TargetSpec,
    tcfg: &TransformerConfig,
    cfg: &TrainConfig,
) -> Result<GuidedOutput> {
    tcfg.validate()?;
    cfg.validate()?;
    if checkpoint.stage != Stage::Pretrained {
        return Err(Error::Config(format!(
            "finetune_guided expects a pretrained checkpoint, got `{}`",
            checkpoint.stage.name()
        )));
    }
    if checkpoint.extractor != prepared.extractor {
        return Err(Error::Config("checkpoint and cohort featurizer configs differ".into()));
    }
    let mut params = checkpoint.params.clone();
    let mut log = Vec::new();
    let trainable = vec![true; params.tensors().len()];
    run_stage(
        &mut params,
        prepared,
        tcfg,
        cfg,
        cfg.finetune_epochs,
        &Objective::Intermediate { spec: target_spec },
        "intermediate",
        tags::FINETUNE,
        &trainable,
        &mut log,
        0,
    )?;
    let stage1 =
        Checkpoint { params: params.clone(), extractor: prepared.extractor, stage: Stage::Intermediate };

    // Stage 2: fresh risk head; stage-1 heads play no further part.
    params.reinit_risk_head(derive_seed(cfg.seed, &[tags::HEAD_INIT, 2]));
    let trainable = if cfg.freeze_transformer {
        let mut mask = vec![false; params.tensors().len()];
        for i in params.risk_head_indices() {
            mask[i] = true;
        }
        mask
    } else {
        vec![true; params.tensors().len()]
    };
    let step_offset = log.len();
    run_stage(
        &mut params,
        prepared,
        tcfg,
        cfg,
        cfg.finetune_epochs,
        &risk_objective(prepared),
        "risk",
        tags::FINETUNE + 0x100,
        &trainable,
        &mut log,
        step_offset,
    )?;
    let stage2 = Checkpoint { params, extractor: prepared.extractor, stage: Stage::Risk };
    Ok(GuidedOutput { stage1, stage2, log })
}

/// Patient embedding at evaluation time: class tokens of up to
/// `max_regions_eval` cover regions (no masking, no patch subsampling),
/// averaged.
pub fn embed_patient(
    checkpoint: &Checkpoint,
    patient: &PreparedPatient,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let tcfg = checkpoint.params.config();
    let mut rng = stream(cfg.seed, &[tags::EVAL, id_hash(&patient.id)]);
    let regions =
        eval_regions(patient, cfg.max_regions_eval, tcfg.region_side as u32, &mut rng);
    if regions.is_empty() {
        return Err(Error::NoTissue(format!("patient {} has no tissue regions", patient.id)));
    }
    let mut tokens = Vec::with_capacity(regions.len());
    for (si, region) in &regions {
        let batch = region_batch(patient, *si, region);
        let (cls, _) = maskhit::forward_region(&checkpoint.params, &batch)?;
        tokens.push(cls);
    }
    maskhit::aggregate_patient(&tokens)
}

/// 5-year risk probability for one patient.
pub fn predict_patient(
    checkpoint: &Checkpoint,
    patient: &PreparedPatient,
    cfg: &TrainConfig,
) -> Result<f64> {
    if checkpoint.stage != Stage::Risk {
        return Err(Error::Config(format!(
            "predict_patient expects a risk checkpoint, got `{}`",
            checkpoint.stage.name()
        )));
    }
    let emb = embed_patient(checkpoint, patient, cfg)?;
    maskhit::risk_head(&checkpoint.params, &emb)
}

/// Intermediate-target predictions for one patient (stage-1 checkpoints).
pub fn predict_intermediate(
    checkpoint: &Checkpoint,
    patient: &PreparedPatient,
    cfg: &TrainConfig,
    spec: TargetSpec,
) -> Result<Vec<(Target, HeadOutput)>> {
    let emb = embed_patient(checkpoint, patient, cfg)?;
    maskhit::intermediate_head(&checkpoint.params, &emb, spec)
}

fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, SynthConfig};

    fn tiny_tcfg() -> TransformerConfig {
        TransformerConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 16,
            mlp_dim: 24,
            feature_dim: 8,
            max_slots: 100,
            region_side: 10,
            mask_ratio: 0.5,
        }
    }

    fn tiny_prepared(n: usize, seed: u64) -> PreparedCohort {
        let cfg = SynthConfig {
            n_patients: n,
            slide_px: (80, 80),
            patch_px: 8,
            image_signal: 2.0,
            clinical_signal: 0.5,
            noise_sd: 0.3,
            seed,
            ..SynthConfig::default()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let extractor =
            Extractor::new(ExtractorConfig { seed: 1, out_dim: 8 }).unwrap();
        prepare_cohort(&cohort, &extractor, &TilingConfig::new(8)).unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 2,
            finetune_epochs: 2,
            batch_size: 4,
            learning_rate: 0.02,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let prepared = tiny_prepared(6, 1);
        let tcfg = tiny_tcfg();
        let cfg = TrainConfig { pretrain_epochs: 0, ..tiny_train_cfg() };
        let (ckpt, log) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        assert_eq!(ckpt.params, ModelParams::init(tcfg, cfg.seed).unwrap());
        assert_eq!(ckpt.stage, Stage::Pretrained);
        assert!(log.is_empty());
    }

    #[test]
    fn pretraining_reduces_mae_loss_and_is_deterministic() {
        let prepared = tiny_prepared(10, 2);
        let tcfg = tiny_tcfg();
        let cfg = TrainConfig { pretrain_epochs: 8, ..tiny_train_cfg() };
        let (ckpt_a, log_a) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        let (ckpt_b, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        assert_eq!(ckpt_a, ckpt_b);
        let first = log_a.first().unwrap().loss;
        let last = log_a.last().unwrap().loss;
        assert!(last < first, "mae loss did not drop: {first} -> {last}");
    }

    #[test]
    fn direct_finetune_requires_pretrained_stage() {
        let prepared = tiny_prepared(6, 3);
        let tcfg = tiny_tcfg();
        let cfg = tiny_train_cfg();
        let (ckpt, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        let (risk_ckpt, log) = finetune_direct(&ckpt, &prepared, &tcfg, &cfg).unwrap();
        assert_eq!(risk_ckpt.stage, Stage::Risk);
        assert!(!log.is_empty());
        assert!(finetune_direct(&risk_ckpt, &prepared, &tcfg, &cfg).is_err());
    }

    #[test]
    fn freeze_keeps_backbone_tensors_byte_identical() {
        let prepared = tiny_prepared(8, 4);
        let tcfg = tiny_tcfg();
        let cfg = TrainConfig { freeze_transformer: true, ..tiny_train_cfg() };
        let (ckpt, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        let guided = finetune_guided(&ckpt, &prepared, TargetSpec::AllColonoscopy, &tcfg, &cfg)
            .unwrap();
        let names = guided.stage1.params.names();
        let risk: Vec<usize> = guided.stage1.params.risk_head_indices();
        for (i, (a, b)) in guided
            .stage1
            .params
            .tensors()
            .iter()
            .zip(guided.stage2.params.tensors())
            .enumerate()
        {
            if risk.contains(&i) {
                continue;
            }
            assert_eq!(a, b, "tensor {} changed under freeze", names[i]);
        }
        assert_eq!(guided.stage1.stage, Stage::Intermediate);
        assert_eq!(guided.stage2.stage, Stage::Risk);
    }

    #[test]
    fn unfrozen_guided_training_moves_the_backbone() {
        let prepared = tiny_prepared(8, 6);
        let tcfg = tiny_tcfg();
        let cfg = TrainConfig { freeze_transformer: false, ..tiny_train_cfg() };
        let (ckpt, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        let guided =
            finetune_guided(&ckpt, &prepared, TargetSpec::All, &tcfg, &cfg).unwrap();
        let moved = guided
            .stage1
            .params
            .tensors()
            .iter()
            .zip(guided.stage2.params.tensors())
            .enumerate()
            .filter(|(i, (a, b))| guided.stage1.params.backbone_indices().contains(i) && a != b)
            .count();
        assert!(moved > 0, "stage 2 should move backbone tensors when not frozen");
    }

    #[test]
    fn predictions_are_probabilities_and_deterministic() {
        let prepared = tiny_prepared(8, 7);
        let tcfg = tiny_tcfg();
        let cfg = tiny_train_cfg();
        let (ckpt, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        let (risk_ckpt, _) = finetune_direct(&ckpt, &prepared, &tcfg, &cfg).unwrap();
        for p in &prepared.patients {
            let a = predict_patient(&risk_ckpt, p, &cfg).unwrap();
            let b = predict_patient(&risk_ckpt, p, &cfg).unwrap();
            assert!(a > 0.0 && a < 1.0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn duplicating_a_slide_leaves_full_cover_prediction_unchanged() {
        let prepared = tiny_prepared(4, 8);
        let tcfg = tiny_tcfg();
        let cfg = tiny_train_cfg();
        let (ckpt, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        let (risk_ckpt, _) = finetune_direct(&ckpt, &prepared, &tcfg, &cfg).unwrap();
        let patient = &prepared.patients[0];
        let mut doubled = patient.clone();
        doubled.slides.push(patient.slides[0].clone());
        let single = predict_patient(&risk_ckpt, patient, &cfg).unwrap();
        let dup = predict_patient(&risk_ckpt, &doubled, &cfg).unwrap();
        assert!((single - dup).abs() < 1e-12);
    }

    #[test]
    fn single_region_patient_predicts_from_that_region() {
        let prepared = tiny_prepared(4, 9);
        let tcfg = tiny_tcfg();
        let cfg = tiny_train_cfg();
        let (ckpt, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        let (risk_ckpt, _) = finetune_direct(&ckpt, &prepared, &tcfg, &cfg).unwrap();
        // 80x80 slides with patch 8 and side 10 support exactly one region.
        let patient = &prepared.patients[1];
        let cover = cover_regions(&patient.slides[0].grid, 10);
        assert_eq!(cover.len(), 1);
        let batch = region_batch(patient, 0, &cover[0]);
        let (cls, _) = maskhit::forward_region(&risk_ckpt.params, &batch).unwrap();
        let direct = maskhit::risk_head(&risk_ckpt.params, &cls).unwrap();
        let via_predict = predict_patient(&risk_ckpt, patient, &cfg).unwrap();
        assert_eq!(direct, via_predict);
    }

    #[test]
    fn no_tissue_patient_is_a_distinct_error() {
        let prepared = tiny_prepared(3, 10);
        let tcfg = tiny_tcfg();
        let cfg = tiny_train_cfg();
        let (ckpt, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
        let (risk_ckpt, _) = finetune_direct(&ckpt, &prepared, &tcfg, &cfg).unwrap();
        let mut blank = prepared.patients[0].clone();
        blank.slides = vec![PreparedSlide {
            grid: crate::tiling::PatchGrid { coords: Vec::new(), patch_px: 8, rows: 10, cols: 10 },
            features: Matrix::zeros(0, 8),
        }];
        assert!(matches!(
            predict_patient(&risk_ckpt, &blank, &cfg),
            Err(Error::NoTissue(_))
        ));
    }
}
