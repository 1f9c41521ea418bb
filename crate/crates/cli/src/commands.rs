//! Subcommand implementations. Every command writes its outputs under one
//! run directory together with the effective config echo, and is
//! byte-reproducible from (config, seed).

use std::path::Path;

use crcrisk_core::clinical::Category;
use crcrisk_core::evalstat::{split_indices, PipelineSpec};
use crcrisk_core::featurizer::Extractor;
use crcrisk_core::fusion::{decision_feature_row, fit_wsi_decision_feature};
use crcrisk_core::interpret::{
    aggregate_shapley, attention_difference, attention_map, permutation_importance,
    render_overlay, schema_grouping, shapley, Palette, ShapleyReport,
};
use crcrisk_core::linalg::Matrix;
use crcrisk_core::rng::{derive_seed, stream, tags};
use crcrisk_core::synth::generate_cohort;
use crcrisk_core::training::{
    finetune_direct, finetune_guided, predict_patient, prepare_cohort, pretrain, Checkpoint,
    PreparedCohort, Stage,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::{checkpoint_io, cohort_io, ppm, reports};

fn init_run_dir(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

/// Generate a synthetic cohort directory.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    init_run_dir(cfg, out)?;
    let synth_cfg = cfg.synth_config();
    let cohort = generate_cohort(&synth_cfg)?;
    cohort_io::write_cohort(&cohort, out, Some(&synth_cfg))?;
    log::info!(
        "wrote cohort of {} patients ({} positive) to {}",
        cohort.len(),
        cohort.positives(),
        out.display()
    );
    Ok(())
}

fn load_prepared(cfg: &RunConfig, cohort_dir: &Path) -> Result<(PreparedCohort, Extractor)> {
    let cohort = cohort_io::read_cohort(cohort_dir)?;
    let extractor = Extractor::new(cfg.extractor_config())?;
    let prepared = prepare_cohort(&cohort, &extractor, &cfg.tiling_config())?;
    Ok((prepared, extractor))
}

/// Masked pretraining; writes `pretrained.ckpt` and the training log.
pub fn cmd_pretrain(cfg: &RunConfig, cohort_dir: &Path, out: &Path) -> Result<()> {
    init_run_dir(cfg, out)?;
    let (prepared, _) = load_prepared(cfg, cohort_dir)?;
    let (ckpt, log) = pretrain(&prepared, &cfg.transformer_config(), &cfg.train_config())?;
    checkpoint_io::write(&out.join("pretrained.ckpt"), &ckpt)?;
    reports::write_train_log(&out.join("train_log.csv"), &log)?;
    log::info!("pretrained for {} steps", log.len());
    Ok(())
}

/// Fine-tuning from a pretrained checkpoint; writes `risk.ckpt` (plus
/// `intermediate.ckpt` for guided modes) and the training log.
pub fn cmd_train(
    cfg: &RunConfig,
    cohort_dir: &Path,
    checkpoint_path: &Path,
    out: &Path,
) -> Result<()> {
    init_run_dir(cfg, out)?;
    let start = checkpoint_io::read(checkpoint_path)?;
    // The checkpoint is authoritative for the architecture and featurizer.
    let mut run_cfg = cfg.clone();
    run_cfg.extractor.out_dim = start.extractor.out_dim;
    let cohort = cohort_io::read_cohort(cohort_dir)?;
    let extractor = Extractor::new(start.extractor)?;
    let prepared = prepare_cohort(&cohort, &extractor, &cfg.tiling_config())?;
    let tcfg = *start.params.config();
    let mode = cfg.wsi_mode()?;
    let train_cfg = cfg.train_config();
    let log = match mode {
        crcrisk_core::evalstat::WsiMode::Direct => {
            let (ckpt, log) = finetune_direct(&start, &prepared, &tcfg, &train_cfg)?;
            checkpoint_io::write(&out.join("risk.ckpt"), &ckpt)?;
            log
        }
        crcrisk_core::evalstat::WsiMode::Guided { spec, freeze } => {
            let train_cfg =
                crcrisk_core::training::TrainConfig { freeze_transformer: freeze, ..train_cfg };
            let guided = finetune_guided(&start, &prepared, spec, &tcfg, &train_cfg)?;
            checkpoint_io::write(&out.join("intermediate.ckpt"), &guided.stage1)?;
            checkpoint_io::write(&out.join("risk.ckpt"), &guided.stage2)?;
            guided.log
        }
    };
    reports::write_train_log(&out.join("train_log.csv"), &log)?;
    log::info!("fine-tuned ({}) for {} steps", cfg.train.mode, log.len());
    Ok(())
}

/// Run the repeated-split experiment over the configured pipelines; writes
/// `report.csv`, `pvalues.csv`, and `summary.txt`, and returns the summary.
pub fn cmd_eval(
    cfg: &RunConfig,
    cohort_dir: &Path,
    pipeline_override: &[String],
    out: &Path,
) -> Result<String> {
    init_run_dir(cfg, out)?;
    let ecfg = cfg.experiment_config(pipeline_override)?;
    let ctx = cfg.pipeline_context()?;
    let (prepared, _) = load_prepared(cfg, cohort_dir)?;
    let report = crcrisk_core::evalstat::run_experiment_prepared(&prepared, &ecfg, &ctx)?;
    reports::write_eval_csv(&out.join("report.csv"), &report)?;
    reports::write_pvalues_csv(&out.join("pvalues.csv"), &report)?;
    reports::write_summary(&out.join("summary.txt"), &report)?;
    Ok(reports::render_summary(&report))
}

/// What `explain` should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplainKind {
    Attention,
    AttentionDiff,
    Shapley,
}

impl ExplainKind {
    pub fn parse(s: &str) -> Result<ExplainKind> {
        match s {
            "attention" => Ok(ExplainKind::Attention),
            "attention-diff" => Ok(ExplainKind::AttentionDiff),
            "shapley" => Ok(ExplainKind::Shapley),
            other => Err(CliError::Config(format!(
                "unknown explain kind `{other}`; valid: attention, attention-diff, shapley"
            ))),
        }
    }
}

/// Attention overlays, attention-difference overlays, or Shapley tables.
pub fn cmd_explain(
    cfg: &RunConfig,
    cohort_dir: &Path,
    kind: ExplainKind,
    checkpoint_path: &Path,
    baseline_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    init_run_dir(cfg, out)?;
    let ckpt = checkpoint_io::read(checkpoint_path)?;
    let cohort = cohort_io::read_cohort(cohort_dir)?;
    let extractor = Extractor::new(ckpt.extractor)?;
    let prepared = prepare_cohort(&cohort, &extractor, &cfg.tiling_config())?;
    match kind {
        ExplainKind::Attention => {
            let mut rendered = 0;
            for (p, raw) in prepared.patients.iter().zip(&cohort.patients) {
                if rendered >= cfg.explain.slides {
                    break;
                }
                for (slide, raw_slide) in p.slides.iter().zip(&raw.slides) {
                    if slide.grid.is_empty() {
                        continue;
                    }
                    let map = attention_map(&ckpt, slide)?;
                    let overlay = render_overlay(&raw_slide.image, &map, Palette::Sequential)?;
                    ppm::write(&out.join(format!("attention_{}.ppm", raw_slide.id)), &overlay)?;
                    rendered += 1;
                    if rendered >= cfg.explain.slides {
                        break;
                    }
                }
            }
            if rendered == 0 {
                return Err(CliError::Core(crcrisk_core::Error::NoTissue(
                    "no slide with tissue to render".into(),
                )));
            }
        }
        ExplainKind::AttentionDiff => {
            let baseline_path = baseline_path.ok_or_else(|| {
                CliError::Config("attention-diff needs --baseline <pretrained checkpoint>".into())
            })?;
            let baseline = checkpoint_io::read(baseline_path)?;
            let mut rendered = 0;
            for (p, raw) in prepared.patients.iter().zip(&cohort.patients) {
                if rendered >= cfg.explain.slides {
                    break;
                }
                for (slide, raw_slide) in p.slides.iter().zip(&raw.slides) {
                    if slide.grid.is_empty() {
                        continue;
                    }
                    let map = attention_difference(&baseline, &ckpt, slide)?;
                    let overlay = render_overlay(&raw_slide.image, &map, Palette::Diverging)?;
                    ppm::write(
                        &out.join(format!("attention_diff_{}.ppm", raw_slide.id)),
                        &overlay,
                    )?;
                    rendered += 1;
                    if rendered >= cfg.explain.slides {
                        break;
                    }
                }
            }
            if rendered == 0 {
                return Err(CliError::Core(crcrisk_core::Error::NoTissue(
                    "no slide with tissue to render".into(),
                )));
            }
        }
        ExplainKind::Shapley => {
            let report = shapley_report(cfg, &prepared, &ckpt, out)?;
            reports::write_group_stats_csv(&out.join("shapley.csv"), &report)?;
        }
    }
    Ok(())
}

fn explain_categories(cfg: &RunConfig) -> Result<Vec<Category>> {
    let spec = PipelineSpec::parse(&cfg.explain.categories.join("+")).map_err(CliError::Core)?;
    if spec.use_wsi {
        return Err(CliError::Config(
            "explain categories select clinical variable groups; `wsi` is implicit".into(),
        ));
    }
    Ok(spec.categories)
}

/// Shapley attribution of the decision-feature fusion model: per repeat, fit
/// the fusion classifier on a fresh train split, average exact per-instance
/// Shapley values over held-out instances, then aggregate across repeats.
fn shapley_report(
    cfg: &RunConfig,
    prepared: &PreparedCohort,
    ckpt: &Checkpoint,
    out: &Path,
) -> Result<ShapleyReport> {
    if ckpt.stage != Stage::Risk {
        return Err(CliError::Config(
            "shapley explain needs a risk-stage checkpoint".into(),
        ));
    }
    let categories = explain_categories(cfg)?;
    let schema = &prepared.schema;
    let cols = schema.columns_for(&categories);
    let (mut names, mut groups) = schema_grouping(schema, &categories);
    names.push("wsi_risk_score".into());
    groups.push(vec![cols.len()]);

    let labels = prepared.labels();
    let train_cfg = cfg.train_config();
    let classifier = cfg.tabular_config()?;
    let p_wsi_all: Vec<f64> = prepared
        .patients
        .iter()
        .map(|p| predict_patient(ckpt, p, &train_cfg))
        .collect::<crcrisk_core::Result<_>>()?;

    let mut per_repeat: Vec<Vec<f64>> = Vec::new();
    let mut last_perm: Option<Vec<crcrisk_core::interpret::GroupStat>> = None;
    for repeat in 0..cfg.explain.repeats.max(1) {
        let seed = derive_seed(cfg.seed, &[tags::SHAPLEY, repeat as u64]);
        let (train_idx, test_idx) = split_indices(&labels, cfg.experiment.test_fraction, seed)
            .map_err(CliError::Core)?;
        let train_records: Vec<&crcrisk_core::clinical::ClinicalRecord> =
            train_idx.iter().map(|&i| &prepared.patients[i].clinical).collect();
        let stats =
            crcrisk_core::clinical::fit_preprocessor(&train_records, schema).map_err(CliError::Core)?;
        let encode = |idx: &[usize]| -> Result<Matrix> {
            let records: Vec<&crcrisk_core::clinical::ClinicalRecord> =
                idx.iter().map(|&i| &prepared.patients[i].clinical).collect();
            let full = stats.encode_matrix(schema, &records).map_err(CliError::Core)?;
            Ok(Matrix::from_fn(full.rows(), cols.len(), |r, c| full.get(r, cols[c])))
        };
        let train_x = encode(&train_idx)?;
        let test_x = encode(&test_idx)?;
        let train_y: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
        let train_p: Vec<f64> = train_idx.iter().map(|&i| p_wsi_all[i]).collect();
        let model = fit_wsi_decision_feature(&train_p, &train_x, &train_y, &classifier)
            .map_err(CliError::Core)?;

        // Background: train rows with the WSI column appended.
        let mut background = Matrix::zeros(train_x.rows(), cols.len() + 1);
        for i in 0..train_x.rows() {
            background
                .row_mut(i)
                .copy_from_slice(&decision_feature_row(train_x.row(i), train_p[i]));
        }
        let predict = |row: &[f64]| model.model.predict_proba(row);
        let mut rng = stream(seed, &[tags::SHAPLEY]);
        let n_instances = cfg.explain.instances.min(test_idx.len()).max(1);
        let mut mean_values = vec![0.0; groups.len()];
        for (k, &ti) in test_idx.iter().take(n_instances).enumerate() {
            let instance = decision_feature_row(test_x.row(k), p_wsi_all[ti]);
            let sv = shapley(
                predict,
                &instance,
                &background,
                &groups,
                cfg.explain.mc_samples,
                &mut rng,
            )
            .map_err(CliError::Core)?;
            for (m, v) in mean_values.iter_mut().zip(&sv.values) {
                *m += v / n_instances as f64;
            }
        }
        per_repeat.push(mean_values);

        if cfg.explain.permutation_importance && repeat == 0 {
            let mut test_design = Matrix::zeros(test_x.rows(), cols.len() + 1);
            for (k, &ti) in test_idx.iter().enumerate() {
                test_design
                    .row_mut(k)
                    .copy_from_slice(&decision_feature_row(test_x.row(k), p_wsi_all[ti]));
            }
            let test_y: Vec<bool> = test_idx.iter().map(|&i| labels[i]).collect();
            let mut stats = permutation_importance(
                predict,
                &test_design,
                &test_y,
                &groups,
                5,
                &mut stream(seed, &[tags::PERMUTE]),
            )
            .map_err(CliError::Core)?;
            for (s, name) in stats.iter_mut().zip(&names) {
                s.name = name.clone();
            }
            stats.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.name.cmp(&b.name)));
            last_perm = Some(stats);
        }
    }
    if let Some(perm) = last_perm {
        reports::write_stats(&out.join("permutation_importance.csv"), &perm)?;
    }
    aggregate_shapley(&per_repeat, &names).map_err(CliError::Core)
}

/// Render the summary for an existing evaluation directory.
pub fn cmd_report(eval_dir: &Path) -> Result<String> {
    let report =
        reports::read_eval_csv(&eval_dir.join("report.csv"), &eval_dir.join("pvalues.csv"))?;
    Ok(reports::render_summary(&report))
}
