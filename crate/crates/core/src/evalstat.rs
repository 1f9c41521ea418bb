//! Evaluation protocol: repeated stratified 75/25 splits, 5-fold
//! cross-validation on the training side, rank-based AUC, threshold metrics,
//! and paired t-tests between pipelines run on identical split sequences.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::clinical::{fit_tabular, Category, TabularConfig};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::featurizer::Extractor;
use crate::fusion::{
    fit_feature_level, fit_wsi_decision_feature, fuse_decision_weighted, select_weight, FusionSpec,
};
use crate::fx;
use crate::linalg::Matrix;
use crate::maskhit::{TargetSpec, TransformerConfig};
use crate::rng::{derive_seed, stream, tags};
use crate::training::{
    embed_patient, finetune_direct, finetune_guided, predict_patient, prepare_cohort, pretrain,
    Checkpoint, PreparedCohort, TilingConfig, TrainConfig,
};

// ---------------------------------------------------------------------------
// Splits

/// Stratified patient-level split: test prevalence matches the cohort within
/// one patient. Returns (train indices, test indices), each sorted.
pub fn split_indices(
    labels: &[bool],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.len() < 4 {
        return Err(Error::Config(format!("cohort of {} is too small to split", labels.len())));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} not in (0, 1)")));
    }
    let mut rng = stream(seed, &[tags::SPLIT]);
    let mut test = Vec::new();
    let mut train = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = fx::round(test_fraction * idx.len() as f64) as usize;
        let k = k.min(idx.len());
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("split produced an empty partition".to_string()));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified split of a cohort into (train, test).
pub fn split(cohort: &Cohort, test_fraction: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    let labels = cohort.labels();
    let (train, test) = split_indices(&labels, test_fraction, seed)?;
    Ok((cohort.subset(&train), cohort.subset(&test)))
}

/// Stratified k-fold partition: disjoint folds of near-equal size whose
/// union is `0..labels.len()`.
pub fn kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > labels.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} patients",
            labels.len()
        )));
    }
    let mut rng = stream(seed, &[tags::FOLD]);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0usize;
    for class in [false, true] {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

// ---------------------------------------------------------------------------
// Metrics

/// Rank-based AUC: P(score⁺ > score⁻) + ½ P(tie), computed from midranks in
/// exact integer arithmetic so it matches pairwise counting bit for bit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("auc: scores and labels differ in length".to_string()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("auc: non-finite score".to_string()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs both classes in the labels".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled midranks over positives, walked tie group by tie group.
    let mut doubled_rank_sum: i128 = 0;
    let mut start = 0usize;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end (1-based); doubled midrank = start + end + 1.
        let doubled_midrank = (start + end + 1) as i128;
        for &i in &order[start..end] {
            if labels[i] {
                doubled_rank_sum += doubled_midrank;
            }
        }
        start = end;
    }
    let doubled_u = doubled_rank_sum - (n_pos as i128) * (n_pos as i128 + 1);
    Ok(doubled_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub auc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion-matrix metrics at a threshold: predicted positive iff
/// `score >= threshold`. Empty denominators yield 0.
pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Metrics {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    let mut tn = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let n = tp + fp + fn_ + tn;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        auc: f64::NAN, // filled by callers that have rank information
        accuracy: if n > 0.0 { (tp + tn) / n } else { 0.0 },
        f1,
        precision,
        recall,
    }
}

/// F1-maximizing threshold over candidate scores; ties break toward the
/// smaller threshold. Falls back to 0.5 when no candidate helps.
pub fn f1_max_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best_t = 0.5;
    let mut best_f1 = -1.0;
    for &t in &candidates {
        let m = classification_metrics(scores, labels, t);
        if m.f1 > best_f1 + 1e-12 {
            best_f1 = m.f1;
            best_t = t;
        }
    }
    if best_f1 <= 0.0 {
        0.5
    } else {
        best_t
    }
}

// ---------------------------------------------------------------------------
// Paired t-test

/// Sentinel p-value reported when the differences have zero variance but a
/// non-zero mean (the statistic is unbounded).
pub const P_SENTINEL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    pub p: f64,
    pub mean_diff: f64,
}

/// Classic paired t-test on per-repeat metric series; two-sided p from the
/// t CDF via the regularized incomplete beta function.
pub fn paired_ttest(metric_a: &[f64], metric_b: &[f64]) -> Result<PairedTTest> {
    if metric_a.len() != metric_b.len() {
        return Err(Error::Shape("paired_ttest: series lengths differ".to_string()));
    }
    let n = metric_a.len();
    if n < 2 {
        return Err(Error::Config("paired_ttest needs at least 2 pairs".to_string()));
    }
    let diffs: Vec<f64> = metric_a.iter().zip(metric_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            PairedTTest { t: 0.0, p: 1.0, mean_diff: 0.0 }
        } else {
            PairedTTest {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                p: P_SENTINEL,
                mean_diff: mean,
            }
        });
    }
    let t = mean / fx::sqrt(var / n as f64);
    let df = (n - 1) as f64;
    let p = student_t_two_sided_p(t, df);
    Ok(PairedTTest { t, p, mean_diff: mean })
}

/// Two-sided p-value for Student's t: `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Lanczos log-gamma (g = 7, n = 9), |error| well below 1e-10 on x > 0.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx).
        let pi = core::f64::consts::PI;
        return fx::ln(pi / libm::sin(pi * x)) - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = 0.999_999_999_999_809_93;
    for (i, &c) in COEFFS.iter().enumerate() {
        a += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * fx::ln(2.0 * core::f64::consts::PI) + (x + 0.5) * fx::ln(t) - t + fx::ln(a)
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction;
/// absolute error < 1e-10 over the t-test range.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * fx::ln(x) + b * fx::ln(1.0 - x);
    let front = fx::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-30;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if fx::abs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if fx::abs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if fx::abs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if fx::abs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if fx::abs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if fx::abs(del - 1.0) < EPS {
            break;
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Pipelines

/// How the WSI model is trained inside an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WsiMode {
    Direct,
    Guided { spec: TargetSpec, freeze: bool },
}

impl WsiMode {
    pub fn name(&self) -> &'static str {
        match self {
            WsiMode::Direct => "direct",
            WsiMode::Guided { freeze: true, .. } => "guided-freeze",
            WsiMode::Guided { freeze: false, .. } => "guided-full",
        }
    }
}

/// One comparison arm: a '+'-separated set of inputs. `wsi` selects the
/// imaging model; category tokens select clinical variable groups
/// (`clinical` expands to personal+medical+family+endoscopy).
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub name: String,
    pub use_wsi: bool,
    pub categories: Vec<Category>,
}

impl PipelineSpec {
    pub fn parse(name: &str) -> Result<PipelineSpec> {
        let mut use_wsi = false;
        let mut categories: Vec<Category> = Vec::new();
        for token in name.split('+') {
            let token = token.trim();
            match token {
                "wsi" => use_wsi = true,
                "clinical" => {
                    for c in [Category::Personal, Category::Medical, Category::Family, Category::Endoscopy]
                    {
                        if !categories.contains(&c) {
                            categories.push(c);
                        }
                    }
                }
                other => {
                    let c = Category::parse(other).map_err(|_| {
                        Error::Config(format!(
                            "unknown pipeline token `{other}` in `{name}`; valid tokens: wsi, \
                             clinical, personal, medical, family, endoscopy, colonoscopy, \
                             microscopy"
                        ))
                    })?;
                    if !categories.contains(&c) {
                        categories.push(c);
                    }
                }
            }
        }
        if !use_wsi && categories.is_empty() {
            return Err(Error::Config(format!("pipeline `{name}` selects no inputs")));
        }
        categories.sort();
        Ok(PipelineSpec { name: name.to_string(), use_wsi, categories })
    }
}

/// How threshold metrics pick their operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Maximize F1 over out-of-fold training scores, then freeze for test.
    CvF1Max,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub test_fraction: f64,
    pub n_repeats: usize,
    pub cv_folds: usize,
    pub seed: u64,
    pub pipelines: Vec<PipelineSpec>,
    pub threshold_rule: ThresholdRule,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} not in (0, 1)",
                self.test_fraction
            )));
        }
        if self.n_repeats < 2 {
            return Err(Error::Config("n_repeats must be >= 2 for paired tests".to_string()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be >= 2".to_string()));
        }
        if self.pipelines.is_empty() {
            return Err(Error::Config("no pipelines configured".to_string()));
        }
        Ok(())
    }
}

/// Model and fusion settings shared by every pipeline of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineContext {
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
    pub tiling: TilingConfig,
    pub tabular: TabularConfig,
    pub fusion: FusionSpec,
    pub wsi_mode: WsiMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub name: String,
    pub per_repeat: Vec<Metrics>,
    pub thresholds: Vec<f64>,
}

impl PipelineResult {
    pub fn mean_std(&self, pick: impl Fn(&Metrics) -> f64) -> (f64, f64) {
        let xs: Vec<f64> = self.per_repeat.iter().map(pick).collect();
        mean_std(&xs)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, fx::sqrt(var))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub pipeline_a: String,
    pub pipeline_b: String,
    pub test: PairedTTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pipelines: Vec<PipelineResult>,
    /// Paired t-tests on per-repeat AUC for every pipeline pair.
    pub comparisons: Vec<Comparison>,
}

// Per-repeat WSI artifacts shared across pipelines.
struct WsiComponent {
    test_scores: Vec<f64>,
    oof_scores: Vec<f64>,
    test_embeddings: Matrix,
    oof_embeddings: Matrix,
}

struct ClinicalComponent {
    test_scores: Vec<f64>,
    oof_scores: Vec<f64>,
    train_encoded: Matrix,
    test_encoded: Matrix,
}

fn err_in_repeat(repeat: usize, e: Error) -> Error {
    let tag = |m: String| format!("repeat {repeat}: {m}");
    match e {
        Error::Config(m) => Error::Config(tag(m)),
        Error::Shape(m) => Error::Shape(tag(m)),
        Error::Numerical(m) => Error::Numerical(tag(m)),
        Error::UndefinedMetric(m) => Error::UndefinedMetric(tag(m)),
        Error::NoTissue(m) => Error::NoTissue(tag(m)),
        Error::Empty(m) => Error::Empty(tag(m)),
    }
}

/// Train the WSI model for one split: pretrain on the train patients, apply
/// the configured fine-tuning mode.
fn train_wsi(
    train: &PreparedCohort,
    ctx: &PipelineContext,
    seed: u64,
) -> Result<Checkpoint> {
    let cfg = TrainConfig { seed, ..ctx.train };
    let (pre, _) = pretrain(train, &ctx.transformer, &cfg)?;
    match ctx.wsi_mode {
        WsiMode::Direct => Ok(finetune_direct(&pre, train, &ctx.transformer, &cfg)?.0),
        WsiMode::Guided { spec, freeze } => {
            let cfg = TrainConfig { freeze_transformer: freeze, ..cfg };
            Ok(finetune_guided(&pre, train, spec, &ctx.transformer, &cfg)?.stage2)
        }
    }
}

fn wsi_component(
    train: &PreparedCohort,
    test: &PreparedCohort,
    ctx: &PipelineContext,
    cv_folds: usize,
    repeat_seed: u64,
) -> Result<WsiComponent> {
    let model = train_wsi(train, ctx, derive_seed(repeat_seed, &[1]))?;
    let eval_cfg = TrainConfig { seed: derive_seed(repeat_seed, &[2]), ..ctx.train };
    let mut test_scores = Vec::with_capacity(test.len());
    let mut test_embeddings = Matrix::zeros(test.len(), ctx.transformer.model_dim);
    for (i, p) in test.patients.iter().enumerate() {
        test_scores.push(predict_patient(&model, p, &eval_cfg)?);
        let emb = embed_patient(&model, p, &eval_cfg)?;
        test_embeddings.row_mut(i).copy_from_slice(&emb);
    }
    // Out-of-fold train scores: refit on each fold complement.
    let labels = train.labels();
    let folds = kfold(&labels, cv_folds, derive_seed(repeat_seed, &[3]))?;
    let mut oof_scores = vec![0.0; train.len()];
    let mut oof_embeddings = Matrix::zeros(train.len(), ctx.transformer.model_dim);
    for (fi, fold) in folds.iter().enumerate() {
        let rest: Vec<usize> =
            (0..train.len()).filter(|i| !fold.contains(i)).collect();
        let fold_train = train.subset(&rest);
        let fold_model = train_wsi(&fold_train, ctx, derive_seed(repeat_seed, &[4, fi as u64]))?;
        for &i in fold {
            oof_scores[i] = predict_patient(&fold_model, &train.patients[i], &eval_cfg)?;
            let emb = embed_patient(&fold_model, &train.patients[i], &eval_cfg)?;
            oof_embeddings.row_mut(i).copy_from_slice(&emb);
        }
    }
    Ok(WsiComponent { test_scores, oof_scores, test_embeddings, oof_embeddings })
}

/// Cross-validated lambda selection for logistic configs; other models pass
/// through unchanged.
fn tune_tabular(
    x: &Matrix,
    y: &[bool],
    cfg: &TabularConfig,
    cv_folds: usize,
    seed: u64,
) -> Result<TabularConfig> {
    let TabularConfig::Logistic { lambda_grid } = cfg else {
        return Ok(cfg.clone());
    };
    if lambda_grid.len() <= 1 {
        return Ok(cfg.clone());
    }
    let folds = kfold(y, cv_folds, seed)?;
    let mut best = (f64::NEG_INFINITY, lambda_grid[0]);
    for &lambda in lambda_grid {
        let mut fold_aucs = Vec::new();
        for fold in &folds {
            let rest: Vec<usize> = (0..y.len()).filter(|i| !fold.contains(i)).collect();
            let x_train = Matrix::from_fn(rest.len(), x.cols(), |r, c| x.get(rest[r], c));
            let y_train: Vec<bool> = rest.iter().map(|&i| y[i]).collect();
            if y_train.iter().all(|&l| l) || !y_train.iter().any(|&l| l) {
                continue;
            }
            let model = crate::clinical::fit_logistic_l2(&x_train, &y_train, lambda)?;
            let scores: Vec<f64> = fold.iter().map(|&i| model.predict_proba(x.row(i))).collect();
            let fold_labels: Vec<bool> = fold.iter().map(|&i| y[i]).collect();
            if fold_labels.iter().all(|&l| l) || !fold_labels.iter().any(|&l| l) {
                continue;
            }
            fold_aucs.push(auc(&scores, &fold_labels)?);
        }
        if fold_aucs.is_empty() {
            continue;
        }
        let (mean, _) = mean_std(&fold_aucs);
        if mean > best.0 + 1e-12 {
            best = (mean, lambda);
        }
    }
    Ok(TabularConfig::Logistic { lambda_grid: vec![best.1] })
}

fn clinical_component(
    train: &PreparedCohort,
    test: &PreparedCohort,
    categories: &[Category],
    ctx: &PipelineContext,
    cv_folds: usize,
    repeat_seed: u64,
) -> Result<ClinicalComponent> {
    let schema = &train.schema;
    let cols = schema.columns_for(categories);
    let train_records: Vec<&crate::clinical::ClinicalRecord> =
        train.patients.iter().map(|p| &p.clinical).collect();
    let test_records: Vec<&crate::clinical::ClinicalRecord> =
        test.patients.iter().map(|p| &p.clinical).collect();
    let labels = train.labels();

    let select = |m: &Matrix| -> Matrix {
        Matrix::from_fn(m.rows(), cols.len(), |r, c| m.get(r, cols[c]))
    };
    let stats = crate::clinical::fit_preprocessor(&train_records, schema)?;
    let train_encoded = select(&stats.encode_matrix(schema, &train_records)?);
    let test_encoded = select(&stats.encode_matrix(schema, &test_records)?);

    let tuned = tune_tabular(
        &train_encoded,
        &labels,
        &ctx.tabular,
        cv_folds,
        derive_seed(repeat_seed, &[5]),
    )?;
    let model = fit_tabular(&train_encoded, &labels, &tuned)?;
    let test_scores: Vec<f64> =
        (0..test_encoded.rows()).map(|i| model.predict_proba(test_encoded.row(i))).collect();

    // Out-of-fold train scores with per-fold preprocessing.
    let folds = kfold(&labels, cv_folds, derive_seed(repeat_seed, &[6]))?;
    let mut oof_scores = vec![0.0; train.len()];
    for fold in &folds {
        let rest: Vec<usize> = (0..train.len()).filter(|i| !fold.contains(i)).collect();
        let rest_records: Vec<&crate::clinical::ClinicalRecord> =
            rest.iter().map(|&i| &train.patients[i].clinical).collect();
        let fold_stats = crate::clinical::fit_preprocessor(&rest_records, schema)?;
        let rest_encoded = select(&fold_stats.encode_matrix(schema, &rest_records)?);
        let rest_labels: Vec<bool> = rest.iter().map(|&i| labels[i]).collect();
        let fold_model = fit_tabular(&rest_encoded, &rest_labels, &tuned)?;
        for &i in fold {
            let v = fold_stats.apply(schema, &train.patients[i].clinical)?;
            let row: Vec<f64> = cols.iter().map(|&c| v.values[c]).collect();
            oof_scores[i] = fold_model.predict_proba(&row);
        }
    }
    Ok(ClinicalComponent { test_scores, oof_scores, train_encoded, test_encoded })
}

/// Fused or single-modality scores for one pipeline on one split. Returns
/// (test scores, out-of-fold train scores).
#[allow(clippy::too_many_arguments)]
fn pipeline_scores(
    spec: &PipelineSpec,
    wsi: Option<&WsiComponent>,
    clinical: Option<&ClinicalComponent>,
    train_labels: &[bool],
    ctx: &PipelineContext,
    cv_folds: usize,
    repeat_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match (spec.use_wsi, clinical) {
        (true, None) => {
            let w = wsi.expect("wsi component required");
            Ok((w.test_scores.clone(), w.oof_scores.clone()))
        }
        (false, Some(c)) => Ok((c.test_scores.clone(), c.oof_scores.clone())),
        (true, Some(c)) => {
            let w = wsi.expect("wsi component required");
            fuse_scores(w, c, train_labels, ctx, cv_folds, repeat_seed)
        }
        (false, None) => Err(Error::Config(format!("pipeline `{}` has no inputs", spec.name))),
    }
}

fn fuse_scores(
    w: &WsiComponent,
    c: &ClinicalComponent,
    train_labels: &[bool],
    ctx: &PipelineContext,
    cv_folds: usize,
    repeat_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match &ctx.fusion {
        FusionSpec::DecisionAverage => {
            let test = w
                .test_scores
                .iter()
                .zip(&c.test_scores)
                .map(|(&a, &b)| 0.5 * (a + b))
                .collect();
            let oof =
                w.oof_scores.iter().zip(&c.oof_scores).map(|(&a, &b)| 0.5 * (a + b)).collect();
            Ok((test, oof))
        }
        FusionSpec::DecisionWeighted { weight } => {
            let w_sel = match weight {
                Some(w) => *w,
                None => {
                    let pairs: Vec<(f64, f64)> = w
                        .oof_scores
                        .iter()
                        .zip(&c.oof_scores)
                        .map(|(&a, &b)| (a, b))
                        .collect();
                    select_weight(&pairs, train_labels)?.w
                }
            };
            let test = w
                .test_scores
                .iter()
                .zip(&c.test_scores)
                .map(|(&a, &b)| fuse_decision_weighted(a, b, w_sel))
                .collect::<Result<Vec<f64>>>()?;
            let oof = w
                .oof_scores
                .iter()
                .zip(&c.oof_scores)
                .map(|(&a, &b)| fuse_decision_weighted(a, b, w_sel))
                .collect::<Result<Vec<f64>>>()?;
            Ok((test, oof))
        }
        FusionSpec::WsiDecisionFeature { classifier } => {
            let model =
                fit_wsi_decision_feature(&w.oof_scores, &c.train_encoded, train_labels, classifier)?;
            let test = (0..c.test_encoded.rows())
                .map(|i| model.predict(c.test_encoded.row(i), w.test_scores[i]))
                .collect::<Result<Vec<f64>>>()?;
            // Out-of-fold fused scores for thresholding: refit per fold.
            let folds = kfold(train_labels, cv_folds, derive_seed(repeat_seed, &[7]))?;
            let mut oof = vec![0.0; train_labels.len()];
            for fold in &folds {
                let rest: Vec<usize> =
                    (0..train_labels.len()).filter(|i| !fold.contains(i)).collect();
                let p_rest: Vec<f64> = rest.iter().map(|&i| w.oof_scores[i]).collect();
                let x_rest =
                    Matrix::from_fn(rest.len(), c.train_encoded.cols(), |r, cc| {
                        c.train_encoded.get(rest[r], cc)
                    });
                let y_rest: Vec<bool> = rest.iter().map(|&i| train_labels[i]).collect();
                let fold_model =
                    fit_wsi_decision_feature(&p_rest, &x_rest, &y_rest, classifier)?;
                for &i in fold {
                    oof[i] = fold_model.predict(c.train_encoded.row(i), w.oof_scores[i])?;
                }
            }
            Ok((test, oof))
        }
        FusionSpec::FeatureLevel { mlp } => {
            let model =
                fit_feature_level(&w.oof_embeddings, &c.train_encoded, train_labels, mlp)?;
            let test = (0..c.test_encoded.rows())
                .map(|i| model.predict(w.test_embeddings.row(i), c.test_encoded.row(i)))
                .collect::<Result<Vec<f64>>>()?;
            let folds = kfold(train_labels, cv_folds, derive_seed(repeat_seed, &[8]))?;
            let mut oof = vec![0.0; train_labels.len()];
            for fold in &folds {
                let rest: Vec<usize> =
                    (0..train_labels.len()).filter(|i| !fold.contains(i)).collect();
                let e_rest = Matrix::from_fn(rest.len(), w.oof_embeddings.cols(), |r, cc| {
                    w.oof_embeddings.get(rest[r], cc)
                });
                let x_rest = Matrix::from_fn(rest.len(), c.train_encoded.cols(), |r, cc| {
                    c.train_encoded.get(rest[r], cc)
                });
                let y_rest: Vec<bool> = rest.iter().map(|&i| train_labels[i]).collect();
                let fold_model = fit_feature_level(&e_rest, &x_rest, &y_rest, mlp)?;
                for &i in fold {
                    oof[i] =
                        fold_model.predict(w.oof_embeddings.row(i), c.train_encoded.row(i))?;
                }
            }
            Ok((test, oof))
        }
    }
}

/// Run every configured pipeline over `n_repeats` stratified splits; all
/// pipelines of one experiment consume identical split sequences so the
/// paired t-tests are valid.
pub fn run_experiment(
    cohort: &Cohort,
    extractor: &Extractor,
    ecfg: &ExperimentConfig,
    ctx: &PipelineContext,
) -> Result<EvalReport> {
    ecfg.validate()?;
    let prepared = prepare_cohort(cohort, extractor, &ctx.tiling)?;
    run_experiment_prepared(&prepared, ecfg, ctx)
}

/// As [`run_experiment`], over an already prepared cohort.
pub fn run_experiment_prepared(
    prepared: &PreparedCohort,
    ecfg: &ExperimentConfig,
    ctx: &PipelineContext,
) -> Result<EvalReport> {
    ecfg.validate()?;
    let labels = prepared.labels();
    let needs_wsi = ecfg.pipelines.iter().any(|p| p.use_wsi);
    let mut results: Vec<PipelineResult> = ecfg
        .pipelines
        .iter()
        .map(|p| PipelineResult { name: p.name.clone(), per_repeat: Vec::new(), thresholds: Vec::new() })
        .collect();

    for repeat in 0..ecfg.n_repeats {
        let repeat_seed = derive_seed(ecfg.seed, &[tags::EXPERIMENT, repeat as u64]);
        let (train_idx, test_idx) =
            split_indices(&labels, ecfg.test_fraction, repeat_seed).map_err(|e| err_in_repeat(repeat, e))?;
        let train = prepared.subset(&train_idx);
        let test = prepared.subset(&test_idx);
        let train_labels = train.labels();
        let test_labels = test.labels();

        let wsi = if needs_wsi {
            Some(
                wsi_component(&train, &test, ctx, ecfg.cv_folds, repeat_seed)
                    .map_err(|e| err_in_repeat(repeat, e))?,
            )
        } else {
            None
        };
        let mut clinical_cache: BTreeMap<Vec<Category>, ClinicalComponent> = BTreeMap::new();

        for (pi, spec) in ecfg.pipelines.iter().enumerate() {
            let clinical = if spec.categories.is_empty() {
                None
            } else {
                if !clinical_cache.contains_key(&spec.categories) {
                    let comp = clinical_component(
                        &train,
                        &test,
                        &spec.categories,
                        ctx,
                        ecfg.cv_folds,
                        repeat_seed,
                    )
                    .map_err(|e| err_in_repeat(repeat, e))?;
                    clinical_cache.insert(spec.categories.clone(), comp);
                }
                clinical_cache.get(&spec.categories)
            };
            let (test_scores, oof_scores) = pipeline_scores(
                spec,
                wsi.as_ref(),
                clinical,
                &train_labels,
                ctx,
                ecfg.cv_folds,
                repeat_seed,
            )
            .map_err(|e| err_in_repeat(repeat, e))?;
            let threshold = match ecfg.threshold_rule {
                ThresholdRule::CvF1Max => f1_max_threshold(&oof_scores, &train_labels),
                ThresholdRule::Fixed(t) => t,
            };
            let auc_value =
                auc(&test_scores, &test_labels).map_err(|e| err_in_repeat(repeat, e))?;
            let mut m = classification_metrics(&test_scores, &test_labels, threshold);
            m.auc = auc_value;
            results[pi].per_repeat.push(m);
            results[pi].thresholds.push(threshold);
        }
    }

    let mut comparisons = Vec::new();
    for a in 0..results.len() {
        for b in a + 1..results.len() {
            let auc_a: Vec<f64> = results[a].per_repeat.iter().map(|m| m.auc).collect();
            let auc_b: Vec<f64> = results[b].per_repeat.iter().map(|m| m.auc).collect();
            comparisons.push(Comparison {
                pipeline_a: results[a].name.clone(),
                pipeline_b: results[b].name.clone(),
                test: paired_ttest(&auc_a, &auc_b)?,
            });
        }
    }
    Ok(EvalReport { pipelines: results, comparisons })
}
