//! Multi-modal fusion of the WSI risk score or embedding with clinical
//! features: decision averaging, validation-weighted decision fusion, the
//! risk score as an extra tabular column, and feature-level concatenation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::clinical::{fit_mlp, fit_tabular, Mlp, MlpConfig, TabularConfig, TabularModel};
use crate::error::{Error, Result};
use crate::evalstat::auc;
use crate::linalg::Matrix;

/// Fusion strategy selection.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionSpec {
    DecisionAverage,
    /// Fixed weight, or `None` to select it on validation pairs.
    DecisionWeighted { weight: Option<f64> },
    /// Append the WSI risk score to the clinical vector and train the given
    /// tabular classifier.
    WsiDecisionFeature { classifier: TabularConfig },
    /// Concatenate the WSI embedding with the clinical vector and train an
    /// MLP head.
    FeatureLevel { mlp: MlpConfig },
}

impl FusionSpec {
    pub fn method_name(&self) -> &'static str {
        match self {
            FusionSpec::DecisionAverage => "decision_average",
            FusionSpec::DecisionWeighted { .. } => "decision_weighted",
            FusionSpec::WsiDecisionFeature { .. } => "wsi_decision_feature",
            FusionSpec::FeatureLevel { .. } => "feature_level",
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// Plain average of the two modality probabilities.
pub fn fuse_decision_average(p_wsi: f64, p_clin: f64) -> Result<f64> {
    check_probability("p_wsi", p_wsi)?;
    check_probability("p_clin", p_clin)?;
    Ok(0.5 * (p_wsi + p_clin))
}

/// `w * p_wsi + (1 - w) * p_clin`.
pub fn fuse_decision_weighted(p_wsi: f64, p_clin: f64, w: f64) -> Result<f64> {
    check_probability("p_wsi", p_wsi)?;
    check_probability("p_clin", p_clin)?;
    check_probability("w", w)?;
    Ok(w * p_wsi + (1.0 - w) * p_clin)
}

/// Weight selected on validation pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedWeight {
    pub w: f64,
    /// Set when the validation labels were degenerate and 0.5 was used.
    pub warning: Option<String>,
}

/// Pick `w` from the grid {0.00, 0.05, ..., 1.00} maximizing validation AUC
/// of `w * p_wsi + (1 - w) * p_clin`; ties break toward the smaller `w`.
pub fn select_weight(validation_pairs: &[(f64, f64)], labels: &[bool]) -> Result<SelectedWeight> {
    if validation_pairs.is_empty() || validation_pairs.len() != labels.len() {
        return Err(Error::Shape(
            "select_weight needs matching, non-empty pairs and labels".to_string(),
        ));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Ok(SelectedWeight {
            w: 0.5,
            warning: Some("degenerate validation labels; defaulting to w = 0.5".to_string()),
        });
    }
    let mut best_w = 0.0;
    let mut best_auc = f64::NEG_INFINITY;
    for i in 0..=20 {
        let w = i as f64 / 20.0;
        let scores: Vec<f64> = validation_pairs
            .iter()
            .map(|&(p_wsi, p_clin)| w * p_wsi + (1.0 - w) * p_clin)
            .collect();
        let a = auc(&scores, labels)?;
        if a > best_auc {
            best_auc = a;
            best_w = w;
        }
    }
    Ok(SelectedWeight { w: best_w, warning: None })
}

/// Tabular model over `[clinical | p_wsi]` rows.
#[derive(Debug, Clone)]
pub struct DecisionFeatureModel {
    pub model: TabularModel,
    pub clinical_width: usize,
}

/// Design-matrix layout for the decision-feature fusion: the clinical block
/// with the WSI probability appended as the last column.
pub fn decision_feature_row(clinical: &[f64], p_wsi: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(clinical.len() + 1);
    row.extend_from_slice(clinical);
    row.push(p_wsi);
    row
}

/// Train the configured classifier on clinical vectors with the (out-of-fold)
/// WSI probability appended.
pub fn fit_wsi_decision_feature(
    p_wsi: &[f64],
    clinical: &Matrix,
    labels: &[bool],
    classifier: &TabularConfig,
) -> Result<DecisionFeatureModel> {
    let n = clinical.rows();
    if p_wsi.len() != n || labels.len() != n {
        return Err(Error::Shape("fit_wsi_decision_feature: row count mismatch".to_string()));
    }
    let mut x = Matrix::zeros(n, clinical.cols() + 1);
    for i in 0..n {
        let row = decision_feature_row(clinical.row(i), p_wsi[i]);
        x.row_mut(i).copy_from_slice(&row);
    }
    let model = fit_tabular(&x, labels, classifier)?;
    Ok(DecisionFeatureModel { model, clinical_width: clinical.cols() })
}

impl DecisionFeatureModel {
    pub fn predict(&self, clinical: &[f64], p_wsi: f64) -> Result<f64> {
        if clinical.len() != self.clinical_width {
            return Err(Error::Shape(format!(
                "clinical width {} != fitted width {}",
                clinical.len(),
                self.clinical_width
            )));
        }
        Ok(self.model.predict_proba(&decision_feature_row(clinical, p_wsi)))
    }
}

/// MLP over `[wsi embedding | clinical]` rows.
#[derive(Debug, Clone)]
pub struct FeatureLevelModel {
    pub mlp: Mlp,
    pub embed_dim: usize,
}

pub fn feature_level_row(embedding: &[f64], clinical: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(embedding.len() + clinical.len());
    row.extend_from_slice(embedding);
    row.extend_from_slice(clinical);
    row
}

/// Train the fusion MLP on concatenated embeddings and clinical vectors.
pub fn fit_feature_level(
    embeddings: &Matrix,
    clinical: &Matrix,
    labels: &[bool],
    cfg: &MlpConfig,
) -> Result<FeatureLevelModel> {
    let n = embeddings.rows();
    if clinical.rows() != n || labels.len() != n {
        return Err(Error::Shape("fit_feature_level: row count mismatch".to_string()));
    }
    let mut x = Matrix::zeros(n, embeddings.cols() + clinical.cols());
    for i in 0..n {
        let row = feature_level_row(embeddings.row(i), clinical.row(i));
        x.row_mut(i).copy_from_slice(&row);
    }
    let mlp = fit_mlp(&x, labels, cfg)?;
    Ok(FeatureLevelModel { mlp, embed_dim: embeddings.cols() })
}

impl FeatureLevelModel {
    pub fn predict(&self, embedding: &[f64], clinical: &[f64]) -> Result<f64> {
        if embedding.len() != self.embed_dim {
            return Err(Error::Shape(format!(
                "embedding width {} != fitted width {}",
                embedding.len(),
                self.embed_dim
            )));
        }
        Ok(self.mlp.predict_proba(&feature_level_row(embedding, clinical)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn average_arithmetic() {
        assert_eq!(fuse_decision_average(0.6, 0.4).unwrap(), 0.5);
        assert_eq!(fuse_decision_average(0.3, 0.3).unwrap(), 0.3);
        assert!(fuse_decision_average(1.2, 0.3).is_err());
    }

    #[test]
    fn average_equals_weighted_half() {
        let mut rng = crate::rng::stream(1, &[1]);
        for _ in 0..100 {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            assert_eq!(
                fuse_decision_average(a, b).unwrap(),
                fuse_decision_weighted(a, b, 0.5).unwrap()
            );
        }
    }

    #[test]
    fn weighted_arithmetic_and_extremes() {
        assert!((fuse_decision_weighted(0.6, 0.4, 0.7).unwrap() - 0.54).abs() < 1e-12);
        let mut rng = crate::rng::stream(2, &[1]);
        for _ in 0..50 {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            assert_eq!(fuse_decision_weighted(a, b, 1.0).unwrap(), a);
            assert_eq!(fuse_decision_weighted(a, b, 0.0).unwrap(), b);
        }
    }

    #[test]
    fn decision_fusions_are_monotone() {
        let mut rng = crate::rng::stream(3, &[1]);
        for _ in 0..200 {
            let a: f64 = rng.gen_range(0.0..0.9);
            let b: f64 = rng.gen_range(0.0..1.0);
            let w: f64 = rng.gen_range(0.0..1.0);
            let bump = rng.gen_range(0.0..(1.0 - a));
            assert!(
                fuse_decision_weighted(a + bump, b, w).unwrap()
                    >= fuse_decision_weighted(a, b, w).unwrap()
            );
            assert!(
                fuse_decision_average(a + bump, b).unwrap()
                    >= fuse_decision_average(a, b).unwrap()
            );
        }
    }

    #[test]
    fn weight_selection_prefers_the_informative_channel() {
        // WSI channel carries the labels; clinical channel is noise.
        let mut rng = crate::rng::stream(4, &[1]);
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let label = i % 4 == 0;
            let p_wsi = if label { rng.gen_range(0.6..0.95) } else { rng.gen_range(0.05..0.4) };
            let p_clin: f64 = rng.gen_range(0.0..1.0);
            pairs.push((p_wsi, p_clin));
            labels.push(label);
        }
        let sel = select_weight(&pairs, &labels).unwrap();
        assert!(sel.w >= 0.8, "selected w = {}", sel.w);
        assert!(sel.warning.is_none());
    }

    #[test]
    fn weight_selection_ties_break_small_and_degenerate_warns() {
        // Identical channels: every w gives the same AUC, so w = 0.
        let pairs = [(0.9, 0.9), (0.2, 0.2), (0.7, 0.7), (0.1, 0.1)];
        let labels = [true, false, true, false];
        let sel = select_weight(&pairs, &labels).unwrap();
        assert_eq!(sel.w, 0.0);

        let sel = select_weight(&pairs, &[true; 4]).unwrap();
        assert_eq!(sel.w, 0.5);
        assert!(sel.warning.is_some());
    }

    #[test]
    fn decision_feature_width_is_clinical_plus_one() {
        let clinical = Matrix::from_fn(30, 4, |r, c| ((r + c) % 5) as f64);
        let p_wsi: Vec<f64> = (0..30).map(|i| (i % 10) as f64 / 10.0).collect();
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let cfg = TabularConfig::Logistic { lambda_grid: alloc::vec![0.01] };
        let model = fit_wsi_decision_feature(&p_wsi, &clinical, &labels, &cfg).unwrap();
        assert_eq!(model.clinical_width, 4);
        match &model.model {
            TabularModel::Logistic(l) => assert_eq!(l.weights.len(), 5),
            _ => panic!(),
        }
        assert!(model.predict(&[0.0; 4], 0.5).unwrap() > 0.0);
        assert!(model.predict(&[0.0; 3], 0.5).is_err());
    }

    #[test]
    fn feature_level_width_is_embed_plus_clinical() {
        let emb = Matrix::from_fn(24, 6, |r, c| ((r * c) % 7) as f64 * 0.1);
        let clinical = Matrix::from_fn(24, 3, |r, c| ((r + c) % 3) as f64);
        let labels: Vec<bool> = (0..24).map(|i| i % 2 == 0).collect();
        let cfg = MlpConfig { hidden: 4, epochs: 5, ..MlpConfig::default() };
        let model = fit_feature_level(&emb, &clinical, &labels, &cfg).unwrap();
        assert_eq!(model.mlp.in_dim(), 9);
        let p = model.predict(&[0.1; 6], &[0.0; 3]).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert!(model.predict(&[0.1; 5], &[0.0; 3]).is_err());
    }
}
