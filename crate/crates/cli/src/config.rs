//! Run configuration: one flat TOML file with a section per module, every
//! key defaulted, CLI flags overriding. The effective config is echoed into
//! each run directory.

use std::path::Path;

use crcrisk_core::clinical::TabularConfig;
use crcrisk_core::evalstat::{ExperimentConfig, PipelineContext, PipelineSpec, ThresholdRule, WsiMode};
use crcrisk_core::featurizer::ExtractorConfig;
use crcrisk_core::fusion::FusionSpec;
use crcrisk_core::maskhit::{TargetSpec, TransformerConfig};
use crcrisk_core::rng::{derive_seed, tags};
use crcrisk_core::synth::SynthConfig;
use crcrisk_core::training::{TilingConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{read_artifact_string, CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_patients: usize,
    pub slide_width: u32,
    pub slide_height: u32,
    pub patch_px: u32,
    pub prevalence: f64,
    pub image_signal: f64,
    pub clinical_signal: f64,
    pub noise_sd: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_patients: 200,
            slide_width: 80,
            slide_height: 80,
            patch_px: 8,
            prevalence: 0.167,
            image_signal: 1.5,
            clinical_signal: 1.5,
            noise_sd: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TilingSection {
    pub brightness_threshold: f64,
    pub min_tissue_fraction: f64,
}

impl Default for TilingSection {
    fn default() -> Self {
        TilingSection { brightness_threshold: 0.8, min_tissue_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSection {
    pub out_dim: usize,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        ExtractorSection { out_dim: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub region_side: usize,
    pub max_slots: usize,
    pub mask_ratio: f64,
}

impl Default for TransformerSection {
    fn default() -> Self {
        TransformerSection {
            n_layers: 2,
            n_heads: 2,
            model_dim: 32,
            mlp_dim: 64,
            region_side: 10,
            max_slots: 100,
            mask_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub regions_per_patient: usize,
    pub patch_fraction: f64,
    pub max_regions_eval: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub freeze_transformer: bool,
    /// Stage-1 targets for guided fine-tuning.
    pub target: String,
    /// direct | guided-freeze | guided-full
    pub mode: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pretrain_epochs: 2,
            finetune_epochs: 15,
            regions_per_patient: 4,
            patch_fraction: 0.25,
            max_regions_eval: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            freeze_transformer: false,
            target: "all_colonoscopy".into(),
            mode: "direct".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub test_fraction: f64,
    pub n_repeats: usize,
    pub cv_folds: usize,
    pub pipelines: Vec<String>,
    /// "cv-f1-max" or a fixed numeric threshold as a string.
    pub threshold: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            test_fraction: 0.25,
            n_repeats: 10,
            cv_folds: 5,
            pipelines: vec!["wsi".into(), "clinical".into(), "wsi+clinical".into()],
            threshold: "cv-f1-max".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    /// decision_average | decision_weighted | wsi_decision_feature |
    /// feature_level
    pub method: String,
    /// Fixed weight for decision_weighted; absent selects it on validation.
    pub weight: Option<f64>,
    /// Tabular model family: logistic | forest | mlp.
    pub tabular: String,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection { method: "decision_average".into(), weight: None, tabular: "logistic".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    /// Slides rendered by attention explains.
    pub slides: usize,
    /// Test instances averaged by the Shapley explain.
    pub instances: usize,
    /// Repeated fits aggregated in the Shapley report.
    pub repeats: usize,
    /// Monte-Carlo permutations when above the exact group limit.
    pub mc_samples: usize,
    /// Also write permutation-importance statistics.
    pub permutation_importance: bool,
    /// Clinical variable groups fed to the fusion model under explanation.
    pub categories: Vec<String>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            slides: 2,
            instances: 25,
            repeats: 3,
            mc_samples: 200,
            permutation_importance: false,
            categories: vec!["colonoscopy".into(), "clinical".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub tiling: TilingSection,
    pub extractor: ExtractorSection,
    pub transformer: TransformerSection,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
    pub fusion: FusionSection,
    pub explain: ExplainSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = read_artifact_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_patients: self.synth.n_patients,
            slide_px: (self.synth.slide_width, self.synth.slide_height),
            patch_px: self.synth.patch_px,
            prevalence: self.synth.prevalence,
            image_signal: self.synth.image_signal,
            clinical_signal: self.synth.clinical_signal,
            noise_sd: self.synth.noise_sd,
            seed: derive_seed(self.seed, &[tags::SYNTH]),
        }
    }

    pub fn tiling_config(&self) -> TilingConfig {
        TilingConfig {
            patch_px: self.synth.patch_px,
            brightness_threshold: self.tiling.brightness_threshold,
            min_tissue_fraction: self.tiling.min_tissue_fraction,
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            seed: derive_seed(self.seed, &[tags::EXTRACTOR]),
            out_dim: self.extractor.out_dim,
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            n_layers: self.transformer.n_layers,
            n_heads: self.transformer.n_heads,
            model_dim: self.transformer.model_dim,
            mlp_dim: self.transformer.mlp_dim,
            feature_dim: self.extractor.out_dim,
            max_slots: self.transformer.max_slots,
            region_side: self.transformer.region_side,
            mask_ratio: self.transformer.mask_ratio,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            pretrain_epochs: self.train.pretrain_epochs,
            finetune_epochs: self.train.finetune_epochs,
            regions_per_patient_train: self.train.regions_per_patient,
            patch_fraction_train: self.train.patch_fraction,
            max_regions_eval: self.train.max_regions_eval,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            seed: self.seed,
            freeze_transformer: self.train.freeze_transformer,
        }
    }

    pub fn target_spec(&self) -> Result<TargetSpec> {
        TargetSpec::parse(&self.train.target).map_err(CliError::Core)
    }

    pub fn wsi_mode(&self) -> Result<WsiMode> {
        match self.train.mode.as_str() {
            "direct" => Ok(WsiMode::Direct),
            "guided-freeze" => Ok(WsiMode::Guided { spec: self.target_spec()?, freeze: true }),
            "guided-full" => Ok(WsiMode::Guided { spec: self.target_spec()?, freeze: false }),
            other => Err(CliError::Config(format!(
                "unknown train mode `{other}`; valid: direct, guided-freeze, guided-full"
            ))),
        }
    }

    pub fn tabular_config(&self) -> Result<TabularConfig> {
        TabularConfig::parse(&self.fusion.tabular, self.seed).map_err(CliError::Core)
    }

    pub fn fusion_spec(&self) -> Result<FusionSpec> {
        match self.fusion.method.as_str() {
            "decision_average" => Ok(FusionSpec::DecisionAverage),
            "decision_weighted" => {
                if let Some(w) = self.fusion.weight {
                    if !(0.0..=1.0).contains(&w) {
                        return Err(CliError::Config(format!("fusion weight {w} not in [0, 1]")));
                    }
                }
                Ok(FusionSpec::DecisionWeighted { weight: self.fusion.weight })
            }
            "wsi_decision_feature" => {
                Ok(FusionSpec::WsiDecisionFeature { classifier: self.tabular_config()? })
            }
            "feature_level" => Ok(FusionSpec::FeatureLevel {
                mlp: crcrisk_core::clinical::MlpConfig {
                    seed: derive_seed(self.seed, &[tags::MLP]),
                    ..Default::default()
                },
            }),
            other => Err(CliError::Config(format!(
                "unknown fusion method `{other}`; valid: decision_average, decision_weighted, \
                 wsi_decision_feature, feature_level"
            ))),
        }
    }

    pub fn threshold_rule(&self) -> Result<ThresholdRule> {
        if self.experiment.threshold == "cv-f1-max" {
            return Ok(ThresholdRule::CvF1Max);
        }
        self.experiment
            .threshold
            .parse::<f64>()
            .ok()
            .filter(|t| (0.0..=1.0).contains(t))
            .map(ThresholdRule::Fixed)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "threshold `{}` must be `cv-f1-max` or a number in [0, 1]",
                    self.experiment.threshold
                ))
            })
    }

    pub fn experiment_config(&self, pipeline_override: &[String]) -> Result<ExperimentConfig> {
        let names: &[String] = if pipeline_override.is_empty() {
            &self.experiment.pipelines
        } else {
            pipeline_override
        };
        let pipelines = names
            .iter()
            .map(|n| PipelineSpec::parse(n).map_err(CliError::Core))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentConfig {
            test_fraction: self.experiment.test_fraction,
            n_repeats: self.experiment.n_repeats,
            cv_folds: self.experiment.cv_folds,
            seed: self.seed,
            pipelines,
            threshold_rule: self.threshold_rule()?,
        })
    }

    pub fn pipeline_context(&self) -> Result<PipelineContext> {
        Ok(PipelineContext {
            transformer: self.transformer_config(),
            train: self.train_config(),
            tiling: self.tiling_config(),
            tabular: self.tabular_config()?,
            fusion: self.fusion_spec()?,
            wsi_mode: self.wsi_mode()?,
        })
    }
}
