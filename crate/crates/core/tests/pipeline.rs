//! Cross-module integration: train on planted signal, interpret, and run the
//! evaluation harness end to end at miniature scale.

use crcrisk_core::clinical::TabularConfig;
use crcrisk_core::evalstat::{
    auc, run_experiment_prepared, ExperimentConfig, PipelineContext, PipelineSpec, ThresholdRule,
    WsiMode,
};
use crcrisk_core::featurizer::{Extractor, ExtractorConfig};
use crcrisk_core::fusion::FusionSpec;
use crcrisk_core::interpret::{attention_difference, attention_map, raw_attention};
use crcrisk_core::maskhit::TransformerConfig;
use crcrisk_core::synth::{generate_cohort, SynthConfig};
use crcrisk_core::tiling::cover_regions;
use crcrisk_core::training::{
    finetune_direct, predict_patient, prepare_cohort, pretrain, PreparedCohort, TilingConfig,
    TrainConfig,
};

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

fn prepared_cohort(n: usize, image_signal: f64, clinical_signal: f64, seed: u64) -> PreparedCohort {
    let cfg = SynthConfig {
        n_patients: n,
        slide_px: (80, 80),
        patch_px: 8,
        image_signal,
        clinical_signal,
        noise_sd: 0.3,
        seed,
        ..SynthConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let extractor = Extractor::new(ExtractorConfig { seed: 11, out_dim: 8 }).unwrap();
    prepare_cohort(&cohort, &extractor, &TilingConfig::new(8)).unwrap()
}

fn tiny_ctx() -> PipelineContext {
    PipelineContext {
        transformer: tiny_tcfg(),
        train: TrainConfig {
            pretrain_epochs: 1,
            finetune_epochs: 3,
            batch_size: 8,
            learning_rate: 0.05,
            ..TrainConfig::default()
        },
        tiling: TilingConfig::new(8),
        tabular: TabularConfig::Logistic { lambda_grid: vec![0.01] },
        fusion: FusionSpec::DecisionAverage,
        wsi_mode: WsiMode::Direct,
    }
}

#[test]
fn direct_training_learns_planted_image_signal() {
    let prepared = prepared_cohort(120, 3.0, 0.0, 31);
    let tcfg = tiny_tcfg();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        finetune_epochs: 18,
        batch_size: 8,
        learning_rate: 0.05,
        seed: 3,
        ..TrainConfig::default()
    };
    let train = prepared.subset(&(0..90).collect::<Vec<_>>());
    let test = prepared.subset(&(90..120).collect::<Vec<_>>());
    let (pre, _) = pretrain(&train, &tcfg, &cfg).unwrap();
    let (model, _) = finetune_direct(&pre, &train, &tcfg, &cfg).unwrap();
    let scores: Vec<f64> = test
        .patients
        .iter()
        .map(|p| predict_patient(&model, p, &cfg).unwrap())
        .collect();
    let labels = test.labels();
    let a = auc(&scores, &labels).unwrap();
    assert!(a > 0.75, "held-out AUC {a} too low for a strong planted signal");
}

#[test]
fn attention_maps_behave_on_real_checkpoints() {
    let prepared = prepared_cohort(20, 2.0, 0.0, 32);
    let tcfg = tiny_tcfg();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        finetune_epochs: 2,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let (pre, _) = pretrain(&prepared, &tcfg, &cfg).unwrap();
    let (tuned, _) = finetune_direct(&pre, &prepared, &tcfg, &cfg).unwrap();
    let slide = &prepared.patients[0].slides[0];

    // Raw class-token attention sums to 1 per cover region.
    let raw = raw_attention(&tuned, slide).unwrap();
    for region in cover_regions(&slide.grid, tcfg.region_side as u32) {
        let sum: f64 = region.slots.iter().map(|&s| raw.values[s as usize]).sum();
        assert!((sum - 1.0).abs() < 1e-9, "region sum {sum}");
    }

    // Normalized map peaks at 1.
    let map = attention_map(&tuned, slide).unwrap();
    let max = map.values.iter().fold(0.0_f64, |m, &v| m.max(v));
    assert!((max - 1.0).abs() < 1e-12);
    assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));

    // Identical checkpoints difference is exactly zero; per-region raw
    // difference sums to zero.
    let zero = attention_difference(&tuned, &tuned, slide).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
    let diff = attention_difference(&pre, &tuned, slide).unwrap();
    for region in cover_regions(&slide.grid, tcfg.region_side as u32) {
        let sum: f64 = region.slots.iter().map(|&s| diff.values[s as usize]).sum();
        assert!(sum.abs() < 1e-6, "raw difference region sum {sum}");
    }
}

#[test]
fn experiment_harness_runs_fused_pipelines_and_pairs_splits() {
    let prepared = prepared_cohort(48, 1.5, 1.5, 33);
    let ctx = tiny_ctx();
    let ecfg = ExperimentConfig {
        test_fraction: 0.25,
        n_repeats: 2,
        cv_folds: 2,
        seed: 9,
        pipelines: vec![
            PipelineSpec::parse("clinical").unwrap(),
            PipelineSpec::parse("clinical").unwrap(),
            PipelineSpec::parse("wsi+clinical").unwrap(),
        ],
        threshold_rule: ThresholdRule::CvF1Max,
    };
    let report = run_experiment_prepared(&prepared, &ecfg, &ctx).unwrap();
    assert_eq!(report.pipelines.len(), 3);
    for p in &report.pipelines {
        assert_eq!(p.per_repeat.len(), 2);
        for m in &p.per_repeat {
            assert!(m.auc >= 0.0 && m.auc <= 1.0);
            assert!(m.accuracy >= 0.0 && m.accuracy <= 1.0);
        }
    }
    // Identical pipelines on identical splits: p = 1.
    let twin = report
        .comparisons
        .iter()
        .find(|c| c.pipeline_a == "clinical" && c.pipeline_b == "clinical")
        .unwrap();
    assert_eq!(twin.test.p, 1.0);
    assert_eq!(twin.test.t, 0.0);
}

#[test]
fn signal_free_cohort_scores_near_chance() {
    let prepared = prepared_cohort(80, 0.0, 0.0, 34);
    let ctx = tiny_ctx();
    let ecfg = ExperimentConfig {
        test_fraction: 0.25,
        n_repeats: 6,
        cv_folds: 2,
        seed: 10,
        pipelines: vec![PipelineSpec::parse("clinical").unwrap()],
        threshold_rule: ThresholdRule::CvF1Max,
    };
    let report = run_experiment_prepared(&prepared, &ecfg, &ctx).unwrap();
    let (mean, _) = report.pipelines[0].mean_std(|m| m.auc);
    assert!((0.35..=0.65).contains(&mean), "null-cohort mean AUC {mean}");
}
