//! Temporary calibration runs for the acceptance experiments.

use crcrisk_core::evalstat::{auc, split_indices};
use crcrisk_core::featurizer::{Extractor, ExtractorConfig};
use crcrisk_core::maskhit::{HeadOutput, Target, TargetSpec, TransformerConfig};
use crcrisk_core::rng::derive_seed;
use crcrisk_core::synth::{generate_cohort, SynthConfig};
use crcrisk_core::training::*;
use std::time::Instant;

fn desk_tcfg() -> TransformerConfig {
    TransformerConfig {
        n_layers: 2,
        n_heads: 2,
        model_dim: 32,
        mlp_dim: 64,
        feature_dim: 32,
        max_slots: 100,
        region_side: 10,
        mask_ratio: 0.5,
    }
}

#[test]
#[ignore]
fn calibrate_guided_vs_direct() {
    let t0 = Instant::now();
    let synth = SynthConfig {
        n_patients: 600,
        slide_px: (80, 80),
        patch_px: 8,
        prevalence: 0.167,
        image_signal: 3.0,
        clinical_signal: 0.0,
        noise_sd: 0.3,
        seed: 61,
    };
    let cohort = generate_cohort(&synth).unwrap();
    let extractor = Extractor::new(ExtractorConfig { seed: 61, out_dim: 32 }).unwrap();
    let prepared = prepare_cohort(&cohort, &extractor, &TilingConfig::new(8)).unwrap();
    println!("prepare: {:?}", t0.elapsed());
    let tcfg = desk_tcfg();
    let mut d_aucs = Vec::new();
    let mut g_aucs = Vec::new();
    let mut i_aucs = Vec::new();
    for repeat in 0..3u64 {
        let t1 = Instant::now();
        let seed = derive_seed(606, &[repeat]);
        let (tr, te) = split_indices(&prepared.labels(), 0.25, seed).unwrap();
        let train = prepared.subset(&tr);
        let test = prepared.subset(&te);
        let cfg = TrainConfig {
            pretrain_epochs: 1,
            finetune_epochs: 16,
            batch_size: 8,
            learning_rate: 0.05,
            seed,
            ..TrainConfig::default()
        };
        let (pre, _) = pretrain(&train, &tcfg, &cfg).unwrap();
        let (direct, _) = finetune_direct(&pre, &train, &tcfg, &cfg).unwrap();
        let guided =
            finetune_guided(&pre, &train, TargetSpec::AllColonoscopy, &tcfg, &cfg).unwrap();
        let stage1_rows: Vec<_> = guided.log.iter().filter(|r| r.stage == "intermediate").collect();
        println!(
            "  stage1 loss: first {:.4} last {:.4} ({} steps)",
            stage1_rows.first().unwrap().loss,
            stage1_rows.last().unwrap().loss,
            stage1_rows.len()
        );
        let labels = test.labels();
        let d: Vec<f64> =
            test.patients.iter().map(|p| predict_patient(&direct, p, &cfg).unwrap()).collect();
        let g: Vec<f64> =
            test.patients.iter().map(|p| predict_patient(&guided.stage2, p, &cfg).unwrap()).collect();
        d_aucs.push(auc(&d, &labels).unwrap());
        g_aucs.push(auc(&g, &labels).unwrap());
        // Stage-1 n_adenomas prediction.
        let preds: Vec<f64> = test
            .patients
            .iter()
            .map(|p| {
                let out = predict_intermediate(&guided.stage1, p, &cfg, TargetSpec::Single(Target::NAdenomas)).unwrap();
                match &out[0].1 {
                    HeadOutput::Count(c) => *c,
                    _ => panic!(),
                }
            })
            .collect();
        let mut truths: Vec<f64> =
            test.patients.iter().map(|p| p.intermediates.n_adenomas as f64).collect();
        let mut sorted = truths.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let bin: Vec<bool> = truths.iter().map(|&t| t > median).collect();
        i_aucs.push(auc(&preds, &bin).unwrap());
        truths.clear();

        // Probe: count AUC with train-style (25%-subsampled) regions.
        use crcrisk_core::featurizer::rows_for_region;
        use crcrisk_core::maskhit::{aggregate_patient, forward_region, intermediate_head, RegionBatch};
        use crcrisk_core::rng::stream;
        use crcrisk_core::tiling::{sample_regions, subsample_patches};
        let mut sub_preds = Vec::new();
        for (pi, p) in test.patients.iter().enumerate() {
            let mut rng = stream(777, &[pi as u64]);
            let mut tokens = Vec::new();
            for s in &p.slides {
                for region in sample_regions(&s.grid, 4, 10, &mut rng) {
                    let region = subsample_patches(&region, 0.25, &mut rng).unwrap();
                    let batch = RegionBatch::full(
                        rows_for_region(&s.features, &region),
                        region.positions.clone(),
                    );
                    let (cls, _) = forward_region(&guided.stage1.params, &batch).unwrap();
                    tokens.push(cls);
                }
            }
            let emb = aggregate_patient(&tokens).unwrap();
            let out = intermediate_head(&guided.stage1.params, &emb, TargetSpec::Single(Target::NAdenomas)).unwrap();
            match &out[0].1 {
                HeadOutput::Count(c) => sub_preds.push(*c),
                _ => panic!(),
            }
        }
        println!(
            "  sub-eval inter auc: {:.3}; pred range full [{:.3},{:.3}] sub [{:.3},{:.3}]",
            auc(&sub_preds, &bin).unwrap(),
            preds.iter().fold(f64::MAX, |a,&b| a.min(b)),
            preds.iter().fold(f64::MIN, |a,&b| a.max(b)),
            sub_preds.iter().fold(f64::MAX, |a,&b| a.min(b)),
            sub_preds.iter().fold(f64::MIN, |a,&b| a.max(b)),
        );
        println!(
            "repeat {repeat}: direct {:.3} guided {:.3} inter {:.3} ({:?})",
            d_aucs.last().unwrap(),
            g_aucs.last().unwrap(),
            i_aucs.last().unwrap(),
            t1.elapsed()
        );
    }
    println!("total: {:?}", t0.elapsed());
}
