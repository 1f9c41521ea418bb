//! Synthetic cohort generation with planted, known signal.
//!
//! Each patient gets two independent latent factors: `s_img` drives the
//! slide (blob count and size, echoed into the colonoscopy/microscopy
//! variables) and `s_clin` drives the remaining clinical variables. The
//! 5-year risk label thresholds `image_signal * s_img + clinical_signal *
//! s_clin + noise` at the empirical prevalence quantile, so every downstream
//! claim can be checked against a generative model whose ground truth is
//! known exactly. Latent draws never depend on the signal strengths, so
//! sweeping a signal with a fixed seed keeps everything else identical.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::clinical::schema::{paper_schema, CellValue, ClinicalRecord};
use crate::cohort::{Blob, Cohort, IntermediateTargets, PatientRecord, Slide};
use crate::error::{Error, Result};
use crate::fx;
use crate::raster::Raster;
use crate::rng::{stream, tags};

/// Pale scanner background, above the default brightness threshold.
const BACKGROUND: [u8; 3] = [242, 240, 244];
/// Light-stain tissue, just below the default brightness threshold.
const TISSUE: [u8; 3] = [214, 168, 192];
/// Dark-stain blob colors for adenoma-like and serrated-like lesions.
const ADENOMA_STAIN: [u8; 3] = [96, 48, 112];
const SERRATED_STAIN: [u8; 3] = [128, 72, 136];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub slide_px: (u32, u32),
    pub patch_px: u32,
    pub prevalence: f64,
    pub image_signal: f64,
    pub clinical_signal: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 200,
            slide_px: (160, 160),
            patch_px: 8,
            prevalence: 0.167,
            image_signal: 1.0,
            clinical_signal: 1.0,
            noise_sd: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!("prevalence {} not in (0, 1)", self.prevalence)));
        }
        if self.patch_px == 0 || self.slide_px.0 < self.patch_px || self.slide_px.1 < self.patch_px
        {
            return Err(Error::Config(format!(
                "slide {}x{} smaller than one {}px patch",
                self.slide_px.0, self.slide_px.1, self.patch_px
            )));
        }
        if self.image_signal < 0.0 || self.clinical_signal < 0.0 || self.noise_sd < 0.0 {
            return Err(Error::Config("signal strengths and noise_sd must be >= 0".into()));
        }
        Ok(())
    }
}

struct Latents {
    s_img: f64,
    s_clin: f64,
    noise: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Ordinal level from a latent score: thresholds are evenly spaced standard
/// scores, so higher scores map to higher levels.
fn ordinal(score: f64, levels: usize) -> usize {
    let mut level = 0;
    for k in 1..levels {
        // Thresholds at -0.8, 0.0, 0.8, ... shifted to cover the range.
        let t = (k as f64 - levels as f64 / 2.0) * 0.8;
        if score > t {
            level = k;
        }
    }
    level
}

fn size_class(size_mm: f64) -> usize {
    if size_mm < 5.0 {
        1
    } else if size_mm < 10.0 {
        2
    } else if size_mm <= 20.0 {
        3
    } else {
        4
    }
}

struct PlantedFindings {
    intermediates: IntermediateTargets,
    adenoma_sizes_mm: Vec<f64>,
    serrated_sizes_mm: Vec<f64>,
}

/// Colonoscopy/microscopy truth from the image latent. All draws happen
/// unconditionally so the stream stays aligned across config sweeps.
fn plant_findings(s_img: f64, rng: &mut ChaCha8Rng) -> PlantedFindings {
    let eta_na = normal(rng);
    let eta_ns = normal(rng);
    let eta_adv_a = normal(rng);
    let eta_adv_s = normal(rng);
    let n_adenomas = (fx::round(1.3 + 1.2 * s_img + 0.4 * eta_na)).clamp(0.0, 8.0) as u32;
    let n_serrated = (fx::round(0.5 + 0.8 * s_img + 0.4 * eta_ns)).clamp(0.0, 6.0) as u32;

    let mut adenoma_sizes_mm = Vec::new();
    for _ in 0..8 {
        // Log-normal around ~4 mm, growing with the latent.
        let s = fx::exp(1.45 + 0.5 * s_img + 0.3 * normal(rng));
        adenoma_sizes_mm.push(s);
    }
    adenoma_sizes_mm.truncate(n_adenomas as usize);
    let mut serrated_sizes_mm = Vec::new();
    for _ in 0..6 {
        let s = fx::exp(1.1 + 0.45 * s_img + 0.3 * normal(rng));
        serrated_sizes_mm.push(s);
    }
    serrated_sizes_mm.truncate(n_serrated as usize);

    let largest_adenoma_size = adenoma_sizes_mm
        .iter()
        .fold(0.0_f64, |m, &s| m.max(s));
    let largest_serrated_size = serrated_sizes_mm.iter().fold(0.0_f64, |m, &s| m.max(s));
    let intermediates = IntermediateTargets {
        largest_adenoma_size: if n_adenomas == 0 { 0 } else { size_class(largest_adenoma_size) }
            as u8,
        n_adenomas,
        largest_serrated_size: if n_serrated == 0 { 0 } else { size_class(largest_serrated_size) }
            as u8,
        n_serrated,
        most_advanced_serrated: if n_serrated == 0 {
            0
        } else {
            (1 + ordinal(0.7 * s_img + 0.5 * eta_adv_s, 4)) as u8
        },
        most_advanced_adenoma: if n_adenomas == 0 {
            0
        } else {
            (1 + ordinal(0.7 * s_img + 0.5 * eta_adv_a, 3)) as u8
        },
    };
    PlantedFindings { intermediates, adenoma_sizes_mm, serrated_sizes_mm }
}

/// Paint one slide: a pale background, a light-stain tissue ellipse, and one
/// dark blob per planted lesion, sized in proportion to its mm size.
fn paint_slide(
    cfg: &SynthConfig,
    findings: &PlantedFindings,
    rng: &mut ChaCha8Rng,
) -> (Raster, Vec<Blob>) {
    let (w, h) = cfg.slide_px;
    let mut image = Raster::new(w, h, BACKGROUND);
    let (wf, hf) = (w as f64, h as f64);
    let (tx, ty) = (wf / 2.0, hf / 2.0);
    let (trx, try_) = (0.44 * wf, 0.44 * hf);
    image.fill_ellipse(tx, ty, trx, try_, TISSUE);

    let mm_to_px = cfg.patch_px as f64 / 8.0;
    let max_r = 0.2 * wf.min(hf);
    let mut blobs = Vec::new();
    let kinds = [
        (&findings.adenoma_sizes_mm, ADENOMA_STAIN),
        (&findings.serrated_sizes_mm, SERRATED_STAIN),
    ];
    for (sizes, color) in kinds {
        for &size_mm in sizes.iter() {
            // Uniform position within the inner tissue ellipse.
            let ang = rng.gen_range(0.0..core::f64::consts::TAU);
            let rad = fx::sqrt(rng.gen_range(0.0..1.0_f64)) * 0.8;
            let cx = tx + rad * trx * fx::cos(ang);
            let cy = ty + rad * try_ * libm::sin(ang);
            let rx = (size_mm * mm_to_px).clamp(1.5, max_r);
            let ry = rx * rng.gen_range(0.6..1.0);
            image.fill_ellipse(cx, cy, rx, ry, color);
            blobs.push(Blob { cx, cy, rx, ry });
        }
    }
    (image, blobs)
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> usize {
    usize::from(rng.gen_range(0.0..1.0) < p)
}

/// Clinical record: colonoscopy/microscopy columns echo the planted
/// intermediates; the other groups load on `s_clin` (some are pure noise);
/// a few personal variables go missing at a small fixed rate.
fn clinical_record(
    s_clin: f64,
    inter: &IntermediateTargets,
    rng: &mut ChaCha8Rng,
) -> ClinicalRecord {
    let mut cells = Vec::with_capacity(26);
    let miss = |rng: &mut ChaCha8Rng, cell: CellValue| -> CellValue {
        if rng.gen_range(0.0..1.0) < 0.04 {
            CellValue::Missing
        } else {
            cell
        }
    };
    // Personal.
    let age = 59.0 + 4.5 * s_clin + 7.0 * normal(rng);
    cells.push(CellValue::Num(age));
    cells.push(CellValue::Level(bernoulli(rng, fx::sigmoid(0.4 * s_clin))));
    let bmi = 27.5 + 1.5 * s_clin + 3.5 * normal(rng);
    let bmi_cell = miss(rng, CellValue::Num(bmi));
    cells.push(bmi_cell);
    let exercise = ordinal(-0.7 * s_clin + 0.8 * normal(rng), 4);
    let exercise_cell = miss(rng, CellValue::Level(exercise));
    cells.push(exercise_cell);
    cells.push(CellValue::Level(ordinal(0.5 * s_clin + 0.9 * normal(rng), 3)));
    let years_smoking = (10.0 + 3.0 * s_clin + 8.0 * normal(rng)).max(0.0);
    let ys_cell = miss(rng, CellValue::Num(years_smoking));
    cells.push(ys_cell);
    cells.push(CellValue::Level(ordinal(0.4 * s_clin + 0.9 * normal(rng), 5)));
    cells.push(CellValue::Level(bernoulli(rng, 0.35)));
    cells.push(CellValue::Level(bernoulli(rng, 0.6)));
    // Medical.
    cells.push(CellValue::Level(bernoulli(rng, 0.05)));
    cells.push(CellValue::Level(bernoulli(rng, 0.02)));
    cells.push(CellValue::Level(bernoulli(rng, 0.04)));
    cells.push(CellValue::Level(bernoulli(rng, fx::sigmoid(-0.3 + 0.5 * s_clin))));
    // Family.
    cells.push(CellValue::Level(ordinal(0.3 * s_clin + 0.9 * normal(rng), 3)));
    cells.push(CellValue::Level(bernoulli(rng, fx::sigmoid(-1.0 + 0.4 * s_clin))));
    cells.push(CellValue::Level(bernoulli(rng, 0.06)));
    cells.push(CellValue::Level(bernoulli(rng, 0.02)));
    // Endoscopy.
    cells.push(CellValue::Level(ordinal(0.2 * s_clin + 0.9 * normal(rng), 3)));
    cells.push(CellValue::Level(bernoulli(rng, fx::sigmoid(-1.5 - 0.4 * s_clin))));
    cells.push(CellValue::Level(ordinal(0.3 * s_clin + 0.9 * normal(rng), 5)));
    // Colonoscopy: exact echo of the planted findings.
    cells.push(CellValue::Num(inter.n_adenomas as f64));
    cells.push(CellValue::Level(inter.largest_adenoma_size as usize));
    cells.push(CellValue::Num(inter.n_serrated as f64));
    cells.push(CellValue::Level(inter.largest_serrated_size as usize));
    // Microscopy.
    cells.push(CellValue::Level(inter.most_advanced_adenoma as usize));
    cells.push(CellValue::Level(inter.most_advanced_serrated as usize));
    ClinicalRecord { cells }
}

/// Generate a cohort; byte-identical for identical configs.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let schema = paper_schema();
    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut z_scores = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let mut rng = stream(cfg.seed, &[tags::SYNTH, i as u64]);
        let latents = Latents { s_img: normal(&mut rng), s_clin: normal(&mut rng), noise: normal(&mut rng) };
        let findings = plant_findings(latents.s_img, &mut rng);
        let (image, blobs) = paint_slide(cfg, &findings, &mut rng);
        let clinical = clinical_record(latents.s_clin, &findings.intermediates, &mut rng);
        z_scores.push(
            cfg.image_signal * latents.s_img
                + cfg.clinical_signal * latents.s_clin
                + cfg.noise_sd * latents.noise,
        );
        patients.push(PatientRecord {
            id: format!("p{i:05}"),
            slides: alloc::vec![Slide { id: format!("p{i:05}-s0"), image, blobs }],
            clinical,
            intermediates: findings.intermediates,
            label: false,
        });
    }
    // Label the top round(prevalence * n) latent scores; ties break by index.
    let k = fx::round(cfg.prevalence * cfg.n_patients as f64) as usize;
    let k = k.clamp(1, cfg.n_patients - 1);
    let mut order: Vec<usize> = (0..cfg.n_patients).collect();
    order.sort_by(|&a, &b| z_scores[b].total_cmp(&z_scores[a]).then(a.cmp(&b)));
    for &i in order.iter().take(k) {
        patients[i].label = true;
    }
    Ok(Cohort { schema, patients })
}

/// Total planted blob area of a patient's slides, in px².
pub fn planted_blob_area(p: &PatientRecord) -> f64 {
    p.slides
        .iter()
        .flat_map(|s| s.blobs.iter())
        .map(|b| core::f64::consts::PI * b.rx * b.ry)
        .sum()
}

/// Patch coordinates (per slide) whose center lies inside a planted blob.
pub fn blob_patch_coords(slide: &Slide, patch_px: u32) -> Vec<(u32, u32)> {
    let rows = slide.image.height() / patch_px;
    let cols = slide.image.width() / patch_px;
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let cx = (c * patch_px) as f64 + patch_px as f64 / 2.0;
            let cy = (r * patch_px) as f64 + patch_px as f64 / 2.0;
            let x0 = (c * patch_px) as f64;
            let y0 = (r * patch_px) as f64;
            let inside = slide.blobs.iter().any(|b| {
                let dx = (cx - b.cx) / b.rx;
                let dy = (cy - b.cy) / b.ry;
                // Patch center inside the ellipse, or blob center inside the
                // patch: small blobs always claim at least one patch.
                dx * dx + dy * dy <= 1.0
                    || (b.cx >= x0
                        && b.cx < x0 + patch_px as f64
                        && b.cy >= y0
                        && b.cy < y0 + patch_px as f64)
            });
            if inside {
                out.push((r, c));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: n,
            slide_px: (16, 16),
            patch_px: 8,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn prevalence_hits_the_paper_count() {
        let cfg = tiny(2393, 7);
        let cohort = generate_cohort(&cfg).unwrap();
        let pos = cohort.positives();
        assert!((pos as i64 - 399).unsigned_abs() <= 1, "got {pos} positives");
    }

    #[test]
    fn label_count_is_stable_across_seeds() {
        for seed in 0..8 {
            let cfg = tiny(300, seed);
            let cohort = generate_cohort(&cfg).unwrap();
            let expected = fx::round(0.167 * 300.0) as usize;
            let pos = cohort.positives();
            assert!((pos as i64 - expected as i64).unsigned_abs() <= 1);
        }
    }

    #[test]
    fn identical_configs_generate_identical_cohorts() {
        let cfg = tiny(40, 3);
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(10, 1);
        cfg.prevalence = 0.0;
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = tiny(10, 1);
        cfg.slide_px = (4, 16);
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = tiny(10, 1);
        cfg.image_signal = -1.0;
        assert!(generate_cohort(&cfg).is_err());
    }

    #[test]
    fn latents_are_invariant_to_signal_strengths() {
        let mut a = tiny(30, 11);
        a.image_signal = 0.0;
        let mut b = tiny(30, 11);
        b.image_signal = 5.0;
        let ca = generate_cohort(&a).unwrap();
        let cb = generate_cohort(&b).unwrap();
        for (pa, pb) in ca.patients.iter().zip(&cb.patients) {
            assert_eq!(pa.slides, pb.slides);
            assert_eq!(pa.clinical, pb.clinical);
            assert_eq!(pa.intermediates, pb.intermediates);
        }
    }

    fn rank_correlation(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = alloc::vec![0.0; v.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let rx = rank(x);
        let ry = rank(y);
        let n = x.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for i in 0..x.len() {
            num += (rx[i] - mx) * (ry[i] - my);
            dx += (rx[i] - mx) * (rx[i] - mx);
            dy += (ry[i] - my) * (ry[i] - my);
        }
        num / fx::sqrt(dx * dy)
    }

    #[test]
    fn blob_area_label_correlation_grows_with_image_signal() {
        let mut last = f64::NEG_INFINITY;
        for &signal in &[0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut cfg = tiny(800, 21);
            cfg.image_signal = signal;
            cfg.clinical_signal = 1.0;
            let cohort = generate_cohort(&cfg).unwrap();
            let areas: Vec<f64> = cohort.patients.iter().map(planted_blob_area).collect();
            let labels: Vec<f64> =
                cohort.patients.iter().map(|p| if p.label { 1.0 } else { 0.0 }).collect();
            let corr = rank_correlation(&areas, &labels);
            assert!(
                corr >= last,
                "correlation decreased: {corr} < {last} at signal {signal}"
            );
            last = corr;
        }
        assert!(last > 0.3, "strong signal should correlate, got {last}");
    }

    #[test]
    fn slides_have_tissue_and_blob_patches() {
        let cfg = SynthConfig { n_patients: 5, ..SynthConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        for p in &cohort.patients {
            let slide = &p.slides[0];
            let mask = crate::tiling::tissue_mask(&slide.image, cfg.patch_px, 0.8, 0.1).unwrap();
            assert!(mask.tissue_count() > 50, "tissue too sparse");
            if p.intermediates.n_adenomas + p.intermediates.n_serrated > 0 {
                assert!(!slide.blobs.is_empty());
                assert!(!blob_patch_coords(slide, cfg.patch_px).is_empty());
            }
        }
    }

    #[test]
    fn record_matches_schema_and_echoes_intermediates() {
        let cfg = tiny(25, 9);
        let cohort = generate_cohort(&cfg).unwrap();
        let n_adenomas_col = cohort.schema.index_of("n_adenomas").unwrap();
        for p in &cohort.patients {
            p.clinical.check_against(&cohort.schema).unwrap();
            match p.clinical.cells[n_adenomas_col] {
                CellValue::Num(v) => assert_eq!(v, p.intermediates.n_adenomas as f64),
                _ => panic!("n_adenomas should be numeric"),
            }
        }
    }
}
