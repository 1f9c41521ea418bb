//! Interpretability: class-token attention maps, attention differences
//! between checkpoints, overlay rendering, and exact Shapley attribution for
//! the fusion model.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalstat::{auc, mean_std};
use crate::fx;
use crate::linalg::Matrix;
use crate::maskhit::forward_region;
use crate::raster::Raster;
use crate::tiling::cover_regions;
use crate::training::{Checkpoint, PreparedSlide};

/// Per-patch scalar over one slide's tissue patches. `values[i]` belongs to
/// `coords[i]`; patches outside the evaluation cover carry 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub coords: Vec<(u32, u32)>,
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub patch_px: u32,
    /// Stage tag of the checkpoint (pair of tags for difference maps).
    pub provenance: String,
}

/// Raw (unnormalized) class-token attention per tissue patch, averaged over
/// layers and heads, region by region over the exhaustive cover. Each cover
/// region's values sum to 1.
pub fn raw_attention(checkpoint: &Checkpoint, slide: &PreparedSlide) -> Result<AttentionMap> {
    let grid = &slide.grid;
    if grid.is_empty() {
        return Err(Error::NoTissue("slide has no tissue patches".to_string()));
    }
    let side = checkpoint.params.config().region_side as u32;
    let mut values = vec![0.0; grid.coords.len()];
    for region in cover_regions(grid, side) {
        let features = crate::featurizer::rows_for_region(&slide.features, &region);
        let batch = crate::maskhit::RegionBatch::full(features, region.positions.clone());
        let (_, attention) = forward_region(&checkpoint.params, &batch)?;
        let cls_attention = attention.class_row_mean();
        for (&slot, &a) in region.slots.iter().zip(&cls_attention) {
            values[slot as usize] = a;
        }
    }
    Ok(AttentionMap {
        coords: grid.coords.clone(),
        values,
        rows: grid.rows,
        cols: grid.cols,
        patch_px: grid.patch_px,
        provenance: checkpoint.stage.name().to_string(),
    })
}

/// Max-normalized attention map in [0, 1]; an all-zero map stays zero.
pub fn attention_map(checkpoint: &Checkpoint, slide: &PreparedSlide) -> Result<AttentionMap> {
    let mut map = raw_attention(checkpoint, slide)?;
    let max = map.values.iter().fold(0.0_f64, |m, &v| m.max(v));
    if max > 0.0 {
        for v in &mut map.values {
            *v /= max;
        }
    }
    Ok(map)
}

/// Signed per-patch difference of raw attention: `finetuned - pretrained`,
/// both over the same region cover. Checkpoints must share the transformer
/// config and featurizer.
pub fn attention_difference(
    pretrained: &Checkpoint,
    finetuned: &Checkpoint,
    slide: &PreparedSlide,
) -> Result<AttentionMap> {
    if pretrained.params.config() != finetuned.params.config() {
        return Err(Error::Config(
            "attention_difference: transformer configs differ".to_string(),
        ));
    }
    if pretrained.extractor != finetuned.extractor {
        return Err(Error::Config(
            "attention_difference: featurizer configs differ".to_string(),
        ));
    }
    let base = raw_attention(pretrained, slide)?;
    let tuned = raw_attention(finetuned, slide)?;
    let values = tuned.values.iter().zip(&base.values).map(|(a, b)| a - b).collect();
    Ok(AttentionMap {
        coords: base.coords,
        values,
        rows: base.rows,
        cols: base.cols,
        patch_px: base.patch_px,
        provenance: format!("{}-minus-{}", finetuned.stage.name(), pretrained.stage.name()),
    })
}

/// Color scale for overlays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Palette {
    /// White to red over [0, 1]; redder means higher attention.
    Sequential,
    /// Blue-white-red over [-1, 1] after scaling by the max magnitude;
    /// the midpoint (zero) renders white.
    Diverging,
}

fn sequential_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let other = fx::round(255.0 * (1.0 - v)) as u8;
    [255, other, other]
}

fn diverging_color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    if v >= 0.0 {
        let other = fx::round(255.0 * (1.0 - v)) as u8;
        [255, other, other]
    } else {
        let other = fx::round(255.0 * (1.0 + v)) as u8;
        [other, other, 255]
    }
}

/// Paint the map's patches over a copy of the slide; untouched pixels keep
/// their original color. Output dimensions equal the slide's.
pub fn render_overlay(slide: &Raster, map: &AttentionMap, palette: Palette) -> Result<Raster> {
    let rows = (slide.height() / map.patch_px) as usize;
    let cols = (slide.width() / map.patch_px) as usize;
    if rows != map.rows || cols != map.cols {
        return Err(Error::Shape(format!(
            "map is {}x{} patches, slide tiles to {rows}x{cols}",
            map.rows, map.cols
        )));
    }
    let scale = match palette {
        Palette::Sequential => 1.0,
        Palette::Diverging => {
            let max = map.values.iter().fold(0.0_f64, |m, &v| m.max(fx::abs(v)));
            if max > 0.0 {
                1.0 / max
            } else {
                1.0
            }
        }
    };
    let mut out = slide.clone();
    for (&(r, c), &v) in map.coords.iter().zip(&map.values) {
        let color = match palette {
            Palette::Sequential => sequential_color(v * scale),
            Palette::Diverging => diverging_color(v * scale),
        };
        out.fill_rect(c * map.patch_px, r * map.patch_px, map.patch_px, map.patch_px, color);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shapley attribution

/// Shapley values per feature group, plus Monte-Carlo standard errors when
/// sampling was used.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyValues {
    pub values: Vec<f64>,
    pub std_error: Option<Vec<f64>>,
    pub exact: bool,
}

/// Largest group count evaluated by exact enumeration.
pub const EXACT_GROUP_LIMIT: usize = 15;

fn check_grouping(grouping: &[Vec<usize>], width: usize) -> Result<()> {
    let mut seen = vec![false; width];
    for group in grouping {
        for &col in group {
            if col >= width {
                return Err(Error::Shape(format!("group column {col} out of range {width}")));
            }
            if seen[col] {
                return Err(Error::Shape(format!("column {col} appears in two groups")));
            }
            seen[col] = true;
        }
    }
    if seen.iter().any(|&s| !s) {
        return Err(Error::Shape("grouping does not cover every column".to_string()));
    }
    Ok(())
}

fn background_means(background: &Matrix) -> Result<Vec<f64>> {
    if background.rows() == 0 {
        return Err(Error::Empty("shapley: empty background set".to_string()));
    }
    let mut means = vec![0.0; background.cols()];
    for i in 0..background.rows() {
        for (m, &v) in means.iter_mut().zip(background.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= background.rows() as f64;
    }
    Ok(means)
}

/// Exact Shapley values over feature groups: coalition value is the model
/// output with in-coalition groups from the instance and the rest replaced
/// by background means. Above [`EXACT_GROUP_LIMIT`] groups, Monte-Carlo
/// permutation sampling with `mc_samples` permutations is used instead.
pub fn shapley<F: Fn(&[f64]) -> f64>(
    model: F,
    instance: &[f64],
    background: &Matrix,
    grouping: &[Vec<usize>],
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ShapleyValues> {
    if background.cols() != instance.len() {
        return Err(Error::Shape("background width differs from instance".to_string()));
    }
    check_grouping(grouping, instance.len())?;
    let means = background_means(background)?;
    let n_groups = grouping.len();
    if n_groups == 0 {
        return Err(Error::Empty("shapley: no groups".to_string()));
    }
    if n_groups <= EXACT_GROUP_LIMIT {
        Ok(exact_shapley(&model, instance, &means, grouping))
    } else {
        Ok(mc_shapley(&model, instance, &means, grouping, mc_samples, rng))
    }
}

fn coalition_input(
    instance: &[f64],
    means: &[f64],
    grouping: &[Vec<usize>],
    mask: usize,
) -> Vec<f64> {
    let mut x = means.to_vec();
    for (g, group) in grouping.iter().enumerate() {
        if mask & (1 << g) != 0 {
            for &col in group {
                x[col] = instance[col];
            }
        }
    }
    x
}

fn exact_shapley<F: Fn(&[f64]) -> f64>(
    model: &F,
    instance: &[f64],
    means: &[f64],
    grouping: &[Vec<usize>],
) -> ShapleyValues {
    let g = grouping.len();
    let mut value_cache = vec![0.0_f64; 1 << g];
    for mask in 0..(1usize << g) {
        value_cache[mask] = model(&coalition_input(instance, means, grouping, mask));
    }
    // Factorials up to 15! are exact in f64.
    let mut fact = vec![1.0_f64; g + 1];
    for i in 1..=g {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut values = vec![0.0; g];
    for (gi, value) in values.iter_mut().enumerate() {
        let bit = 1usize << gi;
        for mask in 0..(1usize << g) {
            if mask & bit != 0 {
                continue;
            }
            let s = (mask as u32).count_ones() as usize;
            let weight = fact[s] * fact[g - s - 1] / fact[g];
            *value += weight * (value_cache[mask | bit] - value_cache[mask]);
        }
    }
    ShapleyValues { values, std_error: None, exact: true }
}

fn mc_shapley<F: Fn(&[f64]) -> f64>(
    model: &F,
    instance: &[f64],
    means: &[f64],
    grouping: &[Vec<usize>],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> ShapleyValues {
    let g = grouping.len();
    let samples = samples.max(1);
    let mut sums = vec![0.0; g];
    let mut sq_sums = vec![0.0; g];
    let mut order: Vec<usize> = (0..g).collect();
    for _ in 0..samples {
        order.shuffle(rng);
        let mut mask = 0usize;
        let mut prev = model(&coalition_input(instance, means, grouping, mask));
        for &gi in &order {
            mask |= 1 << gi;
            let next = model(&coalition_input(instance, means, grouping, mask));
            let delta = next - prev;
            sums[gi] += delta;
            sq_sums[gi] += delta * delta;
            prev = next;
        }
    }
    let n = samples as f64;
    let values: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let std_error = sq_sums
        .iter()
        .zip(&values)
        .map(|(&sq, &m)| {
            if samples < 2 {
                0.0
            } else {
                fx::sqrt((sq / n - m * m).max(0.0) / (n - 1.0))
            }
        })
        .collect();
    ShapleyValues { values, std_error: Some(std_error), exact: false }
}

/// One feature group's aggregate over repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Shapley report aggregated across repeated experiments, ordered by |mean|
/// descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyReport {
    pub groups: Vec<GroupStat>,
}

/// Mean/std per group across per-repeat Shapley value vectors.
pub fn aggregate_shapley(per_repeat: &[Vec<f64>], names: &[String]) -> Result<ShapleyReport> {
    let first = per_repeat
        .first()
        .ok_or_else(|| Error::Empty("aggregate_shapley: no reports".to_string()))?;
    if first.len() != names.len() {
        return Err(Error::Shape("aggregate_shapley: name count mismatch".to_string()));
    }
    for r in per_repeat {
        if r.len() != first.len() {
            return Err(Error::Shape("aggregate_shapley: grouping mismatch".to_string()));
        }
    }
    let mut groups = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let series: Vec<f64> = per_repeat.iter().map(|r| r[i]).collect();
        let (mean, std) = mean_std(&series);
        groups.push(GroupStat { name: name.clone(), mean, std });
    }
    groups.sort_by(|a, b| fx::abs(b.mean).total_cmp(&fx::abs(a.mean)).then(a.name.cmp(&b.name)));
    Ok(ShapleyReport { groups })
}

/// Permutation importance: shuffle one group's columns across the test rows
/// and report the AUC drop, repeated `rounds` times per group.
pub fn permutation_importance<F: Fn(&[f64]) -> f64>(
    model: F,
    x_test: &Matrix,
    labels: &[bool],
    grouping: &[Vec<usize>],
    rounds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupStat>> {
    check_grouping(grouping, x_test.cols())?;
    if x_test.rows() != labels.len() {
        return Err(Error::Shape("permutation_importance: label count mismatch".to_string()));
    }
    let baseline_scores: Vec<f64> = (0..x_test.rows()).map(|i| model(x_test.row(i))).collect();
    let baseline = auc(&baseline_scores, labels)?;
    let mut out = Vec::with_capacity(grouping.len());
    for (gi, group) in grouping.iter().enumerate() {
        let mut drops = Vec::with_capacity(rounds);
        for _ in 0..rounds.max(1) {
            let mut perm: Vec<usize> = (0..x_test.rows()).collect();
            perm.shuffle(rng);
            let scores: Vec<f64> = (0..x_test.rows())
                .map(|i| {
                    let mut row = x_test.row(i).to_vec();
                    for &col in group {
                        row[col] = x_test.get(perm[i], col);
                    }
                    model(&row)
                })
                .collect();
            drops.push(baseline - auc(&scores, labels)?);
        }
        let (mean, std) = mean_std(&drops);
        out.push(GroupStat { name: format!("group{gi}"), mean, std });
    }
    Ok(out)
}

/// Group one-hot blocks back into their source variables for the selected
/// categories; returns (group names, encoded-column groups) aligned with the
/// selected-column design matrix layout.
pub fn schema_grouping(
    schema: &crate::clinical::ClinicalSchema,
    categories: &[crate::clinical::Category],
) -> (Vec<String>, Vec<Vec<usize>>) {
    let mut names = Vec::new();
    let mut groups = Vec::new();
    let mut next_col = 0usize;
    for (i, var) in schema.vars().iter().enumerate() {
        if !categories.contains(&var.category) {
            continue;
        }
        let width = schema.column_range(i).len();
        names.push(var.name.clone());
        groups.push((next_col..next_col + width).collect());
        next_col += width;
    }
    (names, groups)
}
