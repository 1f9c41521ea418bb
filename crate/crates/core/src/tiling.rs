//! Slide tiling: tissue masking, patch grids, and region sampling.
//!
//! A slide is cut into non-overlapping square patches; a color-threshold mask
//! marks which patches hold tissue. Square regions of up to `side`² patch
//! slots are then drawn from the grid for the transformer.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fx;
use crate::raster::Raster;

/// Default brightness threshold: pale H&E background sits near white.
pub const DEFAULT_BRIGHTNESS_THRESHOLD: f64 = 0.8;
/// Default minimum fraction of below-threshold pixels for a tissue patch.
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.1;

/// Binary tissue grid over patch coordinates; dims are
/// `floor(slide / patch_px)` per axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl TissueMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn tissue_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Tissue patch coordinates of one slide, row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub coords: Vec<(u32, u32)>,
    pub patch_px: u32,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// A square window of patch slots. `slots` index into the source grid's
/// `coords`; `positions` are the same patches relative to `origin`, each in
/// `[0, side)²`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub origin: (u32, u32),
    pub side: u32,
    pub slots: Vec<u32>,
    pub positions: Vec<(u16, u16)>,
}

impl Region {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Threshold a slide into a tissue mask: a cell is tissue iff at least
/// `min_tissue_fraction` of its pixels have mean-RGB brightness below
/// `brightness_threshold`.
pub fn tissue_mask(
    slide: &Raster,
    patch_px: u32,
    brightness_threshold: f64,
    min_tissue_fraction: f64,
) -> Result<TissueMask> {
    if !(0.0..=1.0).contains(&brightness_threshold) || !(0.0..=1.0).contains(&min_tissue_fraction) {
        return Err(Error::Config("tissue thresholds must lie in [0, 1]".to_string()));
    }
    if patch_px == 0 {
        return Err(Error::Config("patch_px must be positive".to_string()));
    }
    let rows = (slide.height() / patch_px) as usize;
    let cols = (slide.width() / patch_px) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Empty(format!(
            "slide {}x{} is smaller than one {patch_px}px patch",
            slide.width(),
            slide.height()
        )));
    }
    let per_patch = (patch_px as usize) * (patch_px as usize);
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut dark = 0usize;
            for dy in 0..patch_px {
                for dx in 0..patch_px {
                    let x = c as u32 * patch_px + dx;
                    let y = r as u32 * patch_px + dy;
                    if slide.brightness(x, y) < brightness_threshold {
                        dark += 1;
                    }
                }
            }
            cells.push(dark as f64 >= min_tissue_fraction * per_patch as f64);
        }
    }
    Ok(TissueMask { rows, cols, cells })
}

/// List the mask's tissue cells as patch coordinates.
pub fn tile(slide: &Raster, patch_px: u32, mask: &TissueMask) -> Result<PatchGrid> {
    let rows = (slide.height() / patch_px) as usize;
    let cols = (slide.width() / patch_px) as usize;
    if rows != mask.rows || cols != mask.cols {
        return Err(Error::Shape(format!(
            "mask is {}x{}, slide tiles to {rows}x{cols}",
            mask.rows, mask.cols
        )));
    }
    let mut coords = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if mask.get(r, c) {
                coords.push((r as u32, c as u32));
            }
        }
    }
    Ok(PatchGrid { coords, patch_px, rows, cols })
}

/// Candidate window origins along one axis: stride-`side` positions starting
/// at `offset`, keeping only windows fully inside `extent`. An axis shorter
/// than `side` gets the single clipped window at 0.
fn axis_origins(extent: usize, side: usize, offset: usize) -> Vec<usize> {
    if extent < side {
        return alloc::vec![0];
    }
    let mut v = Vec::new();
    let mut o = offset;
    while o + side <= extent {
        v.push(o);
        o += side;
    }
    v
}

/// Offsets that maximize the number of in-bounds stride-`side` windows.
fn best_offsets(extent: usize, side: usize) -> Vec<usize> {
    if extent < side {
        return alloc::vec![0];
    }
    let mut best = Vec::new();
    let mut best_count = 0;
    for offset in 0..side.min(extent - side + 1) {
        let count = axis_origins(extent, side, offset).len();
        if count > best_count {
            best_count = count;
            best.clear();
        }
        if count == best_count {
            best.push(offset);
        }
    }
    best
}

fn window_region(grid: &PatchGrid, origin: (usize, usize), side: usize) -> Region {
    let mut slots = Vec::new();
    let mut positions = Vec::new();
    for (i, &(r, c)) in grid.coords.iter().enumerate() {
        let (r, c) = (r as usize, c as usize);
        if r >= origin.0 && r < origin.0 + side && c >= origin.1 && c < origin.1 + side {
            slots.push(i as u32);
            positions.push(((r - origin.0) as u16, (c - origin.1) as u16));
        }
    }
    Region { origin: (origin.0 as u32, origin.1 as u32), side: side as u32, slots, positions }
}

/// Sample up to `k` pairwise-disjoint square regions of `side`² patch slots.
///
/// Candidate windows form a stride-`side` lattice whose per-axis offset is
/// drawn uniformly among the offsets admitting the most in-bounds windows, so
/// whenever the grid has capacity for `k` disjoint windows the sampler can
/// return `k`. Windows with no tissue are dropped; if more than `k` remain, a
/// uniform subset is kept.
pub fn sample_regions(grid: &PatchGrid, k: usize, side: u32, rng: &mut ChaCha8Rng) -> Vec<Region> {
    if grid.is_empty() || k == 0 || side == 0 {
        return Vec::new();
    }
    let side = side as usize;
    let row_offsets = best_offsets(grid.rows, side);
    let col_offsets = best_offsets(grid.cols, side);
    let ro = row_offsets[rng.gen_range(0..row_offsets.len())];
    let co = col_offsets[rng.gen_range(0..col_offsets.len())];
    let mut candidates = Vec::new();
    for r in axis_origins(grid.rows, side, ro) {
        for c in axis_origins(grid.cols, side, co) {
            let region = window_region(grid, (r, c), side);
            if !region.is_empty() {
                candidates.push(region);
            }
        }
    }
    if candidates.len() > k {
        candidates.shuffle(rng);
        candidates.truncate(k);
    }
    candidates.sort_by_key(|r| r.origin);
    candidates
}

/// The deterministic non-overlapping cover used at evaluation time: every
/// offset-zero lattice window holding at least one tissue patch.
pub fn cover_regions(grid: &PatchGrid, side: u32) -> Vec<Region> {
    if grid.is_empty() || side == 0 {
        return Vec::new();
    }
    let side = side as usize;
    let mut regions = Vec::new();
    for r in axis_origins(grid.rows, side, 0) {
        for c in axis_origins(grid.cols, side, 0) {
            let region = window_region(grid, (r, c), side);
            if !region.is_empty() {
                regions.push(region);
            }
        }
    }
    regions
}

/// Keep `ceil(fraction * slots)` slots, chosen without replacement; relative
/// positions are preserved. `fraction` must lie in (0, 1].
pub fn subsample_patches(region: &Region, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Region> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("patch fraction {fraction} not in (0, 1]")));
    }
    if fraction == 1.0 || region.is_empty() {
        return Ok(region.clone());
    }
    let keep = fx::ceil(fraction * region.len() as f64) as usize;
    let mut idx: Vec<usize> = (0..region.len()).collect();
    idx.shuffle(rng);
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(Region {
        origin: region.origin,
        side: region.side,
        slots: idx.iter().map(|&i| region.slots[i]).collect(),
        positions: idx.iter().map(|&i| region.positions[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn uniform_slide(w: u32, h: u32, rgb: [u8; 3]) -> Raster {
        Raster::new(w, h, rgb)
    }

    #[test]
    fn all_white_slide_has_empty_mask() {
        let slide = uniform_slide(64, 64, [255, 255, 255]);
        let m = tissue_mask(&slide, 16, 0.8, 0.1).unwrap();
        assert_eq!(m.tissue_count(), 0);
    }

    #[test]
    fn all_dark_slide_has_full_mask() {
        let slide = uniform_slide(64, 64, [20, 20, 20]);
        let m = tissue_mask(&slide, 16, 0.8, 0.1).unwrap();
        assert_eq!(m.tissue_count(), m.rows() * m.cols());
    }

    #[test]
    fn half_dark_patch_respects_min_fraction() {
        // One 16x16 patch, left half dark.
        let mut slide = uniform_slide(16, 16, [255, 255, 255]);
        slide.fill_rect(0, 0, 8, 16, [0, 0, 0]);
        let m = tissue_mask(&slide, 16, 0.8, 0.5).unwrap();
        assert!(m.get(0, 0));
        let m = tissue_mask(&slide, 16, 0.8, 0.6).unwrap();
        assert!(!m.get(0, 0));
    }

    #[test]
    fn too_small_slide_errors() {
        let slide = uniform_slide(8, 8, [0, 0, 0]);
        assert!(matches!(tissue_mask(&slide, 16, 0.8, 0.1), Err(Error::Empty(_))));
    }

    #[test]
    fn tile_floors_grid_dims() {
        let slide = uniform_slide(1024, 1024, [0, 0, 0]);
        let m = tissue_mask(&slide, 448, 0.8, 0.1).unwrap();
        let g = tile(&slide, 448, &m).unwrap();
        assert_eq!((g.rows, g.cols), (2, 2));
        assert_eq!(g.coords.len(), 4);
    }

    #[test]
    fn tile_empty_mask_is_empty_grid() {
        let slide = uniform_slide(64, 64, [255, 255, 255]);
        let m = tissue_mask(&slide, 16, 0.8, 0.1).unwrap();
        let g = tile(&slide, 16, &m).unwrap();
        assert!(g.is_empty());
    }

    fn full_grid(rows: usize, cols: usize) -> PatchGrid {
        let mut coords = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                coords.push((r as u32, c as u32));
            }
        }
        PatchGrid { coords, patch_px: 8, rows, cols }
    }

    fn overlaps(a: &Region, b: &Region) -> bool {
        let (ar, ac) = (a.origin.0 as i64, a.origin.1 as i64);
        let (br, bc) = (b.origin.0 as i64, b.origin.1 as i64);
        let s = a.side as i64;
        ar < br + s && br < ar + s && ac < bc + s && bc < ac + s
    }

    #[test]
    fn exact_block_yields_one_full_region() {
        let grid = full_grid(20, 20);
        let mut rng = stream(1, &[]);
        let regions = sample_regions(&grid, 4, 20, &mut rng);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].len(), 400);
        assert_eq!(regions[0].origin, (0, 0));
    }

    #[test]
    fn capacity_four_yields_four_disjoint_regions() {
        for seed in 0..20 {
            let grid = full_grid(40, 40);
            let mut rng = stream(seed, &[]);
            let regions = sample_regions(&grid, 4, 20, &mut rng);
            assert_eq!(regions.len(), 4, "seed {seed}");
            for r in &regions {
                assert_eq!(r.len(), 400);
            }
            for i in 0..regions.len() {
                for j in i + 1..regions.len() {
                    assert!(!overlaps(&regions[i], &regions[j]));
                }
            }
        }
    }

    #[test]
    fn empty_grid_yields_no_regions() {
        let grid = PatchGrid { coords: Vec::new(), patch_px: 8, rows: 20, cols: 20 };
        let mut rng = stream(3, &[]);
        assert!(sample_regions(&grid, 4, 20, &mut rng).is_empty());
    }

    #[test]
    fn regions_never_overlap_on_random_masks() {
        for seed in 0..30u64 {
            let mut rng = stream(seed, &[7]);
            let rows = rng.gen_range(5..45);
            let cols = rng.gen_range(5..45);
            let mut coords = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if rng.gen_bool(0.4) {
                        coords.push((r as u32, c as u32));
                    }
                }
            }
            let grid = PatchGrid { coords, patch_px: 8, rows, cols };
            let regions = sample_regions(&grid, 6, 10, &mut rng);
            for i in 0..regions.len() {
                assert!(!regions[i].is_empty());
                for j in i + 1..regions.len() {
                    assert!(!overlaps(&regions[i], &regions[j]), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn positions_stay_inside_window() {
        let grid = full_grid(25, 31);
        let mut rng = stream(9, &[]);
        for region in sample_regions(&grid, 8, 10, &mut rng) {
            for &(pr, pc) in &region.positions {
                assert!((pr as u32) < region.side && (pc as u32) < region.side);
            }
            for (&slot, &(pr, pc)) in region.slots.iter().zip(&region.positions) {
                let (r, c) = grid.coords[slot as usize];
                assert_eq!(r, region.origin.0 + pr as u32);
                assert_eq!(c, region.origin.1 + pc as u32);
            }
        }
    }

    #[test]
    fn cover_is_disjoint_and_reaches_every_lattice_patch() {
        let grid = full_grid(40, 30);
        let cover = cover_regions(&grid, 20);
        // 2x1 full windows fit; covered slots = 40x20.
        let total: usize = cover.iter().map(Region::len).sum();
        assert_eq!(total, 40 * 20);
        for i in 0..cover.len() {
            for j in i + 1..cover.len() {
                assert!(!overlaps(&cover[i], &cover[j]));
            }
        }
    }

    #[test]
    fn subsample_counts_use_ceil() {
        let grid = full_grid(20, 20);
        let mut rng = stream(11, &[]);
        let region = &sample_regions(&grid, 1, 20, &mut rng)[0];
        let s = subsample_patches(region, 0.25, &mut rng).unwrap();
        assert_eq!(s.len(), 100);

        let small = Region {
            origin: (0, 0),
            side: 20,
            slots: (0..7).collect(),
            positions: (0..7).map(|i| (0u16, i as u16)).collect(),
        };
        let s = subsample_patches(&small, 0.25, &mut rng).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn subsample_full_fraction_is_identity() {
        let grid = full_grid(10, 10);
        let mut rng = stream(13, &[]);
        let region = &sample_regions(&grid, 1, 10, &mut rng)[0];
        let s = subsample_patches(region, 1.0, &mut rng).unwrap();
        assert_eq!(&s, region);
    }

    #[test]
    fn subsample_is_subset_preserving_positions() {
        let grid = full_grid(12, 12);
        let mut rng = stream(17, &[]);
        let region = &sample_regions(&grid, 1, 10, &mut rng)[0];
        let s = subsample_patches(region, 0.3, &mut rng).unwrap();
        for (slot, pos) in s.slots.iter().zip(&s.positions) {
            let i = region.slots.iter().position(|x| x == slot).unwrap();
            assert_eq!(region.positions[i], *pos);
        }
    }
}
