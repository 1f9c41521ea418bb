//! Frozen patch featurization.
//!
//! Patch pixels are mapped to fixed-length feature vectors by a seeded,
//! never-trained extractor: two stride-2 valid convolutions with tanh
//! activations, spatial averaging, and an affine projection to `out_dim`.
//! Weights are drawn once from the seed, so features are a pure function of
//! (pixels, seed). Any other extractor can stand in behind [`extract`] as
//! long as it is deterministic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fx;
use crate::linalg::Matrix;
use crate::raster::Raster;
use crate::rng::{stream, tags};
use crate::tiling::{PatchGrid, Region};

const C1: usize = 8;
const C2: usize = 16;
const K: usize = 3;
const STRIDE: usize = 2;

/// Configuration of the default extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub seed: u64,
    pub out_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { seed: 0, out_dim: 32 }
    }
}

/// The frozen extractor; conv stages carry no bias so an all-zero patch maps
/// exactly to the projection bias.
#[derive(Debug, Clone)]
pub struct Extractor {
    cfg: ExtractorConfig,
    conv1: Vec<f64>, // [C1][3][K][K]
    conv2: Vec<f64>, // [C2][C1][K][K]
    proj: Matrix,    // C2 x out_dim
    bias: Vec<f64>,  // out_dim
}

impl Extractor {
    pub fn new(cfg: ExtractorConfig) -> Result<Self> {
        if cfg.out_dim == 0 {
            return Err(Error::Config("extractor out_dim must be positive".into()));
        }
        let mut rng = stream(cfg.seed, &[tags::EXTRACTOR]);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        };
        let conv1 = draw(C1 * 3 * K * K, 1.0 / fx::sqrt((3 * K * K) as f64));
        let conv2 = draw(C2 * C1 * K * K, 1.0 / fx::sqrt((C1 * K * K) as f64));
        let proj_data = draw(C2 * cfg.out_dim, 1.0 / fx::sqrt(C2 as f64));
        let bias = draw(cfg.out_dim, 0.1);
        Ok(Extractor {
            cfg,
            conv1,
            conv2,
            proj: Matrix::from_vec(C2, cfg.out_dim, proj_data),
            bias,
        })
    }

    pub fn config(&self) -> ExtractorConfig {
        self.cfg
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim
    }

    /// Feature vector for the `patch_px`-sized patch at pixel `(x0, y0)`.
    fn patch_features(&self, slide: &Raster, x0: u32, y0: u32, patch_px: u32) -> Result<Vec<f64>> {
        let p = patch_px as usize;
        let o1 = conv_out(p)?;
        let o2 = conv_out(o1)?;
        if x0 + patch_px > slide.width() || y0 + patch_px > slide.height() {
            return Err(Error::Shape(format!(
                "patch at ({x0}, {y0}) exceeds slide {}x{}",
                slide.width(),
                slide.height()
            )));
        }
        // Stage 1: 3 -> C1 channels, stride 2, tanh, no bias.
        let mut s1 = vec![0.0_f64; C1 * o1 * o1];
        for oc in 0..C1 {
            for oy in 0..o1 {
                for ox in 0..o1 {
                    let mut acc = 0.0;
                    for ic in 0..3 {
                        for ky in 0..K {
                            for kx in 0..K {
                                let px = slide
                                    .pixel(x0 + (ox * STRIDE + kx) as u32, y0 + (oy * STRIDE + ky) as u32);
                                let v = px[ic] as f64 / 255.0;
                                acc += v * self.conv1[((oc * 3 + ic) * K + ky) * K + kx];
                            }
                        }
                    }
                    s1[(oc * o1 + oy) * o1 + ox] = fx::tanh(acc);
                }
            }
        }
        // Stage 2: C1 -> C2 channels, stride 2, tanh, no bias.
        let mut s2 = vec![0.0_f64; C2 * o2 * o2];
        for oc in 0..C2 {
            for oy in 0..o2 {
                for ox in 0..o2 {
                    let mut acc = 0.0;
                    for ic in 0..C1 {
                        for ky in 0..K {
                            for kx in 0..K {
                                let v = s1[(ic * o1 + oy * STRIDE + ky) * o1 + ox * STRIDE + kx];
                                acc += v * self.conv2[((oc * C1 + ic) * K + ky) * K + kx];
                            }
                        }
                    }
                    s2[(oc * o2 + oy) * o2 + ox] = fx::tanh(acc);
                }
            }
        }
        // Spatial average per channel, then affine projection.
        let area = (o2 * o2) as f64;
        let mut pooled = vec![0.0_f64; C2];
        for (c, slot) in pooled.iter_mut().enumerate() {
            *slot = s2[c * o2 * o2..(c + 1) * o2 * o2].iter().sum::<f64>() / area;
        }
        let mut out = self.bias.clone();
        for (c, &p) in pooled.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o += p * self.proj.get(c, j);
            }
        }
        Ok(out)
    }

    /// Features for every tissue patch of a grid, one row per `grid.coords`
    /// entry. Used as a per-slide cache: regions index into these rows.
    pub fn extract_grid(&self, slide: &Raster, grid: &PatchGrid) -> Result<Matrix> {
        let mut out = Matrix::zeros(grid.coords.len(), self.cfg.out_dim);
        for (i, &(r, c)) in grid.coords.iter().enumerate() {
            let row =
                self.patch_features(slide, c * grid.patch_px, r * grid.patch_px, grid.patch_px)?;
            out.row_mut(i).copy_from_slice(&row);
        }
        Ok(out)
    }
}

fn conv_out(input: usize) -> Result<usize> {
    if input < K {
        return Err(Error::Shape(format!(
            "patch too small for the default extractor: stage input {input} < kernel {K}"
        )));
    }
    Ok((input - K) / STRIDE + 1)
}

/// Feature matrix for a region's slots, row order matching the slot order.
pub fn extract(
    extractor: &Extractor,
    slide: &Raster,
    grid: &PatchGrid,
    region: &Region,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(region.len(), extractor.out_dim());
    for (i, &slot) in region.slots.iter().enumerate() {
        let (r, c) = grid.coords[slot as usize];
        let row =
            extractor.patch_features(slide, c * grid.patch_px, r * grid.patch_px, grid.patch_px)?;
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

/// Select cached grid-feature rows for a region's slots.
pub fn rows_for_region(grid_features: &Matrix, region: &Region) -> Matrix {
    let mut out = Matrix::zeros(region.len(), grid_features.cols());
    for (i, &slot) in region.slots.iter().enumerate() {
        out.row_mut(i).copy_from_slice(grid_features.row(slot as usize));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{tile, tissue_mask};

    fn dark_slide(w: u32, h: u32) -> Raster {
        Raster::new(w, h, [40, 40, 40])
    }

    fn grid_for(slide: &Raster, patch_px: u32) -> PatchGrid {
        let mask = tissue_mask(slide, patch_px, 0.8, 0.1).unwrap();
        tile(slide, patch_px, &mask).unwrap()
    }

    fn one_region(grid: &PatchGrid) -> Region {
        Region {
            origin: (0, 0),
            side: grid.rows.max(grid.cols) as u32,
            slots: (0..grid.coords.len() as u32).collect(),
            positions: grid.coords.iter().map(|&(r, c)| (r as u16, c as u16)).collect(),
        }
    }

    #[test]
    fn zero_patch_maps_to_bias_vector() {
        let slide = Raster::new(16, 16, [0, 0, 0]);
        let ex = Extractor::new(ExtractorConfig { seed: 5, out_dim: 12 }).unwrap();
        let f = ex.patch_features(&slide, 0, 0, 16).unwrap();
        assert_eq!(f, ex.bias);
        let again = ex.patch_features(&slide, 0, 0, 16).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn duplicated_patch_contents_give_identical_rows() {
        let mut slide = dark_slide(32, 16);
        // Draw the same motif in both patches.
        for (x0, y0) in [(0u32, 0u32), (16, 0)] {
            slide.fill_ellipse(x0 as f64 + 8.0, y0 as f64 + 8.0, 5.0, 3.0, [120, 60, 140]);
        }
        let grid = grid_for(&slide, 16);
        let ex = Extractor::new(ExtractorConfig { seed: 1, out_dim: 8 }).unwrap();
        let region = one_region(&grid);
        let f = extract(&ex, &slide, &grid, &region).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn out_dim_matches_config() {
        let slide = dark_slide(16, 16);
        let grid = grid_for(&slide, 16);
        let ex = Extractor::new(ExtractorConfig { seed: 2, out_dim: 32 }).unwrap();
        let region = one_region(&grid);
        let f = extract(&ex, &slide, &grid, &region).unwrap();
        assert_eq!(f.cols(), 32);
        assert_eq!(f.rows(), 1);
    }

    #[test]
    fn translation_by_one_patch_stride_permutes_rows() {
        // Content of patch (0,0) moved to patch (0,1) yields the same row.
        let mut a = dark_slide(32, 16);
        a.fill_ellipse(8.0, 8.0, 5.0, 4.0, [200, 120, 180]);
        let mut b = dark_slide(32, 16);
        b.fill_ellipse(24.0, 8.0, 5.0, 4.0, [200, 120, 180]);
        let ex = Extractor::new(ExtractorConfig { seed: 3, out_dim: 16 }).unwrap();
        let ga = grid_for(&a, 16);
        let gb = grid_for(&b, 16);
        let fa = ex.extract_grid(&a, &ga).unwrap();
        let fb = ex.extract_grid(&b, &gb).unwrap();
        assert_eq!(fa.row(0), fb.row(1));
        assert_eq!(fa.row(1), fb.row(0));
    }

    #[test]
    fn too_small_patch_is_a_shape_error() {
        let slide = dark_slide(8, 8);
        let ex = Extractor::new(ExtractorConfig { seed: 4, out_dim: 8 }).unwrap();
        assert!(matches!(ex.patch_features(&slide, 0, 0, 5), Err(Error::Shape(_))));
    }

    #[test]
    fn cached_rows_match_direct_extraction() {
        let mut slide = dark_slide(32, 32);
        slide.fill_ellipse(16.0, 16.0, 10.0, 6.0, [90, 50, 120]);
        let grid = grid_for(&slide, 8);
        let ex = Extractor::new(ExtractorConfig { seed: 6, out_dim: 8 }).unwrap();
        let cache = ex.extract_grid(&slide, &grid).unwrap();
        let region = one_region(&grid);
        let direct = extract(&ex, &slide, &grid, &region).unwrap();
        let cached = rows_for_region(&cache, &region);
        assert_eq!(direct, cached);
    }
}
