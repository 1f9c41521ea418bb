//! On-disk patch-feature cache, keyed by (slide id, region origin, extractor
//! seed). Layout per entry: header (dims, seed) + row-major little-endian
//! f64.

use std::path::{Path, PathBuf};

use crcrisk_core::cohort::Slide;
use crcrisk_core::featurizer::{extract, Extractor};
use crcrisk_core::linalg::Matrix;
use crcrisk_core::tiling::{PatchGrid, Region};

use crate::error::{CliError, Result};

const MAGIC: &[u8; 4] = b"CRFC";
const VERSION: u32 = 1;

pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<FeatureCache> {
        std::fs::create_dir_all(dir)?;
        Ok(FeatureCache { dir: dir.to_path_buf() })
    }

    fn entry_path(&self, slide_id: &str, origin: (u32, u32), seed: u64) -> PathBuf {
        self.dir.join(format!("{slide_id}__r{}_c{}__s{seed}.feat", origin.0, origin.1))
    }

    pub fn store(
        &self,
        slide_id: &str,
        origin: (u32, u32),
        seed: u64,
        features: &Matrix,
    ) -> Result<()> {
        let mut out = Vec::with_capacity(20 + features.data().len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&seed.to_le_bytes());
        out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
        for &v in features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(self.entry_path(slide_id, origin, seed), out)?;
        Ok(())
    }

    pub fn load(&self, slide_id: &str, origin: (u32, u32), seed: u64) -> Result<Option<Matrix>> {
        let path = self.entry_path(slide_id, origin, seed);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let bad = |m: &str| CliError::Format(format!("feature cache {}: {m}", path.display()));
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("bad header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad("unsupported version"));
        }
        let stored_seed = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if stored_seed != seed {
            return Err(bad("seed mismatch"));
        }
        let rows = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let need = 24 + rows * cols * 8;
        if bytes.len() != need {
            return Err(bad("length mismatch"));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in bytes[24..].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(Some(Matrix::from_vec(rows, cols, data)))
    }

    /// Extract a region's features through the cache.
    pub fn extract_cached(
        &self,
        extractor: &Extractor,
        slide: &Slide,
        grid: &PatchGrid,
        region: &Region,
    ) -> Result<Matrix> {
        let seed = extractor.config().seed;
        if let Some(hit) = self.load(&slide.id, region.origin, seed)? {
            if hit.rows() == region.len() && hit.cols() == extractor.out_dim() {
                return Ok(hit);
            }
        }
        let features = extract(extractor, &slide.image, grid, region).map_err(CliError::Core)?;
        self.store(&slide.id, region.origin, seed, &features)?;
        Ok(features)
    }
}
