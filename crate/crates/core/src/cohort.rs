//! Patient-level data model shared across the pipeline.

use alloc::string::String;
use alloc::vec::Vec;

use crate::clinical::schema::{ClinicalRecord, ClinicalSchema};
use crate::raster::Raster;

/// A planted ellipse on a synthetic slide, in pixel coordinates. Kept with
/// the slide so tests can compare model attention against known geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub id: String,
    pub image: Raster,
    /// Planted blob geometry; empty for non-synthetic slides.
    pub blobs: Vec<Blob>,
}

/// Colonoscopy and microscopy findings used as stage-1 targets during guided
/// fine-tuning. Ordinals index the level lists in [`crate::clinical::schema`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntermediateTargets {
    /// Index into `ADENOMA_SIZE_LEVELS` (5 levels).
    pub largest_adenoma_size: u8,
    pub n_adenomas: u32,
    /// Index into `SERRATED_SIZE_LEVELS` (5 levels).
    pub largest_serrated_size: u8,
    pub n_serrated: u32,
    /// Index into `ADVANCED_SERRATED_LEVELS` (5 levels).
    pub most_advanced_serrated: u8,
    /// Index into `ADVANCED_ADENOMA_LEVELS` (4 levels).
    pub most_advanced_adenoma: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub slides: Vec<Slide>,
    pub clinical: ClinicalRecord,
    pub intermediates: IntermediateTargets,
    /// 5-year high-risk label.
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub schema: ClinicalSchema,
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.patients.iter().filter(|p| p.label).count()
    }

    /// A new cohort holding only the given patient indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            schema: self.schema.clone(),
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }
}
