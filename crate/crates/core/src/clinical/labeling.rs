//! 5-year high-risk outcome labeling from follow-up findings.

use alloc::format;

use crate::error::{Error, Result};

/// What was found at a follow-up event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolypKind {
    Crc,
    Adenoma { size_mm: f64, villous: bool, high_grade_dysplasia: bool },
    Serrated { size_mm: f64, dysplasia: bool },
}

/// One follow-up finding, timed in years since the baseline colonoscopy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Finding {
    pub time_years: f64,
    pub kind: PolypKind,
}

impl Finding {
    fn size(&self) -> f64 {
        match self.kind {
            PolypKind::Crc => 0.0,
            PolypKind::Adenoma { size_mm, .. } => size_mm,
            PolypKind::Serrated { size_mm, .. } => size_mm,
        }
    }

    /// Does this finding alone mark the patient high-risk?
    fn is_high_risk(&self) -> bool {
        match self.kind {
            PolypKind::Crc => true,
            PolypKind::Adenoma { size_mm, villous, high_grade_dysplasia } => {
                size_mm >= 10.0 || villous || high_grade_dysplasia
            }
            PolypKind::Serrated { dysplasia, .. } => dysplasia,
        }
    }
}

/// 1 iff any finding within `window_years` of baseline is CRC, an advanced
/// adenoma (>= 10 mm, villous components, or high-grade dysplasia), or a
/// serrated polyp with dysplasia.
pub fn label_high_risk(followup: &[Finding], window_years: f64) -> Result<bool> {
    if window_years < 0.0 {
        return Err(Error::Config(format!("window_years {window_years} is negative")));
    }
    for f in followup {
        if f.time_years < 0.0 {
            return Err(Error::Config(format!("finding at negative time {}", f.time_years)));
        }
        if f.size() < 0.0 {
            return Err(Error::Config(format!("finding with negative size {}", f.size())));
        }
    }
    Ok(followup.iter().any(|f| f.time_years <= window_years && f.is_high_risk()))
}

/// Convenience: the standard 5-year window.
pub fn label_high_risk_5y(followup: &[Finding]) -> Result<bool> {
    label_high_risk(followup, 5.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adenoma(time: f64, size: f64, villous: bool, hgd: bool) -> Finding {
        Finding {
            time_years: time,
            kind: PolypKind::Adenoma { size_mm: size, villous, high_grade_dysplasia: hgd },
        }
    }

    fn serrated(time: f64, size: f64, dysplasia: bool) -> Finding {
        Finding { time_years: time, kind: PolypKind::Serrated { size_mm: size, dysplasia } }
    }

    #[test]
    fn large_adenoma_inside_window_is_high_risk() {
        assert!(label_high_risk(&[adenoma(3.0, 12.0, false, false)], 5.0).unwrap());
    }

    #[test]
    fn large_adenoma_outside_window_is_low_risk() {
        assert!(!label_high_risk(&[adenoma(6.0, 12.0, false, false)], 5.0).unwrap());
    }

    #[test]
    fn no_events_is_low_risk() {
        assert!(!label_high_risk(&[], 5.0).unwrap());
    }

    #[test]
    fn serrated_needs_dysplasia_regardless_of_size() {
        assert!(!label_high_risk(&[serrated(2.0, 15.0, false)], 5.0).unwrap());
        assert!(label_high_risk(&[serrated(2.0, 3.0, true)], 5.0).unwrap());
    }

    #[test]
    fn negative_time_is_an_error() {
        assert!(label_high_risk(&[adenoma(-1.0, 12.0, false, false)], 5.0).is_err());
    }
}
