//! Train-split preprocessing: standardize continuous variables, one-hot
//! encode categoricals, impute missing values with the train mean or mode.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::clinical::schema::{CellValue, ClinicalRecord, ClinicalSchema, VarKind};
use crate::error::{Error, Result};
use crate::fx;
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
enum VarStats {
    /// Train mean and population std; std 0 encodes to 0.
    Continuous { mean: f64, std: f64 },
    /// Most common train level; ties break toward the smaller index.
    Categorical { mode: usize },
}

/// Statistics fitted on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocStats {
    stats: Vec<VarStats>,
}

/// Encoded fixed-length numeric form of one record, with per-variable
/// imputation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalVector {
    pub values: Vec<f64>,
    pub imputed: Vec<bool>,
}

/// Fit imputation and standardization statistics on training records.
pub fn fit_preprocessor(
    train_records: &[&ClinicalRecord],
    schema: &ClinicalSchema,
) -> Result<PreprocStats> {
    if train_records.is_empty() {
        return Err(Error::Empty("fit_preprocessor: empty training set".to_string()));
    }
    for r in train_records {
        r.check_against(schema)?;
    }
    let mut stats = Vec::with_capacity(schema.len());
    for (i, var) in schema.vars().iter().enumerate() {
        match &var.kind {
            VarKind::Continuous => {
                let values: Vec<f64> = train_records
                    .iter()
                    .filter_map(|r| match r.cells[i] {
                        CellValue::Num(x) => Some(x),
                        _ => None,
                    })
                    .collect();
                let (mean, std) = if values.is_empty() {
                    (0.0, 0.0)
                } else {
                    let n = values.len() as f64;
                    let mean = values.iter().sum::<f64>() / n;
                    let var = values.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    (mean, fx::sqrt(var))
                };
                stats.push(VarStats::Continuous { mean, std });
            }
            VarKind::Categorical { levels } => {
                let mut counts = vec![0usize; levels.len()];
                for r in train_records {
                    if let CellValue::Level(l) = r.cells[i] {
                        if l < levels.len() {
                            counts[l] += 1;
                        }
                    }
                }
                let mode = counts
                    .iter()
                    .enumerate()
                    .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                stats.push(VarStats::Categorical { mode });
            }
        }
    }
    Ok(PreprocStats { stats })
}

impl PreprocStats {
    /// Encode one record to the schema's fixed width. Missing continuous
    /// values impute to the train mean (standardizing to 0); missing or
    /// out-of-range categorical levels route to the train mode with an
    /// imputation flag.
    pub fn apply(&self, schema: &ClinicalSchema, record: &ClinicalRecord) -> Result<ClinicalVector> {
        record.check_against(schema)?;
        if self.stats.len() != schema.len() {
            return Err(Error::Shape("preprocessor fitted on a different schema".to_string()));
        }
        let mut values = Vec::with_capacity(schema.encoded_width());
        let mut imputed = Vec::with_capacity(schema.len());
        for (i, var) in schema.vars().iter().enumerate() {
            match (&self.stats[i], &var.kind) {
                (VarStats::Continuous { mean, std }, VarKind::Continuous) => {
                    let (x, was_imputed) = match record.cells[i] {
                        CellValue::Num(x) if x.is_finite() => (x, false),
                        _ => (*mean, true),
                    };
                    values.push(if *std > 0.0 { (x - mean) / std } else { 0.0 });
                    imputed.push(was_imputed);
                }
                (VarStats::Categorical { mode }, VarKind::Categorical { levels }) => {
                    let (level, was_imputed) = match record.cells[i] {
                        CellValue::Level(l) if l < levels.len() => (l, false),
                        _ => (*mode, true),
                    };
                    for j in 0..levels.len() {
                        values.push(if j == level { 1.0 } else { 0.0 });
                    }
                    imputed.push(was_imputed);
                }
                _ => return Err(Error::Shape("stats kind does not match schema".to_string())),
            }
        }
        Ok(ClinicalVector { values, imputed })
    }

    /// Encode many records into a design matrix, one row per record.
    pub fn encode_matrix(
        &self,
        schema: &ClinicalSchema,
        records: &[&ClinicalRecord],
    ) -> Result<Matrix> {
        let width = schema.encoded_width();
        let mut out = Matrix::zeros(records.len(), width);
        for (i, r) in records.iter().enumerate() {
            let v = self.apply(schema, r)?;
            out.row_mut(i).copy_from_slice(&v.values);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::schema::{Category, VarDef};

    fn small_schema() -> ClinicalSchema {
        ClinicalSchema::new(vec![
            VarDef::continuous("x", Category::Personal),
            VarDef::categorical("k", Category::Personal, &["A", "B", "C"]),
        ])
        .unwrap()
    }

    fn rec(x: CellValue, k: CellValue) -> ClinicalRecord {
        ClinicalRecord { cells: vec![x, k] }
    }

    #[test]
    fn one_hot_encoding() {
        let schema = small_schema();
        let train = [
            rec(CellValue::Num(1.0), CellValue::Level(0)),
            rec(CellValue::Num(2.0), CellValue::Level(1)),
            rec(CellValue::Num(3.0), CellValue::Level(1)),
        ];
        let refs: Vec<&ClinicalRecord> = train.iter().collect();
        let stats = fit_preprocessor(&refs, &schema).unwrap();
        let v = stats.apply(&schema, &rec(CellValue::Num(2.0), CellValue::Level(1))).unwrap();
        assert_eq!(&v.values[1..4], &[0.0, 1.0, 0.0]);
        // x = 2 is the train mean, so it standardizes to 0.
        assert_eq!(v.values[0], 0.0);
        assert_eq!(v.imputed, vec![false, false]);
    }

    #[test]
    fn missing_continuous_imputes_to_mean_then_zero() {
        let schema = small_schema();
        let train = [
            rec(CellValue::Num(1.0), CellValue::Level(0)),
            rec(CellValue::Num(4.0), CellValue::Level(0)),
        ];
        let refs: Vec<&ClinicalRecord> = train.iter().collect();
        let stats = fit_preprocessor(&refs, &schema).unwrap();
        let v = stats.apply(&schema, &rec(CellValue::Missing, CellValue::Level(0))).unwrap();
        assert_eq!(v.values[0], 0.0);
        assert!(v.imputed[0]);
    }

    #[test]
    fn missing_categorical_routes_to_mode_with_flag() {
        let schema = small_schema();
        let train = [
            rec(CellValue::Num(1.0), CellValue::Level(2)),
            rec(CellValue::Num(2.0), CellValue::Level(2)),
            rec(CellValue::Num(3.0), CellValue::Level(0)),
        ];
        let refs: Vec<&ClinicalRecord> = train.iter().collect();
        let stats = fit_preprocessor(&refs, &schema).unwrap();
        let v = stats.apply(&schema, &rec(CellValue::Num(1.0), CellValue::Missing)).unwrap();
        assert_eq!(&v.values[1..4], &[0.0, 0.0, 1.0]);
        assert!(v.imputed[1]);
        // Out-of-range level behaves like missing.
        let v = stats.apply(&schema, &rec(CellValue::Num(1.0), CellValue::Level(9))).unwrap();
        assert_eq!(&v.values[1..4], &[0.0, 0.0, 1.0]);
        assert!(v.imputed[1]);
    }

    #[test]
    fn zero_std_encodes_to_zero() {
        let schema = small_schema();
        let train = [
            rec(CellValue::Num(5.0), CellValue::Level(0)),
            rec(CellValue::Num(5.0), CellValue::Level(1)),
        ];
        let refs: Vec<&ClinicalRecord> = train.iter().collect();
        let stats = fit_preprocessor(&refs, &schema).unwrap();
        let v = stats.apply(&schema, &rec(CellValue::Num(99.0), CellValue::Level(0))).unwrap();
        assert_eq!(v.values[0], 0.0);
    }

    #[test]
    fn width_is_stable_across_records() {
        let schema = small_schema();
        let train = [rec(CellValue::Num(1.0), CellValue::Level(0))];
        let refs: Vec<&ClinicalRecord> = train.iter().collect();
        let stats = fit_preprocessor(&refs, &schema).unwrap();
        for r in [
            rec(CellValue::Missing, CellValue::Missing),
            rec(CellValue::Num(7.0), CellValue::Level(2)),
        ] {
            assert_eq!(stats.apply(&schema, &r).unwrap().values.len(), schema.encoded_width());
        }
    }
}
