//! Clinical records: schema, outcome labeling, preprocessing, and the three
//! tabular baselines (penalized logistic regression, random forest, MLP).

pub mod forest;
pub mod labeling;
pub mod logistic;
pub mod mlp;
pub mod preproc;
pub mod schema;

pub use forest::{fit_random_forest, ForestConfig, RandomForest};
pub use labeling::{label_high_risk, Finding, PolypKind};
pub use logistic::{fit_logistic_l2, LogisticModel};
pub use mlp::{fit_mlp, Mlp, MlpConfig};
pub use preproc::{fit_preprocessor, ClinicalVector, PreprocStats};
pub use schema::{
    paper_schema, Category, CellValue, ClinicalRecord, ClinicalSchema, VarDef, VarKind,
};

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which tabular baseline a pipeline uses.
#[derive(Debug, Clone, PartialEq)]
pub enum TabularConfig {
    /// Ridge-penalized logistic regression; the grid is searched by
    /// cross-validation when it has more than one entry.
    Logistic { lambda_grid: alloc::vec::Vec<f64> },
    Forest(ForestConfig),
    Mlp(MlpConfig),
}

impl TabularConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TabularConfig::Logistic { .. } => "logistic",
            TabularConfig::Forest(_) => "forest",
            TabularConfig::Mlp(_) => "mlp",
        }
    }

    pub fn parse(name: &str, seed: u64) -> Result<TabularConfig> {
        match name {
            "logistic" => Ok(TabularConfig::Logistic {
                lambda_grid: alloc::vec![0.001, 0.01, 0.1],
            }),
            "forest" => Ok(TabularConfig::Forest(ForestConfig { seed, ..ForestConfig::default() })),
            "mlp" => Ok(TabularConfig::Mlp(MlpConfig { seed, ..MlpConfig::default() })),
            other => Err(Error::Config(format!(
                "unknown tabular model `{other}`; valid: logistic, forest, mlp"
            ))),
        }
    }
}

/// A fitted tabular baseline behind one prediction interface.
#[derive(Debug, Clone)]
pub enum TabularModel {
    Logistic(LogisticModel),
    Forest(RandomForest),
    Mlp(Mlp),
}

impl TabularModel {
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        match self {
            TabularModel::Logistic(m) => m.predict_proba(x),
            TabularModel::Forest(m) => m.predict_proba(x),
            TabularModel::Mlp(m) => m.predict_proba(x),
        }
    }

    pub fn warning(&self) -> Option<&String> {
        match self {
            TabularModel::Forest(m) => m.warning.as_ref(),
            _ => None,
        }
    }
}

/// Fit the configured baseline. For logistic configs with a multi-entry
/// grid, the caller is expected to have already narrowed the grid; this
/// fits the first entry.
pub fn fit_tabular(x: &Matrix, y: &[bool], cfg: &TabularConfig) -> Result<TabularModel> {
    match cfg {
        TabularConfig::Logistic { lambda_grid } => {
            let lambda = *lambda_grid
                .first()
                .ok_or_else(|| Error::Config("empty lambda grid".into()))?;
            Ok(TabularModel::Logistic(fit_logistic_l2(x, y, lambda)?))
        }
        TabularConfig::Forest(fc) => Ok(TabularModel::Forest(fit_random_forest(x, y, fc)?)),
        TabularConfig::Mlp(mc) => Ok(TabularModel::Mlp(fit_mlp(x, y, mc)?)),
    }
}
