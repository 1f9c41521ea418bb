//! Clinical variable schema and raw record representation.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Variable group, used to slice the design matrix per experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Category {
    Personal,
    Medical,
    Family,
    Endoscopy,
    Colonoscopy,
    Microscopy,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Personal,
        Category::Medical,
        Category::Family,
        Category::Endoscopy,
        Category::Colonoscopy,
        Category::Microscopy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Personal => "personal",
            Category::Medical => "medical",
            Category::Family => "family",
            Category::Endoscopy => "endoscopy",
            Category::Colonoscopy => "colonoscopy",
            Category::Microscopy => "microscopy",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variable category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    /// One-hot encoded; `levels` are the category labels in encoding order.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarDef {
    pub name: String,
    pub kind: VarKind,
    pub category: Category,
}

impl VarDef {
    pub fn continuous(name: &str, category: Category) -> Self {
        VarDef { name: name.to_owned(), kind: VarKind::Continuous, category }
    }

    pub fn categorical(name: &str, category: Category, levels: &[&str]) -> Self {
        VarDef {
            name: name.to_owned(),
            kind: VarKind::Categorical { levels: levels.iter().map(|&l| l.to_owned()).collect() },
            category,
        }
    }

    /// Number of encoded columns this variable occupies.
    pub fn width(&self) -> usize {
        match &self.kind {
            VarKind::Continuous => 1,
            VarKind::Categorical { levels } => levels.len(),
        }
    }
}

/// Ordered variable list; the encoding layout is the concatenation of each
/// variable's columns in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalSchema {
    vars: Vec<VarDef>,
}

impl ClinicalSchema {
    pub fn new(vars: Vec<VarDef>) -> Result<Self> {
        for (i, v) in vars.iter().enumerate() {
            if vars[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::Config(format!("duplicate variable name `{}`", v.name)));
            }
            if let VarKind::Categorical { levels } = &v.kind {
                if levels.is_empty() {
                    return Err(Error::Config(format!("variable `{}` has no levels", v.name)));
                }
            }
        }
        Ok(ClinicalSchema { vars })
    }

    pub fn vars(&self) -> &[VarDef] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, i: usize) -> &VarDef {
        &self.vars[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    /// Total encoded width: 1 per continuous, |levels| per categorical.
    pub fn encoded_width(&self) -> usize {
        self.vars.iter().map(VarDef::width).sum()
    }

    /// Encoded column range of variable `i`.
    pub fn column_range(&self, i: usize) -> core::ops::Range<usize> {
        let start: usize = self.vars[..i].iter().map(VarDef::width).sum();
        start..start + self.vars[i].width()
    }

    /// Encoded column indices covered by the given categories, in order.
    pub fn columns_for(&self, categories: &[Category]) -> Vec<usize> {
        let mut cols = Vec::new();
        for (i, v) in self.vars.iter().enumerate() {
            if categories.contains(&v.category) {
                cols.extend(self.column_range(i));
            }
        }
        cols
    }
}

/// One raw variable value, pre-encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellValue {
    Missing,
    Num(f64),
    /// Index into the variable's level list.
    Level(usize),
}

/// Raw per-patient tabular variables, aligned with a [`ClinicalSchema`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalRecord {
    pub cells: Vec<CellValue>,
}

impl ClinicalRecord {
    pub fn check_against(&self, schema: &ClinicalSchema) -> Result<()> {
        if self.cells.len() != schema.len() {
            return Err(Error::Shape(format!(
                "record has {} cells, schema has {} variables",
                self.cells.len(),
                schema.len()
            )));
        }
        for (cell, var) in self.cells.iter().zip(schema.vars()) {
            match (cell, &var.kind) {
                (CellValue::Num(_), VarKind::Categorical { .. }) => {
                    return Err(Error::Shape(format!(
                        "variable `{}` is categorical but holds a number",
                        var.name
                    )))
                }
                (CellValue::Level(_), VarKind::Continuous) => {
                    return Err(Error::Shape(format!(
                        "variable `{}` is continuous but holds a level",
                        var.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub const ADENOMA_SIZE_LEVELS: [&str; 5] = ["no adenoma", "<5mm", "5-9mm", "10-20mm", ">20mm"];
pub const SERRATED_SIZE_LEVELS: [&str; 5] =
    ["no serrated polyp", "<5mm", "5-9mm", "10-20mm", ">20mm"];
pub const ADVANCED_ADENOMA_LEVELS: [&str; 4] =
    ["no adenoma", "tubular adenoma", "tubulovillous adenoma", "villous adenoma"];
pub const ADVANCED_SERRATED_LEVELS: [&str; 5] = [
    "no serrated polyp",
    "hyperplastic polyp",
    "ssp without dysplasia",
    "ssp with dysplasia",
    "tsa",
];

/// The registry-style schema used throughout: six variable groups whose
/// one-hot encoding is exactly 69 columns wide.
pub fn paper_schema() -> ClinicalSchema {
    use Category::*;
    ClinicalSchema::new(alloc::vec![
        // Personal history (21 encoded columns).
        VarDef::continuous("age", Personal),
        VarDef::categorical("sex", Personal, &["female", "male"]),
        VarDef::continuous("bmi", Personal),
        VarDef::categorical(
            "exercise",
            Personal,
            &["no exercise", "active daily life", "1-5 times/week", "5+ times/week"],
        ),
        VarDef::categorical("smoker_status", Personal, &["never", "former", "current"]),
        VarDef::continuous("years_smoking", Personal),
        VarDef::categorical(
            "weekly_alcohol",
            Personal,
            &["0/week", "1-4/week", "5-8/week", "9-20/week", "21+/week"],
        ),
        VarDef::categorical("calcium_use", Personal, &["no", "yes"]),
        VarDef::categorical("vitamin_use", Personal, &["no", "yes"]),
        // Medical history (8).
        VarDef::categorical("history_ibd", Medical, &["no", "yes"]),
        VarDef::categorical("genetic_syndrome", Medical, &["no", "yes"]),
        VarDef::categorical("gi_bleeding_eval", Medical, &["no", "yes"]),
        VarDef::categorical("aspirin_use", Medical, &["no", "yes"]),
        // Family history (9).
        VarDef::categorical("family_polyps", Family, &["no", "yes", "unknown"]),
        VarDef::categorical("family_crc_first_degree", Family, &["no", "yes"]),
        VarDef::categorical("family_crc_under_50", Family, &["no", "yes"]),
        VarDef::categorical("family_genetic_syndrome", Family, &["no", "yes"]),
        // Endoscopy history (10).
        VarDef::categorical("prep_quality", Endoscopy, &["excellent", "good", "fair"]),
        VarDef::categorical("prep_nulytely", Endoscopy, &["no", "yes"]),
        VarDef::categorical(
            "time_since_last_colonoscopy",
            Endoscopy,
            &["never", "<1y", "1-4y", "5-10y", ">10y"],
        ),
        // Colonoscopy exam (12).
        VarDef::continuous("n_adenomas", Colonoscopy),
        VarDef::categorical("largest_adenoma_size", Colonoscopy, &ADENOMA_SIZE_LEVELS),
        VarDef::continuous("n_serrated", Colonoscopy),
        VarDef::categorical("largest_serrated_size", Colonoscopy, &SERRATED_SIZE_LEVELS),
        // Microscopy exam (9).
        VarDef::categorical("most_advanced_adenoma", Microscopy, &ADVANCED_ADENOMA_LEVELS),
        VarDef::categorical("most_advanced_serrated", Microscopy, &ADVANCED_SERRATED_LEVELS),
    ])
    .expect("builtin schema is valid")
}
