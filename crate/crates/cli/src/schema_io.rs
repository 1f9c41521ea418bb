//! Clinical schema as a structured text file: one variable per line,
//! tab-separated `name  category  kind  [levels...]`.

use std::path::Path;

use crcrisk_core::clinical::{Category, ClinicalSchema, VarDef, VarKind};

use crate::error::{read_artifact_string, CliError, Result};

pub fn encode(schema: &ClinicalSchema) -> String {
    let mut out = String::new();
    for var in schema.vars() {
        match &var.kind {
            VarKind::Continuous => {
                out.push_str(&format!("{}\t{}\tcontinuous\n", var.name, var.category.name()));
            }
            VarKind::Categorical { levels } => {
                out.push_str(&format!(
                    "{}\t{}\tcategorical\t{}\n",
                    var.name,
                    var.category.name(),
                    levels.join("|")
                ));
            }
        }
    }
    out
}

pub fn decode(text: &str) -> Result<ClinicalSchema> {
    let mut vars = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| CliError::Format(format!("schema line {}: {m}", lineno + 1));
        if fields.len() < 3 {
            return Err(bad("expected name, category, kind"));
        }
        let category = Category::parse(fields[1]).map_err(CliError::Core)?;
        let var = match fields[2] {
            "continuous" => VarDef::continuous(fields[0], category),
            "categorical" => {
                let levels: Vec<&str> =
                    fields.get(3).ok_or_else(|| bad("categorical needs levels"))?.split('|').collect();
                VarDef::categorical(fields[0], category, &levels)
            }
            other => return Err(bad(&format!("unknown kind `{other}`"))),
        };
        vars.push(var);
    }
    ClinicalSchema::new(vars).map_err(CliError::Core)
}

pub fn write(path: &Path, schema: &ClinicalSchema) -> Result<()> {
    std::fs::write(path, encode(schema))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ClinicalSchema> {
    decode(&read_artifact_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crcrisk_core::clinical::paper_schema;

    #[test]
    fn roundtrip_paper_schema() {
        let schema = paper_schema();
        assert_eq!(decode(&encode(&schema)).unwrap(), schema);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(decode("age\tpersonal").is_err());
        assert!(decode("age\tnowhere\tcontinuous").is_err());
        assert!(decode("k\tpersonal\tcategorical").is_err());
    }
}
