//! Cohort directory layout:
//!
//! ```text
//! <dir>/manifest        # JSON: format version, config echo, patient index
//! <dir>/schema.txt      # clinical schema
//! <dir>/clinical.csv    # one row per patient, one column per variable
//! <dir>/labels.csv      # label + intermediates + planted blob geometry
//! <dir>/slides/<id>.ppm # one raster per slide
//! ```
//!
//! Reading back a written cohort reproduces it exactly.

use std::path::{Path, PathBuf};

use crcrisk_core::clinical::{CellValue, ClinicalRecord, VarKind};
use crcrisk_core::cohort::{Blob, Cohort, IntermediateTargets, PatientRecord, Slide};
use crcrisk_core::synth::SynthConfig;

use crate::error::{read_artifact_string, CliError, Result};
use crate::{ppm, schema_io};

pub const FORMAT_VERSION: u32 = 1;

fn manifest_json(cohort: &Cohort, config: Option<&SynthConfig>) -> serde_json::Value {
    let patients: Vec<serde_json::Value> = cohort
        .patients
        .iter()
        .map(|p| {
            serde_json::json!({
                "id": p.id,
                "slides": p.slides.iter().map(|s| format!("slides/{}.ppm", s.id)).collect::<Vec<_>>(),
            })
        })
        .collect();
    let config = config.map(|c| {
        serde_json::json!({
            "n_patients": c.n_patients,
            "slide_px": [c.slide_px.0, c.slide_px.1],
            "patch_px": c.patch_px,
            "prevalence": c.prevalence,
            "image_signal": c.image_signal,
            "clinical_signal": c.clinical_signal,
            "noise_sd": c.noise_sd,
            "seed": c.seed,
        })
    });
    serde_json::json!({
        "format": "crcrisk-cohort",
        "version": FORMAT_VERSION,
        "config": config,
        "schema_file": "schema.txt",
        "clinical_file": "clinical.csv",
        "labels_file": "labels.csv",
        "patients": patients,
    })
}

fn blobs_field(slides: &[Slide]) -> String {
    let mut parts = Vec::new();
    for (si, slide) in slides.iter().enumerate() {
        for b in &slide.blobs {
            parts.push(format!("{si}:{}:{}:{}:{}", b.cx, b.cy, b.rx, b.ry));
        }
    }
    parts.join(";")
}

fn parse_blobs(field: &str, n_slides: usize) -> Result<Vec<Vec<Blob>>> {
    let mut out = vec![Vec::new(); n_slides];
    if field.is_empty() {
        return Ok(out);
    }
    for part in field.split(';') {
        let nums: Vec<&str> = part.split(':').collect();
        let bad = || CliError::Format(format!("labels.csv: bad blob entry `{part}`"));
        if nums.len() != 5 {
            return Err(bad());
        }
        let si: usize = nums[0].parse().map_err(|_| bad())?;
        if si >= n_slides {
            return Err(bad());
        }
        let mut vals = [0.0_f64; 4];
        for (v, s) in vals.iter_mut().zip(&nums[1..]) {
            *v = s.parse().map_err(|_| bad())?;
        }
        out[si].push(Blob { cx: vals[0], cy: vals[1], rx: vals[2], ry: vals[3] });
    }
    Ok(out)
}

/// Write a cohort directory; `config` is echoed into the manifest when the
/// cohort came from the generator.
pub fn write_cohort(cohort: &Cohort, dir: &Path, config: Option<&SynthConfig>) -> Result<()> {
    std::fs::create_dir_all(dir.join("slides"))?;
    let manifest = serde_json::to_string_pretty(&manifest_json(cohort, config))
        .expect("manifest serializes");
    std::fs::write(dir.join("manifest"), manifest)?;
    schema_io::write(&dir.join("schema.txt"), &cohort.schema)?;

    // Clinical CSV: one column per schema variable.
    let mut w = csv::Writer::from_path(dir.join("clinical.csv"))?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(cohort.schema.vars().iter().map(|v| v.name.clone()));
    w.write_record(&header)?;
    for p in &cohort.patients {
        let mut row = vec![p.id.clone()];
        for (cell, var) in p.clinical.cells.iter().zip(cohort.schema.vars()) {
            row.push(match (cell, &var.kind) {
                (CellValue::Missing, _) => String::new(),
                (CellValue::Num(x), _) => format!("{x}"),
                (CellValue::Level(l), VarKind::Categorical { levels }) => levels
                    .get(*l)
                    .cloned()
                    .ok_or_else(|| CliError::Format(format!("level {l} out of range")))?,
                (CellValue::Level(_), VarKind::Continuous) => {
                    return Err(CliError::Format("level stored in continuous cell".into()))
                }
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    // Labels + intermediates + planted blob geometry.
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record([
        "patient_id",
        "label",
        "largest_adenoma_size",
        "n_adenomas",
        "largest_serrated_size",
        "n_serrated",
        "most_advanced_serrated",
        "most_advanced_adenoma",
        "blobs",
    ])?;
    for p in &cohort.patients {
        let t = &p.intermediates;
        w.write_record([
            p.id.clone(),
            (p.label as u8).to_string(),
            t.largest_adenoma_size.to_string(),
            t.n_adenomas.to_string(),
            t.largest_serrated_size.to_string(),
            t.n_serrated.to_string(),
            t.most_advanced_serrated.to_string(),
            t.most_advanced_adenoma.to_string(),
            blobs_field(&p.slides),
        ])?;
    }
    w.flush()?;

    for p in &cohort.patients {
        for s in &p.slides {
            ppm::write(&dir.join("slides").join(format!("{}.ppm", s.id)), &s.image)?;
        }
    }
    Ok(())
}

/// Read a cohort directory back; any malformed file is a format error.
pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let manifest_text = read_artifact_string(&dir.join("manifest"))?;
    let manifest: serde_json::Value = serde_json::from_str(&manifest_text)
        .map_err(|e| CliError::Format(format!("manifest: {e}")))?;
    if manifest["format"] != "crcrisk-cohort" {
        return Err(CliError::Format("manifest: not a crcrisk cohort".into()));
    }
    let version = manifest["version"]
        .as_u64()
        .ok_or_else(|| CliError::Format("manifest: missing version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CliError::Format(format!(
            "manifest: format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let schema = schema_io::read(&dir.join("schema.txt"))?;
    let index = manifest["patients"]
        .as_array()
        .ok_or_else(|| CliError::Format("manifest: missing patient index".into()))?;

    // Clinical rows by patient id.
    let mut clinical_rows: std::collections::BTreeMap<String, ClinicalRecord> =
        std::collections::BTreeMap::new();
    let mut rdr = csv::Reader::from_path(dir.join("clinical.csv"))
        .map_err(|e| CliError::Format(format!("clinical.csv: {e}")))?;
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::Format(format!("clinical.csv: {e}")))?;
        if record.len() != schema.len() + 1 {
            return Err(CliError::Format(format!(
                "clinical.csv: row has {} fields, expected {}",
                record.len(),
                schema.len() + 1
            )));
        }
        let mut cells = Vec::with_capacity(schema.len());
        for (i, var) in schema.vars().iter().enumerate() {
            let field = &record[i + 1];
            let cell = if field.is_empty() {
                CellValue::Missing
            } else {
                match &var.kind {
                    VarKind::Continuous => CellValue::Num(field.parse().map_err(|_| {
                        CliError::Format(format!("clinical.csv: bad number `{field}`"))
                    })?),
                    VarKind::Categorical { levels } => CellValue::Level(
                        levels.iter().position(|l| l == field).ok_or_else(|| {
                            CliError::Format(format!(
                                "clinical.csv: unknown level `{field}` for `{}`",
                                var.name
                            ))
                        })?,
                    ),
                }
            };
            cells.push(cell);
        }
        clinical_rows.insert(record[0].to_string(), ClinicalRecord { cells });
    }

    // Labels/intermediates rows by patient id.
    struct LabelRow {
        label: bool,
        intermediates: IntermediateTargets,
        blobs: String,
    }
    let mut label_rows: std::collections::BTreeMap<String, LabelRow> =
        std::collections::BTreeMap::new();
    let mut rdr = csv::Reader::from_path(dir.join("labels.csv"))
        .map_err(|e| CliError::Format(format!("labels.csv: {e}")))?;
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::Format(format!("labels.csv: {e}")))?;
        if record.len() != 9 {
            return Err(CliError::Format(format!(
                "labels.csv: row has {} fields, expected 9",
                record.len()
            )));
        }
        let bad = |f: &str| CliError::Format(format!("labels.csv: bad field `{f}`"));
        let parse_u8 = |s: &str| -> Result<u8> { s.parse().map_err(|_| bad(s)) };
        let parse_u32 = |s: &str| -> Result<u32> { s.parse().map_err(|_| bad(s)) };
        let label = match &record[1] {
            "0" => false,
            "1" => true,
            other => return Err(bad(other)),
        };
        let intermediates = IntermediateTargets {
            largest_adenoma_size: parse_u8(&record[2])?,
            n_adenomas: parse_u32(&record[3])?,
            largest_serrated_size: parse_u8(&record[4])?,
            n_serrated: parse_u32(&record[5])?,
            most_advanced_serrated: parse_u8(&record[6])?,
            most_advanced_adenoma: parse_u8(&record[7])?,
        };
        label_rows.insert(
            record[0].to_string(),
            LabelRow { label, intermediates, blobs: record[8].to_string() },
        );
    }

    let mut patients = Vec::with_capacity(index.len());
    for entry in index {
        let id = entry["id"]
            .as_str()
            .ok_or_else(|| CliError::Format("manifest: patient without id".into()))?
            .to_string();
        let slide_paths = entry["slides"]
            .as_array()
            .ok_or_else(|| CliError::Format("manifest: patient without slides".into()))?;
        let label_row = label_rows
            .get(&id)
            .ok_or_else(|| CliError::Format(format!("labels.csv: no row for {id}")))?;
        let clinical = clinical_rows
            .get(&id)
            .ok_or_else(|| CliError::Format(format!("clinical.csv: no row for {id}")))?
            .clone();
        let blobs = parse_blobs(&label_row.blobs, slide_paths.len())?;
        let mut slides = Vec::with_capacity(slide_paths.len());
        for (si, sp) in slide_paths.iter().enumerate() {
            let rel = sp
                .as_str()
                .ok_or_else(|| CliError::Format("manifest: bad slide path".into()))?;
            let path: PathBuf = dir.join(rel);
            let image = ppm::read(&path)?;
            let slide_id = Path::new(rel)
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CliError::Format(format!("manifest: bad slide path `{rel}`")))?
                .to_string();
            slides.push(Slide { id: slide_id, image, blobs: blobs[si].clone() });
        }
        patients.push(PatientRecord {
            id,
            slides,
            clinical,
            intermediates: label_row.intermediates,
            label: label_row.label,
        });
    }
    Ok(Cohort { schema, patients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crcrisk_core::synth::{generate_cohort, SynthConfig};

    fn small_cfg() -> SynthConfig {
        SynthConfig { n_patients: 6, slide_px: (32, 32), patch_px: 8, seed: 5, ..Default::default() }
    }

    #[test]
    fn roundtrip_is_exact() {
        let cfg = small_cfg();
        let cohort = generate_cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&cohort, dir.path(), Some(&cfg)).unwrap();
        let back = read_cohort(dir.path()).unwrap();
        assert_eq!(back, cohort);
    }

    #[test]
    fn empty_cohort_roundtrips() {
        let cohort = Cohort { schema: crcrisk_core::clinical::paper_schema(), patients: vec![] };
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&cohort, dir.path(), None).unwrap();
        let back = read_cohort(dir.path()).unwrap();
        assert_eq!(back, cohort);
    }

    #[test]
    fn corrupted_manifest_is_a_format_error() {
        let cfg = small_cfg();
        let cohort = generate_cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&cohort, dir.path(), Some(&cfg)).unwrap();
        std::fs::write(dir.path().join("manifest"), b"{not json").unwrap();
        match read_cohort(dir.path()) {
            Err(CliError::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
        // Wrong version is also a format error.
        std::fs::write(
            dir.path().join("manifest"),
            serde_json::json!({"format": "crcrisk-cohort", "version": 99, "patients": []})
                .to_string(),
        )
        .unwrap();
        assert!(matches!(read_cohort(dir.path()), Err(CliError::Format(_))));
    }

    #[test]
    fn missing_directory_is_a_missing_artifact() {
        assert!(matches!(
            read_cohort(Path::new("/nonexistent/cohort")),
            Err(CliError::Missing(_))
        ));
    }

    #[test]
    fn writes_are_byte_deterministic() {
        let cfg = small_cfg();
        let cohort = generate_cohort(&cfg).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_cohort(&cohort, d1.path(), Some(&cfg)).unwrap();
        write_cohort(&cohort, d2.path(), Some(&cfg)).unwrap();
        for name in ["manifest", "schema.txt", "clinical.csv", "labels.csv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
}
