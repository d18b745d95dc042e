use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{BiomarkerSpec, Cohort, Diagnosis, MeasurementRecord};
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 6] = ["subject_id", "visit_date", "age", "diagnosis", "cohort_tag", "icv"];

#[derive(Clone, Copy, Debug)]
pub struct ParseOptions {
    /// Collapse label synonyms (SMC, EMCI, LMCI, Dementia, ...) onto CN/MCI/AD.
    pub merge_labels: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { merge_labels: true }
    }
}

pub fn parse_cohort_csv(path: impl AsRef<Path>, specs: &[BiomarkerSpec], opts: ParseOptions) -> Result<Cohort> {
    read_cohort_csv(File::open(path)?, specs, opts)
}

/// Reads the wide per-visit layout: one row per subject visit, one column per biomarker.
pub fn read_cohort_csv<R: Read>(reader: R, specs: &[BiomarkerSpec], opts: ParseOptions) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < FIXED_COLUMNS.len() || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::Schema(format!(
            "header must start with `{}`, found `{}`",
            FIXED_COLUMNS.join(","),
            cols.join(",")
        )));
    }
    let biomarkers: Vec<String> = cols[FIXED_COLUMNS.len()..].iter().map(|s| s.to_string()).collect();
    for b in &biomarkers {
        if !specs.iter().any(|s| &s.name == b) {
            return Err(Error::Schema(format!("biomarker column `{b}` has no spec")));
        }
    }

    let mut visit_counter: BTreeMap<String, u32> = BTreeMap::new();
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let perr = |message: String| Error::Parse { line, message };

        let subject_id = row[0].trim().to_string();
        if subject_id.is_empty() {
            return Err(perr("empty subject_id".into()));
        }
        let visit_index = {
            let c = visit_counter.entry(subject_id.clone()).or_insert(0);
            *c += 1;
            *c - 1
        };
        let visit_date = match row[1].trim() {
            "" => None,
            s => Some(
                NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .map_err(|e| perr(format!("visit_date `{s}`: {e}")))?,
            ),
        };
        // A visit without age cannot be placed on the disease axis.
        let age = match row[2].trim() {
            "" => continue,
            s => s.parse::<f64>().map_err(|e| perr(format!("age `{s}`: {e}")))?,
        };
        if !age.is_finite() || age <= 0.0 {
            return Err(perr(format!("age must be positive and finite, got {age}")));
        }
        let diagnosis = Diagnosis::from_label(&row[3], opts.merge_labels);
        let cohort_tag = row[4].trim().to_string();
        let icv = match row[5].trim() {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| perr(format!("icv `{s}`: {e}")))?),
        };
        for (k, name) in biomarkers.iter().enumerate() {
            let cell = row[FIXED_COLUMNS.len() + k].trim();
            if cell.is_empty() {
                continue;
            }
            let value: f64 = cell
                .parse()
                .map_err(|e| perr(format!("{name} value `{cell}`: {e}")))?;
            if !value.is_finite() {
                return Err(perr(format!("{name} value `{cell}` is not finite")));
            }
            records.push(MeasurementRecord {
                subject_id: subject_id.clone(),
                visit_index,
                age,
                visit_date,
                biomarker: name.clone(),
                value: Some(value),
                diagnosis,
                cohort_tag: cohort_tag.clone(),
                icv,
            });
        }
    }
    Cohort::new(specs.to_vec(), records)
}

/// Writes the cohort in the same wide layout [`read_cohort_csv`] accepts.
/// Rows are ordered by subject id then visit position; missing values are empty cells.
pub fn write_cohort_csv<W: Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names = cohort.biomarker_names();
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(names.iter().cloned());
    w.write_record(&header)?;

    for idx in cohort.by_subject().values() {
        let mut visits: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in idx {
            visits.entry(cohort.records[i].visit_index).or_default().push(i);
        }
        let mut ordered: Vec<Vec<usize>> = visits.into_values().collect();
        ordered.sort_by(|a, b| {
            let (ra, rb) = (&cohort.records[a[0]], &cohort.records[b[0]]);
            ra.age.total_cmp(&rb.age).then(ra.visit_index.cmp(&rb.visit_index))
        });
        for rows in ordered {
            let first = &cohort.records[rows[0]];
            let mut cells = vec![
                first.subject_id.clone(),
                first.visit_date.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default(),
                first.age.to_string(),
                first.diagnosis.label().to_string(),
                first.cohort_tag.clone(),
                rows.iter()
                    .find_map(|&i| cohort.records[i].icv)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            ];
            for name in &names {
                let v = rows
                    .iter()
                    .map(|&i| &cohort.records[i])
                    .find(|r| &r.biomarker == name)
                    .and_then(|r| r.value);
                cells.push(v.map(|x| x.to_string()).unwrap_or_default());
            }
            w.write_record(&cells)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_specs(path: impl AsRef<Path>) -> Result<Vec<BiomarkerSpec>> {
    let specs: Vec<BiomarkerSpec> = serde_json::from_reader(File::open(path)?)?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub fn save_specs(path: impl AsRef<Path>, specs: &[BiomarkerSpec]) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, specs)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ConstraintPolicy, DirectionHint, Modality};

    fn specs() -> Vec<BiomarkerSpec> {
        vec![
            BiomarkerSpec {
                name: "MMSE".into(),
                range: Some([0.0, 30.0]),
                constraint_policy: ConstraintPolicy::FixedRange(0.0, 30.0),
                direction_hint: DirectionHint::DecreasingWithDisease,
                modality: Modality::Cognitive,
            },
            BiomarkerSpec {
                name: "Hippocampus".into(),
                range: None,
                constraint_policy: ConstraintPolicy::Free,
                direction_hint: DirectionHint::DecreasingWithDisease,
                modality: Modality::Imaging,
            },
        ]
    }

    const HEADER: &str = "subject_id,visit_date,age,diagnosis,cohort_tag,icv,MMSE,Hippocampus\n";

    #[test]
    fn single_row() {
        let csv = format!("{HEADER}s1,2010-01-02,71.5,CN,adni,1500000,29,\n");
        let c = read_cohort_csv(csv.as_bytes(), &specs(), ParseOptions::default()).unwrap();
        assert_eq!(c.records.len(), 1);
        let r = &c.records[0];
        assert_eq!(r.diagnosis, Diagnosis::CN);
        assert_eq!(r.value, Some(29.0));
        assert_eq!(r.icv, Some(1.5e6));
        assert_eq!(r.visit_date, NaiveDate::from_ymd_opt(2010, 1, 2));
    }

    #[test]
    fn merge_map_and_visit_indices() {
        let csv = format!("{HEADER}s1,,70,LMCI,t,,28,7000\ns1,,71,AD,t,,20,\n");
        let c = read_cohort_csv(csv.as_bytes(), &specs(), ParseOptions::default()).unwrap();
        assert_eq!(c.records.len(), 3);
        assert!(c.records[..2].iter().all(|r| r.diagnosis == Diagnosis::MCI && r.visit_index == 0));
        assert_eq!(c.records[2].visit_index, 1);

        let strict = read_cohort_csv(csv.as_bytes(), &specs(), ParseOptions { merge_labels: false }).unwrap();
        assert_eq!(strict.records[0].diagnosis, Diagnosis::Missing);
    }

    #[test]
    fn malformed_row_names_line() {
        let csv = format!("{HEADER}s1,,70,CN,t,,28,\ns1,,abc,CN,t,,27,\n");
        match read_cohort_csv(csv.as_bytes(), &specs(), ParseOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_column_is_schema_error() {
        let csv = "subject_id,visit_date,age,diagnosis,cohort_tag,icv,FAQ\ns1,,70,CN,t,,1\n";
        assert!(matches!(
            read_cohort_csv(csv.as_bytes(), &specs(), ParseOptions::default()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn write_then_read() {
        let csv = format!("{HEADER}a,,70.25,CN,t,1400000,29,7001.5\na,,71.25,MCI,t,,27,\nb,,80,AD,u,,,6000\n");
        let c = read_cohort_csv(csv.as_bytes(), &specs(), ParseOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_cohort_csv(&c, &mut buf).unwrap();
        let again = read_cohort_csv(buf.as_slice(), &specs(), ParseOptions::default()).unwrap();
        assert_eq!(c, again);
    }
}
