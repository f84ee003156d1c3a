use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::schema::Attribute;
use crate::error::io_err;
use crate::Result;

/// Patch counts per (class, attribute value).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageMatrix {
    pub attribute: Attribute,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl CoverageMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn cells(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn nonzero_cells(&self) -> usize {
        self.counts.iter().flatten().filter(|c| **c > 0).count()
    }

    pub fn get(&self, class: &str, value: &str) -> Option<u64> {
        let r = self.rows.iter().position(|v| v == class)?;
        let c = self.cols.iter().position(|v| v == value)?;
        Some(self.counts[r][c])
    }

    /// Tab-separated table with a header of attribute values.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
        let mut out = format!("class\\{}", self.attribute);
        for c in &self.cols {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.rows.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        f.write_all(out.as_bytes()).map_err(io_err(path))?;
        f.flush().map_err(io_err(path))
    }
}

/// Count records per (class, value of `attribute`).
///
/// Rows and columns follow the manifest's vocabulary order.
pub fn coverage_matrix(manifest: &DatasetManifest, attribute: &str) -> Result<CoverageMatrix> {
    let attribute: Attribute = attribute.parse()?;
    let schema = manifest.schema();
    let rows = schema.class.clone();
    let cols = schema.vocab(attribute).clone();
    let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
    for r in manifest.records() {
        let ri = rows.id_of(&r.class_label).expect("class in schema");
        let ci = cols.id_of(&r.value(attribute)).expect("value in schema");
        counts[ri][ci] += 1;
    }
    Ok(CoverageMatrix { attribute, rows: rows.values().to_vec(), cols: cols.values().to_vec(), counts })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub patients: usize,
    pub patches: usize,
    pub synthetic_patches: usize,
    pub per_class: BTreeMap<String, usize>,
    pub cardinalities: BTreeMap<String, usize>,
}

impl DatasetStats {
    pub fn render(&self) -> String {
        let mut s = format!(
            "patients\t{}\npatches\t{}\nsynthetic\t{}\n",
            self.patients, self.patches, self.synthetic_patches
        );
        for (k, v) in &self.cardinalities {
            s.push_str(&format!("cardinality[{k}]\t{v}\n"));
        }
        for (k, v) in &self.per_class {
            s.push_str(&format!("class[{k}]\t{v}\n"));
        }
        s
    }
}

pub fn summarize(manifest: &DatasetManifest) -> DatasetStats {
    let patients: BTreeSet<&str> = manifest.records().iter().map(|r| r.patient_id.as_str()).collect();
    let mut per_class = BTreeMap::new();
    for r in manifest.records() {
        *per_class.entry(r.class_label.clone()).or_insert(0) += 1;
    }
    let schema = manifest.schema();
    let mut cardinalities = BTreeMap::new();
    cardinalities.insert(Attribute::Class.to_string(), schema.class.len());
    for (a, v) in &schema.attributes {
        cardinalities.insert(a.to_string(), v.len());
    }
    DatasetStats {
        patients: patients.len(),
        patches: manifest.len(),
        synthetic_patches: manifest.records().iter().filter(|r| r.synthetic).count(),
        per_class,
        cardinalities,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{PatchRecord, UNKNOWN};
    use crate::Error;

    pub(crate) fn rec(id: &str, patient: &str, class: &str, site: &str) -> PatchRecord {
        PatchRecord {
            patch_id: id.into(),
            image_ref: format!("{id}.png").into(),
            patient_id: patient.into(),
            class_label: class.into(),
            site: site.into(),
            race: UNKNOWN.into(),
            gender: UNKNOWN.into(),
            age: None,
            synthetic: false,
        }
    }

    #[test]
    fn toy_coverage_by_hand() {
        let m = DatasetManifest::from_records(
            vec![rec("a", "p", "A", "s1"), rec("b", "p", "A", "s1"), rec("c", "q", "A", "s2"), rec("d", "r", "B", "s2")],
            "",
        )
        .unwrap();
        let cov = coverage_matrix(&m, "site").unwrap();
        assert_eq!(cov.counts, vec![vec![2, 1], vec![0, 1]]);
        assert_eq!(cov.total(), 4);
        assert!(matches!(coverage_matrix(&m, "scanner"), Err(Error::UnknownAttribute(_))));
    }

    #[test]
    fn degenerate_single_cell() {
        let recs = (0..7).map(|i| rec(&format!("x{i}"), "p", "A", "s")).collect();
        let m = DatasetManifest::from_records(recs, "").unwrap();
        let cov = coverage_matrix(&m, "site").unwrap();
        assert_eq!(cov.nonzero_cells(), 1);
        assert_eq!(cov.counts[0][0], 7);
    }

    #[test]
    fn summarize_counts() {
        let mut recs = Vec::new();
        for p in 0..3 {
            for j in 0..2 {
                recs.push(rec(&format!("{p}-{j}"), &format!("pt{p}"), if p == 0 { "A" } else { "B" }, "s"));
            }
        }
        let s = summarize(&DatasetManifest::from_records(recs, "").unwrap());
        assert_eq!((s.patients, s.patches), (3, 6));
        assert_eq!(s.per_class.values().sum::<usize>(), 6);
        let e = summarize(&DatasetManifest::empty());
        assert_eq!((e.patients, e.patches, e.synthetic_patches), (0, 0, 0));
        assert!(e.per_class.is_empty());
        assert!(e.cardinalities.values().all(|v| *v == 0));
    }
}
