use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schema::{Attribute, MetadataSchema, Vocabulary, UNKNOWN};
use crate::error::io_err;
use crate::{Error, Result};

/// Header of a manifest file, in the order it is written.
pub const MANIFEST_COLUMNS: [&str; 9] =
    ["patch_id", "image_ref", "patient_id", "class", "site", "race", "gender", "age", "synthetic"];

const REQUIRED_COLUMNS: [&str; 8] = ["patch_id", "image_ref", "patient_id", "class", "site", "race", "gender", "age"];

/// One image patch and its metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    /// Image path, relative to the manifest's directory unless absolute.
    pub image_ref: PathBuf,
    pub patient_id: String,
    pub class_label: String,
    pub site: String,
    pub race: String,
    pub gender: String,
    pub age: Option<u32>,
    #[serde(default)]
    pub synthetic: bool,
}

impl PatchRecord {
    pub fn value(&self, attr: Attribute) -> Cow<'_, str> {
        match attr {
            Attribute::Class => Cow::Borrowed(&self.class_label),
            Attribute::Site => Cow::Borrowed(&self.site),
            Attribute::Race => Cow::Borrowed(&self.race),
            Attribute::Gender => Cow::Borrowed(&self.gender),
            Attribute::AgeBucket => match self.age {
                Some(a) => Cow::Owned(format!("{}-{}", a / 10 * 10, a / 10 * 10 + 9)),
                None => Cow::Borrowed(UNKNOWN),
            },
        }
    }
}

/// Records plus the vocabularies observed in them. Read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<PatchRecord>,
    schema: MetadataSchema,
    base_dir: PathBuf,
}

impl DatasetManifest {
    /// Validate records and derive the schema from the observed values.
    pub fn from_records(records: Vec<PatchRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if let Some(first) = seen.insert(&r.patch_id, i) {
                return Err(Error::DuplicatePatchId {
                    path: PathBuf::from("<records>"),
                    line: i as u64 + 2,
                    first_line: first as u64 + 2,
                    patch_id: r.patch_id.clone(),
                });
            }
            if r.class_label.is_empty() || r.site.is_empty() || r.patch_id.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "record {i}: patch_id, class and site must be non-empty"
                )));
            }
        }
        let schema = build_schema(&records);
        Ok(Self { records, schema, base_dir: base_dir.into() })
    }

    pub fn empty() -> Self {
        Self { records: Vec::new(), schema: build_schema(&[]), base_dir: PathBuf::new() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let column = |name: &str| headers.iter().position(|h| h.trim() == name);
        let mut idx = BTreeMap::new();
        for name in REQUIRED_COLUMNS {
            let i = column(name).ok_or_else(|| Error::MissingColumn { path: path.to_path_buf(), column: name.to_string() })?;
            idx.insert(name, i);
        }
        let synthetic_col = column("synthetic");

        let mut records = Vec::new();
        let mut first_line: HashMap<String, u64> = HashMap::new();
        for row in reader.records() {
            let row = row.map_err(|e| csv_error(path, e))?;
            let line = row.position().map_or(0, |p| p.line());
            let row_err = |message: String| Error::ManifestRow { path: path.to_path_buf(), line, message };
            let field = |name: &str| row.get(idx[name]).unwrap_or("").trim();
            let required = |name: &str| {
                let v = field(name);
                if v.is_empty() {
                    Err(row_err(format!("empty required field `{name}`")))
                } else {
                    Ok(v.to_string())
                }
            };
            let optional = |name: &str| {
                let v = field(name);
                if v.is_empty() { UNKNOWN.to_string() } else { v.to_string() }
            };
            let patch_id = required("patch_id")?;
            let age = match field("age") {
                "" | UNKNOWN => None,
                v => Some(v.parse::<u32>().map_err(|_| row_err(format!("age `{v}` is not a non-negative integer")))?),
            };
            let synthetic = match synthetic_col.map(|i| row.get(i).unwrap_or("").trim()) {
                None | Some("") | Some("false") | Some("0") => false,
                Some("true") | Some("1") => true,
                Some(v) => return Err(row_err(format!("synthetic flag `{v}` is not a boolean"))),
            };
            if let Some(&first) = first_line.get(&patch_id) {
                return Err(Error::DuplicatePatchId { path: path.to_path_buf(), line, first_line: first, patch_id });
            }
            first_line.insert(patch_id.clone(), line);
            records.push(PatchRecord {
                patch_id,
                image_ref: PathBuf::from(required("image_ref")?),
                patient_id: optional("patient_id"),
                class_label: required("class")?,
                site: required("site")?,
                race: optional("race"),
                gender: optional("gender"),
                age,
                synthetic,
            });
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let schema = build_schema(&records);
        Ok(Self { records, schema, base_dir })
    }

    /// Write as a tab-separated table. Image paths are written relative to
    /// the destination directory when they live below it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
        }
        let out_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(MANIFEST_COLUMNS).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            let image = self.resolve_image(r);
            let rel = relative_to(&image, &out_dir);
            let age = r.age.map(|a| a.to_string()).unwrap_or_default();
            w.write_record([
                r.patch_id.as_str(),
                &rel.to_string_lossy(),
                &r.patient_id,
                &r.class_label,
                &r.site,
                &r.race,
                &r.gender,
                &age,
                if r.synthetic { "true" } else { "false" },
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn schema(&self) -> &MetadataSchema {
        &self.schema
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve_image(&self, record: &PatchRecord) -> PathBuf {
        if record.image_ref.is_absolute() {
            record.image_ref.clone()
        } else {
            self.base_dir.join(&record.image_ref)
        }
    }

    /// Sub-manifest of matching records; the schema is rebuilt from them.
    pub fn filter(&self, mut keep: impl FnMut(&PatchRecord) -> bool) -> Self {
        let records: Vec<PatchRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let schema = build_schema(&records);
        Self { records, schema, base_dir: self.base_dir.clone() }
    }

    /// Records of `self` followed by those of `other`, image paths made absolute.
    pub fn concat(&self, other: &DatasetManifest) -> Result<Self> {
        let absolutize = |m: &DatasetManifest| -> Vec<PatchRecord> {
            m.records
                .iter()
                .map(|r| PatchRecord { image_ref: m.resolve_image(r), ..r.clone() })
                .collect()
        };
        let mut records = absolutize(self);
        records.extend(absolutize(other));
        Self::from_records(records, PathBuf::new())
    }

    /// Rename values of one metadata attribute (for example site codes to
    /// centers). Values absent from `mapping` are kept.
    pub fn remap(&self, attr: Attribute, mapping: &BTreeMap<String, String>) -> Result<Self> {
        fn field(r: &mut PatchRecord, attr: Attribute) -> Result<&mut String> {
            match attr {
                Attribute::Class => Ok(&mut r.class_label),
                Attribute::Site => Ok(&mut r.site),
                Attribute::Race => Ok(&mut r.race),
                Attribute::Gender => Ok(&mut r.gender),
                Attribute::AgeBucket => Err(Error::InvalidArgument("age buckets are derived and cannot be remapped".into())),
            }
        }
        let mut records = self.records.clone();
        for r in &mut records {
            let f = field(r, attr)?;
            if let Some(new) = mapping.get(f.as_str()) {
                *f = new.clone();
            }
        }
        let schema = build_schema(&records);
        Ok(Self { records, schema, base_dir: self.base_dir.clone() })
    }
}

fn build_schema(records: &[PatchRecord]) -> MetadataSchema {
    let class = Vocabulary::from_values(records.iter().map(|r| r.class_label.as_str()));
    let attributes = Attribute::METADATA
        .iter()
        .map(|&a| (a, Vocabulary::from_values(records.iter().map(|r| r.value(a)))))
        .collect();
    MetadataSchema { class, attributes }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        kind => Error::ManifestRow { path: path.to_path_buf(), line, message: format!("{kind:?}") },
    }
}

fn relative_to(path: &Path, dir: &Path) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (path, dir) = (abs(path), abs(dir));
    match path.strip_prefix(&dir) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => path,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    const HEADER: &str = "patch_id\timage_ref\tpatient_id\tclass\tsite\trace\tgender\tage\n";

    #[test]
    fn six_rows_two_classes_two_sites() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = HEADER.to_string();
        for i in 0..6 {
            let class = if i < 3 { "A" } else { "B" };
            let site = if i % 2 == 0 { "s1" } else { "s2" };
            body.push_str(&format!("p{i}\timg/{i}.png\tpt{}\t{class}\t{site}\twhite\tfemale\t{}\n", i / 2, 40 + i));
        }
        let m = DatasetManifest::load(write_file(dir.path(), "m.tsv", &body)).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.schema().cardinality(Attribute::Class), 2);
        assert_eq!(m.schema().cardinality(Attribute::Site), 2);
        assert_eq!(m.resolve_image(&m.records()[0]), dir.path().join("img/0.png"));
    }

    #[test]
    fn empty_optional_fields_become_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}p0\ta.png\tpt0\tA\ts1\t\t\t\n");
        let m = DatasetManifest::load(write_file(dir.path(), "m.tsv", &body)).unwrap();
        let r = &m.records()[0];
        assert_eq!(r.race, UNKNOWN);
        assert_eq!(r.gender, UNKNOWN);
        assert_eq!(r.age, None);
        assert_eq!(r.value(Attribute::AgeBucket), UNKNOWN);
        assert!(m.schema().vocab(Attribute::Race).has_unknown());
    }

    #[test]
    fn errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let dup = format!("{HEADER}p0\ta.png\tpt0\tA\ts1\tw\tf\t1\np0\tb.png\tpt0\tA\ts1\tw\tf\t1\n");
        let err = DatasetManifest::load(write_file(dir.path(), "dup.tsv", &dup)).unwrap_err();
        assert!(matches!(err, Error::DuplicatePatchId { line: 3, first_line: 2, .. }), "{err}");

        let short = format!("{HEADER}p0\ta.png\tpt0\tA\ts1\tw\tf\t1\np1\tb.png\tpt0\n");
        let err = DatasetManifest::load(write_file(dir.path(), "short.tsv", &short)).unwrap_err();
        assert!(matches!(err, Error::ManifestRow { line: 3, .. }), "{err}");

        let no_class = format!("{HEADER}p0\ta.png\tpt0\t\ts1\tw\tf\t1\n");
        let err = DatasetManifest::load(write_file(dir.path(), "nc.tsv", &no_class)).unwrap_err();
        assert!(matches!(err, Error::ManifestRow { line: 2, .. }), "{err}");

        let bad_age = format!("{HEADER}p0\ta.png\tpt0\tA\ts1\tw\tf\tforty\n");
        let err = DatasetManifest::load(write_file(dir.path(), "age.tsv", &bad_age)).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");

        let missing = "patch_id\timage_ref\tclass\tsite\nx\ty\tA\ts\n";
        let err = DatasetManifest::load(write_file(dir.path(), "miss.tsv", missing)).unwrap_err();
        assert!(matches!(err, Error::MissingColumn { ref column, .. } if column == "patient_id"), "{err}");
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}p0\timg/a.png\tpt0\tA\ts1\tw\tf\t33\np1\timg/b.png\tpt1\tB\ts2\t\tm\t\n");
        let m = DatasetManifest::load(write_file(dir.path(), "m.tsv", &body)).unwrap();
        let out = dir.path().join("copy.tsv");
        m.write(&out).unwrap();
        let again = DatasetManifest::load(&out).unwrap();
        assert_eq!(m.records(), again.records());
        assert_eq!(m.schema(), again.schema());
    }

    #[test]
    fn age_buckets_by_decade() {
        let r = PatchRecord {
            patch_id: "p".into(),
            image_ref: "x".into(),
            patient_id: "q".into(),
            class_label: "A".into(),
            site: "s".into(),
            race: UNKNOWN.into(),
            gender: UNKNOWN.into(),
            age: Some(47),
            synthetic: false,
        };
        assert_eq!(r.value(Attribute::AgeBucket), "40-49");
    }
}
