//! Generation plans and their execution into synthetic manifests.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{ddim_sample_batch, ConditioningMap, DdimConfig, DenoiserModel, NoiseSchedule};
use crate::error::io_err;
use crate::registry::{Attribute, DatasetManifest, PatchRecord, UNKNOWN};
use crate::seeds::derive_seed;
use crate::{imaging, Error, Result};

/// Default refusal threshold for the size of a Cartesian product.
pub const DEFAULT_PRODUCT_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    FrequencyMatched,
    UniformClass,
    CartesianFill,
}

impl std::str::FromStr for PlanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequency" | "frequency_matched" => Ok(PlanKind::FrequencyMatched),
            "uniform" | "uniform_class" => Ok(PlanKind::UniformClass),
            "cartesian" | "cartesian_fill" => Ok(PlanKind::CartesianFill),
            other => Err(Error::InvalidArgument(format!("unknown plan `{other}` (frequency, uniform, cartesian)"))),
        }
    }
}

/// A class name and one value per conditioned attribute.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CondTuple {
    pub class: String,
    pub meta: Vec<String>,
}

impl CondTuple {
    pub fn new(class: impl Into<String>, meta: Vec<String>) -> Self {
        Self { class: class.into(), meta }
    }

    /// `class` or `class|v1|v2...`, used in seeds and file names.
    pub fn label(&self) -> String {
        std::iter::once(self.class.as_str()).chain(self.meta.iter().map(String::as_str)).collect::<Vec<_>>().join("|")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub tuple: CondTuple,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub kind: PlanKind,
    /// Attributes named by each tuple's `meta`, in order.
    pub attributes: Vec<Attribute>,
    pub entries: Vec<PlanEntry>,
    pub total: usize,
    pub seed: u64,
}

impl SamplingPlan {
    fn new(kind: PlanKind, attributes: Vec<Attribute>, entries: Vec<PlanEntry>, seed: u64) -> Self {
        let total = entries.iter().map(|e| e.count).sum();
        Self { kind, attributes, entries, total, seed }
    }

    pub fn count_of(&self, tuple: &CondTuple) -> usize {
        self.entries.iter().filter(|e| &e.tuple == tuple).map(|e| e.count).sum()
    }

    /// Every tuple must encode under `map` with matching attributes.
    pub fn validate(&self, map: &ConditioningMap) -> Result<()> {
        if self.attributes != map.attribute_list() {
            return Err(Error::Conditioning(format!(
                "plan conditions on {:?} but the model on {:?}",
                self.attributes,
                map.attribute_list()
            )));
        }
        for e in &self.entries {
            let refs: Vec<&str> = e.tuple.meta.iter().map(String::as_str).collect();
            map.encode(&e.tuple.class, &refs)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Split `total` over `n` slots: sizes differ by at most one and the first
/// slots take the remainder.
pub fn even_counts(total: usize, n: usize) -> Vec<usize> {
    let (q, r) = (total / n, total % n);
    (0..n).map(|i| q + usize::from(i < r)).collect()
}

/// One entry per observed (class, attribute values) tuple with its empirical count.
pub fn frequency_matched_plan(train: &DatasetManifest, attributes: &[Attribute], seed: u64) -> Result<SamplingPlan> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot match the frequencies of an empty manifest".into()));
    }
    let mut counts: BTreeMap<(usize, Vec<usize>), usize> = BTreeMap::new();
    let schema = train.schema();
    for r in train.records() {
        let cid = schema.class.id_of(&r.class_label).expect("class in schema");
        let mids = attributes
            .iter()
            .map(|a| schema.vocab(*a).id_of(&r.value(*a)).expect("value in schema"))
            .collect();
        *counts.entry((cid, mids)).or_default() += 1;
    }
    let entries = counts
        .into_iter()
        .map(|((cid, mids), count)| {
            let class = schema.class.value_of(cid).expect("id").to_string();
            let meta = attributes
                .iter()
                .zip(mids)
                .map(|(a, id)| schema.vocab(*a).value_of(id).expect("id").to_string())
                .collect();
            PlanEntry { tuple: CondTuple::new(class, meta), count }
        })
        .collect();
    Ok(SamplingPlan::new(PlanKind::FrequencyMatched, attributes.to_vec(), entries, seed))
}

fn sorted_unique(values: &[String], what: &str) -> Result<Vec<String>> {
    let set: BTreeSet<String> = values.iter().cloned().collect();
    if set.is_empty() {
        return Err(Error::InvalidArgument(format!("no {what} given")));
    }
    Ok(set.into_iter().collect())
}

/// Class-only plan with counts as equal as possible.
pub fn uniform_class_plan(classes: &[String], total: usize, seed: u64) -> Result<SamplingPlan> {
    let classes = sorted_unique(classes, "classes")?;
    if total < classes.len() {
        return Err(Error::InvalidArgument(format!("total {total} is smaller than the {} classes", classes.len())));
    }
    let counts = even_counts(total, classes.len());
    let entries = classes
        .into_iter()
        .zip(counts)
        .map(|(c, count)| PlanEntry { tuple: CondTuple::new(c, Vec::new()), count })
        .collect();
    Ok(SamplingPlan::new(PlanKind::UniformClass, Vec::new(), entries, seed))
}

/// Plan over every (class, site) pair, including pairs absent from real data.
pub fn cartesian_fill_plan(
    classes: &[String],
    sites: &[String],
    total: usize,
    cap: usize,
    seed: u64,
) -> Result<SamplingPlan> {
    let classes = sorted_unique(classes, "classes")?;
    let sites = sorted_unique(sites, "sites")?;
    let n = classes.len().saturating_mul(sites.len());
    if n > cap {
        return Err(Error::CapExceeded { what: "class x site product".into(), count: n as u128, cap: cap as u128 });
    }
    if total < n {
        return Err(Error::InvalidArgument(format!("total {total} is smaller than the {n} class x site pairs")));
    }
    let counts = even_counts(total, n);
    let mut entries = Vec::with_capacity(n);
    for c in &classes {
        for s in &sites {
            entries.push(PlanEntry { tuple: CondTuple::new(c.clone(), vec![s.clone()]), count: counts[entries.len()] });
        }
    }
    Ok(SamplingPlan::new(PlanKind::CartesianFill, vec![Attribute::Site], entries, seed))
}

/// Produces images for conditioning tuples.
pub trait ImageSampler {
    /// `[C, H, W]` of every image.
    fn image_shape(&self) -> [usize; 3];

    /// Attributes the tuples' metadata values refer to.
    fn attributes(&self) -> Vec<Attribute>;

    /// Check that the plan can be executed with this sampler.
    fn check_plan(&self, plan: &SamplingPlan) -> Result<()>;

    /// One image per (tuple, seed), values in [-1, 1].
    fn sample(&self, tuples: &[CondTuple], seeds: &[u64]) -> Result<Vec<Vec<f32>>>;
}

/// DDIM sampling from a trained model.
pub struct DiffusionSampler {
    pub model: DenoiserModel<f32>,
    pub schedule: NoiseSchedule,
    pub map: ConditioningMap,
    pub ddim: DdimConfig,
}

impl ImageSampler for DiffusionSampler {
    fn image_shape(&self) -> [usize; 3] {
        let c = &self.model.config;
        [c.in_channels, c.image_size, c.image_size]
    }

    fn attributes(&self) -> Vec<Attribute> {
        self.map.attribute_list()
    }

    fn check_plan(&self, plan: &SamplingPlan) -> Result<()> {
        plan.validate(&self.map)
    }

    fn sample(&self, tuples: &[CondTuple], seeds: &[u64]) -> Result<Vec<Vec<f32>>> {
        let conds = tuples
            .iter()
            .map(|t| {
                let refs: Vec<&str> = t.meta.iter().map(String::as_str).collect();
                self.map.encode(&t.class, &refs)
            })
            .collect::<Result<Vec<_>>>()?;
        ddim_sample_batch(&self.model, &self.schedule, &conds, seeds, &self.ddim)
    }
}

/// Remembers images by (tuple, seed) so repeated requests skip sampling.
pub struct CachedSampler<S> {
    pub inner: S,
    cache: RefCell<HashMap<(CondTuple, u64), Vec<f32>>>,
    calls: RefCell<usize>,
}

impl<S: ImageSampler> CachedSampler<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, cache: RefCell::new(HashMap::new()), calls: RefCell::new(0) }
    }

    /// Images actually produced by the wrapped sampler.
    pub fn fresh_images(&self) -> usize {
        *self.calls.borrow()
    }
}

impl<S: ImageSampler> ImageSampler for CachedSampler<S> {
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }

    fn attributes(&self) -> Vec<Attribute> {
        self.inner.attributes()
    }

    fn check_plan(&self, plan: &SamplingPlan) -> Result<()> {
        self.inner.check_plan(plan)
    }

    fn sample(&self, tuples: &[CondTuple], seeds: &[u64]) -> Result<Vec<Vec<f32>>> {
        let missing: Vec<usize> = {
            let cache = self.cache.borrow();
            (0..tuples.len()).filter(|&i| !cache.contains_key(&(tuples[i].clone(), seeds[i]))).collect()
        };
        if !missing.is_empty() {
            let ts: Vec<CondTuple> = missing.iter().map(|&i| tuples[i].clone()).collect();
            let ss: Vec<u64> = missing.iter().map(|&i| seeds[i]).collect();
            let imgs = self.inner.sample(&ts, &ss)?;
            *self.calls.borrow_mut() += imgs.len();
            let mut cache = self.cache.borrow_mut();
            for ((t, s), img) in ts.into_iter().zip(ss).zip(imgs) {
                cache.insert((t, s), img);
            }
        }
        let cache = self.cache.borrow();
        Ok(tuples.iter().zip(seeds).map(|(t, s)| cache[&(t.clone(), *s)].clone()).collect())
    }
}

/// Seed of the `index`-th image of `tuple` under a plan seed.
pub fn image_seed(plan_seed: u64, tuple: &CondTuple, index: usize) -> u64 {
    derive_seed(plan_seed, &format!("{}#{index}", tuple.label()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Progress {
    entry: usize,
    index: usize,
    file: String,
    sha256: String,
}

const PROGRESS_FILE: &str = "progress.jsonl";

fn read_progress(path: &Path) -> Result<HashMap<(usize, usize), Progress>> {
    let mut done = HashMap::new();
    let Ok(f) = std::fs::File::open(path) else { return Ok(done) };
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        // A torn final line from an interrupted run is ignored.
        if let Ok(p) = serde_json::from_str::<Progress>(&line) {
            done.insert((p.entry, p.index), p);
        }
    }
    Ok(done)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Render every image of `plan` into `output_dir/images`, named by content
/// hash, and return the synthetic manifest (also written as `synthetic.tsv`
/// next to `plan.json`). Completed images are logged in `progress.jsonl`
/// so an interrupted run resumes where it stopped.
pub fn execute_plan(plan: &SamplingPlan, sampler: &dyn ImageSampler, output_dir: impl AsRef<Path>, batch: usize) -> Result<DatasetManifest> {
    let out = output_dir.as_ref();
    sampler.check_plan(plan)?;
    if sampler.attributes() != plan.attributes {
        return Err(Error::Conditioning("plan and sampler condition on different attributes".into()));
    }
    let [channels, size, _] = sampler.image_shape();
    let image_dir = out.join("images");
    std::fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;
    plan.save(out.join("plan.json"))?;

    let progress_path = out.join(PROGRESS_FILE);
    let done = read_progress(&progress_path)?;
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(&progress_path).map_err(io_err(&progress_path))?;

    let jobs: Vec<(usize, usize)> =
        plan.entries.iter().enumerate().flat_map(|(e, entry)| (0..entry.count).map(move |i| (e, i))).collect();
    let mut files: HashMap<(usize, usize), String> = HashMap::with_capacity(jobs.len());
    let mut todo = Vec::new();
    for &job in &jobs {
        match done.get(&job) {
            Some(p) if std::fs::read(image_dir.join(&p.file)).is_ok_and(|b| sha_hex(&b) == p.sha256) => {
                files.insert(job, p.file.clone());
            }
            _ => todo.push(job),
        }
    }
    for chunk in todo.chunks(batch.max(1)) {
        let tuples: Vec<CondTuple> = chunk.iter().map(|&(e, _)| plan.entries[e].tuple.clone()).collect();
        let seeds: Vec<u64> = chunk.iter().map(|&(e, i)| image_seed(plan.seed, &plan.entries[e].tuple, i)).collect();
        let images = sampler.sample(&tuples, &seeds)?;
        for (&(e, i), img) in chunk.iter().zip(images) {
            let bytes = imaging::encode_png(&img, channels, size)?;
            let digest = sha_hex(&bytes);
            let file = format!("{}.png", &digest[..24]);
            let path = image_dir.join(&file);
            std::fs::write(&path, &bytes).map_err(io_err(&path))?;
            let line = serde_json::to_string(&Progress { entry: e, index: i, file: file.clone(), sha256: digest })?;
            writeln!(log, "{line}").map_err(io_err(&progress_path))?;
            files.insert((e, i), file);
        }
        log.flush().map_err(io_err(&progress_path))?;
    }

    let mut records = Vec::with_capacity(jobs.len());
    for (e, i) in jobs {
        let t = &plan.entries[e].tuple;
        let meta = |attr: Attribute| {
            plan.attributes.iter().position(|a| *a == attr).map_or(UNKNOWN.to_string(), |k| t.meta[k].clone())
        };
        records.push(PatchRecord {
            patch_id: format!("syn-{}-{i:06}", t.label().replace('|', "-")),
            image_ref: PathBuf::from("images").join(&files[&(e, i)]),
            patient_id: UNKNOWN.into(),
            class_label: t.class.clone(),
            site: meta(Attribute::Site),
            race: meta(Attribute::Race),
            gender: meta(Attribute::Gender),
            age: None,
            synthetic: true,
        });
    }
    let manifest = DatasetManifest::from_records(records, out)?;
    manifest.write(out.join("synthetic.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn uniform_remainder_goes_first() {
        let p = uniform_class_plan(&names(&["c", "a", "b"]), 100, 0).unwrap();
        let counts: Vec<usize> = p.entries.iter().map(|e| e.count).collect();
        assert_eq!(counts, vec![34, 33, 33]);
        assert_eq!(p.entries[0].tuple.class, "a");
        assert_eq!(uniform_class_plan(&names(&["x", "y"]), 100, 0).unwrap().entries[1].count, 50);
        assert_eq!(uniform_class_plan(&names(&["x"]), 7, 0).unwrap().total, 7);
        assert!(uniform_class_plan(&[], 7, 0).is_err());
        assert!(uniform_class_plan(&names(&["x", "y"]), 1, 0).is_err());
    }

    #[test]
    fn cartesian_includes_missing_pairs() {
        let p = cartesian_fill_plan(&names(&["1", "2"]), &names(&["A", "B"]), 400, 100, 0).unwrap();
        assert_eq!(p.entries.len(), 4);
        assert!(p.entries.iter().all(|e| e.count == 100));
        assert_eq!(p.count_of(&CondTuple::new("1", names(&["B"]))), 100);
        assert!(matches!(
            cartesian_fill_plan(&names(&["1", "2"]), &names(&["A", "B"]), 400, 3, 0),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn plan_kind_names() {
        assert_eq!("cartesian".parse::<PlanKind>().unwrap(), PlanKind::CartesianFill);
        assert!("random".parse::<PlanKind>().is_err());
    }
}
