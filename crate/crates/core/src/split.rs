//! Holdout splits over metadata combinations and confounded class/site task splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::io_err;
use crate::registry::{Attribute, DatasetManifest};
use crate::seeds::derive_seed;
use crate::{Error, Result};

/// Default refusal threshold for [`enumerate_runs`].
pub const DEFAULT_RUN_CAP: usize = 10_000;

/// Number of combinations to hold out of `n`: `floor(fraction * n)`, raised
/// to one when the class has at least two combinations.
pub fn holdout_count(fraction: f64, n: usize) -> usize {
    let m = (fraction * n as f64 + 1e-9).floor() as usize;
    if m == 0 && n >= 2 {
        1
    } else {
        m.min(n)
    }
}

/// Excluded combinations and the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRecord {
    pub fraction: f64,
    pub axes: Vec<Attribute>,
    pub seed: u64,
    /// Per class, the held-out value tuples (one value per axis).
    pub excluded: BTreeMap<String, Vec<Vec<String>>>,
}

#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: DatasetManifest,
    pub holdout: DatasetManifest,
    pub record: HoldoutRecord,
}

impl HoldoutSplit {
    /// `train.tsv`, `holdout.tsv` and `holdout.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.train.write(dir.join("train.tsv"))?;
        self.holdout.write(dir.join("holdout.tsv"))?;
        let side = dir.join("holdout.json");
        std::fs::write(&side, serde_json::to_vec_pretty(&self.record)?).map_err(io_err(&side))
    }
}

fn parse_axes(axes: &[&str]) -> Result<Vec<Attribute>> {
    if axes.is_empty() {
        return Err(Error::InvalidArgument("at least one split axis is required".into()));
    }
    let mut out = Vec::with_capacity(axes.len());
    for a in axes {
        let attr: Attribute = a.parse()?;
        if attr == Attribute::Class {
            return Err(Error::InvalidArgument("the class label cannot be a split axis".into()));
        }
        if !out.contains(&attr) {
            out.push(attr);
        }
    }
    Ok(out)
}

/// Per class, hold out a random `fraction` of the observed combinations of
/// `axes` and move every matching record to the holdout partition.
pub fn holdout_split(manifest: &DatasetManifest, fraction: f64, axes: &[&str], seed: u64) -> Result<HoldoutSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("holdout fraction {fraction} must lie strictly between 0 and 1")));
    }
    let axes = parse_axes(axes)?;
    let key = |r: &crate::registry::PatchRecord| -> Vec<String> { axes.iter().map(|a| r.value(*a).into_owned()).collect() };

    let mut observed: BTreeMap<&str, BTreeSet<Vec<String>>> = BTreeMap::new();
    for r in manifest.records() {
        observed.entry(&r.class_label).or_default().insert(key(r));
    }
    let mut excluded: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for (class, combos) in &observed {
        let combos: Vec<&Vec<String>> = combos.iter().collect();
        let m = holdout_count(fraction, combos.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("holdout/{class}")));
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, combos.len(), m).into_vec();
        picked.sort_unstable();
        excluded.insert(class.to_string(), picked.into_iter().map(|i| combos[i].clone()).collect());
    }
    let lookup: BTreeMap<&str, BTreeSet<&Vec<String>>> =
        excluded.iter().map(|(c, v)| (c.as_str(), v.iter().collect())).collect();
    let is_held = |r: &crate::registry::PatchRecord| lookup.get(r.class_label.as_str()).is_some_and(|s| s.contains(&key(r)));
    let train = manifest.filter(|r| !is_held(r));
    let holdout = manifest.filter(is_held);
    Ok(HoldoutSplit { train, holdout, record: HoldoutRecord { fraction, axes, seed, excluded } })
}

/// Classes of a confounded task and how their sites are chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub classes: Vec<String>,
    /// Fixed class -> site pairs; unlisted classes are assigned by the split.
    #[serde(default)]
    pub assignment: BTreeMap<String, String>,
    /// Sites the diffusion model was trained on. When given, assignments are
    /// drawn from them and the test set comes from every other site;
    /// otherwise any site may be assigned and the test set uses the
    /// unassigned ones.
    #[serde(default)]
    pub diffusion_sites: Vec<String>,
    /// A site is eligible for a class only with at least this many patches.
    #[serde(default = "one")]
    pub min_site_patches: usize,
}

fn one() -> usize {
    1
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, classes: &[&str]) -> Self {
        Self {
            name: name.into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            assignment: BTreeMap::new(),
            diffusion_sites: Vec::new(),
            min_site_patches: 1,
        }
    }
}

/// One run of a confounded task: every training class comes from a single,
/// distinct site.
#[derive(Debug, Clone)]
pub struct CorrelatedTaskSplit {
    pub task: String,
    pub classes: Vec<String>,
    pub assignment: BTreeMap<String, String>,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub run_id: String,
}

impl CorrelatedTaskSplit {
    pub fn test_sites(&self) -> BTreeSet<String> {
        self.test.records().iter().map(|r| r.site.clone()).collect()
    }
}

struct Candidates {
    classes: Vec<String>,
    /// Per class (in task order), eligible sites in vocabulary order.
    sites: Vec<Vec<String>>,
}

fn candidates(manifest: &DatasetManifest, spec: &TaskSpec) -> Result<Candidates> {
    if spec.classes.is_empty() {
        return Err(Error::InvalidArgument(format!("task {} lists no classes", spec.name)));
    }
    let uniq: BTreeSet<&String> = spec.classes.iter().collect();
    if uniq.len() != spec.classes.len() {
        return Err(Error::InvalidArgument(format!("task {} repeats a class", spec.name)));
    }
    let schema = manifest.schema();
    for c in &spec.classes {
        if schema.class.id_of(c).is_none() {
            return Err(Error::InvalidArgument(format!("task {}: class {c} not in manifest", spec.name)));
        }
    }
    for c in spec.assignment.keys() {
        if !spec.classes.contains(c) {
            return Err(Error::InvalidArgument(format!("task {}: assignment for unknown class {c}", spec.name)));
        }
    }
    let pool: BTreeSet<&str> = spec.diffusion_sites.iter().map(String::as_str).collect();
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in manifest.records() {
        *counts.entry((r.class_label.as_str(), r.site.as_str())).or_default() += 1;
    }
    let site_vocab = schema.vocab(Attribute::Site);
    let mut sites = Vec::with_capacity(spec.classes.len());
    for c in &spec.classes {
        let eligible: Vec<String> = site_vocab
            .values()
            .iter()
            .filter(|s| pool.is_empty() || pool.contains(s.as_str()))
            .filter(|s| counts.get(&(c.as_str(), s.as_str())).copied().unwrap_or(0) >= spec.min_site_patches)
            .filter(|s| spec.assignment.get(c).is_none_or(|fixed| fixed == *s))
            .cloned()
            .collect();
        if eligible.is_empty() {
            return Err(Error::InvalidArgument(format!("task {}: class {c} has no eligible site", spec.name)));
        }
        sites.push(eligible);
    }
    let all: BTreeSet<&String> = sites.iter().flatten().collect();
    if all.len() < spec.classes.len() {
        return Err(Error::InvalidArgument(format!(
            "task {}: {} classes but only {} distinct eligible sites",
            spec.name,
            spec.classes.len(),
            all.len()
        )));
    }
    Ok(Candidates { classes: spec.classes.clone(), sites })
}

fn build_split(manifest: &DatasetManifest, spec: &TaskSpec, assignment: BTreeMap<String, String>) -> CorrelatedTaskSplit {
    let classes: BTreeSet<&str> = spec.classes.iter().map(String::as_str).collect();
    let assigned: BTreeSet<&str> = assignment.values().map(String::as_str).collect();
    let pool: BTreeSet<&str> = spec.diffusion_sites.iter().map(String::as_str).collect();
    let train = manifest.filter(|r| assignment.get(&r.class_label).is_some_and(|s| *s == r.site));
    let test = manifest.filter(|r| {
        classes.contains(r.class_label.as_str())
            && if pool.is_empty() { !assigned.contains(r.site.as_str()) } else { !pool.contains(r.site.as_str()) }
    });
    let run_id = std::iter::once(spec.name.clone())
        .chain(spec.classes.iter().map(|c| format!("{c}@{}", assignment[c])))
        .collect::<Vec<_>>()
        .join("__");
    CorrelatedTaskSplit { task: spec.name.clone(), classes: spec.classes.clone(), assignment, train, test, run_id }
}

/// Depth-first walk over injective assignments in (class order, site
/// vocabulary order). `visit` returns false to stop early.
fn walk(c: &Candidates, depth: usize, used: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize]) -> bool) -> bool {
    if depth == c.classes.len() {
        return visit(used);
    }
    for (i, s) in c.sites[depth].iter().enumerate() {
        if used.iter().enumerate().any(|(d, &j)| c.sites[d][j] == *s) {
            continue;
        }
        used.push(i);
        let go_on = walk(c, depth + 1, used, visit);
        used.pop();
        if !go_on {
            return false;
        }
    }
    true
}

fn to_assignment(c: &Candidates, picks: &[usize]) -> BTreeMap<String, String> {
    c.classes.iter().zip(picks).enumerate().map(|(d, (cl, &i))| (cl.clone(), c.sites[d][i].clone())).collect()
}

/// A single confounded split. Classes without a fixed site get one drawn at
/// random, without replacement across classes.
pub fn correlated_task_split(manifest: &DatasetManifest, spec: &TaskSpec, seed: u64) -> Result<CorrelatedTaskSplit> {
    let mut c = candidates(manifest, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("task/{}", spec.name)));
    for s in &mut c.sites {
        s.shuffle(&mut rng);
    }
    let mut found = None;
    walk(&c, 0, &mut Vec::new(), &mut |picks| {
        found = Some(picks.to_vec());
        false
    });
    let picks = found.ok_or_else(|| {
        Error::InvalidArgument(format!("task {}: no assignment gives every class its own site", spec.name))
    })?;
    Ok(build_split(manifest, spec, to_assignment(&c, &picks)))
}

/// Number of runs [`enumerate_runs`] would produce, counting at most `limit + 1`.
pub fn count_runs(manifest: &DatasetManifest, spec: &TaskSpec, limit: usize) -> Result<usize> {
    let c = candidates(manifest, spec)?;
    let mut n = 0usize;
    walk(&c, 0, &mut Vec::new(), &mut |_| {
        n += 1;
        n <= limit
    });
    Ok(n)
}

/// One split per injective class -> site assignment, in lexicographic
/// (class order, site vocabulary id) order. Refuses when there are more
/// than `cap` assignments.
pub fn enumerate_runs(manifest: &DatasetManifest, spec: &TaskSpec, cap: usize) -> Result<Vec<CorrelatedTaskSplit>> {
    let n = count_runs(manifest, spec, cap)?;
    if n > cap {
        return Err(Error::CapExceeded { what: format!("runs of task {}", spec.name), count: n as u128, cap: cap as u128 });
    }
    let c = candidates(manifest, spec)?;
    let mut assignments = Vec::with_capacity(n);
    walk(&c, 0, &mut Vec::new(), &mut |picks| {
        assignments.push(to_assignment(&c, picks));
        true
    });
    if assignments.is_empty() {
        return Err(Error::InvalidArgument(format!("task {}: no assignment gives every class its own site", spec.name)));
    }
    Ok(assignments.into_iter().map(|a| build_split(manifest, spec, a)).collect())
}
