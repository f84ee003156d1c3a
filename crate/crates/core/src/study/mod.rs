//! End-to-end experiments inside a run directory.
//!
//! Layout under the run root:
//!
//! ```text
//! config.toml                 snapshot of the experiment config
//! data/                       generated toy data (toy configs only)
//! split/                      train.tsv, holdout.tsv, holdout.json
//! models/<arm>-seed<s>/       checkpoint.json, key.txt
//! samples/fid/seed<s>/<arm>/  plan.json, synthetic.tsv, images/
//! samples/shift/seed<s>/<task>/<run>/<arm>/
//! reports/                    JSON reports plus rendered tables and plots
//! ledger.jsonl
//! ```

mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::{render_fid_csv, render_fid_svg, render_shift_csv, render_shift_markdown};

use crate::config::ExperimentConfig;
use crate::diffusion::{
    Checkpoint, ConditioningMap, ConditioningSpec, DenoiserModel, NoiseSchedule, Trainer, TrainingSet,
};
use crate::error::io_err;
use crate::evaluation::{
    aggregate_runs, extract_manifest, fit_logistic, per_class_fid_features, select_support, Aggregate, FeatureExtractor,
    FidResult, ProbeResult, RandomConvExtractor, PROBE_L2,
};
use crate::ledger::RunLedger;
use crate::registry::{Attribute, DatasetManifest};
use crate::sampling::{
    cartesian_fill_plan, execute_plan, frequency_matched_plan, uniform_class_plan, CachedSampler, DiffusionSampler,
    ImageSampler, DEFAULT_PRODUCT_CAP,
};
use crate::seeds::derive_seed;
use crate::split::{enumerate_runs, holdout_split, HoldoutSplit};
use crate::toy::{generate_toy_dataset, test_site_name, ToySpec};
use crate::{imaging, Error, Result};

pub const NO_SYN_LABEL: &str = "No syn. data";
pub const CLS_LABEL: &str = "CLS only";
pub const MEDI_LABEL: &str = "MeDi";

/// The two diffusion models compared by every study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Conditioned on the class label only.
    Cls,
    /// Conditioned on the class label and the configured metadata.
    Medi,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Cls, Arm::Medi];

    pub fn slug(self) -> &'static str {
        match self {
            Arm::Cls => "cls",
            Arm::Medi => "medi",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Cls => CLS_LABEL,
            Arm::Medi => MEDI_LABEL,
        }
    }
}

/// A file a report depends on, with the hash the ledger holds for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub sha256: String,
}

/// An experiment bound to its run directory.
pub struct Study {
    pub config: ExperimentConfig,
    root: PathBuf,
    ledger: RunLedger,
    manifest: DatasetManifest,
}

fn toy_test_sites(t: &ToySpec) -> Vec<String> {
    (0..t.test_sites).map(test_site_name).collect()
}

impl Study {
    /// Create or reopen a run directory: snapshot the config and load (or
    /// generate) the dataset.
    pub fn open(config: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let ledger = RunLedger::open(root)?;
        let root = ledger.root().to_path_buf();
        let snapshot = config.to_toml()?;
        let snap_path = root.join("config.toml");
        match std::fs::read_to_string(&snap_path) {
            Ok(existing) if existing == snapshot => {}
            Ok(_) => {
                return Err(Error::Config(format!(
                    "{} already holds a different experiment config",
                    root.display()
                )))
            }
            Err(_) => {
                ledger.write("config", "config.toml", snapshot.as_bytes())?;
            }
        }
        let manifest = match &config.data.toy {
            Some(spec) => load_or_generate_toy(spec, &root.join("data"), &ledger)?,
            None => {
                let path = config.data.manifest.as_ref().expect("validated");
                DatasetManifest::load(path)?
            }
        };
        Ok(Self { config, root, ledger, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn artifact(&self, rel: impl AsRef<Path>) -> Result<ArtifactRef> {
        let rel = rel.as_ref();
        let sha256 = self
            .ledger
            .hash_of(rel)?
            .ok_or_else(|| Error::Checkpoint(format!("{} is not in the run ledger", rel.display())))?;
        Ok(ArtifactRef { path: rel.to_path_buf(), sha256 })
    }

    /// Sites kept out of diffusion training.
    pub fn excluded_sites(&self) -> Vec<String> {
        let mut s = self.config.split.exclude_sites.clone();
        if let Some(t) = &self.config.data.toy {
            s.extend(toy_test_sites(t));
        }
        s.sort();
        s.dedup();
        s
    }

    /// Records the diffusion models may see before the holdout split.
    pub fn diffusion_pool(&self) -> DatasetManifest {
        let ex = self.excluded_sites();
        self.manifest.filter(|r| !ex.contains(&r.site))
    }

    /// The holdout split of the diffusion pool, written to `split/` once.
    pub fn holdout(&self) -> Result<HoldoutSplit> {
        let s = &self.config.split;
        let axes: Vec<&str> = s.axes.iter().map(String::as_str).collect();
        let split = holdout_split(&self.diffusion_pool(), s.fraction, &axes, s.seed)?;
        if self.ledger.hash_of("split/train.tsv")?.is_none() {
            let dir = self.root.join("split");
            split.write(&dir)?;
            for f in ["train.tsv", "holdout.tsv", "holdout.json"] {
                self.ledger.record("split", dir.join(f), None)?;
            }
        }
        Ok(split)
    }

    fn conditioning_map(&self, arm: Arm) -> Result<ConditioningMap> {
        let attrs: &[Attribute] = match arm {
            Arm::Cls => &[],
            Arm::Medi => &self.config.model.attributes,
        };
        ConditioningMap::from_schema(self.manifest.schema(), attrs)
    }

    fn conditioning_spec(&self, arm: Arm, map: &ConditioningMap) -> Result<ConditioningSpec> {
        let m = &self.config.model;
        match arm {
            Arm::Cls => ConditioningSpec::class_only(m.d_t, map.class.len()),
            Arm::Medi => map.spec(m.d_class, m.d_e, m.d_t),
        }
    }

    fn model_key(&self, arm: Arm, seed: u64) -> Result<String> {
        let c = &self.config;
        let payload = serde_json::to_vec(&(
            arm,
            seed,
            &c.model,
            &c.train,
            &c.split,
            self.excluded_sites(),
            self.manifest.schema().fingerprint(&Attribute::METADATA),
            self.manifest.len(),
        ))?;
        Ok(hex::encode(Sha256::digest(&payload)))
    }

    fn model_dir(arm: Arm, seed: u64) -> PathBuf {
        PathBuf::from("models").join(format!("{}-seed{seed}", arm.slug()))
    }

    /// Train the arm's model for `seed`, or reuse a finished checkpoint
    /// trained from the same settings.
    pub fn ensure_model(&self, arm: Arm, seed: u64) -> Result<Checkpoint> {
        let dir = Self::model_dir(arm, seed);
        let key = self.model_key(arm, seed)?;
        let ckpt_path = self.root.join(&dir).join("checkpoint.json");
        let key_path = self.root.join(&dir).join("key.txt");
        if std::fs::read_to_string(&key_path).is_ok_and(|k| k == key) {
            if let Ok(ck) = Checkpoint::load(&ckpt_path) {
                ck.check_schema(self.manifest.schema())?;
                log::info!("reusing {}", ckpt_path.display());
                return Ok(ck);
            }
        }

        let split = self.holdout()?;
        let map = self.conditioning_map(arm)?;
        let spec = self.conditioning_spec(arm, &map)?;
        let data = self.training_set(&split.train, &map)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let model = DenoiserModel::<f32>::new(self.config.model.unet.clone(), spec, &mut rng)?;
        let schedule = NoiseSchedule::linear(&self.config.model.schedule)?;
        let mut tc = self.config.train.clone();
        tc.seed = derive_seed(seed, "train");
        let steps = tc.steps;
        let every = (steps / 10).max(1);
        let mut trainer = Trainer::new(model, schedule, tc)?;
        let mut window = 0.0;
        log::info!("training {} seed {seed}: {} images, {steps} steps", arm.label(), data.len());
        trainer.fit(&data, |step, loss| {
            window += loss;
            if step % every == 0 {
                log::info!("{} seed {seed} step {step}/{steps} mean loss {:.4}", arm.slug(), window / every as f64);
                window = 0.0;
            }
        })?;
        let done = trainer.steps_done();
        let model = trainer.into_model();
        let ck = Checkpoint::from_model(&model, &self.config.model.schedule, &map, self.manifest.schema(), done);
        let abs_dir = self.root.join(&dir);
        std::fs::create_dir_all(&abs_dir).map_err(io_err(&abs_dir))?;
        ck.save(&ckpt_path)?;
        self.ledger.record("checkpoint", &ckpt_path, Some(format!("{} seed {seed}", arm.label())))?;
        std::fs::write(&key_path, &key).map_err(io_err(&key_path))?;
        Ok(ck)
    }

    fn training_set(&self, train: &DatasetManifest, map: &ConditioningMap) -> Result<TrainingSet<f32>> {
        let u = &self.config.model.unet;
        let mut set = TrainingSet {
            image_shape: [u.in_channels, u.image_size, u.image_size],
            images: Vec::with_capacity(train.len()),
            conds: Vec::with_capacity(train.len()),
            ids: Vec::with_capacity(train.len()),
        };
        for r in train.records() {
            let path = train.resolve_image(r);
            let (img, size) = imaging::load_png(&path, u.in_channels)?;
            if size != u.image_size {
                return Err(Error::Image { path, message: format!("{size} pixels wide, model expects {}", u.image_size) });
            }
            set.images.push(img);
            set.conds.push(map.encode_record(r)?);
            set.ids.push(r.patch_id.clone());
        }
        Ok(set)
    }

    fn sampler(&self, ck: &Checkpoint) -> Result<DiffusionSampler> {
        Ok(DiffusionSampler {
            model: ck.model()?,
            schedule: ck.noise_schedule()?,
            map: ck.map.clone(),
            ddim: self.config.sampling.ddim.clone(),
        })
    }

    fn extractor(&self) -> RandomConvExtractor {
        let e = &self.config.evaluation;
        RandomConvExtractor::new(self.config.data.channels, self.config.model.unet.image_size, e.extractor_widths, e.extractor_seed)
    }

    fn labelled_features(&self, m: &DatasetManifest, ex: &dyn FeatureExtractor) -> Result<Vec<(String, Vec<f64>)>> {
        let f = extract_manifest(m, ex, self.config.data.channels)?;
        Ok(m.records().iter().map(|r| r.class_label.clone()).zip(f).collect())
    }

    fn record_samples(&self, dir: &Path) -> Result<(ArtifactRef, ArtifactRef)> {
        let plan = self.ledger.record("plan", dir.join("plan.json"), None)?;
        let syn = self.ledger.record("manifest", dir.join("synthetic.tsv"), None)?;
        Ok((
            ArtifactRef { path: plan.path, sha256: plan.sha256 },
            ArtifactRef { path: syn.path, sha256: syn.sha256 },
        ))
    }

    /// Frequency-matched sampling from both arms, scored by per-class FID
    /// against the diffusion training set.
    pub fn run_fid_study(&self) -> Result<FidStudyReport> {
        let split = self.holdout()?;
        let real = &split.train;
        let ex = self.extractor();
        let real_feats = self.labelled_features(real, &ex)?;
        let min = self.config.evaluation.min_fid_samples;
        let mut seeds = Vec::new();
        for &seed in &self.config.seeds {
            let plan_seed = derive_seed(self.config.sampling.seed ^ seed, "fid-plan");
            let mut arms = BTreeMap::new();
            for arm in Arm::ALL {
                let ck = self.ensure_model(arm, seed)?;
                let plan = frequency_matched_plan(real, &ck.map.attribute_list(), plan_seed)?;
                let sampler = self.sampler(&ck)?;
                let rel = PathBuf::from("samples/fid").join(format!("seed{seed}")).join(arm.slug());
                let dir = self.root.join(&rel);
                log::info!("sampling {} images from {} seed {seed}", plan.total, arm.label());
                let syn = execute_plan(&plan, &sampler, &dir, self.config.sampling.ddim.batch_size)?;
                let (plan_ref, syn_ref) = self.record_samples(&dir)?;
                let syn_feats = self.labelled_features(&syn, &ex)?;
                let fid = per_class_fid_features(&real_feats, &syn_feats, min)?;
                arms.insert(
                    arm,
                    FidArmResult {
                        images: syn.len(),
                        plan_attributes: plan.attributes.clone(),
                        fid,
                        checkpoint: self.artifact(Self::model_dir(arm, seed).join("checkpoint.json"))?,
                        plan: plan_ref,
                        synthetic: syn_ref,
                    },
                );
            }
            seeds.push(FidSeedResult { seed, arms });
        }
        let report = FidStudyReport::summarize(self.config.name.clone(), real.len(), seeds);
        self.write_fid_report(&report)?;
        Ok(report)
    }

    pub fn write_fid_report(&self, report: &FidStudyReport) -> Result<()> {
        self.ledger.write("report", "reports/fid_study.json", &serde_json::to_vec_pretty(report)?)?;
        self.ledger.write("report", "reports/fid_per_class.csv", render_fid_csv(report).as_bytes())?;
        self.ledger.write("report", "reports/fid_per_class.svg", render_fid_svg(report).as_bytes())?;
        Ok(())
    }

    /// Few-shot probes over every confounded site assignment of every task,
    /// with no augmentation, class-only augmentation and metadata-targeted
    /// augmentation.
    pub fn run_shift_study(&self) -> Result<ShiftStudyReport> {
        let eval = &self.config.evaluation;
        if eval.tasks.is_empty() {
            return Err(Error::Config("the shift study needs at least one task".into()));
        }
        let pool_sites: Vec<String> =
            self.diffusion_pool().schema().vocab(Attribute::Site).values().iter().filter(|s| s.as_str() != crate::registry::UNKNOWN).cloned().collect();
        let ex = self.extractor();
        let mut feature_cache: HashMap<PathBuf, Vec<f64>> = HashMap::new();
        let mut features = |m: &DatasetManifest| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(m.len());
            for r in m.records() {
                let path = m.resolve_image(r);
                if let Some(f) = feature_cache.get(&path) {
                    out.push(f.clone());
                    continue;
                }
                let (img, _) = imaging::load_png(&path, self.config.data.channels)?;
                let f = ex.extract(&img);
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite features for {}", path.display())));
                }
                feature_cache.insert(path, f.clone());
                out.push(f);
            }
            Ok(out)
        };

        let mut tasks = Vec::new();
        for task in &eval.tasks {
            let mut spec = task.clone();
            if spec.diffusion_sites.is_empty() {
                spec.diffusion_sites = pool_sites.clone();
            }
            spec.min_site_patches = spec.min_site_patches.max(eval.n_per_class);
            let runs = enumerate_runs(&self.manifest, &spec, eval.run_cap)?;
            let mut results = Vec::new();
            let mut failed = Vec::new();
            for &seed in &self.config.seeds {
                let samplers: BTreeMap<Arm, CachedSampler<DiffusionSampler>> = Arm::ALL
                    .iter()
                    .map(|&a| Ok((a, CachedSampler::new(self.sampler(&self.ensure_model(a, seed)?)?))))
                    .collect::<Result<_>>()?;
                for run in &runs {
                    let outcome = self.shift_run(seed, &spec.name, run, &samplers, &mut features);
                    match outcome {
                        Ok(rs) => results.extend(rs),
                        Err(e) => {
                            log::warn!("run {} seed {seed} failed: {e}", run.run_id);
                            failed.push(FailedRun { seed, run_id: run.run_id.clone(), error: e.to_string() });
                        }
                    }
                }
            }
            tasks.push(TaskReport::summarize(spec.name.clone(), runs.len(), results, failed)?);
        }
        let report = ShiftStudyReport { name: self.config.name.clone(), seeds: self.config.seeds.clone(), tasks };
        self.write_shift_report(&report)?;
        Ok(report)
    }

    pub fn write_shift_report(&self, report: &ShiftStudyReport) -> Result<()> {
        self.ledger.write("report", "reports/shift_study.json", &serde_json::to_vec_pretty(report)?)?;
        self.ledger.write("report", "reports/shift_table.md", render_shift_markdown(report).as_bytes())?;
        self.ledger.write("report", "reports/shift_runs.csv", render_shift_csv(report).as_bytes())?;
        Ok(())
    }

    fn shift_run(
        &self,
        seed: u64,
        task: &str,
        run: &crate::split::CorrelatedTaskSplit,
        samplers: &BTreeMap<Arm, CachedSampler<DiffusionSampler>>,
        features: &mut dyn FnMut(&DatasetManifest) -> Result<Vec<Vec<f64>>>,
    ) -> Result<Vec<RunResult>> {
        let eval = &self.config.evaluation;
        let labels: Vec<String> = run.train.records().iter().map(|r| r.class_label.clone()).collect();
        let support = select_support(&labels, eval.n_per_class, derive_seed(seed, &run.run_id))?;
        let train_feats = features(&run.train)?;
        let x_real: Vec<Vec<f64>> = support.iter().map(|&i| train_feats[i].clone()).collect();
        let y_real: Vec<String> = support.iter().map(|&i| labels[i].clone()).collect();
        let test_feats = features(&run.test)?;
        let test_labels: Vec<String> = run.test.records().iter().map(|r| r.class_label.clone()).collect();
        let test_sites: Vec<String> = run.test.records().iter().map(|r| r.site.clone()).collect();
        let total = support.len() * eval.augmentation_ratio;

        let score = |arm: &str, x: &[Vec<f64>], y: &[String], synthetic: Option<ArtifactRef>| -> Result<RunResult> {
            let probe = fit_logistic(x, y, PROBE_L2)?;
            let preds = probe.predict_all(&test_feats);
            Ok(RunResult {
                seed,
                arm: arm.to_string(),
                synthetic,
                synthetic_images: x.len() - x_real.len(),
                result: ProbeResult::score(run.run_id.clone(), &preds, &test_labels, &test_sites)?,
            })
        };

        let mut out = vec![score(NO_SYN_LABEL, &x_real, &y_real, None)?];
        let mut classes = run.classes.clone();
        classes.sort();
        let sites: Vec<String> = classes.iter().map(|c| run.assignment[c].clone()).collect();
        for (arm, sampler) in samplers {
            let plan_seed = derive_seed(self.config.sampling.seed ^ seed, &format!("shift/{}", arm.slug()));
            let plan = match arm {
                Arm::Cls => uniform_class_plan(&classes, total, plan_seed)?,
                Arm::Medi => cartesian_fill_plan(&classes, &sites, total, DEFAULT_PRODUCT_CAP, plan_seed)?,
            };
            let rel = PathBuf::from("samples/shift").join(format!("seed{seed}")).join(task).join(&run.run_id).join(arm.slug());
            let dir = self.root.join(&rel);
            let syn = execute_plan(&plan, sampler as &dyn ImageSampler, &dir, self.config.sampling.ddim.batch_size)?;
            let (_, syn_ref) = self.record_samples(&dir)?;
            let mut x = x_real.clone();
            let mut y = y_real.clone();
            x.extend(features(&syn)?);
            y.extend(syn.records().iter().map(|r| r.class_label.clone()));
            out.push(score(arm.label(), &x, &y, Some(syn_ref))?);
        }
        Ok(out)
    }
}

fn load_or_generate_toy(spec: &ToySpec, dir: &Path, ledger: &RunLedger) -> Result<DatasetManifest> {
    let spec_path = dir.join("toy_spec.json");
    let same = std::fs::read(&spec_path)
        .ok()
        .and_then(|b| serde_json::from_slice::<ToySpec>(&b).ok())
        .is_some_and(|s| s == *spec);
    if same {
        if let Ok(m) = DatasetManifest::load(dir.join("manifest.tsv")) {
            return Ok(m);
        }
    }
    log::info!("generating toy dataset in {}", dir.display());
    let toy = generate_toy_dataset(spec, dir)?;
    ledger.record("manifest", dir.join("manifest.tsv"), Some("toy dataset".into()))?;
    ledger.record("config", &spec_path, None)?;
    Ok(toy.manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidArmResult {
    pub images: usize,
    /// Metadata attributes carried by the plan's tuples.
    pub plan_attributes: Vec<Attribute>,
    pub fid: FidResult,
    pub checkpoint: ArtifactRef,
    pub plan: ArtifactRef,
    pub synthetic: ArtifactRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidSeedResult {
    pub seed: u64,
    pub arms: BTreeMap<Arm, FidArmResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidStudyReport {
    pub name: String,
    pub real_images: usize,
    pub seeds: Vec<FidSeedResult>,
    /// Per arm, the mean over seeds of the per-class FID.
    pub per_class_mean: BTreeMap<Arm, BTreeMap<String, f64>>,
    /// Per arm, the macro FID aggregated over seeds.
    pub macro_fid: BTreeMap<Arm, Aggregate>,
    /// Seeds where the metadata-conditioned arm has the lower macro FID.
    pub medi_wins: usize,
}

impl FidStudyReport {
    fn summarize(name: String, real_images: usize, seeds: Vec<FidSeedResult>) -> Self {
        let mut per_class_mean = BTreeMap::new();
        let mut macro_fid = BTreeMap::new();
        for arm in Arm::ALL {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for s in &seeds {
                for (c, v) in &s.arms[&arm].fid.per_class {
                    let e = sums.entry(c.clone()).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            per_class_mean.insert(arm, sums.into_iter().map(|(c, (v, n))| (c, v / n as f64)).collect());
            let macros: Vec<f64> = seeds.iter().map(|s| s.arms[&arm].fid.macro_average).collect();
            if let Ok(a) = crate::evaluation::aggregate(&macros) {
                macro_fid.insert(arm, a);
            }
        }
        let medi_wins =
            seeds.iter().filter(|s| s.arms[&Arm::Medi].fid.macro_average < s.arms[&Arm::Cls].fid.macro_average).count();
        Self { name, real_images, seeds, per_class_mean, macro_fid, medi_wins }
    }

    pub fn artifacts(&self) -> Vec<&ArtifactRef> {
        self.seeds.iter().flat_map(|s| s.arms.values()).flat_map(|a| [&a.checkpoint, &a.plan, &a.synthetic]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<ArtifactRef>,
    pub synthetic_images: usize,
    pub result: ProbeResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub run_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub overall: Aggregate,
    pub tss_avg: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    /// Enumerated site assignments per seed.
    pub runs: usize,
    /// Rows in the order no augmentation, class-only, metadata-targeted.
    pub rows: Vec<ArmRow>,
    pub results: Vec<RunResult>,
    /// Runs that raised an error; they are left out of `rows`.
    pub failed: Vec<FailedRun>,
    /// Synthetic images added to each arm's probes, over all runs and seeds.
    pub synthetic_images: BTreeMap<String, usize>,
}

impl TaskReport {
    fn summarize(
        task: String,
        runs: usize,
        results: Vec<RunResult>,
        failed: Vec<FailedRun>,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        let mut synthetic_images = BTreeMap::new();
        for label in [NO_SYN_LABEL, CLS_LABEL, MEDI_LABEL] {
            let rs: Vec<ProbeResult> = results.iter().filter(|r| r.arm == label).map(|r| r.result.clone()).collect();
            if rs.is_empty() {
                continue;
            }
            synthetic_images.insert(label.to_string(), results.iter().filter(|r| r.arm == label).map(|r| r.synthetic_images).sum());
            let agg = aggregate_runs(&rs)?;
            rows.push(ArmRow { arm: label.into(), overall: agg.overall, tss_avg: agg.tss_avg });
        }
        Ok(Self { task, runs, rows, results, failed, synthetic_images })
    }

    pub fn row(&self, label: &str) -> Option<&ArmRow> {
        self.rows.iter().find(|r| r.arm == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStudyReport {
    pub name: String,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskReport>,
}

impl ShiftStudyReport {
    pub fn artifacts(&self) -> Vec<&ArtifactRef> {
        self.tasks.iter().flat_map(|t| &t.results).filter_map(|r| r.synthetic.as_ref()).collect()
    }
}
