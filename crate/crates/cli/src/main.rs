use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use medi_core::config::ExperimentConfig;
use medi_core::diffusion::{Checkpoint, DdimConfig};
use medi_core::evaluation::{
    extract_manifest, fit_logistic, per_class_fid, select_support, FeatureExtractor, ProbeResult, RandomConvExtractor,
    PROBE_L2,
};
use medi_core::imaging;
use medi_core::ledger::RunLedger;
use medi_core::registry::{coverage_matrix, summarize, DatasetManifest, UNKNOWN};
use medi_core::sampling::{
    cartesian_fill_plan, execute_plan, frequency_matched_plan, uniform_class_plan, DiffusionSampler, PlanKind,
    DEFAULT_PRODUCT_CAP,
};
use medi_core::split::{enumerate_runs, holdout_split, TaskSpec, DEFAULT_RUN_CAP};
use medi_core::study::{
    render_fid_csv, render_fid_svg, render_shift_csv, render_shift_markdown, Arm, FidStudyReport, ShiftStudyReport,
    Study,
};
use medi_core::toy::{generate_toy_dataset, ToySpec};
use medi_core::{Error, Result};

/// Environment variable naming the directory that holds run directories.
const RUN_ROOT_ENV: &str = "MEDI_RUN_ROOT";

#[derive(Parser)]
#[command(name = "medi", version, about = "Metadata-conditioned diffusion for targeted synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarise a manifest and its class x attribute coverage.
    Audit(AuditArgs),
    /// Holdout splits and confounded task runs.
    #[command(subcommand)]
    Split(SplitCommand),
    /// Generate the toy dataset.
    Toygen(ToygenArgs),
    /// Train one arm of an experiment.
    Train(TrainArgs),
    /// Execute a sampling plan with a trained checkpoint.
    Sample(SampleArgs),
    /// Per-class FID between a real and a synthetic manifest.
    Fid(FidArgs),
    /// Few-shot linear probe, optionally augmented with synthetic images.
    Probe(ProbeArgs),
    /// FID study of both arms.
    StudyFid(StudyArgs),
    /// Subpopulation-shift study of both arms.
    StudyShift(StudyArgs),
    /// Verify a run's ledger and re-render its reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "site")]
    attribute: String,
    /// Write the coverage matrix here as TSV.
    #[arg(long)]
    coverage: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SplitCommand {
    /// Hold out a fraction of each class's attribute combinations.
    Holdout {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        fraction: f64,
        #[arg(long, value_delimiter = ',', default_value = "site,race")]
        axes: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one train/test pair per injective class -> site assignment.
    Runs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "task")]
        name: String,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        /// Sites the diffusion model saw; test data comes from the others.
        #[arg(long, value_delimiter = ',')]
        diffusion_sites: Vec<String>,
        #[arg(long, default_value_t = 1)]
        min_site_patches: usize,
        #[arg(long, default_value_t = DEFAULT_RUN_CAP)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ToygenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Toy spec as JSON or TOML; when given, the flags below are ignored.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    sites: usize,
    #[arg(long, default_value_t = 2)]
    test_sites: usize,
    #[arg(long, default_value_t = 0.5)]
    correlation: f64,
    #[arg(long, default_value_t = 400)]
    patches_per_class: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Cls,
    Medi,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Cls => Arm::Cls,
            ArmArg::Medi => Arm::Medi,
        }
    }
}

#[derive(Args)]
struct RunDirArgs {
    #[arg(long)]
    config: PathBuf,
    /// Defaults to `$MEDI_RUN_ROOT/<name>`, else `runs/<name>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunDirArgs,
    #[arg(long, value_enum)]
    arm: ArmArg,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest the model was trained against; its vocabularies must match.
    #[arg(long)]
    dataset: PathBuf,
    /// Manifest whose frequencies a `frequency` plan matches (default: dataset).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    plan: PlanKind,
    #[arg(long)]
    total: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    sites: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractorArgs {
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

impl ExtractorArgs {
    fn build(&self, probe: &DatasetManifest) -> Result<RandomConvExtractor> {
        let [c1, c2] = self.widths[..] else {
            return Err(Error::InvalidArgument("--widths takes two values".into()));
        };
        let first = probe.records().first().ok_or_else(|| Error::InvalidArgument("manifest is empty".into()))?;
        let (_, size) = imaging::load_png(probe.resolve_image(first), self.channels)?;
        Ok(RandomConvExtractor::new(self.channels, size, (c1, c2), self.extractor_seed))
    }
}

#[derive(Args)]
struct FidArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long, default_value_t = 10)]
    min_samples: usize,
    #[command(flatten)]
    extractor: ExtractorArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Synthetic manifests added to the real support set.
    #[arg(long)]
    synthetic: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    extractor: ExtractorArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    run: RunDirArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

fn run_dir(args: &RunDirArgs, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(d) = &args.run_dir {
        return d.clone();
    }
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&cfg.name)
}

fn open_study(args: &RunDirArgs) -> Result<Study> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let dir = run_dir(args, &cfg);
    log::info!("run directory {}", dir.display());
    Study::open(cfg, dir)
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::Io { path: p.to_path_buf(), source: e }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn audit(a: AuditArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    print!("{}", summarize(&m).render());
    let cov = coverage_matrix(&m, &a.attribute)?;
    println!("coverage[{}]\t{}/{} cells non-empty", a.attribute, cov.nonzero_cells(), cov.cells());
    if let Some(p) = a.coverage {
        cov.write_tsv(p)?;
    }
    Ok(())
}

fn split(cmd: SplitCommand) -> Result<()> {
    match cmd {
        SplitCommand::Holdout { manifest, fraction, axes, seed, out } => {
            let m = DatasetManifest::load(&manifest)?;
            let axes: Vec<&str> = axes.iter().map(String::as_str).collect();
            let s = holdout_split(&m, fraction, &axes, seed)?;
            s.write(&out)?;
            println!("train\t{}\nholdout\t{}", s.train.len(), s.holdout.len());
        }
        SplitCommand::Runs { manifest, name, classes, diffusion_sites, min_site_patches, cap, out } => {
            let m = DatasetManifest::load(&manifest)?;
            let mut spec = TaskSpec::new(name, &classes.iter().map(String::as_str).collect::<Vec<_>>());
            spec.diffusion_sites = diffusion_sites;
            spec.min_site_patches = min_site_patches;
            for run in enumerate_runs(&m, &spec, cap)? {
                let dir = out.join(&run.run_id);
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                run.train.write(dir.join("train.tsv"))?;
                run.test.write(dir.join("test.tsv"))?;
                println!("{}\ttrain {}\ttest {}", run.run_id, run.train.len(), run.test.len());
            }
        }
    }
    Ok(())
}

fn toygen(a: ToygenArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            } else {
                serde_json::from_str(&text)?
            }
        }
        None => ToySpec {
            classes: a.classes,
            sites: a.sites,
            test_sites: a.test_sites,
            correlation: a.correlation,
            patches_per_class: a.patches_per_class,
            image_size: a.image_size,
            seed: a.seed,
            ..ToySpec::default()
        },
    };
    let toy = generate_toy_dataset(&spec, &a.out)?;
    println!("{} patches written to {}", toy.manifest.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let study = open_study(&a.run)?;
    let seed = a.seed.unwrap_or(study.config.seeds[0]);
    let ck = study.ensure_model(a.arm.into(), seed)?;
    println!("{} steps, fingerprint {}", ck.steps, ck.fingerprint);
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let dataset = DatasetManifest::load(&a.dataset)?;
    ck.check_schema(dataset.schema())?;
    let classes = if a.classes.is_empty() {
        dataset.schema().class.values().iter().filter(|c| c.as_str() != UNKNOWN).cloned().collect()
    } else {
        a.classes.clone()
    };
    let need_total = || a.total.ok_or_else(|| Error::InvalidArgument("this plan needs --total".into()));
    let plan = match a.plan {
        PlanKind::FrequencyMatched => {
            let reference = match &a.reference {
                Some(p) => DatasetManifest::load(p)?,
                None => dataset.clone(),
            };
            frequency_matched_plan(&reference, &ck.map.attribute_list(), a.seed)?
        }
        PlanKind::UniformClass => uniform_class_plan(&classes, need_total()?, a.seed)?,
        PlanKind::CartesianFill => {
            let sites = if a.sites.is_empty() {
                dataset.schema().vocab(medi_core::registry::Attribute::Site).values().iter().filter(|s| s.as_str() != UNKNOWN).cloned().collect()
            } else {
                a.sites.clone()
            };
            cartesian_fill_plan(&classes, &sites, need_total()?, DEFAULT_PRODUCT_CAP, a.seed)?
        }
    };
    let sampler = DiffusionSampler {
        model: ck.model()?,
        schedule: ck.noise_schedule()?,
        map: ck.map.clone(),
        ddim: DdimConfig { num_inference_steps: a.steps, clip_sample: true, batch_size: a.batch },
    };
    let m = execute_plan(&plan, &sampler, &a.out, a.batch)?;
    println!("{} images written to {}", m.len(), a.out.display());
    Ok(())
}

fn fid(a: FidArgs) -> Result<()> {
    let real = DatasetManifest::load(&a.real)?;
    let syn = DatasetManifest::load(&a.synthetic)?;
    let ex = a.extractor.build(&real)?;
    let r = per_class_fid(&real, &syn, &ex, a.extractor.channels, a.min_samples)?;
    emit_json(&r, a.out.as_deref())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let train = DatasetManifest::load(&a.train)?;
    let test = DatasetManifest::load(&a.test)?;
    let ex = a.extractor.build(&train)?;
    let ch = a.extractor.channels;
    let feats = extract_manifest(&train, &ex, ch)?;
    let labels: Vec<String> = train.records().iter().map(|r| r.class_label.clone()).collect();
    let support = select_support(&labels, a.n_per_class, a.seed)?;
    let mut x: Vec<Vec<f64>> = support.iter().map(|&i| feats[i].clone()).collect();
    let mut y: Vec<String> = support.iter().map(|&i| labels[i].clone()).collect();
    for p in &a.synthetic {
        let s = DatasetManifest::load(p)?;
        x.extend(extract_manifest(&s, &ex, ch)?);
        y.extend(s.records().iter().map(|r| r.class_label.clone()));
    }
    let model = fit_logistic(&x, &y, PROBE_L2)?;
    let preds = model.predict_all(&extract_manifest(&test, &ex as &dyn FeatureExtractor, ch)?);
    let truth: Vec<String> = test.records().iter().map(|r| r.class_label.clone()).collect();
    let sites: Vec<String> = test.records().iter().map(|r| r.site.clone()).collect();
    let run_id = a.train.display().to_string();
    emit_json(&ProbeResult::score(run_id, &preds, &truth, &sites)?, a.out.as_deref())
}

fn study_fid(a: StudyArgs) -> Result<()> {
    let study = open_study(&a.run)?;
    let r = study.run_fid_study()?;
    for (arm, agg) in &r.macro_fid {
        println!("{}\tmacro FID {agg}", arm.label());
    }
    println!("MeDi lower in {} of {} seeds", r.medi_wins, r.seeds.len());
    Ok(())
}

fn study_shift(a: StudyArgs) -> Result<()> {
    let study = open_study(&a.run)?;
    let r = study.run_shift_study()?;
    print!("{}", render_shift_markdown(&r));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let ledger = RunLedger::open(&a.run_dir)?;
    ledger.verify()?;
    let reports = a.run_dir.join("reports");
    let mut any = false;
    if let Ok(bytes) = std::fs::read(reports.join("fid_study.json")) {
        let r: FidStudyReport = serde_json::from_slice(&bytes)?;
        ledger.write("report", "reports/fid_per_class.csv", render_fid_csv(&r).as_bytes())?;
        ledger.write("report", "reports/fid_per_class.svg", render_fid_svg(&r).as_bytes())?;
        for (arm, agg) in &r.macro_fid {
            println!("{}\tmacro FID {agg}", arm.label());
        }
        any = true;
    }
    if let Ok(bytes) = std::fs::read(reports.join("shift_study.json")) {
        let r: ShiftStudyReport = serde_json::from_slice(&bytes)?;
        ledger.write("report", "reports/shift_table.md", render_shift_markdown(&r).as_bytes())?;
        ledger.write("report", "reports/shift_runs.csv", render_shift_csv(&r).as_bytes())?;
        print!("{}", render_shift_markdown(&r));
        any = true;
    }
    if !any {
        return Err(Error::InvalidArgument(format!("no study reports under {}", reports.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Audit(a) => audit(a),
        Command::Split(c) => split(c),
        Command::Toygen(a) => toygen(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Fid(a) => fid(a),
        Command::Probe(a) => probe(a),
        Command::StudyFid(a) => study_fid(a),
        Command::StudyShift(a) => study_shift(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
