//! Command-line front end: TOML run configs with flag overrides, one
//! subcommand per stage, content-addressed artifacts.
//!
//! Exit codes: 0 ok, 2 usage, 3 missing prerequisite, 4 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::Profile;
use crate::data::{crop_window, kshot_split, load_dataset, save_dataset, synth_benchmark, Dataset, Split, SubjectId};
use crate::error::Error;
use crate::eval::{aggregate, render_table, run_target_grid, top1_accuracy, GridSpec, RunReport, RunRow, TableFormat};
use crate::models::{ClassifierModel, GeneratorConfig, GeneratorModel, ModelConfig};
use crate::pipeline::{
    adapt_target, log_to_jsonl, source_split, train_generator, train_source, Method, SourceFreeGuard, Stage, StageConfig,
};

pub const OUT_DIR_ENV: &str = "SOFA_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "sofa-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing prerequisite: {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sofa", version, about = "Source-free subject adaptation for EEG classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-subject benchmark (SOFA-EEG-1).
    SynthData(SynthArgs),
    /// Train the source classifier on every subject except the target.
    TrainSource(RunArgs),
    /// Train the feature generator against the frozen source classifier.
    TrainGenerator(RunArgs),
    /// Adapt to the target subject from k shots per class.
    Adapt(RunArgs),
    /// Run the (k x method x seed) grid for the target subject.
    Evaluate(RunArgs),
    /// Aggregate report files and print a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Base settings to start from.
    #[arg(long, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Timesteps per sample.
    #[arg(long = "t-len")]
    pub t_len: Option<usize>,
    /// Channels per timestep.
    #[arg(long)]
    pub d_in: Option<usize>,
    /// Standard deviation of the additive noise.
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Flags shared by the stage commands; each overrides the same key of the
/// config file.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// TOML run config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// desk or paper.
    #[arg(long)]
    pub profile: Option<Profile>,
    /// Dataset file (SOFA-EEG-1).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Artifact directory [default: $SOFA_OUT_DIR, else ./sofa-out].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the alignment term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// baseline, mmd or iscon; a comma list for evaluate.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<Method>>,
    /// Shots per class; a comma list for evaluate.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Target subject id.
    #[arg(long)]
    pub target: Option<u32>,
    /// Seed of the source, generator and single adaptation runs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation seeds (k-shot draw and adaptation), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Generated features per step.
    #[arg(long)]
    pub fake_batch: Option<usize>,
    /// Round-robin class codes for generated batches.
    #[arg(long)]
    pub class_balanced: Option<bool>,
    /// Generator updates per generator epoch.
    #[arg(long)]
    pub generator_steps: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Grid worker threads; 0 uses the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Timestep window START,END applied after loading.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub crop: Option<Vec<usize>>,
    /// Use this source checkpoint instead of the content-addressed one.
    #[arg(long)]
    pub source_ckpt: Option<PathBuf>,
    /// Use this generator checkpoint instead of the content-addressed one.
    #[arg(long)]
    pub generator_ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files written by adapt or evaluate.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// tsv, markdown or json.
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// On-disk run config. Every key is optional; flags win over file values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Option<Profile>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub method: Option<Method>,
    pub methods: Option<Vec<Method>>,
    pub k: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub target: Option<u32>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub fake_batch: Option<usize>,
    pub class_balanced: Option<bool>,
    pub generator_steps: Option<usize>,
    pub temperature: Option<f64>,
    pub workers: Option<usize>,
    pub crop: Option<[usize; 2]>,
    pub source_ckpt: Option<PathBuf>,
    pub generator_ckpt: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
        Self::from_toml(&text)
    }

    /// Apply flag values on top of the file values.
    pub fn override_with(mut self, a: &RunArgs) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &a.$f { self.$f = Some(v.clone()); } )* };
        }
        take!(profile, data, out_dir, epochs, batch_size, lr, lambda, target, seed, seeds, fake_batch);
        take!(class_balanced, generator_steps, temperature, workers, source_ckpt, generator_ckpt);
        if let Some(m) = &a.method {
            self.method = m.first().copied();
            self.methods = Some(m.clone());
        }
        if let Some(k) = &a.k {
            self.k = k.first().copied();
            self.ks = Some(k.clone());
        }
        if let Some(c) = &a.crop {
            self.crop = Some([c[0], c[1]]);
        }
        self
    }

    pub fn resolve(&self, env_out_dir: Option<PathBuf>) -> CliResult<Resolved> {
        let profile = self.profile.unwrap_or_default();
        let base = profile.settings();
        let mut stage = base.stage.clone();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { stage.$f = v; } )* };
        }
        set!(epochs, batch_size, lr, lambda, method, k, seed, class_balanced, generator_steps, temperature);
        if let Some(t) = self.target {
            stage.target = SubjectId(t);
        }
        if self.fake_batch.is_some() {
            stage.fake_batch = self.fake_batch;
        }
        stage.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let crop = self.crop.or(base.crop.map(|(s, e)| [s, e]));
        if let Some([s, e]) = crop {
            if s >= e {
                return Err(CliError::Usage(format!("crop window [{s}, {e}) is empty")));
            }
        }
        let out_dir = self
            .out_dir
            .clone()
            .or(env_out_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        Ok(Resolved {
            profile,
            data: self.data.clone(),
            out_dir,
            ks: self.ks.clone().unwrap_or_else(|| (1..=5).collect()),
            methods: self.methods.clone().unwrap_or_else(|| Method::ALL.to_vec()),
            seeds: self.seeds.clone().unwrap_or_else(|| (0..5).collect()),
            workers: self.workers.unwrap_or(0),
            crop,
            source_ckpt: self.source_ckpt.clone(),
            generator_ckpt: self.generator_ckpt.clone(),
            model: base.model,
            generator: base.generator,
            stage,
        })
    }
}

/// The fully resolved settings of one command, echoed next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub profile: Profile,
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub ks: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub crop: Option<[usize; 2]>,
    pub source_ckpt: Option<PathBuf>,
    pub generator_ckpt: Option<PathBuf>,
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub stage: StageConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short content address of a JSON description.
fn address(v: &serde_json::Value) -> String {
    sha256_hex(v.to_string().as_bytes())[..16].to_string()
}

fn read_prerequisite(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|_| CliError::Missing(path.to_path_buf()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

impl Resolved {
    fn data_path(&self) -> CliResult<&Path> {
        self.data.as_deref().ok_or_else(|| CliError::Usage("no dataset given (--data or `data` in the config)".into()))
    }

    /// Hash of the raw dataset file; the file is not parsed.
    fn data_hash(&self) -> CliResult<String> {
        Ok(sha256_hex(&read_prerequisite(self.data_path()?)?))
    }

    fn load_data(&self) -> CliResult<Dataset> {
        let path = self.data_path()?;
        if !path.exists() {
            return Err(CliError::Missing(path.to_path_buf()));
        }
        let ds = load_dataset(path)?;
        Ok(match self.crop {
            Some([s, e]) if ds.t_len != e - s => crop_window(&ds, s, e)?,
            _ => ds,
        })
    }

    fn model_for(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig { d_in: ds.d_in, t_len: ds.t_len, n_classes: ds.n_classes, ..self.model }
    }

    fn source_path(&self) -> CliResult<PathBuf> {
        if let Some(p) = &self.source_ckpt {
            return Ok(p.clone());
        }
        let s = &self.stage;
        let key = address(&json!({
            "data": self.data_hash()?,
            "crop": self.crop,
            "model": self.model,
            "epochs": s.epochs,
            "batch_size": s.batch_size,
            "lr": s.lr,
            "seed": s.seed,
            "target": s.target,
        }));
        Ok(self.out_dir.join(format!("source-{key}.ckpt")))
    }

    fn generator_path(&self, source_bytes: &[u8]) -> PathBuf {
        if let Some(p) = &self.generator_ckpt {
            return p.clone();
        }
        let s = &self.stage;
        let key = address(&json!({
            "source": sha256_hex(source_bytes),
            "generator": { "d_z": self.generator.d_z, "hidden": self.generator.hidden },
            "epochs": s.epochs,
            "batch_size": s.batch_size,
            "fake_batch": s.fake_batch,
            "generator_steps": s.generator_steps,
            "lr": s.lr,
            "seed": s.seed,
        }));
        self.out_dir.join(format!("generator-{key}.ckpt"))
    }

    fn prepare_out_dir(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e).into())
    }

    fn echo(&self, artifact: &Path) -> CliResult<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Inconsistent(format!("config echo: {e}")))?;
        write(&artifact.with_extension("config.toml"), text)
    }

    fn load_source(&self) -> CliResult<(ClassifierModel, Vec<u8>)> {
        let path = self.source_path()?;
        let bytes = read_prerequisite(&path)?;
        Ok((ClassifierModel::from_bytes(&bytes)?, bytes))
    }

    fn load_generator(&self, source_bytes: &[u8]) -> CliResult<(GeneratorModel, Vec<u8>)> {
        let path = self.generator_path(source_bytes);
        let bytes = read_prerequisite(&path)?;
        Ok((GeneratorModel::from_bytes(&bytes)?, bytes))
    }
}

fn one<T: Copy + std::fmt::Debug>(what: &str, values: &[T]) -> CliResult<T> {
    match values {
        [v] => Ok(*v),
        _ => Err(CliError::Usage(format!("adapt takes a single {what}, got {values:?}"))),
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut cfg = a.profile.settings().synth;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    macro_rules! set {
        ($($f:ident: $g:ident),*) => { $( if let Some(v) = a.$f { cfg.$g = v; } )* };
    }
    set!(subjects: n_subjects, classes: n_classes, per_class: per_class, t_len: t_len, d_in: d_in, noise: noise);
    let ds = synth_benchmark(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_dataset(&ds, &a.out)?;
    println!("{}\t{} samples\t{}", a.out.display(), ds.len(), ds.content_hash()?);
    Ok(())
}

fn cmd_train_source(r: &Resolved) -> CliResult<()> {
    let ds = r.load_data()?;
    let target = r.stage.target;
    if !ds.subjects.contains(&target) {
        return Err(CliError::Usage(format!("target subject {target} is not in the dataset")));
    }
    let out = train_source(&source_split(&ds, target), r.model_for(&ds), &r.stage)?;
    r.prepare_out_dir()?;
    let path = r.source_path()?;
    out.best.save(&path)?;
    write(&path.with_extension("log.jsonl"), log_to_jsonl(&out.log)?)?;
    r.echo(&path)?;
    let val = out.best_val_acc.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    println!("{}\tbest val {val}", path.display());
    Ok(())
}

fn cmd_train_generator(r: &Resolved) -> CliResult<()> {
    let (source, bytes) = r.load_source()?;
    let sources: Vec<SubjectId> = Vec::new();
    let mut guard = SourceFreeGuard::new(Stage::Generator, sources);
    let cfg = GeneratorConfig { n_classes: source.config.n_classes, d_out: source.config.d_emb, ..r.generator };
    let out = train_generator(&source, cfg, &r.stage, &mut guard)?;
    r.prepare_out_dir()?;
    let path = r.generator_path(&bytes);
    out.generator.save(&path)?;
    write(&path.with_extension("log.jsonl"), log_to_jsonl(&out.log)?)?;
    r.echo(&path)?;
    let last = out.log.last().map_or(f64::NAN, |l| l.loss_total);
    println!("{}\tfinal loss {last:.4}", path.display());
    Ok(())
}

fn target_splits(ds: &Dataset, target: SubjectId) -> (Vec<crate::data::EegSample>, Vec<crate::data::EegSample>) {
    (ds.select(&[target], Split::Val).samples().to_vec(), ds.select(&[target], Split::Test).samples().to_vec())
}

fn cmd_adapt(r: &Resolved) -> CliResult<()> {
    let (source, source_bytes) = r.load_source()?;
    let (generator, gen_bytes) = r.load_generator(&source_bytes)?;
    let ds = r.load_data()?;
    let mut stage = r.stage.clone();
    stage.k = one("k", &r.ks)?;
    stage.method = one("method", &r.methods)?;
    let target = stage.target;
    let split = kshot_split(&ds, target, stage.k, stage.seed)?;
    let shots: Vec<_> = split.selected.iter().map(|&i| ds.sample(i).clone()).collect();
    let (val, test) = target_splits(&ds, target);
    let sources: Vec<SubjectId> = ds.subjects.iter().copied().filter(|&s| s != target).collect();
    let mut guard = SourceFreeGuard::new(Stage::Adapt, sources);
    let out = adapt_target(&source, &generator, &shots, &val, &stage, &mut guard)?;

    let score = |m: &ClassifierModel, s: &[crate::data::EegSample]| if s.is_empty() { Ok(0.0) } else { top1_accuracy(m, s) };
    let row = RunRow {
        subject: target,
        k: stage.k,
        method: stage.method,
        seed: stage.seed,
        val_acc: score(&out.best, &val)?,
        test_acc: score(&out.best, &test)?,
        final_val_acc: score(&out.model, &val)?,
        final_test_acc: score(&out.model, &test)?,
    };
    let mut report = RunReport::new(ds.n_classes, ds.content_hash()?);
    report.rows.push(row.clone());
    let report = aggregate(&[report])?;

    r.prepare_out_dir()?;
    let key = address(&json!({
        "source": sha256_hex(&source_bytes),
        "generator": sha256_hex(&gen_bytes),
        "data": r.data_hash()?,
        "crop": r.crop,
        "stage": stage,
    }));
    let path = r.out_dir.join(format!("adapt-{key}.ckpt"));
    out.best.save(&path)?;
    write(&path.with_extension("log.jsonl"), log_to_jsonl(&out.log)?)?;
    write(&path.with_extension("report.json"), report.to_json()?)?;
    r.echo(&path)?;
    println!(
        "{}\t{} k={} seed={}\tval {:.1}\ttest {:.1}",
        path.display(),
        row.method,
        row.k,
        row.seed,
        100.0 * row.val_acc,
        100.0 * row.test_acc
    );
    Ok(())
}

fn cmd_evaluate(r: &Resolved) -> CliResult<()> {
    let (source, source_bytes) = r.load_source()?;
    let (generator, gen_bytes) = r.load_generator(&source_bytes)?;
    let ds = r.load_data()?;
    let grid = GridSpec { ks: r.ks.clone(), methods: r.methods.clone(), seeds: r.seeds.clone(), workers: r.workers };
    let report = run_target_grid(&ds, r.stage.target, &source, &generator, &r.stage, &grid)?;

    r.prepare_out_dir()?;
    let key = address(&json!({
        "source": sha256_hex(&source_bytes),
        "generator": sha256_hex(&gen_bytes),
        "data": r.data_hash()?,
        "crop": r.crop,
        "stage": r.stage,
        "ks": r.ks,
        "methods": r.methods,
        "seeds": r.seeds,
    }));
    let path = r.out_dir.join(format!("report-{key}.json"));
    write(&path, report.to_json()?)?;
    write(&path.with_extension("md"), render_table(&report, TableFormat::Markdown)?)?;
    r.echo(&path)?;
    print!("{}", render_table(&report, TableFormat::Markdown)?);
    for f in &report.failures {
        eprintln!("cell failed: k={} {} seed={}: {}", f.k, f.method, f.seed, f.error);
    }
    println!("{}", path.display());
    if report.rows.is_empty() && !report.failures.is_empty() {
        return Err(Error::Inconsistent(format!("all {} grid cells failed", report.failures.len())).into());
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let mut reports = Vec::with_capacity(a.inputs.len());
    for path in &a.inputs {
        let text = String::from_utf8(read_prerequisite(path)?)
            .map_err(|_| Error::Inconsistent(format!("{} is not UTF-8", path.display())))?;
        reports.push(RunReport::from_json(&text)?);
    }
    let merged = aggregate(&reports)?;
    let table = render_table(&merged, a.format)?;
    if let Some(out) = &a.out {
        write(out, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn resolve(a: &RunArgs) -> CliResult<Resolved> {
    let file = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let env_out = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    file.override_with(a).resolve(env_out)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::SynthData(a) => cmd_synth(a),
        Command::TrainSource(a) => cmd_train_source(&resolve(a)?),
        Command::TrainGenerator(a) => cmd_train_generator(&resolve(a)?),
        Command::Adapt(a) => cmd_adapt(&resolve(a)?),
        Command::Evaluate(a) => cmd_evaluate(&resolve(a)?),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
