//! Command-line application: argument parsing, artifact plumbing and exit
//! codes (0 success, 1 runtime or data error, 2 usage or config error).

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{AppConfig, ConfigError, ProtocolChoice};

use crate::error::Error;
use crate::eval::{run_multiclass, run_one_shot, EvalConfig, MulticlassMode};
use crate::matcher::{export_features, load_db, save_db, ReferenceDb};
use crate::model_file::{self, SavedModel};
use crate::preprocess::correct_dataset;
use crate::sampler::{split_classes, SplitSpec};
use crate::spectra::{cache, parse_rruff, synth_dataset, ClassId, Dataset, Grid, RawSpectrum, Spectrum};
use crate::trainer::{train_siamese, NoObserver, ValidationPairs};

#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Runtime(Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) => write!(f, "usage error: {m}"),
            AppError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Runtime(e)
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(e.into())
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Usage(e.to_string())
    }
}

type AppResult<T> = std::result::Result<T, AppError>;

#[derive(Debug, Parser)]
#[command(name = "spectromatch", version, about = "One-shot spectrum matching with a Siamese CNN")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a directory of RRUFF text files into a dataset cache.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid start; defaults to the range shared by all files.
        #[arg(long)]
        grid_start: Option<f64>,
        #[arg(long)]
        grid_end: Option<f64>,
        #[arg(long)]
        grid_len: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic dataset cache from the `synth_*` config keys.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Baseline-correct a dataset cache with AsLS.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a Siamese model on the training classes of a cache.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run an evaluation protocol and write a long-format report CSV.
    Eval {
        #[arg(value_parser = ["one-shot", "multiclass"])]
        protocol: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        /// Multiclass only: evaluate the softmax classifier instead.
        #[arg(long)]
        classifier: bool,
        /// One-shot only: score the raw-spectrum baselines alone.
        #[arg(long)]
        baselines_only: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Manage a reference database.
    Db {
        #[command(subcommand)]
        action: DbAction,
    },
    /// Rank database classes for each query spectrum (TSV on stdout).
    Match {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// RRUFF text file or dataset cache.
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Write `sample_id,class_id,f0..` feature vectors as CSV.
    ExportFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Data, optional preprocessing, training, database and evaluation in one run.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Print the resolved configuration and stage plan; write nothing.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum DbAction {
    /// Add spectra from a cache; creates the database if it does not exist.
    Add {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only these class ids (comma separated).
        #[arg(long, value_delimiter = ',')]
        classes: Vec<ClassId>,
    },
    Remove {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        class: Vec<ClassId>,
    },
    List {
        #[arg(long)]
        db: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code; messages for the user go to `out`, errors to the log
/// and standard error.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn log_level(verbose: u8) -> log::LevelFilter {
    match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    }
}

fn resolve(args: &ConfigArgs) -> AppResult<AppConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| AppError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            AppConfig::from_text(&text)?
        }
        None => AppConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set_opt<T: ToString>(cfg: &mut AppConfig, key: &str, v: Option<T>) -> AppResult<()> {
    if let Some(v) = v {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn load_cache(path: &Path) -> AppResult<Dataset> {
    Ok(cache::load(path)?.0)
}

fn execute(cmd: Command, out: &mut dyn Write) -> AppResult<()> {
    match cmd {
        Command::Ingest { dir, out: path, grid_start, grid_end, grid_len, cfg } => {
            let mut c = resolve(&cfg)?;
            set_opt(&mut c, "grid_start", grid_start)?;
            set_opt(&mut c, "grid_end", grid_end)?;
            set_opt(&mut c, "grid_len", grid_len)?;
            c.data_dir = Some(dir.clone());
            c.check()?;
            let (ds, names) = ingest(&dir, &c, out)?;
            cache::save(&ds, &c.stamp(), &path)?;
            write_class_names(&names, &path)?;
            writeln!(out, "wrote {} ({} classes, {} samples)", path.display(), ds.n_classes(), ds.len())?;
        }
        Command::Synth { out: path, cfg } => {
            let c = resolve(&cfg)?;
            let ds = synth_dataset(&c.synth_config()?)?;
            cache::save(&ds, &c.stamp(), &path)?;
            writeln!(out, "wrote {} ({} classes, {} samples)", path.display(), ds.n_classes(), ds.len())?;
        }
        Command::Preprocess { data, out: path, lambda, p, max_iter, cfg } => {
            let mut c = resolve(&cfg)?;
            set_opt(&mut c, "asls_lambda", lambda)?;
            set_opt(&mut c, "asls_p", p)?;
            set_opt(&mut c, "asls_max_iter", max_iter)?;
            c.check()?;
            let ds = correct_dataset(&load_cache(&data)?, &c.asls)?;
            cache::save(&ds, &c.stamp(), &path)?;
            writeln!(out, "wrote {} ({} samples corrected)", path.display(), ds.len())?;
        }
        Command::Train { data, out: path, report, cfg } => {
            let mut c = resolve(&cfg)?;
            let ds = load_cache(&data)?;
            adopt_grid(&mut c, &ds)?;
            let summary = train_stage(&ds, &c, &path, report.as_deref())?;
            writeln!(out, "{summary}")?;
        }
        Command::Eval { protocol, data, out: path, repeats, classifier, baselines_only, cfg } => {
            let mut c = resolve(&cfg)?;
            set_opt(&mut c, "repeats", repeats)?;
            c.protocol = match (protocol.as_str(), classifier) {
                ("one-shot", false) => ProtocolChoice::OneShot,
                ("multiclass", false) => ProtocolChoice::Multiclass,
                ("multiclass", true) => ProtocolChoice::MulticlassClassifier,
                _ => return Err(AppError::Usage("--classifier applies to the multiclass protocol only".into())),
            };
            let ds = load_cache(&data)?;
            adopt_grid(&mut c, &ds)?;
            let summary = eval_stage(&ds, &c, !baselines_only, &path)?;
            write!(out, "{summary}")?;
        }
        Command::Db { action } => db_command(action, out)?,
        Command::Match { db, model, query, top } => {
            if top == 0 {
                return Err(AppError::Usage("--top must be >= 1".into()));
            }
            let (model, _) = model_file::load_siamese(&model)?;
            let (db, _) = load_db(&db)?;
            let queries = read_queries(&query, db.grid())?;
            writeln!(out, "query\trank\tclass_id\tscore")?;
            for q in &queries {
                let res = db.match_one_shot(q, &model, 1)?;
                for (rank, r) in res.top(top).iter().enumerate() {
                    writeln!(out, "{}\t{}\t{}\t{:.6}", q.sample_id, rank + 1, r.class_id, r.score)?;
                }
            }
        }
        Command::ExportFeatures { model, data, out: path } => {
            let (model, _) = model_file::load_siamese(&model)?;
            let ds = load_cache(&data)?;
            let refs: Vec<&Spectrum> = ds.spectra().iter().collect();
            let mut buf = Vec::new();
            export_features(&refs, &model, &mut buf)?;
            fs::write(&path, buf)?;
            writeln!(out, "wrote {} ({} rows)", path.display(), refs.len())?;
        }
        Command::Pipeline { config, dry_run } => {
            let c = resolve(&ConfigArgs { config: Some(config), seed: None })?;
            pipeline(&c, dry_run, out)?;
        }
    }
    Ok(())
}

/// Adopts the grid length of a loaded cache so the architecture matches it.
fn adopt_grid(c: &mut AppConfig, ds: &Dataset) -> AppResult<()> {
    let grid = ds.grid().ok_or(Error::Format("dataset is empty".into()))?;
    c.grid_len = grid.len;
    c.check()?;
    Ok(())
}

/// Parses every regular file in `dir` (sorted by name). Classes are keyed by
/// the `NAMES` header and numbered in sorted name order. Files that fail to
/// parse are reported and skipped.
pub fn ingest(dir: &Path, c: &AppConfig, out: &mut dyn Write) -> AppResult<(Dataset, Vec<String>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut parsed: Vec<(String, String, RawSpectrum)> = Vec::new();
    for p in &paths {
        let result = fs::read_to_string(p).map_err(Error::from).and_then(|t| parse_rruff(&t));
        match result {
            Ok(raw) => match raw.metadata.get("NAMES").filter(|n| !n.is_empty()).cloned() {
                Some(name) => {
                    let stem = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                    parsed.push((name, stem, raw));
                }
                None => writeln!(out, "skipped {}: no NAMES header", p.display())?,
            },
            Err(e) => writeln!(out, "skipped {}: {e}", p.display())?,
        }
    }
    if parsed.is_empty() {
        return Err(Error::Format(format!("no valid spectrum files in {}", dir.display())).into());
    }
    let shared = Grid::intersection(parsed.iter().map(|(_, _, r)| r), c.grid_len)?;
    let grid = Grid::new(c.grid_start.unwrap_or(shared.start), c.grid_end.unwrap_or(shared.end), c.grid_len)?;
    let names: Vec<String> = parsed.iter().map(|(n, _, _)| n.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let id_of: BTreeMap<&str, ClassId> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i as ClassId)).collect();
    let spectra = parsed
        .iter()
        .map(|(name, stem, raw)| Spectrum::from_raw(raw, grid, id_of[name.as_str()], stem.clone()))
        .collect::<crate::Result<Vec<_>>>()?;
    Ok((Dataset::new(spectra)?, names))
}

fn write_class_names(names: &[String], cache_path: &Path) -> AppResult<()> {
    let mut text = String::from("class_id\tname\n");
    for (i, n) in names.iter().enumerate() {
        text.push_str(&format!("{i}\t{n}\n"));
    }
    fs::write(class_names_path(cache_path), text)?;
    Ok(())
}

pub fn class_names_path(cache_path: &Path) -> PathBuf {
    let mut s = cache_path.as_os_str().to_owned();
    s.push(".classes.tsv");
    PathBuf::from(s)
}

fn read_queries(path: &Path, grid: Grid) -> AppResult<Vec<Spectrum>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(cache::MAGIC) {
        let (ds, _) = cache::decode(&bytes)?;
        return Ok(ds.spectra().to_vec());
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is neither a cache nor text", path.display())))?;
    let raw = parse_rruff(&text)?;
    let id = path.file_stem().map_or_else(|| "query".into(), |s| s.to_string_lossy().into_owned());
    Ok(vec![Spectrum::from_raw(&raw, grid, 0, id)?])
}

/// Trains on the training classes of the configured split, validates on the
/// validation classes, writes the model (and report) and returns a summary.
fn train_stage(ds: &Dataset, c: &AppConfig, model_path: &Path, report: Option<&Path>) -> AppResult<String> {
    let (s_tr, s_va, s_te) = c.split;
    let split = split_classes(&ds.class_ids(), &SplitSpec::new(s_tr, s_va, s_te, c.seed)?)?;
    let train = ds.restrict_to(&split.train);
    let val = ValidationPairs::from_classes(&ds.restrict_to(&split.val), c.train.val_pairs, c.seed)?;
    let tcfg = c.train_config()?;
    let (model, rep) = train_siamese(&train, &val, &c.architecture(), &tcfg, &mut NoObserver)?;
    model_file::save(&SavedModel::Siamese(model), &c.stamp(), model_path)?;
    if let Some(p) = report {
        fs::write(p, rep.to_csv(&c.stamp()))?;
    }
    Ok(format!(
        "trained on {} classes, validated on {}, {} held out; best epoch {} (val loss {:.4}); wrote {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        rep.best_epoch,
        rep.best_val_loss(),
        model_path.display()
    ))
}

fn eval_stage(ds: &Dataset, c: &AppConfig, with_siamese: bool, report_path: &Path) -> AppResult<String> {
    let mut ecfg = EvalConfig::new(c.architecture(), c.train_config()?);
    ecfg.repeats = c.repeats;
    ecfg.seed = c.seed;
    ecfg.split = c.split;
    ecfg.k = c.top_k;
    ecfg.with_siamese = with_siamese;
    let report = match c.protocol {
        ProtocolChoice::None => return Ok(String::new()),
        ProtocolChoice::OneShot => run_one_shot(ds, &ecfg, &mut NoObserver)?,
        ProtocolChoice::Multiclass => run_multiclass(ds, &ecfg, MulticlassMode::Siamese, &mut NoObserver)?,
        ProtocolChoice::MulticlassClassifier => run_multiclass(ds, &ecfg, MulticlassMode::Classifier, &mut NoObserver)?,
    };
    fs::write(report_path, report.to_csv(&c.stamp()))?;
    Ok(report.summary())
}

fn db_command(action: DbAction, out: &mut dyn Write) -> AppResult<()> {
    match action {
        DbAction::Add { db: path, model, data, classes } => {
            let (model, _) = model_file::load_siamese(&model)?;
            let (mut db, stamp) = if path.exists() {
                load_db(&path)?
            } else {
                let stamp = format!("spectromatch {}\nmodel={:08x}", env!("CARGO_PKG_VERSION"), model_file::snapshot_id(&model));
                (ReferenceDb::new(&model), stamp)
            };
            let ds = load_cache(&data)?;
            let wanted: BTreeSet<ClassId> = classes.into_iter().collect();
            let picked: Vec<&Spectrum> = ds.spectra().iter().filter(|s| wanted.is_empty() || wanted.contains(&s.class_id)).collect();
            db.add_all(&picked, &model)?;
            save_db(&db, &stamp, &path)?;
            writeln!(out, "added {} spectra; db now has {} entries in {} classes", picked.len(), db.len(), db.n_classes())?;
        }
        DbAction::Remove { db: path, class } => {
            let (mut db, stamp) = load_db(&path)?;
            let mut removed = 0;
            for c in class {
                removed += db.remove(c)?.len();
            }
            save_db(&db, &stamp, &path)?;
            writeln!(out, "removed {removed} entries; db now has {} entries in {} classes", db.len(), db.n_classes())?;
        }
        DbAction::List { db: path } => {
            let (db, stamp) = load_db(&path)?;
            for line in stamp.lines() {
                writeln!(out, "# {line}")?;
            }
            writeln!(out, "# model={:08x} entries={} classes={}", db.snapshot_id(), db.len(), db.n_classes())?;
            writeln!(out, "class_id\tentries\tsample_ids")?;
            for class in db.classes().collect::<Vec<_>>() {
                let entries = db.entries(class).unwrap_or(&[]);
                let ids: Vec<&str> = entries.iter().map(|e| e.spectrum.sample_id.as_str()).collect();
                writeln!(out, "{class}\t{}\t{}", entries.len(), ids.join(","))?;
            }
        }
    }
    Ok(())
}

/// Artifact file names inside `out_dir`.
pub mod artifacts {
    pub const DATASET: &str = "dataset.spcd";
    pub const CORRECTED: &str = "dataset_corrected.spcd";
    pub const MODEL: &str = "model.ssnm";
    pub const TRAIN_REPORT: &str = "train_report.csv";
    pub const DB: &str = "db.spdb";
    pub const EVAL_REPORT: &str = "eval_report.csv";
    pub const CONFIG: &str = "config.resolved";
}

fn pipeline(c: &AppConfig, dry_run: bool, out: &mut dyn Write) -> AppResult<()> {
    let source = if c.synth {
        format!("synthesize {} classes x {} samples", c.synth_classes, c.synth_samples)
    } else if let Some(p) = &c.cache {
        format!("load cache {}", p.display())
    } else if let Some(d) = &c.data_dir {
        format!("ingest {}", d.display())
    } else {
        return Err(AppError::Usage("config needs one of `synth = true`, `cache` or `data_dir`".into()));
    };
    let dir = &c.out_dir;
    let a = |name: &str| dir.join(name);
    let mut plan = vec![format!("data: {source} -> {}", a(artifacts::DATASET).display())];
    if c.preprocess {
        plan.push(format!("preprocess: AsLS lambda={} p={} -> {}", c.asls.lambda, c.asls.p, a(artifacts::CORRECTED).display()));
    }
    plan.push(format!(
        "train: {} epochs, batch {}, lr {} -> {}, {}",
        c.train.epochs,
        c.train.batch_size,
        c.train.base_lr,
        a(artifacts::MODEL).display(),
        a(artifacts::TRAIN_REPORT).display()
    ));
    plan.push(format!("db: every sample -> {}", a(artifacts::DB).display()));
    if c.protocol != ProtocolChoice::None {
        plan.push(format!("eval: {} x {} repeats -> {}", c.protocol.name(), c.repeats, a(artifacts::EVAL_REPORT).display()));
    }
    if dry_run {
        writeln!(out, "# resolved configuration (hash {:08x})", c.hash())?;
        write!(out, "{}", c.render())?;
        writeln!(out, "# stage plan")?;
        for (i, s) in plan.iter().enumerate() {
            writeln!(out, "{}. {s}", i + 1)?;
        }
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    let stamp = c.stamp();
    let mut c = c.clone();
    fs::write(a(artifacts::CONFIG), format!("# {}\n{}", stamp.replace('\n', "\n# "), c.render()))?;

    let mut ds = if c.synth {
        synth_dataset(&c.synth_config()?)?
    } else if let Some(p) = &c.cache {
        load_cache(p)?
    } else {
        let (ds, names) = ingest(c.data_dir.as_deref().expect("checked above"), &c, out)?;
        write_class_names(&names, &a(artifacts::DATASET))?;
        ds
    };
    adopt_grid(&mut c, &ds)?;
    cache::save(&ds, &stamp, &a(artifacts::DATASET))?;
    writeln!(out, "data: {} classes, {} samples", ds.n_classes(), ds.len())?;
    if c.preprocess {
        ds = correct_dataset(&ds, &c.asls)?;
        cache::save(&ds, &stamp, &a(artifacts::CORRECTED))?;
        writeln!(out, "preprocess: done")?;
    }
    let summary = train_stage(&ds, &c, &a(artifacts::MODEL), Some(&a(artifacts::TRAIN_REPORT)))?;
    writeln!(out, "train: {summary}")?;
    let (model, _) = model_file::load_siamese(&a(artifacts::MODEL))?;
    let mut db = ReferenceDb::new(&model);
    db.add_all(&ds.spectra().iter().collect::<Vec<_>>(), &model)?;
    save_db(&db, &stamp, &a(artifacts::DB))?;
    writeln!(out, "db: {} entries", db.len())?;
    if c.protocol != ProtocolChoice::None {
        let summary = eval_stage(&ds, &c, true, &a(artifacts::EVAL_REPORT))?;
        write!(out, "eval: {summary}")?;
    }
    Ok(())
}
