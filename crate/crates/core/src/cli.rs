//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data validation
//! error, 3 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Error;
use crate::features::{load_cohort, Cohort, Split};
use crate::metrics::{threshold_csv_line, THRESHOLD_CSV_HEADER};
use crate::synthdata::{generate_cohort, split_cohort, CODES_FILE, RECORDS_FILE};
use crate::training::{
    evaluate_model, run_ablation, train_student, train_teacher, AblationReport, Model,
    TeacherLogitTable, VariantSpec,
};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const THRESHOLDS_CSV: &str = "thresholds.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const TEACHER_MODEL: &str = "teacher.json";
pub const TEACHER_LOGITS: &str = "teacher_logits.csv";
pub const STUDENT_MODEL: &str = "student.json";

#[derive(Debug, Parser)]
#[command(name = "cckd", version, about = "Distil note-embedding teachers into structured-data students")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config; falls back to $CCKD_CONFIG, then built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and split a synthetic cohort.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the note-embedding teacher and export its training-split logits.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Directory holding records.jsonl and codes.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one structured-only student from precomputed teacher logits.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher logit CSV (needed by variants with a CKD term).
        #[arg(long)]
        teacher_logits: Option<PathBuf>,
        #[arg(long, default_value = "cckd_student")]
        variant: VariantSpec,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every selected variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Existing cohort directory; a synthetic cohort is generated per seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated variant list (default: from config).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<VariantSpec>>,
        /// Number of consecutive master seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on the test split of a records file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// Code-vector table; defaults to codes.jsonl next to the records.
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge ablation runs into a mean/std summary.
    Report {
        /// Run directories (each with report.json, or with seed-* subdirectories).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Maps an error chain to the documented exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) | Some(Error::Io { .. }) => 1,
        Some(Error::Numeric(_)) | Some(Error::DegenerateVector { .. }) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(common.config.as_deref())?;
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e).into())
}

fn load_data_dir(dir: &Path) -> Result<Cohort> {
    load_cohort(&dir.join(RECORDS_FILE), &dir.join(CODES_FILE))
        .with_context(|| format!("loading cohort from {}", dir.display()))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { common, out } => cmd_gen(&resolve_config(&common)?, &out),
        Command::TrainTeacher { common, data, out } => {
            let cfg = resolve_config(&common)?;
            let cohort = load_data_dir(&data)?;
            create_dir(&out)?;
            let (model, logits) = train_teacher(&cohort, &cfg.train)?;
            Model::Teacher(model).save(&out.join(TEACHER_MODEL))?;
            logits.write_csv(&out.join(TEACHER_LOGITS))?;
            cfg.write_effective(&out)?;
            Ok(())
        }
        Command::Distill {
            common,
            data,
            teacher_logits,
            variant,
            out,
        } => {
            let cfg = resolve_config(&common)?;
            let cohort = load_data_dir(&data)?;
            let logits = match teacher_logits {
                Some(p) => TeacherLogitTable::read_csv(&p)?,
                None => TeacherLogitTable::default(),
            };
            create_dir(&out)?;
            let model = train_student(&cohort, &logits, variant, &cfg.train)?;
            Model::Student(model).save(&out.join(STUDENT_MODEL))?;
            cfg.write_effective(&out)?;
            Ok(())
        }
        Command::Ablate {
            common,
            data,
            variants,
            seeds,
            parallel_seeds,
            out,
        } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(v) = variants {
                if v.is_empty() {
                    return Err(Error::Config("--variants is empty".into()).into());
                }
                cfg.variants = v;
            }
            cmd_ablate(&cfg, data.as_deref(), seeds, parallel_seeds, &out)
        }
        Command::Eval {
            common,
            model,
            records,
            codes,
            out,
        } => {
            let cfg = resolve_config(&common)?;
            let codes = codes.unwrap_or_else(|| records.with_file_name(CODES_FILE));
            cmd_eval(&cfg, &model, &records, &codes, &out)
        }
        Command::Report { runs, out } => cmd_report(&runs, &out),
    }
}

/// Generates, splits and writes a synthetic cohort plus its effective config.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut synth = generate_cohort(&cfg.synth)?;
    split_cohort(&mut synth.cohort, cfg.train_fraction, cfg.seed)?;
    synth.write(out)?;
    cfg.write_effective(out)?;
    Ok(())
}

fn cohort_for(cfg: &RunConfig, data: Option<&Path>) -> Result<Cohort> {
    match data {
        Some(dir) => load_data_dir(dir),
        None => {
            let mut synth = generate_cohort(&cfg.synth)?;
            split_cohort(&mut synth.cohort, cfg.train_fraction, cfg.seed)?;
            Ok(synth.cohort)
        }
    }
}

/// One ablation at `cfg.seed`, written into `out`.
pub fn ablate_once(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<AblationReport> {
    let cohort = cohort_for(cfg, data)?;
    let report = run_ablation(&cohort, &cfg.train, &cfg.variants, cfg.bootstrap_resamples)?;
    create_dir(out)?;
    write_report(&report, out)?;
    cfg.write_effective(out)?;
    Ok(report)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed:04}"))
}

/// Runs `seeds` consecutive master seeds. A single seed writes into `out`
/// directly; several seeds write `seed-NNNN` subdirectories plus a summary.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data: Option<&Path>,
    seeds: u64,
    parallel_seeds: usize,
    out: &Path,
) -> Result<()> {
    if seeds == 0 || parallel_seeds == 0 {
        return Err(Error::Config("--seeds and --parallel-seeds must be at least 1".into()).into());
    }
    create_dir(out)?;
    let reports = if seeds == 1 {
        vec![ablate_once(cfg, data, out)?]
    } else {
        let run_seed = |s: u64| {
            let c = cfg.clone().with_seed(s);
            let r = ablate_once(&c, data, &seed_dir(out, s));
            if r.is_ok() {
                eprintln!("seed {s} done");
            }
            r
        };
        let list: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
        let results: Vec<Result<AblationReport>> = if parallel_seeds > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(parallel_seeds)
                .build()
                .context("building the seed thread pool")?;
            pool.install(|| list.par_iter().map(|&s| run_seed(s)).collect())
        } else {
            list.iter().map(|&s| run_seed(s)).collect()
        };
        let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
        cfg.write_effective(out)?;
        write_summary(&summarize(&reports), out)?;
        reports
    };
    if reports.iter().all(AblationReport::all_failed) {
        let reasons: Vec<String> = reports
            .iter()
            .flat_map(|r| &r.variants)
            .filter_map(|v| v.error.as_ref().map(|e| format!("{}: {e}", v.variant)))
            .collect();
        return Err(Error::validation(format!("all variants failed ({})", reasons.join("; "))).into());
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `report.json`, `report.csv` (one row per variant) and `thresholds.csv`.
pub fn write_report(report: &AblationReport, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("reports serialize");
    write_file(&dir.join(REPORT_JSON), &(json + "\n"))?;

    let mut table = String::from(
        "variant,name,training_modalities,deployment_modalities,auroc,ci_low,ci_high,epochs_run,error\n",
    );
    let mut thresholds = format!("variant,{THRESHOLD_CSV_HEADER}\n");
    for v in &report.variants {
        let r = v.report.as_ref();
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            v.variant,
            csv_text(&v.name),
            csv_text(&v.training_modalities),
            csv_text(&v.deployment_modalities),
            opt(r.map(|r| r.auroc)),
            opt(r.map(|r| r.ci_low)),
            opt(r.map(|r| r.ci_high)),
            v.epochs_run.map(|e| e.to_string()).unwrap_or_default(),
            csv_text(v.error.as_deref().unwrap_or("")),
        )
        .expect("writing to a string");
        for row in r.into_iter().flat_map(|r| &r.thresholds) {
            writeln!(thresholds, "{},{}", v.variant, threshold_csv_line(row)).expect("writing to a string");
        }
    }
    write_file(&dir.join(REPORT_CSV), &table)?;
    write_file(&dir.join(THRESHOLDS_CSV), &thresholds)
}

/// Mean and spread of one variant's AUROC across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: VariantSpec,
    pub name: String,
    pub seeds: Vec<u64>,
    pub aurocs: Vec<f64>,
    pub failures: usize,
    pub mean_auroc: Option<f64>,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub std_auroc: Option<f64>,
    pub mean_ci_low: Option<f64>,
    pub mean_ci_high: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

#[derive(Default)]
struct Tally {
    name: String,
    seeds: Vec<u64>,
    aurocs: Vec<f64>,
    lows: Vec<f64>,
    highs: Vec<f64>,
    failures: usize,
}

/// Per-variant summary, in order of first appearance.
pub fn summarize(reports: &[AblationReport]) -> Vec<VariantSummary> {
    let mut order = Vec::new();
    let mut acc: BTreeMap<VariantSpec, Tally> = BTreeMap::new();
    for rep in reports {
        for v in &rep.variants {
            let t = acc.entry(v.variant).or_insert_with(|| {
                order.push(v.variant);
                Tally {
                    name: v.name.clone(),
                    ..Tally::default()
                }
            });
            match &v.report {
                Some(r) => {
                    t.seeds.push(rep.seed);
                    t.aurocs.push(r.auroc);
                    t.lows.push(r.ci_low);
                    t.highs.push(r.ci_high);
                }
                None => t.failures += 1,
            }
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let t = acc.remove(&variant).expect("present");
            VariantSummary {
                variant,
                name: t.name,
                mean_auroc: mean(&t.aurocs),
                std_auroc: sample_std(&t.aurocs),
                mean_ci_low: mean(&t.lows),
                mean_ci_high: mean(&t.highs),
                seeds: t.seeds,
                aurocs: t.aurocs,
                failures: t.failures,
            }
        })
        .collect()
}

pub fn write_summary(summary: &[VariantSummary], dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(summary).expect("summaries serialize");
    write_file(&dir.join(SUMMARY_JSON), &(json + "\n"))?;
    let mut csv = String::from("variant,name,n_seeds,failures,mean_auroc,std_auroc,mean_ci_low,mean_ci_high\n");
    for s in summary {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            s.variant,
            csv_text(&s.name),
            s.aurocs.len(),
            s.failures,
            opt(s.mean_auroc),
            opt(s.std_auroc),
            opt(s.mean_ci_low),
            opt(s.mean_ci_high)
        )
        .expect("writing to a string");
    }
    write_file(&dir.join(SUMMARY_CSV), &csv)
}

/// Scores the test split of `records` with a saved model.
pub fn cmd_eval(cfg: &RunConfig, model: &Path, records: &Path, codes: &Path, out: &Path) -> Result<()> {
    let model = Model::load(model)?;
    let cohort = load_cohort(records, codes)?;
    if cohort.split(Split::Test).is_empty() {
        return Err(Error::validation(format!("{} has no test-split records", records.display())).into());
    }
    let report = evaluate_model(&model, &cohort, cfg.bootstrap_resamples, cfg.seed)?;
    create_dir(out)?;
    report.write_json(&out.join(EVAL_JSON))?;
    report.write_threshold_csv(&out.join(THRESHOLDS_CSV))?;
    cfg.write_effective(out)?;
    Ok(())
}

fn read_report(path: &Path) -> Result<AblationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
        .map_err(Into::into)
}

/// Collects `report.json` from each run directory, descending one level into
/// `seed-*` subdirectories, and writes the merged summary.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut reports = Vec::new();
    for run in runs {
        let direct = run.join(REPORT_JSON);
        if direct.is_file() {
            reports.push(read_report(&direct)?);
            continue;
        }
        let mut subdirs: Vec<PathBuf> = fs::read_dir(run)
            .map_err(|e| Error::io(run, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(REPORT_JSON).is_file())
            .collect();
        if subdirs.is_empty() {
            return Err(Error::validation(format!("no {REPORT_JSON} found under {}", run.display())).into());
        }
        subdirs.sort();
        for d in subdirs {
            reports.push(read_report(&d.join(REPORT_JSON))?);
        }
    }
    create_dir(out)?;
    write_summary(&summarize(&reports), out)
}
