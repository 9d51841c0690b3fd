//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::io::{read_kitti_labels, write_kitti_labels};
use crate::network::{BlockVariant, Network};
use crate::par;
use crate::partition::{encoding_upper_bound_miou, occupancy_by_distance, LabelEncoding};
use crate::selftest::{end_to_end_gradient_check, isolated_gradient_suite, oracle_suite};
use crate::training::{evaluate, metrics_csv, train_loop};

use super::config::{NamedScan, RunConfig, Split};
use super::metrics::ConfusionMatrix;

#[derive(Debug, Parser)]
#[command(name = "cylseg", version, about = "Cylindrical partition LiDAR segmentation")]
struct Cli {
    /// Worker threads for data-parallel work (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration file.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Non-empty cell proportion per distance bin, cylindrical vs cubic, over the test split.
    Stats {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Majority/minority label-encoding upper-bound mIoU per test scan.
    Bound {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the train split; writes a checkpoint and a metrics CSV.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Per-class IoU and mIoU on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score `.label` files written by `infer` instead of running the network.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write `.label` predictions for every test scan.
    Infer {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sparse-vs-dense oracle and finite-difference gradient suites.
    Selftest {
        /// Random oracle instances.
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probed entries per parameter block (0 = all).
        #[arg(long, default_value_t = 16)]
        cap: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Runs the CLI with process stdout/stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    cli_main_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Runs the CLI writing reports to `out` and diagnostics to `err`.
pub fn cli_main_with<I, T>(argv: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Failure::Usage("--threads must be positive".into())),
        Some(n) => par::with_threads(n, || run(cli.command, out, err)),
        None => run(cli.command, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
    }
}

fn load(cfg: &ConfigArg) -> std::result::Result<RunConfig, Failure> {
    RunConfig::load(&cfg.config).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(e.to_string()),
        other => other.into(),
    })
}

fn emit(text: &str, path: Option<&Path>, out: &mut (dyn Write + Send)) -> CliResult {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e).into()),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Runtime(e.to_string())),
    }
}

fn clouds(scans: Vec<NamedScan>) -> Vec<crate::io::PointCloud> {
    scans.into_iter().map(|s| s.cloud).collect()
}

fn run(command: Command, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> CliResult {
    match command {
        Command::Stats { cfg, out: path } => {
            let rc = load(&cfg)?;
            let scans = clouds(rc.scans(Split::Test, false)?);
            let table = occupancy_by_distance(&scans, &rc.network.grid, &rc.cubic, &rc.distance_edges)?;
            emit(&table.to_csv(), path.as_deref(), out)
        }
        Command::Bound { cfg, out: path } => {
            let rc = load(&cfg)?;
            let csv = bound_csv(&rc, &rc.scans(Split::Test, true)?)?;
            emit(&csv, path.as_deref(), out)
        }
        Command::Train {
            cfg,
            checkpoint,
            metrics,
        } => {
            let rc = load(&cfg)?;
            let train = clouds(rc.scans(Split::Train, true)?);
            let val = clouds(rc.scans(Split::Val, true)?);
            let started = Instant::now();
            let outcome = train_loop(&rc.network, &train, &val, &rc.train)?;
            for r in &outcome.history {
                let miou = r.val_miou.map(|m| format!("{:.1}", 100.0 * m)).unwrap_or_else(|| "-".into());
                let _ = writeln!(err, "epoch {:>3}  loss {:.6}  val mIoU {miou}", r.epoch, r.loss.total);
            }
            let ckpt = checkpoint.unwrap_or(rc.paths.checkpoint);
            let metrics = metrics.unwrap_or(rc.paths.metrics);
            outcome.network.save(&ckpt)?;
            emit(&metrics_csv(&outcome.history), Some(&metrics), out)?;
            let _ = writeln!(
                err,
                "trained {} scans for {} epochs in {:.1}s; wrote {} and {}",
                train.len(),
                outcome.history.len(),
                started.elapsed().as_secs_f64(),
                ckpt.display(),
                metrics.display()
            );
            Ok(())
        }
        Command::Eval {
            cfg,
            checkpoint,
            predictions,
        } => {
            let rc = load(&cfg)?;
            let scans = rc.scans(Split::Test, true)?;
            let cm = match predictions {
                Some(dir) => score_label_files(&rc, &scans, &dir)?,
                None => {
                    let net = load_network(&rc, checkpoint)?;
                    evaluate(&net, &clouds(scans), rc.label_map.ignore_id())?
                }
            };
            emit(&cm.format_table(rc.class_names.as_deref()), None, out)
        }
        Command::Infer { cfg, checkpoint, out: dir } => {
            let rc = load(&cfg)?;
            let net = load_network(&rc, checkpoint)?;
            let dir = dir.unwrap_or_else(|| rc.paths.predictions.clone());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let scans = rc.scans(Split::Test, false)?;
            let preds = par::map_slice(&scans, |s| net.predict(&s.cloud));
            for (s, p) in scans.iter().zip(preds) {
                write_kitti_labels(dir.join(format!("{}.label", s.name)), &p?, &rc.label_map)?;
            }
            let _ = writeln!(err, "wrote {} prediction files to {}", scans.len(), dir.display());
            Ok(())
        }
        Command::Selftest { instances, seed, cap } => selftest(instances, seed, cap, out),
    }
}

fn load_network(rc: &RunConfig, checkpoint: Option<PathBuf>) -> std::result::Result<Network, Failure> {
    let path = checkpoint.unwrap_or_else(|| rc.paths.checkpoint.clone());
    let net = Network::load(&path)?;
    if net.config != rc.network {
        return Err(Failure::Usage(format!(
            "checkpoint {} was trained with a different network config",
            path.display()
        )));
    }
    Ok(net)
}

fn score_label_files(rc: &RunConfig, scans: &[NamedScan], dir: &Path) -> std::result::Result<ConfusionMatrix, Failure> {
    let ignore = rc.label_map.ignore_id();
    let mut total = ConfusionMatrix::new(rc.network.num_classes, ignore);
    for s in scans {
        let pred = read_kitti_labels(dir.join(format!("{}.label", s.name)), &rc.label_map)?;
        let truth = s.cloud.labels.as_deref().ok_or(Error::NoLabels)?;
        if pred.len() != truth.len() {
            return Err(Error::LabelCount {
                labels: pred.len(),
                points: truth.len(),
            }
            .into());
        }
        total.update(truth, &pred)?;
    }
    Ok(total)
}

pub const BOUND_HEADER: &str = "scheme,encoding,scan,upper_bound_miou";

/// One row per (partition, encoding, scan) plus a `mean` row per pair.
fn bound_csv(rc: &RunConfig, scans: &[NamedScan]) -> crate::Result<String> {
    if scans.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = rc.network.num_classes;
    let ignore = rc.label_map.ignore_id();
    let encodings = [("majority", LabelEncoding::Majority), ("minority", LabelEncoding::Minority)];
    let mut s = String::from(BOUND_HEADER);
    s.push('\n');
    for scheme in ["cylindrical", "cubic"] {
        for (ename, enc) in encodings {
            let values: Vec<f64> = par::map_slice(scans, |scan| match scheme {
                "cylindrical" => encoding_upper_bound_miou(&scan.cloud, &rc.network.grid, enc, k, ignore),
                _ => encoding_upper_bound_miou(&scan.cloud, &rc.cubic, enc, k, ignore),
            })
            .into_iter()
            .collect::<crate::Result<_>>()?;
            for (scan, v) in scans.iter().zip(&values) {
                let _ = writeln!(s, "{scheme},{ename},{},{v}", scan.name);
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let _ = writeln!(s, "{scheme},{ename},mean,{mean}");
        }
    }
    Ok(s)
}

fn selftest(instances: usize, seed: u64, cap: usize, out: &mut (dyn Write + Send)) -> CliResult {
    let cap = (cap > 0).then_some(cap);
    let mut ok = true;
    let mut log = String::new();
    let started = Instant::now();
    let oracle = oracle_suite(instances, seed)?;
    for k in &oracle.by_kernel {
        let _ = writeln!(
            log,
            "oracle {:<16} instances {:>4}  max abs err {:.2e}  site mismatches {}",
            k.kernel, k.instances, k.max_abs_error, k.site_mismatches
        );
    }
    ok &= oracle.passed();
    let _ = writeln!(
        log,
        "{} oracle: {} instances, max abs err {:.2e}",
        verdict(oracle.passed()),
        oracle.instances,
        oracle.max_abs_error()
    );
    for (name, report) in isolated_gradient_suite(seed, cap)? {
        ok &= report.passed();
        let _ = writeln!(log, "{} gradient {name:<28} max rel err {:.2e}", verdict(report.passed()), report.max_error());
    }
    for variant in [BlockVariant::Asym, BlockVariant::Asym1d, BlockVariant::Regular] {
        let r = end_to_end_gradient_check(seed, variant, cap)?;
        ok &= r.passed();
        let _ = writeln!(
            log,
            "{} end-to-end {variant:<8} max rel err {:.2e}  directional rel err {:.2e}  refined entries {}",
            verdict(r.passed()),
            r.per_tensor.max_error(),
            r.jvp.2,
            r.per_tensor.blocks.iter().map(|b| b.refined).sum::<usize>()
        );
    }
    let _ = writeln!(log, "selftest {} in {:.1}s", if ok { "passed" } else { "FAILED" }, started.elapsed().as_secs_f64());
    emit(&log, None, out)?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("selftest failed".into()))
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}
