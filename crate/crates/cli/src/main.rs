//! `ictd` — reproducible experiment front end.
//!
//! Every run writes a `manifest.json` (version + command + full config);
//! `ictd replay --manifest <path>` re-executes it and reproduces the CSV
//! outputs bitwise.
//!
//! Exit codes: 0 all checks pass, 1 a numerical tolerance failed, 2 usage or
//! configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ictd_core::numerics::SeededRng;
use ictd_core::training::{train, TaskSource, TrainConfig};
use ictd_core::verify::{
    demo_msve_vs_context, verify_equivalence, verify_invariant_set, DemoConfig, EquivalenceKind,
};

const MANIFEST_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "ictd", version, about = "masked-attention transformers that run TD in the forward pass")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Forward-pass/oracle equivalence sweeps and the invariant-set check
    Verify(VerifyArgs),
    /// Multi-task TD pretraining with CSV metric logging
    Train(TrainArgs),
    /// Mean MSVE of the explicit TD transformer vs context length
    Demo(DemoArgs),
    /// Re-execute a run from its manifest
    Replay(ReplayArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// td0 | td0-onelayer | rg | td-lambda | avg (omit to run all)
    #[arg(long)]
    kind: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 40)]
    layers: usize,
    /// context length n
    #[arg(long, default_value_t = 20)]
    context: usize,
    /// feature dimension d
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 30)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// run only the Monte-Carlo invariant-set check
    #[arg(long, default_value_t = false)]
    invariant_set: bool,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    c: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    c_prime: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyConfig {
    kind: Option<String>,
    lambda: f64,
    layers: usize,
    context: usize,
    dim: usize,
    seeds: u64,
    tol: f64,
    invariant_set: bool,
    samples: usize,
    eta: f64,
    c: f64,
    c_prime: f64,
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; unknown keys are rejected
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// boyan | boyan-representable | cartpole
    #[arg(long)]
    task_source: Option<String>,
    /// context length n
    #[arg(long)]
    context: Option<usize>,
    /// number of pretraining tasks k
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 300)]
    tasks: usize,
    /// grid is context lengths 1..=grid-max
    #[arg(long, default_value_t = 40)]
    grid_max: usize,
    #[arg(long, default_value_t = 15)]
    layers: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 5)]
    states_min: usize,
    #[arg(long, default_value_t = 10)]
    states_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    command: String,
    config: Value,
}

/// 17 significant digits: enough to round-trip any f64 exactly.
fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_manifest(out_dir: &Path, command: &str, config: Value) -> Result<(), String> {
    let manifest = Manifest { version: MANIFEST_VERSION, command: command.into(), config };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?;
    write_file(&out_dir.join("manifest.json"), &text)
}

/// Schema self-test: header present, rectangular, and every field parses as
/// an integer, a float, a bool, or a bare identifier.
fn check_csv_schema(path: &Path) -> Result<(), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| format!("{}: empty CSV", path.display()))?;
    let cols = header.split(',').count();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(format!("{}: row {} has {} fields, expected {cols}", path.display(), i + 2, fields.len()));
        }
        for f in fields {
            let ok = f.parse::<f64>().is_ok()
                || f.parse::<bool>().is_ok()
                || f.chars().all(|c| c.is_ascii_alphanumeric() || "_[],.".contains(c));
            if !ok {
                return Err(format!("{}: unparseable field {f:?}", path.display()));
            }
        }
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))
}

fn parse_kind(name: &str, lambda: f64) -> Result<EquivalenceKind, String> {
    match name {
        "td0" => Ok(EquivalenceKind::Td0),
        "td0-onelayer" => Ok(EquivalenceKind::Td0OneLayer),
        "rg" => Ok(EquivalenceKind::Rg),
        "td-lambda" => Ok(EquivalenceKind::TdLambda { lambda }),
        "avg" => Ok(EquivalenceKind::Avg),
        other => Err(format!("unknown verification kind {other:?}")),
    }
}

fn kind_slug(kind: EquivalenceKind) -> &'static str {
    match kind {
        EquivalenceKind::Td0 => "td0",
        EquivalenceKind::Td0OneLayer => "td0-onelayer",
        EquivalenceKind::Rg => "rg",
        EquivalenceKind::TdLambda { .. } => "td-lambda",
        EquivalenceKind::Avg => "avg",
    }
}

fn run_verify(cfg: &VerifyConfig, out_dir: &Path) -> Result<bool, String> {
    ensure_dir(out_dir)?;
    write_manifest(out_dir, "verify", serde_json::to_value(cfg).map_err(|e| e.to_string())?)?;

    let kinds: Vec<EquivalenceKind> = match (&cfg.kind, cfg.invariant_set) {
        (Some(name), _) => vec![parse_kind(name, cfg.lambda)?],
        (None, true) => vec![],
        (None, false) => vec![
            EquivalenceKind::Td0,
            EquivalenceKind::Td0OneLayer,
            EquivalenceKind::Rg,
            EquivalenceKind::TdLambda { lambda: cfg.lambda },
            EquivalenceKind::Avg,
        ],
    };
    let run_invariant = cfg.invariant_set || cfg.kind.is_none();

    let mut all_pass = true;
    for kind in kinds {
        let report = verify_equivalence(kind, cfg.layers, cfg.context, cfg.dim, cfg.seeds)
            .map_err(|e| e.to_string())?;
        let mut csv = String::from("seed,layer,abs_diff\n");
        for (s, row) in report.diffs.iter().enumerate() {
            for (l, diff) in row.iter().enumerate() {
                csv.push_str(&format!("{s},{l},{}\n", fmt17(*diff)));
            }
        }
        let path = out_dir.join(format!("equivalence_{}.csv", kind_slug(kind)));
        write_file(&path, &csv)?;
        check_csv_schema(&path)?;
        let pass = report.max_diff() <= cfg.tol;
        all_pass &= pass;
        println!(
            "equivalence {:<13} L={:<3} max diff {:9.3e} (tol {:.0e}) ... {}",
            report.kind,
            report.l,
            report.max_diff(),
            cfg.tol,
            if pass { "pass" } else { "FAIL" }
        );
    }

    if run_invariant {
        let mut rng = SeededRng::new(cfg.seed);
        let report = verify_invariant_set(
            cfg.eta, cfg.c, cfg.c_prime, cfg.context, cfg.dim, cfg.samples, &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let mut csv = String::from("coordinate,mean,std_err,off_pattern,pass\n");
        for c in &report.coords {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                c.name,
                fmt17(c.mean),
                fmt17(c.std_err),
                c.off_pattern,
                c.pass
            ));
        }
        let path = out_dir.join("invariant_set.csv");
        write_file(&path, &csv)?;
        check_csv_schema(&path)?;
        all_pass &= report.pass;
        println!(
            "invariant set theta*({}, {}, {}) K={} ... {}",
            cfg.eta,
            cfg.c,
            cfg.c_prime,
            report.samples,
            if report.pass { "pass" } else { "FAIL" }
        );
    }
    Ok(all_pass)
}

fn load_train_config(args: &TrainArgs) -> Result<TrainConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| format!("config: {e}"))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(src) = &args.task_source {
        cfg.task_source = serde_json::from_value::<TaskSource>(Value::String(src.clone()))
            .map_err(|_| format!("unknown task source {src:?}"))?;
    }
    if let Some(n) = args.context {
        cfg.n = n;
    }
    if let Some(k) = args.tasks {
        cfg.k = k;
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if let Some(gamma) = args.gamma {
        cfg.gamma = gamma;
    }
    if let Some(l) = args.layers {
        cfg.l = l;
    }
    if let Some(d) = args.dim {
        cfg.d = d;
    }
    if let Some(e) = args.log_every {
        cfg.log_every = e;
    }
    Ok(cfg)
}

fn run_train(cfg: &TrainConfig, out_dir: &Path) -> Result<bool, String> {
    cfg.validate().map_err(|e| e.to_string())?;
    ensure_dir(out_dir)?;
    write_manifest(out_dir, "train", serde_json::to_value(cfg).map_err(|e| e.to_string())?)?;

    let out = train(cfg).map_err(|e| e.to_string())?;

    let mut csv = String::from(
        "task_index,msve,p_bottom_right,p_avg_abs_others,q_trace_left,q_trace_right,q_avg_abs_others,vd,iws,ss\n",
    );
    for r in &out.records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.task_index,
            fmt17(r.msve),
            fmt17(r.p_bottom_right),
            fmt17(r.p_avg_abs_others),
            fmt17(r.q_trace_left),
            fmt17(r.q_trace_right),
            fmt17(r.q_avg_abs_others),
            fmt17(r.vd),
            fmt17(r.iws),
            fmt17(r.ss)
        ));
    }
    let metrics_path = out_dir.join("metrics.csv");
    write_file(&metrics_path, &csv)?;
    check_csv_schema(&metrics_path)?;

    for (task_index, params) in &out.snapshots {
        let text = serde_json::to_string(params).map_err(|e| e.to_string())?;
        write_file(&out_dir.join(format!("snapshot_{task_index:06}.json")), &text)?;
    }
    let final_text = serde_json::to_string(&out.params).map_err(|e| e.to_string())?;
    write_file(&out_dir.join("params_final.json"), &final_text)?;
    println!(
        "trained {} tasks ({} metric rows, {} snapshots) -> {}",
        cfg.k,
        out.records.len(),
        out.snapshots.len(),
        out_dir.display()
    );
    Ok(true)
}

fn run_demo(cfg: &DemoConfig, out_dir: &Path) -> Result<bool, String> {
    ensure_dir(out_dir)?;
    write_manifest(out_dir, "demo", serde_json::to_value(cfg).map_err(|e| e.to_string())?)?;
    let rows = demo_msve_vs_context(cfg).map_err(|e| e.to_string())?;
    let mut csv = String::from("context_len,mean_msve,std_err\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.context_len,
            fmt17(row.mean_msve),
            fmt17(row.std_err)
        ));
    }
    let path = out_dir.join("demo.csv");
    write_file(&path, &csv)?;
    check_csv_schema(&path)?;
    println!(
        "demo: {} tasks, context {}..{} -> {}",
        cfg.tasks,
        rows.first().map(|r| r.context_len).unwrap_or(0),
        rows.last().map(|r| r.context_len).unwrap_or(0),
        path.display()
    );
    Ok(true)
}

fn run_replay(args: &ReplayArgs) -> Result<bool, String> {
    let text = fs::read_to_string(&args.manifest)
        .map_err(|e| format!("{}: {e}", args.manifest.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format!("manifest: {e}"))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(format!("unsupported manifest version {}", manifest.version));
    }
    match manifest.command.as_str() {
        "verify" => {
            let cfg: VerifyConfig =
                serde_json::from_value(manifest.config).map_err(|e| format!("manifest: {e}"))?;
            run_verify(&cfg, &args.out_dir)
        }
        "train" => {
            let cfg: TrainConfig =
                serde_json::from_value(manifest.config).map_err(|e| format!("manifest: {e}"))?;
            run_train(&cfg, &args.out_dir)
        }
        "demo" => {
            let cfg: DemoConfig =
                serde_json::from_value(manifest.config).map_err(|e| format!("manifest: {e}"))?;
            run_demo(&cfg, &args.out_dir)
        }
        other => Err(format!("unknown manifest command {other:?}")),
    }
}

fn dispatch(cli: &Cli) -> Result<bool, String> {
    match &cli.cmd {
        Cmd::Verify(args) => {
            let cfg = VerifyConfig {
                kind: args.kind.clone(),
                lambda: args.lambda,
                layers: args.layers,
                context: args.context,
                dim: args.dim,
                seeds: args.seeds,
                tol: args.tol,
                invariant_set: args.invariant_set,
                samples: args.samples,
                eta: args.eta,
                c: args.c,
                c_prime: args.c_prime,
                seed: args.seed,
            };
            run_verify(&cfg, &args.out_dir)
        }
        Cmd::Train(args) => {
            let cfg = load_train_config(args)?;
            run_train(&cfg, &args.out_dir)
        }
        Cmd::Demo(args) => {
            if args.grid_max == 0 || args.states_min > args.states_max {
                return Err("demo: empty grid or inverted state range".into());
            }
            let cfg = DemoConfig {
                tasks: args.tasks,
                grid: (1..=args.grid_max).collect(),
                layers: args.layers,
                d: args.dim,
                gamma: args.gamma,
                states_min: args.states_min,
                states_max: args.states_max,
                seed: args.seed,
            };
            run_demo(&cfg, &args.out_dir)
        }
        Cmd::Replay(args) => run_replay(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::from(0),
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
