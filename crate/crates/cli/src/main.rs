//! `bacon`: ingest, simulate, fit, predict, score and summarize runs.
//!
//! Every configuration key is also a `--key value` flag; flags override the
//! file given by `--config`.

use bacon_core::config::RunConfig;
use bacon_core::pipeline;
use bacon_core::{BaconError, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use std::path::Path;
use std::process::ExitCode;

const SUBCOMMANDS: [(&str, &str); 6] = [
    ("ingest", "Vectorize adjacency matrices or read a matrix CSV, dropping constant covariates"),
    ("synth", "Generate a synthetic dataset with known truth into the run directory"),
    ("fit", "Run the selected stages (--stages 1,1b,2)"),
    ("predict", "Recompute test predictions from stored regression samples"),
    ("eval", "Score a run against synthetic truth, or run --replicates N synthetic datasets"),
    ("report", "Print a plain-text summary of a run directory"),
];

fn with_config_flags(mut cmd: Command) -> Command {
    cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("Flat key = value configuration file"));
    for key in RunConfig::keys() {
        cmd = cmd.arg(Arg::new(key.clone()).long(key).value_name("VALUE"));
    }
    cmd
}

fn cli() -> Command {
    let mut cmd = Command::new("bacon")
        .about("Bayesian clustering of binary connectome covariates with cluster-level variable selection")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("verbose").short('v').long("verbose").action(ArgAction::Count).global(true));
    for (name, about) in SUBCOMMANDS {
        let mut sub = with_config_flags(Command::new(name).about(about));
        if name == "eval" {
            sub = sub.arg(
                Arg::new("replicates")
                    .long("replicates")
                    .value_name("N")
                    .value_parser(clap::value_parser!(usize))
                    .help("Synthesize, fit and score N datasets; writes replicates.csv"),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn build_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::default(),
    };
    for key in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set(&key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = build_config(m)?;
    match name {
        "ingest" => {
            let (x, manifest) = pipeline::ingest(&cfg)?;
            println!(
                "ingested {} subjects, {} covariates ({} constant removed of {})",
                x.n(),
                x.p(),
                manifest.removed.len(),
                manifest.raw_columns
            );
        }
        "synth" => {
            let truth = pipeline::synth(&cfg)?;
            let q0 = truth.cluster.as_ref().map_or(0, |c| c.q0);
            println!("wrote {} dataset (seed {}, {} true clusters) to {}", truth.generator, truth.seed, q0, cfg.out_dir);
        }
        "fit" => {
            let s = pipeline::fit(&cfg)?;
            println!("stages run: [{}]; up to date: [{}]", s.ran.join(", "), s.skipped.join(", "));
        }
        "predict" => {
            let rows = pipeline::predict_only(&cfg)?;
            println!("wrote {} predictions", rows.len());
        }
        "eval" => match m.get_one::<usize>("replicates") {
            Some(&n) => {
                let rows = pipeline::run_replicates(&cfg, n)?;
                println!(
                    "wrote {} rows for {n} replicates to {}",
                    rows.len(),
                    Path::new(&cfg.out_dir).join(pipeline::REPLICATES_CSV).display()
                );
            }
            None => {
                let rep = pipeline::evaluate(&cfg)?;
                println!("{}", summary_line(&rep));
            }
        },
        "report" => print!("{}", pipeline::report(&cfg)?),
        other => return Err(BaconError::Config(format!("unknown subcommand {other}"))),
    }
    Ok(())
}

fn summary_line(rep: &bacon_core::eval::EvalReport) -> String {
    let fields = [
        ("tau_hat", rep.tau_hat),
        ("kmeans_tau", rep.kmeans_tau),
        ("logbf_mean", rep.logbf_mean),
        ("tpr", rep.tpr),
        ("tnr", rep.tnr),
        ("pct_mse_reduction", rep.pct_mse_reduction),
        ("model_size", rep.model_size),
    ];
    let mut parts: Vec<String> = fields.iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v:.4}"))).collect();
    if let (Some(q), Some(q0)) = (rep.q_hat, rep.q0) {
        parts.push(format!("q_hat={q} q0={q0}"));
    }
    parts.join(" ")
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bacon: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
