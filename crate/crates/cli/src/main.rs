//! `mtvit`: data generation, training and probing from one config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtvit::config::RunConfig;
use mtvit::pipeline::{self, StageOutput};
use mtvit::{verify, Error};

const USAGE_EXIT: u8 = 2;
const RUNTIME_EXIT: u8 = 1;

#[derive(Parser)]
#[command(name = "mtvit", version, about = "Multi-task toy vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, val and test splits.
    GenData(Args),
    /// Caption alignment that trains only the projector.
    Warmup(Args),
    /// Multitask training from the warm-up checkpoint.
    Train(Args),
    /// Fit and score a linear segmentation probe on frozen features.
    ProbeSeg(Args),
    /// Fit and score a linear depth probe on frozen features.
    ProbeDepth(Args),
    /// Score the trained task heads on the test split.
    Eval(Args),
    /// Run the gradient, invariance and accumulation checks.
    Verify {
        #[command(flatten)]
        args: Args,
        /// Random instances per property.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
}

fn report(out: &StageOutput) {
    if let Some(fp) = &out.fingerprint_mismatch {
        eprintln!("warning: checkpoint was written under config {fp}");
    }
    for r in &out.reports {
        println!("{}", serde_json::to_string(r).expect("serializable report"));
    }
    for f in &out.files {
        eprintln!("wrote {}", f.display());
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("MTVIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config("MTVIT_THREADS", format!("expected a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("MTVIT_THREADS", e.to_string()))
}

fn run(cmd: Command) -> Result<bool, Error> {
    init_threads()?;
    let (args, instances) = match &cmd {
        Command::Verify { args, instances } => (args, Some(*instances)),
        Command::GenData(a)
        | Command::Warmup(a)
        | Command::Train(a)
        | Command::ProbeSeg(a)
        | Command::ProbeDepth(a)
        | Command::Eval(a) => (a, None),
    };
    let cfg = RunConfig::load(&args.config)?;
    if let Some(n) = instances {
        let props = verify::run_all(n, cfg.seed)?;
        for p in &props {
            println!("{p}");
        }
        let failed = props.iter().filter(|p| !p.passed()).count();
        println!("{} properties, {failed} failed", props.len());
        return Ok(failed == 0);
    }
    let out = match cmd {
        Command::GenData(_) => pipeline::gen_data(&cfg)?,
        Command::Warmup(_) => pipeline::warmup(&cfg)?,
        Command::Train(_) => {
            let (out, rep) = pipeline::train(&cfg)?;
            for (e, m) in rep.epoch_means.iter().enumerate() {
                let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
                eprintln!("epoch {e}: cap {} depth {} seg {}", f(m[0]), f(m[1]), f(m[2]));
            }
            out
        }
        Command::ProbeSeg(_) => pipeline::probe_seg(&cfg)?,
        Command::ProbeDepth(_) => pipeline::probe_depth(&cfg)?,
        Command::Eval(_) => pipeline::eval(&cfg)?,
        Command::Verify { .. } => unreachable!(),
    };
    report(&out);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE_EXIT } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(RUNTIME_EXIT),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { USAGE_EXIT } else { RUNTIME_EXIT })
        }
    }
}
