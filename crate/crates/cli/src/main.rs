//! `comigs` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use comigs_cli::commands;
use comigs_cli::config::RunConfig;
use comigs_core::federation::Method;

#[derive(Parser, Debug)]
#[command(name = "comigs", version, about = "Federated mixture of generalist and specialist LoRA experts")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted override such as `trainer.tau=15`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-client training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain, fine-tune with the chosen method and write metrics.
    Train(TrainArgs),
    /// Run the quadratic contraction and decoupled-rate suites.
    VerifyConvex,
    /// Print per-round communication of every method against FedAvg.
    Commcost,
    /// Generate the synthetic corpora into the output directory.
    GenData,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// pretrained, centralized, local, fedavg, comigs-2g, comigs-2s,
    /// comigs-1g1s or comigs-1gxs.
    #[arg(long)]
    method: Option<Method>,
    /// Communication rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Local iterations per round.
    #[arg(long)]
    local_iters: Option<usize>,
    /// Expert steps between router updates.
    #[arg(long)]
    tau: Option<usize>,
    /// Router steps per router update.
    #[arg(long)]
    router_steps: Option<usize>,
    /// Load-balance loss weight.
    #[arg(long)]
    lb_weight: Option<f64>,
    /// Experts per client, comma separated, e.g. `1,2,4,8`.
    #[arg(long, value_delimiter = ',')]
    experts: Option<Vec<usize>>,
    /// Read corpora written by `gen-data` instead of generating them.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        cfg.out = out.clone();
    }
    if let Command::Train(t) = &cli.command {
        if let Some(m) = t.method {
            cfg.federation.method = m;
        }
        if let Some(r) = t.rounds {
            cfg.federation.rounds = r;
        }
        if let Some(l) = t.local_iters {
            cfg.federation.local_iters = l;
        }
        if let Some(tau) = t.tau {
            cfg.trainer.tau = tau;
        }
        if let Some(s) = t.router_steps {
            cfg.trainer.router_steps = s;
        }
        if let Some(w) = t.lb_weight {
            cfg.trainer.lb_weight = w;
        }
        if let Some(e) = &t.experts {
            cfg.federation.experts = e.clone();
            if cfg.data_dir.is_none() {
                cfg.data.clients = e.len();
            }
        }
        if let Some(d) = &t.data_dir {
            cfg.data_dir = Some(d.clone());
        }
    }
    for o in &cli.common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Train(_) => {
            let summary = commands::train(&cfg)?;
            for c in &summary.clients {
                println!("client {} test_ppl {:.4}", c.client, c.test_ppl);
            }
            println!(
                "mean test_ppl {:.4} ({} round {})",
                summary.mean_test_ppl, summary.method, summary.final_round
            );
            Ok(true)
        }
        Command::VerifyConvex => {
            let report = commands::verify_convex(&cfg)?;
            let q = &report.quadratic;
            println!(
                "quadratic: {}/{} instances within bounds, hand instance exact: {}",
                q.cases.iter().filter(|c| c.passed()).count(),
                q.cases.len(),
                q.hand.exact
            );
            println!("identity: max gap {:e} ({})", report.identity.max_gap, pass(report.identity.passed));
            let d = &report.decoupled;
            println!(
                "decoupled: {}/{} instances certified",
                d.cases.iter().filter(|c| c.passed).count(),
                d.cases.len()
            );
            println!("verify-convex: {}", pass(report.passed));
            Ok(report.passed)
        }
        Command::Commcost => {
            let rows = commands::commcost(&cfg)?;
            print!("{}", commands::commcost_table(&rows));
            commands::write_commcost(&cfg, &rows)?;
            Ok(true)
        }
        Command::GenData => {
            let header = commands::gen_data(&cfg, &cfg.out)?;
            println!("wrote {} client corpora to {}", header.lengths.len(), cfg.out.display());
            Ok(true)
        }
    }
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = (|| -> Result<bool> {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.common.threads {
            pool = pool.num_threads(n);
        }
        let pool = pool.build().context("building thread pool")?;
        pool.install(|| run(&cli))
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
