use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use kvsurrogate::harness::{identity_check, sweep, RunConfig, RunDir, SweepGrid};

/// Train and evaluate learned surrogates for a long-context KV cache.
#[derive(Debug, Parser)]
#[command(name = "kvsurrogate", version)]
struct Cli {
    /// Run config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output_dir` and $KVSURROGATE_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the frozen model and the synthetic corpus.
    GenData,
    /// Prefill the context and cache scores, targets and teacher logits.
    CacheTargets,
    /// Train the configured surrogate on the train split.
    Train,
    /// Evaluate the trained surrogate on the test split.
    Eval,
    /// Time full-cache against surrogate decoding.
    Bench {
        /// Context lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// gen-data, cache-targets, train and eval in one go.
    Run,
    /// Check that exact context summaries reproduce full attention.
    IdentityCheck,
    /// Run every (rho, loss) grid point and join the report rows.
    Sweep {
        /// Capacity fractions, comma separated.
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given");
    };
    match command {
        Command::IdentityCheck => {
            let checks = identity_check(&cfg)?;
            let mut failed = Vec::new();
            for c in &checks {
                let status = if c.passed() { "ok" } else { "VIOLATED" };
                println!("{status:>8}  {}  (max deviation {:.3e}, tolerance {:.0e})", c.name, c.max_deviation, c.tolerance);
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                bail!("invariant violated: {}", failed.join("; "));
            }
        }
        Command::Sweep { rhos } => {
            let mut grid = SweepGrid::default();
            if let Some(r) = rhos {
                grid.rhos = r;
            }
            let root = cfg.run_dir();
            let reports = sweep(&cfg, &grid, &root)?;
            println!("{} runs; rows in {}", reports.len(), root.join("sweep.csv").display());
        }
        cmd => {
            let dir = RunDir::create(&cfg)?;
            match cmd {
                Command::GenData => {
                    let (w, c) = dir.gen_data()?;
                    println!("model: {} parameters; corpus: {} tokens, {} facts, {} pairs", w.parameter_count(), c.context.len(), c.facts.len(), c.pairs.len());
                }
                Command::CacheTargets => {
                    let (train, test) = dir.cache_targets()?;
                    println!("cached {} train and {} test positions", train.position_count(), test.position_count());
                }
                Command::Train => {
                    let out = dir.train()?;
                    let h = out.hyper;
                    println!("trained {} steps at batch {} (peak lr {:.3e}); {} surrogate parameters", h.steps, h.batch_size, h.peak_lr, out.stack.total_params());
                }
                Command::Eval => print_report(&dir.eval()?),
                Command::Run => print_report(&dir.run_all()?),
                Command::Bench { sizes } => {
                    for p in dir.bench(sizes.as_deref())? {
                        println!(
                            "n={:>6}  full {:.3} ms/token  surrogate {:.3} ms/token  memory {} vs {} bytes",
                            p.context_len, p.full_step_ms, p.surrogate_step_ms, p.full_memory_bytes, p.surrogate_memory_bytes
                        );
                    }
                }
                Command::IdentityCheck | Command::Sweep { .. } => unreachable!("handled above"),
            }
            println!("run directory: {}", dir.root().display());
        }
    }
    Ok(())
}

fn print_report(r: &kvsurrogate::eval::EvalReport) {
    let a = &r.agreement;
    println!(
        "token accuracy gap {:.3} pp, LM CE gap {:.4}, eval KL {:.4}, RTE target {:.3}, RTE score {:.3}",
        a.token_accuracy_gap, a.lm_ce_gap, a.eval_kl, r.rte.rte_target, r.rte.rte_score
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if cli.command.is_none() && !cli.print_config {
        use clap::CommandFactory;
        let _ = Cli::command().print_help();
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
