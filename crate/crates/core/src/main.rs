use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cat_aif::cat::Selector;
use cat_aif::pipeline::{self, PipelineConfig};
use cat_aif::{par, Error, Result};

#[derive(Parser)]
#[command(name = "cat-aif", version, about = "Selection-bias mitigation for adaptive-testing response data")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// TOML config file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 forces the serial path
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with roles and its ground truth
    Synth {
        #[arg(long)]
        n_users: Option<usize>,
        #[arg(long)]
        n_items: Option<usize>,
    },
    /// Fit the response model on the unbiased training users
    Fit {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Warm-start from a model JSON
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Ground-truth JSON for the rank-correlation report
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Simulate adaptive tests for the biased users
    Bias {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        selector: Option<Selector>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score biased responses, select or weight them, and retrain
    Debias {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a model on the test users
    Eval {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        n_repeats: Option<usize>,
    },
    /// Run every stage for every configured method and write comparison.csv
    Pipeline {
        #[arg(long)]
        n_repeats: Option<usize>,
        /// Comma-separated method list
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.shared.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, cli.shared.seed);
    set(&mut cfg.paths.out, cli.shared.out.clone());
    match &cli.command {
        Command::Synth { n_users, n_items } => {
            set(&mut cfg.data.n_users, *n_users);
            set(&mut cfg.data.n_items, *n_items);
        }
        Command::Fit { input, init, max_epochs, truth } => {
            set_path(&mut cfg.paths.input, input.clone());
            set_path(&mut cfg.paths.init, init.clone());
            set_path(&mut cfg.paths.truth, truth.clone());
            set(&mut cfg.fit.max_epochs, *max_epochs);
        }
        Command::Bias { input, model, truth, selector, steps } => {
            set_path(&mut cfg.paths.input, input.clone());
            set_path(&mut cfg.paths.model, model.clone());
            set_path(&mut cfg.paths.truth, truth.clone());
            set(&mut cfg.cat.selector, *selector);
            set(&mut cfg.cat.steps, *steps);
        }
        Command::Debias { input, model, sessions, method } => {
            set_path(&mut cfg.paths.input, input.clone());
            set_path(&mut cfg.paths.model, model.clone());
            set_path(&mut cfg.paths.sessions, sessions.clone());
            set(&mut cfg.debias.method, method.clone());
        }
        Command::Eval { input, model, truth, n_repeats } => {
            set_path(&mut cfg.paths.input, input.clone());
            set_path(&mut cfg.paths.model, model.clone());
            set_path(&mut cfg.paths.truth, truth.clone());
            set(&mut cfg.eval.n_repeats, *n_repeats);
        }
        Command::Pipeline { n_repeats, methods } => {
            set(&mut cfg.eval.n_repeats, *n_repeats);
            set(&mut cfg.debias.methods, methods.clone());
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth { .. } => {
            let (d, _) = pipeline::cmd_synth(&cfg)?;
            println!("wrote {} responses from {} users to {}", d.len(), d.roles().len(), cfg.paths.out.display());
        }
        Command::Fit { .. } => {
            let s = pipeline::cmd_fit(&cfg)?;
            let m = &s.model.metadata;
            println!("epochs_run={}", m.epochs_run);
            println!("final_train_loss={}", m.final_train_loss);
            match m.final_val_loss {
                Some(v) => println!("final_val_loss={v}"),
                None => println!("final_val_loss=none"),
            }
            if let Some(r) = s.rank_corr {
                println!("rank_corr={r}");
            }
        }
        Command::Bias { .. } => {
            let sessions = pipeline::cmd_bias(&cfg)?;
            let rows: usize = sessions.iter().map(|s| s.len()).sum();
            let truncated = sessions.iter().filter(|s| s.truncated).count();
            println!("wrote {} sessions ({rows} responses, {truncated} truncated)", sessions.len());
        }
        Command::Debias { .. } => {
            let s = pipeline::cmd_debias(&cfg)?;
            if let Some(t) = s.threshold {
                println!("threshold={t}");
            }
            if let Some(r) = &s.report {
                println!("damping={}", r.damping);
            }
            println!("method={} final_train_loss={}", s.variant, s.model.metadata.final_train_loss);
        }
        Command::Eval { .. } => {
            for r in pipeline::cmd_eval(&cfg)? {
                let step = r.step.map(|s| format!("@{s}")).unwrap_or_default();
                println!("{}{step} = {:.4} ± {:.4}", r.metric, r.value, r.std);
            }
        }
        Command::Pipeline { .. } => {
            let repeats = pipeline::cmd_pipeline(&cfg)?;
            println!("{} repeats; comparison in {}", repeats.len(), cfg.paths.out.join("comparison.csv").display());
            for v in cfg.variants()? {
                let rc: Vec<f64> = repeats.iter().filter_map(|r| r.get(v)).map(|o| o.scores.rank_corr).collect();
                let (m, s) = cat_aif::eval::mean_std(&rc);
                println!("{:<12} rank_corr {m:.4} ± {s:.4}", v.to_string());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.shared.threads {
        Some(n) => par::with_threads(n, || run(&cli)),
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(_) = e {
                eprintln!("(see --help)");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
