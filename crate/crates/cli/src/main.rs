use std::ffi::OsString;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kaer::harness::{
    flag_value, metrics_json, run_annotate, run_compare, run_eval, run_prepare, run_train, RunConfig,
};
use kaer::synth::{generate_synthetic, SyntheticSpec};
use kaer::tabular::Split;
use kaer::Error;
use serde_json::{json, Map, Value};

#[derive(Parser, Debug)]
#[command(name = "kaer", version, about = "Knowledge-augmented entity resolution")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Serialize every configured split into batch files.
    Prepare(RunArgs),
    /// Train on the prepared train split.
    Train(RunArgs),
    /// Evaluate the trained checkpoint on a prepared split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Run two configurations end to end and test their difference.
    Compare {
        /// Config file of system A.
        #[arg(long = "a")]
        a: PathBuf,
        /// Config file of system B.
        #[arg(long = "b")]
        b: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Overrides applied to both configurations.
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Generate a synthetic dataset with gold annotations.
    Synth(SynthArgs),
    /// Run the configured knowledge providers and emit annotation JSONL.
    Annotate {
        #[command(flatten)]
        run: RunArgs,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

macro_rules! config_flags {
    ($($key:ident $(| $alias:literal)?),* $(,)?) => {
        /// One override flag per configuration key.
        #[derive(Args, Debug, Default)]
        struct ConfigFlags {
            $(
                #[arg(long = stringify!($key), value_name = "VALUE", help_heading = "Configuration" $(, visible_alias = $alias)?)]
                $key: Option<String>,
            )*
        }

        impl ConfigFlags {
            fn to_map(&self) -> kaer::Result<Map<String, Value>> {
                let mut m = Map::new();
                $(
                    if let Some(v) = &self.$key {
                        m.insert(stringify!($key).to_string(), flag_value(stringify!($key), v)?);
                    }
                )*
                Ok(m)
            }
        }
    };
}

config_flags! {
    profile,
    data_dir | "data-dir",
    table_a | "table-a",
    table_b | "table-b",
    train,
    valid,
    test,
    mode,
    rule_typer | "rule-typer",
    gazetteer,
    annotations,
    ditto_mode | "ditto-mode",
    d_model | "d-model",
    n_heads | "n-heads",
    n_layers | "n-layers",
    d_ff | "d-ff",
    dropout,
    use_segments | "use-segments",
    batch_size | "batch-size",
    epochs,
    lr,
    max_len | "max-len",
    min_count | "min-count",
    seed,
    threads,
    work_dir | "work-dir",
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with synthetic-spec fields; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long = "match_rate", visible_alias = "match-rate")]
    match_rate: Option<f64>,
    #[arg(long = "hard_negative_rate", visible_alias = "hard-negative-rate")]
    hard_negative_rate: Option<f64>,
    #[arg(long = "typo_rate", visible_alias = "typo-rate")]
    typo_rate: Option<f64>,
    #[arg(long = "abbreviation_rate", visible_alias = "abbreviation-rate")]
    abbreviation_rate: Option<f64>,
    #[arg(long = "reorder_rate", visible_alias = "reorder-rate")]
    reorder_rate: Option<f64>,
}

impl SynthArgs {
    fn spec(&self) -> kaer::Result<SyntheticSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Format {
                    context: path.display().to_string(),
                    line: e.line(),
                    message: e.to_string(),
                })?
            }
            None => SyntheticSpec::default(),
        };
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { spec.$f = v; } )* };
        }
        apply!(entities, pairs, match_rate, hard_negative_rate, typo_rate, abbreviation_rate, reorder_rate);
        Ok(spec)
    }
}

fn resolve(run: &RunArgs) -> kaer::Result<RunConfig> {
    RunConfig::resolve(run.config.as_deref(), run.flags.to_map()?)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(v).expect("serializable output"));
}

fn execute(command: Command) -> kaer::Result<()> {
    match command {
        Command::Prepare(run) => {
            let report = run_prepare(&resolve(&run)?)?;
            let lines: Map<String, Value> = report.lines.iter().map(|(s, n)| (s.to_string(), json!(n))).collect();
            print_json(&json!({"vocab_size": report.vocab_size, "vocab_hash": report.vocab_hash, "lines": lines}));
        }
        Command::Train(run) => print_json(&run_train(&resolve(&run)?)?),
        Command::Eval { run, split } => {
            let m = run_eval(&resolve(&run)?, split)?;
            println!("{}", metrics_json(&m));
        }
        Command::Compare { a, b, split, flags } => {
            let flags = flags.to_map()?;
            let cfg_a = RunConfig::resolve(Some(&a), flags.clone())?;
            let cfg_b = RunConfig::resolve(Some(&b), flags)?;
            print_json(&run_compare(&cfg_a, &cfg_b, split)?);
        }
        Command::Synth(args) => {
            let spec = args.spec()?;
            let d = generate_synthetic(&spec, args.seed)?;
            d.write(&args.out)?;
            let sizes: Map<String, Value> = Split::ALL.iter().map(|&s| (s.to_string(), json!(d.split(s).len()))).collect();
            print_json(&json!({
                "out": args.out,
                "table_a": d.table_a.len(),
                "table_b": d.table_b.len(),
                "pairs": sizes,
                "mentions": d.gold.mention_count(),
            }));
        }
        Command::Annotate { run, out } => {
            let store = run_annotate(&resolve(&run)?)?;
            match out {
                Some(path) => store.save(&path)?,
                None => {
                    let mut stdout = std::io::stdout().lock();
                    stdout.write_all(store.to_jsonl().as_bytes()).map_err(|e| Error::Io {
                        path: "<stdout>".into(),
                        source: e,
                    })?;
                }
            }
        }
    }
    Ok(())
}

fn run(args: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
