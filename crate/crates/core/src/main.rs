use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use demotesim::evset::Placement;
use demotesim::harness::{
    load_config, run, Config, Experiment, ExperimentReport, Format, HarnessError,
};
use demotesim::primitives::ProbeKind;
use demotesim::taxonomy::{feasible_attacks, Attack, Characteristics, Mark};

#[derive(Parser)]
#[command(
    name = "demotesim",
    version,
    about = "cldemote microarchitecture simulator and attack lab"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config laid over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report directory.
    #[arg(long, global = true, env = "DEMOTESIM_OUT", default_value = "results")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "json", value_parser = parse_format)]
    format: Format,
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// cldemote residency latencies and primitive calibration.
    Bench,
    /// Hit/miss accuracy of every primitive against a sibling victim.
    Algorithm1,
    /// Permission-table timing, walk counters and fault-free streams.
    DemoteTime,
    /// Page-table level identification.
    PageLevels,
    Covert,
    Kaslr,
    /// LLC eviction-set construction.
    Evset {
        #[command(subcommand)]
        action: Option<EvsetCmd>,
    },
    ReverseLlc,
    ReverseDir,
    /// Knowledge-base checks.
    Taxonomy {
        #[command(subcommand)]
        action: Option<TaxonomyCmd>,
    },
    Primitives {
        #[command(subcommand)]
        action: PrimitivesCmd,
    },
    Attack {
        #[command(subcommand)]
        action: AttackCmd,
    },
}

#[derive(Subcommand)]
enum PrimitivesCmd {
    /// Calibrates one primitive and writes its raw samples.
    Bench {
        #[arg(long)]
        kind: ProbeKind,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Subcommand)]
enum EvsetCmd {
    Build {
        #[arg(long)]
        placement: Option<Placement>,
        #[arg(long)]
        runs: Option<u64>,
    },
    ReverseLlc {
        #[arg(long)]
        max_n: Option<usize>,
    },
    ReverseDir {
        #[arg(long)]
        max_n: Option<usize>,
    },
}

#[derive(Subcommand)]
enum AttackCmd {
    Covert {
        #[arg(long)]
        window: Option<u64>,
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long)]
        primitive: Option<ProbeKind>,
    },
    Kaslr {
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        repeats: Option<u32>,
    },
}

#[derive(Subcommand)]
enum TaxonomyCmd {
    /// Recomputes every knowledge-base row.
    Check,
    /// Feasible attacks for one characteristic profile.
    Eval {
        /// Letters from UIMDS, or five 0/1 values in that order.
        #[arg(long)]
        profile: Characteristics,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Resolves the command to an experiment, applying its flags to `cfg`.
fn plan(command: Command, cfg: &mut Config) -> Experiment {
    let x = &mut cfg.experiment;
    match command {
        Command::Bench => Experiment::Bench,
        Command::Algorithm1 => Experiment::Algorithm1,
        Command::DemoteTime => Experiment::DemoteTime,
        Command::PageLevels => Experiment::PageLevels,
        Command::Covert => Experiment::Covert,
        Command::Kaslr => Experiment::Kaslr,
        Command::ReverseLlc => Experiment::ReverseLlc,
        Command::ReverseDir => Experiment::ReverseDir,
        Command::Taxonomy { .. } => Experiment::Taxonomy,
        Command::Evset { action: None } => Experiment::Evset,
        Command::Evset {
            action: Some(EvsetCmd::Build { placement, runs }),
        } => {
            x.evset.placement = placement.or(x.evset.placement);
            set(&mut x.evset.runs, runs);
            Experiment::Evset
        }
        Command::Evset {
            action: Some(EvsetCmd::ReverseLlc { max_n }),
        } => {
            set(&mut x.reverse.max_n, max_n);
            Experiment::ReverseLlc
        }
        Command::Evset {
            action: Some(EvsetCmd::ReverseDir { max_n }),
        } => {
            set(&mut x.reverse.max_n, max_n);
            Experiment::ReverseDir
        }
        Command::Primitives {
            action: PrimitivesCmd::Bench { kind, samples },
        } => {
            x.bench.kind = Some(kind);
            set(&mut x.bench.samples, samples);
            Experiment::Bench
        }
        Command::Attack {
            action:
                AttackCmd::Covert {
                    window,
                    bits,
                    primitive,
                },
        } => {
            set(&mut x.covert.window, window);
            set(&mut x.covert.bits, bits);
            set(&mut x.covert.primitive, primitive);
            Experiment::Covert
        }
        Command::Attack {
            action: AttackCmd::Kaslr { trials, repeats },
        } => {
            set(&mut x.kaslr.trials, trials);
            set(&mut x.kaslr.repeats, repeats);
            Experiment::Kaslr
        }
    }
}

fn eval_profile(c: Characteristics) {
    let feasible = feasible_attacks(&c);
    let marks: serde_json::Map<String, serde_json::Value> = Attack::ALL
        .into_iter()
        .map(|a| {
            let m = Mark::compute(feasible.contains(&a), &[]);
            (
                a.name().to_string(),
                serde_json::json!({ "mark": m, "verdict": m.verdict() }),
            )
        })
        .collect();
    let out = serde_json::json!({ "profile": c, "attacks": marks });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
}

fn summarize(report: &ExperimentReport, written: &[PathBuf]) {
    for c in &report.checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        println!("{tag} {}: {}", c.name, c.detail);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Taxonomy {
        action: Some(TaxonomyCmd::Eval { profile }),
    } = cli.command
    {
        eval_profile(profile);
        return ExitCode::SUCCESS;
    }
    let result = (|| -> Result<bool, HarnessError> {
        let mut cfg = match &cli.common.config {
            Some(p) => load_config(p)?,
            None => Config::default(),
        };
        let seed = cli.common.seed.or(cfg.seed).unwrap_or(0);
        let experiment = plan(cli.command, &mut cfg);
        let report = run(experiment, &cfg, seed)?;
        let written = report.write(&cli.common.out, cli.common.format)?;
        summarize(&report, &written);
        Ok(report.passed())
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
