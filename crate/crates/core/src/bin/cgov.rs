use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use command_governor::polytope::io;
use command_governor::scenario::{sidecar_path, Scenario, SetCache};
use command_governor::sim::{compare_implementations, run_scenario};
use command_governor::{Error, Result};

/// Command governor studies: set construction, reduction, closed-loop runs.
#[derive(Parser)]
#[command(name = "cgov", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file, or `bundled:f16` / `bundled:scalar`.
    #[arg(long)]
    scenario: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the finitely determined admissible set.
    BuildMoas {
        #[command(flatten)]
        common: Common,
        /// Output set file; a JSON sidecar goes to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop almost-redundant rows and pull the result inside the input.
    Reduce {
        #[command(flatten)]
        common: Common,
        /// Input set, built from the same scenario.
        #[arg(long)]
        set: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop run of one governor.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        governor: String,
        /// Set file to govern with; built from the scenario when absent.
        #[arg(long)]
        set: Option<PathBuf>,
        /// Output prefix: `<out>.csv` and `<out>.json`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario horizon.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Timing and rejection comparison of several governors.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Governor names; repeat the flag or separate with commas.
        #[arg(long, value_delimiter = ',', required = true)]
        governor: Vec<String>,
        /// Admissible set file to start from; built when absent.
        #[arg(long)]
        set: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Run configurations concurrently (timings become contended).
        #[arg(long)]
        parallel: bool,
        /// Output prefix: `<out>.json` and `<out>.txt`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_scenario(common: &Common) -> Result<Scenario> {
    let mut sc = match common.scenario.strip_prefix("bundled:") {
        Some(name) => Scenario::bundled(name)?,
        None => Scenario::load(Path::new(&common.scenario))?,
    };
    if let Some(seed) = common.seed {
        sc.seed = seed;
    }
    Ok(sc)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildMoas { common, out } => {
            let sc = load_scenario(&common)?;
            let moas = sc.build_moas()?;
            io::save(moas.set.poly(), &out)?;
            write_json(&sidecar_path(&out), &moas.sidecar(sc.moas.epsilon))?;
            println!("rows {}", moas.set.rows());
            println!("t_star {}", moas.t_star);
            println!("certificate_excess {:.3e}", moas.certificate_excess);
        }
        Command::Reduce { common, set, out } => {
            let sc = load_scenario(&common)?;
            let full = sc.load_set(&set)?;
            let red = sc.reduce(&full)?;
            io::save(red.set.poly(), &out)?;
            write_json(&sidecar_path(&out), &red.sidecar())?;
            println!("rows {}", red.set.rows());
            println!("factor {:.6}", red.factor);
            println!(
                "containment {} (worst excess {:.3e})",
                if red.certificate.subset { "certified" } else { "failed" },
                red.certificate.worst_excess
            );
            println!("storage_ratio {:.3}", red.storage_ratio());
        }
        Command::Simulate {
            common,
            governor,
            set,
            out,
            horizon,
        } => {
            let sc = load_scenario(&common)?;
            sc.governor_spec(&governor)?;
            let horizon = horizon.unwrap_or(sc.horizon);
            let mut cache = SetCache::default();
            let entry = match set {
                Some(path) => {
                    let set = std::sync::Arc::new(sc.load_set(&path)?);
                    let cfg = sc.governor_config(&governor, &set)?;
                    command_governor::sim::ConfigEntry {
                        name: governor.clone(),
                        cfg,
                        set,
                    }
                }
                None => cache.entry(&sc, &governor)?,
            };
            let (trace, summary) = run_scenario(&sc.system, &sc.constraints, &entry.set, &entry.cfg, &sc.profile, &sc.x0, horizon)?;
            trace.write_csv(&with_ext(&out, "csv"))?;
            write_json(&with_ext(&out, "json"), &summary)?;
            println!("max_margin {:.3e}", summary.max_margin);
            println!("rejections {}", summary.total_rejections);
            println!("fallbacks {}", summary.fallbacks);
            let conv: Vec<String> = summary
                .convergence_steps
                .iter()
                .map(|c| c.map_or("-".into(), |t| t.to_string()))
                .collect();
            println!("convergence {}", conv.join(" "));
        }
        Command::Compare {
            common,
            governor,
            set,
            repeats,
            horizon,
            parallel,
            out,
        } => {
            let sc = load_scenario(&common)?;
            if governor.len() < 2 {
                return Err(Error::InvalidConfig("compare needs at least two governors".into()));
            }
            for g in &governor {
                sc.governor_spec(g)?;
            }
            let mut cache = match set {
                Some(path) => SetCache::with_sets(Some(sc.load_set(&path)?), None),
                None => SetCache::default(),
            };
            let entries = governor.iter().map(|g| cache.entry(&sc, g)).collect::<Result<Vec<_>>>()?;
            let report = compare_implementations(
                &sc.system,
                &sc.constraints,
                &entries,
                &sc.profile,
                &sc.x0,
                horizon.unwrap_or(sc.horizon),
                repeats.unwrap_or(sc.repeats),
                parallel,
            )?;
            let table = report.table();
            write_json(&with_ext(&out, "json"), &report)?;
            std::fs::write(with_ext(&out, "txt"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
