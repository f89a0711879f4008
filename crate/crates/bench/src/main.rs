use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use meris_bench::{
    emit_plot_data, run_sweep, write_trials_csv, PlotKind, Profile, RunManifest, SweepSpec,
};
use meris_core::ao;
use meris_core::config::{load_config, SchemeFlags, SystemConfig};

#[derive(Parser)]
#[command(name = "meris", version, about = "Energy-efficiency optimization for movable-antenna BS with a movable-element RIS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One trial with a per-iteration trace.
    Run {
        #[command(flatten)]
        common: Common,
        /// Trial index.
        #[arg(long, default_value_t = 0)]
        trial: u64,
        /// Scheme to run.
        #[arg(long, default_value = "MA-ME")]
        scheme: SchemeFlags,
    },
    /// Mean EE over a grid of one swept variable.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Swept variable and values, e.g. `pmax_dbm=0,4,8,12,16,20`.
        #[arg(long)]
        sweep: Option<SweepSpec>,
    },
    /// EE traces per AO iteration.
    Convergence {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file. CLI flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed of all trial RNG streams.
    #[arg(long)]
    seed: u64,
    /// Trials per cell. Defaults to the profile's count.
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated scheme list.
    #[arg(long, value_delimiter = ',', default_values = ["MA-ME", "FA-ME", "MA-FE", "FA-FE"])]
    schemes: Vec<SchemeFlags>,
    /// Scenario size preset. Defaults to `desk` when no config file is given.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<(SystemConfig, usize)> {
        let mut config = match &self.config {
            Some(path) => SystemConfig::from_path(path).with_context(|| format!("loading {}", path.display()))?,
            None => load_config("")?,
        };
        let profile = match (self.profile, &self.config) {
            (Some(p), _) => Some(p),
            (None, None) => Some(Profile::Desk),
            (None, Some(_)) => None,
        };
        if let Some(p) = profile {
            p.apply(&mut config);
        }
        config.seed = self.seed;
        config.validate()?;
        let trials = self.trials.unwrap_or(profile.unwrap_or(Profile::Desk).trials());
        if trials == 0 {
            bail!("--trials must be at least 1");
        }
        Ok((config, trials))
    }
}

fn finish(manifest: &mut RunManifest, files: &[PathBuf], out: &Path) -> Result<()> {
    manifest.files = files
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let path = out.join("manifest.json");
    manifest.write(&path)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { common, trial, scheme } => {
            let (mut config, _) = common.resolve()?;
            config.scheme = scheme;
            let (_, report) = ao::run(&config, trial).context("trial has no feasible initialization")?;
            println!("scheme {} trial {trial} redraws {}", scheme, report.redraws);
            for (i, ee) in report.ee_per_iteration.iter().enumerate() {
                println!("iter {i:3}  EE {ee:.6} bit/J/Hz");
            }
            println!("termination {:?} after {} iterations", report.termination, report.iterations_used);
            println!("{}", report.final_audit);
            fs::create_dir_all(&common.out).with_context(|| common.out.display().to_string())?;
            let path = common.out.join(format!("run_trial{trial}_{}.json", scheme.name().to_lowercase()));
            fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| path.display().to_string())?;
            let mut manifest = RunManifest::new("run", &config, 1, &[scheme]);
            finish(&mut manifest, &[path], &common.out)
        }
        Command::Sweep { common, sweep } => {
            let (config, trials) = common.resolve()?;
            let table = run_sweep(&config, sweep.as_ref(), &common.schemes, trials)?;
            let mut files = emit_plot_data(&table, PlotKind::Sweep, config.num_ris_elements, &common.out)?;
            let trials_path = common.out.join("trials.csv");
            write_trials_csv(&table, &trials_path)?;
            files.push(trials_path);
            for c in table.summarize() {
                println!(
                    "{:>8} {:6} mean EE {:.6} ± {:.6} outages {}/{}",
                    c.sweep_value, c.scheme, c.mean_ee, c.stderr, c.outages, c.trials
                );
            }
            let mut manifest = RunManifest::new("sweep", &config, trials, &common.schemes);
            manifest.sweep = sweep.map(|s| s.to_string());
            finish(&mut manifest, &files, &common.out)
        }
        Command::Convergence { common } => {
            let (config, trials) = common.resolve()?;
            let table = run_sweep(&config, None, &common.schemes, trials)?;
            let files = emit_plot_data(&table, PlotKind::Convergence, config.num_ris_elements, &common.out)?;
            let mut manifest = RunManifest::new("convergence", &config, trials, &common.schemes);
            finish(&mut manifest, &files, &common.out)
        }
    }
}
