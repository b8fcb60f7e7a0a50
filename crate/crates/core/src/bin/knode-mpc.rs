use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use knode_mpc::checkpoint::{load_checkpoint, save_checkpoint};
use knode_mpc::config::ExperimentConfig;
use knode_mpc::grid::{run_grid, EpisodeArtifacts};
use knode_mpc::report::{plot_columns, plot_columns_from_records, results_from_csv, results_to_csv, ResultTable};
use knode_mpc::sim::{offline_pipeline, Scenario};
use knode_mpc::Error;

#[derive(Parser)]
#[command(name = "knode-mpc", version, about = "Quadrotor tracking with an online-learned hybrid model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scenario grid and write logs, checkpoints and tables.
    Run(Common),
    /// Train the offline member on nominal-MPC data and write a checkpoint.
    TrainOffline(Common),
    /// Rebuild tables and plot columns from the artifacts of a previous run.
    Report {
        /// Results directory written by `run`.
        #[arg(long)]
        out: PathBuf,
        /// Exit non-zero if any configured cell has no result.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this single seed instead of the configured ones.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit non-zero if any episode failed.
    #[arg(long)]
    strict: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> knode_mpc::Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        None => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> knode_mpc::Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load(common: &Common) -> std::result::Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.grid.seeds = vec![seed];
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn config_text(cfg: &ExperimentConfig) -> String {
    format!("# knode-mpc-config v1\n{}", cfg.to_toml_string())
}

fn episode_name(a: &EpisodeArtifacts<'_>) -> String {
    format!("{}_{}_s{}", a.scenario.label(), a.method.name(), a.seed)
}

fn cmd_run(common: &Common) -> Outcome {
    let (cfg, out) = load(common)?;
    write(&out.join("config.toml"), &config_text(&cfg))?;
    let mut summary = String::from("knode-mpc-summary v1\n");
    let mut failures = 0usize;
    let results = run_grid(&cfg, &mut |a: EpisodeArtifacts<'_>| {
        let name = episode_name(&a);
        write(&out.join("episodes").join(format!("{name}.csv")), &a.log.to_record_text())?;
        write(&out.join("plots").join(format!("{name}.csv")), &plot_columns(a.log))?;
        for m in a.models {
            let path = out.join("checkpoints").join(format!("{name}_v{}.ckpt", m.version()));
            ensure_parent(&path)?;
            save_checkpoint(m, &path)?;
        }
        summary.push_str(&format!("episode {name} records={} failed={}\n", a.log.records.len(), a.log.failed));
        for e in &a.log.events {
            summary.push_str(&format!("  {}\n", e.render()));
        }
        if a.log.failed {
            failures += 1;
            eprintln!("episode {name} failed");
        }
        Ok(())
    })?;
    write(&out.join("summary.txt"), &summary)?;
    write(&out.join("results.csv"), &results_to_csv(&results))?;
    let table = ResultTable::for_grid(&results, &cfg.grid.radii_m, &cfg.grid.speeds_m_per_s, &cfg.grid.methods);
    write(&out.join("table.txt"), &table.render_text())?;
    write(&out.join("table.csv"), &table.to_csv())?;
    print!("{}", table.render_text());
    if common.strict && failures > 0 {
        return Err(Failure::Runtime(format!("{failures} episode(s) failed")));
    }
    Ok(())
}

fn cmd_train_offline(common: &Common) -> Outcome {
    let (cfg, out) = load(common)?;
    cfg.check_offline_window()?;
    let seed = cfg.grid.seeds[0];
    let scenario = Scenario::from_config(&cfg, cfg.grid.radii_m[0], cfg.grid.speeds_m_per_s[0]);
    let (model, report) = offline_pipeline(&scenario, &cfg, seed)?;
    let path = out.join(format!("offline_{}_s{seed}.ckpt", scenario.label()));
    ensure_parent(&path)?;
    save_checkpoint(&model, &path)?;
    // reload so a broken file is reported here rather than at deployment
    load_checkpoint(&path)?;
    println!(
        "wrote {} (members={}, initial_loss={:.6e}, final_loss={:.6e})",
        path.display(),
        model.len(),
        report.initial_loss,
        report.final_loss
    );
    Ok(())
}

fn read(path: &Path) -> knode_mpc::Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn cmd_report(out: &Path, strict: bool) -> Outcome {
    let results_path = out.join("results.csv");
    let results = results_from_csv(&read(&results_path)?, &results_path)?;
    let cfg_path = out.join("config.toml");
    let table = if cfg_path.exists() {
        let cfg = ExperimentConfig::load(&cfg_path)?;
        ResultTable::for_grid(&results, &cfg.grid.radii_m, &cfg.grid.speeds_m_per_s, &cfg.grid.methods)
    } else {
        ResultTable::from_results(&results)
    };
    write(&out.join("table.txt"), &table.render_text())?;
    write(&out.join("table.csv"), &table.to_csv())?;

    let episodes = out.join("episodes");
    if episodes.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&episodes)
            .map_err(|e| io_err(&episodes, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        names.sort();
        for p in names {
            let cols = plot_columns_from_records(&read(&p)?, &p)?;
            write(&out.join("plots").join(p.file_name().unwrap()), &cols)?;
        }
    }
    print!("{}", table.render_text());
    if !table.gaps.is_empty() {
        eprintln!("{} cell(s) without results", table.gaps.len());
        if strict {
            return Err(Failure::Runtime("incomplete grid".into()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::TrainOffline(c) => cmd_train_offline(c),
        Command::Report { out, strict } => cmd_report(out, *strict),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
