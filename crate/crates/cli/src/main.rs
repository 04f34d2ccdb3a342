use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emalab_cli::{
    cmd_compare, cmd_grad_check, cmd_probe, cmd_train, exit_code, ExperimentConfig, SweepSpec,
};
use emalab_core::Result;

#[derive(Parser)]
#[command(
    name = "emalab",
    version,
    about = "Momentum-teacher experiments at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the fully materialized config and exit.
        #[arg(long)]
        dump_config: bool,
    },
    /// Run a sweep of policy presets against EMA coefficients.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dump_config: bool,
    },
    /// Re-probe the final snapshot of a run directory.
    Probe {
        #[arg(long = "out", value_name = "RUN_DIR")]
        run: PathBuf,
    },
    /// Finite-difference check of every primitive and loss.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn default_out(config: &Path, from_file: Option<&PathBuf>) -> PathBuf {
    from_file.cloned().unwrap_or_else(|| {
        let stem = config
            .file_stem()
            .map_or("run".into(), |s| s.to_string_lossy());
        PathBuf::from("runs").join(stem.as_ref())
    })
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            dump_config,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.override_seed(s);
            }
            if dump_config {
                print!("{}", cfg.to_toml());
                return Ok(0);
            }
            let out = out.unwrap_or_else(|| default_out(&config, cfg.out_dir.as_ref()));
            let s = cmd_train(&cfg, &out, &config_dir(&config))?;
            println!("wrote {}", s.dir.display());
            if let Some(loss) = s.final_loss {
                println!("final loss {loss}");
            }
            if let Some(p) = &s.probe {
                println!(
                    "knn1 {} linear {} embed_std {}",
                    p.knn1_acc, p.linear_acc, p.embed_std
                );
            }
            println!(
                "target/online backbone forwards {}",
                s.counts.target_backbone_fwd_ratio
            );
            Ok(0)
        }
        Command::Compare {
            config,
            out,
            seed,
            dump_config,
        } => {
            let mut spec = SweepSpec::load(&config)?;
            if let Some(s) = seed {
                spec.base.override_seed(s);
            }
            if dump_config {
                print!(
                    "{}",
                    toml::to_string(&spec).expect("sweep values are representable in TOML")
                );
                return Ok(0);
            }
            let out = out.unwrap_or_else(|| default_out(&config, spec.base.out_dir.as_ref()));
            let rows = cmd_compare(&spec, &out, &config_dir(&config))?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "wrote {} ({} cells, {failed} aborted)",
                out.join("summary.csv").display(),
                rows.len()
            );
            Ok(0)
        }
        Command::Probe { run } => {
            let r = cmd_probe(&run)?;
            println!(
                "knn1 {} linear {} embed_std {}",
                r.knn1_acc, r.linear_acc, r.embed_std
            );
            Ok(0)
        }
        Command::GradCheck { instances } => {
            let outcomes = cmd_grad_check(instances)?;
            let mut ok = true;
            for o in &outcomes {
                let verdict = if o.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<28} {:>4} instances  max rel err {:.3e}  {verdict}",
                    o.name, o.instances, o.max_rel_error
                );
                ok &= o.passed();
            }
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
