use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use freqscreen::cli::{cmd_eval, cmd_gendata, cmd_train, cmd_verify, exit_code_for};
use freqscreen::config::{BranchSelection, RunConfig};
use freqscreen::error::Result;

#[derive(Parser)]
#[command(
    name = "freqscreen",
    about = "Partially supervised multi-label screening with frequency-domain feature augmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.seeds.clear();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain datasets.
    Gendata {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train (optionally a branch ablation) and write checkpoint, log and
    /// metrics report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Branch ablation: teacher | ts1 | ts2 | full.
        #[arg(long)]
        branches: Option<String>,
        /// Use an existing dataset dump instead of generating.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Teacher-only evaluation of a checkpoint on a dataset dump.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional path for the JSON report (stdout always).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification suite; exits 2 on any failure.
    Verify {
        /// Optional path for the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gendata { cfg } => {
            let config = cfg.load()?;
            let dir = cmd_gendata(&config)?;
            println!("datasets written to {}", dir.display());
            Ok(0)
        }
        Command::Train {
            cfg,
            branches,
            data,
            resume,
        } => {
            let config = cfg.load()?;
            let sel = branches
                .map(|s| s.parse::<BranchSelection>())
                .transpose()?;
            let summaries = cmd_train(&config, sel, data.as_deref(), resume.as_deref())?;
            for s in &summaries {
                match (s.ood_m_f, s.ood_m_qwk) {
                    (Some(mf), Some(mqwk)) => println!(
                        "seed={} in_mF={:.4} in_mQWK={:.4} ood_mF={:.4} ood_mQWK={:.4}",
                        s.seed, s.in_domain_m_f, s.in_domain_m_qwk, mf, mqwk
                    ),
                    _ => println!(
                        "seed={} in_mF={:.4} in_mQWK={:.4}",
                        s.seed, s.in_domain_m_f, s.in_domain_m_qwk
                    ),
                }
            }
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let doc = cmd_eval(&checkpoint, &data)?;
            let json = serde_json::to_string_pretty(&doc).expect("serializable");
            println!("{json}");
            if let Some(path) = out {
                if let Some(parent) = path.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                std::fs::write(path, json)?;
            }
            Ok(0)
        }
        Command::Verify { out } => {
            let ok = cmd_verify(out.as_deref())?;
            Ok(if ok { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
