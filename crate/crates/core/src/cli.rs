//! Command implementations behind the binary: generate data, train,
//! evaluate, verify. Flags override config-file values; every command is
//! deterministic given its effective config and seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{BranchSelection, RunConfig};
use crate::datagen::{generate, GeneratedData};
use crate::decouple::DiseaseEmbeddings;
use crate::error::{Error, Result};
use crate::metrics::{combine, MetricsReport};
use crate::model::ModelParams;
use crate::trainer::{evaluate_model, model_from_checkpoint, Trainer};
use crate::verify::run_suite;

/// Top-level document written by train and eval.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsDocument {
    pub in_domain: MetricsReport,
    pub ood: Option<MetricsReport>,
}

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub metrics: PathBuf,
    pub document: MetricsDocument,
}

/// Generate the configured datasets and write the dump under
/// `<out_dir>/data`.
pub fn cmd_gendata(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let out = PathBuf::from(&config.out_dir);
    config.echo(&out)?;
    let data = generate(&config.data, config.seed)?;
    let dir = out.join("data");
    data.save(&dir)?;
    Ok(dir)
}

fn build_model(config: &RunConfig, seed: u64) -> Result<ModelParams> {
    let embeddings = if config.embedding_file.is_empty() {
        None
    } else {
        Some(DiseaseEmbeddings::load(Path::new(&config.embedding_file))?)
    };
    ModelParams::init(config.model.clone(), seed, config.train.sigma_init, embeddings)
}

/// Train one seed; returns the artifact paths and the final metrics.
pub fn train_one(
    config: &RunConfig,
    seed: u64,
    out_dir: &Path,
    data_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainArtifacts> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut effective = config.clone();
    effective.seed = seed;
    effective.out_dir = out_dir.display().to_string();
    effective.echo(out_dir)?;
    let hash = effective.hash();

    let data = match data_dir {
        Some(dir) => GeneratedData::load(dir)?,
        None => {
            let data = generate(&config.data, seed)?;
            data.save(&out_dir.join("data"))?;
            data
        }
    };

    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(ckpt, config.train.clone())?,
        None => Trainer::new(build_model(config, seed)?, config.train.clone(), seed)?,
    };

    let log_path = out_dir.join("train.log");
    let mut log_file = std::fs::File::create(&log_path)?;
    let fit = trainer.fit(
        &data.train,
        &data.in_domain_test,
        Some(&data.ood_test),
        |epoch| {
            let line = epoch.line();
            println!("{line}");
            let _ = writeln!(log_file, "{line}");
        },
    )?;

    let checkpoint = out_dir.join("checkpoint.bin");
    trainer.save_checkpoint(&checkpoint, &hash)?;

    let document = MetricsDocument {
        in_domain: fit.final_in_domain,
        ood: fit.final_ood,
    };
    let metrics = out_dir.join("metrics.json");
    std::fs::write(&metrics, serde_json::to_string_pretty(&document).expect("serializable"))?;
    Ok(TrainArtifacts {
        out_dir: out_dir.to_path_buf(),
        checkpoint,
        log: log_path,
        metrics,
        document,
    })
}

/// Summary across the config's seed list.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub in_domain_m_f: f64,
    pub in_domain_m_qwk: f64,
    pub ood_m_f: Option<f64>,
    pub ood_m_qwk: Option<f64>,
}

/// Train every seed in the config; multiple seeds land in `seed_<n>/`
/// subdirectories with a combined summary.
pub fn cmd_train(
    config: &RunConfig,
    branches: Option<BranchSelection>,
    data_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<Vec<SeedSummary>> {
    let mut config = config.clone();
    if let Some(sel) = branches {
        sel.apply(&mut config.train);
    }
    let seeds = config.seed_list();
    let root = PathBuf::from(&config.out_dir);
    let mut summaries = Vec::new();
    for &seed in &seeds {
        let out_dir = if seeds.len() == 1 {
            root.clone()
        } else {
            root.join(format!("seed_{seed}"))
        };
        let art = train_one(&config, seed, &out_dir, data_dir, resume)?;
        summaries.push(SeedSummary {
            seed,
            in_domain_m_f: art.document.in_domain.m_f,
            in_domain_m_qwk: art.document.in_domain.m_qwk,
            ood_m_f: art.document.ood.as_ref().map(|r| r.m_f),
            ood_m_qwk: art.document.ood.as_ref().map(|r| r.m_qwk),
        });
    }
    if seeds.len() > 1 {
        std::fs::create_dir_all(&root)?;
        std::fs::write(
            root.join("summary.json"),
            serde_json::to_string_pretty(&summaries).expect("serializable"),
        )?;
    }
    Ok(summaries)
}

/// Teacher-only evaluation of a checkpoint against a dataset dump.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path) -> Result<MetricsDocument> {
    let (_, model) = model_from_checkpoint(checkpoint)?;
    let data = GeneratedData::load(data_dir)?;
    let mut in_metrics = Vec::new();
    for ds in &data.in_domain_test {
        in_metrics.push(evaluate_model(&model, ds)?);
    }
    let ood = combine(vec![evaluate_model(&model, &data.ood_test)?]);
    Ok(MetricsDocument {
        in_domain: combine(in_metrics),
        ood: Some(ood),
    })
}

/// Run the verification suite; prints one line per check.
pub fn cmd_verify(report_path: Option<&Path>) -> Result<bool> {
    let checks = run_suite();
    for c in &checks {
        println!("{}", c.line());
    }
    let all = checks.iter().all(|c| c.passed);
    if let Some(path) = report_path {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&checks).expect("serializable"))?;
    }
    if all {
        println!("verify: all {} checks passed", checks.len());
    } else {
        let failed = checks.iter().filter(|c| !c.passed).count();
        println!("verify: {failed} of {} checks FAILED", checks.len());
    }
    Ok(all)
}

/// Exit code classification: 0 ok, 1 usage/config, 2 verification failure,
/// 3 numeric failure.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => 3,
        Error::Verify(_) => 2,
        _ => 1,
    }
}
