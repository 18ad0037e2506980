//! Run configuration: one TOML file drives data generation, the model and
//! training. Unknown keys are rejected; every field has a default matching
//! the reference hyperparameters, so an empty file is a valid config.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::datagen::GeneratorSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for multi-seed sweeps; when empty, `seed` alone is used.
    pub seeds: Vec<u64>,
    pub out_dir: String,
    /// Optional embedding file ("T d_text" header plus rows); empty means
    /// the deterministic built-in embeddings.
    pub embedding_file: String,
    pub data: GeneratorSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: Vec::new(),
            out_dir: "runs/out".into(),
            embedding_file: String::new(),
            data: GeneratorSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Which branches a run trains; the four ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSelection {
    Teacher,
    TeacherS1,
    TeacherS2,
    Full,
}

impl std::str::FromStr for BranchSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(BranchSelection::Teacher),
            "ts1" => Ok(BranchSelection::TeacherS1),
            "ts2" => Ok(BranchSelection::TeacherS2),
            "full" => Ok(BranchSelection::Full),
            other => Err(Error::Config(format!(
                "unknown branch selection {other:?}; expected teacher|ts1|ts2|full"
            ))),
        }
    }
}

impl BranchSelection {
    pub fn apply(self, train: &mut TrainConfig) {
        let (s1, s2) = match self {
            BranchSelection::Teacher => (false, false),
            BranchSelection::TeacherS1 => (true, false),
            BranchSelection::TeacherS2 => (false, true),
            BranchSelection::Full => (true, true),
        };
        train.enable_s1 = s1;
        train.enable_s2 = s2;
        train.enable_adversarial = train.enable_adversarial && s2;
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.tasks != self.data.tasks {
            return Err(Error::Config(format!(
                "model.tasks={} but data.tasks={}",
                self.model.tasks, self.data.tasks
            )));
        }
        if self.model.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "model.image_size={} but data.image_size={}",
                self.model.image_size, self.data.image_size
            )));
        }
        Ok(())
    }

    /// Seeds to run: the explicit list, or the single seed.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex_string(&h.finalize())
    }

    /// Write the effective config next to the run outputs.
    pub fn echo(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("config.toml");
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
