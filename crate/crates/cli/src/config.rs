//! Pipeline configuration: a TOML file with defaults for every field,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topicdt::pipeline::StageConfig;
use topicdt::train::ExperimentConfig;
use topicdt::{Error, Result};

pub const DATA_DIR_ENV: &str = "ADT_DATA_DIR";

/// File locations. Relative paths resolve against the data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub pairs: PathBuf,
    pub vectors: PathBuf,
    /// Alliance inventory; the bundled paraphrased items when unset.
    pub inventory: Option<PathBuf>,
    pub topic_model: PathBuf,
    pub rewards: PathBuf,
    pub trajectories: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "transcripts.jsonl".into(),
            pairs: "pairs.jsonl".into(),
            vectors: "vectors.txt".into(),
            inventory: None,
            topic_model: "topics.txt".into(),
            rewards: "rewards.tsv".into(),
            trajectories: "trajectories.jsonl".into(),
            checkpoints: "checkpoints".into(),
            outputs: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub base: u64,
    pub count: usize,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { base: 1, count: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSection {
    pub sessions: usize,
    pub turns: usize,
    pub topics: usize,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection { sessions: 200, turns: 40, topics: 8, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Root for relative paths; `ADT_DATA_DIR`, then `data`, when unset.
    pub data_dir: Option<PathBuf>,
    pub paths: Paths,
    pub stages: StageConfig,
    pub experiment: ExperimentConfig,
    pub seeds: Seeds,
    pub synthetic: SyntheticSection,
    pub jobs: usize,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.experiment.split.iter().sum();
        if self.experiment.split.len() < 2 || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "experiment.split must have at least two fractions summing to 1, got {:?}",
                self.experiment.split
            )));
        }
        if self.seeds.count == 0 {
            return Err(Error::Validation("seeds.count must be positive".into()));
        }
        self.experiment.model.validate()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir().join(p)
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        topicdt::train::seed_list(self.seeds.base, self.seeds.count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use topicdt::alliance::RewardScale;

    #[test]
    fn empty_file_gives_defaults() {
        let c = PipelineConfig::parse("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.experiment.split, vec![0.95, 0.05]);
        assert_eq!(c.experiment.model.context_k, 20);
        c.validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = PipelineConfig::parse(
            "jobs = 2\n[experiment]\nscale = \"goal\"\n[experiment.model]\nd_model = 32\n[experiment.opt]\nsteps = 7\n",
        )
        .unwrap();
        assert_eq!(c.jobs, 2);
        assert_eq!(c.experiment.scale, RewardScale::Goal);
        assert_eq!(c.experiment.model.d_model, 32);
        assert_eq!(c.experiment.model.n_layers, 3);
        assert_eq!(c.experiment.opt.steps, 7);
        assert_eq!(c.experiment.opt.learning_rate, 1e-4);
    }

    #[test]
    fn bad_split_rejected() {
        let c = PipelineConfig::parse("[experiment]\nsplit = [0.5, 0.4]\n").unwrap();
        assert!(c.validate().is_err());
        assert!(PipelineConfig::parse("[experiment]\nsplit = \"x\"\n").is_err());
    }

    #[test]
    fn relative_paths_use_data_dir() {
        let c = PipelineConfig { data_dir: Some("/tmp/d".into()), ..Default::default() };
        assert_eq!(c.resolve(Path::new("a.txt")), PathBuf::from("/tmp/d/a.txt"));
        assert_eq!(c.resolve(Path::new("/abs")), PathBuf::from("/abs"));
    }
}
