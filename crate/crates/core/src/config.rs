//! Flat experiment configuration: one typed key-value file covering data,
//! model, optimization, and regularization. Unknown keys are rejected, every
//! field has a default, and a config hash (over the semantic fields, i.e.
//! excluding seed, run id, and output paths) identifies a sweep cell.

use crate::error::{Error, Result};
use crate::regularizer::{RegularizerSpec, Scheme};
use crate::tasks::{load_tsv, Dataset, DatasetSpec, TaskKind, Tokenizer};
use crate::training::TrainConfig;
use crate::transformer::{Architecture, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Defaults to `<config_hash>_s<seed>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub out_dir: String,

    // Data.
    pub task: TaskKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub data_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_tsv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_tsv: Option<String>,
    pub tokenizer: Tokenizer,

    // Model.
    pub d_emb: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden_dropout: f64,

    // Optimization.
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub eval_every: usize,

    // Regularization.
    pub scheme: Scheme,
    pub rate: f64,
    pub p_self: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_rate: Option<f64>,
    pub cross_attention_tlm: bool,
    pub independent_strategy_draws: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let r = RegularizerSpec::default();
        ExperimentConfig {
            run_id: None,
            out_dir: "runs".to_string(),
            task: TaskKind::Copy,
            vocab: 8,
            min_len: 3,
            max_len: 6,
            train_examples: 500,
            eval_examples: 100,
            data_seed: 1,
            train_tsv: None,
            eval_tsv: None,
            tokenizer: Tokenizer::Whitespace,
            d_emb: 32,
            heads: 2,
            layers: 2,
            hidden_dropout: 0.1,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            seed: t.seed,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            patience: t.patience,
            eval_every: t.eval_every,
            scheme: r.scheme,
            rate: r.rate,
            p_self: r.p_self,
            encoder_rate: None,
            decoder_rate: None,
            cross_attention_tlm: false,
            independent_strategy_draws: false,
        }
    }
}

/// Everything needed to run: the built dataset plus derived model shape.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub dataset: Dataset,
    pub run_id: String,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config("config_file", e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            patience: self.patience,
            eval_every: self.eval_every,
        }
    }

    pub fn reg_spec(&self) -> RegularizerSpec {
        RegularizerSpec {
            scheme: self.scheme.clone(),
            rate: self.rate,
            p_self: self.p_self,
            encoder_rate: self.encoder_rate,
            decoder_rate: self.decoder_rate,
            cross_attention_tlm: self.cross_attention_tlm,
            independent_strategy_draws: self.independent_strategy_draws,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            task: self.task,
            vocab: self.vocab,
            min_len: self.min_len,
            max_len: self.max_len,
            train: self.train_examples,
            eval: self.eval_examples,
            seed: self.data_seed,
        }
    }

    /// Field-level validation that runs before any compute.
    pub fn validate(&self) -> Result<()> {
        self.train_cfg().validate()?;
        self.reg_spec().validate()?;
        if self.task == TaskKind::TsvClassification {
            if self.train_tsv.is_none() {
                return Err(Error::config("train_tsv", "tsv_classification needs a training file"));
            }
        } else {
            self.dataset_spec().validate()?;
        }
        if self.d_emb == 0 || self.heads == 0 || self.d_emb % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("head count {} must be nonzero and divide d_emb {}", self.heads, self.d_emb),
            ));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "need at least one layer"));
        }
        if !(0.0..1.0).contains(&self.hidden_dropout) {
            return Err(Error::config(
                "hidden_dropout",
                format!("rate must be in [0, 1), got {}", self.hidden_dropout),
            ));
        }
        Ok(())
    }

    /// Hash of the semantic fields: `seed`, `run_id`, and `out_dir` are
    /// excluded so the same cell keeps one hash across seeds and machines.
    /// First 16 hex characters of a SHA-256 over canonical JSON.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("seed");
            map.remove("run_id");
            map.remove("out_dir");
        }
        let canonical = value.to_string();
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }

    pub fn run_id(&self) -> String {
        match &self.run_id {
            Some(id) => id.clone(),
            None => format!("{}_s{}", self.config_hash(), self.seed),
        }
    }

    /// Generate or load the dataset and derive the model shape from it.
    pub fn build(&self) -> Result<Experiment> {
        self.validate()?;
        let dataset = match self.task {
            TaskKind::TsvClassification => {
                let train = self.train_tsv.as_ref().expect("validated above");
                let eval = self.eval_tsv.as_ref();
                let (ds, _) =
                    load_tsv(Path::new(train), eval.map(|p| Path::new(p.as_str())), self.tokenizer)?;
                ds
            }
            _ => crate::tasks::generate_dataset(&self.dataset_spec())?,
        };
        let arch = if self.task.is_seq2seq() { Architecture::Seq2Seq } else { Architecture::Classifier };
        let max_len = required_max_len(&dataset, arch);
        let model = ModelConfig {
            arch,
            vocab: dataset.vocab,
            d_emb: self.d_emb,
            heads: self.heads,
            layers: self.layers,
            max_len,
            classes: dataset.classes,
            hidden_dropout: self.hidden_dropout,
        };
        model.validate()?;
        Ok(Experiment {
            config: self.clone(),
            model,
            dataset,
            run_id: self.run_id(),
            hash: self.config_hash(),
        })
    }
}

/// The positional table must cover every batch the task can produce: inputs
/// gain a begin token for classification; decoder rows are target plus one.
fn required_max_len(ds: &Dataset, arch: Architecture) -> usize {
    let all = ds.train.iter().chain(&ds.eval);
    match arch {
        Architecture::Classifier => 1 + all.map(|e| e.input.len()).max().unwrap_or(1),
        Architecture::Seq2Seq => all
            .map(|e| e.input.len().max(e.target.len() + 1))
            .max()
            .unwrap_or(2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("not_a_field = 3").unwrap_err();
        assert!(err.to_string().contains("not_a_field"), "{err}");
    }

    #[test]
    fn invalid_rate_names_the_field() {
        let cfg = ExperimentConfig::from_toml_str("rate = 1.0").unwrap();
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "rate"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn hash_ignores_identity_fields_but_not_semantics() {
        let base = ExperimentConfig::default();
        let h = base.config_hash();
        assert_eq!(h.len(), 16);
        let mut seeded = base.clone();
        seeded.seed = 99;
        seeded.run_id = Some("custom".into());
        seeded.out_dir = "elsewhere".into();
        assert_eq!(seeded.config_hash(), h);
        let mut changed = base.clone();
        changed.rate = 0.2;
        assert_ne!(changed.config_hash(), h);
        assert_eq!(base.config_hash(), h, "hashing must be pure");
    }

    #[test]
    fn run_id_defaults_to_hash_and_seed() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 7;
        assert_eq!(cfg.run_id(), format!("{}_s7", cfg.config_hash()));
        cfg.run_id = Some("mine".into());
        assert_eq!(cfg.run_id(), "mine");
    }

    #[test]
    fn build_derives_model_shape_from_data() {
        let cfg = ExperimentConfig::from_toml_str(
            "task = \"copy\"\ntrain_examples = 20\neval_examples = 5\n",
        )
        .unwrap();
        let exp = cfg.build().unwrap();
        assert_eq!(exp.model.arch, Architecture::Seq2Seq);
        assert_eq!(exp.model.vocab, 8);
        // Longest input is 6; decoder rows are target length plus the begin
        // token, so 7 positions are needed.
        assert_eq!(exp.model.max_len, 7);
        assert_eq!(exp.dataset.train.len(), 20);
    }

    #[test]
    fn kebab_task_names_parse() {
        let cfg = ExperimentConfig::from_toml_str("task = \"parity-pattern\"").unwrap();
        assert_eq!(cfg.task, TaskKind::ParityPattern);
    }

    #[test]
    fn tsv_task_requires_a_file() {
        let cfg = ExperimentConfig::from_toml_str("task = \"tsv_classification\"").unwrap();
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train_tsv"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let mut cfg = ExperimentConfig::default();
        cfg.scheme = "tlm+drophead".parse().unwrap();
        cfg.encoder_rate = Some(0.15);
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
