//! The single JSON configuration file. Every seed is explicit; replicate `r`
//! adds `r` to the dataset, training, corruption and stream seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::corrupt::{CorruptionKind, MAX_SEVERITY};
use super::dataset::DatasetSpec;
use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::filter::FilterKind;
use crate::network::train::TrainConfig;
use crate::network::BnMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NoAdapt,
    BnStats,
    Tent,
    TtawpcaRelu,
    TtawpcaExp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::NoAdapt, Method::BnStats, Method::Tent, Method::TtawpcaRelu, Method::TtawpcaExp];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoAdapt => "no-adapt",
            Method::BnStats => "bn-stats",
            Method::Tent => "tent",
            Method::TtawpcaRelu => "ttawpca-relu",
            Method::TtawpcaExp => "ttawpca-exp",
        }
    }

    pub fn filter_kind(self) -> Option<FilterKind> {
        match self {
            Method::TtawpcaRelu => Some(FilterKind::ReluRidge),
            Method::TtawpcaExp => Some(FilterKind::NegExp),
            _ => None,
        }
    }

    pub fn adapts(self) -> bool {
        matches!(self, Method::Tent | Method::TtawpcaRelu | Method::TtawpcaExp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    /// Requested rank `L`, capped at the feature width `p`.
    pub rank: usize,
    /// Layer index `j`; `null` means right after the first conv block.
    pub insertion_index: Option<usize>,
    pub streamed: bool,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            insertion_index: None,
            streamed: false,
        }
    }
}

/// Rank used at full scale; kept for reference, never applied by default.
pub const FULL_SCALE_RANK: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub ranks: Vec<usize>,
    pub steps: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            ranks: vec![1, 2, 4, 8, 16, 32, 64, 128],
            steps: vec![1, 2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub pca: PcaConfig,
    pub adapt: AdaptConfig,
    /// BN mode of the model carrying the filter in `ttawpca-*` runs.
    pub ttawpca_bn_mode: BnMode,
    pub methods: Vec<Method>,
    pub corruptions: Vec<CorruptionKind>,
    /// Severities to evaluate; 0 is the clean test set.
    pub severities: Vec<u8>,
    pub corruption_seed: u64,
    /// Seed offsets, one full pipeline per entry.
    pub replicates: Vec<u64>,
    pub ablation: AblationConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            train: TrainConfig {
                seed: 2,
                ..TrainConfig::default()
            },
            pca: PcaConfig::default(),
            adapt: AdaptConfig {
                seed: 4,
                ..AdaptConfig::default()
            },
            ttawpca_bn_mode: BnMode::BatchStats,
            methods: Method::ALL.to_vec(),
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![0, 1, 2, 3, 4, 5],
            corruption_seed: 3,
            replicates: vec![0, 1, 2],
            ablation: AblationConfig::default(),
        }
    }
}

/// Paths of keys in `given` that have no counterpart in `known`.
fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl BenchConfig {
    /// Parses and validates, reporting every unknown key at once.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        if !value.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let known = serde_json::to_value(BenchConfig::default())?;
        let mut bad = Vec::new();
        unknown_keys(&value, &known, "", &mut bad);
        if !bad.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", bad.join(", "))));
        }
        let cfg: BenchConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.adapt.validate()?;
        let mut bad = Vec::new();
        if self.train.epochs == 0 || self.train.batch_size < 2 || !(self.train.learning_rate > 0.0) {
            bad.push("train needs epochs ≥ 1, batch_size ≥ 2, learning_rate > 0".to_string());
        }
        if self.pca.rank == 0 {
            bad.push("pca.rank must be ≥ 1".to_string());
        }
        if self.methods.is_empty() {
            bad.push("methods must not be empty".to_string());
        }
        if self.corruptions.is_empty() {
            bad.push("corruptions must not be empty".to_string());
        }
        if self.severities.is_empty() || self.severities.iter().any(|s| *s > MAX_SEVERITY) {
            bad.push(format!("severities must be a non-empty subset of 0..={MAX_SEVERITY}"));
        }
        if self.replicates.is_empty() {
            bad.push("replicates must not be empty".to_string());
        }
        let has_dupes = |v: &mut Vec<String>| {
            let n = v.len();
            v.sort();
            v.dedup();
            v.len() != n
        };
        if has_dupes(&mut self.methods.iter().map(|m| m.name().to_string()).collect())
            || has_dupes(&mut self.corruptions.iter().map(|c| c.name().to_string()).collect())
            || has_dupes(&mut self.severities.iter().map(u8::to_string).collect())
            || has_dupes(&mut self.replicates.iter().map(u64::to_string).collect())
        {
            bad.push("methods, corruptions, severities and replicates must not repeat".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn dataset_for(&self, replicate: u64) -> DatasetSpec {
        DatasetSpec {
            seed: self.dataset.seed.wrapping_add(replicate),
            ..self.dataset.clone()
        }
    }

    pub fn train_for(&self, replicate: u64) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(replicate),
            ..self.train.clone()
        }
    }
}
