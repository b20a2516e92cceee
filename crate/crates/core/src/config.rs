//! Experiment configuration files.
//!
//! ```toml
//! preset = "toy"            # defaults for every section below
//!
//! [encoder]                 # any EncoderConfig field; `preset` allowed
//! [adapter]                 # variant, kernels, bottleneck, fusion, placement, rank, prompt_tokens
//! [train]                   # any TrainConfig field; `preset` = toy | pretrained
//! [data]                    # corpus = "path"; any CorpusSpec field
//! ```
//!
//! Keys override preset values; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::adapters::AdapterConfig;
use crate::data::CorpusSpec;
use crate::error::{Error, Result};
use crate::nn::EncoderConfig;
use crate::train::TrainConfig;

pub const PRESETS: [&str; 2] = ["toy", "xlsr"];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Corpus file; when absent the corpus is generated from `spec`.
    pub corpus: Option<PathBuf>,
    pub spec: CorpusSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Adapter defaults that go with an encoder preset: the toy backbone uses a
/// 16-wide bottleneck.
pub fn adapter_preset(name: &str) -> Result<AdapterConfig> {
    match name {
        "xlsr" => Ok(AdapterConfig::default()),
        "toy" => Ok(AdapterConfig {
            bottleneck: 16,
            ..AdapterConfig::default()
        }),
        other => Err(unknown_preset(other)),
    }
}

fn train_preset(name: &str) -> Result<TrainConfig> {
    match name {
        "toy" => Ok(TrainConfig::toy()),
        "pretrained" | "xlsr" => Ok(TrainConfig::pretrained()),
        other => Err(unknown_preset(other)),
    }
}

fn unknown_preset(name: &str) -> Error {
    Error::Config(format!("unknown preset `{name}` (expected toy or xlsr)"))
}

/// Default corpus whose frame width matches the encoder input.
fn default_spec(enc: &EncoderConfig) -> CorpusSpec {
    CorpusSpec {
        features: enc.input_dim,
        ..CorpusSpec::default()
    }
}

fn to_table<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("config structs serialize to tables")
}

fn take_str(table: &mut Table, key: &str, section: &str) -> Result<Option<String>> {
    match table.remove(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(Error::Config(format!("{section}{key}: expected a string, found {}", other.type_str()))),
    }
}

/// Overlays `user` on `base`, descending into nested tables.
fn merge(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn section<T: Serialize + DeserializeOwned>(name: &str, base: &T, user: Table) -> Result<T> {
    let mut table = to_table(base);
    merge(&mut table, user);
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[{name}] {}", e.message())))
}

fn take_section(root: &mut Table, name: &str) -> Result<Table> {
    match root.remove(name) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(other) => Err(Error::Config(format!("`{name}` must be a table, found {}", other.type_str()))),
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let encoder = EncoderConfig::preset(name)?;
        Ok(Self {
            adapter: adapter_preset(name)?,
            train: train_preset(name)?,
            data: DataConfig {
                corpus: None,
                spec: default_spec(&encoder),
            },
            encoder,
        })
    }

    /// Parses a config document. `preset` replaces the file's top-level
    /// preset when given.
    pub fn parse(text: &str, preset: Option<&str>) -> Result<Self> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let file_preset = take_str(&mut root, "preset", "")?;
        let top = preset.map(str::to_string).or(file_preset).unwrap_or_else(|| "toy".into());

        let mut enc = take_section(&mut root, "encoder")?;
        let mut adp = take_section(&mut root, "adapter")?;
        let mut trn = take_section(&mut root, "train")?;
        let mut dat = take_section(&mut root, "data")?;
        if let Some(k) = root.keys().next() {
            return Err(Error::Config(format!("unknown top-level key `{k}`")));
        }

        let enc_preset = take_str(&mut enc, "preset", "encoder.")?.unwrap_or_else(|| top.clone());
        let adp_preset = take_str(&mut adp, "preset", "adapter.")?.unwrap_or_else(|| enc_preset.clone());
        let trn_preset = take_str(&mut trn, "preset", "train.")?.unwrap_or_else(|| top.clone());
        let corpus = take_str(&mut dat, "corpus", "data.")?.map(PathBuf::from);

        let encoder: EncoderConfig = section("encoder", &EncoderConfig::preset(&enc_preset)?, enc)?;
        let cfg = Self {
            adapter: section("adapter", &adapter_preset(&adp_preset)?, adp)?,
            train: section("train", &train_preset(&trn_preset)?, trn)?,
            data: DataConfig {
                corpus,
                spec: section("data", &default_spec(&encoder), dat)?,
            },
            encoder,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, preset: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, preset)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate(&self.encoder)?;
        self.train.validate()?;
        self.data.spec.validate()?;
        if self.data.spec.features != self.encoder.input_dim {
            return Err(Error::Config(format!(
                "data.features {} != encoder.input_dim {}",
                self.data.spec.features, self.encoder.input_dim
            )));
        }
        Ok(())
    }

    /// Every setting written out, with per-variant defaults made explicit.
    /// Parsing the result gives back the same config.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        root.insert("encoder".into(), Value::Table(to_table(&self.encoder)));
        root.insert("adapter".into(), Value::Table(to_table(&self.adapter.resolved())));
        root.insert("train".into(), Value::Table(to_table(&self.train)));
        let mut data = Table::new();
        if let Some(p) = &self.data.corpus {
            data.insert("corpus".into(), Value::String(p.display().to_string()));
        }
        merge(&mut data, to_table(&self.data.spec));
        root.insert("data".into(), Value::Table(data));
        toml::to_string(&root).expect("tables serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{Fusion, Placement, Variant};
    use crate::model::TrainMode;

    #[test]
    fn empty_document_is_the_toy_preset() {
        assert_eq!(ExperimentConfig::parse("", None).unwrap(), ExperimentConfig::preset("toy").unwrap());
    }

    #[test]
    fn keys_override_presets() {
        let cfg = ExperimentConfig::parse(
            r#"
            [encoder]
            num_layers = 1
            [adapter]
            variant = "multiconv"
            kernels = [3]
            fusion = "sum"
            placement = "ffn"
            [train]
            epochs = 4
            mode = "full_tune"
            [data]
            corpus = "c.spfb"
            num_records = 100
            proportions = { short = 0.5, bonafide = 0.5, long = 0.0, mixed = 0.0 }
            "#,
            None,
        )
        .unwrap();
        assert_eq!(cfg.encoder.num_layers, 1);
        assert_eq!(cfg.encoder.model_dim, 64);
        assert_eq!(cfg.adapter.kernels, [3]);
        assert_eq!(cfg.adapter.bottleneck, 16);
        assert_eq!(cfg.adapter.fusion, Fusion::Sum);
        assert_eq!(cfg.adapter.placement, Some(Placement::Ffn));
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.mode, TrainMode::FullTune);
        assert_eq!(cfg.data.corpus.as_deref(), Some(Path::new("c.spfb")));
        assert_eq!(cfg.data.spec.num_records, 100);
        assert_eq!(cfg.data.spec.proportions.short, 0.5);
    }

    #[test]
    fn partial_nested_tables_keep_defaults() {
        let cfg = ExperimentConfig::parse("[data.proportions]\nbonafide = 0.5\nshort = 0.5\nlong = 0\nmixed = 0\n", None).unwrap();
        assert_eq!(cfg.data.spec.proportions.long, 0.0);
        assert_eq!(cfg.data.spec.num_records, 2000);
        let cfg = ExperimentConfig::parse("[train]\nseed = 9\n", None).unwrap();
        assert_eq!(cfg.data.spec.proportions, crate::data::Proportions::default());
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            "bogus = 1",
            "[encoder]\nwidth = 3",
            "[adapter]\nkernel = [3]",
            "[train]\nlearning_rate = 0.1",
            "[data]\nrecords = 3",
            "[data.proportions]\nfake = 0.5",
            "encoder = 3",
        ] {
            let err = ExperimentConfig::parse(doc, None).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{doc}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            "[adapter]\nvariant = \"lora\"\nrank = 64",
            "[adapter]\nvariant = \"dora\"",
            "[train]\nlr = 0.0",
            "[train]\nbeta1 = 1.0",
            "[data]\nfeatures = 8",
            "preset = \"huge\"",
            "[encoder]\npreset = 3",
            "not toml at all [",
        ] {
            assert!(matches!(ExperimentConfig::parse(doc, None), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn preset_selection() {
        let cfg = ExperimentConfig::parse("preset = \"xlsr\"", None).unwrap();
        assert_eq!(cfg.data.spec.features, 512);
        assert_eq!(cfg.encoder, EncoderConfig::xlsr());
        assert_eq!(cfg.adapter.bottleneck, 64);
        assert_eq!(cfg.train, TrainConfig::pretrained());
        let cfg = ExperimentConfig::parse("preset = \"xlsr\"\n[train]\npreset = \"toy\"\n[encoder]\npreset = \"toy\"", None).unwrap();
        assert_eq!(cfg.train, TrainConfig::toy());
        assert_eq!(cfg.adapter.bottleneck, 16);
        let cfg = ExperimentConfig::parse("preset = \"xlsr\"", Some("toy")).unwrap();
        assert_eq!(cfg.encoder, EncoderConfig::toy());
    }

    #[test]
    fn resolved_toml_round_trips() {
        let mut cfg = ExperimentConfig::preset("toy").unwrap();
        cfg.adapter.variant = Variant::Houlsby;
        cfg.data.corpus = Some("x/y.spfb".into());
        let text = cfg.to_toml();
        assert!(text.contains("placement = \"both\""), "{text}");
        let back = ExperimentConfig::parse(&text, None).unwrap();
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.adapter.effective_placement(), Placement::Both);
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.data, cfg.data);
    }
}
