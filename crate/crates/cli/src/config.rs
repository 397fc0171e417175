//! Effective training configuration: recipe defaults, then a TOML file,
//! then command-line flags.

use std::fs;
use std::path::Path;

use kwsforge::training::TrainConfig;
use kwsforge::ModelName;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Invalid(#[from] kwsforge::TrainError),
}

/// Flag values; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<ModelName>,
    pub learning_rate: Option<f32>,
    pub momentum: Option<f32>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<u32>,
    pub seed: Option<u64>,
    pub no_augment: bool,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Builds the config. The model and momentum, wherever they come from,
/// pick the recipe that supplies every value not set explicitly.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<TrainConfig, ConfigError> {
    let (file_table, path) = match file {
        Some(p) => {
            let path = p.display().to_string();
            let text = fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: path.clone(),
                source,
            })?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?;
            (table, path)
        }
        None => (toml::Table::new(), String::from("<flags>")),
    };
    let parse_err = |message: String| ConfigError::Parse {
        path: path.clone(),
        message,
    };

    let from_file: TrainConfig = toml::Value::Table(file_table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
    let model = flags.model.unwrap_or(if file_table.contains_key("model") {
        from_file.model
    } else {
        ModelName::CnnTradPool2
    });
    let momentum = flags.momentum.unwrap_or(if file_table.contains_key("momentum") {
        from_file.momentum
    } else {
        0.0
    });

    let recipe = TrainConfig::recipe(model, momentum);
    let mut table = toml::Table::try_from(&recipe).map_err(|e| parse_err(e.to_string()))?;
    merge(&mut table, file_table);
    let mut config: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;

    config.model = model;
    config.momentum = momentum;
    if let Some(v) = flags.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = flags.max_epochs {
        config.max_epochs = v;
    }
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    if flags.no_augment {
        config.augment = kwsforge::dataset::AugmentConfig::disabled();
    }
    config.validate()?;
    Ok(config)
}

pub fn to_toml(config: &TrainConfig) -> String {
    toml::to_string(config).expect("config serializes")
}
