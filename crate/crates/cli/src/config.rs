use std::fs;
use std::path::Path;

use rfad::data::DatasetName;
use rfad::distill::{DistillConfig, LossKind};
use rfad::{Error, Result};
use serde::Deserialize;

use crate::DistillArgs;

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<String>,
    #[serde(default)]
    pub distill: DistillConfig,
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Flag values take precedence over the file.
pub fn merge(args: &DistillArgs, file: RunConfig) -> Result<(DatasetName, DistillConfig)> {
    let dataset = args
        .dataset
        .clone()
        .or(file.dataset)
        .unwrap_or_else(|| "mnist".to_string());
    let mut cfg = file.distill;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    set!(ipc => img_per_class, n_nets => n_models, channels => channels,
         batch_size => batch_size, max_iters => max_iterations, rho => rho,
         patience => patience, validation_period => validation_period,
         validation_size => validation_size, validation_models => validation_models,
         seed => seed);
    if let Some(l) = &args.loss {
        cfg.loss = LossKind::parse(l)?;
    }
    if args.learn_labels {
        cfg.learn_labels = true;
    }
    if args.no_transform {
        cfg.learn_transform = false;
    }
    cfg.validate()?;
    Ok((DatasetName::parse(&dataset)?, cfg))
}
