//! Flat key/value configuration files for the search and training loops.
//!
//! Two sections, `[search]` and `[train]`, mirror the outer- and inner-loop
//! hyperparameter tables. Unknown keys are hard errors so a config cannot
//! silently diverge from what a run actually used.

use crate::eval::TrainConfig;
use crate::gp::{SearchConfig, SubtreeBias};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown key '{key}' in section [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("unknown preset '{0}' (expected paper-main or paper-appendix)")]
    UnknownPreset(String),
}

/// Built-in presets: `paper-main` (population 500, 1000 epochs) and
/// `paper-appendix` (population 100, 200 epochs).
pub fn preset(name: &str) -> Result<SearchConfig, ConfigError> {
    match name {
        "paper-main" => Ok(SearchConfig::default()),
        "paper-appendix" => Ok(SearchConfig::appendix()),
        other => Err(ConfigError::UnknownPreset(other.to_string())),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::Parse {
        line,
        msg: format!("invalid value '{v}' for {key}"),
    })
}

/// Apply a config file on top of `base`. Empty lines and `#` comments are
/// ignored.
pub fn apply_config(text: &str, base: SearchConfig) -> Result<SearchConfig, ConfigError> {
    let mut cfg = base;
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if name != "search" && name != "train" {
                return Err(ConfigError::Parse {
                    line: line_no,
                    msg: format!("unknown section [{name}]"),
                });
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse { line: line_no, msg: format!("expected key = value, got '{line}'") });
        };
        let key = key.trim();
        let value = value.trim();
        match section.as_str() {
            "search" => apply_search_key(&mut cfg, line_no, key, value)?,
            "train" => apply_train_key(&mut cfg.inner, line_no, key, value)?,
            _ => {
                return Err(ConfigError::Parse {
                    line: line_no,
                    msg: "key outside a [search] or [train] section".into(),
                })
            }
        }
    }
    Ok(cfg)
}

fn apply_search_key(
    cfg: &mut SearchConfig,
    line: usize,
    key: &str,
    value: &str,
) -> Result<(), ConfigError> {
    match key {
        "population_size" => cfg.population_size = parse_num(line, key, value)?,
        "generations" => cfg.generations = parse_num(line, key, value)?,
        "tournament_size" => cfg.tournament_size = parse_num(line, key, value)?,
        "p_crossover" => cfg.p_crossover = parse_num(line, key, value)?,
        "p_subtree_mutation" => cfg.p_subtree_mutation = parse_num(line, key, value)?,
        "p_point_mutation" => cfg.p_point_mutation = parse_num(line, key, value)?,
        "p_hoist_mutation" => cfg.p_hoist_mutation = parse_num(line, key, value)?,
        "p_point_replace" => cfg.p_point_replace = parse_num(line, key, value)?,
        "parsimony_coefficient" => cfg.parsimony_coefficient = parse_num(line, key, value)?,
        "max_init_depth" => cfg.max_init_depth = parse_num(line, key, value)?,
        "seed" => cfg.seed = parse_num(line, key, value)?,
        "subtree_bias" => {
            cfg.subtree_bias = match value {
                "uniform" => SubtreeBias::Uniform,
                "weighted" => SubtreeBias::WeightedInternal,
                _ => {
                    return Err(ConfigError::Parse {
                        line,
                        msg: format!("subtree_bias must be uniform or weighted, got '{value}'"),
                    })
                }
            }
        }
        _ => {
            return Err(ConfigError::UnknownKey { section: "search".into(), key: key.into() })
        }
    }
    Ok(())
}

fn apply_train_key(
    cfg: &mut TrainConfig,
    line: usize,
    key: &str,
    value: &str,
) -> Result<(), ConfigError> {
    match key {
        "max_epochs" => cfg.max_epochs = parse_num(line, key, value)?,
        "weight_decay" => cfg.weight_decay = parse_num(line, key, value)?,
        "batch_size" => cfg.batch_size = parse_num(line, key, value)?,
        "early_stop_patience" => cfg.early_stop_patience = parse_num(line, key, value)?,
        "seed" => cfg.seed = parse_num(line, key, value)?,
        "learning_rates" => {
            let rates: Result<Vec<f64>, _> = value
                .split(',')
                .map(|v| parse_num(line, key, v))
                .collect();
            let rates = rates?;
            if rates.is_empty() {
                return Err(ConfigError::Parse { line, msg: "learning_rates is empty".into() });
            }
            cfg.learning_rates = rates;
        }
        _ => return Err(ConfigError::UnknownKey { section: "train".into(), key: key.into() }),
    }
    Ok(())
}

/// The full configuration in file form; applying the output on top of any
/// base reproduces `cfg`.
pub fn render_config(cfg: &SearchConfig) -> String {
    let bias = match cfg.subtree_bias {
        SubtreeBias::Uniform => "uniform",
        SubtreeBias::WeightedInternal => "weighted",
    };
    let rates = cfg
        .inner
        .learning_rates
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "[search]\n\
         population_size = {}\n\
         generations = {}\n\
         tournament_size = {}\n\
         p_crossover = {}\n\
         p_subtree_mutation = {}\n\
         p_point_mutation = {}\n\
         p_hoist_mutation = {}\n\
         p_point_replace = {}\n\
         parsimony_coefficient = {}\n\
         max_init_depth = {}\n\
         subtree_bias = {}\n\
         seed = {}\n\
         \n\
         [train]\n\
         max_epochs = {}\n\
         learning_rates = {}\n\
         weight_decay = {}\n\
         batch_size = {}\n\
         early_stop_patience = {}\n\
         seed = {}\n",
        cfg.population_size,
        cfg.generations,
        cfg.tournament_size,
        cfg.p_crossover,
        cfg.p_subtree_mutation,
        cfg.p_point_mutation,
        cfg.p_hoist_mutation,
        cfg.p_point_replace,
        cfg.parsimony_coefficient,
        cfg.max_init_depth,
        bias,
        cfg.seed,
        cfg.inner.max_epochs,
        rates,
        cfg.inner.weight_decay,
        cfg.inner.batch_size,
        cfg.inner.early_stop_patience,
        cfg.inner.seed,
    )
}
