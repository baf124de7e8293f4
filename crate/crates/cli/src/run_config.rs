//! Resolved run configuration: `[data]`, `[model]`, `[training]` and
//! `[sweep]` sections plus command-line overrides.

use std::path::{Path, PathBuf};

use ahstn::config::{parse_value, render_section, unknown_key, KvFile};
use ahstn::data::SyntheticSpec;
use ahstn::model::ModelConfig;
use ahstn::training::TrainConfig;
use ahstn::Error;

use crate::output::CliError;
use crate::Shared;

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub series: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub sweep_ratios: Option<Vec<f64>>,
}

fn read_kv(path: &Path) -> Result<KvFile, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
    }
    Ok(KvFile::read(path)?)
}

pub fn parse_ratios(key: &str, value: &str) -> Result<Vec<f64>, Error> {
    value.split(',').map(|s| parse_value(key, s)).collect()
}

impl RunConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self, Error> {
        let base = kv.base_dir();
        let mut cfg = RunConfig::default();
        for e in &kv.entries {
            match e.section.as_str() {
                "data" => {
                    let path = Some(base.join(&e.value));
                    match e.key.as_str() {
                        "series" => cfg.series = path,
                        "edges" => cfg.edges = path,
                        "labels" => cfg.labels = path,
                        _ => return Err(unknown_key("data", &e.key)),
                    }
                }
                "model" => cfg.model.set(&e.key, &e.value)?,
                "training" => cfg.training.set(&e.key, &e.value)?,
                "sweep" => match e.key.as_str() {
                    "ratios" => cfg.sweep_ratios = Some(parse_ratios(&e.key, &e.value)?),
                    _ => return Err(unknown_key("sweep", &e.key)),
                },
                "" => return Err(Error::Config(format!("key '{}' must sit inside a section", e.key))),
                other => return Err(Error::Config(format!("unknown section [{other}]"))),
            }
        }
        Ok(cfg)
    }

    /// Reads `--config` (if any) and applies the command-line overrides.
    pub fn resolve(shared: &Shared) -> Result<Self, CliError> {
        let mut cfg = match &shared.config {
            Some(path) => Self::from_kv(&read_kv(path)?)?,
            None => Self::default(),
        };
        if let Some(seed) = shared.seed {
            cfg.model.seed = seed;
            cfg.training.seed = seed;
        }
        if let Some(v) = shared.variant {
            cfg.model.variant = v;
        }
        cfg.model.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn require_series(&self) -> Result<&Path, CliError> {
        let path = self
            .series
            .as_deref()
            .ok_or_else(|| CliError::Usage("no series file given ([data] series)".into()))?;
        require_file(path)?;
        Ok(path)
    }

    pub fn render(&self) -> String {
        let show = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let data = vec![
            ("series".to_string(), show(&self.series)),
            ("edges".to_string(), show(&self.edges)),
            ("labels".to_string(), show(&self.labels)),
        ];
        let mut out = render_section("data", &data);
        out.push_str(&render_section("model", &self.model.pairs()));
        out.push_str(&render_section("training", &self.training.pairs()));
        if let Some(r) = &self.sweep_ratios {
            let joined: Vec<String> = r.iter().map(f64::to_string).collect();
            out.push_str(&render_section("sweep", &[("ratios".to_string(), joined.join(","))]));
        }
        out
    }
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", path.display())))
    }
}

/// Synthetic spec from `--config` (flat `key = value` lines) plus `--seed`.
pub fn resolve_synthetic(shared: &Shared) -> Result<SyntheticSpec, CliError> {
    let mut spec = match &shared.config {
        Some(path) => SyntheticSpec::from_kv(&read_kv(path)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = shared.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}
