//! Output directory handling, manifests and CSV tables.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ahstn::training::{EpochRecord, Metrics, Report};
use ahstn::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn is_usage(&self) -> bool {
        match self {
            CliError::Usage(_) => true,
            CliError::Core(e) => e.is_usage(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare_out(dir: &Path, force: bool) -> CliResult<PathBuf> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(dir)
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(dir.to_path_buf())
}

/// Plain-text record of a run: command, resolved configuration, outputs
/// and a few result lines.
pub struct Manifest {
    text: String,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            text: format!("command = {command}\nversion = {}\n\n", env!("CARGO_PKG_VERSION")),
        }
    }

    pub fn config(&mut self, rendered: &str) {
        self.text.push_str(rendered);
        self.text.push('\n');
    }

    pub fn section(&mut self, name: &str, pairs: &[(&str, String)]) {
        self.text.push_str(&format!("[{name}]\n"));
        for (k, v) in pairs {
            self.text.push_str(&format!("{k} = {v}\n"));
        }
        self.text.push('\n');
    }

    pub fn save(&self, dir: &Path) -> CliResult {
        write(&dir.join("manifest.txt"), &self.text)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn metric_cells(m: &Metrics) -> String {
    format!("{},{},{}", cell(m.mae), cell(m.rmse), cell(m.mape))
}

fn metric_header(steps: &[usize]) -> String {
    let mut cols: Vec<String> = Vec::new();
    for s in steps {
        for m in ["mae", "rmse", "mape"] {
            cols.push(format!("step{s}_{m}"));
        }
    }
    for m in ["mae", "rmse", "mape"] {
        cols.push(format!("avg_{m}"));
    }
    cols.join(",")
}

fn metric_row(report: &Report) -> String {
    let mut parts: Vec<String> = report.horizons.iter().map(|(_, m)| metric_cells(m)).collect();
    parts.push(metric_cells(&report.average));
    parts.join(",")
}

/// One row per `(model, split)`, three metrics per reported step plus the
/// all-horizon average.
pub struct ReportTable {
    text: String,
}

impl ReportTable {
    pub fn new(steps: &[usize]) -> Self {
        Self {
            text: format!("model,split,{}\n", metric_header(steps)),
        }
    }

    pub fn push(&mut self, model: &str, split: &str, report: &Report) {
        self.text.push_str(&format!("{model},{split},{}\n", metric_row(report)));
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

pub fn history_csv(history: &[EpochRecord], steps: &[usize]) -> String {
    let mut out = format!("epoch,phase,lr,train_loss,{}\n", metric_header(steps));
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.phase.as_str(),
            r.lr,
            r.train_loss,
            metric_row(&r.val)
        ));
    }
    out
}
