//! Series files, labels, and a synthetic traffic generator with known
//! community structure.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_value, unknown_key, KvFile};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graph::{csv_error, GraphSpec};
use crate::hierarchy::argmax_rows;
use crate::scalar::Scalar;

pub const DEFAULT_BIN_MINUTES: u32 = 10;

/// `N×L` node series with an observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    n_nodes: usize,
    len: usize,
    /// Node-major: `values[node * len + t]`. Missing slots hold 0 and are never read.
    values: Vec<f64>,
    observed: Vec<bool>,
    bin_minutes: u32,
}

impl RawSeries {
    /// Builds a series from node-major values; `None` marks a missing entry.
    pub fn from_nodes(rows: Vec<Vec<Option<f64>>>, bin_minutes: u32) -> Result<Self> {
        let n_nodes = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        if n_nodes == 0 || len == 0 {
            return Err(Error::Param("series needs at least one node and one time step".into()));
        }
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("series", "nodes have different lengths"));
        }
        let mut values = Vec::with_capacity(n_nodes * len);
        let mut observed = Vec::with_capacity(n_nodes * len);
        for v in rows.into_iter().flatten() {
            observed.push(v.is_some());
            values.push(v.unwrap_or(0.0));
        }
        Ok(Self {
            n_nodes,
            len,
            values,
            observed,
            bin_minutes,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bin_minutes(&self) -> u32 {
        self.bin_minutes
    }

    /// Time bins per day, at least 1.
    pub fn slots_per_day(&self) -> usize {
        (1440 / self.bin_minutes.max(1) as usize).max(1)
    }

    pub fn get(&self, node: usize, t: usize) -> Option<f64> {
        let i = node * self.len + t;
        self.observed[i].then(|| self.values[i])
    }

    pub fn is_observed(&self, node: usize, t: usize) -> bool {
        self.observed[node * self.len + t]
    }

    pub fn node(&self, node: usize) -> &[f64] {
        &self.values[node * self.len..(node + 1) * self.len]
    }

    pub fn missing_fraction(&self) -> f64 {
        self.observed.iter().filter(|&&o| !o).count() as f64 / self.observed.len() as f64
    }

    /// Time steps `range` of every node.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len {
            return Err(Error::Param(format!("invalid time range {start}..{end} for length {}", self.len)));
        }
        let rows = (0..self.n_nodes)
            .map(|i| (start..end).map(|t| self.get(i, t)).collect())
            .collect();
        Self::from_nodes(rows, self.bin_minutes)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a series CSV: header `node_0,…,node_{N-1}`, one row per time bin,
/// empty cells are missing.
pub fn load_series(path: &Path) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let n = headers.len();
    for (i, h) in headers.iter().enumerate() {
        if h != format!("node_{i}") {
            return Err(parse_err(path, 1, format!("expected column `node_{i}`, found `{h}`")));
        }
    }
    let mut rows: Vec<Vec<Option<f64>>> = vec![Vec::new(); n];
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != n {
            return Err(parse_err(path, line, format!("expected {n} cells, got {}", rec.len())));
        }
        for (node, cell) in rec.iter().enumerate() {
            let v = if cell.is_empty() {
                None
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("non-numeric cell `{cell}` in column node_{node}")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("non-finite cell `{cell}`")));
                }
                Some(v)
            };
            rows[node].push(v);
        }
    }
    if rows.first().is_none_or(Vec::is_empty) {
        return Err(parse_err(path, 1, "no data rows"));
    }
    RawSeries::from_nodes(rows, DEFAULT_BIN_MINUTES)
}

pub fn save_series(path: &Path, series: &RawSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = (0..series.n_nodes).map(|i| format!("node_{i}")).collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for t in 0..series.len {
        let row: Vec<String> = (0..series.n_nodes)
            .map(|i| series.get(i, t).map(|v| format!("{v}")).unwrap_or_default())
            .collect();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::from("node,cluster\n");
    for (i, l) in labels.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `node,cluster` rows; every node `0..N` must appear exactly once.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |k: usize| -> Result<usize> {
            rec.get(k)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| parse_err(path, line, "expected `node,cluster` integers"))
        };
        pairs.push((field(0)?, field(1)?));
    }
    let mut labels = vec![None; pairs.len()];
    for (node, cluster) in pairs {
        match labels.get_mut(node) {
            Some(slot @ None) => *slot = Some(cluster),
            _ => return Err(parse_err(path, 0, format!("node {node} is duplicated or out of range"))),
        }
    }
    Ok(labels.into_iter().map(|l| l.unwrap_or_default()).collect())
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub nodes_per_cluster: usize,
    pub length: usize,
    pub intra_density: f64,
    pub inter_density: f64,
    /// Mean of the per-cluster base levels.
    pub base_level: f64,
    /// Relative spread of base levels around `base_level`.
    pub base_spread: f64,
    /// Relative sinusoid amplitude.
    pub amplitude: f64,
    /// Cluster periods are spaced evenly over `[period_min, period_max]` bins.
    pub period_min: f64,
    pub period_max: f64,
    /// Pull of each node towards its neighbors' mean level.
    pub diffusion: f64,
    pub node_noise: f64,
    pub missing_rate: f64,
    pub bin_minutes: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            nodes_per_cluster: 8,
            length: 5000,
            intra_density: 0.6,
            inter_density: 0.02,
            base_level: 60.0,
            base_spread: 0.15,
            amplitude: 0.25,
            period_min: 25.0,
            period_max: 95.0,
            diffusion: 0.2,
            node_noise: 1.0,
            missing_rate: 0.02,
            bin_minutes: DEFAULT_BIN_MINUTES,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn n_nodes(&self) -> usize {
        self.n_clusters * self.nodes_per_cluster
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_clusters" => self.n_clusters = parse_value(key, value)?,
            "nodes_per_cluster" => self.nodes_per_cluster = parse_value(key, value)?,
            "length" => self.length = parse_value(key, value)?,
            "intra_density" => self.intra_density = parse_value(key, value)?,
            "inter_density" => self.inter_density = parse_value(key, value)?,
            "base_level" => self.base_level = parse_value(key, value)?,
            "base_spread" => self.base_spread = parse_value(key, value)?,
            "amplitude" => self.amplitude = parse_value(key, value)?,
            "period_min" => self.period_min = parse_value(key, value)?,
            "period_max" => self.period_max = parse_value(key, value)?,
            "diffusion" => self.diffusion = parse_value(key, value)?,
            "node_noise" => self.node_noise = parse_value(key, value)?,
            "missing_rate" => self.missing_rate = parse_value(key, value)?,
            "bin_minutes" => self.bin_minutes = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key("", key)),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        [
            ("n_clusters", self.n_clusters.to_string()),
            ("nodes_per_cluster", self.nodes_per_cluster.to_string()),
            ("length", self.length.to_string()),
            ("intra_density", self.intra_density.to_string()),
            ("inter_density", self.inter_density.to_string()),
            ("base_level", self.base_level.to_string()),
            ("base_spread", self.base_spread.to_string()),
            ("amplitude", self.amplitude.to_string()),
            ("period_min", self.period_min.to_string()),
            ("period_max", self.period_max.to_string()),
            ("diffusion", self.diffusion.to_string()),
            ("node_noise", self.node_noise.to_string()),
            ("missing_rate", self.missing_rate.to_string()),
            ("bin_minutes", self.bin_minutes.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies every key of an unsectioned `key = value` file on top of the defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut spec = Self::default();
        for e in &kv.entries {
            if !e.section.is_empty() {
                return Err(unknown_key(&e.section, &e.key));
            }
            spec.set(&e.key, &e.value)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_clusters == 0 || self.nodes_per_cluster == 0 || self.length == 0 {
            return fail("n_clusters, nodes_per_cluster and length must be positive".into());
        }
        for (name, p) in [
            ("intra_density", self.intra_density),
            ("inter_density", self.inter_density),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.missing_rate >= 1.0 {
            return fail("missing_rate must be below 1".into());
        }
        if !(self.period_min > 0.0 && self.period_max >= self.period_min) {
            return fail(format!(
                "need 0 < period_min <= period_max, got {} and {}",
                self.period_min, self.period_max
            ));
        }
        if self.node_noise < 0.0 || self.base_spread < 0.0 || self.amplitude < 0.0 || self.diffusion < 0.0 {
            return fail("node_noise, base_spread, amplitude and diffusion must be nonnegative".into());
        }
        if self.bin_minutes == 0 {
            return fail("bin_minutes must be positive".into());
        }
        Ok(())
    }
}

/// Generated series, its road graph and the true cluster of every node.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub series: RawSeries,
    pub graph: GraphSpec<f64>,
    pub labels: Vec<usize>,
}

/// Node `i` of cluster `c` follows
/// `base_c·(1 + A_c·sin(2πt/P_c + φ_c)) + κ·(neighbor mean − own level) + noise`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, per, len) = (spec.n_clusters, spec.nodes_per_cluster, spec.length);
    let n = c * per;
    let labels: Vec<usize> = (0..n).map(|i| i / per).collect();

    let mut adjacency = Tensor::<f64>::zeros([n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let same = labels[i] == labels[j];
            let p = if same { spec.intra_density } else { spec.inter_density };
            if rng.random_bool(p) {
                let w = if same {
                    rng.random_range(0.5..1.0)
                } else {
                    rng.random_range(0.1..0.5)
                };
                adjacency.set2(i, j, w);
                adjacency.set2(j, i, w);
            }
        }
    }
    let graph = GraphSpec::new(adjacency)?;

    let tau = std::f64::consts::TAU;
    let clusters: Vec<(f64, f64, f64, f64)> = (0..c)
        .map(|k| {
            let base = spec.base_level * (1.0 + spec.base_spread * rng.random_range(-1.0..1.0));
            let amp = spec.amplitude * rng.random_range(0.8..1.2);
            let period = if c == 1 {
                spec.period_min
            } else {
                spec.period_min + (spec.period_max - spec.period_min) * k as f64 / (c - 1) as f64
            };
            let phase = rng.random_range(0.0..tau);
            (base, amp, period, phase)
        })
        .collect();

    let level = |k: usize, t: usize| {
        let (base, amp, period, phase) = clusters[k];
        base * (1.0 + amp * (tau * t as f64 / period + phase).sin())
    };
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| graph.adjacency().at2(i, j) > 0.0).collect())
        .collect();
    let noise = Normal::new(0.0, spec.node_noise.max(0.0)).map_err(|e| Error::Param(e.to_string()))?;

    let mut rows = vec![Vec::with_capacity(len); n];
    let mut clean = vec![0.0; n];
    for t in 0..len {
        for (i, slot) in clean.iter_mut().enumerate() {
            *slot = level(labels[i], t);
        }
        for i in 0..n {
            let mut v = clean[i];
            if !neighbors[i].is_empty() {
                let mean = neighbors[i].iter().map(|&j| clean[j]).sum::<f64>() / neighbors[i].len() as f64;
                v += spec.diffusion * (mean - clean[i]);
            }
            if spec.node_noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            let missing = spec.missing_rate > 0.0 && rng.random_bool(spec.missing_rate);
            rows[i].push((!missing).then_some(v));
        }
    }
    let series = RawSeries::from_nodes(rows, spec.bin_minutes)?;
    Ok(SyntheticData { series, graph, labels })
}

/// Fraction of nodes whose argmax cluster's majority label equals their own.
/// Ties in the argmax go to the lowest cluster index, ties in the majority
/// count do not matter.
pub fn assignment_quality<S: Scalar>(m: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    if m.rank() != 2 || m.rows() != labels.len() || m.rows() == 0 {
        return Err(Error::shape(
            "assignment_quality",
            format!("{} labels for assignment {:?}", labels.len(), m.shape()),
        ));
    }
    Ok(purity(&argmax_rows(m), labels))
}

/// Purity of a hard assignment against reference labels.
pub fn purity(assigned: &[usize], labels: &[usize]) -> f64 {
    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&a, &l) in assigned.iter().zip(labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|c| c.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / labels.len() as f64
}

/// Writes the N-row assignment export: node, argmax cluster, max
/// probability, then the full row.
pub fn write_assignment_csv<S: Scalar>(path: &Path, m: &Tensor<S>) -> Result<()> {
    let mut out = String::from("node,cluster,max_prob");
    for k in 0..m.cols() {
        out.push_str(&format!(",p_{k}"));
    }
    out.push('\n');
    for (i, &best) in argmax_rows(m).iter().enumerate() {
        let row = m.row(i);
        out.push_str(&format!("{i},{best},{}", row[best].as_f64()));
        for v in row {
            out.push_str(&format!(",{}", v.as_f64()));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
