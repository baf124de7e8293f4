//! Full forecasting network and its ablation variants.
//!
//! Node path: block1 → block2 → (+ upsampled cluster features) → block3.
//! Cluster path: pool block1's output onto the learned clusters, run block4
//! on the cluster graph, and project back to the nodes. The head sees the
//! last `T₃` steps of block1, block2 and block3 concatenated on channels.

use std::fmt;
use std::str::FromStr;

use crate::config::{parse_value, unknown_key};
use crate::diffcore::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::hierarchy::{cluster_count, downsample, propose_assignment, upsample, AssignmentState};
use crate::params::{Binding, CensusRow, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::stblock::{GtcnLayer, RunningStats, StBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoSkip,
    NoHierarchy,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoSkip, Variant::NoHierarchy];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSkip => "no-skip",
            Variant::NoHierarchy => "no-hierarchy",
        }
    }

    pub fn has_hierarchy(self) -> bool {
        self != Variant::NoHierarchy
    }

    pub fn has_skip(self) -> bool {
        self != Variant::NoSkip
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "full" => Ok(Variant::Full),
            "no-skip" => Ok(Variant::NoSkip),
            "no-hierarchy" => Ok(Variant::NoHierarchy),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected full, no-skip or no-hierarchy)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_steps: usize,
    pub horizon: usize,
    pub kernel: usize,
    pub c_t: usize,
    pub c_g: usize,
    pub p_cluster: f64,
    pub tau: f64,
    pub alpha: f64,
    pub eps_pinv: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_steps: 12,
            horizon: 12,
            kernel: 2,
            c_t: 64,
            c_g: 32,
            p_cluster: 0.1,
            tau: 1.0,
            alpha: 0.9,
            eps_pinv: 1e-6,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Time steps left after the three node-level blocks.
    pub fn head_steps(&self) -> usize {
        let shrink = 2 * self.kernel.saturating_sub(1);
        self.input_steps.saturating_sub(3 * shrink)
    }

    pub fn head_channels(&self) -> usize {
        if self.variant.has_skip() {
            3 * self.c_t
        } else {
            self.c_t
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_steps" => self.input_steps = parse_value(key, value)?,
            "horizon" => self.horizon = parse_value(key, value)?,
            "kernel" => self.kernel = parse_value(key, value)?,
            "c_t" => self.c_t = parse_value(key, value)?,
            "c_g" => self.c_g = parse_value(key, value)?,
            "p_cluster" => self.p_cluster = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "eps_pinv" => self.eps_pinv = parse_value(key, value)?,
            "variant" => self.variant = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key("model", key)),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in a form [`ModelConfig::set`] reads back exactly.
    pub fn pairs(&self) -> Vec<(String, String)> {
        [
            ("input_steps", self.input_steps.to_string()),
            ("horizon", self.horizon.to_string()),
            ("kernel", self.kernel.to_string()),
            ("c_t", self.c_t.to_string()),
            ("c_g", self.c_g.to_string()),
            ("p_cluster", self.p_cluster.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha", self.alpha.to_string()),
            ("eps_pinv", self.eps_pinv.to_string()),
            ("variant", self.variant.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_steps", self.input_steps),
            ("horizon", self.horizon),
            ("kernel", self.kernel),
            ("c_t", self.c_t),
            ("c_g", self.c_g),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let shrink = 2 * (self.kernel - 1);
        if self.input_steps < 3 * shrink + 1 {
            return Err(Error::TemporalUnderflow {
                context: format!("model with {} input steps (three blocks need {})", self.input_steps, 3 * shrink + 1),
                t: self.input_steps,
                k: self.kernel,
            });
        }
        if !(self.p_cluster > 0.0 && self.p_cluster <= 1.0) {
            return Err(Error::Config(format!("p_cluster must lie in (0, 1], got {}", self.p_cluster)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.eps_pinv > 0.0 && self.eps_pinv.is_finite()) {
            return Err(Error::Config(format!("eps_pinv must be positive, got {}", self.eps_pinv)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Hierarchy<S> {
    cluster_weight: ParamId,
    block: StBlock,
    assignment: AssignmentState<S>,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    collapse: GtcnLayer,
    hidden_weight: ParamId,
    hidden_bias: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
}

/// Index of each block's running statistics.
const BLOCK1: usize = 0;
const BLOCK2: usize = 1;
const BLOCK3: usize = 2;
const BLOCK4: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub training: bool,
    /// Drop the upsampled cluster features from the merge.
    pub zero_hierarchy: bool,
}

impl ForwardOptions {
    pub fn training() -> Self {
        Self {
            training: true,
            zero_hierarchy: false,
        }
    }

    pub fn inference() -> Self {
        Self::default()
    }
}

/// State changes produced by a training forward pass, applied by
/// [`Model::commit`] after the optimizer step.
#[derive(Clone, Debug, Default)]
pub struct PendingUpdates<S> {
    batch_stats: Vec<(usize, BatchStats<S>)>,
    proposal: Option<Tensor<S>>,
}

impl<S> PendingUpdates<S> {
    /// Detached clustering proposal `M′` of this pass, if any.
    pub fn proposal(&self) -> Option<&Tensor<S>> {
        self.proposal.as_ref()
    }
}

pub struct Forward<S> {
    /// `[B, N, H]`.
    pub output: Var,
    pub updates: PendingUpdates<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    graph: GraphSpec<S>,
    store: ParamStore<S>,
    block1: StBlock,
    block2: StBlock,
    block3: StBlock,
    hierarchy: Option<Hierarchy<S>>,
    head: Head,
    stats: Vec<RunningStats<S>>,
}

impl<S: Scalar> Model<S> {
    /// Builds the variant named in `config`.
    pub fn new(config: ModelConfig, graph: GraphSpec<S>) -> Result<Self> {
        config.validate()?;
        let n = graph.n_nodes();
        let (k, ct, cg) = (config.kernel, config.c_t, config.c_g);
        let mut store = ParamStore::new(config.seed);

        let block1 = StBlock::new(&mut store, "block1", 1, ct, cg, k);
        let hierarchy = if config.variant.has_hierarchy() {
            let n_clusters = cluster_count(n, config.p_cluster)?;
            let t = config.input_steps;
            let cluster_weight = store.glorot("cluster_gcn.weight", &[t, n_clusters], t, n_clusters);
            let block = StBlock::new(&mut store, "block4", ct, ct, cg, k);
            let assignment = AssignmentState::random(
                n,
                n_clusters,
                S::of(config.alpha),
                S::of(config.tau),
                config.seed ^ 0x5eed_a551_9e00,
            )?;
            Some(Hierarchy {
                cluster_weight,
                block,
                assignment,
            })
        } else {
            None
        };
        let block2 = StBlock::new(&mut store, "block2", ct, ct, cg, k);
        let block3 = StBlock::new(&mut store, "block3", ct, ct, cg, k);

        let hc = config.head_channels();
        let collapse = GtcnLayer::new(&mut store, "head.gtcn", config.head_steps(), hc, ct);
        let hidden_weight = store.glorot("head.hidden.weight", &[ct, ct], ct, ct);
        let hidden_bias = store.filled("head.hidden.bias", &[ct], 0.0);
        let out_weight = store.glorot("head.out.weight", &[ct, config.horizon], ct, config.horizon);
        let out_bias = store.filled("head.out.bias", &[config.horizon], 0.0);

        let n_blocks = if hierarchy.is_some() { 4 } else { 3 };
        Ok(Self {
            config,
            graph,
            store,
            block1,
            block2,
            block3,
            hierarchy,
            head: Head {
                collapse,
                hidden_weight,
                hidden_bias,
                out_weight,
                out_bias,
            },
            stats: (0..n_blocks).map(|_| RunningStats::new(ct)).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &GraphSpec<S> {
        &self.graph
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn parameter_census(&self) -> Vec<CensusRow> {
        self.store.census()
    }

    /// Number of spatio-temporal blocks in the network.
    pub fn block_count(&self) -> usize {
        self.stats.len()
    }

    pub fn running_stats(&self) -> &[RunningStats<S>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<S>] {
        &mut self.stats
    }

    pub fn assignment(&self) -> Option<&AssignmentState<S>> {
        self.hierarchy.as_ref().map(|h| &h.assignment)
    }

    pub fn assignment_mut(&mut self) -> Option<&mut AssignmentState<S>> {
        self.hierarchy.as_mut().map(|h| &mut h.assignment)
    }

    /// Replaces the stored assignment; shape must match.
    pub fn set_assignment(&mut self, state: AssignmentState<S>) -> Result<()> {
        let h = self
            .hierarchy
            .as_mut()
            .ok_or_else(|| Error::Param("variant has no cluster assignment".into()))?;
        if state.matrix().shape() != h.assignment.matrix().shape() {
            return Err(Error::shape(
                "set_assignment",
                format!("{:?} does not match {:?}", state.matrix().shape(), h.assignment.matrix().shape()),
            ));
        }
        h.assignment = state;
        Ok(())
    }

    pub fn n_clusters(&self) -> Option<usize> {
        self.assignment().map(AssignmentState::n_clusters)
    }

    /// `x` is `[B, N, T, 1]`; returns `[B, N, H]`.
    pub fn forward(&self, tape: &mut Tape<S>, params: &Binding, x: Var, opts: ForwardOptions) -> Result<Forward<S>> {
        let sx = tape.shape(x).to_vec();
        let n = self.n_nodes();
        if sx.len() != 4 || sx[0] == 0 || sx[1] != n || sx[2] != self.config.input_steps || sx[3] != 1 {
            return Err(Error::shape(
                "model input",
                format!("expected [B≥1, {n}, {}, 1], got {sx:?}", self.config.input_steps),
            ));
        }
        let batch = sx[0];
        let training = opts.training;
        let mut updates = PendingUpdates {
            batch_stats: Vec::new(),
            proposal: None,
        };
        let mut record = |idx: usize, s: Option<BatchStats<S>>| {
            if let Some(s) = s {
                updates.batch_stats.push((idx, s));
            }
        };

        let adj = tape.constant(self.graph.normalized().clone());
        let (f1, s) = self.block1.forward(tape, params, x, adj, &self.stats[BLOCK1], training)?;
        record(BLOCK1, s);
        let (f2, s) = self.block2.forward(tape, params, f1, adj, &self.stats[BLOCK2], training)?;
        record(BLOCK2, s);

        let merged = match (&self.hierarchy, opts.zero_hierarchy) {
            (Some(h), false) => {
                let m = if training {
                    let tau = h.assignment.tau();
                    let proposal = propose_assignment(tape, x, adj, params[h.cluster_weight], tau)?;
                    updates.proposal = Some(tape.value(proposal).clone());
                    h.assignment.blend(tape, proposal)?
                } else {
                    tape.constant(h.assignment.matrix().clone())
                };
                let raw = tape.constant(self.graph.adjacency().clone());
                let level = downsample(tape, f1, m, raw)?;
                let (zc, s) = h
                    .block
                    .forward(tape, params, level.features, level.normalized, &self.stats[BLOCK4], training)?;
                record(BLOCK4, s);
                let up = upsample(tape, zc, m, S::of(self.config.eps_pinv))?;
                tape.add(f2, up)?
            }
            _ => f2,
        };

        let (f3, s) = self.block3.forward(tape, params, merged, adj, &self.stats[BLOCK3], training)?;
        record(BLOCK3, s);

        let t3 = self.config.head_steps();
        let features = if self.config.variant.has_skip() {
            let a = tape.slice_time(f1, t3)?;
            let b = tape.slice_time(f2, t3)?;
            tape.concat_channels(&[a, b, f3])?
        } else {
            f3
        };

        let head = &self.head;
        let h = head.collapse.forward(tape, params, features)?;
        let h = tape.linear(h, params[head.hidden_weight])?;
        let h = tape.add_bias(h, params[head.hidden_bias])?;
        let h = tape.relu(h);
        let h = tape.linear(h, params[head.out_weight])?;
        let h = tape.add_bias(h, params[head.out_bias])?;
        let output = tape.reshape(h, [batch, n, self.config.horizon])?;
        Ok(Forward { output, updates })
    }

    /// Applies batch-norm running statistics and the momentum update of the
    /// stored assignment. A frozen assignment is left untouched.
    pub fn commit(&mut self, updates: PendingUpdates<S>) -> Result<()> {
        for (idx, s) in &updates.batch_stats {
            self.stats[*idx].update(s);
        }
        if let (Some(h), Some(p)) = (self.hierarchy.as_mut(), updates.proposal.as_ref()) {
            if !h.assignment.is_frozen() {
                h.assignment.momentum_update(p)?;
            }
        }
        Ok(())
    }

    /// Inference on `[B, N, T, 1]` without gradient tracking.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv, ForwardOptions::inference())?;
        Ok(tape.value(out.output).clone())
    }
}
