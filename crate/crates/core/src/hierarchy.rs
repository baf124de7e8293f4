//! Learned node-to-cluster hierarchy.
//!
//! A clustering GCN proposes a soft assignment `M′` (`N×N′`, row-stochastic)
//! from each mini-batch. The stored assignment is blended towards it with
//! momentum, node embeddings are pooled to the cluster level with `Mᵀ`, the
//! cluster graph is `MᵀAM`, and cluster features return to the nodes through
//! the transposed ridge pseudoinverse of `M`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{gcn_forward, normalize, Activation};
use crate::scalar::Scalar;

/// Tolerance on row sums of a stored assignment.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// `round_half_up(n_nodes · p_cluster)`, at least 1.
pub fn cluster_count(n_nodes: usize, p_cluster: f64) -> Result<usize> {
    if n_nodes == 0 {
        return Err(Error::Param("cluster_count needs at least one node".into()));
    }
    if !(p_cluster > 0.0 && p_cluster <= 1.0) {
        return Err(Error::Param(format!("clustering ratio must lie in (0, 1], got {p_cluster}")));
    }
    let raw = (n_nodes as f64 * p_cluster + 0.5).floor() as usize;
    Ok(raw.clamp(1, n_nodes))
}

/// Stored soft assignment with its momentum and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentState<S> {
    m: Tensor<S>,
    alpha: S,
    tau: S,
    frozen: bool,
}

fn check_hyper<S: Scalar>(alpha: S, tau: S) -> Result<()> {
    if !(alpha >= S::zero() && alpha < S::one()) {
        return Err(Error::Param(format!("momentum alpha must lie in [0, 1), got {alpha}")));
    }
    if !(tau > S::zero()) {
        return Err(Error::Param(format!("temperature tau must be > 0, got {tau}")));
    }
    Ok(())
}

impl<S: Scalar> AssignmentState<S> {
    /// Uniform positive noise, row-normalized.
    pub fn random(n_nodes: usize, n_clusters: usize, alpha: S, tau: S, seed: u64) -> Result<Self> {
        check_hyper(alpha, tau)?;
        if n_clusters == 0 || n_clusters > n_nodes {
            return Err(Error::Param(format!("cannot assign {n_nodes} nodes to {n_clusters} clusters")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Tensor::zeros([n_nodes, n_clusters]);
        for row in m.data_mut().chunks_mut(n_clusters) {
            for v in row.iter_mut() {
                *v = S::of(rng.random_range(0.01..1.0));
            }
            let total: S = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self {
            m,
            alpha,
            tau,
            frozen: false,
        })
    }

    /// Every node spread evenly over all clusters.
    pub fn uniform(n_nodes: usize, n_clusters: usize, alpha: S, tau: S) -> Result<Self> {
        check_hyper(alpha, tau)?;
        if n_clusters == 0 || n_clusters > n_nodes {
            return Err(Error::Param(format!("cannot assign {n_nodes} nodes to {n_clusters} clusters")));
        }
        let m = Tensor::full([n_nodes, n_clusters], S::one() / S::of_usize(n_clusters));
        Ok(Self {
            m,
            alpha,
            tau,
            frozen: false,
        })
    }

    /// Wraps an existing matrix after checking it is row-stochastic.
    pub fn from_matrix(m: Tensor<S>, alpha: S, tau: S, frozen: bool) -> Result<Self> {
        check_hyper(alpha, tau)?;
        if m.rank() != 2 || m.rows() == 0 || m.cols() == 0 {
            return Err(Error::shape("assignment", format!("expected a non-empty N×N′ matrix, got {:?}", m.shape())));
        }
        let state = Self { m, alpha, tau, frozen };
        let err = state.row_sum_error();
        if err > ROW_SUM_TOL || state.m.data().iter().any(|&v| v < S::zero()) {
            return Err(Error::Param(format!("assignment is not row-stochastic (row-sum error {err})")));
        }
        Ok(state)
    }

    pub fn matrix(&self) -> &Tensor<S> {
        &self.m
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn tau(&self) -> S {
        self.tau
    }

    pub fn n_nodes(&self) -> usize {
        self.m.rows()
    }

    pub fn n_clusters(&self) -> usize {
        self.m.cols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Largest `|row sum − 1|`.
    pub fn row_sum_error(&self) -> f64 {
        self.m
            .data()
            .chunks(self.m.cols())
            .map(|row| (row.iter().copied().sum::<S>().as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `M ← αM + (1−α)M′` on detached values.
    pub fn momentum_update(&mut self, m_prime: &Tensor<S>) -> Result<()> {
        if self.frozen {
            return Err(Error::Param("assignment matrix is frozen".into()));
        }
        if m_prime.shape() != self.m.shape() {
            return Err(Error::shape(
                "momentum_update",
                format!("proposal {:?} does not match stored {:?}", m_prime.shape(), self.m.shape()),
            ));
        }
        let keep = self.alpha;
        let take = S::one() - keep;
        for (m, &p) in self.m.data_mut().iter_mut().zip(m_prime.data()) {
            *m = keep * *m + take * p;
        }
        Ok(())
    }

    /// Blended assignment for the current forward pass: the stored matrix is
    /// a constant, so gradient reaches only `m_prime`.
    pub fn blend(&self, tape: &mut Tape<S>, m_prime: Var) -> Result<Var> {
        let stored = tape.constant(self.m.clone());
        let kept = tape.scale(stored, self.alpha);
        let fresh = tape.scale(m_prime, S::one() - self.alpha);
        tape.add(kept, fresh)
    }

    /// Hard assignment by row argmax; ties go to the lowest cluster index.
    pub fn hard_labels(&self) -> Vec<usize> {
        argmax_rows(&self.m)
    }
}

pub fn argmax_rows<S: Scalar>(m: &Tensor<S>) -> Vec<usize> {
    m.data()
        .chunks(m.cols())
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Clustering GCN: per-sample logits `Â X_b W` with time and channels
/// flattened into features, averaged over the batch, then `softmax(·/τ)`.
///
/// `x` is `[B, N, T, C]`, `w_cluster` is `(T·C)×N′`.
pub fn propose_assignment<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    adj_norm: Var,
    w_cluster: Var,
    tau: S,
) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 4 || sx[0] == 0 {
        return Err(Error::shape("propose_assignment", format!("expected non-empty [B, N, T, C], got {sx:?}")));
    }
    let (b, n, feat) = (sx[0], sx[1], sx[2] * sx[3]);
    let n_clusters = tape.shape(w_cluster).get(1).copied().unwrap_or(0);
    if n_clusters > n {
        return Err(Error::Param(format!("{n_clusters} clusters exceed {n} nodes")));
    }
    let flat = tape.reshape(x, [b, n, 1, feat])?;
    let logits = gcn_forward(tape, flat, adj_norm, w_cluster, Activation::None)?;
    let mean = tape.mean_axis0(logits)?;
    let mean = tape.reshape(mean, [n, n_clusters])?;
    tape.softmax_rows(mean, tau)
}

/// Cluster-level features and graph on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ClusterLevel {
    /// `[B, N′, T, C]`.
    pub features: Var,
    /// `MᵀAM`.
    pub adjacency: Var,
    /// Normalized `MᵀAM`, the operator used by the cluster ST-block.
    pub normalized: Var,
}

/// `Z_cluster = MᵀZ_node` per (sample, time, channel) and `A_cluster = MᵀAM`.
///
/// `m` is expected to be row-stochastic; this is not re-checked so that
/// finite-difference probes can perturb it.
pub fn downsample<S: Scalar>(tape: &mut Tape<S>, z_node: Var, m: Var, adjacency: Var) -> Result<ClusterLevel> {
    let mt = tape.transpose(m)?;
    let features = tape.graph_mix(mt, z_node)?;
    let am = tape.matmul(adjacency, m)?;
    let adjacency = tape.matmul(mt, am)?;
    let normalized = tape.sym_normalize(adjacency)?;
    Ok(ClusterLevel {
        features,
        adjacency,
        normalized,
    })
}

/// `Z_node = (M⁺)ᵀ Z_cluster` with `M⁺ = (MᵀM + εI)⁻¹Mᵀ`.
pub fn upsample<S: Scalar>(tape: &mut Tape<S>, z_cluster: Var, m: Var, eps: S) -> Result<Var> {
    let pinv = tape.regularized_pinv(m, eps)?;
    let back = tape.transpose(pinv)?;
    tape.graph_mix(back, z_cluster)
}

/// Cluster graph computed outside any tape, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterGraph<S> {
    pub adjacency: Tensor<S>,
    pub normalized: Tensor<S>,
}

impl<S: Scalar> ClusterGraph<S> {
    pub fn from_assignment(m: &Tensor<S>, adjacency: &Tensor<S>) -> Result<Self> {
        let mut tape = Tape::new();
        let mv = tape.constant(m.clone());
        let av = tape.constant(adjacency.clone());
        let mt = tape.transpose(mv)?;
        let am = tape.matmul(av, mv)?;
        let ac = tape.matmul(mt, am)?;
        let adjacency = tape.value(ac).clone();
        let normalized = normalize(&adjacency)?;
        Ok(Self { adjacency, normalized })
    }
}
