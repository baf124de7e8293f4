//! Gated temporal convolution and the GTCN → GCN → GTCN spatio-temporal block.

use crate::diffcore::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{gcn_forward, Activation};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Running-statistic momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Time convolution to `2·C_out` channels followed by a GLU gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GtcnLayer {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GtcnLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, kernel: usize, c_in: usize, c_out: usize) -> Self {
        let weight = store.glorot(
            format!("{prefix}.weight"),
            &[kernel, c_in, 2 * c_out],
            kernel * c_in,
            kernel * 2 * c_out,
        );
        let bias = store.filled(format!("{prefix}.bias"), &[2 * c_out], 0.0);
        Self {
            kernel,
            c_in,
            c_out,
            weight,
            bias,
        }
    }

    /// `[.., T, C_in] -> [.., T-K+1, C_out]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Binding, x: Var) -> Result<Var> {
        let z = tape.conv1d_time(x, params[self.weight], params[self.bias])?;
        tape.glu(z)
    }
}

/// Per-channel running mean and variance for inference-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats<S>) {
        let m = S::of(BN_MOMENTUM);
        let keep = S::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// GTCN → GCN(+ReLU) → GTCN → batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct StBlock {
    pub name: String,
    pub gtcn_in: GtcnLayer,
    pub gcn_weight: ParamId,
    pub gtcn_out: GtcnLayer,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl StBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_t: usize,
        c_g: usize,
        kernel: usize,
    ) -> Self {
        let gtcn_in = GtcnLayer::new(store, &format!("{name}.gtcn_in"), kernel, c_in, c_t);
        let gcn_weight = store.glorot(format!("{name}.gcn.weight"), &[c_t, c_g], c_t, c_g);
        let gtcn_out = GtcnLayer::new(store, &format!("{name}.gtcn_out"), kernel, c_g, c_t);
        let gamma = store.filled(format!("{name}.bn.gamma"), &[c_t], 1.0);
        let beta = store.filled(format!("{name}.bn.beta"), &[c_t], 0.0);
        Self {
            name: name.to_string(),
            gtcn_in,
            gcn_weight,
            gtcn_out,
            gamma,
            beta,
        }
    }

    pub fn kernel(&self) -> usize {
        self.gtcn_in.kernel
    }

    pub fn out_channels(&self) -> usize {
        self.gtcn_out.c_out
    }

    /// Time steps consumed by one pass through the block.
    pub fn shrinkage(&self) -> usize {
        2 * (self.kernel() - 1)
    }

    /// `[B, N, T, C] -> [B, N, T-2(K-1), C_t]`. `adj` is the normalized
    /// `N×N` operator. Returns the batch statistics in training mode.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Binding,
        x: Var,
        adj: Var,
        stats: &RunningStats<S>,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let shape = tape.shape(x);
        let t = shape.get(shape.len().wrapping_sub(2)).copied().unwrap_or(0);
        if t < 2 * self.kernel() - 1 {
            return Err(Error::TemporalUnderflow {
                context: self.name.clone(),
                t,
                k: self.kernel(),
            });
        }
        let h = self.gtcn_in.forward(tape, params, x)?;
        let h = gcn_forward(tape, h, adj, params[self.gcn_weight], Activation::Relu)?;
        let h = self.gtcn_out.forward(tape, params, h)?;
        tape.batchnorm(
            h,
            params[self.gamma],
            params[self.beta],
            (&stats.mean, &stats.var),
            training,
        )
    }
}
