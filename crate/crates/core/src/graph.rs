//! Road-network graphs: adjacency construction, symmetric normalization and
//! the graph convolution layer.

use std::path::Path;

use log::warn;

use crate::diffcore::{sym_normalize_values, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const SYMMETRY_TOL: f64 = 1e-12;

/// Node count, raw adjacency and its normalized form `D̃^{-1/2}(A+I)D̃^{-1/2}`.
///
/// Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec<S> {
    n_nodes: usize,
    adjacency: Tensor<S>,
    normalized: Tensor<S>,
}

impl<S: Scalar> GraphSpec<S> {
    /// Validates `adjacency` (square, symmetric, nonnegative, zero diagonal)
    /// and precomputes its normalized form.
    pub fn new(adjacency: Tensor<S>) -> Result<Self> {
        if adjacency.rank() != 2 || adjacency.rows() != adjacency.cols() || adjacency.rows() == 0 {
            return Err(Error::shape(
                "graph",
                format!("adjacency must be a non-empty square matrix, got {:?}", adjacency.shape()),
            ));
        }
        let n = adjacency.rows();
        for i in 0..n {
            if adjacency.at2(i, i) != S::zero() {
                return Err(Error::Param(format!("adjacency diagonal entry {i} is nonzero")));
            }
            for j in 0..n {
                let a = adjacency.at2(i, j);
                if !a.is_finite() || a < S::zero() {
                    return Err(Error::Param(format!("adjacency entry ({i},{j}) = {a} is not a finite nonnegative weight")));
                }
                if (a - adjacency.at2(j, i)).abs().as_f64() > SYMMETRY_TOL {
                    return Err(Error::Param(format!("adjacency is not symmetric at ({i},{j})")));
                }
            }
        }
        let isolated: Vec<usize> = (0..n)
            .filter(|&i| adjacency.row(i).iter().all(|&v| v == S::zero()))
            .collect();
        if !isolated.is_empty() && n > 1 {
            warn!("graph has {} isolated node(s): {:?}", isolated.len(), isolated);
        }
        let normalized = normalize(&adjacency)?;
        Ok(Self {
            n_nodes: n,
            adjacency,
            normalized,
        })
    }

    /// Graph with no edges; its normalized adjacency is the identity.
    pub fn empty(n: usize) -> Result<Self> {
        Self::new(Tensor::zeros([n, n]))
    }

    /// Undirected graph from `(src, dst, weight)` triples, each pair listed once.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut a = Tensor::zeros([n, n]);
        for &(s, d, w) in edges {
            if s >= n || d >= n {
                return Err(Error::Param(format!("edge ({s},{d}) references a node outside 0..{n}")));
            }
            if s == d {
                return Err(Error::Param(format!("self-loop on node {s}")));
            }
            a.set2(s, d, S::of(w));
            a.set2(d, s, S::of(w));
        }
        Self::new(a)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &Tensor<S> {
        &self.adjacency
    }

    pub fn normalized(&self) -> &Tensor<S> {
        &self.normalized
    }

    /// Undirected edge list (`i < j`, nonzero weight).
    pub fn edges(&self) -> Vec<(usize, usize, S)> {
        let n = self.n_nodes;
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.adjacency.at2(i, j);
                if w != S::zero() {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(permute_square(&self.adjacency, perm))
    }
}

pub(crate) fn permute_square<S: Scalar>(m: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let n = perm.len();
    let mut out = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set2(i, j, m.at2(perm[i], perm[j]));
        }
    }
    out
}

/// `Ã = A + I`, `D̃ = diag(row sums of Ã)`, returns `D̃^{-1/2}ÃD̃^{-1/2}`.
pub fn normalize<S: Scalar>(adjacency: &Tensor<S>) -> Result<Tensor<S>> {
    sym_normalize_values(adjacency).map(|(n, _)| n)
}

/// Standard deviation of the off-diagonal distances, the default kernel width.
pub fn default_sigma(dist: &Tensor<f64>) -> f64 {
    let n = dist.rows();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| dist.at2(i, j))
        .collect();
    if vals.is_empty() {
        return 1.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// Thresholded Gaussian kernel: `A_ij = exp(-d_ij²/σ²)` when that weight is at
/// least `threshold` and `i ≠ j`, zero otherwise.
pub fn build_gaussian_adjacency<S: Scalar>(
    dist: &Tensor<f64>,
    sigma: f64,
    threshold: f64,
) -> Result<GraphSpec<S>> {
    if !(sigma > 0.0) {
        return Err(Error::Param(format!("kernel width sigma must be > 0, got {sigma}")));
    }
    if !(threshold >= 0.0) {
        return Err(Error::Param(format!("threshold must be >= 0, got {threshold}")));
    }
    if dist.rank() != 2 || dist.rows() != dist.cols() {
        return Err(Error::shape("build_gaussian_adjacency", format!("distances must be square, got {:?}", dist.shape())));
    }
    let n = dist.rows();
    let mut a = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            let d = dist.at2(i, j);
            if d < 0.0 || (d - dist.at2(j, i)).abs() > SYMMETRY_TOL {
                return Err(Error::Param(format!("distance ({i},{j}) is negative or asymmetric")));
            }
            if i == j {
                continue;
            }
            let w = (-(d * d) / (sigma * sigma)).exp();
            if w >= threshold {
                a.set2(i, j, S::of(w));
            }
        }
    }
    GraphSpec::new(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// `σ(Â X W)` where `x` is `[.., N, T, C_in]`, `adj` the normalized `N×N`
/// operator and `w` is `C_in×C_out`. No bias.
pub fn gcn_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    adj: Var,
    w: Var,
    activation: Activation,
) -> Result<Var> {
    let sx = tape.shape(x);
    let sa = tape.shape(adj);
    if sx.len() < 3 || sa.len() != 2 || sa[0] != sa[1] || sa[1] != sx[sx.len() - 3] {
        return Err(Error::shape(
            "gcn_forward",
            format!("graph {sa:?} does not match node axis of features {sx:?}"),
        ));
    }
    let projected = tape.linear(x, w)?;
    let mixed = tape.graph_mix(adj, projected)?;
    Ok(match activation {
        Activation::Relu => tape.relu(mixed),
        Activation::Sigmoid => tape.sigmoid(mixed),
        Activation::None => mixed,
    })
}

// ---- CSV ingestion ---------------------------------------------------------

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads an undirected `src,dst,weight` edge list for a graph of `n` nodes.
pub fn read_edge_list<S: Scalar>(path: &Path, n: usize) -> Result<GraphSpec<S>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
        return Err(parse_err(path, 1, "expected header `src,dst,weight`"));
    }
    let mut edges = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, got {}", rec.len())));
        }
        let src = rec[0].parse::<usize>().map_err(|_| parse_err(path, line, format!("bad src `{}`", &rec[0])))?;
        let dst = rec[1].parse::<usize>().map_err(|_| parse_err(path, line, format!("bad dst `{}`", &rec[1])))?;
        let w = rec[2].parse::<f64>().map_err(|_| parse_err(path, line, format!("bad weight `{}`", &rec[2])))?;
        edges.push((src, dst, w));
    }
    GraphSpec::from_edges(n, &edges)
}

pub fn write_edge_list<S: Scalar>(path: &Path, graph: &GraphSpec<S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["src", "dst", "weight"]).map_err(|e| csv_error(path, e))?;
    for (i, j, weight) in graph.edges() {
        w.write_record([i.to_string(), j.to_string(), format!("{}", weight.as_f64())])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headerless `N×N` distance matrix.
pub fn read_distance_matrix(path: &Path) -> Result<Tensor<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("non-numeric cell `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(parse_err(path, 1, "no data rows"));
    }
    if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(parse_err(path, i + 1, format!("expected {n} columns")));
    }
    Tensor::new([n, n], rows.into_iter().flatten().collect())
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> GraphSpec<f64> {
        let mut a = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in (i + 1)..n {
                if rand::Rng::random_bool(rng, 0.5) {
                    let w = rand::Rng::random_range(rng, 0.1..1.0);
                    a.set2(i, j, w);
                    a.set2(j, i, w);
                }
            }
        }
        GraphSpec::new(a).unwrap()
    }

    #[test]
    fn gaussian_kernel_examples() {
        let dist = mat(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let g = build_gaussian_adjacency::<f64>(&dist, 2.0, 0.5).unwrap();
        assert_eq!(g.adjacency().at2(0, 1), 1.0);
        assert_eq!(g.adjacency().at2(0, 0), 0.0);

        let dist = mat(&[&[0.0, 3.0], &[3.0, 0.0]]);
        let g = build_gaussian_adjacency::<f64>(&dist, 3.0, 0.0).unwrap();
        assert!((g.adjacency().at2(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((g.adjacency().at2(0, 1) - 0.367879).abs() < 1e-6);

        let dist = mat(&[&[0.0, 100.0], &[100.0, 0.0]]);
        let g = build_gaussian_adjacency::<f64>(&dist, 3.0, 0.1).unwrap();
        assert_eq!(g.adjacency().at2(0, 1), 0.0);

        assert!(matches!(build_gaussian_adjacency::<f64>(&dist, 0.0, 0.1), Err(Error::Param(_))));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&mat(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!(n.data().iter().all(|v| (v - 0.5).abs() < 1e-15));

        let n = normalize(&Tensor::<f64>::zeros([3, 3])).unwrap();
        assert_eq!(n, Tensor::eye(3));

        let n = normalize(&mat(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]])).unwrap();
        assert!((n.at2(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((n.at2(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((n.at2(0, 2) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn graph_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(7, &mut rng);
        let norm = g.normalized();
        for i in 0..7 {
            for j in 0..7 {
                assert!((norm.at2(i, j) - norm.at2(j, i)).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&norm.at2(i, j)));
            }
        }
        // recomputation from the stored adjacency is bit-identical
        assert_eq!(&normalize(g.adjacency()).unwrap(), norm);
    }

    #[test]
    fn invalid_adjacency_is_rejected() {
        assert!(GraphSpec::new(mat(&[&[0.0, 1.0], &[0.5, 0.0]])).is_err());
        assert!(GraphSpec::new(mat(&[&[1.0, 0.0], &[0.0, 0.0]])).is_err());
        assert!(GraphSpec::new(mat(&[&[0.0, -1.0], &[-1.0, 0.0]])).is_err());
        assert!(GraphSpec::<f64>::from_edges(2, &[(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn gcn_identity_graph_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::random_uniform([3, 4, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let a = tape.constant(GraphSpec::<f64>::empty(3).unwrap().normalized().clone());
        let w = tape.constant(Tensor::eye(2));
        let y = gcn_forward(&mut tape, xv, a, w, Activation::None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn gcn_symmetric_pair_gives_identical_nodes() {
        let g = GraphSpec::<f64>::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 3, 2], 0.7));
        let a = tape.constant(g.normalized().clone());
        let w = tape.constant(Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[0.3, 0.1, 0.2]]).unwrap());
        let y = gcn_forward(&mut tape, x, a, w, Activation::Relu).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..9], &d[9..]);
    }

    #[test]
    fn gcn_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(4, &mut rng);
        let (n, tt, cin, cout) = (4, 3, 2, 3);
        let x = Tensor::<f64>::random_uniform([n, tt, cin], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::random_uniform([cin, cout], -1.0, 1.0, &mut rng);
        let a = g.normalized();
        let mut want = vec![0.0; n * tt * cout];
        for t in 0..tt {
            for i in 0..n {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for j in 0..n {
                        for c in 0..cin {
                            acc += a.at2(i, j) * x.data()[(j * tt + t) * cin + c] * w.at2(c, o);
                        }
                    }
                    want[(i * tt + t) * cout + o] = 1.0 / (1.0 + (-acc).exp());
                }
            }
        }
        let mut tape = Tape::new();
        let (xv, av, wv) = (tape.constant(x), tape.constant(a.clone()), tape.constant(w));
        let y = gcn_forward(&mut tape, xv, av, wv, Activation::Sigmoid).unwrap();
        let err = tape.value(y).max_abs_diff(&Tensor::new([n, tt, cout], want).unwrap());
        assert!(err < 1e-14, "{err}");
    }

    #[test]
    fn gcn_rejects_node_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([3, 2, 1]));
        let a = tape.constant(Tensor::eye(4));
        let w = tape.constant(Tensor::eye(1));
        assert!(matches!(gcn_forward(&mut tape, x, a, w, Activation::None), Err(Error::Shape { .. })));
    }

    #[test]
    fn gcn_is_node_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(6, &mut rng);
        let x = Tensor::<f64>::random_uniform([6, 2, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::random_uniform([3, 2], -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        let run = |g: &GraphSpec<f64>, x: Tensor<f64>| {
            let mut tape = Tape::new();
            let (xv, av, wv) = (tape.constant(x), tape.constant(g.normalized().clone()), tape.constant(w.clone()));
            let y = gcn_forward(&mut tape, xv, av, wv, Activation::Relu).unwrap();
            tape.value(y).clone()
        };
        let y = run(&g, x.clone());
        let block = 2 * 3;
        let xp: Vec<f64> = perm.iter().flat_map(|&p| x.data()[p * block..(p + 1) * block].to_vec()).collect();
        let yp = run(&g.permuted(&perm).unwrap(), Tensor::new([6, 2, 3], xp).unwrap());
        let out_block = 2 * 2;
        for (k, &p) in perm.iter().enumerate() {
            let a = &yp.data()[k * out_block..(k + 1) * out_block];
            let b = &y.data()[p * out_block..(p + 1) * out_block];
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn edge_list_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        let g = GraphSpec::<f64>::from_edges(4, &[(0, 1, 0.5), (2, 3, 1.0), (1, 3, 0.25)]).unwrap();
        write_edge_list(&path, &g).unwrap();
        let back = read_edge_list::<f64>(&path, 4).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn distance_matrix_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dist.csv");
        std::fs::write(&path, "0,1.5\n1.5,0\n").unwrap();
        let d = read_distance_matrix(&path).unwrap();
        assert_eq!(d.data(), &[0.0, 1.5, 1.5, 0.0]);
        std::fs::write(&path, "0,x\n1.5,0\n").unwrap();
        assert!(matches!(read_distance_matrix(&path), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn gcn_is_linear_without_activation(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(5, &mut rng);
            let x = Tensor::<f64>::random_uniform([5, 3, 2], -1.0, 1.0, &mut rng);
            let y = Tensor::<f64>::random_uniform([5, 3, 2], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::random_uniform([2, 4], -1.0, 1.0, &mut rng);
            let f = |input: Tensor<f64>| {
                let mut tape = Tape::new();
                let (xv, av, wv) = (tape.constant(input), tape.constant(g.normalized().clone()), tape.constant(w.clone()));
                let out = gcn_forward(&mut tape, xv, av, wv, Activation::None).unwrap();
                tape.value(out).clone()
            };
            let combo: Vec<f64> = x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect();
            let lhs = f(Tensor::new([5, 3, 2], combo).unwrap());
            let (fx, fy) = (f(x), f(y));
            for ((l, u), v) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
                prop_assert!((l - (a * u + b * v)).abs() <= 1e-10);
            }
        }
    }
}
