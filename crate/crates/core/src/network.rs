//! Flow-network view of a weight slice.
//!
//! A weight slice without intercepts reads as a directed network: unit `i`
//! sends flow `w_ij = −M_ji` to unit `j` when `i` serves as a control for
//! `j`. Every vertex receives total inflow one. Unbiasedness under uniform
//! assignment is flow balance (inflow equals outflow at every vertex); under
//! assignment probabilities `p` it is `W p = p`, so the propensities that
//! make a slice unbiased are the eigenvector centrality of the network.
//!
//! ```
//! use gsc::network::{eigenvector_centrality, FlowNetwork};
//! use nalgebra::dmatrix;
//!
//! // The middle unit feeds both outer units; each outer unit feeds it half.
//! let net = FlowNetwork::new(dmatrix![0.0, 0.5, 0.0; 1.0, 0.0, 1.0; 0.0, 0.5, 0.0]).unwrap();
//! assert_eq!(net.flow_balance(), vec![-0.5, 1.0, -0.5]);
//! let c = eigenvector_centrality(&net).unwrap();
//! assert!((c.vector[1] - 0.5).abs() < 1e-9);
//! ```

use crate::error::{Error, Result};
use crate::numfmt::{json_f64, json_vec};
use crate::weights::{WeightSlice, WeightTensor};
use crate::TOL_FEAS;
use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde_json::{json, Value};
use std::fmt::Write as _;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    pub n: usize,
    /// `w[(i, j)]`: flow on the edge `i → j`.
    pub w: DMatrix<f64>,
}

impl FlowNetwork {
    /// Nonnegative square matrix with zero diagonal.
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::Dimension(format!("flow matrix is {}x{}", w.nrows(), w.ncols())));
        }
        let n = w.nrows();
        for i in 0..n {
            if w[(i, i)] != 0.0 {
                return Err(Error::Invalid(format!("self-loop at vertex {i}")));
            }
            for j in 0..n {
                if !(w[(i, j)] >= -TOL_FEAS) {
                    return Err(Error::Invalid(format!("negative flow {} on edge {i} -> {j}", w[(i, j)])));
                }
            }
        }
        Ok(FlowNetwork { n, w })
    }

    pub fn inflow(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.w.column(j).sum()).collect()
    }

    pub fn outflow(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.w.row(i).sum()).collect()
    }

    /// Outflow minus inflow per vertex.
    pub fn flow_balance(&self) -> Vec<f64> {
        self.outflow().iter().zip(self.inflow()).map(|(o, i)| o - i).collect()
    }

    /// The weight slice this network came from (unit diagonal, zero intercepts).
    pub fn to_slice(&self) -> WeightSlice {
        let n = self.n;
        WeightSlice {
            intercept: DVector::zeros(n),
            w: DMatrix::from_fn(n, n, |j, i| if i == j { 1.0 } else { -self.w[(i, j)] }),
        }
    }

    fn has_edge(&self, i: usize, j: usize) -> bool {
        self.w[(i, j)] > TOL_FEAS
    }

    /// Graphviz rendering with flows to three decimals.
    pub fn to_dot(&self, labels: &[String]) -> String {
        let mut s = String::from("digraph flows {\n");
        for l in labels {
            let _ = writeln!(s, "  {l:?};");
        }
        for i in 0..self.n {
            for j in 0..self.n {
                if self.has_edge(i, j) {
                    let _ = writeln!(s, "  {:?} -> {:?} [label=\"{:.3}\"];", labels[i], labels[j], self.w[(i, j)]);
                }
            }
        }
        s.push_str("}\n");
        s
    }

    /// `{units, edges: [{from, to, flow}], inflow, outflow, balance}`.
    pub fn to_json(&self, labels: &[String]) -> Value {
        let mut edges = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.has_edge(i, j) {
                    edges.push(json!({"from": labels[i], "to": labels[j], "flow": json_f64(self.w[(i, j)])}));
                }
            }
        }
        json!({
            "units": labels,
            "edges": edges,
            "inflow": json_vec(self.inflow()),
            "outflow": json_vec(self.outflow()),
            "balance": json_vec(self.flow_balance()),
        })
    }
}

/// Network of the weights of one slice, `w_ij = −M_ji`; intercepts are ignored.
pub fn slice_network(sl: &WeightSlice) -> Result<FlowNetwork> {
    Ok(FlowNetwork { n: sl.w.nrows(), w: slice_flows(sl)? })
}

fn slice_flows(sl: &WeightSlice) -> Result<DMatrix<f64>> {
    let n = sl.w.nrows();
    for j in 0..n {
        for i in 0..n {
            if i != j && sl.w[(j, i)] > TOL_FEAS {
                return Err(Error::Invalid(format!("weight M[{j},{i}] = {} is positive", sl.w[(j, i)])));
            }
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { -sl.w[(j, i)] }))
}

/// `w_ij = −M_jit`. Intercepts must be zero.
pub fn weights_to_network(tensor: &WeightTensor, t: usize) -> Result<FlowNetwork> {
    let sl = tensor.slice_checked(t)?;
    if let Some(i) = (0..tensor.n_units).find(|&i| sl.intercept[i].abs() > TOL_FEAS) {
        return Err(Error::Invalid(format!(
            "the network view needs zero intercepts (unit {i} has {}); fit the sc or usc family",
            sl.intercept[i]
        )));
    }
    slice_network(sl)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Connectivity {
    pub strongly_connected: bool,
    /// Component label per vertex; labels are numbered in order of first appearance.
    pub components: Vec<usize>,
    pub n_components: usize,
}

/// Strongly connected components over edges with flow above `TOL_FEAS`.
pub fn is_strongly_connected(net: &FlowNetwork) -> Connectivity {
    let raw = tarjan(net.n, |i, j| net.has_edge(i, j));
    let mut relabel = vec![usize::MAX; net.n];
    let mut next = 0;
    let mut components = vec![0; net.n];
    for v in 0..net.n {
        let c = raw[v];
        if relabel[c] == usize::MAX {
            relabel[c] = next;
            next += 1;
        }
        components[v] = relabel[c];
    }
    Connectivity { strongly_connected: next <= 1, components, n_components: next }
}

/// Component id per vertex.
fn tarjan(n: usize, edge: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut g = DiGraph::<(), ()>::with_capacity(n, 0);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i && edge(i, j)) {
            g.add_edge(nodes[i], nodes[j], ());
        }
    }
    let mut comp = vec![0; n];
    for (c, members) in tarjan_scc(&g).into_iter().enumerate() {
        for v in members {
            comp[v.index()] = c;
        }
    }
    comp
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centrality {
    /// Nonnegative, sums to one, `W p = p`.
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// True when the plain iteration stalled and `(W + I)/2` was used.
    pub shifted: bool,
    pub residual: f64,
}

/// Eigenvector of `W` for eigenvalue one, normalized to sum one, by power
/// iteration from the uniform vector. Periodic networks make the plain
/// iteration oscillate; it then restarts on `(W + I)/2`, which has the same
/// fixed point.
pub fn eigenvector_centrality(net: &FlowNetwork) -> Result<Centrality> {
    let conn = is_strongly_connected(net);
    if !conn.strongly_connected {
        return Err(Error::NotStronglyConnected { components: conn.n_components });
    }
    let n = net.n;
    let residual = |p: &DVector<f64>| (&net.w * p - p).amax();
    let run = |m: &DMatrix<f64>| -> (DVector<f64>, usize, bool) {
        let mut p = DVector::from_element(n, 1.0 / n as f64);
        for it in 1..=POWER_MAX_ITER {
            let mut q = m * &p;
            let s = q.sum();
            q /= s;
            p = q;
            if residual(&p) <= POWER_TOL {
                return (p, it, true);
            }
        }
        (p, POWER_MAX_ITER, false)
    };
    let (p, it, ok) = run(&net.w);
    if ok {
        return Ok(Centrality {
            residual: residual(&p),
            vector: p.iter().copied().collect(),
            iterations: it,
            shifted: false,
        });
    }
    let shifted = (&net.w + DMatrix::identity(n, n)) * 0.5;
    let (p, it2, ok) = run(&shifted);
    if !ok {
        return Err(Error::NonConvergence { iterations: it + it2, best_residual: residual(&p) });
    }
    Ok(Centrality { residual: residual(&p), vector: p.iter().copied().collect(), iterations: it + it2, shifted: true })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propensities {
    /// A propensity vector making the slice unbiased.
    pub p: Vec<f64>,
    /// One basis vector per closed class; several means `p` is not unique.
    pub classes: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    /// `‖Mᵀ p‖_∞`.
    pub residual: f64,
    /// `Σ_i p_i M_i0t`; zero for intercepts profiled out of the fit.
    pub intercept_imbalance: f64,
}

impl Propensities {
    pub fn is_unique(&self) -> bool {
        self.classes.len() == 1
    }
}

/// Propensities `p ≥ 0`, `Σ p = 1` with `Σ_i p_i M_ijt = 0` for every `j`.
///
/// The columns of `Mᵀ = I − W` sum to zero, so a null vector always exists.
/// With a one-dimensional null space the answer is the normalized absolute
/// null vector. Otherwise every closed class of the network (a strongly
/// connected component that receives no flow from outside) carries its own
/// solution; those are returned in `classes` and `p` mixes them with equal
/// mass.
pub fn unbiased_propensities(tensor: &WeightTensor, t: usize) -> Result<Propensities> {
    let sl = tensor.slice_checked(t)?;
    let n = tensor.n_units;
    for i in 0..n {
        if (sl.w[(i, i)] - 1.0).abs() > TOL_FEAS || sl.w.row(i).sum().abs() > TOL_FEAS {
            return Err(Error::Invalid(format!("row {i} of the slice is not in the base weight set")));
        }
    }
    let flows = slice_flows(sl)?;
    let net = FlowNetwork { n, w: flows };
    let mt = sl.w.transpose();
    let svd = mt.clone().svd(false, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv[0].max(f64::MIN_POSITIVE);
    let nullity = sv.iter().filter(|&&s| s <= RANK_TOL * smax).count();

    let classes = closed_classes(&net);
    if nullity != classes.len() {
        return Err(Error::RankAmbiguity { singular_values: sv });
    }
    let class_vectors: Vec<DVector<f64>> = classes.iter().map(|c| class_stationary(&net, c)).collect();
    let p = if class_vectors.len() == 1 {
        let vt = svd.v_t.as_ref().unwrap();
        let k = (0..svd.singular_values.len())
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        let q = vt.row(k).transpose();
        let q = q.abs();
        &q / q.sum()
    } else {
        class_vectors.iter().fold(DVector::zeros(n), |acc, v| acc + v) / class_vectors.len() as f64
    };
    let residual = (&mt * &p).amax();
    let intercept_imbalance = p.dot(&sl.intercept);
    Ok(Propensities {
        p: p.iter().copied().collect(),
        classes: class_vectors.iter().map(|v| v.iter().copied().collect()).collect(),
        singular_values: sv,
        residual,
        intercept_imbalance,
    })
}

/// Strongly connected components with no incoming edge from outside, each as a sorted vertex list.
pub fn closed_classes(net: &FlowNetwork) -> Vec<Vec<usize>> {
    let conn = is_strongly_connected(net);
    let mut members = vec![Vec::new(); conn.n_components];
    for v in 0..net.n {
        members[conn.components[v]].push(v);
    }
    members
        .into_iter()
        .filter(|c| {
            c.iter().all(|&j| (0..net.n).all(|i| conn.components[i] == conn.components[j] || !net.has_edge(i, j)))
        })
        .collect()
}

/// Solution of `W_CC p = p`, `Σ p = 1` on a closed class, embedded in `R^n`.
fn class_stationary(net: &FlowNetwork, class: &[usize]) -> DVector<f64> {
    let m = class.len();
    let mut a = DMatrix::from_fn(m, m, |r, c| {
        let delta = if r == c { 1.0 } else { 0.0 };
        delta - net.w[(class[r], class[c])]
    });
    let mut b = DVector::zeros(m);
    for c in 0..m {
        a[(m - 1, c)] = 1.0;
    }
    b[m - 1] = 1.0;
    let sol = a.lu().solve(&b).unwrap_or_else(|| DVector::from_element(m, 1.0 / m as f64));
    let mut p = DVector::zeros(net.n);
    for (r, &v) in class.iter().enumerate() {
        p[v] = sol[r].max(0.0);
    }
    let s = p.sum();
    p / s
}
