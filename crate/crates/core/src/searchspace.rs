//! Differentiable cell search space.
//!
//! A cell is a DAG with two input nodes (0 and 1) and `n_nodes` intermediate
//! nodes (2, 3, ...). Every intermediate node `j` receives one edge from each
//! earlier node `i < j`; edges are numbered node by node, inputs in
//! increasing order. During search each edge computes a softmax-weighted
//! mixture of the candidate ops; after search, [`discretize`] keeps the two
//! strongest non-zero edges per node.
//!
//! Genotype file format (`key = value`, `#` comments):
//!
//! ```text
//! # lease genotype v1
//! n_nodes = 3
//! node2 = 0:conv3x3_relu 1:skip
//! node3 = 1:max_pool3 2:conv3x3_relu
//! node4 = 0:avg_pool3 3:skip
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Tensor, VectorSpace};

const GENOTYPE_HEADER: &str = "# lease genotype v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CandidateOp {
    Zero,
    Skip,
    Conv3x3Relu,
    AvgPool3,
    MaxPool3,
}

impl CandidateOp {
    pub const ALL: [CandidateOp; 5] = [
        CandidateOp::Zero,
        CandidateOp::Skip,
        CandidateOp::Conv3x3Relu,
        CandidateOp::AvgPool3,
        CandidateOp::MaxPool3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CandidateOp::Zero => "zero",
            CandidateOp::Skip => "skip",
            CandidateOp::Conv3x3Relu => "conv3x3_relu",
            CandidateOp::AvgPool3 => "avg_pool3",
            CandidateOp::MaxPool3 => "max_pool3",
        }
    }

    pub fn has_weights(self) -> bool {
        self == CandidateOp::Conv3x3Relu
    }

    /// Applies the op to `x`; `None` stands for the all-zero output.
    pub fn apply(self, g: &mut Graph, x: Var, kernel: Option<Var>) -> Result<Option<Var>> {
        Ok(match self {
            CandidateOp::Zero => None,
            CandidateOp::Skip => Some(x),
            CandidateOp::Conv3x3Relu => {
                let k = kernel.ok_or_else(|| Error::InvalidArgument("conv3x3_relu needs a kernel".into()))?;
                let y = g.conv2d(x, k, 1, 1)?;
                Some(g.relu(y)?)
            }
            CandidateOp::AvgPool3 => Some(g.avg_pool(x, 3, 1, 1)?),
            CandidateOp::MaxPool3 => Some(g.max_pool(x, 3, 1, 1)?),
        })
    }
}

impl fmt::Display for CandidateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CandidateOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CandidateOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown candidate op `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    pub n_nodes: usize,
    pub ops: Vec<CandidateOp>,
    pub channels: usize,
}

impl Default for CellSpec {
    fn default() -> Self {
        CellSpec {
            n_nodes: 3,
            ops: CandidateOp::ALL.to_vec(),
            channels: 8,
        }
    }
}

impl CellSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::InvalidArgument("cell needs at least one intermediate node".into()));
        }
        if self.channels == 0 {
            return Err(Error::InvalidArgument("cell channel count must be positive".into()));
        }
        if !self.ops.contains(&CandidateOp::Zero) {
            return Err(Error::InvalidArgument("candidate ops must include `zero`".into()));
        }
        if !self.ops.iter().any(|&o| o != CandidateOp::Zero) {
            return Err(Error::InvalidArgument("candidate ops need a non-zero op".into()));
        }
        Ok(())
    }

    pub fn num_edges(&self) -> usize {
        (2..self.n_nodes + 2).sum()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Index of the edge `from → to` (`to` is an intermediate node, `from < to`).
    pub fn edge_index(&self, from: usize, to: usize) -> usize {
        debug_assert!(from < to && to >= 2 && to < self.n_nodes + 2);
        (2..to).sum::<usize>() + from
    }

    /// `(from, to)` for every edge, in edge-index order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (2..self.n_nodes + 2).flat_map(|to| (0..to).map(move |from| (from, to))).collect()
    }

    /// Output channels of a cell: the concatenated intermediate nodes.
    pub fn out_channels(&self) -> usize {
        self.n_nodes * self.channels
    }
}

/// Architecture logits, one row per edge and one column per candidate op.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams(pub Tensor);

impl ArchParams {
    pub fn zeros(spec: &CellSpec) -> Self {
        ArchParams(Tensor::zeros(&[spec.num_edges(), spec.num_ops()]))
    }

    /// Small Gaussian logits (std 1e-3), so the initial mixture is near uniform.
    pub fn init(spec: &CellSpec, rng: &mut impl Rng) -> Self {
        ArchParams(crate::random::normal_tensor(rng, &[spec.num_edges(), spec.num_ops()], 1e-3))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn check(&self, spec: &CellSpec) -> Result<()> {
        let expect = [spec.num_edges(), spec.num_ops()];
        if self.0.shape() != expect {
            return Err(Error::shape("arch_params", self.0.shape(), &expect));
        }
        Ok(())
    }

    /// Softmax of each edge's logits.
    pub fn mixing_weights(&self) -> Vec<Vec<f64>> {
        let cols = self.0.shape()[1];
        self.0.data().chunks(cols).map(softmax).collect()
    }
}

impl VectorSpace for ArchParams {
    fn axpy(&self, alpha: f64, other: &Self) -> Self {
        ArchParams(self.0.axpy(alpha, &other.0))
    }
    fn scale(&self, s: f64) -> Self {
        ArchParams(self.0.scale(s))
    }
    fn dot(&self, other: &Self) -> f64 {
        self.0.dot(&other.0)
    }
    fn zeros_like(&self) -> Self {
        ArchParams(self.0.zeros_like())
    }
    fn all_finite(&self) -> bool {
        self.0.is_finite()
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Discrete cell: for every intermediate node, two `(input node, op)` pairs
/// in increasing input order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub nodes: Vec<[(usize, CandidateOp); 2]>,
}

impl Genotype {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, pair) in self.nodes.iter().enumerate() {
            let node = k + 2;
            for &(from, op) in pair {
                if from >= node {
                    return Err(Error::InvalidArgument(format!("node{node}: input {from} is not an earlier node")));
                }
                if op == CandidateOp::Zero {
                    return Err(Error::InvalidArgument(format!("node{node}: `zero` cannot be retained")));
                }
            }
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidArgument(format!("node{node}: both inputs come from node {}", pair[0].0)));
            }
        }
        Ok(())
    }

    /// Uniformly random genotype: two distinct inputs per node, each with a
    /// uniformly drawn non-zero op.
    pub fn random(spec: &CellSpec, rng: &mut impl Rng) -> Genotype {
        let choices: Vec<CandidateOp> = spec.ops.iter().copied().filter(|&o| o != CandidateOp::Zero).collect();
        let nodes = (2..spec.n_nodes + 2)
            .map(|to| {
                let a = rng.random_range(0..to);
                let mut b = rng.random_range(0..to - 1);
                if b >= a {
                    b += 1;
                }
                let (lo, hi) = (a.min(b), a.max(b));
                [
                    (lo, choices[rng.random_range(0..choices.len())]),
                    (hi, choices[rng.random_range(0..choices.len())]),
                ]
            })
            .collect();
        Genotype { nodes }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{GENOTYPE_HEADER}\nn_nodes = {}\n", self.nodes.len());
        for (k, pair) in self.nodes.iter().enumerate() {
            out.push_str(&format!(
                "node{} = {}:{} {}:{}\n",
                k + 2,
                pair[0].0,
                pair[0].1,
                pair[1].0,
                pair[1].1
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Genotype> {
        let err = |line: usize, message: String| Error::Format { what: "genotype", line, message };
        let mut n_nodes: Option<usize> = None;
        let mut nodes: Vec<Option<[(usize, CandidateOp); 2]>> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(ln, format!("expected `key = value`, got `{line}`")))?;
            if key == "n_nodes" {
                let n: usize = value.parse().map_err(|_| err(ln, format!("invalid n_nodes `{value}`")))?;
                n_nodes = Some(n);
                nodes.resize(n, None);
                continue;
            }
            let idx: usize = key
                .strip_prefix("node")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(ln, format!("unknown key `{key}`")))?;
            let n = n_nodes.ok_or_else(|| err(ln, "`n_nodes` must come before node entries".into()))?;
            if idx < 2 || idx >= n + 2 {
                return Err(err(ln, format!("node index {idx} out of range 2..{}", n + 2)));
            }
            let pairs: Vec<(usize, CandidateOp)> = value
                .split_whitespace()
                .map(|p| {
                    let (from, op) = p.split_once(':').ok_or_else(|| err(ln, format!("expected `input:op`, got `{p}`")))?;
                    let from: usize = from.parse().map_err(|_| err(ln, format!("invalid input node `{from}`")))?;
                    let op: CandidateOp = op.parse().map_err(|e: Error| err(ln, e.to_string()))?;
                    Ok((from, op))
                })
                .collect::<Result<_>>()?;
            if pairs.len() != 2 {
                return Err(err(ln, format!("node{idx} needs exactly 2 inputs, got {}", pairs.len())));
            }
            let mut pair = [pairs[0], pairs[1]];
            pair.sort_by_key(|p| p.0);
            nodes[idx - 2] = Some(pair);
        }
        let n = n_nodes.ok_or_else(|| err(0, "missing `n_nodes`".into()))?;
        let nodes = nodes
            .into_iter()
            .enumerate()
            .map(|(k, p)| p.ok_or_else(|| err(0, format!("missing entry for node{}", k + 2))))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(nodes.len(), n);
        let g = Genotype { nodes };
        g.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Genotype> {
        Genotype::from_text(&std::fs::read_to_string(path)?)
    }
}

/// How the ops of a cell are chosen.
#[derive(Clone, Copy, Debug)]
pub enum CellArch<'a> {
    /// Softmax mixture over all candidate ops; the var holds the
    /// `num_edges × num_ops` logits.
    Mixed(Var),
    Discrete(&'a Genotype),
}

/// Name of the conv kernel on edge `edge` of cell `cell`.
pub fn edge_kernel_name(cell: usize, edge: usize) -> String {
    format!("cell{cell}.edge{edge}.conv")
}

/// `Σ_o softmax(edge_logits)_o · op_o(x)`.
pub fn mixed_edge_forward(
    g: &mut Graph,
    x: Var,
    edge_logits: Var,
    ops: &[CandidateOp],
    kernel: Option<Var>,
) -> Result<Var> {
    if g.shape(edge_logits) != [ops.len()] {
        return Err(Error::shape("mixed_edge_forward", g.shape(edge_logits), &[ops.len()]));
    }
    let weights = g.softmax_rows(edge_logits)?;
    let mut terms = Vec::with_capacity(ops.len());
    for &op in ops {
        terms.push(op.apply(g, x, kernel)?);
    }
    g.weighted_sum(weights, &terms)
}

/// Runs one cell on the two (already channel-matched) inputs and returns the
/// channel concatenation of its intermediate nodes.
pub fn cell_forward(
    g: &mut Graph,
    s0: Var,
    s1: Var,
    spec: &CellSpec,
    arch: CellArch<'_>,
    weights: &BoundParams,
    cell: usize,
) -> Result<Var> {
    let mut states = vec![s0, s1];
    let kernel = |edge: usize| weights.var(&edge_kernel_name(cell, edge));
    match arch {
        CellArch::Mixed(logits) => {
            let expect = [spec.num_edges(), spec.num_ops()];
            if g.shape(logits) != expect {
                return Err(Error::shape("cell_forward", g.shape(logits), &expect));
            }
            let has_conv = spec.ops.iter().any(|o| o.has_weights());
            for to in 2..spec.n_nodes + 2 {
                let mut node: Option<Var> = None;
                for from in 0..to {
                    let e = spec.edge_index(from, to);
                    let row = g.row(logits, e)?;
                    let k = if has_conv { Some(kernel(e)?) } else { None };
                    let out = mixed_edge_forward(g, states[from], row, &spec.ops, k)?;
                    node = Some(match node {
                        Some(acc) => g.add(acc, out)?,
                        None => out,
                    });
                }
                states.push(node.expect("every intermediate node has an incoming edge"));
            }
        }
        CellArch::Discrete(genotype) => {
            if genotype.n_nodes() != spec.n_nodes {
                return Err(Error::InvalidArgument(format!(
                    "genotype has {} nodes, cell spec has {}",
                    genotype.n_nodes(),
                    spec.n_nodes
                )));
            }
            for (k, pair) in genotype.nodes.iter().enumerate() {
                let to = k + 2;
                let mut outs = Vec::with_capacity(2);
                for &(from, op) in pair {
                    let e = spec.edge_index(from, to);
                    let kv = if op.has_weights() { Some(kernel(e)?) } else { None };
                    let out = op
                        .apply(g, states[from], kv)?
                        .ok_or_else(|| Error::InvalidArgument("genotype retains `zero`".into()))?;
                    outs.push(out);
                }
                states.push(g.add(outs[0], outs[1])?);
            }
        }
    }
    g.concat_channels(&states[2..])
}

/// Keeps, for each intermediate node, the two incoming edges whose strongest
/// non-zero op has the largest softmax weight. Ties go to the lower edge
/// index, then the lower op index.
pub fn discretize(arch: &ArchParams, spec: &CellSpec) -> Result<Genotype> {
    arch.check(spec)?;
    if !arch.0.is_finite() {
        return Err(Error::NonFinite { op: "discretize".into() });
    }
    let weights = arch.mixing_weights();
    let mut nodes = Vec::with_capacity(spec.n_nodes);
    for to in 2..spec.n_nodes + 2 {
        // (strength, from, op) for the best non-zero op of each incoming edge
        let mut best: Vec<(f64, usize, CandidateOp)> = (0..to)
            .map(|from| {
                let w = &weights[spec.edge_index(from, to)];
                let mut pick: Option<(f64, CandidateOp)> = None;
                for (o, &op) in spec.ops.iter().enumerate() {
                    if op == CandidateOp::Zero {
                        continue;
                    }
                    if pick.is_none_or(|(bw, _)| w[o] > bw) {
                        pick = Some((w[o], op));
                    }
                }
                let (s, op) = pick.expect("spec has a non-zero op");
                (s, from, op)
            })
            .collect();
        // stable sort keeps lower edge index first among equal strengths
        best.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite weights"));
        let mut pair = [(best[0].1, best[0].2), (best[1].1, best[1].2)];
        pair.sort_by_key(|p| p.0);
        nodes.push(pair);
    }
    Ok(Genotype { nodes })
}
