//! The explainer (stem, stacked cells, classifier head) and the fixed
//! audience CNN.
//!
//! Explainer layout, with `C = cell.channels`:
//!
//! ```text
//! stem.conv          C × in × 3 × 3      (no activation)
//! cell{c}.pre0       C × c_in0 × 1 × 1   relu then 1×1 conv on the older input
//! cell{c}.pre1       C × c_in1 × 1 × 1   relu then 1×1 conv on the newer input
//! cell{c}.edge{e}.conv  C × C × 3 × 3    one per edge that can hold conv3x3_relu
//! head.weight        (n_nodes·C) × K     after global average pooling
//! head.bias          K
//! ```
//!
//! Cell 0 sees the stem output twice; cell 1 sees the stem and cell 0; every
//! later cell sees the previous two cells.
//!
//! Audience layout: `conv1` (3×3, pad 1) → relu → max pool (3, stride 2,
//! pad 1) → `conv2` (3×3, pad 1) → relu → global average pool →
//! `dense.weight`, `dense.bias`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{params_newtype, BoundParams, Params};
use crate::random::{normal_tensor, seeded, stream};
use crate::searchspace::{cell_forward, edge_kernel_name, ArchParams, CandidateOp, CellArch, CellSpec, Genotype};
use crate::tensor::Tensor;

params_newtype!(
    /// Explainer weights `E`.
    ExplainerWeights
);
params_newtype!(
    /// Audience weights `W`.
    AudienceWeights
);

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainerSpec {
    pub in_channels: usize,
    pub classes: usize,
    pub cells: usize,
    pub cell: CellSpec,
}

impl ExplainerSpec {
    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        if self.in_channels == 0 || self.classes < 2 || self.cells == 0 {
            return Err(Error::InvalidArgument(format!(
                "explainer needs in_channels ≥ 1, classes ≥ 2 and cells ≥ 1 (got {}, {}, {})",
                self.in_channels, self.classes, self.cells
            )));
        }
        Ok(())
    }

    /// Channel counts of the two inputs of `cell`.
    fn cell_inputs(&self, cell: usize) -> (usize, usize) {
        let c = self.cell.channels;
        let out = self.cell.out_channels();
        match cell {
            0 => (c, c),
            1 => (c, out),
            _ => (out, out),
        }
    }

    /// Fresh Kaiming-initialized weights. With `genotype`, only the conv
    /// edges the genotype retains get kernels; otherwise every edge does.
    pub fn init_weights(&self, genotype: Option<&Genotype>, seed: u64) -> Result<ExplainerWeights> {
        self.validate()?;
        if let Some(g) = genotype {
            g.validate()?;
            if g.n_nodes() != self.cell.n_nodes {
                return Err(Error::InvalidArgument(format!(
                    "genotype has {} nodes, explainer cell has {}",
                    g.n_nodes(),
                    self.cell.n_nodes
                )));
            }
        }
        let mut rng = seeded(seed, stream::EXPLAINER_INIT);
        let c = self.cell.channels;
        let mut p = Params::new();
        p.insert("stem.conv", kaiming(&mut rng, &[c, self.in_channels, 3, 3]));
        let conv_edges: Vec<usize> = match genotype {
            Some(g) => g
                .nodes
                .iter()
                .enumerate()
                .flat_map(|(k, pair)| {
                    pair.iter()
                        .filter(|(_, op)| op.has_weights())
                        .map(move |&(from, _)| self.cell.edge_index(from, k + 2))
                })
                .collect(),
            None if self.cell.ops.contains(&CandidateOp::Conv3x3Relu) => (0..self.cell.num_edges()).collect(),
            None => Vec::new(),
        };
        for cell in 0..self.cells {
            let (c0, c1) = self.cell_inputs(cell);
            p.insert(format!("cell{cell}.pre0"), kaiming(&mut rng, &[c, c0, 1, 1]));
            p.insert(format!("cell{cell}.pre1"), kaiming(&mut rng, &[c, c1, 1, 1]));
            for &e in &conv_edges {
                p.insert(edge_kernel_name(cell, e), kaiming(&mut rng, &[c, c, 3, 3]));
            }
        }
        let feat = self.cell.out_channels();
        p.insert("head.weight", kaiming(&mut rng, &[feat, self.classes]));
        p.insert("head.bias", Tensor::zeros(&[self.classes]));
        Ok(ExplainerWeights(p))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudienceSpec {
    pub in_channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub classes: usize,
}

impl AudienceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 || self.classes < 2 {
            return Err(Error::InvalidArgument("audience channel counts must be ≥ 1 and classes ≥ 2".into()));
        }
        Ok(())
    }

    pub fn init_weights(&self, seed: u64) -> Result<AudienceWeights> {
        self.validate()?;
        let mut rng = seeded(seed, stream::AUDIENCE_INIT);
        let mut p = Params::new();
        p.insert("conv1", kaiming(&mut rng, &[self.conv1_channels, self.in_channels, 3, 3]));
        p.insert("conv2", kaiming(&mut rng, &[self.conv2_channels, self.conv1_channels, 3, 3]));
        p.insert("dense.weight", kaiming(&mut rng, &[self.conv2_channels, self.classes]));
        p.insert("dense.bias", Tensor::zeros(&[self.classes]));
        Ok(AudienceWeights(p))
    }
}

/// Normal(0, sqrt(2 / fan_in)); fan-in is every extent but the first.
fn kaiming(rng: &mut crate::random::StreamRng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    normal_tensor(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Records the explainer on `x` (N×in×H×W) and returns N×K logits.
pub fn explainer_forward(
    g: &mut Graph,
    x: Var,
    weights: &BoundParams,
    spec: &ExplainerSpec,
    arch: CellArch<'_>,
) -> Result<Var> {
    let sx = g.shape(x);
    if sx.len() != 4 || sx[1] != spec.in_channels {
        return Err(Error::shape("explainer_forward", sx, &[0, spec.in_channels, 0, 0]));
    }
    let stem = g.conv2d(x, weights.var("stem.conv")?, 1, 1)?;
    let (mut prev_prev, mut prev) = (stem, stem);
    for cell in 0..spec.cells {
        let a0 = g.relu(prev_prev)?;
        let s0 = g.conv2d(a0, weights.var(&format!("cell{cell}.pre0"))?, 1, 0)?;
        let a1 = g.relu(prev)?;
        let s1 = g.conv2d(a1, weights.var(&format!("cell{cell}.pre1"))?, 1, 0)?;
        let out = cell_forward(g, s0, s1, &spec.cell, arch, weights, cell)?;
        prev_prev = if cell == 0 { stem } else { prev };
        prev = out;
    }
    let pooled = g.global_avg_pool(prev)?;
    let z = g.matmul(pooled, weights.var("head.weight")?)?;
    g.add_bias(z, weights.var("head.bias")?)
}

/// Records the audience on `x` and returns N×K logits.
pub fn audience_forward(g: &mut Graph, x: Var, weights: &BoundParams, spec: &AudienceSpec) -> Result<Var> {
    let sx = g.shape(x);
    if sx.len() != 4 || sx[1] != spec.in_channels {
        return Err(Error::shape("audience_forward", sx, &[0, spec.in_channels, 0, 0]));
    }
    let h = g.conv2d(x, weights.var("conv1")?, 1, 1)?;
    let h = g.relu(h)?;
    let h = g.max_pool(h, 3, 2, 1)?;
    let h = g.conv2d(h, weights.var("conv2")?, 1, 1)?;
    let h = g.relu(h)?;
    let h = g.global_avg_pool(h)?;
    let z = g.matmul(h, weights.var("dense.weight")?)?;
    g.add_bias(z, weights.var("dense.bias")?)
}

/// Explainer logits without gradient tracking.
pub fn explainer_logits(x: &Tensor, e: &ExplainerWeights, spec: &ExplainerSpec, arch: Arch<'_>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let bound = e.bind(&mut g, false)?;
    let cell_arch = arch.bind(&mut g, false)?;
    let y = explainer_forward(&mut g, xv, &bound, spec, cell_arch)?;
    Ok(g.value(y).clone())
}

/// Audience logits without gradient tracking.
pub fn audience_logits(x: &Tensor, w: &AudienceWeights, spec: &AudienceSpec) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let bound = w.bind(&mut g, false)?;
    let y = audience_forward(&mut g, xv, &bound, spec)?;
    Ok(g.value(y).clone())
}

/// Architecture source before it is bound into a graph.
#[derive(Clone, Copy, Debug)]
pub enum Arch<'a> {
    Mixed(&'a ArchParams),
    Discrete(&'a Genotype),
}

impl<'a> Arch<'a> {
    /// Binds mixed logits as a leaf (when `trainable`) or constant.
    pub fn bind(self, g: &mut Graph, trainable: bool) -> Result<CellArch<'a>> {
        Ok(match self {
            Arch::Mixed(a) => {
                let t = a.tensor().clone();
                CellArch::Mixed(if trainable { g.leaf(t)? } else { g.constant(t)? })
            }
            Arch::Discrete(geno) => CellArch::Discrete(geno),
        })
    }
}

/// `labels` as one-hot rows of width `classes`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        t[i * classes + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], t)
}

/// Batch-mean cross-entropy of `softmax(logits)` against target probabilities.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, target: Var) -> Result<Var> {
    let p = g.softmax_rows(logits)?;
    g.cross_entropy(p, target)
}

/// Fraction of rows whose arg-max logit (first on ties) matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}
