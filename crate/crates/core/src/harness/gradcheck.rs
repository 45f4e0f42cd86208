//! Oracle suites behind the `gradcheck` command: every check compares an
//! implementation against an independently computed reference and reports
//! the worst error over its seeds.

use std::fmt;

use crate::autodiff::{finite_diff_gradient, relative_error, Graph, Var};
use crate::data::{generate_synthetic, Batch, BatchIterator, DatasetSplits, SyntheticSpec};
use crate::error::Result;
use crate::explain::ReweighMode;
use crate::lease::{
    explain, fd_hvp, hypergrad_audience_path, hypergrad_explainer_path, lease_iteration, virtual_audience_step,
    virtual_explainer_step, FourLevel, Hyperparams, LeaseState, Mode, NetworkProblem, NetworkState, ScalarChain,
};
use crate::nn::{
    audience_forward, explainer_forward, one_hot, softmax_cross_entropy, AudienceSpec, ExplainerSpec,
    ExplainerWeights,
};
use crate::params::Params;
use crate::random::{normal_tensor, seeded, stream, substream, uniform_tensor};
use crate::searchspace::{ArchParams, CandidateOp, CellArch, CellSpec};
use crate::tensor::{Tensor, VectorSpace};

/// Seeds per randomized check.
pub const SEEDS: u64 = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed error.
    pub value: f64,
    /// Passing bound: `value < tol`, or `value == 0` when `tol` is zero.
    pub tol: f64,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, tol: f64) -> Check {
        Check { name: name.into(), value, tol }
    }

    pub fn passed(&self) -> bool {
        if self.tol == 0.0 {
            self.value == 0.0
        } else {
            self.value < self.tol
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let bound = if self.tol == 0.0 { "== 0".to_string() } else { format!("< {:.0e}", self.tol) };
        write!(f, "{verdict} {:<40} {:.3e} (need {bound})", self.name, self.value)
    }
}

fn worst(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| if v.is_nan() || v > m { v } else { m })
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync;

/// Gradient of `Σ out ⊙ R` for a fixed random `R`, by backward and by
/// central differences, for every input of one primitive.
fn primitive_error(inputs: &[Tensor], build: &Build, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let r = uniform_tensor(&mut seeded(seed, 100), g.shape(out), -1.0, 1.0);
    let rv = g.constant(r.clone())?;
    let prod = g.mul_elementwise(out, rv)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;
    let mut err: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, v);
        let value = |probe: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let vars = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                .collect::<Result<Vec<_>>>()?;
            let out = build(&mut g, &vars)?;
            let rv = g.constant(r.clone())?;
            let prod = g.mul_elementwise(out, rv)?;
            let s = g.sum(prod)?;
            Ok(g.value(s).item())
        };
        let fd = finite_diff_gradient(value, &inputs[k], 1e-6)?;
        err = err.max(relative_error(analytic.data(), fd.data()));
    }
    Ok(err)
}

/// Every autodiff primitive against central differences, `SEEDS` random
/// instances each.
pub fn autodiff_primitives() -> Result<Vec<Check>> {
    let cases: Vec<(&str, Vec<Vec<usize>>, Box<Build>)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul_elementwise", vec![vec![2, 5], vec![2, 5]], Box::new(|g, v| g.mul_elementwise(v[0], v[1]))),
        ("scale", vec![vec![7]], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add_bias", vec![vec![3, 4], vec![4]], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]], Box::new(|g, v| g.conv2d(v[0], v[1], 1, 1))),
        ("conv2d stride 2", vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3]], Box::new(|g, v| g.conv2d(v[0], v[1], 2, 1))),
        ("relu", vec![vec![4, 6]], Box::new(|g, v| g.relu(v[0]))),
        ("avg_pool", vec![vec![2, 2, 5, 5]], Box::new(|g, v| g.avg_pool(v[0], 3, 1, 1))),
        ("max_pool", vec![vec![2, 2, 6, 6]], Box::new(|g, v| g.max_pool(v[0], 3, 2, 1))),
        ("global_avg_pool", vec![vec![2, 3, 4, 4]], Box::new(|g, v| g.global_avg_pool(v[0]))),
        ("sum", vec![vec![3, 3]], Box::new(|g, v| g.sum(v[0]))),
        ("softmax_rows", vec![vec![3, 5]], Box::new(|g, v| g.softmax_rows(v[0]))),
        (
            "cross_entropy",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|g, v| {
                let p = g.softmax_rows(v[0])?;
                let t = g.softmax_rows(v[1])?;
                g.cross_entropy(p, t)
            }),
        ),
        ("row", vec![vec![4, 3]], Box::new(|g, v| g.row(v[0], 2))),
        (
            "weighted_sum",
            vec![vec![3], vec![2, 3], vec![2, 3]],
            Box::new(|g, v| g.weighted_sum(v[0], &[Some(v[1]), None, Some(v[2])])),
        ),
        (
            "concat_channels",
            vec![vec![2, 1, 3, 3], vec![2, 2, 3, 3]],
            Box::new(|g, v| g.concat_channels(&[v[0], v[1]])),
        ),
        ("abs_max_normalize", vec![vec![3, 2, 2, 2]], Box::new(|g, v| g.abs_max_normalize(v[0], 1e-12))),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, build) in &cases {
        let mut errs = Vec::with_capacity(SEEDS as usize);
        for seed in 0..SEEDS {
            let mut rng = seeded(seed, 101);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform_tensor(&mut rng, s, -1.0, 1.0)).collect();
            errs.push(primitive_error(&inputs, build.as_ref(), seed)?);
        }
        out.push(Check::new(format!("primitive {name}"), worst(errs), 1e-5));
    }
    Ok(out)
}

fn net_input(seed: u64, n: usize, size: usize, classes: usize) -> (Tensor, Tensor) {
    let mut rng = seeded(seed, 102);
    let x = uniform_tensor(&mut rng, &[n, 1, size, size], 0.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % classes).collect();
    (x, one_hot(&labels, classes))
}

fn params_fd<F>(p: &Params, f: F) -> Result<Vec<f64>>
where
    F: Fn(&Params) -> Result<f64> + Sync + Send,
{
    let flat = Tensor::from_vec(p.flatten());
    let fd = finite_diff_gradient(|t| f(&p.unflatten(t.data())?), &flat, 1e-6)?;
    Ok(fd.into_data())
}

/// The full mixed explainer (gradients in `E`, `A` and the input) and the
/// full audience (gradients in `W` and the input) against central
/// differences.
pub fn networks() -> Result<Vec<Check>> {
    let spec = ExplainerSpec {
        in_channels: 1,
        classes: 3,
        cells: 1,
        cell: CellSpec { n_nodes: 2, channels: 2, ..CellSpec::default() },
    };
    let aspec = AudienceSpec { in_channels: 1, conv1_channels: 2, conv2_channels: 3, classes: 3 };
    let mut e_errs = Vec::new();
    let mut w_errs = Vec::new();
    for seed in 0..SEEDS {
        let (x, t) = net_input(seed, 2, 6, 3);
        let e = spec.init_weights(None, seed)?;
        let a = normal_tensor(&mut seeded(seed, stream::ARCH_INIT), &[spec.cell.num_edges(), spec.cell.num_ops()], 0.5);
        let loss = |e: &Params, a: &Tensor, x: &Tensor, trainable: bool| -> Result<(Graph, Var, Vec<Var>)> {
            let mut g = Graph::new();
            let xv = if trainable { g.leaf(x.clone())? } else { g.constant(x.clone())? };
            let bound = e.bind(&mut g, trainable)?;
            let av = if trainable { g.leaf(a.clone())? } else { g.constant(a.clone())? };
            let logits = explainer_forward(&mut g, xv, &bound, &spec, CellArch::Mixed(av))?;
            let tv = g.constant(t.clone())?;
            let l = softmax_cross_entropy(&mut g, logits, tv)?;
            let mut vars = vec![xv, av];
            vars.extend_from_slice(bound.vars());
            Ok((g, l, vars))
        };
        let (g, l, vars) = loss(&e.0, &a, &x, true)?;
        let grads = g.backward(l)?;
        let value = |e: &Params, a: &Tensor, x: &Tensor| -> Result<f64> {
            let (g, l, _) = loss(e, a, x, false)?;
            Ok(g.value(l).item())
        };
        let mut analytic_e = Vec::new();
        for &v in &vars[2..] {
            analytic_e.extend_from_slice(grads.wrt(&g, v).data());
        }
        let fd_e = params_fd(&e.0, |ep| value(ep, &a, &x))?;
        let fd_a = finite_diff_gradient(|at| value(&e.0, at, &x), &a, 1e-6)?;
        let fd_x = finite_diff_gradient(|xt| value(&e.0, &a, xt), &x, 1e-6)?;
        e_errs.push(relative_error(&analytic_e, &fd_e));
        e_errs.push(relative_error(grads.wrt(&g, vars[1]).data(), fd_a.data()));
        e_errs.push(relative_error(grads.wrt(&g, vars[0]).data(), fd_x.data()));

        let w = aspec.init_weights(seed)?;
        let aud = |w: &Params, x: &Tensor, trainable: bool| -> Result<(Graph, Var, Vec<Var>)> {
            let mut g = Graph::new();
            let xv = if trainable { g.leaf(x.clone())? } else { g.constant(x.clone())? };
            let bound = w.bind(&mut g, trainable)?;
            let logits = audience_forward(&mut g, xv, &bound, &aspec)?;
            let tv = g.constant(t.clone())?;
            let l = softmax_cross_entropy(&mut g, logits, tv)?;
            let mut vars = vec![xv];
            vars.extend_from_slice(bound.vars());
            Ok((g, l, vars))
        };
        let (g, l, vars) = aud(&w.0, &x, true)?;
        let grads = g.backward(l)?;
        let value = |w: &Params, x: &Tensor| -> Result<f64> {
            let (g, l, _) = aud(w, x, false)?;
            Ok(g.value(l).item())
        };
        let mut analytic_w = Vec::new();
        for &v in &vars[1..] {
            analytic_w.extend_from_slice(grads.wrt(&g, v).data());
        }
        let fd_w = params_fd(&w.0, |wp| value(wp, &x))?;
        let fd_x = finite_diff_gradient(|xt| value(&w.0, xt), &x, 1e-6)?;
        w_errs.push(relative_error(&analytic_w, &fd_w));
        w_errs.push(relative_error(grads.wrt(&g, vars[0]).data(), fd_x.data()));
    }
    Ok(vec![
        Check::new("network explainer (E, A, x)", worst(e_errs), 1e-4),
        Check::new("network audience (W, x)", worst(w_errs), 1e-4),
    ])
}

/// `fd_hvp` on bilinear forms, where it is exact for every step size.
pub fn hvp_bilinear() -> Result<Check> {
    let mut errs = Vec::new();
    for seed in 0..SEEDS {
        let mut rng = seeded(seed, 103);
        let m = uniform_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let y0 = uniform_tensor(&mut rng, &[3], -1.0, 1.0);
        let v = uniform_tensor(&mut rng, &[3], -1.0, 1.0);
        // ∇_x (xᵀ M y) = M y
        let my = |y: &Tensor| -> Result<Tensor> {
            Ok(Tensor::from_fn(&[4], |i| (0..3).map(|j| m.data()[i * 3 + j] * y.data()[j]).sum()))
        };
        let exact = my(&v)?;
        for alpha_scale in [1e-2, 1.0, 1e3] {
            let h = fd_hvp(my, &y0, &v, alpha_scale)?.expect("non-zero direction");
            errs.push(relative_error(h.data(), exact.data()));
        }
    }
    Ok(Check::new("fd_hvp bilinear", worst(errs), 1e-12))
}

/// A smooth two-layer network `softmax(softmax(x X) Y)` under cross-entropy;
/// the pair `(X, Y)` holds 35 parameters.
struct SmoothNet {
    x: Tensor,
    t: Tensor,
}

impl SmoothNet {
    const IN: usize = 4;
    const HIDDEN: usize = 5;
    const OUT: usize = 3;

    fn new(seed: u64) -> SmoothNet {
        let mut rng = seeded(seed, 104);
        let x = uniform_tensor(&mut rng, &[6, Self::IN], -1.0, 1.0);
        let labels: Vec<usize> = (0..6).map(|i| (i * 7 + seed as usize) % Self::OUT).collect();
        SmoothNet { x, t: one_hot(&labels, Self::OUT) }
    }

    fn graph(&self, g: &mut Graph, xw: Var, yw: Var) -> Result<Var> {
        let inp = g.constant(self.x.clone())?;
        let h = g.matmul(inp, xw)?;
        let h = g.softmax_rows(h)?;
        let z = g.matmul(h, yw)?;
        let t = g.constant(self.t.clone())?;
        softmax_cross_entropy(g, z, t)
    }

    fn loss(&self, xw: &Tensor, yw: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(xw.clone())?, g.constant(yw.clone())?);
        let l = self.graph(&mut g, a, b)?;
        Ok(g.value(l).item())
    }

    fn grad_x(&self, xw: &Tensor, yw: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let a = g.leaf(xw.clone())?;
        let b = g.constant(yw.clone())?;
        let l = self.graph(&mut g, a, b)?;
        Ok(g.backward(l)?.wrt(&g, a))
    }
}

/// `Σ_j v_j ∂/∂Y_j ∇_X L` with both derivatives taken by central
/// differences of loss values.
fn nested_fd_jvp(net: &SmoothNet, xw: &Tensor, yw: &Tensor, v: &Tensor) -> Result<Tensor> {
    let h = 1e-4;
    let mut out = Tensor::zeros(xw.shape());
    for j in 0..yw.numel() {
        let shifted = |s: f64| {
            let mut d = yw.data().to_vec();
            d[j] += s;
            Tensor::from_vec(d).reshape(yw.shape())
        };
        let (yp, ym) = (shifted(h)?, shifted(-h)?);
        let gp = finite_diff_gradient(|xt| net.loss(xt, &yp), xw, h)?;
        let gm = finite_diff_gradient(|xt| net.loss(xt, &ym), xw, h)?;
        let col = gp.axpy(-1.0, &gm).scale(v.data()[j] / (2.0 * h));
        out = out.axpy(1.0, &col);
    }
    Ok(out)
}

/// `fd_hvp` with the default step rule against the nested-difference
/// mixed-Jacobian product on a smooth ≤200-parameter network.
pub fn hvp_network() -> Result<Check> {
    let mut errs = Vec::new();
    for seed in 0..SEEDS {
        let net = SmoothNet::new(seed);
        let mut rng = seeded(seed, 105);
        let xw = uniform_tensor(&mut rng, &[SmoothNet::IN, SmoothNet::HIDDEN], -1.0, 1.0);
        let yw = uniform_tensor(&mut rng, &[SmoothNet::HIDDEN, SmoothNet::OUT], -1.0, 1.0);
        let v = uniform_tensor(&mut rng, yw.shape(), -1.0, 1.0);
        let got = fd_hvp(|y: &Tensor| net.grad_x(&xw, y), &yw, &v, Hyperparams::default().alpha_scale)?
            .expect("non-zero direction");
        let oracle = nested_fd_jvp(&net, &xw, &yw, &v)?;
        errs.push(relative_error(got.data(), oracle.data()));
    }
    Ok(Check::new("fd_hvp vs nested differences", worst(errs), 1e-3))
}

/// A one-cell, two-node explainer with a small audience on 6×6 images, four
/// per split.
pub struct TinyProblem {
    pub explainer: ExplainerSpec,
    pub audience: AudienceSpec,
    pub batches: [Batch; 4],
    pub eps: f64,
}

impl TinyProblem {
    pub fn new(seed: u64, ops: &[CandidateOp]) -> Result<TinyProblem> {
        let spec = SyntheticSpec { size: 6, n_train: 4, n_val: 4, shared: false, seed, ..SyntheticSpec::default() };
        let (s, _) = generate_synthetic(&spec, 0)?;
        Ok(TinyProblem {
            explainer: ExplainerSpec {
                in_channels: 1,
                classes: 4,
                cells: 1,
                cell: CellSpec { n_nodes: 2, channels: 1, ops: ops.to_vec() },
            },
            audience: AudienceSpec { in_channels: 1, conv1_channels: 2, conv2_channels: 2, classes: 4 },
            batches: [s.e_train.as_batch(), s.e_val.as_batch(), s.a_train.as_batch(), s.a_val.as_batch()],
            eps: 0.1,
        })
    }

    pub fn problem(&self) -> NetworkProblem<'_> {
        NetworkProblem {
            explainer: &self.explainer,
            audience: &self.audience,
            e_train: &self.batches[0],
            e_val: &self.batches[1],
            a_train: &self.batches[2],
            a_val: &self.batches[3],
            reweigh: ReweighMode::AbsNormalized,
            eps: self.eps,
        }
    }

    pub fn state(&self, seed: u64) -> Result<NetworkState> {
        let cell = &self.explainer.cell;
        Ok(LeaseState {
            arch: ArchParams(uniform_tensor(&mut seeded(seed, stream::ARCH_INIT), &[cell.num_edges(), cell.num_ops()], -0.5, 0.5)),
            explainer: self.explainer.init_weights(None, seed)?,
            audience: self.audience.init_weights(seed)?,
            iteration: 0,
            rng: seeded(seed, stream::PERTURBATION),
        })
    }

    pub fn parameter_count(&self) -> Result<usize> {
        let st = self.state(0)?;
        Ok(st.explainer.numel() + st.arch.tensor().numel())
    }
}

/// The candidate ops of the hypergradient instance. Max-pooling is left out:
/// its argmax switches make `∇_A L_tr` jump within the `α`-sized secant
/// of `fd_hvp`, which a pointwise derivative oracle cannot follow.
pub const SMOOTH_OPS: [CandidateOp; 4] =
    [CandidateOp::Zero, CandidateOp::Skip, CandidateOp::Conv3x3Relu, CandidateOp::AvgPool3];

/// The explainer path against differences of the unrolled objective
/// `A ↦ L_val(E − ξ_e ∇_E L_tr(E, A), A)`.
pub fn hypergrad_explainer() -> Result<Check> {
    let tiny = TinyProblem::new(2, &SMOOTH_OPS)?;
    let p = tiny.problem();
    let hp = Hyperparams::default();
    let mut errs = Vec::new();
    for seed in 0..2 {
        let st = tiny.state(seed)?;
        let (_, e_prime) = virtual_explainer_step(&p, &st.explainer, &st.arch, hp.xi_e)?;
        let (_, g) = hypergrad_explainer_path(&p, &st.explainer, &st.arch, &e_prime, &hp)?;
        let unrolled = |at: &Tensor| -> Result<f64> {
            let a = ArchParams(at.clone());
            let (_, ep) = virtual_explainer_step(&p, &st.explainer, &a, hp.xi_e)?;
            Ok(p.explainer_val(&ep, &a)?.0)
        };
        let oracle = finite_diff_gradient(unrolled, st.arch.tensor(), 1e-5)?;
        errs.push(relative_error(g.tensor().data(), oracle.data()));
    }
    Ok(Check::new("hypergradient explainer path", worst(errs), 1e-2))
}

pub fn scalar_chain() -> ScalarChain {
    ScalarChain { c: 0.7, e_val: 0.3, r: 0.2, b: 1.3, d: -0.8, t: 0.4, eps: 10.0, delta0: 0.05 }
}

/// Audience path on the scalar chain, with the virtual audience weights.
pub fn scalar_audience_path(p: &ScalarChain, e: f64, a: f64, w: f64, hp: &Hyperparams) -> Result<(f64, f64)> {
    let (_, e_prime) = virtual_explainer_step(p, &e, &a, hp.xi_e)?;
    let expl = explain(p, p.delta0, &e_prime, &a, hp)?;
    let (_, w_prime) = virtual_audience_step(p, &w, &expl.delta, hp.xi_w)?;
    let (_, g) = hypergrad_audience_path(p, &e, &a, &e_prime, &w, &w_prime, &expl, hp)?;
    Ok((g, w_prime))
}

/// The audience path against the product of the chain's four constant
/// derivatives: `(W′ − t) · ξ_W d · ξ_Δ b · ξ_e c`.
pub fn hypergrad_audience() -> Result<Check> {
    let p = scalar_chain();
    let mut errs = Vec::new();
    for hp in [Hyperparams::default(), Hyperparams { xi_e: 0.3, xi_delta: 0.2, xi_w: 0.4, ..Hyperparams::default() }] {
        for (e, a, w) in [(1.0, 0.5, -0.2), (-0.4, 2.0, 0.9), (0.0, 0.0, 3.0), (2.5, -1.0, 0.1)] {
            let (g, w_prime) = scalar_audience_path(&p, e, a, w, &hp)?;
            let closed = (w_prime - p.t) * (hp.xi_w * p.d) * (hp.xi_delta * p.b) * (hp.xi_e * p.c);
            errs.push(relative_error(&[g], &[closed]));
        }
    }
    Ok(Check::new("hypergradient audience path", worst(errs), 1e-3))
}

/// The architecture step of a first-order, one-step-unrolled search,
/// written out coordinate by coordinate from the first-order oracles.
fn reference_arch_step(p: &NetworkProblem<'_>, e: &ExplainerWeights, a: &ArchParams, hp: &Hyperparams) -> Result<Vec<f64>> {
    let e0 = e.flatten();
    let ge = p.explainer_train(e, a)?.1.flatten();
    let e_prime: Vec<f64> = e0.iter().zip(&ge).map(|(x, g)| x - hp.xi_e * g).collect();
    let (_, gv_e, gv_a) = p.explainer_val(&ExplainerWeights(e.unflatten(&e_prime)?), a)?;
    let v = gv_e.flatten();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let alpha = hp.alpha_scale / norm;
    let at = |sign: f64| -> Result<Vec<f64>> {
        let shifted: Vec<f64> = e0.iter().zip(&v).map(|(x, vi)| x + sign * alpha * vi).collect();
        Ok(p.explainer_train(&ExplainerWeights(e.unflatten(&shifted)?), a)?.2 .0.into_data())
    };
    let (plus, minus) = (at(1.0)?, at(-1.0)?);
    Ok(a.tensor()
        .data()
        .iter()
        .enumerate()
        .map(|(i, ai)| {
            let hvp = (plus[i] - minus[i]) / (2.0 * alpha);
            ai - hp.eta * (gv_a.tensor().data()[i] - hp.xi_e * hvp)
        })
        .collect())
}

/// Lease iterations at `γ = 0` against [`reference_arch_step`], ten
/// iterations on fresh batches.
pub fn mode_equivalence() -> Result<Check> {
    let spec = SyntheticSpec { size: 6, n_train: 16, n_val: 16, seed: 11, ..SyntheticSpec::default() };
    let (DatasetSplits { e_train, a_train, e_val, a_val }, _) = generate_synthetic(&spec, 0)?;
    let tiny = TinyProblem::new(11, &CandidateOp::ALL)?;
    let mut state = tiny.state(11)?;
    let hp = Hyperparams { gamma: 0.0, eta: 0.05, ..Hyperparams::default() };
    let sets = [&e_train, &e_val, &a_train, &a_val];
    let mut iters = sets
        .iter()
        .enumerate()
        .map(|(k, s)| BatchIterator::new(s, 4, substream(11, stream::BATCHES, k as u32)))
        .collect::<Result<Vec<_>>>()?;
    let mut diff: f64 = 0.0;
    for _ in 0..10 {
        let b: Vec<Batch> = iters.iter_mut().map(|it| it.next().expect("endless")).collect();
        let p = NetworkProblem {
            explainer: &tiny.explainer,
            audience: &tiny.audience,
            e_train: &b[0],
            e_val: &b[1],
            a_train: &b[2],
            a_val: &b[3],
            reweigh: ReweighMode::AbsNormalized,
            eps: tiny.eps,
        };
        let reference = reference_arch_step(&p, &state.explainer, &state.arch, &hp)?;
        lease_iteration(&p, &mut state, &hp, Mode::Lease)?;
        for (x, r) in state.arch.tensor().data().iter().zip(&reference) {
            diff = diff.max((x - r).abs());
        }
    }
    Ok(Check::new("gamma = 0 vs first-order reference", diff, 1e-10))
}

/// `ξ_W`, `ξ_Δ` or `ξ_e` at zero makes the audience path exactly zero, on
/// the scalar chain and on the tiny network.
pub fn degenerate_zeros() -> Result<Vec<Check>> {
    let base = Hyperparams::default();
    let settings = [
        ("xi_w", Hyperparams { xi_w: 0.0, ..base.clone() }),
        ("xi_delta", Hyperparams { xi_delta: 0.0, ..base.clone() }),
        ("xi_e", Hyperparams { xi_e: 0.0, ..base.clone() }),
    ];
    let tiny = TinyProblem::new(4, &CandidateOp::ALL)?;
    let p = tiny.problem();
    let st = tiny.state(4)?;
    let chain = scalar_chain();
    let mut out = Vec::new();
    for (name, hp) in &settings {
        let (gs, _) = scalar_audience_path(&chain, 1.0, 0.5, -0.2, hp)?;
        let (_, e_prime) = virtual_explainer_step(&p, &st.explainer, &st.arch, hp.xi_e)?;
        let expl = explain(&p, p.init_explanation(&mut seeded(4, stream::PERTURBATION)), &e_prime, &st.arch, hp)?;
        let (_, w_prime) = virtual_audience_step(&p, &st.audience, &expl.delta, hp.xi_w)?;
        let (_, g) = hypergrad_audience_path(&p, &st.explainer, &st.arch, &e_prime, &st.audience, &w_prime, &expl, hp)?;
        let value = worst(g.tensor().data().iter().map(|v| v.abs()).chain([gs.abs()]));
        out.push(Check::new(format!("audience path with {name} = 0"), value, 0.0));
    }
    Ok(out)
}

/// All oracle suites in order.
pub fn run_all() -> Result<Vec<Check>> {
    let mut out = autodiff_primitives()?;
    out.extend(networks()?);
    out.push(hvp_bilinear()?);
    out.push(hvp_network()?);
    out.push(hypergrad_explainer()?);
    out.push(hypergrad_audience()?);
    out.push(mode_equivalence()?);
    out.extend(degenerate_zeros()?);
    Ok(out)
}
