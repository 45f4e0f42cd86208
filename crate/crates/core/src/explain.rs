//! Adversarial perturbations as explanations, and explanation-reweighted
//! inputs for the audience.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::Deserialize;

use crate::autodiff::{Graph, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{explainer_forward, Arch, ExplainerSpec, ExplainerWeights};
use crate::params::{BoundParams, Params};
use crate::random::uniform_tensor;
use crate::searchspace::CellArch;
use crate::tensor::Tensor;

/// How a perturbation turns into pixel weights for the audience.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweighMode {
    /// `δ ⊙ x`.
    Literal,
    /// `(|δ| / max|δ|) ⊙ x`, per example.
    #[default]
    AbsNormalized,
}

impl FromStr for ReweighMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ReweighMode::Literal),
            "abs-normalized" => Ok(ReweighMode::AbsNormalized),
            other => Err(Error::InvalidArgument(format!(
                "unknown reweigh mode `{other}` (expected `literal` or `abs-normalized`)"
            ))),
        }
    }
}

impl fmt::Display for ReweighMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReweighMode::Literal => "literal",
            ReweighMode::AbsNormalized => "abs-normalized",
        })
    }
}

/// Per-example perturbations `Δ`, stored as one tensor shaped like the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSet {
    pub delta: Tensor,
    pub step: f64,
    pub eps: f64,
}

impl PerturbationSet {
    /// Uniform entries in `[−0.01ε, 0.01ε]`.
    pub fn init(shape: &[usize], step: f64, eps: f64, rng: &mut impl Rng) -> Self {
        let r = 0.01 * eps;
        PerturbationSet { delta: uniform_tensor(rng, shape, -r, r), step, eps }
    }

    pub fn zeros(shape: &[usize], step: f64, eps: f64) -> Self {
        PerturbationSet { delta: Tensor::zeros(shape), step, eps }
    }

    pub fn linf(&self) -> f64 {
        self.delta.max_abs()
    }

    /// 1 where an entry is strictly inside the box, 0 where it sits on a face.
    pub fn interior_mask(&self) -> Tensor {
        self.delta.map(|d| if d.abs() < self.eps { 1.0 } else { 0.0 })
    }

    /// Writes `Δ` in the checkpoint text format under the name `delta`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut p = Params::new();
        p.insert("delta", self.delta.clone());
        p.save(path)
    }
}

fn clip(t: &Tensor, eps: f64) -> Tensor {
    t.map(|v| v.clamp(-eps, eps))
}

/// Records `mean_i ℓ(softmax f(x_i + δ_i; E′), softmax f(x_i; E′))`.
///
/// The target branch is recorded without detaching, so a gradient with
/// respect to `E′` flows through both branches; it never depends on `δ`.
pub fn attack_objective_graph(
    g: &mut Graph,
    x: Var,
    delta: Var,
    e: &BoundParams,
    spec: &ExplainerSpec,
    arch: CellArch<'_>,
) -> Result<Var> {
    if g.shape(x) != g.shape(delta) {
        return Err(Error::shape("attack_objective", g.shape(x), g.shape(delta)));
    }
    let xp = g.add(x, delta)?;
    let lp = explainer_forward(g, xp, e, spec, arch)?;
    let pred = g.softmax_rows(lp)?;
    let lt = explainer_forward(g, x, e, spec, arch)?;
    let target = g.softmax_rows(lt)?;
    g.cross_entropy(pred, target)
}

pub fn attack_objective(
    x: &Tensor,
    delta: &PerturbationSet,
    e: &ExplainerWeights,
    spec: &ExplainerSpec,
    arch: Arch<'_>,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let dv = g.constant(delta.delta.clone())?;
    let bound = e.bind(&mut g, false)?;
    let cell = arch.bind(&mut g, false)?;
    let o = attack_objective_graph(&mut g, xv, dv, &bound, spec, cell)?;
    Ok(g.value(o).item())
}

/// Objective and its gradient with respect to `Δ`.
pub fn attack_gradient(
    x: &Tensor,
    delta: &Tensor,
    e: &ExplainerWeights,
    spec: &ExplainerSpec,
    arch: Arch<'_>,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let dv = g.leaf(delta.clone())?;
    let bound = e.bind(&mut g, false)?;
    let cell = arch.bind(&mut g, false)?;
    let o = attack_objective_graph(&mut g, xv, dv, &bound, spec, cell)?;
    let grads = g.backward(o)?;
    Ok((g.value(o).item(), grads.wrt(&g, dv)))
}

/// One projected ascent step: `Δ′ = clip(Δ + ξ_Δ ∇_Δ objective, −ε, ε)`.
pub fn perturb_step(
    x: &Tensor,
    delta: &PerturbationSet,
    e: &ExplainerWeights,
    spec: &ExplainerSpec,
    arch: Arch<'_>,
) -> Result<PerturbationSet> {
    let (_, grad) = attack_gradient(x, &delta.delta, e, spec, arch)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "perturb_step".into() });
    }
    let stepped = delta.delta.zip_map(&grad, |d, gr| d + delta.step * gr)?;
    Ok(PerturbationSet { delta: clip(&stepped, delta.eps), ..delta.clone() })
}

/// Records the reweighted audience input.
pub fn reweigh_graph(g: &mut Graph, x: Var, delta: Var, mode: ReweighMode) -> Result<Var> {
    if g.shape(x) != g.shape(delta) {
        return Err(Error::shape("reweigh_inputs", g.shape(x), g.shape(delta)));
    }
    let w = match mode {
        ReweighMode::Literal => delta,
        ReweighMode::AbsNormalized => g.abs_max_normalize(delta, LOG_FLOOR)?,
    };
    g.mul_elementwise(w, x)
}

pub fn reweigh_inputs(x: &Tensor, delta: &Tensor, mode: ReweighMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let dv = g.constant(delta.clone())?;
    let y = reweigh_graph(&mut g, xv, dv, mode)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::{finite_diff_gradient, relative_error, DEFAULT_FD_STEP};
    use crate::random::seeded;
    use crate::searchspace::{ArchParams, CellSpec};
    use crate::VectorSpace;

    fn setup(seed: u64) -> (ExplainerSpec, ExplainerWeights, ArchParams, Tensor) {
        let spec = ExplainerSpec {
            in_channels: 1,
            classes: 4,
            cells: 1,
            cell: CellSpec { n_nodes: 2, channels: 2, ..CellSpec::default() },
        };
        let e = spec.init_weights(None, seed).unwrap();
        let a = ArchParams(uniform_tensor(&mut seeded(seed, 1), &[5, 5], -1.0, 1.0));
        let x = uniform_tensor(&mut seeded(seed, 2), &[3, 1, 6, 6], 0.0, 1.0);
        (spec, e, a, x)
    }

    fn entropy_rows(logits: &Tensor) -> f64 {
        let k = logits.shape()[1];
        let rows: Vec<f64> = logits
            .data()
            .chunks(k)
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
                -r.iter().map(|v| (v - m).exp() / z).map(|p| p * p.ln()).sum::<f64>()
            })
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    }

    #[test]
    fn zero_delta_gives_mean_entropy() {
        let (spec, e, a, x) = setup(0);
        let zero = PerturbationSet::zeros(x.shape(), 0.01, 0.1);
        let obj = attack_objective(&x, &zero, &e, &spec, Arch::Mixed(&a)).unwrap();
        let logits = crate::nn::explainer_logits(&x, &e, &spec, Arch::Mixed(&a)).unwrap();
        assert!((obj - entropy_rows(&logits)).abs() < 1e-12);
        assert!(obj >= 0.0);
    }

    fn constant_predictor(spec: &ExplainerSpec, e: &ExplainerWeights) -> ExplainerWeights {
        let mut c = ExplainerWeights(e.zeros_like().0);
        c.insert("head.bias", Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.5]));
        assert_eq!(spec.classes, 4);
        c
    }

    #[test]
    fn constant_predictor_objective_is_entropy_of_bias_and_step_is_stationary() {
        let (spec, e, a, x) = setup(1);
        let c = constant_predictor(&spec, &e);
        let mut rng = seeded(1, 3);
        let d = PerturbationSet::init(x.shape(), 0.5, 0.1, &mut rng);
        let obj = attack_objective(&x, &d, &c, &spec, Arch::Mixed(&a)).unwrap();
        let bias = Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        assert!((obj - entropy_rows(&bias)).abs() < 1e-12);
        let d2 = perturb_step(&x, &d, &c, &spec, Arch::Mixed(&a)).unwrap();
        assert_eq!(d2, d);

        // equal logits: the objective is ln K for any Δ
        let mut u = ExplainerWeights(e.zeros_like().0);
        u.insert("head.bias", Tensor::full(&[4], 0.7));
        let obj = attack_objective(&x, &d, &u, &spec, Arch::Mixed(&a)).unwrap();
        assert!((obj - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_box_pins_delta_to_zero() {
        let (spec, e, a, x) = setup(2);
        let d = PerturbationSet::init(x.shape(), 0.5, 0.0, &mut seeded(2, 3));
        let d2 = perturb_step(&x, &d, &e, &spec, Arch::Mixed(&a)).unwrap();
        assert!(d2.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_step_increases_objective() {
        for seed in 0..5 {
            let (spec, e, a, x) = setup(seed);
            let d = PerturbationSet::init(x.shape(), 1e-3, 10.0, &mut seeded(seed, 3));
            let before = attack_objective(&x, &d, &e, &spec, Arch::Mixed(&a)).unwrap();
            let d2 = perturb_step(&x, &d, &e, &spec, Arch::Mixed(&a)).unwrap();
            let after = attack_objective(&x, &d2, &e, &spec, Arch::Mixed(&a)).unwrap();
            assert!(after > before, "seed {seed}: {after} <= {before}");
        }
    }

    #[test]
    fn objective_matches_direct_evaluation() {
        let (spec, e, a, x) = setup(3);
        let d = PerturbationSet::init(x.shape(), 0.01, 0.1, &mut seeded(3, 3));
        let obj = attack_objective(&x, &d, &e, &spec, Arch::Mixed(&a)).unwrap();
        let xp = x.zip_map(&d.delta, |a, b| a + b).unwrap();
        let lp = crate::nn::explainer_logits(&xp, &e, &spec, Arch::Mixed(&a)).unwrap();
        let lt = crate::nn::explainer_logits(&x, &e, &spec, Arch::Mixed(&a)).unwrap();
        let sm = |r: &[f64]| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
            r.iter().map(|v| (v - m).exp() / z).collect::<Vec<_>>()
        };
        let mut total = 0.0;
        for (rp, rt) in lp.data().chunks(4).zip(lt.data().chunks(4)) {
            let (p, t) = (sm(rp), sm(rt));
            total -= p.iter().zip(&t).map(|(pi, ti)| ti * pi.ln()).sum::<f64>();
        }
        assert!((obj - total / 3.0).abs() < 1e-13);
    }

    #[test]
    fn delta_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (spec, e, a, x) = setup(seed);
            let d = PerturbationSet::init(x.shape(), 0.01, 0.1, &mut seeded(seed, 3));
            let (_, grad) = attack_gradient(&x, &d.delta, &e, &spec, Arch::Mixed(&a)).unwrap();
            let fd = finite_diff_gradient(
                |t| {
                    let p = PerturbationSet { delta: t.clone(), ..d.clone() };
                    attack_objective(&x, &p, &e, &spec, Arch::Mixed(&a))
                },
                &d.delta,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(relative_error(grad.data(), fd.data()) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn literal_reweigh_cases() {
        let x = uniform_tensor(&mut seeded(4, 0), &[2, 1, 3, 3], 0.0, 1.0);
        assert_eq!(reweigh_inputs(&x, &Tensor::full(x.shape(), 1.0), ReweighMode::Literal).unwrap(), x);
        let z = reweigh_inputs(&x, &Tensor::zeros(x.shape()), ReweighMode::Literal).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("literal".parse::<ReweighMode>().unwrap(), ReweighMode::Literal);
        assert_eq!("abs-normalized".parse::<ReweighMode>().unwrap(), ReweighMode::AbsNormalized);
        assert!("signed".parse::<ReweighMode>().is_err());
        assert_eq!(ReweighMode::default().to_string(), "abs-normalized");
    }

    proptest! {
        #[test]
        fn abs_normalized_weights_peak_at_one(seed in 0u64..500) {
            let mut rng = seeded(seed, 0);
            let d = uniform_tensor(&mut rng, &[3, 1, 4, 4], -0.1, 0.1);
            let w = reweigh_inputs(&Tensor::full(d.shape(), 1.0), &d, ReweighMode::AbsNormalized).unwrap();
            for ex in w.data().chunks(16) {
                let m = ex.iter().cloned().fold(0.0, f64::max);
                prop_assert!((m - 1.0).abs() < 1e-15);
                prop_assert!(ex.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn projection_keeps_delta_in_box(seed in 0u64..200, eps in 0.0f64..0.3, step in 0.0f64..50.0) {
            let (spec, e, a, x) = setup(seed % 4);
            let d = PerturbationSet::init(x.shape(), step, eps, &mut seeded(seed, 3));
            let d2 = perturb_step(&x, &d, &e, &spec, Arch::Mixed(&a)).unwrap();
            prop_assert!(d2.linf() <= eps);
        }
    }
}
