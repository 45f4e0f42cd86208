use super::*;
use crate::autodiff::{finite_diff_gradient, relative_error};
use crate::data::{generate_synthetic, Batch, SyntheticSpec};
use crate::nn::{AudienceSpec, ExplainerSpec, ExplainerWeights};
use crate::random::{seeded, stream, uniform_tensor};
use crate::searchspace::{ArchParams, CellSpec};
use crate::tensor::Tensor;

struct Fixture {
    explainer: ExplainerSpec,
    audience: AudienceSpec,
    batches: [Batch; 4],
    eps: f64,
}

impl Fixture {
    fn tiny(seed: u64) -> Fixture {
        let spec = SyntheticSpec { size: 6, n_train: 4, n_val: 4, shared: false, seed, ..SyntheticSpec::default() };
        let (s, _) = generate_synthetic(&spec, 0).unwrap();
        Fixture {
            explainer: ExplainerSpec {
                in_channels: 1,
                classes: 4,
                cells: 1,
                cell: CellSpec { n_nodes: 2, channels: 1, ..CellSpec::default() },
            },
            audience: AudienceSpec { in_channels: 1, conv1_channels: 2, conv2_channels: 2, classes: 4 },
            batches: [s.e_train.as_batch(), s.e_val.as_batch(), s.a_train.as_batch(), s.a_val.as_batch()],
            eps: 0.1,
        }
    }

    fn problem(&self) -> NetworkProblem<'_> {
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

    fn state(&self, seed: u64) -> NetworkState {
        LeaseState {
            arch: ArchParams(uniform_tensor(&mut seeded(seed, stream::ARCH_INIT), &[self.explainer.cell.num_edges(), self.explainer.cell.num_ops()], -0.5, 0.5)),
            explainer: self.explainer.init_weights(None, seed).unwrap(),
            audience: self.audience.init_weights(seed).unwrap(),
            iteration: 0,
            rng: seeded(seed, stream::PERTURBATION),
        }
    }
}

fn chain() -> ScalarChain {
    ScalarChain { c: 0.7, e_val: 0.3, r: 0.2, b: 1.3, d: -0.8, t: 0.4, eps: 10.0, delta0: 0.05 }
}

#[test]
fn fd_hvp_is_exact_on_bilinear_forms() {
    for alpha_scale in [1e-2, 1.0, 1e3] {
        let h: f64 = fd_hvp(|y: &f64| Ok(*y), &0.37, &-1.9, alpha_scale).unwrap().unwrap();
        assert!((h + 1.9).abs() < 1e-12);
    }
    // g(x, y) = xᵀ M y, so ∇_x g = M y and the product is M v
    let mut rng = seeded(3, 0);
    let m = uniform_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let y0 = uniform_tensor(&mut rng, &[3], -1.0, 1.0);
    let v = uniform_tensor(&mut rng, &[3], -1.0, 1.0);
    let my = |y: &Tensor| -> Result<Tensor> {
        Ok(Tensor::from_fn(&[4], |i| (0..3).map(|j| m.data()[i * 3 + j] * y.data()[j]).sum()))
    };
    let h = fd_hvp(my, &y0, &v, 0.01).unwrap().unwrap();
    assert!(relative_error(h.data(), my(&v).unwrap().data()) < 1e-12);
}

#[test]
fn fd_hvp_of_zero_vector_is_zero() {
    let out: Option<f64> = fd_hvp(|_: &f64| -> Result<f64> { unreachable!() }, &1.0, &0.0, 0.01).unwrap();
    assert!(out.is_none());
    let tiny: Option<f64> = fd_hvp(|y: &f64| Ok(*y), &1.0, &1e-13, 0.01).unwrap();
    assert!(tiny.is_none());
}

#[test]
fn explainer_path_matches_unrolled_total_derivative() {
    use crate::searchspace::CandidateOp::*;
    // without max-pool the α-sized secant rarely straddles a gradient jump
    let mut fx = Fixture::tiny(2);
    fx.explainer.cell.ops = vec![Zero, Skip, Conv3x3Relu, AvgPool3];
    let p = fx.problem();
    let hp = Hyperparams::default();
    for seed in 0..2 {
        let st = fx.state(seed);
        let (_, e_prime) = virtual_explainer_step(&p, &st.explainer, &st.arch, hp.xi_e).unwrap();
        let (_, g) = hypergrad_explainer_path(&p, &st.explainer, &st.arch, &e_prime, &hp).unwrap();
        let unrolled = |at: &Tensor| -> Result<f64> {
            let a = ArchParams(at.clone());
            let (_, ep) = virtual_explainer_step(&p, &st.explainer, &a, hp.xi_e)?;
            Ok(p.explainer_val(&ep, &a)?.0)
        };
        let oracle = finite_diff_gradient(unrolled, st.arch.tensor(), 1e-5).unwrap();
        let err = relative_error(g.tensor().data(), oracle.data());
        assert!(err < 1e-2, "seed {seed}: relative error {err}");
    }
}

#[test]
fn explainer_path_with_zero_step_is_the_direct_term() {
    let fx = Fixture::tiny(3);
    let p = fx.problem();
    let st = fx.state(3);
    let hp = Hyperparams { xi_e: 0.0, ..Hyperparams::default() };
    let (_, e_prime) = virtual_explainer_step(&p, &st.explainer, &st.arch, 0.0).unwrap();
    assert_eq!(e_prime, st.explainer);
    let (_, g) = hypergrad_explainer_path(&p, &st.explainer, &st.arch, &e_prime, &hp).unwrap();
    let (_, _, direct) = p.explainer_val(&st.explainer, &st.arch).unwrap();
    assert_eq!(g, direct);
}

#[test]
fn arch_independent_losses_give_zero_hypergradient() {
    let p = ScalarChain { c: 0.0, r: 0.0, ..chain() };
    let hp = Hyperparams::default();
    let (_, e_prime) = virtual_explainer_step(&p, &1.2, &0.4, hp.xi_e).unwrap();
    let (_, g) = hypergrad_explainer_path(&p, &1.2, &0.4, &e_prime, &hp).unwrap();
    assert_eq!(g, 0.0);
}

fn scalar_audience_path(p: &ScalarChain, e: f64, a: f64, w: f64, hp: &Hyperparams) -> (f64, f64) {
    let (_, e_prime) = virtual_explainer_step(p, &e, &a, hp.xi_e).unwrap();
    let expl = explain(p, p.delta0, &e_prime, &a, hp).unwrap();
    let (_, w_prime) = virtual_audience_step(p, &w, &expl.delta, hp.xi_w).unwrap();
    let (_, g) = hypergrad_audience_path(p, &e, &a, &e_prime, &w, &w_prime, &expl, hp).unwrap();
    (g, w_prime)
}

#[test]
fn audience_path_matches_scalar_closed_form() {
    let p = chain();
    let hp = Hyperparams { xi_e: 0.3, xi_delta: 0.2, xi_w: 0.4, ..Hyperparams::default() };
    for (e, a, w) in [(1.0, 0.5, -0.2), (-0.4, 2.0, 0.9), (0.0, 0.0, 3.0)] {
        let (g, w_prime) = scalar_audience_path(&p, e, a, w, &hp);
        let closed = (w_prime - p.t) * (hp.xi_w * p.d) * (hp.xi_delta * p.b) * (hp.xi_e * p.c);
        assert!(relative_error(&[g], &[closed]) < 1e-9, "{g} vs {closed}");
    }
}

#[test]
fn audience_path_clip_blocks_the_chain() {
    let p = ScalarChain { eps: 1e-3, ..chain() };
    let hp = Hyperparams { xi_delta: 5.0, ..Hyperparams::default() };
    let (g, _) = scalar_audience_path(&p, 1.0, 0.5, 0.2, &hp);
    assert_eq!(g, 0.0);
}

#[test]
fn degenerate_factors_zero_the_audience_path() {
    let fx = Fixture::tiny(4);
    let p = fx.problem();
    let st = fx.state(4);
    let base = Hyperparams::default();
    for hp in [
        Hyperparams { xi_w: 0.0, ..base.clone() },
        Hyperparams { xi_delta: 0.0, ..base.clone() },
        Hyperparams { xi_e: 0.0, ..base.clone() },
    ] {
        let (_, e_prime) = virtual_explainer_step(&p, &st.explainer, &st.arch, hp.xi_e).unwrap();
        let expl = explain(&p, p.init_explanation(&mut seeded(0, 0)), &e_prime, &st.arch, &hp).unwrap();
        let (_, w_prime) = virtual_audience_step(&p, &st.audience, &expl.delta, hp.xi_w).unwrap();
        let (_, g) = hypergrad_audience_path(&p, &st.explainer, &st.arch, &e_prime, &st.audience, &w_prime, &expl, &hp).unwrap();
        assert!(g.tensor().data().iter().all(|&v| v == 0.0), "{hp:?}");
    }
    // and the non-degenerate chain is not identically zero
    let (_, e_prime) = virtual_explainer_step(&p, &st.explainer, &st.arch, base.xi_e).unwrap();
    let expl = explain(&p, p.init_explanation(&mut seeded(0, 0)), &e_prime, &st.arch, &base).unwrap();
    let (_, w_prime) = virtual_audience_step(&p, &st.audience, &expl.delta, base.xi_w).unwrap();
    let (_, g) = hypergrad_audience_path(&p, &st.explainer, &st.arch, &e_prime, &st.audience, &w_prime, &expl, &base).unwrap();
    assert!(g.norm() > 0.0);
}

#[test]
fn virtual_steps_are_plain_descent() {
    let p = ScalarChain { c: 0.0, ..chain() };
    let (_, e_prime) = virtual_explainer_step(&p, &1.0, &0.0, 0.1).unwrap();
    assert!((e_prime - 0.9).abs() < 1e-15);
    let (_, stationary) = virtual_explainer_step(&p, &0.0, &0.0, 0.1).unwrap();
    assert_eq!(stationary, 0.0);

    let fx = Fixture::tiny(5);
    let p = fx.problem();
    let st = fx.state(5);
    let (l0, e1) = virtual_explainer_step(&p, &st.explainer, &st.arch, 1e-3).unwrap();
    assert!(p.explainer_train(&e1, &st.arch).unwrap().0 < l0);
    // the gradient is recomputed at the new point
    let g0 = p.explainer_train(&st.explainer, &st.arch).unwrap().1;
    let g1 = p.explainer_train(&e1, &st.arch).unwrap().1;
    assert_ne!(g0, g1);

    let delta = p.init_explanation(&mut seeded(5, 0));
    let (_, same) = virtual_audience_step(&p, &st.audience, &delta, 0.0).unwrap();
    assert_eq!(same, st.audience);
    let (la, w1) = virtual_audience_step(&p, &st.audience, &delta, 1e-3).unwrap();
    assert!(p.audience_train(&w1, &delta).unwrap().0 < la);
}

#[test]
fn outer_objective_adds_the_two_losses() {
    let fx = Fixture::tiny(6);
    let p = fx.problem();
    let st = fx.state(6);
    let le = p.explainer_val(&st.explainer, &st.arch).unwrap().0;
    let la = p.audience_val(&st.audience).unwrap().0;
    assert_eq!(outer_objective(&p, &st.explainer, &st.arch, &st.audience, 0.0).unwrap(), le);
    let both = outer_objective(&p, &st.explainer, &st.arch, &st.audience, 1.0).unwrap();
    assert!((both - (le + la)).abs() < 1e-14);
    let zero = ScalarChain { e_val: 0.0, r: 0.0, t: 0.0, ..chain() };
    assert_eq!(outer_objective(&zero, &0.0, &0.0, &0.0, 1.0).unwrap(), 0.0);
}

#[test]
fn arch_update_arithmetic() {
    let mut rng = seeded(7, 0);
    let a = uniform_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let ge = uniform_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let ga = uniform_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    assert_eq!(arch_update(&a, &ge, &ga, 0.0, 1.0), a);
    let next = arch_update(&a, &ge, &ga, 0.01, 0.5);
    for i in 0..15 {
        let expect = a.data()[i] - 0.01 * (ge.data()[i] + 0.5 * ga.data()[i]);
        assert!((next.data()[i] - expect).abs() < 1e-15);
    }
    assert_eq!(arch_update(&a, &ge, &ga, 0.01, 0.0), a.axpy(-0.01, &ge));
}

#[test]
fn darts1st_ignores_gamma_and_matches_gamma_zero() {
    let fx = Fixture::tiny(8);
    let p = fx.problem();
    let hp = Hyperparams { gamma: 2.0, ..Hyperparams::default() };
    let mut d = fx.state(8);
    let mut l = fx.state(8);
    for _ in 0..3 {
        let rd = lease_iteration(&p, &mut d, &hp, Mode::Darts1st).unwrap();
        lease_iteration(&p, &mut l, &Hyperparams { gamma: 0.0, ..hp.clone() }, Mode::Lease).unwrap();
        assert!(rd.attack_objective.is_none() && rd.audience_val_loss.is_none());
        assert_eq!(d.arch, l.arch);
        assert_eq!(d.explainer, l.explainer);
    }
}

#[test]
fn audience_only_drops_the_explainer_term() {
    let fx = Fixture::tiny(9);
    let p = fx.problem();
    let hp = Hyperparams { eta: 0.1, ..Hyperparams::default() };
    let mut s = fx.state(9);
    let before = s.clone();
    let r = lease_iteration(&p, &mut s, &hp, Mode::AudienceOnly).unwrap();
    assert!(r.explainer_val_loss > 0.0);
    assert_eq!(r.outer_objective, hp.gamma * r.audience_val_loss.unwrap());

    // replay the same stages by hand
    let (_, e_prime) = virtual_explainer_step(&p, &before.explainer, &before.arch, hp.xi_e).unwrap();
    let mut rng = before.rng.clone();
    let expl = explain(&p, p.init_explanation(&mut rng), &e_prime, &before.arch, &hp).unwrap();
    let (_, w_prime) = virtual_audience_step(&p, &before.audience, &expl.delta, hp.xi_w).unwrap();
    let (_, ga) =
        hypergrad_audience_path(&p, &before.explainer, &before.arch, &e_prime, &before.audience, &w_prime, &expl, &hp).unwrap();
    assert_eq!(s.arch, before.arch.axpy(-hp.eta * hp.gamma, &ga));
}

#[test]
fn iterations_are_deterministic_finite_and_ascend_the_attack() {
    let fx = Fixture::tiny(10);
    let p = fx.problem();
    let hp = Hyperparams { attack_steps: 2, ..Hyperparams::default() };
    let mut a = fx.state(10);
    let mut b = fx.state(10);
    for i in 1..=5 {
        let ra = lease_iteration(&p, &mut a, &hp, Mode::Lease).unwrap();
        let rb = lease_iteration(&p, &mut b, &hp, Mode::Lease).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.iteration, i);
        assert_eq!(ra.attack_trace.len(), 3);
        assert!(ra.attack_trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", ra.attack_trace);
        for v in [ra.explainer_train_loss, ra.explainer_val_loss, ra.outer_objective] {
            assert!(v.is_finite());
        }
    }
    assert_eq!(a, b);
    assert!(a.arch.all_finite() && a.explainer.all_finite() && a.audience.all_finite());
}

#[test]
fn non_finite_state_aborts_with_the_quantity() {
    let fx = Fixture::tiny(11);
    let p = fx.problem();
    let mut s = fx.state(11);
    let mut bad = s.explainer.0.clone();
    let stem = bad.get("stem.conv").unwrap().map(|_| f64::NAN);
    bad.insert("stem.conv", stem);
    s.explainer = ExplainerWeights(bad);
    let err = lease_iteration(&p, &mut s, &Hyperparams::default(), Mode::Lease).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("explainer step"), "{err}");
}

#[test]
fn mode_and_hyperparam_parsing() {
    assert_eq!("audience-only".parse::<Mode>().unwrap(), Mode::AudienceOnly);
    assert_eq!("darts1st".parse::<Mode>().unwrap().to_string(), "darts1st");
    assert!("darts".parse::<Mode>().is_err());
    assert!(Hyperparams::default().check().is_ok());
    assert_eq!(Hyperparams { xi_w: -1.0, ..Hyperparams::default() }.check().unwrap_err().0, "xi_w");
    assert_eq!(Hyperparams { gamma: -0.5, ..Hyperparams::default() }.check().unwrap_err().0, "gamma");
}
