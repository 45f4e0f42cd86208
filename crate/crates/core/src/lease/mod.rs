//! The four-level optimizer.
//!
//! One outer iteration unrolls a single plain gradient step at each inner
//! level:
//!
//! ```text
//! E′ = E − ξ_e ∇_E L_tr(E, A)                       explainer weights
//! Δ′ = clip_ε(Δ + ξ_Δ ∇_Δ O(Δ, E′))                  explanations (ascent)
//! W′ = W − ξ_W ∇_W L_aud(W, Δ′)                      audience weights
//! A  ← A − η (∇_A L_val(E′, A) + γ ∇_A L_aud,val(W′))
//! ```
//!
//! Second derivatives are never formed: every mixed term is a central
//! difference of first-order gradients along the vector it multiplies
//! ([`fd_hvp`]). The derivations are generic over [`FourLevel`] so they can
//! be checked on problems with closed-form answers.

mod network;
mod scalar;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;

pub use network::{NetworkProblem, NetworkState};
pub use scalar::ScalarChain;

use crate::error::{Error, Result};
use crate::explain::ReweighMode;
use crate::par;
use crate::random::StreamRng;
use crate::tensor::VectorSpace;

/// `‖v‖₂` below which [`fd_hvp`] returns an exact zero.
pub const HVP_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub xi_e: f64,
    pub xi_delta: f64,
    pub xi_w: f64,
    pub eta: f64,
    pub gamma: f64,
    pub eps: f64,
    pub alpha_scale: f64,
    pub attack_steps: usize,
    pub reweigh: ReweighMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            xi_e: 0.025,
            xi_delta: 0.01,
            xi_w: 0.025,
            eta: 3e-4,
            gamma: 1.0,
            eps: 0.1,
            alpha_scale: 0.01,
            attack_steps: 1,
            reweigh: ReweighMode::AbsNormalized,
        }
    }
}

impl Hyperparams {
    /// Returns the first offending field and why.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = [
            ("xi_e", self.xi_e),
            ("xi_delta", self.xi_delta),
            ("xi_w", self.xi_w),
            ("eta", self.eta),
            ("alpha_scale", self.alpha_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err((name, format!("must be a finite value > 0, got {v}")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("eps", self.eps)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err((name, format!("must be a finite value ≥ 0, got {v}")));
            }
        }
        if self.attack_steps == 0 {
            return Err(("attack_steps", "must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Explainer and audience hypergradients.
    #[default]
    Lease,
    /// Explainer hypergradient only; explanation and audience stages skipped.
    Darts1st,
    /// Audience hypergradient only; the explainer validation loss is still
    /// computed and logged.
    #[serde(alias = "audience_only")]
    AudienceOnly,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lease" => Ok(Mode::Lease),
            "darts1st" => Ok(Mode::Darts1st),
            "audience-only" | "audience_only" => Ok(Mode::AudienceOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (expected lease, darts1st or audience-only)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Lease => "lease",
            Mode::Darts1st => "darts1st",
            Mode::AudienceOnly => "audience-only",
        })
    }
}

/// The losses and first-order gradients of a four-level problem, evaluated
/// on fixed batches. `Arch` is always held fixed inside the inner levels.
pub trait FourLevel: Sync {
    type Arch: VectorSpace + Send + Sync;
    type Weights: VectorSpace + Send + Sync;
    type Expl: VectorSpace + Send + Sync;
    type Audience: VectorSpace + Send + Sync;

    /// Explainer training loss with gradients in `E` and `A`.
    fn explainer_train(&self, e: &Self::Weights, a: &Self::Arch) -> Result<(f64, Self::Weights, Self::Arch)>;
    /// Explainer validation loss with gradients in `E` and `A`.
    fn explainer_val(&self, e: &Self::Weights, a: &Self::Arch) -> Result<(f64, Self::Weights, Self::Arch)>;
    /// Attack objective with gradients in `Δ` and in the explainer weights.
    fn attack(&self, delta: &Self::Expl, e: &Self::Weights, a: &Self::Arch) -> Result<(f64, Self::Expl, Self::Weights)>;
    fn attack_value(&self, delta: &Self::Expl, e: &Self::Weights, a: &Self::Arch) -> Result<f64>;
    /// Audience training loss on explanation-reweighted inputs, with
    /// gradients in `W` and `Δ`.
    fn audience_train(&self, w: &Self::Audience, delta: &Self::Expl) -> Result<(f64, Self::Audience, Self::Expl)>;
    /// Audience validation loss with its gradient in `W`.
    fn audience_val(&self, w: &Self::Audience) -> Result<(f64, Self::Audience)>;
    fn init_explanation(&self, rng: &mut StreamRng) -> Self::Expl;
    /// Projection onto the ε-box.
    fn clip(&self, delta: &Self::Expl) -> Self::Expl;
    /// `v` times the Jacobian of [`FourLevel::clip`] at the unclipped point.
    fn clip_pullback(&self, unclipped: &Self::Expl, v: &Self::Expl) -> Self::Expl;
}

/// Central-difference mixed second derivative times `v`:
/// `(grad(Y0 + αv) − grad(Y0 − αv)) / 2α` with `α = α_scale / ‖v‖₂`.
///
/// Returns `None`, an exact zero, when `‖v‖₂ < 1e-12`.
pub fn fd_hvp<X, Y, F>(grad: F, y0: &Y, v: &Y, alpha_scale: f64) -> Result<Option<X>>
where
    X: VectorSpace + Send,
    Y: VectorSpace + Sync,
    F: Fn(&Y) -> Result<X> + Sync,
{
    let norm = v.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "fd_hvp".into() });
    }
    if norm < HVP_NORM_FLOOR {
        return Ok(None);
    }
    let alpha = alpha_scale / norm;
    let (plus, minus) = par::join(|| grad(&y0.axpy(alpha, v)), || grad(&y0.axpy(-alpha, v)));
    let out = plus?.axpy(-1.0, &minus?).scale(0.5 / alpha);
    if !out.all_finite() {
        return Err(Error::NonFinite { op: "fd_hvp".into() });
    }
    Ok(Some(out))
}

/// `E′ = E − ξ_e ∇_E L_tr(E, A)`, with the training loss at `E`.
pub fn virtual_explainer_step<P: FourLevel>(
    p: &P,
    e: &P::Weights,
    a: &P::Arch,
    xi_e: f64,
) -> Result<(f64, P::Weights)> {
    let (loss, ge, _) = p.explainer_train(e, a)?;
    Ok((loss, e.axpy(-xi_e, &ge)))
}

/// `W′ = W − ξ_W ∇_W L_aud(W, Δ′)`, with the training loss at `W`.
pub fn virtual_audience_step<P: FourLevel>(
    p: &P,
    w: &P::Audience,
    delta: &P::Expl,
    xi_w: f64,
) -> Result<(f64, P::Audience)> {
    let (loss, gw, _) = p.audience_train(w, delta)?;
    Ok((loss, w.axpy(-xi_w, &gw)))
}

/// Result of the explanation stage.
#[derive(Clone, Debug)]
pub struct Explanation<X> {
    /// The iterate the last ascent step started from.
    pub base: X,
    /// The last ascent step before projection.
    pub unclipped: X,
    pub delta: X,
    /// Objective at the initial point and after every step.
    pub trace: Vec<f64>,
}

/// `steps` projected ascent steps on the attack objective from `delta0`.
pub fn explain<P: FourLevel>(
    p: &P,
    delta0: P::Expl,
    e_prime: &P::Weights,
    a: &P::Arch,
    hp: &Hyperparams,
) -> Result<Explanation<P::Expl>> {
    let mut delta = delta0;
    let mut trace = Vec::with_capacity(hp.attack_steps + 1);
    let mut last = None;
    for _ in 0..hp.attack_steps {
        let (obj, gd, _) = p.attack(&delta, e_prime, a)?;
        trace.push(obj);
        let unclipped = delta.axpy(hp.xi_delta, &gd);
        let next = p.clip(&unclipped);
        last = Some((std::mem::replace(&mut delta, next), unclipped));
    }
    trace.push(p.attack_value(&delta, e_prime, a)?);
    let (base, unclipped) = last.expect("attack_steps ≥ 1");
    Ok(Explanation { base, unclipped, delta, trace })
}

/// `L_val(E′, A) + γ L_aud,val(W′)`.
pub fn outer_objective<P: FourLevel>(
    p: &P,
    e_prime: &P::Weights,
    a: &P::Arch,
    w_prime: &P::Audience,
    gamma: f64,
) -> Result<f64> {
    let (le, _, _) = p.explainer_val(e_prime, a)?;
    if gamma == 0.0 {
        return Ok(le);
    }
    let (la, _) = p.audience_val(w_prime)?;
    Ok(le + gamma * la)
}

/// Pulls `v` back through the explainer step: `−ξ_e ∇²_{A,E} L_tr(E, A) · v`.
fn through_explainer_step<P: FourLevel>(
    p: &P,
    e: &P::Weights,
    a: &P::Arch,
    v: &P::Weights,
    hp: &Hyperparams,
) -> Result<Option<P::Arch>> {
    let hvp = fd_hvp(|ep: &P::Weights| Ok(p.explainer_train(ep, a)?.2), e, v, hp.alpha_scale)?;
    Ok(hvp.map(|h| h.scale(-hp.xi_e)))
}

/// Explainer path: `∇_A L_val(E′, A) − ξ_e ∇²_{A,E} L_tr(E, A) · ∇_{E′} L_val(E′, A)`.
///
/// Returns the validation loss at `(E′, A)` and the hypergradient.
pub fn hypergrad_explainer_path<P: FourLevel>(
    p: &P,
    e: &P::Weights,
    a: &P::Arch,
    e_prime: &P::Weights,
    hp: &Hyperparams,
) -> Result<(f64, P::Arch)> {
    let (loss, g_eprime, g_direct) = p.explainer_val(e_prime, a)?;
    let g = match through_explainer_step(p, e, a, &g_eprime, hp)? {
        Some(indirect) => g_direct.axpy(1.0, &indirect),
        None => g_direct,
    };
    Ok((loss, g))
}

/// Audience path, as three vector–Jacobian products from the right:
///
/// ```text
/// v₁ = ∇_{W′} L_aud,val(W′)
/// v₂ = −ξ_W ∇²_{Δ′,W} L_aud(W, Δ′) · v₁        then masked by the clip Jacobian
/// v₃ = +ξ_Δ ∇²_{E′,Δ} O(Δ, E′) · v₂            (ascent step)
/// g  = −ξ_e ∇²_{A,E} L_tr(E, A) · v₃
/// ```
///
/// Returns the audience validation loss at `W′` and `g`.
pub fn hypergrad_audience_path<P: FourLevel>(
    p: &P,
    e: &P::Weights,
    a: &P::Arch,
    e_prime: &P::Weights,
    w: &P::Audience,
    w_prime: &P::Audience,
    expl: &Explanation<P::Expl>,
    hp: &Hyperparams,
) -> Result<(f64, P::Arch)> {
    let (loss, v1) = p.audience_val(w_prime)?;
    let zero = || a.zeros_like();
    let Some(h2) = fd_hvp(|wp: &P::Audience| Ok(p.audience_train(wp, &expl.delta)?.2), w, &v1, hp.alpha_scale)? else {
        return Ok((loss, zero()));
    };
    let v2 = p.clip_pullback(&expl.unclipped, &h2.scale(-hp.xi_w));
    let Some(h3) = fd_hvp(|d: &P::Expl| Ok(p.attack(d, e_prime, a)?.2), &expl.base, &v2, hp.alpha_scale)? else {
        return Ok((loss, zero()));
    };
    let v3 = h3.scale(hp.xi_delta);
    let g = through_explainer_step(p, e, a, &v3, hp)?.unwrap_or_else(zero);
    Ok((loss, g))
}

/// `A − η (g_e + γ g_a)`.
pub fn arch_update<A: VectorSpace>(a: &A, g_explainer: &A, g_audience: &A, eta: f64, gamma: f64) -> A {
    a.axpy(-eta, &g_explainer.axpy(gamma, g_audience))
}

/// Variables that persist across outer iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct LeaseState<A, E, W> {
    pub arch: A,
    pub explainer: E,
    pub audience: W,
    pub iteration: u64,
    /// Stream for the per-iteration explanation initialization.
    pub rng: StreamRng,
}

/// What one outer iteration measured. Audience and attack entries are `None`
/// when the mode skips those stages.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport<X> {
    pub iteration: u64,
    pub explainer_train_loss: f64,
    pub explainer_val_loss: f64,
    pub audience_train_loss: Option<f64>,
    pub audience_val_loss: Option<f64>,
    pub attack_objective: Option<f64>,
    pub attack_trace: Vec<f64>,
    /// The quantity the architecture step descends.
    pub outer_objective: f64,
    /// The clipped explanation `Δ′` of this iteration's batch.
    pub explanation: Option<X>,
}

fn at_iteration<T>(iteration: u64, stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NumericAbort { iteration, quantity: format!("{stage} ({op})") },
        other => other,
    })
}

fn finite(iteration: u64, quantity: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericAbort { iteration, quantity: quantity.into() })
    }
}

/// One outer iteration. The hypergradients are taken at the pre-step `E`
/// and `W`; afterwards `E ← E′`, `W ← W′` and `A` takes its step.
pub fn lease_iteration<P: FourLevel>(
    p: &P,
    state: &mut LeaseState<P::Arch, P::Weights, P::Audience>,
    hp: &Hyperparams,
    mode: Mode,
) -> Result<IterationReport<P::Expl>> {
    let it = state.iteration + 1;
    let (e, a, w) = (&state.explainer, &state.arch, &state.audience);
    let gamma = if mode == Mode::Darts1st { 0.0 } else { hp.gamma };

    let (train_loss, e_prime) = at_iteration(it, "explainer step", virtual_explainer_step(p, e, a, hp.xi_e))?;
    finite(it, "explainer_train_loss", train_loss)?;

    let audience = if mode == Mode::Darts1st {
        None
    } else {
        let delta0 = p.init_explanation(&mut state.rng);
        let expl = at_iteration(it, "explanation step", explain(p, delta0, &e_prime, a, hp))?;
        let (aud_loss, w_prime) = at_iteration(it, "audience step", virtual_audience_step(p, w, &expl.delta, hp.xi_w))?;
        finite(it, "audience_train_loss", aud_loss)?;
        Some((expl, aud_loss, w_prime))
    };

    let (e_val, g_e) = if mode == Mode::AudienceOnly {
        (at_iteration(it, "explainer validation", p.explainer_val(&e_prime, a))?.0, a.zeros_like())
    } else {
        at_iteration(it, "explainer hypergradient", hypergrad_explainer_path(p, e, a, &e_prime, hp))?
    };
    finite(it, "explainer_val_loss", e_val)?;

    let mut report = IterationReport {
        iteration: it,
        explainer_train_loss: train_loss,
        explainer_val_loss: e_val,
        audience_train_loss: None,
        audience_val_loss: None,
        attack_objective: None,
        attack_trace: Vec::new(),
        outer_objective: e_val,
        explanation: None,
    };

    let mut g_a = a.zeros_like();
    let mut w_next = None;
    if let Some((expl, aud_loss, w_prime)) = audience {
        let (a_val, g) = if gamma > 0.0 {
            at_iteration(
                it,
                "audience hypergradient",
                hypergrad_audience_path(p, e, a, &e_prime, w, &w_prime, &expl, hp),
            )?
        } else {
            (at_iteration(it, "audience validation", p.audience_val(&w_prime))?.0, a.zeros_like())
        };
        finite(it, "audience_val_loss", a_val)?;
        let obj = finite(it, "attack_objective", *expl.trace.last().expect("non-empty trace"))?;
        g_a = g;
        report.audience_train_loss = Some(aud_loss);
        report.audience_val_loss = Some(a_val);
        report.attack_objective = Some(obj);
        report.attack_trace = expl.trace;
        report.explanation = Some(expl.delta);
        report.outer_objective = match mode {
            Mode::AudienceOnly => gamma * a_val,
            _ => e_val + gamma * a_val,
        };
        w_next = Some(w_prime);
    }
    finite(it, "outer_objective", report.outer_objective)?;

    let a_next = arch_update(a, &g_e, &g_a, hp.eta, gamma);
    if !a_next.all_finite() {
        return Err(Error::NumericAbort { iteration: it, quantity: "architecture parameters".into() });
    }
    if !e_prime.all_finite() {
        return Err(Error::NumericAbort { iteration: it, quantity: "explainer weights".into() });
    }
    state.arch = a_next;
    state.explainer = e_prime;
    if let Some(wn) = w_next {
        if !wn.all_finite() {
            return Err(Error::NumericAbort { iteration: it, quantity: "audience weights".into() });
        }
        state.audience = wn;
    }
    state.iteration = it;
    Ok(report)
}
