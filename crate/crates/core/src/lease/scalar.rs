use crate::error::Result;
use crate::random::StreamRng;

use super::FourLevel;

/// A one-dimensional four-level problem whose every level is affine or
/// quadratic, so each derivative in the chain is a known constant:
///
/// ```text
/// L_tr(E, A)     = ½ (E − c·A)²
/// L_val(E, A)    = ½ (E − e_val)² + ½ r·A²
/// O(Δ, E)        = b·Δ·E − ½ Δ²
/// L_aud(W, Δ)    = ½ (W − d·Δ)²
/// L_aud,val(W)   = ½ (W − t)²
/// ```
///
/// The explanation box is `[−eps, eps]`; the initial explanation is
/// `delta0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarChain {
    pub c: f64,
    pub e_val: f64,
    pub r: f64,
    pub b: f64,
    pub d: f64,
    pub t: f64,
    pub eps: f64,
    pub delta0: f64,
}

impl FourLevel for ScalarChain {
    type Arch = f64;
    type Weights = f64;
    type Expl = f64;
    type Audience = f64;

    fn explainer_train(&self, e: &f64, a: &f64) -> Result<(f64, f64, f64)> {
        let res = e - self.c * a;
        Ok((0.5 * res * res, res, -self.c * res))
    }

    fn explainer_val(&self, e: &f64, a: &f64) -> Result<(f64, f64, f64)> {
        let res = e - self.e_val;
        Ok((0.5 * res * res + 0.5 * self.r * a * a, res, self.r * a))
    }

    fn attack(&self, delta: &f64, e: &f64, _a: &f64) -> Result<(f64, f64, f64)> {
        Ok((self.b * delta * e - 0.5 * delta * delta, self.b * e - delta, self.b * delta))
    }

    fn attack_value(&self, delta: &f64, e: &f64, a: &f64) -> Result<f64> {
        Ok(self.attack(delta, e, a)?.0)
    }

    fn audience_train(&self, w: &f64, delta: &f64) -> Result<(f64, f64, f64)> {
        let res = w - self.d * delta;
        Ok((0.5 * res * res, res, -self.d * res))
    }

    fn audience_val(&self, w: &f64) -> Result<(f64, f64)> {
        let res = w - self.t;
        Ok((0.5 * res * res, res))
    }

    fn init_explanation(&self, _rng: &mut StreamRng) -> f64 {
        self.delta0
    }

    fn clip(&self, delta: &f64) -> f64 {
        delta.clamp(-self.eps, self.eps)
    }

    fn clip_pullback(&self, unclipped: &f64, v: &f64) -> f64 {
        if unclipped.abs() < self.eps {
            *v
        } else {
            0.0
        }
    }
}
