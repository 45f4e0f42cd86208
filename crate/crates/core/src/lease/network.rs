use crate::autodiff::Graph;
use crate::data::Batch;
use crate::error::Result;
use crate::explain::{attack_objective_graph, reweigh_graph, ReweighMode};
use crate::nn::{
    audience_forward, explainer_forward, one_hot, softmax_cross_entropy, AudienceSpec, AudienceWeights,
    ExplainerSpec, ExplainerWeights,
};
use crate::random::{uniform_tensor, StreamRng};
use crate::searchspace::{ArchParams, CellArch};
use crate::tensor::Tensor;

use super::{FourLevel, LeaseState};

pub type NetworkState = LeaseState<ArchParams, ExplainerWeights, AudienceWeights>;

/// The explainer/audience problem on one iteration's four batches.
/// Explanations are computed for the audience training batch.
pub struct NetworkProblem<'a> {
    pub explainer: &'a ExplainerSpec,
    pub audience: &'a AudienceSpec,
    pub e_train: &'a Batch,
    pub e_val: &'a Batch,
    pub a_train: &'a Batch,
    pub a_val: &'a Batch,
    pub reweigh: ReweighMode,
    pub eps: f64,
}

impl NetworkProblem<'_> {
    fn explainer_loss(&self, batch: &Batch, e: &ExplainerWeights, a: &ArchParams) -> Result<(f64, ExplainerWeights, ArchParams)> {
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone())?;
        let bound = e.bind(&mut g, true)?;
        let av = g.leaf(a.tensor().clone())?;
        let logits = explainer_forward(&mut g, x, &bound, self.explainer, CellArch::Mixed(av))?;
        let t = g.constant(one_hot(&batch.labels, self.explainer.classes))?;
        let loss = softmax_cross_entropy(&mut g, logits, t)?;
        let grads = g.backward(loss)?;
        Ok((
            g.value(loss).item(),
            ExplainerWeights(bound.grads(&g, &grads)),
            ArchParams(grads.wrt(&g, av)),
        ))
    }
}

impl FourLevel for NetworkProblem<'_> {
    type Arch = ArchParams;
    type Weights = ExplainerWeights;
    type Expl = Tensor;
    type Audience = AudienceWeights;

    fn explainer_train(&self, e: &ExplainerWeights, a: &ArchParams) -> Result<(f64, ExplainerWeights, ArchParams)> {
        self.explainer_loss(self.e_train, e, a)
    }

    fn explainer_val(&self, e: &ExplainerWeights, a: &ArchParams) -> Result<(f64, ExplainerWeights, ArchParams)> {
        self.explainer_loss(self.e_val, e, a)
    }

    fn attack(&self, delta: &Tensor, e: &ExplainerWeights, a: &ArchParams) -> Result<(f64, Tensor, ExplainerWeights)> {
        let mut g = Graph::new();
        let x = g.constant(self.a_train.x.clone())?;
        let dv = g.leaf(delta.clone())?;
        let bound = e.bind(&mut g, true)?;
        let av = g.constant(a.tensor().clone())?;
        let obj = attack_objective_graph(&mut g, x, dv, &bound, self.explainer, CellArch::Mixed(av))?;
        let grads = g.backward(obj)?;
        Ok((g.value(obj).item(), grads.wrt(&g, dv), ExplainerWeights(bound.grads(&g, &grads))))
    }

    fn attack_value(&self, delta: &Tensor, e: &ExplainerWeights, a: &ArchParams) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(self.a_train.x.clone())?;
        let dv = g.constant(delta.clone())?;
        let bound = e.bind(&mut g, false)?;
        let av = g.constant(a.tensor().clone())?;
        let obj = attack_objective_graph(&mut g, x, dv, &bound, self.explainer, CellArch::Mixed(av))?;
        Ok(g.value(obj).item())
    }

    fn audience_train(&self, w: &AudienceWeights, delta: &Tensor) -> Result<(f64, AudienceWeights, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(self.a_train.x.clone())?;
        let dv = g.leaf(delta.clone())?;
        let input = reweigh_graph(&mut g, x, dv, self.reweigh)?;
        let bound = w.bind(&mut g, true)?;
        let logits = audience_forward(&mut g, input, &bound, self.audience)?;
        let t = g.constant(one_hot(&self.a_train.labels, self.audience.classes))?;
        let loss = softmax_cross_entropy(&mut g, logits, t)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), AudienceWeights(bound.grads(&g, &grads)), grads.wrt(&g, dv)))
    }

    fn audience_val(&self, w: &AudienceWeights) -> Result<(f64, AudienceWeights)> {
        let mut g = Graph::new();
        let x = g.constant(self.a_val.x.clone())?;
        let bound = w.bind(&mut g, true)?;
        let logits = audience_forward(&mut g, x, &bound, self.audience)?;
        let t = g.constant(one_hot(&self.a_val.labels, self.audience.classes))?;
        let loss = softmax_cross_entropy(&mut g, logits, t)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), AudienceWeights(bound.grads(&g, &grads))))
    }

    fn init_explanation(&self, rng: &mut StreamRng) -> Tensor {
        let r = 0.01 * self.eps;
        uniform_tensor(rng, self.a_train.x.shape(), -r, r)
    }

    fn clip(&self, delta: &Tensor) -> Tensor {
        let eps = self.eps;
        delta.map(|d| d.clamp(-eps, eps))
    }

    fn clip_pullback(&self, unclipped: &Tensor, v: &Tensor) -> Tensor {
        let eps = self.eps;
        unclipped
            .zip_map(v, |u, g| if u.abs() < eps { g } else { 0.0 })
            .expect("explanation and cotangent share a shape")
    }
}
