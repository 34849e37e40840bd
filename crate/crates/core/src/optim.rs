//! Adam with bias-corrected moments and a single global step counter.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    names: Vec<String>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second_moment
    }
}

pub fn adam_init<P: ParamSet + ?Sized>(params: &P) -> AdamState {
    let params = params.params();
    let zeros = |t: &Tensor| Tensor::zeros(t.dims()).expect("parameter shapes are valid");
    AdamState {
        step: 0,
        names: params.iter().map(|(n, _)| n.to_string()).collect(),
        first_moment: params.iter().map(|(_, t)| zeros(t)).collect(),
        second_moment: params.iter().map(|(_, t)| zeros(t)).collect(),
    }
}

/// One Adam update of every parameter:
///
/// ```text
/// m ← β₁m + (1-β₁)g        m̂ = m / (1-β₁ᵗ)
/// v ← β₂v + (1-β₂)g²       v̂ = v / (1-β₂ᵗ)
/// θ ← θ - α m̂ / (√v̂ + ε)
/// ```
///
/// All gradients are validated before anything is modified; a non-finite
/// gradient rejects the whole step.
pub fn adam_step<P, G>(params: &mut P, grads: &G, state: &mut AdamState, cfg: &AdamConfig) -> Result<()>
where
    P: ParamSet + ?Sized,
    G: ParamSet + ?Sized,
{
    cfg.validate()?;
    let grads = grads.params();
    let mut params = params.params_mut();
    if params.len() != state.names.len() || grads.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, got {} parameters and {} gradients",
            state.names.len(),
            params.len(),
            grads.len()
        )));
    }
    for (((name, p), (gname, g)), (sname, m)) in
        params.iter().zip(&grads).zip(state.names.iter().zip(&state.first_moment))
    {
        if name != gname || *name != sname.as_str() {
            return Err(Error::State(format!(
                "parameter order mismatch: `{name}` / gradient `{gname}` / state `{sname}`"
            )));
        }
        if p.dims() != g.dims() || p.dims() != m.dims() {
            return Err(Error::Shape(format!(
                "`{name}`: parameter {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }

    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let correction1 = 1.0 - cfg.beta1.powi(t);
    let correction2 = 1.0 - cfg.beta2.powi(t);
    for (((_, p), (_, g)), (m, v)) in
        params.iter_mut().zip(&grads).zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for (((theta, &grad), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// An ad-hoc named tensor list, handy for optimizing things that are not a
/// [`crate::model::ModelParams`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NamedTensors(pub Vec<(String, Tensor)>);

impl ParamSet for NamedTensors {
    fn params(&self) -> Vec<(&str, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor)> {
        self.0.iter_mut().map(|(n, t)| (n.as_str(), t)).collect()
    }
}
