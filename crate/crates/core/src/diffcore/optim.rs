use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step-decay learning-rate schedule: at each `(epoch, multiplier)` milestone
/// the rate is multiplied by `multiplier` for that epoch and every later one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl LrSchedule {
    pub fn multiplier(&self, epoch: usize) -> f64 {
        self.0.iter().filter(|(m, _)| *m <= epoch).map(|(_, f)| f).product()
    }
}

/// A parameter paired with a stable name used in error messages.
pub struct NamedParam<'a> {
    pub name: String,
    pub tensor: &'a mut Tensor,
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct OptimState {
    velocity: Vec<Vec<f64>>,
    learning_rate: f64,
    momentum: f64,
    schedule: LrSchedule,
}

impl OptimState {
    /// Zero velocities for parameters of the given sizes.
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        schedule: LrSchedule,
        sizes: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if schedule.0.iter().any(|(_, f)| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::Config("schedule multipliers must be positive".into()));
        }
        Ok(OptimState {
            velocity: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
            learning_rate,
            momentum,
            schedule,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.schedule.multiplier(epoch)
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocity[index]
    }

    /// Applies one update using each parameter's stored gradient.
    ///
    /// Parameters without a gradient (frozen, or unreachable from the loss)
    /// are left untouched, as are their velocities. All gradients are checked
    /// before any parameter is modified.
    pub fn step(&mut self, params: &mut [NamedParam<'_>], epoch: usize) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, {} given",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(&self.velocity) {
            if p.tensor.numel() != v.len() {
                return Err(Error::shape(format!(
                    "parameter {} has {} values, velocity has {}",
                    p.name,
                    p.tensor.numel(),
                    v.len()
                )));
            }
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        let lr = self.lr_at(epoch);
        let mu = self.momentum;
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if !p.tensor.requires_grad() {
                continue;
            }
            let Some(g) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            for ((w, vi), gi) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = mu * *vi + gi;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}
