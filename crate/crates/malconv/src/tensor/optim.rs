//! SGD with Nesterov momentum and exponential learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::{Array2, Scalar};

/// Optimizer state: one velocity array per parameter array, plus the
/// schedule. Velocities start at zero.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    /// Learning rate currently in effect (after decay).
    pub learning_rate: T,
    /// Initial learning rate the decay schedule is anchored to.
    pub initial_learning_rate: T,
    /// Momentum coefficient in [0, 1).
    pub momentum: T,
    /// Per-epoch exponential decay factor in (0, 1].
    pub decay_factor: T,
    velocity: Vec<Array2<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(
        learning_rate: T,
        momentum: T,
        decay_factor: T,
        param_shapes: &[(usize, usize)],
    ) -> Result<Self> {
        if learning_rate <= T::zero() {
            return Err(Error::Input("learning rate must be positive".into()));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::Input("momentum must be in [0, 1)".into()));
        }
        if decay_factor <= T::zero() || decay_factor > T::one() {
            return Err(Error::Input("decay factor must be in (0, 1]".into()));
        }
        Ok(OptimizerState {
            learning_rate,
            initial_learning_rate: learning_rate,
            momentum,
            decay_factor,
            velocity: param_shapes
                .iter()
                .map(|&(r, c)| Array2::zeros(r, c))
                .collect(),
        })
    }

    pub fn velocity(&self) -> &[Array2<T>] {
        &self.velocity
    }
}

/// One Nesterov step over every parameter array, in order:
///
/// `v <- mu*v + g;  theta <- theta - lr*(g + mu*v)`
///
/// A non-finite gradient anywhere aborts the step before touching any
/// parameter.
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut [&mut Array2<T>],
    grads: &[&Array2<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Input(format!(
            "optimizer given {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.velocity[i]) {
            return Err(Error::Input(format!(
                "optimizer shape mismatch at array {i}: param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        g.ensure_finite("gradient")
            .map_err(|_| Error::Training(format!("non-finite gradient in array {i}; step aborted")))?;
    }
    let mu = state.momentum;
    let lr = state.learning_rate;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for i in 0..g.len() {
            let gi = g.data()[i];
            let vi = mu * v.data()[i] + gi;
            v.data_mut()[i] = vi;
            let pd = &mut p.data_mut()[i];
            *pd = *pd - lr * (gi + mu * vi);
        }
    }
    Ok(())
}

/// Closed-form exponential schedule: `lr = lr0 * decay^epoch`.
pub fn lr_decay<T: Scalar>(state: &mut OptimizerState<T>, epoch: usize) {
    state.learning_rate =
        state.initial_learning_rate * state.decay_factor.powi(epoch as i32);
}
