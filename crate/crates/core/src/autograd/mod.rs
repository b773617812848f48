//! Dense f64 tensors, a reverse-mode tape and an Adagrad optimizer.

mod adagrad;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use adagrad::{AdagradState, LrSchedule};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP, REL_ERROR_FLOOR};
pub(crate) use graph::{scalar_sigmoid, scalar_softplus};
pub use graph::{Graph, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

use rand::Rng;

use crate::error::Result;

/// Affine layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::glorot(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}
