// SPDX-License-Identifier: Apache-2.0

//! Minimal dense-tensor engine: tape-based reverse mode, Adam, one-cycle LR.

mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var, BCE_EPS};
pub use optim::{AdamState, OneCycleSchedule, ScheduleError, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{Param, ParamGroup, ParamStore};
pub use real::Real;
pub use tensor::{Tensor, TensorError};
