//! Dense feed-forward networks over a flat parameter vector.

mod arch;
mod grad;
mod network;

pub use arch::{Activation, ArchitectureSpec, LayerLayout, ParamCoord, ParamKind, Parameterization};
pub use grad::{finite_difference_grad, grad_logdensity, FnObjective, GradientRequest, Objective};
pub use network::{pre_activations, ForwardTrace, Network};

pub(crate) use arch::sigmoid;
