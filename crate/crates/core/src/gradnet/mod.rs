//! Small feedforward critic/generator networks and the gradient of an
//! unbiased MMD loss between critic features, with finite-difference and
//! Monte Carlo checks.

mod check;
mod loss;
mod net;

pub use check::{
    cosine, finite_diff_check, finite_diff_check_seeded, gradient_unbiasedness_mc, GaussianSampler, GradReport,
    SeededCheck, UnbiasednessConfig, relative_floor, KINK_MARGIN_STEPS, REL_ERR_FLOOR, REL_ERR_SCALE_FLOOR,
};
pub use loss::{mmd_loss, mmd_loss_grad, LossGrad};
pub use net::{net_forward, Layer, NetSpec};
