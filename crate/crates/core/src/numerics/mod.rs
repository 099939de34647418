//! Dense numerical substrate: matrices, MLPs with explicit backprop, Adam,
//! seeded randomness and finite-difference gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod rng;
pub mod vector;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::gradient_check;
pub use matrix::{axpy, dot, Matrix};
pub use mlp::{
    mlp_backward, mlp_backward_with_input, mlp_forward, Activation, Layer, MlpCache,
    MlpGradients, MlpParams, MlpSpec,
};
pub use rng::SeededRng;
pub use vector::{l2_normalize, logsumexp, sigmoid, softmax, softplus};
