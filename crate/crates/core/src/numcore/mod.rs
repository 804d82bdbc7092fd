//! Tensor arithmetic, layers with explicit backward passes, and SGD.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use gradcheck::finite_diff_grad;
pub use layers::{
    leaky_relu, leaky_relu_backward, mse_loss, relu, relu_backward, softmax, softmax_xent,
    softmax_xent_soft, Conv2dGrads, Conv2dLayer, DenseGrads, DenseLayer,
};
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use tensor::Tensor;
