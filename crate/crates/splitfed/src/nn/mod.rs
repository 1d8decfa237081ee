//! Minimal tensor-chain neural network engine: the layer set needed for a
//! 1-D convolutional residual classifier, with reverse-mode gradients.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;

pub use loss::{accuracy, softmax_cross_entropy};
pub use model::{
    backward, forward, ActivationTape, GradientStore, LayerParams, LayerSpec, Mode, ModelGraph,
    ParamCount, ParameterSet, ShapeState,
};
pub use optim::{sgd_step, OptimizerState};
