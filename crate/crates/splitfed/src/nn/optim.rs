//! Plain SGD with optional momentum: `v <- mu*v + g; w <- w - lr*v`.

use crate::error::{Error, Result};
use crate::nn::model::{GradientStore, ParameterSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: GradientStore<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>, learning_rate: T, momentum: T) -> Result<Self> {
        if learning_rate <= T::zero() {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".to_string(),
            ));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::InvalidArgument(
                "momentum must be in [0, 1)".to_string(),
            ));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: GradientStore::zeros_like(params),
        })
    }

    pub fn velocity(&self) -> &GradientStore<T> {
        &self.velocity
    }
}

pub fn sgd_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &GradientStore<T>,
    opt: &mut OptimizerState<T>,
) -> Result<()> {
    let mut ws = params.trainable_mut();
    let gs = grads.tensors();
    let mut vs = opt.velocity.tensors_mut();
    if ws.len() != gs.len() || ws.len() != vs.len() {
        return Err(Error::ShapeMismatch(
            "parameter/gradient/velocity tensor counts differ".to_string(),
        ));
    }
    for ((w, g), v) in ws.iter_mut().zip(gs).zip(vs.iter_mut()) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "sgd_step shapes: param {:?}, grad {:?}, velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
        apply(w, g, v, opt.learning_rate, opt.momentum);
    }
    Ok(())
}

fn apply<T: Scalar>(w: &mut Tensor<T>, g: &Tensor<T>, v: &mut Tensor<T>, lr: T, mu: T) {
    for ((wv, &gv), vv) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(v.data_mut().iter_mut())
    {
        *vv = mu * *vv + gv;
        *wv = *wv - lr * *vv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{LayerSpec, ModelGraph};

    fn one_param_setup(w0: f32) -> (ModelGraph, ParameterSet<f32>) {
        let graph = ModelGraph::new(
            vec![LayerSpec::Dense {
                inputs: 1,
                outputs: 1,
            }],
            vec![1],
        )
        .unwrap();
        let mut params = graph.init_params::<f32>(0);
        params.trainable_mut()[0].data_mut()[0] = w0;
        (graph, params)
    }

    fn grad_of(params: &ParameterSet<f32>, g: f32) -> GradientStore<f32> {
        let mut grads = GradientStore::zeros_like(params);
        grads.tensors_mut()[0].data_mut()[0] = g;
        grads
    }

    #[test]
    fn vanilla_step() {
        let (_, mut params) = one_param_setup(1.0);
        let grads = grad_of(&params, 2.0);
        let mut opt = OptimizerState::new(&params, 0.1, 0.0).unwrap();
        sgd_step(&mut params, &grads, &mut opt).unwrap();
        assert!((params.trainable()[0].1.data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps_hand_derived() {
        // lr=0.1, mu=0.9, g=1 both steps, w0=1: w1=0.9 (v=1); v2=1.9, w2=0.71
        let (_, mut params) = one_param_setup(1.0);
        let grads = grad_of(&params, 1.0);
        let mut opt = OptimizerState::new(&params, 0.1, 0.9).unwrap();
        sgd_step(&mut params, &grads, &mut opt).unwrap();
        assert!((params.trainable()[0].1.data()[0] - 0.9).abs() < 1e-7);
        sgd_step(&mut params, &grads, &mut opt).unwrap();
        assert!((params.trainable()[0].1.data()[0] - 0.71).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (_, mut params) = one_param_setup(1.5);
        let grads = grad_of(&params, 0.0);
        let mut opt = OptimizerState::new(&params, 0.1, 0.9).unwrap();
        sgd_step(&mut params, &grads, &mut opt).unwrap();
        assert_eq!(params.trainable()[0].1.data()[0], 1.5);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let (_, params) = one_param_setup(1.0);
        assert!(OptimizerState::new(&params, 0.0, 0.0).is_err());
        assert!(OptimizerState::new(&params, 0.1, 1.0).is_err());
        assert!(OptimizerState::new(&params, 0.1, -0.1).is_err());
    }
}
