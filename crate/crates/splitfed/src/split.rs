//! Partitioning a layer chain into a client front and server tail, and the
//! split forward/backward handshake across the cut.
//!
//! The server side only ever sees `CutActivation` values; raw inputs stay
//! on the client by construction.

use crate::error::{Error, Result};
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::model::{
    backward, forward, ActivationTape, GradientStore, LayerSpec, Mode, ModelGraph, ParameterSet,
};
use crate::tensor::{Scalar, Tensor};

/// Cut-layer activation crossing the client -> server link.
#[derive(Debug, Clone, PartialEq)]
pub struct CutActivation<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub round: u32,
    pub client_id: u32,
}

/// Gradient of the loss w.r.t. a cut activation, server -> client.
#[derive(Debug, Clone, PartialEq)]
pub struct CutGradient<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub round: u32,
    pub client_id: u32,
}

/// A model partitioned at `cut_index`: layers `[0, cut)` on the client,
/// `[cut, N)` on the server.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub client_graph: ModelGraph,
    pub server_graph: ModelGraph,
    pub cut_index: usize,
}

/// Cuts the chain. The cut must lie in `[1, N-1]` and outside any residual
/// block.
pub fn split_at(model: &ModelGraph, cut_index: usize) -> Result<SplitModel> {
    let n = model.num_layers();
    if cut_index == 0 || cut_index >= n {
        return Err(Error::InvalidArgument(format!(
            "cut index {cut_index} out of range [1, {}]",
            n.saturating_sub(1)
        )));
    }
    let mut depth = 0usize;
    for layer in &model.layers()[..cut_index] {
        match layer {
            LayerSpec::ResidualStart => depth += 1,
            LayerSpec::ResidualEnd => depth -= 1,
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::InvalidArgument(format!(
            "cut index {cut_index} falls inside a residual block"
        )));
    }
    let (client_graph, server_graph) = model.sub_graphs(cut_index)?;
    Ok(SplitModel {
        client_graph,
        server_graph,
        cut_index,
    })
}

impl SplitModel {
    /// Client-side forward in train mode: runs the front layers and emits
    /// the cut activation.
    pub fn client_forward<T: Scalar>(
        &self,
        client_params: &mut ParameterSet<T>,
        batch: &Tensor<T>,
        round: u32,
        client_id: u32,
    ) -> Result<(ActivationTape<T>, CutActivation<T>)> {
        let (tape, out) = forward(&self.client_graph, client_params, batch, Mode::Train)?;
        Ok((
            tape,
            CutActivation {
                tensor: out,
                round,
                client_id,
            },
        ))
    }

    /// Server-side step: forward through the tail, cross-entropy against the
    /// labels, backward for the tail parameters and the cut activation.
    pub fn server_step<T: Scalar>(
        &self,
        server_params: &mut ParameterSet<T>,
        act: &CutActivation<T>,
        labels: &[usize],
    ) -> Result<(T, GradientStore<T>, CutGradient<T>)> {
        let (tape, logits) = forward(&self.server_graph, server_params, &act.tensor, Mode::Train)?;
        let (loss, loss_grad) = softmax_cross_entropy(&logits, labels)?;
        let (grads, input_grad) = backward(&self.server_graph, server_params, &tape, &loss_grad)?;
        Ok((
            loss,
            grads,
            CutGradient {
                tensor: input_grad,
                round: act.round,
                client_id: act.client_id,
            },
        ))
    }

    /// Client-side backward: propagates the cut gradient through the front.
    pub fn client_backward<T: Scalar>(
        &self,
        client_params: &ParameterSet<T>,
        tape: &ActivationTape<T>,
        cut_grad: &CutGradient<T>,
    ) -> Result<GradientStore<T>> {
        if cut_grad.tensor.shape() != tape.output_shape() {
            return Err(Error::ShapeMismatch(format!(
                "cut gradient shape {:?} vs cut activation shape {:?}",
                cut_grad.tensor.shape(),
                tape.output_shape()
            )));
        }
        let (grads, _) = backward(&self.client_graph, client_params, tape, &cut_grad.tensor)?;
        Ok(grads)
    }

    /// Eval-mode forward through front and tail composed.
    pub fn forward_eval<T: Scalar>(
        &self,
        client_params: &mut ParameterSet<T>,
        server_params: &mut ParameterSet<T>,
        batch: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (_, cut) = forward(&self.client_graph, client_params, batch, Mode::Eval)?;
        let (_, out) = forward(&self.server_graph, server_params, &cut, Mode::Eval)?;
        Ok(out)
    }
}
