//! Encoder-decoder that predicts the two parameter maps and the initial
//! level set from an image.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use network::{
    init_params, lambda_from_raw, predictor_backward, predictor_forward, sigmoid, softplus, Descriptor,
    ForwardCache, Gradients, Mode, OutputGrad, ParamTensor, PredictorOutput, PredictorParams,
};
pub use tensor::Tensor;
