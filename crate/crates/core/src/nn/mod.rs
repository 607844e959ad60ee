//! Differentiable numeric primitives with analytic gradients.

mod encoder;
mod gradcheck;
mod ops;
mod params;

pub use encoder::{
    encoder_layer, encoder_layer_backward, multi_head_attention, multi_head_attention_backward,
    AttentionCache, EncoderLayerCache, EncoderLayerParams, NormPlacement, LN_EPS,
};
pub use gradcheck::{grad_check, grad_check_detailed, GradCheckReport};
pub use ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, log_sum_exp,
    softmax, softmax_backward, LayerNormCache, LayerNormGrads, LinearGrads,
};
pub use params::{Grads, Param, ParamId, ParamSet, INIT_STD};
