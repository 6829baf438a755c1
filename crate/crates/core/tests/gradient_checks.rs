//! Finite-difference verification of every differentiable primitive and
//! layer; the driver lives in `common::gradchecks` and is shared with the
//! acceptance suite.

mod common;

use common::gradchecks as gc;

#[test]
fn matmul_gradients() {
    gc::matmul_gradients();
}

#[test]
fn batched_matmul_gradients() {
    gc::batched_matmul_gradients();
}

#[test]
fn elementwise_gradients() {
    gc::elementwise_gradients();
}

#[test]
fn relu_gradient_away_from_kink() {
    gc::relu_gradient_away_from_kink();
}

#[test]
fn log_gradient_on_positive_domain() {
    gc::log_gradient_on_positive_domain();
}

#[test]
fn add_bias_gradients() {
    gc::add_bias_gradients();
}

#[test]
fn reduce_gradients() {
    gc::reduce_gradients();
}

#[test]
fn softmax_gradients() {
    gc::softmax_gradients();
}

#[test]
fn shape_op_gradients() {
    gc::shape_op_gradients();
}

#[test]
fn conv3d_gradients() {
    gc::conv3d_gradients();
}

#[test]
fn deconv3d_gradients() {
    gc::deconv3d_gradients();
}

#[test]
fn batchnorm_gradients_train_and_eval() {
    gc::batchnorm_gradients_train_and_eval();
}

#[test]
fn layernorm_gradients() {
    gc::layernorm_gradients();
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    gc::dropout_gradient_with_fixed_mask();
}

#[test]
fn mha_gradients() {
    gc::mha_gradients();
}

#[test]
fn ffn_gradients() {
    gc::ffn_gradients();
}

#[test]
fn two_stacked_transformer_layers_gradients() {
    gc::two_stacked_transformer_layers_gradients();
}

#[test]
fn dice_loss_gradient_on_toy_volume() {
    gc::dice_loss_gradient_on_toy_volume();
}

#[test]
fn end_to_end_micro_model_gradients() {
    gc::end_to_end_micro_model_gradients();
}
