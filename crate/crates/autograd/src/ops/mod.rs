pub mod conv;
mod elementwise;
pub mod linmap;
mod shape;

pub use conv::{add_channel_bias, conv, conv_input_grad, conv_transpose, conv_weight_grad};
