//! Network building blocks: convolution, residual block, ConvGRU / ResGRU
//! cells and the sigmoid projection head.

mod conv;
mod gru;
mod params;
mod projection;
mod residual;

pub use conv::Conv2d;
pub use gru::{Gate, GruCell, GruTrace, GruVariant};
pub use params::{fan_in_uniform, ParamId, ParamStore};
pub use projection::ProjectionHead;
pub use residual::{ResidualBlock, LEAKY_SLOPE};

#[cfg(test)]
mod tests;
