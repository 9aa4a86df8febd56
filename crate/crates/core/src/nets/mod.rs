//! The learnable networks: sampler, encoder, decoder and critic.

mod critic;
mod decoder;
mod encoder;
mod params;
mod sampler;

pub use critic::{Critic, CRITIC_WIDTH};
pub use decoder::{children, Decoder, DECODER_K, OFFSET_SCALES, OUTPUT_BOUND};
pub use encoder::{stage_sizes, Encoder, EncoderOut, SamplerKind, STAGE_WIDTH};
pub use params::{hex, Bound, Group, Init, Linear, ParamId, ParamSet};
pub use sampler::{significance_select, stage_size, EdgeConv, Sampler, SamplerOut, SIGNIFICANCE_WIDTH};
