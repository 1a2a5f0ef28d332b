//! The detector network: convolutional stem, STDA encoder, query decoder
//! with self- and cross-attention, prediction heads, and checkpoint files.

mod attention;
mod checkpoint;
mod config;
mod layers;
mod net;
mod stem;

pub use crate::detection::Detection;
pub use attention::{self_attention, SelfAttention, SelfAttentionCache};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::NetConfig;
pub use layers::{DecoderLayer, DecoderLayerCache, EncoderLayer, EncoderLayerCache, FeedForward};
pub use net::{conv_stem, decoder_forward, encoder_forward, EncoderOutput, Net, NetCache};
pub use stem::{ConvStem, StemCache};

#[cfg(test)]
mod tests;
