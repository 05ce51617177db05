//! Entropy coding of quantized latents into `.orlb` bitstreams.

mod bitstream;
mod pmf;
mod range;

pub use bitstream::{decode_image, decode_latent, encode_image, Bitstream, BitstreamHeader, EncodedImage, BITSTREAM_MAGIC, BITSTREAM_VERSION};
pub use pmf::{build_pmf_table, quantize_frequencies, ChannelPmf, PmfTable, DEFAULT_SYMBOL_RANGE, FREQ_BITS, FREQ_TOTAL};
pub use range::{decode_symbols, encode_symbols, EncodedPayload, RangeDecoder, RangeEncoder};
