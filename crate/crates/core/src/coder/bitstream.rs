//! The `.orlb` container: a fixed little-endian header followed by the
//! range-coded latent.
//!
//! ```text
//! offset size field
//!      0    4 magic "ORLB"
//!      4    2 version (u16)
//!      6    4 image height (u32)
//!     10    4 image width (u32)
//!     14    4 latent channels (u32)
//!     18    4 latent height (u32)
//!     22    4 latent width (u32)
//!     26    4 symbol range min (i32)
//!     30    4 symbol range max (i32)
//!     34    8 model checksum (u64)
//!     42    4 payload length (u32)
//!     46    n payload
//! ```
//!
//! Latent symbols are serialized channel-major, row-major within a channel.

use std::path::Path;

use super::pmf::{build_pmf_table, DEFAULT_SYMBOL_RANGE};
use super::range::{decode_symbols, encode_symbols};
use crate::codec::ModelParams;
use crate::entropy::quantize_infer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BITSTREAM_MAGIC: &[u8; 4] = b"ORLB";
pub const BITSTREAM_VERSION: u16 = 1;
const HEADER_LEN: usize = 46;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub height: u32,
    pub width: u32,
    pub latent_channels: u32,
    pub latent_height: u32,
    pub latent_width: u32,
    pub v_min: i32,
    pub v_max: i32,
    pub model_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
        for v in [h.height, h.width, h.latent_channels, h.latent_height, h.latent_width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.v_min.to_le_bytes());
        out.extend_from_slice(&h.v_max.to_le_bytes());
        out.extend_from_slice(&h.model_checksum.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Bitstream(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != BITSTREAM_MAGIC {
            return Err(Error::Bitstream("bad magic, not an ORLB file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != BITSTREAM_VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let header = BitstreamHeader {
            height: u32_at(6),
            width: u32_at(10),
            latent_channels: u32_at(14),
            latent_height: u32_at(18),
            latent_width: u32_at(22),
            v_min: u32_at(26) as i32,
            v_max: u32_at(30) as i32,
            model_checksum: u64::from_le_bytes(bytes[34..42].try_into().unwrap()),
        };
        let len = u32_at(42) as usize;
        if bytes.len() != HEADER_LEN + len {
            return Err(Error::Bitstream(format!(
                "payload length field says {len} bytes, file carries {}",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Self {
            header,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    fn pixels(&self) -> f64 {
        f64::from(self.header.height) * f64::from(self.header.width)
    }

    /// Payload bits per image pixel.
    pub fn payload_bpp(&self) -> f64 {
        8.0 * self.payload.len() as f64 / self.pixels()
    }

    /// Whole-file bits per image pixel, header included.
    pub fn total_bpp(&self) -> f64 {
        8.0 * self.total_bytes() as f64 / self.pixels()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Result of coding one image.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub bitstream: Bitstream,
    /// Latent symbols that fell outside the table range.
    pub clamped: usize,
    /// The coded symbols, after clamping.
    pub symbols: Vec<i32>,
}

/// analysis → rounding → range coding of a single `[1,3,H,W]` image.
pub fn encode_image(image: &Tensor, params: &ModelParams) -> Result<EncodedImage> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || c != params.config.input_channels {
        return Err(Error::shape("encode_image", image.shape(), &[1, params.config.input_channels, h, w]));
    }
    params.config.check_extents(h, w)?;
    let latent = quantize_infer(&params.analyze(image)?);
    let (_, m, lh, lw) = latent.dims4()?;
    let (v_min, v_max) = DEFAULT_SYMBOL_RANGE;
    let table = build_pmf_table(&params.entropy_params(), v_min, v_max)?;
    let symbols: Vec<i32> = latent
        .data()
        .iter()
        .map(|&v| v.clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32)
        .collect();
    let coded = encode_symbols(&symbols, &table, lh * lw);
    let symbols = symbols.iter().map(|&s| s.clamp(v_min, v_max)).collect();
    Ok(EncodedImage {
        bitstream: Bitstream {
            header: BitstreamHeader {
                height: h as u32,
                width: w as u32,
                latent_channels: m as u32,
                latent_height: lh as u32,
                latent_width: lw as u32,
                v_min,
                v_max,
                model_checksum: params.checksum(),
            },
            payload: coded.bytes,
        },
        clamped: coded.clamped,
        symbols,
    })
}

/// Latent tensor carried by a bitstream.
pub fn decode_latent(bs: &Bitstream, params: &ModelParams) -> Result<Tensor> {
    let h = &bs.header;
    let found = params.checksum();
    if h.model_checksum != found {
        return Err(Error::Checksum {
            expected: h.model_checksum,
            found,
        });
    }
    let cfg = &params.config;
    cfg.check_extents(h.height as usize, h.width as usize)?;
    let (lh, lw) = cfg.latent_extents(h.height as usize, h.width as usize);
    if (h.latent_channels as usize, h.latent_height as usize, h.latent_width as usize)
        != (cfg.latent_channels, lh, lw)
    {
        return Err(Error::Bitstream(format!(
            "latent extents {}x{}x{} do not match the model ({}x{lh}x{lw})",
            h.latent_channels, h.latent_height, h.latent_width, cfg.latent_channels
        )));
    }
    let table = build_pmf_table(&params.entropy_params(), h.v_min, h.v_max)?;
    let count = cfg.latent_channels * lh * lw;
    let symbols = decode_symbols(&bs.payload, count, &table, lh * lw)?;
    Tensor::new(
        &[1, cfg.latent_channels, lh, lw],
        symbols.into_iter().map(f64::from).collect(),
    )
}

/// range decoding → synthesis → clamp to `[0, 1]`.
pub fn decode_image(bs: &Bitstream, params: &ModelParams) -> Result<Tensor> {
    let latent = decode_latent(bs, params)?;
    Ok(params.synthesize(&latent)?.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ModelConfig;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            hidden_channels: 4,
            latent_channels: 3,
            num_down_layers: 2,
            ..ModelConfig::default()
        };
        ModelParams::init(cfg, 4).unwrap()
    }

    fn image(h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w).map(|i| ((i * 31) % 256) as f64 / 255.0).collect();
        Tensor::new(&[1, 3, h, w], data).unwrap()
    }

    #[test]
    fn round_trip_and_bpp() {
        let params = tiny();
        let enc = encode_image(&image(16, 12), &params).unwrap();
        let bytes = enc.bitstream.to_bytes();
        let parsed = Bitstream::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, enc.bitstream);
        let x_hat = decode_image(&parsed, &params).unwrap();
        assert_eq!(x_hat.shape(), &[1, 3, 16, 12]);
        assert!(x_hat.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bpp = parsed.payload_bpp();
        assert_eq!(bpp, 8.0 * parsed.payload.len() as f64 / 192.0);
        assert!(parsed.total_bpp() > bpp);
    }

    #[test]
    fn bpp_arithmetic() {
        let bs = Bitstream {
            header: BitstreamHeader {
                height: 64,
                width: 64,
                latent_channels: 1,
                latent_height: 4,
                latent_width: 4,
                v_min: -64,
                v_max: 63,
                model_checksum: 0,
            },
            payload: vec![0; 400],
        };
        assert_eq!(bs.payload_bpp(), 0.78125);
    }

    #[test]
    fn wrong_model_is_rejected() {
        let params = tiny();
        let enc = encode_image(&image(8, 8), &params).unwrap();
        let other = ModelParams::init(params.config, 99).unwrap();
        assert!(matches!(decode_image(&enc.bitstream, &other), Err(Error::Checksum { .. })));
    }

    #[test]
    fn rejects_noncompliant_extents() {
        assert!(encode_image(&image(10, 8), &tiny()).is_err());
    }

    #[test]
    fn header_field_corruption_is_detected() {
        let params = tiny();
        let bytes = encode_image(&image(8, 8), &params).unwrap().bitstream.to_bytes();
        // magic, version and checksum bytes
        let fields = (0..6).chain(34..42);
        for byte in fields {
            for bit in 0..8 {
                let mut bad = bytes.clone();
                bad[byte] ^= 1 << bit;
                let rejected = match Bitstream::from_bytes(&bad) {
                    Err(_) => true,
                    Ok(bs) => decode_image(&bs, &params).is_err(),
                };
                assert!(rejected, "flip of bit {bit} in byte {byte} went unnoticed");
            }
        }
    }
}
