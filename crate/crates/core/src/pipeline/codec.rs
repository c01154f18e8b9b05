//! Image <-> latent codecs. The built-in ones stand in for a frozen VAE so
//! everything runs without model weights; a real VAE is reached through the
//! bridge.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bridge::RemoteBackend;
use crate::lattice::LatentGrid;

use super::{PipelineError, Result};

pub trait LatentCodec {
    fn id(&self) -> &str;
    /// Spatial downsampling factor between image and latent.
    fn scale(&self) -> usize;
    fn channels(&self) -> usize;
    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid>;
    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid>;
}

/// Pixels are the latent: `C = 3`, scale 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn id(&self) -> &str {
        "identity"
    }

    fn scale(&self) -> usize {
        1
    }

    fn channels(&self) -> usize {
        3
    }

    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid> {
        Ok(image.clone())
    }

    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        Ok(latent.clone())
    }
}

/// Area-average downsampling by `factor` and nearest-neighbour upsampling.
#[derive(Debug, Clone, Copy)]
pub struct AvgPoolCodec {
    factor: usize,
}

impl AvgPoolCodec {
    pub fn new(factor: usize) -> Self {
        assert!(factor > 0, "pool factor must be positive");
        Self { factor }
    }
}

impl LatentCodec for AvgPoolCodec {
    fn id(&self) -> &str {
        "avgpool-4"
    }

    fn scale(&self) -> usize {
        self.factor
    }

    fn channels(&self) -> usize {
        3
    }

    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid> {
        let f = self.factor;
        let (c, h, w) = image.shape();
        if h % f != 0 || w % f != 0 {
            return Err(PipelineError::Codec(format!("image {h}x{w} is not divisible by pool factor {f}")));
        }
        let norm = 1.0 / (f * f) as f64;
        Ok(LatentGrid::from_fn(c, h / f, w / f, |ch, y, x| {
            let mut acc = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    acc += image.get(ch, y * f + dy, x * f + dx);
                }
            }
            acc * norm
        })?)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        let f = self.factor;
        let (c, h, w) = latent.shape();
        Ok(LatentGrid::from_fn(c, h * f, w * f, |ch, y, x| latent.get(ch, y / f, x / f))?)
    }
}

impl LatentCodec for RemoteBackend {
    fn id(&self) -> &str {
        "bridge"
    }

    fn scale(&self) -> usize {
        self.capabilities().scale as usize
    }

    fn channels(&self) -> usize {
        self.capabilities().latent_channels as usize
    }

    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid> {
        Ok(self.with_session(|s| s.encode(image))?)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        Ok(self.with_session(|s| s.decode(latent))?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodecKind {
    #[default]
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "avgpool-4")]
    AvgPool4,
    /// Encode/decode on a bridge backend.
    #[serde(rename = "bridge")]
    Bridge,
}

impl CodecKind {
    /// The in-process codec for this kind; `None` for [`CodecKind::Bridge`].
    pub fn builtin(self) -> Option<Box<dyn LatentCodec + Send + Sync>> {
        match self {
            CodecKind::Identity => Some(Box::new(IdentityCodec)),
            CodecKind::AvgPool4 => Some(Box::new(AvgPoolCodec::new(4))),
            CodecKind::Bridge => None,
        }
    }
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodecKind::Identity => "identity",
            CodecKind::AvgPool4 => "avgpool-4",
            CodecKind::Bridge => "bridge",
        })
    }
}

impl FromStr for CodecKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CodecKind::Identity),
            "avgpool-4" | "avgpool4" => Ok(CodecKind::AvgPool4),
            "bridge" => Ok(CodecKind::Bridge),
            other => Err(PipelineError::Codec(format!("unknown codec {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let img = LatentGrid::from_fn(3, 5, 7, |c, y, x| (c + y * x) as f64 / 50.0).unwrap();
        let c = IdentityCodec;
        assert_eq!(c.decode(&c.encode(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn avgpool_averages_blocks() {
        let img = LatentGrid::from_fn(3, 8, 8, |c, y, x| (c * 64 + y * 8 + x) as f64).unwrap();
        let codec = AvgPoolCodec::new(4);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.shape(), (3, 2, 2));
        // block (0, 0) of channel 0 holds y*8 + x for y, x < 4: mean 13.5
        assert!((z.get(0, 0, 0) - 13.5).abs() < 1e-12);
        let up = codec.decode(&z).unwrap();
        assert_eq!(up.shape(), img.shape());
        assert_eq!(up.get(1, 5, 6), z.get(1, 1, 1));
        // piecewise-constant images survive the round trip
        let blocks = LatentGrid::from_fn(3, 8, 8, |c, y, x| (c + y / 4 + 2 * (x / 4)) as f64).unwrap();
        assert_eq!(codec.decode(&codec.encode(&blocks).unwrap()).unwrap(), blocks);
        assert!(codec.encode(&LatentGrid::zeros(3, 6, 8).unwrap()).is_err());
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("identity".parse::<CodecKind>().unwrap(), CodecKind::Identity);
        assert_eq!("avgpool-4".parse::<CodecKind>().unwrap(), CodecKind::AvgPool4);
        assert!("vae".parse::<CodecKind>().is_err());
        assert_eq!(CodecKind::AvgPool4.builtin().unwrap().scale(), 4);
        assert!(CodecKind::Bridge.builtin().is_none());
    }
}
