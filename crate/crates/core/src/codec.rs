//! Image ↔ latent codecs. Identity keeps pixel-space diffusion; the pooling
//! codec halves resolution with 2×2 area means and decodes by replication.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LatentTensor, Planes};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    #[default]
    Identity,
    Pool2,
}

impl std::str::FromStr for Codec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Codec::Identity),
            "pool2" => Ok(Codec::Pool2),
            other => Err(Error::InvalidArgument(format!("unknown codec `{other}`"))),
        }
    }
}

impl Codec {
    /// Latent `(h, w)` for an image of `(height, width)`.
    pub fn latent_size(&self, height: usize, width: usize) -> (usize, usize) {
        match self {
            Codec::Identity => (height, width),
            Codec::Pool2 => (height / 2, width / 2),
        }
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<LatentTensor> {
        if !img.is_rgb() {
            return Err(Error::InvalidArgument(format!(
                "encoder expects RGB, got {} channels",
                img.channels()
            )));
        }
        match self {
            Codec::Identity => LatentTensor::from_planes(img.planes().clone()),
            Codec::Pool2 => {
                let (h, w) = (img.height(), img.width());
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::InvalidArgument(format!("pool2 codec needs even size, got {h}x{w}")));
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Planes::filled(3, oh, ow, 0.0);
                for c in 0..3 {
                    for y in 0..oh {
                        for x in 0..ow {
                            let s = img.get(c, 2 * y, 2 * x)
                                + img.get(c, 2 * y, 2 * x + 1)
                                + img.get(c, 2 * y + 1, 2 * x)
                                + img.get(c, 2 * y + 1, 2 * x + 1);
                            out.set(c, y, x, s / 4.0);
                        }
                    }
                }
                LatentTensor::from_planes(out)
            }
        }
    }

    /// Inverse map; output is clipped into `[0, 1]`.
    pub fn decode(&self, z: &LatentTensor, height: usize, width: usize) -> Result<ImageTensor> {
        let expect = self.latent_size(height, width);
        if (z.height(), z.width()) != expect || z.channels() != 3 {
            return Err(Error::shape((3, expect.0, expect.1), z.dims()));
        }
        match self {
            Codec::Identity => ImageTensor::from_planes(z.planes().clone()),
            Codec::Pool2 => {
                let mut out = Planes::filled(3, height, width, 0.0);
                for c in 0..3 {
                    for y in 0..height {
                        for x in 0..width {
                            out.set(c, y, x, z.planes().get(c, y / 2, x / 2));
                        }
                    }
                }
                ImageTensor::from_planes(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img2x2(v: [f64; 4]) -> ImageTensor {
        let mut d = Vec::new();
        for _ in 0..3 {
            d.extend_from_slice(&v);
        }
        ImageTensor::new(3, 2, 2, d).unwrap()
    }

    #[test]
    fn identity_is_bitwise() {
        let img = img2x2([0.1, 0.7, 0.3, 0.9]);
        let z = Codec::Identity.encode(&img).unwrap();
        assert_eq!(z.data(), img.data());
        assert_eq!(Codec::Identity.decode(&z, 2, 2).unwrap(), img);
    }

    #[test]
    fn pooling_means() {
        let z = Codec::Pool2.encode(&img2x2([0.6; 4])).unwrap();
        assert_eq!((z.height(), z.width()), (1, 1));
        assert!((z.data()[0] - 0.6).abs() < 1e-15);
        let z = Codec::Pool2.encode(&img2x2([0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(z.data()[0], 0.5);
    }

    #[test]
    fn decode_clips_and_checks_resolution() {
        let z = LatentTensor::new(3, 1, 1, vec![1.3, -0.2, 0.4]).unwrap();
        let img = Codec::Identity.decode(&z, 1, 1).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.4]);
        assert!(Codec::Identity.decode(&z, 2, 2).is_err());
        assert!(Codec::Pool2.decode(&z, 4, 4).is_err());
    }

    #[test]
    fn rejects_rgba() {
        let img = ImageTensor::filled(4, 2, 2, 0.5);
        assert!(Codec::Identity.encode(&img).is_err());
    }

    proptest! {
        #[test]
        fn pool_round_trip_on_block_constant(vals in proptest::collection::vec(0.0f64..1.0, 12)) {
            // 2x2 latent grid per channel, expanded to 4x4 block-constant image
            let mut d = vec![0.0; 3 * 16];
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        d[c * 16 + y * 4 + x] = vals[c * 4 + (y / 2) * 2 + x / 2];
                    }
                }
            }
            let img = ImageTensor::new(3, 4, 4, d).unwrap();
            let back = Codec::Pool2.decode(&Codec::Pool2.encode(&img).unwrap(), 4, 4).unwrap();
            for (a, b) in back.data().iter().zip(img.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn encode_is_one_lipschitz(a in proptest::collection::vec(0.0f64..1.0, 48),
                                   b in proptest::collection::vec(0.0f64..1.0, 48)) {
            let ia = ImageTensor::new(3, 4, 4, a).unwrap();
            let ib = ImageTensor::new(3, 4, 4, b).unwrap();
            let dimg = ia.data().iter().zip(ib.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            for codec in [Codec::Identity, Codec::Pool2] {
                let za = codec.encode(&ia).unwrap();
                let zb = codec.encode(&ib).unwrap();
                prop_assert!(za.max_abs_diff(&zb) <= dimg + 1e-12);
            }
        }
    }
}
