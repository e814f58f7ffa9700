//! Frozen feature extractor: a seeded linear patch embedding followed by
//! average pooling over the token grid and per-channel standardization.
//!
//! This stands in for a pre-trained CNN backbone. Tokens depend only on the
//! pixels of their own window, and the weights never change after
//! construction; standardization statistics are fit once on training images.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{Rng, Stream};
use crate::scalar::Scalar;
use crate::synthgen::RgbImage;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BackboneError {
    #[error("image {width}x{height} not divisible by patch*pool = {cell}")]
    Indivisible {
        width: usize,
        height: usize,
        cell: usize,
    },
    #[error("no images to fit standardization")]
    Empty,
    #[error("bad backbone parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch: usize,
    pub pool: usize,
    pub out_dim: usize,
}

/// Features of one image: `tokens x dim`, tokens in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Flattened `N x d0` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.tokens(), self.dim],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("feature map shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    /// `(3 * patch * patch) x out_dim`.
    weight: Vec<f32>,
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Self {
        let fan_in = 3 * cfg.patch * cfg.patch;
        let mut rng = Rng::new(seed, Stream::Backbone);
        let w: Tensor<f32> = crate::params::trunc_normal(
            &[fan_in, cfg.out_dim],
            1.0 / (fan_in as f64).sqrt(),
            &mut rng,
        );
        Self {
            cfg,
            weight: w.into_data(),
            mean: vec![0.0; cfg.out_dim],
            std: vec![1.0; cfg.out_dim],
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Raw parts for checkpointing: weight, mean, std.
    pub fn parts(&self) -> (&[f32], &[f32], &[f32]) {
        (&self.weight, &self.mean, &self.std)
    }

    pub fn from_parts(
        cfg: BackboneConfig,
        weight: Vec<f32>,
        mean: Vec<f32>,
        std: Vec<f32>,
    ) -> Result<Self, BackboneError> {
        let fan_in = 3 * cfg.patch * cfg.patch;
        if weight.len() != fan_in * cfg.out_dim || mean.len() != cfg.out_dim || std.len() != cfg.out_dim {
            return Err(BackboneError::BadParams("length mismatch".into()));
        }
        Ok(Self {
            cfg,
            weight,
            mean,
            std,
        })
    }

    pub fn grid(&self, width: usize, height: usize) -> Result<(usize, usize), BackboneError> {
        let cell = self.cfg.patch * self.cfg.pool;
        if cell == 0 || width % cell != 0 || height % cell != 0 {
            return Err(BackboneError::Indivisible {
                width,
                height,
                cell,
            });
        }
        Ok((height / cell, width / cell))
    }

    /// Unstandardized features.
    pub fn extract_raw(&self, img: &RgbImage) -> Result<FeatureMap, BackboneError> {
        let (gh, gw) = self.grid(img.width, img.height)?;
        let p = self.cfg.patch;
        let (ph, pw) = (img.height / p, img.width / p);
        let d = self.cfg.out_dim;
        let fan_in = 3 * p * p;
        // Patch embeddings on the fine grid.
        let mut fine = vec![0f32; ph * pw * d];
        let mut patch = vec![0f32; fan_in];
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..p {
                    for dx in 0..p {
                        let c = img.get(px * p + dx, py * p + dy);
                        for ch in 0..3 {
                            patch[(dy * p + dx) * 3 + ch] = c[ch] as f32 / 255.0;
                        }
                    }
                }
                let out = &mut fine[(py * pw + px) * d..(py * pw + px + 1) * d];
                for (k, &v) in patch.iter().enumerate() {
                    let wrow = &self.weight[k * d..(k + 1) * d];
                    for (o, &w) in out.iter_mut().zip(wrow) {
                        *o += v * w;
                    }
                }
            }
        }
        let pool = self.cfg.pool;
        let inv = 1.0 / (pool * pool) as f32;
        let mut data = vec![0f32; gh * gw * d];
        for ty in 0..gh {
            for tx in 0..gw {
                let out = &mut data[(ty * gw + tx) * d..(ty * gw + tx + 1) * d];
                for sy in 0..pool {
                    for sx in 0..pool {
                        let f = (ty * pool + sy) * pw + tx * pool + sx;
                        for (o, &v) in out.iter_mut().zip(&fine[f * d..(f + 1) * d]) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
        Ok(FeatureMap {
            grid_h: gh,
            grid_w: gw,
            dim: d,
            data,
        })
    }

    /// Fits per-channel mean and (population) standard deviation over all
    /// tokens of `images`.
    pub fn fit_standardization(&mut self, images: &[&RgbImage]) -> Result<(), BackboneError> {
        if images.is_empty() {
            return Err(BackboneError::Empty);
        }
        let d = self.cfg.out_dim;
        let mut sum = vec![0f64; d];
        let mut sq = vec![0f64; d];
        let mut n = 0usize;
        for img in images {
            let f = self.extract_raw(img)?;
            for t in 0..f.tokens() {
                for (j, &v) in f.token(t).iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        for j in 0..d {
            let m = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - m * m).max(0.0);
            self.mean[j] = m as f32;
            self.std[j] = var.sqrt().max(1e-6) as f32;
        }
        Ok(())
    }

    /// Standardized features `h0`.
    pub fn extract(&self, img: &RgbImage) -> Result<FeatureMap, BackboneError> {
        let mut f = self.extract_raw(img)?;
        let d = f.dim;
        for (i, v) in f.data.iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(f)
    }

    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.weight, &self.mean, &self.std] {
            for v in part.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb() -> Backbone {
        Backbone::new(
            BackboneConfig {
                patch: 4,
                pool: 1,
                out_dim: 64,
            },
            0,
        )
    }

    #[test]
    fn shape_arithmetic() {
        let img = RgbImage::filled(32, 32, [10, 20, 30]);
        let f = bb().extract_raw(&img).unwrap();
        assert_eq!((f.dim, f.grid_h, f.grid_w, f.tokens()), (64, 8, 8, 64));
        let pooled = Backbone::new(
            BackboneConfig {
                patch: 4,
                pool: 2,
                out_dim: 16,
            },
            0,
        );
        assert_eq!(pooled.extract_raw(&img).unwrap().tokens(), 16);
    }

    #[test]
    fn zero_image_gives_equal_tokens() {
        let img = RgbImage::filled(32, 32, [0, 0, 0]);
        let f = bb().extract_raw(&img).unwrap();
        for t in 1..f.tokens() {
            assert_eq!(f.token(t), f.token(0));
        }
    }

    #[test]
    fn locality() {
        let a = RgbImage::filled(32, 32, [40, 40, 40]);
        let mut b = a.clone();
        b.set(13, 6, [255, 0, 0]);
        let (fa, fb) = (bb().extract_raw(&a).unwrap(), bb().extract_raw(&b).unwrap());
        let changed: Vec<usize> = (0..64).filter(|&t| fa.token(t) != fb.token(t)).collect();
        assert_eq!(changed, vec![8 + 3]);
    }

    #[test]
    fn indivisible() {
        let img = RgbImage::filled(30, 32, [0, 0, 0]);
        assert!(matches!(
            bb().extract_raw(&img),
            Err(BackboneError::Indivisible { .. })
        ));
    }

    #[test]
    fn standardization_centers_channels() {
        let imgs: Vec<RgbImage> = (0..4)
            .map(|i| {
                let mut im = RgbImage::filled(32, 32, [20, 20, 20]);
                im.set(i * 5, i * 3, [200, 100, 0]);
                im
            })
            .collect();
        let mut b = bb();
        let h0 = b.hash_hex();
        b.fit_standardization(&imgs.iter().collect::<Vec<_>>()).unwrap();
        assert_ne!(h0, b.hash_hex());
        let mut mean = vec![0f64; 64];
        for im in &imgs {
            let f = b.extract(im).unwrap();
            for t in 0..64 {
                for j in 0..64 {
                    mean[j] += f.token(t)[j] as f64;
                }
            }
        }
        assert!(mean.iter().all(|m| (m / 256.0).abs() < 1e-4));
    }
}
