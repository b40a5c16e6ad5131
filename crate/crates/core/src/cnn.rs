//! Residual convolutional stack producing continuous patch features.

use ashnet_tensor::rng::Rng;
use ashnet_tensor::{Bindings, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const CNN_GROUP: &str = "cnn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub in_channels: usize,
    /// Output channels per block; the last entry is the feature width `M1`.
    pub channels: Vec<usize>,
    /// Convolution stride per block.
    pub strides: Vec<usize>,
    /// Patch side `s`: each `s×s` pixel tile becomes one token.
    pub patch: usize,
}

impl CnnConfig {
    pub fn new(in_channels: usize, m1: usize, patch: usize) -> Self {
        CnnConfig {
            in_channels,
            channels: vec![8, 16, m1],
            strides: vec![2, 2, 1],
            patch,
        }
    }

    pub fn m1(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(CoreError::Config("cnn channels and strides must be non-empty and equal length".into()));
        }
        if self.strides.contains(&0) || self.channels.contains(&0) || self.patch == 0 {
            return Err(CoreError::Config("cnn widths, strides and patch must be positive".into()));
        }
        if !self.patch.is_multiple_of(self.total_stride()) {
            return Err(CoreError::Config(format!(
                "patch {} is not a multiple of the total stride {}",
                self.patch,
                self.total_stride()
            )));
        }
        Ok(())
    }

    /// Patch count `N = (h/s)·(w/s)`, or an error when `s` does not divide.
    pub fn num_patches(&self, h: usize, w: usize) -> Result<usize> {
        if !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) {
            return Err(CoreError::Contract(format!(
                "image {h}×{w} is not divisible by patch size {}",
                self.patch
            )));
        }
        Ok((h / self.patch) * (w / self.patch))
    }
}

struct Block {
    kernel: ParamId,
    bias: ParamId,
    /// Strided 1×1 projection when the block changes shape.
    shortcut: Option<ParamId>,
    stride: usize,
}

pub struct CnnEncoder {
    cfg: CnnConfig,
    blocks: Vec<Block>,
}

impl CnnEncoder {
    pub fn new(store: &mut ParamStore, cfg: CnnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, (&c_out, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            let kernel = store.add(
                format!("cnn.{i}.kernel"),
                CNN_GROUP,
                Tensor::randn(&[c_out, c_in, 3, 3], std, rng),
            );
            let bias = store.add(format!("cnn.{i}.bias"), CNN_GROUP, Tensor::zeros(&[c_out]));
            let shortcut = (c_in != c_out || stride != 1).then(|| {
                store.add(
                    format!("cnn.{i}.shortcut"),
                    CNN_GROUP,
                    Tensor::randn(&[c_out, c_in, 1, 1], (1.0 / c_in as f64).sqrt(), rng),
                )
            });
            blocks.push(Block {
                kernel,
                bias,
                shortcut,
                stride,
            });
            c_in = c_out;
        }
        Ok(CnnEncoder { cfg, blocks })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    /// `[b, c, h, w]` images to `[b, N, M1]` patch features.
    ///
    /// Every block computes `relu(conv3×3(x)) + δ(x)`; the final map is
    /// average-pooled onto the patch grid.
    pub fn encode_concrete<'t>(&self, params: &Bindings<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(CoreError::Contract(format!(
                "cnn input must be [b, {}, h, w], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let n = self.cfg.num_patches(h, w)?;
        let mut x = images;
        for block in &self.blocks {
            let y = x
                .conv2d(params.get(block.kernel), Some(params.get(block.bias)), block.stride, 1)?
                .relu();
            let skip = match block.shortcut {
                Some(k) => x.conv2d(params.get(k), None, block.stride, 0)?,
                None => x,
            };
            x = y.add(skip)?;
        }
        let pooled = x.avg_pool2d(self.cfg.patch / self.cfg.total_stride())?;
        let m1 = self.cfg.m1();
        Ok(pooled.reshape(&[b, m1, n])?.permute(&[0, 2, 1])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ashnet_tensor::gradcheck::{check_gradients, GradCheck};
    use ashnet_tensor::rng::seeded;
    use ashnet_tensor::Tape;

    fn small() -> (ParamStore, CnnEncoder) {
        let mut rng = seeded(20);
        let mut store = ParamStore::new();
        let enc = CnnEncoder::new(&mut store, CnnConfig::new(3, 32, 8), &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn output_shape_and_zero_image() {
        let (store, enc) = small();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let img = tape.constant(&[2, 3, 32, 32], vec![0.0; 2 * 3 * 32 * 32]).unwrap();
        let f = enc.encode_concrete(&p, img).unwrap();
        assert_eq!(f.shape(), vec![2, 16, 32]);
        assert!(f.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let (store, enc) = small();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let img = tape.constant(&[1, 3, 30, 30], vec![0.0; 2700]).unwrap();
        assert!(enc.encode_concrete(&p, img).is_err());
        assert!(CnnConfig::new(3, 8, 6).validate().is_err());
    }

    #[test]
    fn batch_equals_stacked_singles() {
        let (store, enc) = small();
        let mut rng = seeded(21);
        let imgs = Tensor::uniform(&[3, 3, 16, 16], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let joint = enc.encode_concrete(&p, tape.leaf(&imgs)).unwrap().value();
        let per = 3 * 16 * 16;
        let chunk = joint.len() / 3;
        for i in 0..3 {
            let one = tape
                .constant(&[1, 3, 16, 16], imgs.data()[i * per..(i + 1) * per].to_vec())
                .unwrap();
            let single = enc.encode_concrete(&p, one).unwrap().value();
            for (a, b) in single.iter().zip(&joint[i * chunk..(i + 1) * chunk]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn feature_mean_gradient_matches_finite_differences() {
        let (store, enc) = small();
        let mut rng = seeded(22);
        let kernel = store.find("cnn.1.kernel").unwrap();
        for _ in 0..3 {
            let imgs = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
            let k = store.get(kernel).clone();
            let report = check_gradients(&[k, imgs], |tape, v| {
                // The checked kernel stands in for the stored one.
                let p = store.bind_constant(tape);
                let f = encode_with_kernel(&enc, &p, kernel, v[0], v[1])?;
                Ok(f.mean())
            })
            .unwrap();
            assert!(report.passes(GradCheck::DEFAULT_TOL), "{report:?}");
        }
    }

    fn encode_with_kernel<'t>(
        enc: &CnnEncoder,
        p: &Bindings<'t>,
        kernel: ParamId,
        k: Var<'t>,
        imgs: Var<'t>,
    ) -> Result<Var<'t>> {
        let mut x = imgs;
        for block in &enc.blocks {
            let kv = if block.kernel == kernel { k } else { p.get(block.kernel) };
            let y = x.conv2d(kv, Some(p.get(block.bias)), block.stride, 1)?.relu();
            let skip = match block.shortcut {
                Some(s) => x.conv2d(p.get(s), None, block.stride, 0)?,
                None => x,
            };
            x = y.add(skip)?;
        }
        Ok(x.avg_pool2d(enc.cfg.patch / enc.cfg.total_stride())?)
    }
}
