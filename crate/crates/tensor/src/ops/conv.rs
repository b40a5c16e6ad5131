use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tape::Var;

/// `floor((size + 2·padding − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit the padded input.
pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (stride > 0 && kernel > 0 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Input offset for (channel, ki, kj, oy, ox), or `None` inside padding.
    fn source(&self, ch: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.padding as isize;
        let x = (ox * self.stride + kj) as isize - self.padding as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then(|| (ch * self.h + y as usize) * self.w + x as usize)
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let positions = self.oh * self.ow;
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row * positions + oy * self.ow + ox] = self
                                .source(ch, ki, kj, oy, ox)
                                .map_or(0.0, |s| image[s]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let positions = self.oh * self.ow;
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(s) = self.source(ch, ki, kj, oy, ox) {
                                image[s] += cols[row * positions + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of `[b×c×h×w]` input with `[o×c×kh×kw]` kernels,
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let (si, sk) = (self.shape(), kernel.shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(TensorError::shape("conv2d", &si, &sk));
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let (Some(oh), Some(ow)) = (
            conv_output_dim(h, kh, stride, padding),
            conv_output_dim(w, kw, stride, padding),
        ) else {
            return Err(TensorError::shape("conv2d", &si, &sk));
        };
        if let Some(bv) = &bias {
            if bv.shape() != [o] {
                return Err(TensorError::shape("conv2d bias", &sk, &bv.shape()));
            }
        }
        let geo = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        };
        let (x, k) = (self.value(), kernel.value());
        let bias_val = bias.map(|v| v.value());
        let (plen, positions) = (geo.patch_len(), oh * ow);
        let mut cols = vec![0.0; b * plen * positions];
        let mut out = vec![0.0; b * o * positions];
        for n in 0..b {
            let col = &mut cols[n * plen * positions..(n + 1) * plen * positions];
            geo.im2col(&x[n * c * h * w..(n + 1) * c * h * w], col);
            let dst = &mut out[n * o * positions..(n + 1) * o * positions];
            gemm(o, plen, positions, &k, false, col, false, 0.0, dst);
            if let Some(bv) = &bias_val {
                for (oc, chunk) in dst.chunks_mut(positions).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        }
        let need_x = self.requires_grad();
        let need_k = kernel.requires_grad();
        let need_b = bias.is_some_and(|v| v.requires_grad());
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self
            .tape()
            .record(&parents, vec![b, o, oh, ow], out, move |g| {
                let mut gx = need_x.then(|| vec![0.0; b * c * h * w]);
                let mut gk = need_k.then(|| vec![0.0; o * plen]);
                let mut gcol = vec![0.0; plen * positions];
                for n in 0..b {
                    let gn = &g[n * o * positions..(n + 1) * o * positions];
                    let col = &cols[n * plen * positions..(n + 1) * plen * positions];
                    if let Some(gk) = gk.as_mut() {
                        gemm(o, positions, plen, gn, false, col, true, 1.0, gk);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(plen, o, positions, &k, true, gn, false, 0.0, &mut gcol);
                        geo.col2im(&gcol, &mut gx[n * c * h * w..(n + 1) * c * h * w]);
                    }
                }
                let mut grads = vec![gx, gk];
                if has_bias {
                    grads.push(need_b.then(|| {
                        let mut gb = vec![0.0; o];
                        for n in 0..b {
                            for (oc, acc) in gb.iter_mut().enumerate() {
                                let start = (n * o + oc) * positions;
                                *acc += g[start..start + positions].iter().sum::<f64>();
                            }
                        }
                        gb
                    }));
                }
                grads
            }))
    }

    /// Non-overlapping `k×k` average pooling of `[b×c×h×w]`.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(TensorError::shape("avg_pool2d", &s, &[k]));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let x = self.value();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; bc * oh * ow];
        for p in 0..bc {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / k) * ow + xx / k] += x[(p * h + y) * w + xx] * inv;
                }
            }
        }
        Ok(self
            .tape()
            .record(&[self], vec![s[0], s[1], oh, ow], out, move |g| {
                let mut gx = vec![0.0; bc * h * w];
                for p in 0..bc {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(p * h + y) * w + xx] = g[(p * oh + y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }))
    }
}
