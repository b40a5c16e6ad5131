use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tape::Var;

impl<'t> Var<'t> {
    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().record(&[self, other], vec![m, n], c, move |g| {
            let ga = need_a.then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, &b, true, 0.0, &mut ga);
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &a, true, g, false, 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Batched product `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shape("bmm", &sa, &sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (a, b) = (self.value(), other.value());
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().record(&[self, other], vec![bs, m, n], c, move |g| {
            let ga = need_a.then(|| {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &b[i * k * n..(i + 1) * k * n],
                        true,
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        0.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        let r = s.len();
        if r != 2 && r != 3 {
            return Err(TensorError::shape("transpose", &s, &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Adds a length-`n` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let n = *s.last().unwrap_or(&0);
        if bias.shape() != [n] {
            return Err(TensorError::shape("add_bias", &s, &bias.shape()));
        }
        let (x, b) = (self.value(), bias.value());
        let value: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let need_b = bias.requires_grad();
        Ok(self.tape().record(&[self, bias], s, value, move |g| {
            let gb = need_b.then(|| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                gb
            });
            vec![Some(g.to_vec()), gb]
        }))
    }

    /// `x·w + b` over the last axis of `x`, any leading shape.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let s = self.shape();
        let ws = weight.shape();
        if ws.len() != 2 || s.last() != Some(&ws[0]) {
            return Err(TensorError::shape("linear", &s, &ws));
        }
        let rows = self.numel() / ws[0];
        let y = self.reshape(&[rows, ws[0]])?.matmul(weight)?;
        let y = match bias {
            Some(b) => y.add_bias(b)?,
            None => y,
        };
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = ws[1];
        y.reshape(&out_shape)
    }
}
