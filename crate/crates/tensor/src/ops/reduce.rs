use crate::error::{Result, TensorError};
use crate::tape::Var;

impl<'t> Var<'t> {
    pub fn sum(self) -> Var<'t> {
        let n = self.numel();
        let total = self.value().iter().sum();
        self.tape()
            .record(&[self], vec![1], vec![total], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(TensorError::shape("sum_axis", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, v)| *d += v);
            }
        }
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.tape().record(&[self], out_shape, out, move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::shape("mean_axis", &self.shape(), &[axis]))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }
}
