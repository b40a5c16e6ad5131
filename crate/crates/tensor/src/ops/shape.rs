use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::numel;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `x` into the layout given by `axes`; `out[i] = x[src[i]]`.
fn permutation_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n = numel(shape);
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        src.push(
            idx.iter()
                .zip(axes)
                .map(|(&i, &a)| i * in_strides[a])
                .sum(),
        );
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    src
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::shape("reshape", &self.shape(), shape));
        }
        let value = self.value().as_ref().clone();
        Ok(self
            .tape()
            .record(&[self], shape.to_vec(), value, |g| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::shape("permute", &s, axes));
        }
        let src = permutation_index(&s, axes);
        let x = self.value();
        let value: Vec<f64> = src.iter().map(|&i| x[i]).collect();
        let out_shape = axes.iter().map(|&a| s[a]).collect();
        Ok(self.tape().record(&[self], out_shape, value, move |g| {
            let mut gx = vec![0.0; g.len()];
            for (o, &i) in src.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Rows `ids` of a 2-D tensor; repeated ids accumulate in backward.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::shape("gather_rows", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Parameter(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let x = self.value();
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            value.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let ids = ids.to_vec();
        Ok(self
            .tape()
            .record(&[self], vec![ids.len(), cols], value, move |g| {
                let mut gx = vec![0.0; rows * cols];
                for (r, &i) in ids.iter().enumerate() {
                    gx[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(a, v)| *a += v);
                }
                vec![Some(gx)]
            }))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::shape("narrow", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis];
        let x = self.value();
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            value.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        Ok(self.tape().record(&[self], out_shape, value, move |g| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }
}

impl Tape {
    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Parameter("concat of zero tensors".into()))?
            .shape();
        if axis >= first.len() {
            return Err(TensorError::shape("concat", &first, &[axis]));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", &first, &s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                value.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        Ok(self.record(parts, out_shape, value, move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut cursor = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[cursor..cursor + l * inner]);
                    cursor += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::rng::seeded;
    use crate::{Tape, Tensor};

    #[test]
    fn permute_matches_manual_transpose() {
        let tape = Tape::new();
        let x = tape.constant(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let t = x.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.value().as_slice(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_and_narrow_invert() {
        let tape = Tape::new();
        let a = tape.constant(&[2, 1, 2], vec![1.0, 2.0, 5.0, 6.0]).unwrap();
        let b = tape.constant(&[2, 2, 2], vec![3.0, 4.0, 3.5, 4.5, 7.0, 8.0, 7.5, 8.5]).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(c.value()[..6], [1.0, 2.0, 3.0, 4.0, 3.5, 4.5]);
        let back = c.narrow(1, 1, 2).unwrap();
        assert_eq!(back.value().as_slice(), b.value().as_slice());
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let tape = Tape::new();
        let table = tape.variable(&[3, 2], vec![0.0; 6]).unwrap();
        let rows = table.gather_rows(&[2, 0, 2]).unwrap();
        let g = rows.sum().backward().unwrap();
        assert_eq!(g.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(table.gather_rows(&[3]).is_err());
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let mut rng = seeded(4);
        for _ in 0..20 {
            let x = Tensor::uniform(&[2, 3, 4], -2.0, 2.0, &mut rng);
            let y = Tensor::uniform(&[2, 2, 4], -2.0, 2.0, &mut rng);
            let w = Tensor::uniform(&[4, 5, 2], -2.0, 2.0, &mut rng);
            let report = check_gradients(&[x, y, w], |tape, v| {
                let c = tape.concat(&[v[0], v[1]], 1)?; // [2,5,4]
                let p = c.permute(&[2, 1, 0])?; // [4,5,2]
                let z = p.mul(v[2])?.narrow(1, 1, 3)?.reshape(&[12, 2])?;
                Ok(z.gather_rows(&[0, 3, 3, 11])?.square().sum())
            })
            .unwrap();
            assert!(report.passes(GradCheck::DEFAULT_TOL), "{report:?}");
        }
    }
}
