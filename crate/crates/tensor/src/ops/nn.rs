use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::Var;

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    match shape.last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(TensorError::shape(op, shape, &[])),
    }
}

/// Stable softmax of `row / temperature`; `-inf` entries map to exactly zero.
pub(crate) fn softmax_into(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - max) / temperature).exp();
        total += *o;
    }
    out.iter_mut().for_each(|v| *v /= total);
}

impl<'t> Var<'t> {
    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax_rows(self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(TensorError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let s = self.shape();
        let n = last_dim(&s, "softmax_rows")?;
        let x = self.value();
        let mut y = vec![0.0; x.len()];
        for (xr, yr) in x.chunks(n).zip(y.chunks_mut(n)) {
            softmax_into(xr, temperature, yr);
        }
        let y_saved = Rc::new(y.clone());
        Ok(self.tape().record(&[self], s, y, move |g| {
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y_saved.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot) / temperature;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean softmax cross-entropy over rows of `[m×V]` logits that carry a
    /// target; rows with `None` are ignored. Zero when no row has a target.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::shape("cross_entropy", &s, &[targets.len()]));
        }
        let (m, v) = (s[0], s[1]);
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(TensorError::Parameter(format!(
                "cross_entropy target {bad} out of range for {v} classes"
            )));
        }
        let count = targets.iter().flatten().count();
        let x = self.value();
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|r| (r - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_into(row, 1.0, &mut probs[i * v..(i + 1) * v]);
        }
        let scale = if count > 0 { 1.0 / count as f64 } else { 0.0 };
        let targets = targets.to_vec();
        Ok(self.tape().record(&[self], vec![1], vec![loss * scale], move |g| {
            let mut gx = vec![0.0; m * v];
            for (i, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                for j in 0..v {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    gx[i * v + j] = g[0] * scale * (probs[i * v + j] - onehot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let s = self.shape();
        let n = last_dim(&s, "layer_norm")?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::shape("layer_norm", &s, &gamma.shape()));
        }
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (xr[j] - mean) * is;
                xhat[r * n + j] = h;
                y[r * n + j] = gm[j] * h + bt[j];
            }
        }
        let (need_g, need_b) = (gamma.requires_grad(), beta.requires_grad());
        Ok(self.tape().record(&[self, gamma, beta], s, y, move |g| {
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; n];
            let mut gb = vec![0.0; n];
            let mut gh = vec![0.0; n];
            for r in 0..rows {
                let gr = &g[r * n..(r + 1) * n];
                let hr = &xhat[r * n..(r + 1) * n];
                for j in 0..n {
                    gh[j] = gr[j] * gm[j];
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                }
                let mean_gh = gh.iter().sum::<f64>() / n as f64;
                let mean_ghh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    gx[r * n + j] = inv_std[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                }
            }
            vec![Some(gx), need_g.then_some(gg), need_b.then_some(gb)]
        }))
    }

    /// Scales each last-axis row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(self) -> Result<Var<'t>> {
        let s = self.shape();
        let n = last_dim(&s, "l2_normalize_rows")?;
        let x = self.value();
        let norms: Vec<f64> = x
            .chunks(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut y = vec![0.0; x.len()];
        for ((yr, xr), &nm) in y.chunks_mut(n).zip(x.chunks(n)).zip(&norms) {
            if nm > 0.0 {
                yr.iter_mut().zip(xr).for_each(|(o, v)| *o = v / nm);
            }
        }
        let y_saved = Rc::new(y.clone());
        Ok(self.tape().record(&[self], s, y, move |g| {
            let mut gx = vec![0.0; g.len()];
            for (r, &nm) in norms.iter().enumerate() {
                if nm == 0.0 {
                    continue;
                }
                let yr = &y_saved[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    gx[r * n + j] = (gr[j] - yr[j] * dot) / nm;
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::rng::seeded;
    use crate::{Tape, Tensor, TensorError};
    use proptest::prelude::*;

    fn direct_softmax(row: &[f64], tau: f64) -> Vec<f64> {
        let e: Vec<f64> = row.iter().map(|x| (x / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let x = tape.constant(&[1, 3], vec![0.0; 3]).unwrap();
        for v in x.softmax_rows(1.0).unwrap().value().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(&[1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let y = x.softmax_rows(1.0).unwrap().value();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15 && (y[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = tape.constant(&[1, 3], vec![5.0, 1.0, 1.0]).unwrap();
        let y = x.softmax_rows(0.5).unwrap().value();
        for (a, b) in y.iter().zip(direct_softmax(&[5.0, 1.0, 1.0], 0.5)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![0.0; 2]).unwrap();
        assert!(matches!(x.softmax_rows(0.0), Err(TensorError::Parameter(_))));
        assert!(matches!(x.softmax_rows(-1.0), Err(TensorError::Parameter(_))));
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let tape = Tape::new();
        let x = tape
            .constant(&[1, 3], vec![1.0, f64::NEG_INFINITY, 1.0])
            .unwrap();
        assert_eq!(x.softmax_rows(1.0).unwrap().value().as_slice(), &[0.5, 0.0, 0.5]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_ignore_shifts(
            row in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
            tau in 0.05f64..5.0,
        ) {
            let tape = Tape::new();
            let n = row.len();
            let a = tape.constant(&[1, n], row.clone()).unwrap().softmax_rows(tau).unwrap().value();
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let b = tape.constant(&[1, n], shifted).unwrap().softmax_rows(tau).unwrap().value();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(a.iter().all(|&v| v >= 0.0));
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let tape = Tape::new();
        let x = tape.constant(&[2, 5], vec![0.3; 10]).unwrap();
        let l = x.cross_entropy(&[Some(1), Some(4)]).unwrap().item();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let none = x.cross_entropy(&[None, None]).unwrap().item();
        assert_eq!(none, 0.0);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let tape = Tape::new();
        let x = tape.variable(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let y = x.l2_normalize_rows().unwrap();
        assert_eq!(y.value().as_slice(), &[0.6, 0.8, 0.0, 0.0]);
        let g = y.sum().backward().unwrap();
        assert_eq!(&g.get(x).unwrap()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn nn_ops_match_finite_differences() {
        let mut rng = seeded(5);
        for _ in 0..20 {
            let x = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
            let w = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
            let gamma = Tensor::uniform(&[4], 0.5, 2.0, &mut rng);
            let beta = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
            let report = check_gradients(&[x, w, gamma, beta], |_, v| {
                let sm = v[0].softmax_rows(0.7)?.mul(v[1])?.sum();
                let ce = v[0].mul(v[1])?.cross_entropy(&[Some(0), None, Some(3)])?;
                let ln = v[0].layer_norm(v[2], v[3], 1e-5)?.mul(v[1])?.sum();
                let l2 = v[0].l2_normalize_rows()?.mul(v[1])?.sum();
                sm.add(ce)?.add(ln)?.add(l2)
            })
            .unwrap();
            assert!(report.passes(GradCheck::DEFAULT_TOL), "{report:?}");
        }
    }
}
