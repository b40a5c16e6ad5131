//! Leaky integrate-and-fire layers with tanh surrogate gradients,
//! threshold-dependent batch normalization and the semantic collector.

use ashnet_tensor::rng::Rng;
use ashnet_tensor::{Bindings, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::spike::SpikeTrain;

pub const SNN_GROUP: &str = "snn";
pub const COLLECTOR_GROUP: &str = "collector";

/// Variance floor used by [`tdbn`].
pub const TDBN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    pub u_rest: f64,
    pub u_reset: f64,
    pub threshold: f64,
    /// Per-step decay of `u − u_rest`, in `(0, 1]`.
    pub leak: f64,
    /// Width `α` of the tanh surrogate.
    pub surrogate_width: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            u_rest: 0.0,
            u_reset: 0.0,
            threshold: 1.0,
            leak: 0.5,
            surrogate_width: 2.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(CoreError::Parameter(format!("leak {} outside (0, 1]", self.leak)));
        }
        if !(self.threshold > self.u_reset) {
            return Err(CoreError::Parameter(format!(
                "threshold {} must exceed u_reset {}",
                self.threshold, self.u_reset
            )));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(CoreError::Parameter("surrogate_width must be positive".into()));
        }
        Ok(())
    }

    /// Membrane potential after leaking toward rest and integrating `input`.
    #[inline]
    pub fn integrate(&self, u: f64, input: f64) -> f64 {
        self.leak * (u - self.u_rest) + self.u_rest + input
    }

    /// `d spike / d u` of the tanh surrogate at pre-reset potential `u`.
    #[inline]
    pub fn surrogate_grad(&self, u: f64) -> f64 {
        let t = ((u - self.threshold) / self.surrogate_width).tanh();
        (1.0 - t * t) / self.surrogate_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembraneState {
    pub u: Vec<f64>,
    pub step: usize,
}

impl MembraneState {
    pub fn resting(neurons: usize, cfg: &LifConfig) -> Self {
        MembraneState {
            u: vec![cfg.u_rest; neurons],
            step: 0,
        }
    }
}

/// One LIF update: returns exact 0/1 spikes and the post-reset state.
pub fn lif_step(cfg: &LifConfig, state: &MembraneState, input: &[f64]) -> Result<(Vec<f64>, MembraneState)> {
    if input.len() != state.u.len() {
        return Err(CoreError::Contract(format!(
            "lif_step input of {} values for {} neurons",
            input.len(),
            state.u.len()
        )));
    }
    let mut u = Vec::with_capacity(input.len());
    let mut spikes = Vec::with_capacity(input.len());
    for (&u0, &i) in state.u.iter().zip(input) {
        let pre = cfg.integrate(u0, i);
        let fired = pre >= cfg.threshold;
        spikes.push(if fired { 1.0 } else { 0.0 });
        u.push(if fired { cfg.u_reset } else { pre });
    }
    Ok((
        spikes,
        MembraneState {
            u,
            step: state.step + 1,
        },
    ))
}

/// Runs LIF neurons over `[steps × neurons]` input currents on the tape.
///
/// The membrane starts at `u_rest` and is returned to rest every
/// `reset_every` steps when given, otherwise it carries through the whole
/// sequence. Forward spikes are exact 0/1; backward propagates through time
/// with the tanh surrogate for `d spike / d u` and treats the reset as
/// constant, so `d u_post / d u_pre = 1 − spike`.
pub fn lif_sequence<'t>(cfg: &LifConfig, input: Var<'t>, reset_every: Option<usize>) -> Result<Var<'t>> {
    cfg.validate()?;
    let shape = input.shape();
    if shape.len() != 2 {
        return Err(CoreError::Contract(format!("lif_sequence expects [steps, neurons], got {shape:?}")));
    }
    if reset_every == Some(0) {
        return Err(CoreError::Parameter("reset_every must be positive".into()));
    }
    let (steps, n) = (shape[0], shape[1]);
    let x = input.value();
    let mut spikes = vec![0.0; steps * n];
    let mut pre = vec![0.0; steps * n];
    let mut state = MembraneState::resting(n, cfg);
    for t in 0..steps {
        if reset_every.is_some_and(|k| t > 0 && t % k == 0) {
            state = MembraneState::resting(n, cfg);
        }
        for j in 0..n {
            pre[t * n + j] = cfg.integrate(state.u[j], x[t * n + j]);
        }
        let (s, next) = lif_step(cfg, &state, &x[t * n..(t + 1) * n])?;
        spikes[t * n..(t + 1) * n].copy_from_slice(&s);
        state = next;
    }
    let cfg = *cfg;
    let saved = spikes.clone();
    Ok(input.tape().record(&[input], shape, spikes, move |g| {
        let mut gx = vec![0.0; steps * n];
        // Gradient w.r.t. the post-reset potential carried into step t + 1.
        let mut carry = vec![0.0; n];
        for t in (0..steps).rev() {
            if reset_every.is_some_and(|k| t + 1 < steps && (t + 1) % k == 0) {
                carry.iter_mut().for_each(|c| *c = 0.0);
            }
            for j in 0..n {
                let k = t * n + j;
                let d_pre = g[k] * cfg.surrogate_grad(pre[k]) + carry[j] * (1.0 - saved[k]);
                gx[k] = d_pre;
                carry[j] = cfg.leak * d_pre;
            }
        }
        vec![Some(gx)]
    }))
}

/// Threshold-dependent batch normalization of `[population × units]`.
///
/// Each unit is normalized over all rows with the biased variance, floored
/// at [`TDBN_EPS`], then mapped to `scale · threshold · x̂ + shift`.
pub fn tdbn<'t>(x: Var<'t>, threshold: f64, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(CoreError::Contract(format!("tdbn expects [population, units], got {s:?}")));
    }
    let (p, u) = (s[0], s[1]);
    if p < 2 {
        return Err(CoreError::Contract("tdbn needs at least 2 samples per unit".into()));
    }
    if scale.shape() != [u] || shift.shape() != [u] {
        return Err(CoreError::Contract(format!(
            "tdbn affine parameters must have shape [{u}]"
        )));
    }
    let xv = x.value();
    let (gamma, beta) = (scale.value(), shift.value());
    let mut mean = vec![0.0; u];
    for row in xv.chunks(u) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= p as f64);
    let mut var = vec![0.0; u];
    for row in xv.chunks(u) {
        for j in 0..u {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= p as f64);
    let floored: Vec<bool> = var.iter().map(|&v| v < TDBN_EPS).collect();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(TDBN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; p * u];
    let mut y = vec![0.0; p * u];
    for r in 0..p {
        for j in 0..u {
            let k = r * u + j;
            xhat[k] = (xv[k] - mean[j]) * inv_std[j];
            y[k] = gamma[j] * threshold * xhat[k] + beta[j];
        }
    }
    let (need_x, need_scale, need_shift) = (x.requires_grad(), scale.requires_grad(), shift.requires_grad());
    Ok(x.tape().record(&[x, scale, shift], s, y, move |g| {
        let mut g_scale = vec![0.0; u];
        let mut g_shift = vec![0.0; u];
        let mut g_mean = vec![0.0; u];
        let mut g_dot = vec![0.0; u];
        for r in 0..p {
            for j in 0..u {
                let k = r * u + j;
                g_scale[j] += g[k] * threshold * xhat[k];
                g_shift[j] += g[k];
                g_mean[j] += g[k];
                g_dot[j] += g[k] * xhat[k];
            }
        }
        let gx = need_x.then(|| {
            let mut gx = vec![0.0; p * u];
            for r in 0..p {
                for j in 0..u {
                    let k = r * u + j;
                    let a = gamma[j] * threshold * inv_std[j];
                    let centred = g[k] - g_mean[j] / p as f64;
                    // A floored variance is a constant, so only the mean path remains.
                    gx[k] = if floored[j] {
                        a * centred
                    } else {
                        a * (centred - xhat[k] * g_dot[j] / p as f64)
                    };
                }
            }
            gx
        });
        vec![gx, need_scale.then_some(g_scale), need_shift.then_some(g_shift)]
    }))
}

/// Trainable `M1 × M2` codebook whose columns are basis semantics.
#[derive(Debug, Clone)]
pub struct SemanticCollector {
    pub c: ParamId,
    pub m1: usize,
    pub m2: usize,
}

impl SemanticCollector {
    /// Entries drawn i.i.d. from `N(0, 1/√M1)`.
    pub fn new(store: &mut ParamStore, m1: usize, m2: usize, rng: &mut Rng) -> Self {
        let c = store.add(
            "collector.c",
            COLLECTOR_GROUP,
            Tensor::randn(&[m1, m2], 1.0 / (m1 as f64).sqrt(), rng),
        );
        SemanticCollector { c, m1, m2 }
    }

    pub fn readout<'t>(&self, params: &Bindings<'t>, counts: Var<'t>) -> Result<Var<'t>> {
        collector_readout(counts, params.get(self.c))
    }
}

/// `F = Σ_j C_j · S_j / Σ_j S_j` for every row of `S` (`[.., M2]`), giving
/// `[.., M1]`. Rows with zero total activation read out as exact zeros.
pub fn collector_readout<'t>(counts: Var<'t>, collector: Var<'t>) -> Result<Var<'t>> {
    let ss = counts.shape();
    let cs = collector.shape();
    if cs.len() != 2 || ss.last() != Some(&cs[1]) {
        return Err(CoreError::Contract(format!(
            "collector_readout: activations {ss:?} do not match collector {cs:?}"
        )));
    }
    let (m1, m2) = (cs[0], cs[1]);
    let rows = counts.numel() / m2;
    let (sv, cv) = (counts.value(), collector.value());
    let totals: Vec<f64> = sv.chunks(m2).map(|r| r.iter().sum()).collect();
    let mut f = vec![0.0; rows * m1];
    for r in 0..rows {
        if totals[r] == 0.0 {
            continue;
        }
        let srow = &sv[r * m2..(r + 1) * m2];
        for i in 0..m1 {
            let dot: f64 = (0..m2).map(|j| cv[i * m2 + j] * srow[j]).sum();
            f[r * m1 + i] = dot / totals[r];
        }
    }
    let mut out_shape = ss;
    *out_shape.last_mut().expect("non-empty shape") = m1;
    let saved = f.clone();
    let (need_s, need_c) = (counts.requires_grad(), collector.requires_grad());
    Ok(counts
        .tape()
        .record(&[counts, collector], out_shape, f, move |g| {
            let mut gs = need_s.then(|| vec![0.0; rows * m2]);
            let mut gc = need_c.then(|| vec![0.0; m1 * m2]);
            for r in 0..rows {
                let z = totals[r];
                if z == 0.0 {
                    continue;
                }
                let grow = &g[r * m1..(r + 1) * m1];
                if let Some(gc) = gc.as_mut() {
                    for i in 0..m1 {
                        for j in 0..m2 {
                            gc[i * m2 + j] += grow[i] * sv[r * m2 + j] / z;
                        }
                    }
                }
                if let Some(gs) = gs.as_mut() {
                    // dF_i/dS_j = (C_ij − F_i) / z
                    let gf: f64 = (0..m1).map(|i| grow[i] * saved[r * m1 + i]).sum();
                    for j in 0..m2 {
                        let gcj: f64 = (0..m1).map(|i| grow[i] * cv[i * m2 + j]).sum();
                        gs[r * m2 + j] = (gcj - gf) / z;
                    }
                }
            }
            vec![gs, gc]
        }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnnConfig {
    pub lif: LifConfig,
    /// Pixels per patch fed to the first layer.
    pub patch_units: usize,
    pub hidden: usize,
    /// Width `M2` of the final layer, one unit per abstract semantic.
    pub m2: usize,
}

struct SnnLayer {
    weight: ParamId,
    scale: ParamId,
    shift: ParamId,
}

/// Two spiking layers, each `affine → tdBN → LIF`, applied per patch.
pub struct SnnEncoder {
    cfg: SnnConfig,
    layers: Vec<SnnLayer>,
}

impl SnnEncoder {
    pub fn new(store: &mut ParamStore, cfg: SnnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.lif.validate()?;
        let widths = [cfg.patch_units, cfg.hidden, cfg.m2];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| SnnLayer {
                weight: store.add(
                    format!("snn.{l}.weight"),
                    SNN_GROUP,
                    Tensor::randn(&[w[0], w[1]], 1.0 / (w[0] as f64).sqrt(), rng),
                ),
                scale: store.add(format!("snn.{l}.tdbn_scale"), SNN_GROUP, Tensor::full(&[w[1]], 1.0)),
                shift: store.add(format!("snn.{l}.tdbn_shift"), SNN_GROUP, Tensor::zeros(&[w[1]])),
            })
            .collect();
        Ok(SnnEncoder { cfg, layers })
    }

    pub fn config(&self) -> &SnnConfig {
        &self.cfg
    }

    /// Batch-accumulated encoding of `[b, T, N, patch_units]` spikes into
    /// per-sample spike counts `[b, N, M2]`.
    ///
    /// Samples are presented one after another with no membrane reset in
    /// between; the membrane returns to rest only after the whole batch,
    /// unless `reset_between` forces a reset after every sample.
    pub fn encode_abstract<'t>(&self, params: &Bindings<'t>, input: Var<'t>, reset_between: bool) -> Result<Var<'t>> {
        let s = input.shape();
        if s.len() != 4 || s[3] != self.cfg.patch_units {
            return Err(CoreError::Contract(format!(
                "snn input must be [b, T, N, {}], got {s:?}",
                self.cfg.patch_units
            )));
        }
        let (b, steps, n) = (s[0], s[1], s[2]);
        let reset = reset_between.then_some(steps);
        let mut x = input.reshape(&[b * steps * n, self.cfg.patch_units])?;
        for layer in &self.layers {
            let h = x.linear(params.get(layer.weight), None)?;
            let width = h.shape()[1];
            let h = tdbn(h, self.cfg.lif.threshold, params.get(layer.scale), params.get(layer.shift))?;
            let spikes = lif_sequence(&self.cfg.lif, h.reshape(&[b * steps, n * width])?, reset)?;
            x = spikes.reshape(&[b * steps * n, width])?;
        }
        Ok(x.reshape(&[b, steps, n, self.cfg.m2])?.sum_axis(1)?)
    }
}

/// Stacks per-image trains, whose units are patch-major with
/// `patch_units` pixels per patch, into a `[b, T, N, patch_units]` tensor.
pub fn stack_trains(trains: &[SpikeTrain], patch_units: usize) -> Result<Tensor> {
    let first = trains
        .first()
        .ok_or_else(|| CoreError::Contract("no spike trains to encode".into()))?;
    let (units, steps) = (first.num_units(), first.steps());
    if units % patch_units != 0 {
        return Err(CoreError::Contract(format!(
            "{units} units do not split into patches of {patch_units}"
        )));
    }
    if let Some(bad) = trains.iter().find(|t| t.steps() != steps || t.num_units() != units) {
        return Err(CoreError::Contract(format!(
            "inconsistent spike trains: T={} units={} vs T={steps} units={units}",
            bad.steps(),
            bad.num_units()
        )));
    }
    let mut data = Vec::with_capacity(trains.len() * steps * units);
    for train in trains {
        for t in 0..steps {
            data.extend((0..units).map(|u| f64::from(train.get(u, t))));
        }
    }
    Ok(Tensor::new(
        &[trains.len(), steps, units / patch_units, patch_units],
        data,
    )?)
}

/// Freezes or unfreezes the spiking layers and the collector together.
pub fn set_frozen(store: &mut ParamStore, frozen: bool) {
    store.set_group_frozen(SNN_GROUP, frozen);
    store.set_group_frozen(COLLECTOR_GROUP, frozen);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ashnet_tensor::gradcheck::{analytic_gradients, check_gradients, numeric_gradients, relative_error, GradCheck};
    use ashnet_tensor::rng::seeded;
    use ashnet_tensor::Tape;
    use proptest::prelude::*;

    fn hr<F>(f: F) -> F
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> ashnet_tensor::Result<Var<'t>>,
    {
        f
    }

    /// Per-neuron scalar simulation, written without the vectorized helpers.
    fn scalar_lif(cfg: &LifConfig, inputs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut u = cfg.u_rest;
        let mut spikes = Vec::new();
        let mut trace = Vec::new();
        for &i in inputs {
            let v = cfg.leak * (u - cfg.u_rest) + cfg.u_rest + i;
            if v >= cfg.threshold {
                spikes.push(1.0);
                u = cfg.u_reset;
            } else {
                spikes.push(0.0);
                u = v;
            }
            trace.push(v);
        }
        (spikes, trace)
    }

    /// Soft stand-in: emits tanh((u − θ)/α) but gates the reset with the hard
    /// spike, so its exact derivative is what the surrogate backward computes.
    fn soft_lif<'t>(cfg: LifConfig, input: Var<'t>) -> ashnet_tensor::Result<Var<'t>> {
        let s = input.shape();
        let (steps, n) = (s[0], s[1]);
        let x = input.value();
        let mut out = vec![0.0; steps * n];
        let mut u = vec![cfg.u_rest; n];
        for t in 0..steps {
            for j in 0..n {
                let v = cfg.leak * (u[j] - cfg.u_rest) + cfg.u_rest + x[t * n + j];
                out[t * n + j] = ((v - cfg.threshold) / cfg.surrogate_width).tanh();
                u[j] = if v >= cfg.threshold { cfg.u_reset } else { v };
            }
        }
        // Only the forward value matters to the finite-difference oracle.
        input.tape().constant(&s, out)
    }

    #[test]
    fn single_step_cases() {
        let cfg = LifConfig::default();
        let (s, st) = lif_step(&cfg, &MembraneState::resting(1, &cfg), &[0.0]).unwrap();
        assert_eq!((s[0], st.u[0]), (0.0, 0.0));
        let (s, st) = lif_step(&cfg, &MembraneState::resting(1, &cfg), &[1.5]).unwrap();
        assert_eq!((s[0], st.u[0]), (1.0, 0.0));
        assert!(lif_step(&cfg, &MembraneState::resting(2, &cfg), &[1.0]).is_err());
    }

    #[test]
    fn leaky_accumulation() {
        let cfg = LifConfig::default();
        let mut state = MembraneState::resting(1, &cfg);
        let mut spikes = Vec::new();
        let mut membrane = Vec::new();
        for _ in 0..3 {
            membrane.push(cfg.integrate(state.u[0], 0.6));
            let (s, next) = lif_step(&cfg, &state, &[0.6]).unwrap();
            spikes.push(s[0]);
            state = next;
        }
        assert_eq!(spikes, vec![0.0, 0.0, 1.0]);
        for (m, e) in membrane.iter().zip([0.6, 0.9, 1.05]) {
            assert!((m - e).abs() < 1e-12);
        }
        assert_eq!(state.u[0], 0.0);
    }

    #[test]
    fn sequence_matches_scalar_reference() {
        let mut rng = seeded(10);
        for _ in 0..20 {
            let cfg = LifConfig {
                leak: rand::Rng::random_range(&mut rng, 0.1..1.0),
                ..LifConfig::default()
            };
            let x = Tensor::uniform(&[20, 5], -0.5, 1.5, &mut rng);
            let tape = Tape::new();
            let s = lif_sequence(&cfg, tape.leaf(&x), None).unwrap().value();
            for j in 0..5 {
                let col: Vec<f64> = (0..20).map(|t| x.at(&[t, j])).collect();
                let (expect, _) = scalar_lif(&cfg, &col);
                let got: Vec<f64> = (0..20).map(|t| s[t * 5 + j]).collect();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn surrogate_gradient_matches_soft_oracle() {
        let mut rng = seeded(11);
        for _ in 0..20 {
            let cfg = LifConfig::default();
            let inputs = [
                Tensor::uniform(&[6, 4], -2.0, 2.0, &mut rng),
                Tensor::uniform(&[6, 4], -2.0, 2.0, &mut rng),
            ];
            // Losses linear in the spikes keep dL/ds independent of the spike values.
            let hard = hr(|_, v| {
                let s = lif_sequence(&cfg, v[0], None)?;
                Ok(s.mul(v[1].detach())?.sum())
            });
            let soft = hr(|_, v| {
                Ok(soft_lif(cfg, v[0])?.mul(v[1].detach())?.sum())
            });
            let a = analytic_gradients(&inputs, &hard).unwrap();
            let n = numeric_gradients(&inputs, &soft, GradCheck::DEFAULT_STEP).unwrap();
            let err = relative_error(&a[0], &n[0]);
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn reset_between_segments_matches_oracle() {
        let cfg = LifConfig::default();
        let seq = [0.7, 0.7, 0.7, 0.7, 0.7, 0.7];
        let tape = Tape::new();
        let x = tape.constant(&[6, 1], seq.to_vec()).unwrap();
        let carried = lif_sequence(&cfg, x, None).unwrap().value();
        let reset = lif_sequence(&cfg, x, Some(3)).unwrap().value();
        let (expect_carry, _) = scalar_lif(&cfg, &seq);
        let (half, _) = scalar_lif(&cfg, &seq[..3]);
        assert_eq!(carried.as_slice(), expect_carry.as_slice());
        assert_eq!(&reset[..3], half.as_slice());
        assert_eq!(&reset[3..], half.as_slice());
        // The first segment ends above rest, so carrying it changes sample two.
        assert_ne!(&carried[3..], &reset[3..]);
    }

    #[test]
    fn reset_segments_gradients_match_soft_oracle() {
        let mut rng = seeded(12);
        let cfg = LifConfig::default();
        for _ in 0..5 {
            let inputs = [
                Tensor::uniform(&[6, 3], -2.0, 2.0, &mut rng),
                Tensor::uniform(&[6, 3], -2.0, 2.0, &mut rng),
            ];
            let hard = hr(|_, v| {
                let s = lif_sequence(&cfg, v[0], Some(3))?;
                Ok(s.mul(v[1].detach())?.sum())
            });
            let soft = hr(|_, v| {
                let a = soft_lif(cfg, v[0].narrow(0, 0, 3)?)?;
                let b = soft_lif(cfg, v[0].narrow(0, 3, 3)?)?;
                Ok(v[0].tape().concat(&[a, b], 0)?.mul(v[1].detach())?.sum())
            });
            let a = analytic_gradients(&inputs, &hard).unwrap();
            let n = numeric_gradients(&inputs, &soft, GradCheck::DEFAULT_STEP).unwrap();
            assert!(relative_error(&a[0], &n[0]) <= 1e-6);
        }
    }

    #[test]
    fn tdbn_identity_and_degenerate_cases() {
        let tape = Tape::new();
        let one = tape.constant(&[1], vec![1.0]).unwrap();
        let zero = tape.constant(&[1], vec![0.0]).unwrap();
        let x = tape.constant(&[4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = tdbn(x, 1.0, one, zero).unwrap().value();
        for (a, b) in y.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() <= 1e-9);
        }
        let shift = tape.constant(&[1], vec![0.3]).unwrap();
        let c = tape.constant(&[3, 1], vec![2.0; 3]).unwrap();
        assert_eq!(tdbn(c, 1.0, one, shift).unwrap().value().as_slice(), &[0.3; 3]);
        let single = tape.constant(&[1, 1], vec![2.0]).unwrap();
        assert!(tdbn(single, 1.0, one, zero).is_err());
    }

    #[test]
    fn tdbn_moments() {
        let mut rng = seeded(13);
        let x = Tensor::uniform(&[50, 3], -3.0, 5.0, &mut rng);
        let tape = Tape::new();
        let theta = 1.7;
        let one = tape.constant(&[3], vec![1.0; 3]).unwrap();
        let zero = tape.constant(&[3], vec![0.0; 3]).unwrap();
        let y = tdbn(tape.leaf(&x), theta, one, zero).unwrap().value();
        for j in 0..3 {
            let col: Vec<f64> = (0..50).map(|r| y[r * 3 + j]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - theta * theta).abs() <= 1e-6);
        }
    }

    #[test]
    fn tdbn_gradients() {
        let mut rng = seeded(14);
        for _ in 0..20 {
            let inputs = [
                Tensor::uniform(&[6, 3], -2.0, 2.0, &mut rng),
                Tensor::uniform(&[3], -2.0, 2.0, &mut rng),
                Tensor::uniform(&[3], -2.0, 2.0, &mut rng),
                Tensor::uniform(&[6, 3], -2.0, 2.0, &mut rng),
            ];
            let report = check_gradients(&inputs, |_, v| {
                let y = tdbn(v[0], 1.3, v[1], v[2])?;
                Ok(y.mul(v[3])?.tanh().sum())
            })
            .unwrap();
            assert!(report.passes(GradCheck::DEFAULT_TOL), "{report:?}");
        }
    }

    /// Direct loop evaluation of the collector readout.
    fn naive_readout(s: &[f64], c: &Tensor, rows: usize) -> Vec<f64> {
        let (m1, m2) = (c.shape()[0], c.shape()[1]);
        let mut out = vec![0.0; rows * m1];
        for r in 0..rows {
            let total: f64 = s[r * m2..(r + 1) * m2].iter().sum();
            if total == 0.0 {
                continue;
            }
            for i in 0..m1 {
                let mut acc = 0.0;
                for j in 0..m2 {
                    acc += c.at(&[i, j]) * s[r * m2 + j];
                }
                out[r * m1 + i] = acc / total;
            }
        }
        out
    }

    #[test]
    fn readout_cases() {
        let mut rng = seeded(15);
        let c = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let cv = tape.leaf(&c);
        let one_hot = tape.constant(&[1, 4], vec![0.0, 0.0, 7.0, 0.0]).unwrap();
        let f = collector_readout(one_hot, cv).unwrap().value();
        for i in 0..3 {
            assert!((f[i] - c.at(&[i, 2])).abs() <= 1e-15);
        }
        let zeros = tape.constant(&[2, 4], vec![0.0; 8]).unwrap();
        assert!(collector_readout(zeros, cv).unwrap().value().iter().all(|&v| v == 0.0));
        let s = Tensor::uniform(&[2, 5, 4], 0.0, 10.0, &mut rng);
        let f = collector_readout(tape.leaf(&s), cv).unwrap();
        assert_eq!(f.shape(), vec![2, 5, 3]);
        let expect = naive_readout(s.data(), &c, 10);
        for (a, b) in f.value().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
        let bad = tape.constant(&[1, 3], vec![1.0; 3]).unwrap();
        assert!(collector_readout(bad, cv).is_err());
    }

    #[test]
    fn readout_gradients() {
        let mut rng = seeded(16);
        for _ in 0..20 {
            let inputs = [
                Tensor::uniform(&[3, 4], 0.1, 2.0, &mut rng),
                Tensor::uniform(&[2, 4], -2.0, 2.0, &mut rng),
            ];
            let report = check_gradients(&inputs, |_, v| {
                let f = collector_readout(v[0], v[1])?;
                Ok(f.square().sum())
            })
            .unwrap();
            assert!(report.passes(GradCheck::DEFAULT_TOL), "{report:?}");
        }
    }

    #[test]
    fn encoder_counts_are_bounded_integers() {
        let mut rng = seeded(17);
        let mut store = ParamStore::new();
        let cfg = SnnConfig {
            lif: LifConfig::default(),
            patch_units: 4,
            hidden: 6,
            m2: 3,
        };
        let enc = SnnEncoder::new(&mut store, cfg, &mut rng).unwrap();
        let trains: Vec<SpikeTrain> = (0..3)
            .map(|i| crate::spike::encode_probabilistic(&[0.2, 0.9, 0.5, 0.1, 0.7, 0.3, 0.8, 0.4], 5, i).unwrap())
            .collect();
        let input = stack_trains(&trains, 4).unwrap();
        assert_eq!(input.shape(), &[3, 5, 2, 4]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let s = enc.encode_abstract(&p, tape.leaf(&input), false).unwrap();
        assert_eq!(s.shape(), vec![3, 2, 3]);
        assert!(s.value().iter().all(|&v| (0.0..=5.0).contains(&v) && v.fract() == 0.0));
        let silent = stack_trains(&[crate::spike::encode_probabilistic(&[0.0; 8], 5, 0).unwrap()], 4).unwrap();
        let s0 = enc.encode_abstract(&p, tape.leaf(&silent), false).unwrap();
        assert!(s0.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_trains_are_rejected() {
        let a = crate::spike::encode_probabilistic(&[0.5; 4], 5, 0).unwrap();
        let b = crate::spike::encode_probabilistic(&[0.5; 4], 6, 0).unwrap();
        assert!(matches!(stack_trains(&[a, b], 4), Err(CoreError::Contract(_))));
    }

    #[test]
    fn freezing_blocks_updates() {
        use ashnet_tensor::optim::{Hyper, Optimizer};
        let mut rng = seeded(18);
        let mut store = ParamStore::new();
        let col = SemanticCollector::new(&mut store, 3, 2, &mut rng);
        set_frozen(&mut store, true);
        let before = store.get(col.c).clone();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let s = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let loss = col.readout(&p, s).unwrap().sum();
        let grads = loss.backward().unwrap();
        store.accumulate(&p, &grads);
        let mut opt = Optimizer::new(Hyper::sgd(0.1, 0.9, 0.0));
        opt.step_group(&mut store, COLLECTOR_GROUP).unwrap();
        assert_eq!(store.get(col.c).data(), before.data());
        set_frozen(&mut store, false);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let s = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let grads = col.readout(&p, s).unwrap().sum().backward().unwrap();
        store.accumulate(&p, &grads);
        opt.step_group(&mut store, COLLECTOR_GROUP).unwrap();
        assert_ne!(store.get(col.c).data(), before.data());
    }

    proptest! {
        #[test]
        fn readout_is_scale_invariant(
            s in prop::collection::vec(0.0f64..5.0, 8),
            c in 0.1f64..20.0,
        ) {
            let mut rng = seeded(19);
            let coll = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let tape = Tape::new();
            let cv = tape.leaf(&coll);
            let a = collector_readout(tape.constant(&[2, 4], s.clone()).unwrap(), cv).unwrap().value();
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            let b = collector_readout(tape.constant(&[2, 4], scaled).unwrap(), cv).unwrap().value();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn spikes_are_binary(xs in prop::collection::vec(-3.0f64..3.0, 12), leak in 0.05f64..1.0) {
            let cfg = LifConfig { leak, ..LifConfig::default() };
            let tape = Tape::new();
            let s = lif_sequence(&cfg, tape.constant(&[4, 3], xs).unwrap(), None).unwrap();
            prop_assert!(s.value().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
