//! Summary-ratio gate and additive fusion of the two visual streams.

use ashnet_tensor::rng::Rng;
use ashnet_tensor::{Bindings, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const FUSION_GROUP: &str = "fusion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrMode {
    /// CNN stream only.
    FixedZero,
    /// Unweighted sum of both streams.
    FixedOne,
    /// Learned per-token, per-feature gate.
    Trainable,
}

/// Affine `M1 → M1` map whose sigmoid is the summary ratio.
pub struct SummaryGate {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SummaryGate {
    pub fn new(store: &mut ParamStore, m1: usize, rng: &mut Rng) -> Self {
        SummaryGate {
            weight: store.add(
                "fusion.gate.weight",
                FUSION_GROUP,
                Tensor::randn(&[m1, m1], 1.0 / (m1 as f64).sqrt(), rng),
            ),
            bias: store.add("fusion.gate.bias", FUSION_GROUP, Tensor::zeros(&[m1])),
        }
    }

    pub fn summary_ratio<'t>(&self, params: &Bindings<'t>, f_cnn: Var<'t>) -> Result<Var<'t>> {
        summary_ratio(f_cnn, params.get(self.weight), params.get(self.bias))
    }
}

/// `sigmoid(f_cnn · W + b)` over the feature axis of `[.., M1]`.
pub fn summary_ratio<'t>(f_cnn: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    Ok(f_cnn.linear(weight, Some(bias))?.sigmoid())
}

/// `SR ⊙ F_SNN + F_CNN`, with the ratio fixed to 0 or 1 in the ablation
/// modes. `FixedZero` returns `f_cnn` itself.
pub fn fuse<'t>(sr: Option<Var<'t>>, f_snn: Var<'t>, f_cnn: Var<'t>, mode: SrMode) -> Result<Var<'t>> {
    if f_snn.shape() != f_cnn.shape() {
        return Err(CoreError::Contract(format!(
            "fuse: stream shapes differ, {:?} vs {:?}",
            f_snn.shape(),
            f_cnn.shape()
        )));
    }
    match mode {
        SrMode::FixedZero => Ok(f_cnn),
        SrMode::FixedOne => Ok(f_snn.add(f_cnn)?),
        SrMode::Trainable => {
            let sr = sr.ok_or_else(|| CoreError::Contract("trainable fusion needs a summary ratio".into()))?;
            if sr.shape() != f_cnn.shape() {
                return Err(CoreError::Contract(format!(
                    "fuse: ratio shape {:?} differs from streams {:?}",
                    sr.shape(),
                    f_cnn.shape()
                )));
            }
            Ok(sr.mul(f_snn)?.add(f_cnn)?)
        }
    }
}
