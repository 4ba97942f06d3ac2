//! Per-variable objectives: plain MSE, masked MSE, truncated-normalized-logit
//! MSE and quantized (rounded) MSE.
//!
//! Slice functions accumulate in f64 and serve as evaluation metrics; the
//! graph builders produce the differentiable training losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::LogitTransform;
use crate::tensor::{Float, Graph, Tensor, Var};

pub const DEFAULT_LOGIT_EPSILON: f64 = 1e-3;

/// The four target variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Temperature,
    CrrIntensity,
    AsiiTurbTropProb,
    Cma,
}

impl Variable {
    pub const ALL: [Variable; 4] = [
        Variable::Temperature,
        Variable::CrrIntensity,
        Variable::AsiiTurbTropProb,
        Variable::Cma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Temperature => "temperature",
            Variable::CrrIntensity => "crr_intensity",
            Variable::AsiiTurbTropProb => "asii_turb_trop_prob",
            Variable::Cma => "cma",
        }
    }

    /// Metric used for validation and model selection.
    pub fn metric_kind(self) -> MetricKind {
        match self {
            Variable::Temperature => MetricKind::MaskedMse,
            Variable::CrrIntensity => MetricKind::Mse,
            Variable::AsiiTurbTropProb => MetricKind::LogitMse,
            Variable::Cma => MetricKind::QuantizedMse,
        }
    }

    /// Differentiable objective used for training. The cloud mask trains
    /// on plain MSE; its rounded metric only selects checkpoints.
    pub fn training_kind(self) -> MetricKind {
        match self {
            Variable::Cma => MetricKind::Mse,
            v => v.metric_kind(),
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variable::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variable '{s}' (expected one of temperature, crr_intensity, asii_turb_trop_prob, cma)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Mse,
    MaskedMse,
    LogitMse,
    QuantizedMse,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::MaskedMse => "masked_mse",
            MetricKind::LogitMse => "logit_mse",
            MetricKind::QuantizedMse => "quantized_mse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSpec {
    pub variable: Variable,
    pub kind: MetricKind,
    pub epsilon: f64,
}

impl MetricSpec {
    pub fn for_variable(variable: Variable, epsilon: f64) -> Result<Self> {
        LogitTransform::new(epsilon)?;
        Ok(Self {
            variable,
            kind: variable.metric_kind(),
            epsilon,
        })
    }

    /// Metric value for one prediction; `mask` is only read by masked MSE.
    pub fn evaluate<T: Float>(&self, pred: &[T], target: &[T], mask: &[T]) -> Result<f64> {
        match self.kind {
            MetricKind::Mse => mse(pred, target),
            MetricKind::MaskedMse => masked_mse(pred, target, mask),
            MetricKind::LogitMse => logit_mse(pred, target, self.epsilon),
            MetricKind::QuantizedMse => quantized_mse(pred, target),
        }
    }
}

fn same_len<T>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: prediction has {} values, target {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty(format!("{what} of zero values")));
    }
    Ok(())
}

pub fn mse<T: Float>(pred: &[T], target: &[T]) -> Result<f64> {
    same_len(pred, target, "mse")?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p.to_f64() - t.to_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn masked_mse<T: Float>(pred: &[T], target: &[T], mask: &[T]) -> Result<f64> {
    same_len(pred, target, "masked_mse")?;
    same_len(pred, mask, "masked_mse mask")?;
    let mut sum = 0.0;
    let mut count = 0.0;
    for ((&p, &t), &m) in pred.iter().zip(target).zip(mask) {
        let m = m.to_f64();
        if m != 0.0 {
            let d = p.to_f64() - t.to_f64();
            sum += m * d * d;
            count += m;
        }
    }
    if count <= 0.0 {
        return Err(Error::Empty("masked_mse with every pixel masked".into()));
    }
    Ok(sum / count)
}

pub fn logit_transform(x: f64, epsilon: f64) -> Result<f64> {
    Ok(LogitTransform::new(epsilon)?.apply(x))
}

pub fn logit_mse<T: Float>(pred: &[T], target: &[T], epsilon: f64) -> Result<f64> {
    same_len(pred, target, "logit_mse")?;
    let lt = LogitTransform::new(epsilon)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = lt.apply(p.to_f64()) - lt.apply(t.to_f64());
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// 0 below 0.5, 1 at or above.
pub fn round_half_up(x: f64) -> f64 {
    if x >= 0.5 {
        1.0
    } else {
        0.0
    }
}

pub fn quantized_mse<T: Float>(pred: &[T], target: &[T]) -> Result<f64> {
    same_len(pred, target, "quantized_mse")?;
    let mut wrong = 0usize;
    for (&p, &t) in pred.iter().zip(target) {
        let t = t.to_f64();
        if t != 0.0 && t != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "quantized_mse needs a binary target, found {t}"
            )));
        }
        if round_half_up(p.to_f64()) != t {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / pred.len() as f64)
}

/// Differentiable training loss for `kind` on a prediction already on the
/// graph. `mask` is used only by masked MSE.
pub fn loss_on_graph<T: Float>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    kind: MetricKind,
    epsilon: f64,
) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::Shape(format!(
            "loss: prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    let (p, t) = match kind {
        MetricKind::LogitMse => {
            let lt = LogitTransform::new(epsilon)?;
            let p = g.logit_transform(pred, lt);
            let tt = target.map(|v| T::from_f64(lt.apply(v.to_f64())));
            (p, g.constant(tt))
        }
        MetricKind::QuantizedMse => {
            return Err(Error::InvalidArgument(
                "quantized_mse is not differentiable; train with mse".into(),
            ))
        }
        _ => (pred, g.constant(target.clone())),
    };
    let diff = g.sub(p, t)?;
    let sq = g.mul(diff, diff)?;
    match kind {
        MetricKind::MaskedMse => g.reduce_mean(sq, Some(mask)),
        _ => g.reduce_mean(sq, None),
    }
}

/// Averaged metric over a set of predictions, as written to report files.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variable: Variable,
    pub kind: MetricKind,
    pub value: f64,
    pub epsilon: f64,
    pub windows: usize,
}

impl EvalReport {
    pub const HEADER: &'static str = "variable,metric,value,epsilon,windows";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{}\n",
            Self::HEADER,
            self.variable,
            self.kind.name(),
            self.value,
            self.epsilon,
            self.windows
        )
    }
}

/// Average of per-window metric values. Windows without a single valid
/// pixel are skipped under masked MSE.
pub fn average_metric<'a, T: Float + 'a>(
    spec: &MetricSpec,
    items: impl IntoIterator<Item = (&'a [T], &'a [T], &'a [T])>,
) -> Result<EvalReport> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (pred, target, mask) in items {
        match spec.evaluate(pred, target, mask) {
            Ok(v) => {
                total += v;
                n += 1;
            }
            Err(Error::Empty(_)) if spec.kind == MetricKind::MaskedMse => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::Empty("no evaluable windows".into()));
    }
    Ok(EvalReport {
        variable: spec.variable,
        kind: spec.kind,
        value: total / n as f64,
        epsilon: spec.epsilon,
        windows: n,
    })
}
