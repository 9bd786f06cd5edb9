//! Scale-factor initialization from a tensor's empirical distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lsq::{ScaleFactor, SiteKind, SCALE_FLOOR};
use crate::tensor::Tensor;
use crate::transformer::{active_sites, forward, Batch, ForwardOptions, ModelState};

/// Default truncation ratio.
pub const DEFAULT_GAMMA: f64 = 0.05;

/// Per-site outcome of initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub site: String,
    pub kind: SiteKind,
    pub numel: usize,
    /// Truncation threshold from [`init_scale_factor`] (or a fixed constant).
    pub threshold: f64,
    /// Step size handed to the quantizer, `threshold / Qp`.
    pub scale: f64,
    /// Fraction of captured values with `|x| <= threshold`.
    pub retention: f64,
}

/// Number of elements cut from each tail for ratio `gamma`.
///
/// Rounds `γ·n/2` down, so at most `γ·n` elements are ever cut and the
/// retention bound `count(|x| <= s)/n >= 1 - γ` holds for every `n`.
pub fn tail_count(n: usize, gamma: f64) -> usize {
    (gamma * n as f64 / 2.0).floor() as usize
}

/// Truncation threshold for `values`: sort ascending, drop `tail_count`
/// elements from each end and return the larger magnitude of the two
/// remaining extremes, floored at [`SCALE_FLOOR`].
pub fn init_scale_factor(values: &Tensor, gamma: f64) -> Result<f64> {
    init_from_slice(values.data(), gamma)
}

pub fn init_from_slice(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if !(0.0..0.5).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo_idx = tail_count(n, gamma).min(n - 1);
    let hi_idx = (n - 1).saturating_sub(lo_idx).max(lo_idx);
    let s = sorted[lo_idx].abs().max(sorted[hi_idx].abs());
    Ok(s.max(SCALE_FLOOR))
}

/// Fraction of `values` with magnitude at most `threshold`.
pub fn retention(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    values.iter().filter(|v| v.abs() <= threshold).count() as f64 / values.len() as f64
}

/// How initial scale-factors are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum InitMethod {
    /// Percentile truncation of the observed distribution.
    Truncation { gamma: f64 },
    /// Fixed thresholds for every weight and every activation site.
    Constant { weight: f64, activation: f64 },
}

impl InitMethod {
    /// Hand-tuned thresholds commonly used in place of calibration.
    pub const EXPERIENCE: InitMethod = InitMethod::Constant {
        weight: 4.0,
        activation: 16.0,
    };

    pub fn label(&self) -> &'static str {
        match self {
            InitMethod::Truncation { .. } => "truncation",
            InitMethod::Constant { .. } => "experience",
        }
    }
}

impl Default for InitMethod {
    fn default() -> Self {
        InitMethod::Truncation {
            gamma: DEFAULT_GAMMA,
        }
    }
}

/// Runs one full-precision forward pass over `batch` and returns the input
/// of every active activation site.
pub fn capture_activations(state: &ModelState, batch: &Batch) -> Result<BTreeMap<String, Tensor>> {
    let mut captured = BTreeMap::new();
    let mut g = Graph::new();
    forward(
        &mut g,
        state,
        batch,
        ForwardOptions::teacher().with_capture(&mut captured),
    )?;
    Ok(captured)
}

/// Activation thresholds from one calibration batch, keyed by site id.
pub fn calibrate_activations(
    state: &ModelState,
    batch: &Batch,
    gamma: f64,
) -> Result<BTreeMap<String, f64>> {
    let captured = capture_activations(state, batch)?;
    active_sites(&state.config)
        .into_iter()
        .filter(|s| s.kind() == SiteKind::Activation)
        .map(|site| {
            let t = captured
                .get(&site.id)
                .ok_or_else(|| Error::MissingActivation(site.id.clone()))?;
            Ok((site.id, init_scale_factor(t, gamma)?))
        })
        .collect()
}

/// Initializes a scale-factor for every active site of `state`: weights from
/// their current values, activations from a forward pass over `batch`.
///
/// The threshold marks where clipping starts, so the quantizer step is
/// `threshold / Qp`.
pub fn initialize_scales(
    state: &mut ModelState,
    batch: &Batch,
    method: InitMethod,
) -> Result<Vec<CalibrationRecord>> {
    let sites = active_sites(&state.config);
    let captured = if sites.iter().any(|s| s.kind() == SiteKind::Activation) {
        capture_activations(state, batch)?
    } else {
        BTreeMap::new()
    };
    let mut records = Vec::with_capacity(sites.len());
    let mut scales = BTreeMap::new();
    for site in sites {
        let spec = site.spec(&state.config).expect("active site");
        let kind = site.kind();
        let values = match kind {
            SiteKind::Weight => state.param(&site.id)?,
            SiteKind::Activation => captured
                .get(&site.id)
                .ok_or_else(|| Error::MissingActivation(site.id.clone()))?,
        };
        let threshold = match method {
            InitMethod::Truncation { gamma } => init_scale_factor(values, gamma)?,
            InitMethod::Constant { weight, activation } => match kind {
                SiteKind::Weight => weight,
                SiteKind::Activation => activation,
            },
        };
        let sf = ScaleFactor::new(&site.id, kind, threshold / spec.qp() as f64);
        records.push(CalibrationRecord {
            site: site.id.clone(),
            kind,
            numel: values.numel(),
            threshold,
            scale: sf.value,
            retention: retention(values.data(), threshold),
        });
        scales.insert(site.id, sf);
    }
    state.scales = scales;
    state.check_census()?;
    Ok(records)
}
