//! End-to-end finite-difference check of the training objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distill::{loss_total, LossMode};
use crate::error::{Error, Result};
use crate::gradcheck::rel_err;
use crate::graph::Graph;
use crate::lsq::Linearization;
use crate::transformer::{forward, teacher_trace, Batch, BitConfig, ForwardOptions, ModelState, TraceValues};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradcheckOptions {
    /// Absolute half step for weights.
    pub weight_step: f64,
    /// Half step for scale-factors, relative to the scale value.
    pub scale_step: f64,
    pub rel_floor: f64,
    /// Check every `stride`-th weight element.
    pub stride: usize,
    /// Relative offset applied to every scale before the scale check.
    /// Calibration puts the largest weight of a site exactly on the clamp
    /// boundary, where the quantizer has a kink.
    pub scale_offset: f64,
}

impl Default for ModelGradcheckOptions {
    fn default() -> Self {
        Self {
            weight_step: 1e-5,
            scale_step: 1e-6,
            rel_floor: 1e-6,
            stride: 1,
            scale_offset: 1e-3,
        }
    }
}

/// Worst entry of one family of checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_name: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FamilyReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let e = rel_err(analytic, numeric, floor);
        self.checked += 1;
        if e > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst_name = name.to_string();
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelGradcheckReport {
    pub weights: FamilyReport,
    pub scales: FamilyReport,
}

fn objective(
    state: &ModelState,
    teacher: &TraceValues,
    batch: &Batch,
    mode: LossMode,
    lin: Option<&mut Linearization>,
) -> Result<f64> {
    let mut g = Graph::new();
    let t = teacher.constants(&mut g);
    let mut opts = ForwardOptions::student();
    if let Some(lin) = lin {
        opts = opts.with_linearization(lin);
    }
    let (s, _) = forward(&mut g, state, batch, opts)?;
    let (_, total) = loss_total(&mut g, &s, Some(&t), &batch.labels, mode)?;
    Ok(g.value(total).item())
}

/// Compares backward gradients of the training loss with central
/// differences, dropout off.
///
/// Weight gradients are checked with every quantizer replaced by the
/// identity. Scale-factor gradients are checked with all quantizers active:
/// the rounding residuals of the unperturbed pass are frozen, and the
/// differences are taken on that straight-through linearization, whose exact
/// derivative is the quantizer's gradient rule.
pub fn model_gradcheck(
    teacher: &ModelState,
    student: &ModelState,
    batch: &Batch,
    mode: LossMode,
    opts: &ModelGradcheckOptions,
) -> Result<ModelGradcheckReport> {
    let t = teacher_trace(teacher, batch)?;
    let mut report = ModelGradcheckReport::default();

    // weights, quantization off
    let mut fp = student.requantized(BitConfig::FULL_PRECISION)?;
    let analytic: BTreeMap<String, Vec<f64>> = {
        let mut g = Graph::new();
        let tc = t.constants(&mut g);
        let (s, bind) = forward(&mut g, &fp, batch, ForwardOptions::student().trainable())?;
        let (_, total) = loss_total(&mut g, &s, Some(&tc), &batch.labels, mode)?;
        g.backward(total)?;
        bind.params
            .iter()
            .map(|(k, &v)| {
                let grad = g.grad(v).ok_or_else(|| Error::MissingGradient(k.clone()))?;
                Ok((k.clone(), grad.data().to_vec()))
            })
            .collect::<Result<_>>()?
    };
    let h = opts.weight_step;
    for (name, grad) in &analytic {
        for i in (0..grad.len()).step_by(opts.stride.max(1)) {
            let orig = fp.params[name].data()[i];
            fp.params.get_mut(name).expect("bound").data_mut()[i] = orig + h;
            let plus = objective(&fp, &t, batch, mode, None)?;
            fp.params.get_mut(name).expect("bound").data_mut()[i] = orig - h;
            let minus = objective(&fp, &t, batch, mode, None)?;
            fp.params.get_mut(name).expect("bound").data_mut()[i] = orig;
            report
                .weights
                .record(name, i, grad[i], (plus - minus) / (2.0 * h), opts.rel_floor);
        }
    }

    // scale-factors, quantization on
    if student.scales.is_empty() {
        return Ok(report);
    }
    student.check_census()?;
    let mut student = student.clone();
    for sf in student.scales.values_mut() {
        sf.value *= 1.0 + opts.scale_offset;
    }
    let mut lin = Linearization::Record(Vec::new());
    let analytic: BTreeMap<String, f64> = {
        let mut g = Graph::new();
        let tc = t.constants(&mut g);
        let o = ForwardOptions::student().trainable().with_linearization(&mut lin);
        let (s, bind) = forward(&mut g, &student, batch, o)?;
        let (_, total) = loss_total(&mut g, &s, Some(&tc), &batch.labels, mode)?;
        g.backward(total)?;
        bind.scales
            .iter()
            .map(|(k, &v)| {
                let grad = g.grad(v).ok_or_else(|| Error::MissingGradient(k.clone()))?;
                Ok((k.clone(), grad.item()))
            })
            .collect::<Result<_>>()?
    };
    let mut lin = Linearization::replay(lin.into_residuals());
    let mut work = student.clone();
    for (site, &grad) in &analytic {
        let orig = student.scales[site].value;
        let h = opts.scale_step * orig;
        let mut eval = |value: f64| -> Result<f64> {
            work.scales.get_mut(site).expect("calibrated").value = value;
            lin.rewind();
            objective(&work, &t, batch, mode, Some(&mut lin))
        };
        let plus = eval(orig + h)?;
        let minus = eval(orig - h)?;
        eval(orig)?;
        report
            .scales
            .record(site, 0, grad, (plus - minus) / (2.0 * h), opts.rel_floor);
    }
    Ok(report)
}
