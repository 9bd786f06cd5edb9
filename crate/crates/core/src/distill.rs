//! Teacher-student losses.
//!
//! `trm = hidden + att`, `kd = pre + trm`, and the optimized total is `gt`,
//! `kd` or `kd + gt` depending on [`LossMode`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::transformer::ForwardTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "gt-only")]
    GtOnly,
    #[serde(rename = "kd-only")]
    KdOnly,
    #[serde(rename = "kd+gt")]
    KdGt,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::GtOnly, LossMode::KdOnly, LossMode::KdGt];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::GtOnly => "gt-only",
            LossMode::KdOnly => "kd-only",
            LossMode::KdGt => "kd+gt",
        }
    }

    /// Row label used in ablation reports.
    pub fn ablation_label(&self) -> &'static str {
        match self {
            LossMode::GtOnly => "LSQ",
            LossMode::KdOnly => "LSQ+KD",
            LossMode::KdGt => "LSQ+KD+Lgt",
        }
    }

    pub fn uses_teacher(&self) -> bool {
        !matches!(self, LossMode::GtOnly)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt-only" | "gt" => Ok(LossMode::GtOnly),
            "kd-only" | "kd" => Ok(LossMode::KdOnly),
            "kd+gt" => Ok(LossMode::KdGt),
            other => Err(Error::InvalidLossMode(other.to_string())),
        }
    }
}

/// Scalar values of every loss component at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub hidden: f64,
    pub att: f64,
    pub trm: f64,
    pub pre: f64,
    pub kd: f64,
    pub gt: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.hidden,
            self.att,
            self.trm,
            self.pre,
            self.kd,
            self.gt,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Largest violation of the composition identities.
    pub fn additivity_error(&self, mode: LossMode) -> f64 {
        let total = match mode {
            LossMode::GtOnly => self.gt,
            LossMode::KdOnly => self.kd,
            LossMode::KdGt => self.kd + self.gt,
        };
        [
            (self.trm - (self.hidden + self.att)).abs(),
            (self.kd - (self.pre + self.trm)).abs(),
            (self.total - total).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = match vars.first() {
        Some(&v) => v,
        None => return Ok(g.constant(Tensor::scalar(0.0))),
    };
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn check_depth(what: &'static str, s: usize, t: usize) -> Result<()> {
    if s == t {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: what,
            lhs: vec![s],
            rhs: vec![t],
        })
    }
}

/// Sum over the embedding output and every layer output of the per-entry
/// MSE between student and teacher hidden states.
pub fn loss_hidden(g: &mut Graph, student: &ForwardTrace, teacher: &ForwardTrace) -> Result<Var> {
    check_depth("loss_hidden", student.hidden.len(), teacher.hidden.len())?;
    let terms = student
        .hidden
        .iter()
        .zip(&teacher.hidden)
        .map(|(&s, &t)| g.mse(s, t))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(g, &terms)
}

/// Sum over layers of the MSE between pre-softmax attention scores.
pub fn loss_att(g: &mut Graph, student: &ForwardTrace, teacher: &ForwardTrace) -> Result<Var> {
    check_depth("loss_att", student.scores.len(), teacher.scores.len())?;
    let terms = student
        .scores
        .iter()
        .zip(&teacher.scores)
        .map(|(&s, &t)| g.mse(s, t))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(g, &terms)
}

/// Graph nodes of the distillation terms.
#[derive(Clone, Copy, Debug)]
pub struct KdTerms {
    pub hidden: Var,
    pub att: Var,
    pub trm: Var,
    pub pre: Var,
    pub kd: Var,
}

pub fn loss_kd(g: &mut Graph, student: &ForwardTrace, teacher: &ForwardTrace) -> Result<KdTerms> {
    let hidden = loss_hidden(g, student, teacher)?;
    let att = loss_att(g, student, teacher)?;
    let trm = g.add(hidden, att)?;
    let pre = g.soft_cross_entropy(student.logits, teacher.logits)?;
    let kd = g.add(pre, trm)?;
    Ok(KdTerms {
        hidden,
        att,
        trm,
        pre,
        kd,
    })
}

/// Builds the training objective. Every component is recorded whatever the
/// mode; without a teacher the distillation components are zero and only
/// `gt-only` is accepted.
pub fn loss_total(
    g: &mut Graph,
    student: &ForwardTrace,
    teacher: Option<&ForwardTrace>,
    labels: &[usize],
    mode: LossMode,
) -> Result<(LossBreakdown, Var)> {
    let gt = g.cross_entropy(student.logits, labels)?;
    let kd = match teacher {
        Some(t) => Some(loss_kd(g, student, t)?),
        None if mode.uses_teacher() => {
            return Err(Error::Config(format!("loss mode {mode} needs a teacher")))
        }
        None => None,
    };
    let total = match (mode, &kd) {
        (LossMode::GtOnly, _) => gt,
        (LossMode::KdOnly, Some(k)) => k.kd,
        (LossMode::KdGt, Some(k)) => g.add(k.kd, gt)?,
        _ => unreachable!("teacher presence checked above"),
    };
    let v = |var: Var| g.value(var).item();
    let breakdown = match kd {
        Some(k) => LossBreakdown {
            hidden: v(k.hidden),
            att: v(k.att),
            trm: v(k.trm),
            pre: v(k.pre),
            kd: v(k.kd),
            gt: v(gt),
            total: v(total),
        },
        None => LossBreakdown {
            gt: v(gt),
            total: v(total),
            ..LossBreakdown::default()
        },
    };
    Ok((breakdown, total))
}
