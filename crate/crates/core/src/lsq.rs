//! Learned-step-size fake quantization.
//!
//! Forward: `v̂ = round(clamp(v/s, -Qn, Qp)) · s` with round-half-to-even.
//! Backward:
//! - scale: `-v/s + round(v/s)` strictly inside `(-Qn, Qp)`, otherwise the
//!   saturated level `-Qn` or `Qp`, summed over all elements;
//! - activations: straight-through inside `(-Qn, Qp)`, zero outside;
//! - weights: straight-through everywhere, clipped or not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::Tensor;

/// Lower bound applied to every scale-factor after an update.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u32,
    signed: bool,
    qn: u64,
    qp: u64,
}

impl QuantSpec {
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        let (qn, qp) = quant_levels(bits, signed)?;
        Ok(Self {
            bits,
            signed,
            qn,
            qp,
        })
    }

    pub fn signed(bits: u32) -> Result<Self> {
        Self::new(bits, true)
    }

    pub fn unsigned(bits: u32) -> Result<Self> {
        Self::new(bits, false)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn qn(&self) -> u64 {
        self.qn
    }

    pub fn qp(&self) -> u64 {
        self.qp
    }

    fn bounds(&self) -> (f64, f64) {
        (-(self.qn as f64), self.qp as f64)
    }
}

/// Integer level magnitudes `(Qn, Qp)`.
///
/// Signed tensors use `Qn = Qp = 2^(b-1) - 1`, unsigned ones `Qn = 0`,
/// `Qp = 2^b - 1`.
pub fn quant_levels(bits: u32, signed: bool) -> Result<(u64, u64)> {
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidBits(bits));
    }
    if signed {
        let q = (1u64 << (bits - 1)) - 1;
        Ok((q, q))
    } else {
        Ok((0, (1u64 << bits) - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Weight,
    Activation,
}

/// Learnable step size bound to one quantization site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactor {
    pub site: String,
    pub kind: SiteKind,
    pub value: f64,
}

impl ScaleFactor {
    pub fn new(site: impl Into<String>, kind: SiteKind, value: f64) -> Self {
        Self {
            site: site.into(),
            kind,
            value: value.max(SCALE_FLOOR),
        }
    }

    pub fn apply_floor(&mut self) {
        if !(self.value >= SCALE_FLOOR) {
            self.value = SCALE_FLOOR;
        }
    }
}

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveScale(s))
    }
}

/// Scalar quantize-dequantize.
pub fn quantize_value(v: f64, s: f64, spec: QuantSpec) -> f64 {
    let (lo, hi) = spec.bounds();
    (v / s).clamp(lo, hi).round_ties_even() * s
}

/// Integer level `round(clamp(v/s))`.
pub fn quantize_level(v: f64, s: f64, spec: QuantSpec) -> i64 {
    let (lo, hi) = spec.bounds();
    (v / s).clamp(lo, hi).round_ties_even() as i64
}

/// `∂v̂/∂s` for one element.
pub fn grad_scale(v: f64, s: f64, spec: QuantSpec) -> f64 {
    let (lo, hi) = spec.bounds();
    let z = v / s;
    if z <= lo {
        lo
    } else if z >= hi {
        hi
    } else {
        -z + z.round_ties_even()
    }
}

/// Straight-through mask for activations: 1 strictly inside the range.
pub fn grad_activation(x: f64, s: f64, spec: QuantSpec) -> f64 {
    let (lo, hi) = spec.bounds();
    let z = x / s;
    if lo < z && z < hi {
        1.0
    } else {
        0.0
    }
}

/// Weights pass gradients through unconditionally.
pub fn grad_weight(_w: f64, _s: f64, _spec: QuantSpec) -> f64 {
    1.0
}

/// Fake-quantizes a tensor outside any graph.
pub fn fake_quantize_tensor(v: &Tensor, s: f64, spec: QuantSpec) -> Result<Tensor> {
    check_scale(s)?;
    Ok(v.map(|x| quantize_value(x, s, spec)))
}

/// Graph node for one quantization site. Inputs are `[v, s]` with `s` a
/// one-element tensor.
pub struct FakeQuantize {
    spec: QuantSpec,
    kind: SiteKind,
    /// Frozen rounding residuals `round(z) - z`; when present the forward is
    /// the linearization `s · (clamp(v/s) + r)` whose exact derivative is the
    /// backward rule above.
    residual: Option<Vec<f64>>,
}

impl FakeQuantize {
    pub fn new(spec: QuantSpec, kind: SiteKind) -> Self {
        Self {
            spec,
            kind,
            residual: None,
        }
    }

    pub fn linearized(spec: QuantSpec, kind: SiteKind, residual: Vec<f64>) -> Self {
        Self {
            spec,
            kind,
            residual: Some(residual),
        }
    }
}

impl CustomOp for FakeQuantize {
    fn name(&self) -> &'static str {
        "fake_quantize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (v, s) = (inputs[0], inputs[1].item());
        check_scale(s)?;
        match &self.residual {
            None => fake_quantize_tensor(v, s, self.spec),
            Some(r) => {
                if r.len() != v.numel() {
                    return Err(Error::ShapeMismatch {
                        op: "fake_quantize residual",
                        lhs: v.shape().to_vec(),
                        rhs: vec![r.len()],
                    });
                }
                let (lo, hi) = self.spec.bounds();
                let data = v
                    .data()
                    .iter()
                    .zip(r)
                    .map(|(&x, &res)| s * ((x / s).clamp(lo, hi) + res))
                    .collect();
                Tensor::new(v.shape().to_vec(), data)
            }
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let (v, s) = (inputs[0], inputs[1].item());
        let spec = self.spec;
        let mut dv = Vec::with_capacity(v.numel());
        let mut ds = 0.0;
        for (&x, &g) in v.data().iter().zip(grad_output.data()) {
            ds += g * grad_scale(x, s, spec);
            let pass = match self.kind {
                SiteKind::Weight => grad_weight(x, s, spec),
                SiteKind::Activation => grad_activation(x, s, spec),
            };
            dv.push(g * pass);
        }
        vec![
            Some(Tensor::new(v.shape().to_vec(), dv).expect("same shape as input")),
            Some(Tensor::new(inputs[1].shape().to_vec(), vec![ds]).expect("scalar")),
        ]
    }
}

pub fn fake_quantize(g: &mut Graph, v: Var, s: Var, spec: QuantSpec, kind: SiteKind) -> Result<Var> {
    g.custom(&[v, s], Box::new(FakeQuantize::new(spec, kind)))
}

/// Rounding residuals `round(z) - z` (with `z` clamped) at the current point.
pub fn rounding_residual(v: &Tensor, s: f64, spec: QuantSpec) -> Vec<f64> {
    let (lo, hi) = spec.bounds();
    v.data()
        .iter()
        .map(|&x| {
            let z = (x / s).clamp(lo, hi);
            z.round_ties_even() - z
        })
        .collect()
}

/// How fake-quantization nodes evaluate their forward.
///
/// `Record` runs the exact quantizer and remembers each site's rounding
/// residual in call order; `Replay` evaluates the straight-through
/// linearization around those recorded residuals. Finite differences of a
/// replayed forward reproduce the backward rules exactly, which is how the
/// scale-factor gradients are checked end to end.
#[derive(Clone, Debug, Default)]
pub enum Linearization {
    #[default]
    Exact,
    Record(Vec<Vec<f64>>),
    Replay {
        residuals: Vec<Vec<f64>>,
        cursor: usize,
    },
}

impl Linearization {
    pub fn replay(residuals: Vec<Vec<f64>>) -> Self {
        Self::Replay {
            residuals,
            cursor: 0,
        }
    }

    pub fn into_residuals(self) -> Vec<Vec<f64>> {
        match self {
            Self::Exact => Vec::new(),
            Self::Record(r) | Self::Replay { residuals: r, .. } => r,
        }
    }

    pub fn rewind(&mut self) {
        if let Self::Replay { cursor, .. } = self {
            *cursor = 0;
        }
    }

    pub fn fake_quantize(
        &mut self,
        g: &mut Graph,
        v: Var,
        s: Var,
        spec: QuantSpec,
        kind: SiteKind,
    ) -> Result<Var> {
        match self {
            Self::Exact => fake_quantize(g, v, s, spec, kind),
            Self::Record(all) => {
                let scale = g.value(s).item();
                check_scale(scale)?;
                all.push(rounding_residual(g.value(v), scale, spec));
                fake_quantize(g, v, s, spec, kind)
            }
            Self::Replay { residuals, cursor } => {
                let r = residuals.get(*cursor).cloned().ok_or_else(|| {
                    Error::Config("linearization replay ran past its recording".into())
                })?;
                *cursor += 1;
                g.custom(&[v, s], Box::new(FakeQuantize::linearized(spec, kind, r)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn level_table() {
        assert_eq!(quant_levels(8, false).unwrap(), (0, 255));
        assert_eq!(quant_levels(8, true).unwrap(), (127, 127));
        assert_eq!(quant_levels(2, true).unwrap(), (1, 1));
        assert_eq!(quant_levels(4, true).unwrap(), (7, 7));
        assert!(matches!(quant_levels(1, true), Err(Error::InvalidBits(1))));
    }

    #[test]
    fn scalar_quantize_examples() {
        let s8 = QuantSpec::signed(8).unwrap();
        let s2 = QuantSpec::signed(2).unwrap();
        assert_eq!(quantize_value(0.0, 0.37, s8), 0.0);
        assert_eq!(quantize_value(0.7, 0.5, s8), 0.5);
        assert_eq!(quantize_value(100.0, 0.5, s2), 0.5);
        // half-to-even
        assert_eq!(quantize_value(0.25, 0.5, s8), 0.0);
        assert_eq!(quantize_value(0.75, 0.5, s8), 1.0);
    }

    #[test]
    fn non_positive_scale_rejected() {
        let t = Tensor::from_vec(vec![1.0]);
        let spec = QuantSpec::signed(8).unwrap();
        assert!(matches!(
            fake_quantize_tensor(&t, 0.0, spec),
            Err(Error::NonPositiveScale(_))
        ));
        let mut g = Graph::new();
        let v = g.param(t);
        let s = g.param(Tensor::scalar(-1.0));
        assert!(fake_quantize(&mut g, v, s, spec, SiteKind::Weight).is_err());
    }

    #[test]
    fn scale_gradient_branches() {
        let s2 = QuantSpec::signed(2).unwrap();
        assert!((grad_scale(0.3, 1.0, s2) - (-0.3)).abs() < 1e-15);
        assert_eq!(grad_scale(5.0, 1.0, s2), 1.0);
        assert_eq!(grad_scale(-5.0, 1.0, s2), -1.0);
        // boundaries take the saturated branch
        assert_eq!(grad_scale(1.0, 1.0, s2), 1.0);
        assert_eq!(grad_scale(-1.0, 1.0, s2), -1.0);
    }

    #[test]
    fn activation_mask_branches() {
        let s8 = QuantSpec::signed(8).unwrap();
        let s2 = QuantSpec::signed(2).unwrap();
        assert_eq!(grad_activation(0.5, 1.0, s8), 1.0);
        assert_eq!(grad_activation(10.0, 1.0, s2), 0.0);
        assert_eq!(grad_activation(1.0, 1.0, s2), 0.0);
        assert_eq!(grad_activation(-1.0, 1.0, s2), 0.0);
        let u8 = QuantSpec::unsigned(8).unwrap();
        assert_eq!(grad_activation(0.0, 1.0, u8), 0.0);
        assert_eq!(grad_activation(-0.1, 1.0, u8), 0.0);
    }

    #[test]
    fn weight_pass_through_is_unconditional() {
        let s2 = QuantSpec::signed(2).unwrap();
        assert_eq!(grad_weight(0.2, 1.0, s2), 1.0);
        assert_eq!(grad_weight(7.0, 1.0, s2), 1.0);
    }

    #[test]
    fn graph_backward_matches_rules() {
        let spec = QuantSpec::signed(2).unwrap();
        let values = vec![0.3, 5.0, -5.0, -0.2];
        for kind in [SiteKind::Weight, SiteKind::Activation] {
            let mut g = Graph::new();
            let v = g.param(Tensor::from_vec(values.clone()));
            let s = g.param(Tensor::scalar(1.0));
            let q = fake_quantize(&mut g, v, s, spec, kind).unwrap();
            assert_eq!(g.value(q).data(), &[0.0, 1.0, -1.0, -0.0]);
            let l = g.sum(q);
            g.backward(l).unwrap();
            let expected_v = match kind {
                SiteKind::Weight => vec![1.0; 4],
                SiteKind::Activation => vec![1.0, 0.0, 0.0, 1.0],
            };
            assert_eq!(g.grad(v).unwrap().data(), expected_v.as_slice());
            let ds = g.grad(s).unwrap().item();
            assert!((ds - (-0.3 + 1.0 - 1.0 + 0.2)).abs() < 1e-15);
        }
    }

    #[test]
    fn literal_derivative_in_cell_is_the_level() {
        // The exact quantizer's derivative in s inside a rounding cell is
        // round(v/s); the straight-through rule subtracts v/s from it.
        let spec = QuantSpec::signed(8).unwrap();
        let (v, s, h) = (0.7, 0.5, 1e-7);
        let fd = (quantize_value(v, s + h, spec) - quantize_value(v, s - h, spec)) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-6);
        assert!((grad_scale(v, s, spec) - (1.0 - 1.4)).abs() < 1e-12);
    }

    #[test]
    fn linearization_round_trip() {
        let spec = QuantSpec::signed(4).unwrap();
        let t = Tensor::from_vec(vec![0.13, -0.71, 2.4, 0.0]);
        let mut rec = Linearization::Record(Vec::new());
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let s = g.constant(Tensor::scalar(0.2));
        let exact = rec.fake_quantize(&mut g, v, s, spec, SiteKind::Activation).unwrap();
        let mut rep = Linearization::replay(rec.into_residuals());
        let lin = rep.fake_quantize(&mut g, v, s, spec, SiteKind::Activation).unwrap();
        for (a, b) in g.value(exact).data().iter().zip(g.value(lin).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(rep
            .fake_quantize(&mut g, v, s, spec, SiteKind::Activation)
            .is_err());
    }

    fn spec_strategy() -> impl Strategy<Value = QuantSpec> {
        (prop::sample::select(vec![2u32, 3, 4, 6, 8]), any::<bool>())
            .prop_map(|(b, signed)| QuantSpec::new(b, signed).unwrap())
    }

    proptest! {
        #[test]
        fn output_on_level_grid(v in -50.0f64..50.0, s in 0.01f64..5.0, spec in spec_strategy()) {
            let q = quantize_value(v, s, spec);
            let k = (q / s).round();
            prop_assert_eq!(k * s, q);
            prop_assert!(k >= -(spec.qn() as f64) && k <= spec.qp() as f64);
        }

        #[test]
        fn idempotent(v in -50.0f64..50.0, s in 0.01f64..5.0, spec in spec_strategy()) {
            let q = quantize_value(v, s, spec);
            prop_assert_eq!(quantize_value(q, s, spec).to_bits(), q.to_bits());
        }

        #[test]
        fn odd_symmetry(v in -50.0f64..50.0, s in 0.01f64..5.0, bits in prop::sample::select(vec![2u32, 4, 8])) {
            let spec = QuantSpec::signed(bits).unwrap();
            prop_assert_eq!(quantize_value(-v, s, spec), -quantize_value(v, s, spec));
        }
    }
}
