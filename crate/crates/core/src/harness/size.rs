//! Model-size accounting.

use serde::{Deserialize, Serialize};

use crate::transformer::{active_sites, param_shapes, quant_sites, ModelConfig, SiteClass};

/// Bytes per megabyte in reported sizes.
pub const MB: f64 = (1u64 << 20) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub params: usize,
    pub quantized_params: usize,
    pub scale_factors: usize,
    pub bytes: f64,
    pub full_precision_bytes: f64,
    pub ratio: f64,
}

impl SizeReport {
    pub fn megabytes(&self) -> f64 {
        self.bytes / MB
    }
}

/// Parameter bytes under the config's bit-widths: quantized weights at
/// `bits / 8` bytes each, everything else at 4 bytes, plus 4 bytes per
/// scale-factor.
pub fn quantized_model_size(config: &ModelConfig) -> SizeReport {
    let sites = quant_sites(config);
    let class_of = |name: &str| sites.iter().find(|s| s.id == name).map(|s| s.class);
    let mut params = 0;
    let mut quantized_params = 0;
    let mut bits_total = 0.0;
    for (name, shape) in param_shapes(config) {
        let n: usize = shape.iter().product();
        params += n;
        let bits = match class_of(&name) {
            Some(SiteClass::Weight) => config.bits.weight,
            Some(SiteClass::Embedding) => config.bits.embedding,
            _ => 32,
        };
        if bits < 32 {
            quantized_params += n;
        }
        bits_total += n as f64 * bits as f64;
    }
    let scale_factors = active_sites(config).len();
    let bytes = bits_total / 8.0 + 4.0 * scale_factors as f64;
    let full_precision_bytes = 4.0 * params as f64;
    SizeReport {
        params,
        quantized_params,
        scale_factors,
        bytes,
        full_precision_bytes,
        ratio: full_precision_bytes / bytes,
    }
}
