use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lsq::{QuantSpec, ScaleFactor, SiteKind};
use crate::tensor::Tensor;

use super::config::ModelConfig;

/// Which bit-width class governs a quantization site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteClass {
    Weight,
    Embedding,
    Activation,
}

/// One place where fake quantization is inserted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Site {
    pub id: String,
    pub class: SiteClass,
    pub signed: bool,
}

impl Site {
    pub fn kind(&self) -> SiteKind {
        match self.class {
            SiteClass::Activation => SiteKind::Activation,
            _ => SiteKind::Weight,
        }
    }

    pub fn bits(&self, config: &ModelConfig) -> u32 {
        match self.class {
            SiteClass::Weight => config.bits.weight,
            SiteClass::Embedding => config.bits.embedding,
            SiteClass::Activation => config.bits.activation,
        }
    }

    /// Quantizer for this site, `None` when its class runs at 32 bits.
    pub fn spec(&self, config: &ModelConfig) -> Option<QuantSpec> {
        let bits = self.bits(config);
        (bits < 32).then(|| QuantSpec::new(bits, self.signed).expect("validated bit-width"))
    }
}

pub const WORD_EMBEDDING: &str = "embeddings.word";
pub const SEGMENT_EMBEDDING: &str = "embeddings.segment";
pub const POSITION_EMBEDDING: &str = "embeddings.position";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

pub const NUM_SEGMENTS: usize = 2;

pub(crate) fn layer_param(layer: usize, name: &str) -> String {
    format!("layer.{layer}.{name}")
}

/// Quantized weight matrices in each layer.
pub const LAYER_WEIGHT_SITES: [&str; 6] = [
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2",
];

/// Activation sites in each layer: inputs of the six linears and both
/// operands of the two attention matmuls. The attention probabilities are
/// non-negative and use the unsigned range.
pub const LAYER_ACTIVATION_SITES: [(&str, bool); 10] = [
    ("attn.q_in", true),
    ("attn.k_in", true),
    ("attn.v_in", true),
    ("attn.qk.lhs", true),
    ("attn.qk.rhs", true),
    ("attn.pv.lhs", false),
    ("attn.pv.rhs", true),
    ("attn.o_in", true),
    ("ffn.w1_in", true),
    ("ffn.w2_in", true),
];

/// Every potential quantization site, regardless of bit-widths.
pub fn quant_sites(config: &ModelConfig) -> Vec<Site> {
    let mut sites = vec![Site {
        id: WORD_EMBEDDING.to_string(),
        class: SiteClass::Embedding,
        signed: true,
    }];
    for l in 0..config.layers {
        for w in LAYER_WEIGHT_SITES {
            sites.push(Site {
                id: layer_param(l, w),
                class: SiteClass::Weight,
                signed: true,
            });
        }
        for (a, signed) in LAYER_ACTIVATION_SITES {
            sites.push(Site {
                id: layer_param(l, a),
                class: SiteClass::Activation,
                signed,
            });
        }
    }
    sites
}

/// Sites whose class is quantized under the config's bit-widths.
pub fn active_sites(config: &ModelConfig) -> Vec<Site> {
    quant_sites(config)
        .into_iter()
        .filter(|s| s.bits(config) < 32)
        .collect()
}

/// Parameter names and shapes in canonical order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (config.hidden, config.ffn);
    let mut out = vec![
        (WORD_EMBEDDING.to_string(), vec![config.vocab, d]),
        (SEGMENT_EMBEDDING.to_string(), vec![NUM_SEGMENTS, d]),
        (POSITION_EMBEDDING.to_string(), vec![config.max_seq, d]),
    ];
    for l in 0..config.layers {
        let mut push = |name: &str, shape: Vec<usize>| out.push((layer_param(l, name), shape));
        push("attn.wq", vec![d, d]);
        push("attn.wk", vec![d, d]);
        push("attn.wv", vec![d, d]);
        push("attn.wo", vec![d, d]);
        push("attn_ln.gain", vec![d]);
        push("attn_ln.bias", vec![d]);
        push("ffn.w1", vec![d, f]);
        push("ffn.b1", vec![f]);
        push("ffn.w2", vec![f, d]);
        push("ffn.b2", vec![d]);
        push("ffn_ln.gain", vec![d]);
        push("ffn_ln.bias", vec![d]);
    }
    out.push((CLASSIFIER_WEIGHT.to_string(), vec![d, config.num_classes]));
    out.push((CLASSIFIER_BIAS.to_string(), vec![config.num_classes]));
    out
}

/// Weights plus scale-factors of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    /// Keyed by site id. Empty until calibration.
    pub scales: BTreeMap<String, ScaleFactor>,
}

impl ModelState {
    /// Random initialization: normal(0, `std`) matrices, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut params = BTreeMap::new();
        for (name, shape) in param_shapes(&config) {
            let t = if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            params,
            scales: BTreeMap::new(),
        })
    }

    /// Zero weights everywhere (gains included), for degenerate-case tests.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(&config)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        Ok(Self {
            config,
            params,
            scales: BTreeMap::new(),
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copy of the weights under a different bit assignment, without scales.
    pub fn requantized(&self, bits: super::config::BitConfig) -> Result<Self> {
        let config = self.config.clone().with_bits(bits);
        config.validate()?;
        Ok(Self {
            config,
            params: self.params.clone(),
            scales: BTreeMap::new(),
        })
    }

    /// Checks the structural invariants: parameter shapes match the config,
    /// every active site has exactly one scale-factor of the right kind, and
    /// no exempt tensor carries one.
    pub fn check_census(&self) -> Result<()> {
        for (name, shape) in param_shapes(&self.config) {
            let t = self.param(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter census",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let active = active_sites(&self.config);
        for site in &active {
            match self.scales.get(&site.id) {
                Some(sf) if sf.kind == site.kind() && sf.site == site.id => {}
                Some(_) => {
                    return Err(Error::Config(format!(
                        "scale-factor for `{}` has the wrong kind",
                        site.id
                    )))
                }
                None => return Err(Error::Uncalibrated(site.id.clone())),
            }
        }
        if self.scales.len() != active.len() {
            let extra = self
                .scales
                .keys()
                .find(|k| !active.iter().any(|s| &s.id == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Config(format!(
                "scale-factor attached to non-quantized site `{extra}`"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::config::BitConfig;

    #[test]
    fn site_census() {
        let cfg = ModelConfig::toy();
        let sites = quant_sites(&cfg);
        let weights = sites.iter().filter(|s| s.kind() == SiteKind::Weight).count();
        let acts = sites.iter().filter(|s| s.kind() == SiteKind::Activation).count();
        assert_eq!(weights, 6 * cfg.layers + 1);
        assert_eq!(acts, 10 * cfg.layers);
        assert!(active_sites(&cfg).is_empty());

        let cfg = cfg.with_bits(BitConfig::new(2, 32, 8));
        let active = active_sites(&cfg);
        assert_eq!(active.len(), 6 * 2 + 10 * 2);
        assert!(!active.iter().any(|s| s.id == WORD_EMBEDDING));
    }

    #[test]
    fn exempt_tensors_are_not_sites() {
        let cfg = ModelConfig::toy();
        let ids: Vec<String> = quant_sites(&cfg).into_iter().map(|s| s.id).collect();
        for (name, _) in param_shapes(&cfg) {
            let exempt = name.starts_with("embeddings.segment")
                || name.starts_with("embeddings.position")
                || name.starts_with("classifier")
                || name.contains("_ln.")
                || name.ends_with(".b1")
                || name.ends_with(".b2");
            assert_eq!(ids.contains(&name), !exempt, "{name}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::init(ModelConfig::toy(), 3, 0.02).unwrap();
        let b = ModelState::init(ModelConfig::toy(), 3, 0.02).unwrap();
        let c = ModelState::init(ModelConfig::toy(), 4, 0.02).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.param("layer.1.ffn_ln.gain").unwrap().data(), &[1.0; 32]);
        assert!(a.check_census().is_ok());
    }
}
