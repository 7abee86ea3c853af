//! Set-to-vector network that emits the image encoder's norm parameters from
//! a set of text embeddings.
//!
//! Tokens carry no positions and attend to each other without a mask; the
//! set is pooled by an order-independent mean, so any permutation of the
//! input rows gives the same bits in eval mode.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image_encoder::ParamLayout;
use crate::nn::{self, Bound, ParamStore, TransformerConfig};
use crate::tensor::{AttentionOpts, Graph, Mode, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct HypernetConfig {
    pub stack: TransformerConfig,
    pub bottleneck: usize,
    /// Skip the transformer: input projection straight into the bottleneck.
    pub transformerless: bool,
    /// Learnable positive output multiplier `exp(hyper.log_weight_scale)`.
    pub weight_scale: bool,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        HypernetConfig {
            stack: TransformerConfig {
                layers: 2,
                width: 64,
                heads: 4,
                ff: 128,
                dropout: 0.1,
            },
            bottleneck: 32,
            transformerless: false,
            weight_scale: false,
        }
    }
}

pub const LOG_WEIGHT_SCALE: &str = "hyper.log_weight_scale";

pub struct HyperOutput {
    /// `[M]`, scaled by the weight scale when enabled.
    pub params: Var,
    /// `[M]`, before the weight scale.
    pub raw: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypernet {
    pub cfg: HypernetConfig,
    input_dim: usize,
    output_dim: usize,
}

impl Hypernet {
    pub fn new(cfg: HypernetConfig, input_dim: usize, layout: &ParamLayout) -> Result<Self> {
        cfg.stack.validate("hyper")?;
        if cfg.bottleneck == 0 {
            return Err(Error::config("hyper.bottleneck", "must be at least 1"));
        }
        if layout.total() == 0 {
            return Err(Error::config("hyper", "layout is empty"));
        }
        Ok(Hypernet {
            cfg,
            input_dim,
            output_dim: layout.total(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        let w = c.stack.width;
        nn::init_linear(store, "hyper.in", self.input_dim, w, true, rng);
        if !c.transformerless {
            nn::init_transformer(store, "hyper", &c.stack, rng);
        }
        nn::init_linear(store, "hyper.bottleneck", w, c.bottleneck, true, rng);
        nn::init_layer_norm(store, "hyper.ln", c.bottleneck);
        nn::init_linear(store, "hyper.out", c.bottleneck, self.output_dim, true, rng);
        if c.weight_scale {
            store.insert(LOG_WEIGHT_SCALE, Tensor::scalar(0.0));
        }
    }

    /// `y: [K, D]` set of embeddings.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        y: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<HyperOutput> {
        let s = g.shape(y).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::invalid(format!("hypernet needs a non-empty [K, D] set, got {s:?}")));
        }
        if s[1] != self.input_dim {
            return Err(Error::invalid(format!(
                "hypernet input width {} differs from {}",
                s[1], self.input_dim
            )));
        }
        let k = s[0];
        let c = &self.cfg;
        let mut h = nn::linear(g, p, "hyper.in", y)?;
        if !c.transformerless {
            let w = c.stack.width;
            let seq = g.reshape(h, &[1, k, w])?;
            let attn = AttentionOpts {
                heads: c.stack.heads,
                causal: false,
                key_lengths: None,
                order_invariant: true,
            };
            let seq = nn::transformer(g, p, "hyper", &c.stack, seq, &attn, mode, rng)?;
            h = g.reshape(seq, &[k, w])?;
        }
        let h = nn::linear(g, p, "hyper.bottleneck", h)?;
        let h = nn::layer_norm(g, p, "hyper.ln", h)?;
        let pooled = g.mean_rows(h)?;
        let out = nn::linear(g, p, "hyper.out", pooled)?;
        let raw = g.reshape(out, &[self.output_dim])?;
        let params = if c.weight_scale {
            let ls = p.get(LOG_WEIGHT_SCALE)?;
            let sw = g.exp(ls)?;
            g.mul(raw, sw)?
        } else {
            raw
        };
        Ok(HyperOutput { params, raw })
    }
}

pub const WEIGHT_SCALE_MIN: f64 = 1e-3;
pub const WEIGHT_SCALE_MAX: f64 = 1e3;
const CALIBRATION_EPS: f64 = 1e-12;

/// Weight scale that matches the hypernet output norm to the baseline's norm
/// parameter norm, clamped to `[1e-3, 1e3]`.
pub fn calibrate_weight_scale(baseline_norm: f64, hypernet_norm: f64) -> Result<f64> {
    if !(baseline_norm.is_finite() && hypernet_norm.is_finite()) || baseline_norm < 0.0 {
        return Err(Error::invalid("calibration norms must be finite and non-negative"));
    }
    if hypernet_norm == 0.0 {
        return Err(Error::invalid("hypernet output norm is zero; cannot calibrate the weight scale"));
    }
    let ratio = baseline_norm / hypernet_norm.max(CALIBRATION_EPS);
    Ok(ratio.clamp(WEIGHT_SCALE_MIN, WEIGHT_SCALE_MAX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn setup(cfg: HypernetConfig) -> (Hypernet, ParamStore) {
        let layout = ParamLayout::from_channels(&[16, 32, 64]);
        let h = Hypernet::new(cfg, 64, &layout).unwrap();
        let mut store = ParamStore::new();
        h.init(&mut store, &mut substream(3, "init", 0));
        (h, store)
    }

    fn run(h: &Hypernet, store: &ParamStore, y: &Tensor<f32>) -> Vec<f32> {
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, |_| false);
        let yv = g.constant(y.clone());
        let out = h.forward(&mut g, &p, yv, Mode::Eval, &mut substream(0, "dropout", 0)).unwrap();
        g.data(out.params).to_vec()
    }

    fn embeddings(k: usize, seed: u64) -> Tensor<f32> {
        nn::normal_tensor(&mut substream(seed, "y", 0), &[k, 64], 0.125)
    }

    #[test]
    fn output_has_layout_width_and_is_finite() {
        let (h, store) = setup(HypernetConfig::default());
        let out = run(&h, &store, &embeddings(1, 1));
        assert_eq!(out.len(), 224);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(!store.names().any(|n| n.contains("pos")));
    }

    #[test]
    fn empty_set_and_wrong_width_fail() {
        let (h, store) = setup(HypernetConfig::default());
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, |_| false);
        let mut rng = substream(0, "d", 0);
        let e = g.constant(Tensor::zeros(&[0, 64]));
        assert!(h.forward(&mut g, &p, e, Mode::Eval, &mut rng).is_err());
        let w = g.constant(Tensor::zeros(&[2, 32]));
        assert!(h.forward(&mut g, &p, w, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn duplicated_set_gives_same_output() {
        let (h, store) = setup(HypernetConfig::default());
        let y = embeddings(5, 2);
        let twice = Tensor::new(vec![10, 64], [y.data(), y.data()].concat()).unwrap();
        let a = run(&h, &store, &y);
        let b = run(&h, &store, &twice);
        for (x, z) in a.iter().zip(&b) {
            assert!((x - z).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_stack_matches_transformerless() {
        let (full, mut store) = setup(HypernetConfig::default());
        for l in 0..2 {
            for n in ["attn.o.w", "attn.o.b", "ff2.w", "ff2.b"] {
                let t = store.get_mut(&format!("hyper.layer{l}.{n}")).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let lite = Hypernet {
            cfg: HypernetConfig {
                transformerless: true,
                ..HypernetConfig::default()
            },
            ..full.clone()
        };
        let y = embeddings(6, 4);
        assert_eq!(run(&full, &store, &y), run(&lite, &store, &y));
    }

    #[test]
    fn weight_scale_multiplies_output() {
        let cfg = HypernetConfig {
            weight_scale: true,
            ..HypernetConfig::default()
        };
        let (h, mut store) = setup(cfg);
        let y = embeddings(3, 5);
        let base = run(&h, &store, &y);
        store.insert(LOG_WEIGHT_SCALE, Tensor::scalar(3f32.ln()));
        let scaled = run(&h, &store, &y);
        for (a, b) in base.iter().zip(&scaled) {
            assert!((3.0 * a - b).abs() < 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn calibration_ratios() {
        assert_eq!(calibrate_weight_scale(10.0, 5.0).unwrap(), 2.0);
        assert_eq!(calibrate_weight_scale(4.0, 4.0).unwrap(), 1.0);
        assert_eq!(calibrate_weight_scale(1e9, 1.0).unwrap(), 1e3);
        assert_eq!(calibrate_weight_scale(0.0, 1.0).unwrap(), 1e-3);
        assert!(calibrate_weight_scale(1.0, 0.0).is_err());
    }
}
