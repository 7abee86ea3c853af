//! Sigmoid pairwise image-text loss with learnable scale and bias.
//!
//! Labels are implicit: `+1` on the diagonal, `-1` elsewhere. The scale is
//! stored as a log so it stays positive.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const ETA_RAW: &str = "loss.eta_raw";
pub const ZETA: &str = "loss.zeta";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub eta_raw: f32,
    pub zeta: f32,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            eta_raw: 10f32.ln(),
            zeta: -10.0,
        }
    }
}

impl LossParams {
    pub fn eta(&self) -> f32 {
        self.eta_raw.exp()
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(ETA_RAW, Tensor::scalar(self.eta_raw));
        store.insert(ZETA, Tensor::scalar(self.zeta));
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(LossParams {
            eta_raw: store.require(ETA_RAW)?.data()[0],
            zeta: store.require(ZETA)?.data()[0],
        })
    }
}

fn check_pair<T: Real>(g: &Graph<T>, x: Var, y: Var) -> Result<usize> {
    let (sx, sy) = (g.shape(x), g.shape(y));
    if sx.len() != 2 || sx != sy {
        return Err(Error::invalid(format!("image and text embeddings differ: {sx:?} vs {sy:?}")));
    }
    if sx[0] == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(sx[0])
}

/// `-(1/B) Σ_ij log σ(z_ij (η x_i·y_j + ζ))` built from elementary ops.
pub fn siglip_loss<T: Real>(g: &mut Graph<T>, x: Var, y: Var, eta_raw: Var, zeta: Var) -> Result<Var> {
    let b = check_pair(g, x, y)?;
    let yt = g.transpose(y)?;
    let sim = g.matmul(x, yt)?;
    let eta = g.exp(eta_raw)?;
    let logits = g.mul(sim, eta)?;
    let logits = g.add(logits, zeta)?;
    let signed = g.pairwise_sign(logits)?;
    let ls = g.log_sigmoid(signed)?;
    let total = g.sum(ls)?;
    Ok(g.scale(total, -1.0 / b as f64)?)
}

/// Same value as [`siglip_loss`], evaluated in `chunk × chunk` blocks.
pub fn siglip_loss_chunked<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    y: Var,
    eta_raw: Var,
    zeta: Var,
    chunk: usize,
) -> Result<Var> {
    check_pair(g, x, y)?;
    if chunk == 0 {
        return Err(Error::invalid("chunk size must be at least 1"));
    }
    let eta = g.exp(eta_raw)?;
    Ok(g.siglip_chunked(x, y, eta, zeta, chunk)?)
}
