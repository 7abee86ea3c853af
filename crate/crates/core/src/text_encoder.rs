//! Causal transformer over token ids, pooled at the end-of-text position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore, TransformerConfig};
use crate::tensor::{AttentionOpts, Graph, Mode, Real, Var};

/// Padded token matrix with per-row lengths (index of EOT plus one).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextBatch {
    tokens: Vec<usize>,
    lengths: Vec<usize>,
    context: usize,
}

impl TextBatch {
    /// Builds a batch from unpadded rows, each ending with `eot`.
    pub fn from_rows(rows: &[Vec<usize>], context: usize, eot: usize, pad: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(rows.len() * context);
        let mut lengths = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() > context {
                return Err(Error::invalid(format!(
                    "text row {i} has {} tokens, context length is {context}",
                    row.len()
                )));
            }
            let eots: Vec<usize> = (0..row.len()).filter(|&j| row[j] == eot).collect();
            match eots.as_slice() {
                [j] => lengths.push(j + 1),
                [] => return Err(Error::invalid(format!("text row {i} has no EOT token"))),
                _ => return Err(Error::invalid(format!("text row {i} has more than one EOT token"))),
            }
            tokens.extend_from_slice(row);
            tokens.extend(std::iter::repeat_n(pad, context - row.len()));
        }
        Ok(TextBatch {
            tokens,
            lengths,
            context,
        })
    }

    /// Wraps an already padded `[B, C]` matrix after checking the EOT rule.
    pub fn new(tokens: Vec<usize>, lengths: Vec<usize>, context: usize, eot: usize) -> Result<Self> {
        if context == 0 || tokens.len() != lengths.len() * context {
            return Err(Error::invalid("token matrix does not match lengths × context"));
        }
        for (i, (&len, row)) in lengths.iter().zip(tokens.chunks(context)).enumerate() {
            if len == 0 || len > context {
                return Err(Error::invalid(format!("text row {i} length {len} outside 1..={context}")));
            }
            if row.iter().filter(|&&t| t == eot).count() != 1 || row[len - 1] != eot {
                return Err(Error::invalid(format!(
                    "text row {i} must hold exactly one EOT, at index {}",
                    len - 1
                )));
            }
        }
        Ok(TextBatch {
            tokens,
            lengths,
            context,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.context..(i + 1) * self.context]
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> TextBatch {
        TextBatch {
            tokens: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            lengths: idx.iter().map(|&i| self.lengths[i]).collect(),
            context: self.context,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub vocab: usize,
    pub context: usize,
    pub embed_dim: usize,
    pub stack: TransformerConfig,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab: 64,
            context: 16,
            embed_dim: 64,
            stack: TransformerConfig {
                layers: 2,
                width: 64,
                heads: 4,
                ff: 128,
                dropout: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextConfig,
}

impl TextEncoder {
    pub fn new(cfg: TextConfig) -> Result<Self> {
        cfg.stack.validate("text")?;
        if cfg.vocab == 0 || cfg.context == 0 || cfg.embed_dim == 0 {
            return Err(Error::config("text", "vocab, context and embed_dim must be positive"));
        }
        Ok(TextEncoder { cfg })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        let w = c.stack.width;
        store.insert("text.tok", nn::normal_tensor(rng, &[c.vocab, w], nn::INIT_STD));
        store.insert("text.pos", nn::normal_tensor(rng, &[c.context, w], 0.01));
        nn::init_transformer(store, "text", &c.stack, rng);
        nn::init_layer_norm(store, "text.ln_final", w);
        nn::init_linear(store, "text.proj", w, c.embed_dim, false, rng);
    }

    /// `[B, D]` unit-norm embeddings.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &TextBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.cfg;
        let (b, ctx, w) = (batch.len(), batch.context, c.stack.width);
        if ctx > c.context {
            return Err(Error::invalid(format!(
                "batch context {ctx} exceeds configured context length {}",
                c.context
            )));
        }
        if b == 0 {
            return Err(Error::invalid("empty text batch"));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::invalid(format!("token id {bad} >= vocabulary size {}", c.vocab)));
        }
        let tok = g.embedding(p.get("text.tok")?, &batch.tokens)?;
        let tok = g.reshape(tok, &[b, ctx, w])?;
        let pos = g.slice(p.get("text.pos")?, 0, ctx * w)?;
        let pos = g.reshape(pos, &[ctx, w])?;
        let x = g.add(tok, pos)?;
        let attn = AttentionOpts {
            heads: c.stack.heads,
            causal: true,
            key_lengths: Some(batch.lengths.clone()),
            order_invariant: false,
        };
        let x = nn::transformer(g, p, "text", &c.stack, x, &attn, mode, rng)?;
        let x = nn::layer_norm(g, p, "text.ln_final", x)?;
        let x = g.reshape(x, &[b * ctx, w])?;
        let rows: Vec<usize> = batch.lengths.iter().enumerate().map(|(i, &l)| i * ctx + l - 1).collect();
        let pooled = g.select_rows(x, &rows)?;
        let y = nn::linear(g, p, "text.proj", pooled)?;
        Ok(g.l2_normalize(y)?)
    }
}
