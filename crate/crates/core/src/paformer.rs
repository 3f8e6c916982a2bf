//! Attention-based estimator. Each PA is one token built from its position
//! and its lifted pilot row, so the same weights serve any antenna count.

use diffcore::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PassError, Result};
use crate::model::Estimator;
use crate::nn::{layer_norm, layer_norm_specs, linear, linear_specs, mlp, mlp_specs, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaFormerConfig {
    pub d_hid: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub pilot_slots: usize,
    pub d_out: usize,
    /// One layer norm per block, before attention only. When false the block
    /// also normalizes before the feed-forward net and keeps the un-normalized
    /// residual stream.
    pub single_norm_block: bool,
}

impl Default for PaFormerConfig {
    fn default() -> Self {
        Self {
            d_hid: 64,
            num_blocks: 4,
            num_heads: 4,
            ffn_mult: 2,
            pilot_slots: 4,
            d_out: 2,
            single_norm_block: true,
        }
    }
}

impl PaFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_out != 2 {
            return Err(PassError::Config(format!("d_out must be 2, got {}", self.d_out)));
        }
        if self.num_blocks == 0 || self.num_heads == 0 || self.ffn_mult == 0 || self.pilot_slots == 0 {
            return Err(PassError::Config(
                "num_blocks, num_heads, ffn_mult and pilot_slots must be positive".into(),
            ));
        }
        if self.d_hid == 0 || self.d_hid % self.num_heads != 0 {
            return Err(PassError::Config(format!(
                "d_hid = {} is not divisible into {} heads",
                self.d_hid, self.num_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_hid / self.num_heads
    }
}

#[derive(Clone, Debug)]
pub struct PaFormer {
    cfg: PaFormerConfig,
}

impl PaFormer {
    pub fn new(cfg: PaFormerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PaFormerConfig {
        &self.cfg
    }

    /// Tokens `[x_n, Y_bar row n]` of width `2T + 1`, embedded per token.
    pub fn input_embed(&self, g: &mut Graph, store: &ParamStore, positions: Var, signals: Var) -> Result<Var> {
        let (ps, ss) = (g.shape(positions).to_vec(), g.shape(signals).to_vec());
        if ps.len() != 3 || ss.len() != 3 || ps[..2] != ss[..2] || ps[2] != 1 || ss[2] != 2 * self.cfg.pilot_slots {
            return Err(PassError::Shape(format!(
                "positions {ps:?} and pilots {ss:?} do not form B x N x (1 + {}) tokens",
                2 * self.cfg.pilot_slots
            )));
        }
        let v = g.concat(&[positions, signals], 2)?;
        mlp(g, store, "embed", v)
    }

    /// Multi-head scaled dot-product self-attention over the token axis.
    /// Returns the projected output and the `B x H x N x N` weights.
    pub fn attention(&self, g: &mut Graph, store: &ParamStore, block: usize, z: Var) -> Result<(Var, Var)> {
        let shape = g.shape(z).to_vec();
        let (b, n) = (shape[0], shape[1]);
        let (h, dh) = (self.cfg.num_heads, self.cfg.head_dim());
        let split = |g: &mut Graph, name: &str| -> Result<Var> {
            let x = linear(g, store, &format!("block{block}.attn.{name}"), z)?;
            let x = g.reshape(x, &[b, n, h, dh])?;
            Ok(g.permute(x, &[0, 2, 1, 3])?)
        };
        let q = split(g, "query")?;
        let k = split(g, "key")?;
        let v = split(g, "value")?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores)?;
        let out = g.matmul(weights, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, n, h * dh])?;
        Ok((linear(g, store, &format!("block{block}.attn.out"), out)?, weights))
    }

    /// One self-attention block. Returns the block output and its attention
    /// weights.
    pub fn sab_forward(&self, g: &mut Graph, store: &ParamStore, block: usize, z: Var) -> Result<(Var, Var)> {
        let zn = layer_norm(g, store, &format!("block{block}.norm"), z)?;
        let (a, weights) = self.attention(g, store, block, zn)?;
        if self.cfg.single_norm_block {
            let z1 = g.add(zn, a)?;
            let f = mlp(g, store, &format!("block{block}.ffn"), z1)?;
            Ok((g.add(z1, f)?, weights))
        } else {
            let z1 = g.add(z, a)?;
            let z1n = layer_norm(g, store, &format!("block{block}.ffn_norm"), z1)?;
            let f = mlp(g, store, &format!("block{block}.ffn"), z1n)?;
            Ok((g.add(z1, f)?, weights))
        }
    }

    /// Forward pass returning `H_hat: B x N x 2` and each block's attention
    /// weights.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        positions: Var,
        signals: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let mut z = self.input_embed(g, store, positions, signals)?;
        let mut all = Vec::with_capacity(self.cfg.num_blocks);
        for l in 0..self.cfg.num_blocks {
            let (next, w) = self.sab_forward(g, store, l, z)?;
            z = next;
            all.push(w);
        }
        Ok((linear(g, store, "head", z)?, all))
    }
}

impl Estimator for PaFormer {
    fn id(&self) -> &'static str {
        "paformer-v1"
    }

    fn pilot_slots(&self) -> usize {
        self.cfg.pilot_slots
    }

    fn capacity(&self) -> Option<usize> {
        None
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.cfg;
        let d = c.d_hid;
        let mut s = Vec::new();
        mlp_specs(&mut s, "embed", 2 * c.pilot_slots + 1, d, d);
        for l in 0..c.num_blocks {
            layer_norm_specs(&mut s, &format!("block{l}.norm"), d);
            for name in ["query", "key", "value", "out"] {
                linear_specs(&mut s, &format!("block{l}.attn.{name}"), d, d);
            }
            if !c.single_norm_block {
                layer_norm_specs(&mut s, &format!("block{l}.ffn_norm"), d);
            }
            mlp_specs(&mut s, &format!("block{l}.ffn"), d, c.ffn_mult * d, d);
        }
        linear_specs(&mut s, "head", d, c.d_out);
        s
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, positions: Var, signals: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, store, positions, signals)?.0)
    }

    /// Matrix multiply-adds per sample: token-wise layers grow linearly in
    /// `n`, attention scores and mixing quadratically.
    fn flops(&self, n: usize) -> u64 {
        let c = &self.cfg;
        let (n, d, m) = (n as u64, c.d_hid as u64, c.ffn_mult as u64);
        let embed = n * (2 * c.pilot_slots as u64 + 1) * d + n * d * d;
        let block = 4 * n * d * d + 2 * n * n * d + 2 * m * n * d * d;
        embed + c.num_blocks as u64 * block + n * d * c.d_out as u64
    }
}
