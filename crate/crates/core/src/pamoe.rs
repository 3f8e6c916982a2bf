//! Mixture-of-experts estimator over a fixed-capacity padded antenna axis.
//!
//! Pipeline: pad positions and pilots to `n_max` rows with learnable filler
//! rows, embed positions with multi-scale sinusoids and pilots with an MLP,
//! gate the pilot features by the position features, mix with a softly
//! routed set of MLP-Mixer experts, then map `[Z_pos, Z_moe]` to two outputs
//! per row and keep the first `N` rows.

use std::f64::consts::PI;

use diffcore::{Graph, Init, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PassError, Result};
use crate::model::Estimator;
use crate::nn::{layer_norm, layer_norm_specs, linear, linear_specs, mlp, mlp_specs, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaMoeConfig {
    pub n_max: usize,
    pub num_freqs: usize,
    pub d_embed: usize,
    pub d_hid: usize,
    pub num_experts: usize,
    pub d_out: usize,
    pub pilot_slots: usize,
}

impl Default for PaMoeConfig {
    fn default() -> Self {
        Self {
            n_max: 32,
            num_freqs: 16,
            d_embed: 64,
            d_hid: 64,
            num_experts: 4,
            d_out: 2,
            pilot_slots: 4,
        }
    }
}

impl PaMoeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PassError::Config(m));
        if self.d_out != 2 {
            return bad(format!("d_out must be 2, got {}", self.d_out));
        }
        if self.d_embed != self.d_hid {
            return bad(format!(
                "position and signal embeddings are summed, so d_embed ({}) must equal d_hid ({})",
                self.d_embed, self.d_hid
            ));
        }
        for (name, v) in [
            ("n_max", self.n_max),
            ("num_freqs", self.num_freqs),
            ("d_hid", self.d_hid),
            ("num_experts", self.num_experts),
            ("pilot_slots", self.pilot_slots),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    fn d_sig(&self) -> usize {
        2 * self.pilot_slots
    }
}

/// Frequencies `2^f pi` for `f = 0..F-1`.
pub fn frequency_bases(num_freqs: usize) -> Vec<f64> {
    (0..num_freqs).map(|f| 2f64.powi(f as i32) * PI).collect()
}

/// `[sin(x f), cos(x f)]` of a `B x N x 1` position tensor, width `2F`.
pub fn fourier_features(g: &mut Graph, positions: Var, num_freqs: usize) -> Result<Var> {
    let freqs = g.input(Tensor::from_vec(vec![num_freqs], frequency_bases(num_freqs))?);
    let theta = g.mul(positions, freqs)?;
    let s = g.sin(theta);
    let c = g.cos(theta);
    Ok(g.concat(&[s, c], 2)?)
}

#[derive(Clone, Debug)]
pub struct PaMoe {
    cfg: PaMoeConfig,
}

impl PaMoe {
    pub fn new(cfg: PaMoeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PaMoeConfig {
        &self.cfg
    }

    /// Extend `B x N x 1` positions and `B x N x 2T` pilots to `n_max` rows
    /// with the learnable filler rows.
    pub fn dynamic_pad(&self, g: &mut Graph, store: &ParamStore, positions: Var, signals: Var) -> Result<(Var, Var)> {
        let shape = g.shape(positions).to_vec();
        let (b, n) = (shape[0], shape[1]);
        if n > self.cfg.n_max {
            return Err(PassError::Capacity { n, n_max: self.cfg.n_max });
        }
        if g.shape(signals) != [b, n, self.cfg.d_sig()] {
            return Err(PassError::Shape(format!(
                "pilot tensor {:?} does not match positions {shape:?} with 2T = {}",
                g.shape(signals),
                self.cfg.d_sig()
            )));
        }
        if n == self.cfg.n_max {
            return Ok((positions, signals));
        }
        let pad = self.cfg.n_max - n;
        let phi1 = g.param(store, "pad.positions")?;
        let phi1 = g.broadcast_to(phi1, &[b, pad, 1])?;
        let phi2 = g.param(store, "pad.signals")?;
        let phi2 = g.broadcast_to(phi2, &[b, pad, self.cfg.d_sig()])?;
        Ok((g.concat(&[positions, phi1], 1)?, g.concat(&[signals, phi2], 1)?))
    }

    pub fn fourier_embed(&self, g: &mut Graph, store: &ParamStore, positions: Var) -> Result<Var> {
        let e = fourier_features(g, positions, self.cfg.num_freqs)?;
        linear(g, store, "pos_proj", e)
    }

    /// `sigmoid(Z_pos W_g + b_g) * Z_sig + Z_pos`.
    pub fn gated_fusion(&self, g: &mut Graph, store: &ParamStore, z_pos: Var, z_sig: Var) -> Result<Var> {
        if g.shape(z_pos) != g.shape(z_sig) {
            return Err(PassError::Shape(format!(
                "cannot fuse {:?} with {:?}",
                g.shape(z_pos),
                g.shape(z_sig)
            )));
        }
        let gate = linear(g, store, "gate", z_pos)?;
        let gate = g.sigmoid(gate);
        let z = g.mul(gate, z_sig)?;
        Ok(g.add(z, z_pos)?)
    }

    /// One MLP-Mixer block: token mixing across the padded antenna axis, then
    /// channel mixing across features, each with a residual.
    pub fn expert(&self, g: &mut Graph, store: &ParamStore, e: usize, z: Var) -> Result<Var> {
        let y = layer_norm(g, store, &format!("expert{e}.token_norm"), z)?;
        let y = g.transpose(y)?;
        let y = mlp(g, store, &format!("expert{e}.token"), y)?;
        let y = g.transpose(y)?;
        let z = g.add(z, y)?;
        let y = layer_norm(g, store, &format!("expert{e}.channel_norm"), z)?;
        let y = mlp(g, store, &format!("expert{e}.channel"), y)?;
        Ok(g.add(z, y)?)
    }

    /// Dense softmax routing over all experts. Returns `(Z_moe, alpha)` with
    /// `alpha` of shape `B x E`.
    pub fn moe_layer(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let b = g.shape(z)[0];
        let pooled = g.mean(z, 1)?;
        let logits = linear(g, store, "router", pooled)?;
        let alpha = g.softmax(logits)?;
        let mut out: Option<Var> = None;
        for e in 0..self.cfg.num_experts {
            let ze = self.expert(g, store, e, z)?;
            let a = g.slice(alpha, 1, e, 1)?;
            let a = g.reshape(a, &[b, 1, 1])?;
            let w = g.mul(ze, a)?;
            out = Some(match out {
                None => w,
                Some(acc) => g.add(acc, w)?,
            });
        }
        Ok((out.expect("at least one expert"), alpha))
    }

    /// Full forward pass returning `(H_hat: B x N x 2, alpha: B x E)`.
    pub fn forward_with_gates(&self, g: &mut Graph, store: &ParamStore, positions: Var, signals: Var) -> Result<(Var, Var)> {
        let n = g.shape(positions)[1];
        let (p, s) = self.dynamic_pad(g, store, positions, signals)?;
        let z_pos = self.fourier_embed(g, store, p)?;
        let z_sig = mlp(g, store, "sig", s)?;
        let z = self.gated_fusion(g, store, z_pos, z_sig)?;
        let (z_moe, alpha) = self.moe_layer(g, store, z)?;
        let cat = g.concat(&[z_pos, z_moe], 2)?;
        let full = linear(g, store, "head", cat)?;
        Ok((g.slice(full, 1, 0, n)?, alpha))
    }
}

impl Estimator for PaMoe {
    fn id(&self) -> &'static str {
        "pamoe-v1"
    }

    fn pilot_slots(&self) -> usize {
        self.cfg.pilot_slots
    }

    fn capacity(&self) -> Option<usize> {
        Some(self.cfg.n_max)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.cfg;
        let d = c.d_hid;
        let mut s = vec![
            ParamSpec::new("pad.positions", &[1, 1, 1], Init::Normal(0.02)),
            ParamSpec::new("pad.signals", &[1, 1, c.d_sig()], Init::Normal(0.02)),
        ];
        linear_specs(&mut s, "pos_proj", 2 * c.num_freqs, c.d_embed);
        mlp_specs(&mut s, "sig", c.d_sig(), d, d);
        linear_specs(&mut s, "gate", d, d);
        for e in 0..c.num_experts {
            layer_norm_specs(&mut s, &format!("expert{e}.token_norm"), d);
            mlp_specs(&mut s, &format!("expert{e}.token"), c.n_max, 2 * c.n_max, c.n_max);
            layer_norm_specs(&mut s, &format!("expert{e}.channel_norm"), d);
            mlp_specs(&mut s, &format!("expert{e}.channel"), d, 2 * d, d);
        }
        linear_specs(&mut s, "router", d, c.num_experts);
        linear_specs(&mut s, "head", 2 * d, c.d_out);
        s
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, positions: Var, signals: Var) -> Result<Var> {
        Ok(self.forward_with_gates(g, store, positions, signals)?.0)
    }

    /// Matrix multiply-adds per sample. Every layer runs on the padded
    /// `n_max` rows, so the count ignores `n`.
    fn flops(&self, _n: usize) -> u64 {
        let c = &self.cfg;
        let (m, d, f, ds, e) = (c.n_max as u64, c.d_hid as u64, c.num_freqs as u64, c.d_sig() as u64, c.num_experts as u64);
        let pos = m * 2 * f * d;
        let sig = m * ds * d + m * d * d;
        let gate = m * d * d;
        let expert = 4 * d * m * m + 4 * m * d * d;
        let router = d * e;
        let head = m * 2 * d * c.d_out as u64;
        pos + sig + gate + e * expert + router + head
    }
}
