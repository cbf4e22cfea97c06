//! Gated dual-branch conditioning block and the token U-net denoiser that
//! hosts one such block per decoder scale.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffusion::all_finite;
use crate::error::{ensure, Error, Result};
use crate::nn::{timestep_embedding, Attention, Init, LayerNorm, Linear, Mlp, Scope};
use crate::recomposer::ConditionTokens;

/// Number of gated scales on the decoder path.
pub const SCALES: usize = 3;

/// Numerically stable logistic function with a well-defined gradient
/// everywhere: `σ(x) = ½(tanh(x/2) + 1)`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Outputs of one gated block; `mask` and `logits` are `(B, N, 1)`.
#[derive(Debug, Clone)]
pub struct IglhOutput {
    pub fused: Tensor,
    pub mask: Tensor,
    pub logits: Tensor,
    /// Identity branch `f' + CrossAttn(f', SelfAttn(t_id))`.
    pub f_id: Tensor,
    /// Non-identity branch, same form over `t_non_id`.
    pub f_nonid: Tensor,
}

/// Self-attention over spatial tokens, a per-location gate, and two
/// cross-attention branches over self-attended condition streams, fused
/// as `m·f_id + (1 − m)·f_nonid`.
#[derive(Debug, Clone)]
pub struct IglhBlock {
    name: String,
    ln_self: LayerNorm,
    self_attn: Attention,
    gate: Mlp,
    ln_tok_id: LayerNorm,
    tok_attn_id: Attention,
    ln_tok_nonid: LayerNorm,
    tok_attn_nonid: Attention,
    ln_query: LayerNorm,
    cross_id: Attention,
    cross_nonid: Attention,
}

impl IglhBlock {
    pub fn new(s: &Scope, dim: usize, token_dim: usize, attn_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            name: s.prefix().to_string(),
            ln_self: LayerNorm::new(&s.pp("ln_self"), dim)?,
            self_attn: Attention::new(&s.pp("self_attn"), dim, dim, attn_dim, heads)?,
            gate: Mlp::new(&s.pp("gate"), dim, dim, 1)?,
            ln_tok_id: LayerNorm::new(&s.pp("ln_tok_id"), token_dim)?,
            tok_attn_id: Attention::new(&s.pp("tok_attn_id"), token_dim, token_dim, attn_dim, heads)?,
            ln_tok_nonid: LayerNorm::new(&s.pp("ln_tok_nonid"), token_dim)?,
            tok_attn_nonid: Attention::new(&s.pp("tok_attn_nonid"), token_dim, token_dim, attn_dim, heads)?,
            ln_query: LayerNorm::new(&s.pp("ln_query"), dim)?,
            cross_id: Attention::new(&s.pp("cross_id"), dim, token_dim, attn_dim, heads)?,
            cross_nonid: Attention::new(&s.pp("cross_nonid"), dim, token_dim, attn_dim, heads)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `f`: `(B, N, dim)`. `gate_override` replaces every gate logit with a
    /// constant (used to probe the saturated and balanced regimes).
    pub fn forward(&self, f: &Tensor, cond: &ConditionTokens, gate_override: Option<f64>) -> Result<IglhOutput> {
        let normed = self.ln_self.forward(f)?;
        let fp = (f + self.self_attn.forward(&normed, &normed)?)?;
        let logits = match gate_override {
            Some(v) => {
                let (b, n, _) = fp.dims3()?;
                Tensor::full(v, (b, n, 1), fp.device())?.to_dtype(fp.dtype())?
            }
            None => self.gate.forward(&fp)?,
        };
        let mask = sigmoid(&logits)?;

        let tid = self.ln_tok_id.forward(&cond.id)?;
        let s_id = (&cond.id + self.tok_attn_id.forward(&tid, &tid)?)?;
        let tnon = self.ln_tok_nonid.forward(&cond.non_id)?;
        let s_nonid = (&cond.non_id + self.tok_attn_nonid.forward(&tnon, &tnon)?)?;

        let q = self.ln_query.forward(&fp)?;
        let f_id = (&fp + self.cross_id.forward(&q, &s_id)?)?;
        let f_nonid = (&fp + self.cross_nonid.forward(&q, &s_nonid)?)?;
        let inv = (1.0 - &mask)?;
        let fused = (f_id.broadcast_mul(&mask)? + f_nonid.broadcast_mul(&inv)?)?;
        if !all_finite(&fused)? {
            return Err(Error::NonFinite {
                context: format!("gated block {}", self.name),
            });
        }
        Ok(IglhOutput {
            fused,
            mask,
            logits,
            f_id,
            f_nonid,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Side of the square pixel patch that becomes one token.
    pub patch: usize,
    pub width: usize,
    pub attn_dim: usize,
    pub heads: usize,
    /// Width of the condition tokens.
    pub token_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 2,
            width: 64,
            attn_dim: 64,
            heads: 4,
            token_dim: 64,
            mlp_ratio: 2,
        }
    }
}

impl DenoiserConfig {
    /// Token grid side per scale, finest first.
    pub fn grids(&self) -> [usize; SCALES] {
        let g = self.image_size / self.patch.max(1);
        [g, g / 2, g / 4]
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.patch > 0 && self.image_size % self.patch == 0, || {
            format!("image size {} not divisible by patch {}", self.image_size, self.patch)
        })?;
        let g = self.image_size / self.patch;
        ensure(g % 4 == 0 && g >= 4, || {
            format!("token grid {g} must be a positive multiple of 4")
        })?;
        ensure(self.heads > 0 && self.attn_dim % self.heads == 0, || {
            format!("attention dim {} not divisible by {} heads", self.attn_dim, self.heads)
        })?;
        ensure(self.width > 0 && self.channels > 0 && self.mlp_ratio > 0, || {
            "denoiser widths must be positive".into()
        })
    }
}

/// Noise prediction plus the decoder gates, finest scale first; masks and
/// logits are `(B, 1, h_j, w_j)`.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_hat: Tensor,
    pub gate_logits: Vec<Tensor>,
    pub gate_masks: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    time: Linear,
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn new(s: &Scope, c: &DenoiserConfig) -> Result<Self> {
        let w = c.width;
        Ok(Self {
            time: Linear::new(&s.pp("time"), w, w)?,
            ln1: LayerNorm::new(&s.pp("ln1"), w)?,
            attn: Attention::new(&s.pp("attn"), w, w, c.attn_dim, c.heads)?,
            ln2: LayerNorm::new(&s.pp("ln2"), w)?,
            mlp: Mlp::new(&s.pp("mlp"), w, w * c.mlp_ratio, w)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let x = x.broadcast_add(&self.time.forward(temb)?.unsqueeze(1)?)?;
        let h = self.ln1.forward(&x)?;
        let x = (&x + self.attn.forward(&h, &h)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    time: Linear,
    gated: IglhBlock,
    ln: LayerNorm,
    mlp: Mlp,
}

/// Token U-net over `patch × patch` pixel tokens: plain self-attention
/// blocks down the encoder, one gated block per decoder scale, learned
/// positional embeddings per scale, additive timestep embedding per block,
/// and a zero-initialized output head so an untrained model predicts zero
/// noise.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    stem: Linear,
    pos: Vec<Tensor>,
    time_mlp: Mlp,
    encoder: Vec<EncoderBlock>,
    down: Vec<Linear>,
    up: Vec<Linear>,
    decoder: Vec<DecoderBlock>,
    head_ln: LayerNorm,
    head: Linear,
}

impl Denoiser {
    /// Plain layers live under `denoiser`, the gated blocks under
    /// `harmonizer.<scale>` (0 = finest).
    pub fn new(root: &Scope, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let s = root.pp("denoiser");
        let h = root.pp("harmonizer");
        let w = cfg.width;
        let patch_dim = cfg.channels * cfg.patch * cfg.patch;
        let grids = cfg.grids();
        let mut pos = Vec::new();
        for (j, g) in grids.iter().enumerate() {
            pos.push(s.pp("pos").get(&j.to_string(), &[g * g, w], Init::Normal(0.02))?);
        }
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for j in 0..SCALES {
            encoder.push(EncoderBlock::new(&s.pp("enc").pp(j.to_string()), &cfg)?);
            let d = s.pp("dec").pp(j.to_string());
            decoder.push(DecoderBlock {
                time: Linear::new(&d.pp("time"), w, w)?,
                gated: IglhBlock::new(&h.pp(j.to_string()), w, cfg.token_dim, cfg.attn_dim, cfg.heads)?,
                ln: LayerNorm::new(&d.pp("ln"), w)?,
                mlp: Mlp::new(&d.pp("mlp"), w, w * cfg.mlp_ratio, w)?,
            });
        }
        let mut down = Vec::new();
        let mut up = Vec::new();
        for j in 0..SCALES - 1 {
            down.push(Linear::new(&s.pp("down").pp(j.to_string()), 4 * w, w)?);
            up.push(Linear::new(&s.pp("up").pp(j.to_string()), w, 4 * w)?);
        }
        Ok(Self {
            cfg,
            stem: Linear::new(&s.pp("stem"), patch_dim, w)?,
            pos,
            time_mlp: Mlp::new(&s.pp("time_mlp"), w, w, w)?,
            encoder,
            down,
            up,
            decoder,
            head_ln: LayerNorm::new(&s.pp("head_ln"), w)?,
            head: Linear::zeros(&s.pp("head"), w, patch_dim)?,
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    pub fn gated_block(&self, scale: usize) -> &IglhBlock {
        &self.decoder[scale].gated
    }

    fn patchify(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, hh, ww) = z.dims4()?;
        let p = self.cfg.patch;
        let (gh, gw) = (hh / p, ww / p);
        Ok(z.reshape(vec![b, c, gh, p, gw, p])?
            .permute(vec![0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?)
    }

    fn unpatchify(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let (c, p, g) = (self.cfg.channels, self.cfg.patch, self.cfg.grids()[0]);
        Ok(x.reshape(vec![b, g, g, c, p, p])?
            .permute(vec![0, 3, 1, 4, 2, 5])?
            .contiguous()?
            .reshape((b, c, g * p, g * p))?)
    }

    /// `(B, g·g, C)` → `(B, (g/2)², 4C)`.
    fn merge(x: &Tensor, g: usize) -> Result<Tensor> {
        let (b, _, c) = x.dims3()?;
        Ok(x.reshape(vec![b, g / 2, 2, g / 2, 2, c])?
            .permute(vec![0, 1, 3, 2, 4, 5])?
            .contiguous()?
            .reshape((b, (g / 2) * (g / 2), 4 * c))?)
    }

    /// `(B, g·g, 4C)` → `(B, (2g)², C)`.
    fn shuffle(x: &Tensor, g: usize) -> Result<Tensor> {
        let (b, _, c4) = x.dims3()?;
        let c = c4 / 4;
        Ok(x.reshape(vec![b, g, g, 2, 2, c])?
            .permute(vec![0, 1, 3, 2, 4, 5])?
            .contiguous()?
            .reshape((b, 4 * g * g, c))?)
    }

    pub fn forward(&self, z_t: &Tensor, ts: &[usize], cond: &ConditionTokens) -> Result<DenoiserOutput> {
        self.forward_with_gates(z_t, ts, cond, None)
    }

    /// As [`Denoiser::forward`], optionally forcing every gate logit.
    pub fn forward_with_gates(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        cond: &ConditionTokens,
        gate_override: Option<f64>,
    ) -> Result<DenoiserOutput> {
        let c = &self.cfg;
        let (b, ch, hh, ww) = z_t.dims4()?;
        ensure(ch == c.channels && hh == c.image_size && ww == c.image_size, || {
            format!(
                "denoiser expects (B, {}, {2}, {2}), got {:?}",
                c.channels,
                z_t.dims(),
                c.image_size
            )
        })?;
        ensure(ts.len() == b, || format!("{} timesteps for batch of {b}", ts.len()))?;
        ensure(cond.non_id.dim(0)? == b && cond.id.dim(0)? == b, || {
            "condition batch does not match latent batch".into()
        })?;
        let grids = c.grids();
        let temb = timestep_embedding(ts, c.width, z_t.dtype(), z_t.device())?;
        let temb = self.time_mlp.forward(&temb)?;

        let mut x = self.stem.forward(&self.patchify(z_t)?)?;
        let mut skips = Vec::new();
        for j in 0..SCALES {
            if j > 0 {
                x = self.down[j - 1].forward(&Self::merge(&x, grids[j - 1])?)?;
            }
            x = x.broadcast_add(&self.pos[j])?;
            x = self.encoder[j].forward(&x, &temb)?;
            skips.push(x.clone());
        }

        let mut logits = vec![None; SCALES];
        let mut masks = vec![None; SCALES];
        for j in (0..SCALES).rev() {
            if j < SCALES - 1 {
                let upped = self.up[j].forward(&x)?;
                x = (Self::shuffle(&upped, grids[j + 1])? + &skips[j])?;
            }
            let dec = &self.decoder[j];
            x = x.broadcast_add(&dec.time.forward(&temb)?.unsqueeze(1)?)?;
            let out = dec.gated.forward(&x, cond, gate_override)?;
            let g = grids[j];
            let to_map = |t: &Tensor| -> Result<Tensor> { Ok(t.transpose(1, 2)?.reshape((b, 1, g, g))?) };
            logits[j] = Some(to_map(&out.logits)?);
            masks[j] = Some(to_map(&out.mask)?);
            x = out.fused;
            x = (&x + dec.mlp.forward(&dec.ln.forward(&x)?)?)?;
        }
        let eps_hat = self.unpatchify(&self.head.forward(&self.head_ln.forward(&x)?)?)?;
        Ok(DenoiserOutput {
            eps_hat,
            gate_logits: logits.into_iter().map(|l| l.expect("every scale visited")).collect(),
            gate_masks: masks.into_iter().map(|m| m.expect("every scale visited")).collect(),
        })
    }
}
