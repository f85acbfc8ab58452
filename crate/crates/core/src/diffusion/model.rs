//! Decoder-only transformer denoiser.
//!
//! Tokens are the history frames followed by the noisy frames, each embedded
//! by one shared linear map plus a sinusoidal position code (history tokens
//! also get a learned type vector). Every block applies pre-norm
//! self-attention over the whole sequence, cross-attention over the three
//! condition tokens (diffusion step, target, action) and a GELU MLP. Only
//! the frame tokens are decoded.

use super::DiffusionError;
use crate::binio::{self, invalid};
use crate::dataset::ActionLabel;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};

pub const CHANNELS: usize = 10;
const CKPT_MAGIC: &[u8; 8] = b"AEROCKPT";
const CKPT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 1.702;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_a: usize,
    pub n_h: usize,
    /// Self-attention sees the history tokens.
    pub use_history: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            n_a: crate::dataset::N_A,
            n_h: crate::dataset::N_H,
            use_history: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: &str| Err(DiffusionError::Config(m.to_string()));
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.n_a == 0 {
            return bad("model dimensions must be positive");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.n_h == 0 {
            return bad("n_h must be positive");
        }
        Ok(())
    }
}

/// Named trainable tensors with deterministic initialization.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    fn add(&mut self, name: String, dims: &[usize], values: Vec<f64>, dtype: DType) -> Result<Tensor, DiffusionError> {
        let t = Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.vars.insert(name, v);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Init<'_> {
    fn normal(&mut self, name: String, dims: &[usize], std: f64) -> Result<Tensor, DiffusionError> {
        let n: usize = dims.iter().product();
        let vals = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.store.add(name, dims, vals, self.dtype)
    }

    fn constant(&mut self, name: String, dims: &[usize], value: f64) -> Result<Tensor, DiffusionError> {
        let n: usize = dims.iter().product();
        self.store.add(name, dims, vec![value; n], self.dtype)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear, DiffusionError> {
        Ok(Linear {
            w: self.normal(format!("{name}.w"), &[din, dout], (1.0 / din as f64).sqrt())?,
            b: self.constant(format!("{name}.b"), &[dout], 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<LayerNorm, DiffusionError> {
        Ok(LayerNorm {
            g: self.constant(format!("{name}.g"), &[d], 1.0)?,
            b: self.constant(format!("{name}.b"), &[d], 0.0)?,
        })
    }

    fn mlp(&mut self, name: &str, din: usize, dh: usize, dout: usize) -> Result<Mlp, DiffusionError> {
        Ok(Mlp {
            l1: self.linear(&format!("{name}.l1"), din, dh)?,
            l2: self.linear(&format!("{name}.l2"), dh, dout)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize, heads: usize) -> Result<Attention, DiffusionError> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
            heads,
        })
    }
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    /// `x` is `(B, L, din)` or `(B, din)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims();
        let din = dims[dims.len() - 1];
        let rows = x.elem_count() / din;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().expect("non-scalar input") = self.w.dim(1)?;
        x.reshape((rows, din))?
            .matmul(&self.w)?
            .broadcast_add(&self.b)?
            .reshape(out_dims)
    }
}

struct LayerNorm {
    g: Tensor,
    b: Tensor,
}

impl LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        xn.broadcast_mul(&self.g)?.broadcast_add(&self.b)
    }
}

struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        // GELU in sigmoid form, x·σ(1.702x)
        let h = self.l1.forward(x)?;
        self.l2.forward(&((&h * GELU_K)?.silu()? / GELU_K)?)
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn split(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        x.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let q = self.split(&self.q.forward(x)?)?;
        let k = self.split(&self.k.forward(ctx)?)?;
        let v = self.split(&self.v.forward(ctx)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, l, d))?;
        self.o.forward(&out)
    }
}

struct Block {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

/// One denoising batch on the model's device and dtype.
pub struct ModelInput {
    /// `(B, n_a, 10)` noisy normalized frames.
    pub x_t: Tensor,
    /// `(B,)` diffusion step as a float.
    pub t: Tensor,
    /// `(B, n_h, 10)` normalized history.
    pub history: Tensor,
    /// `(B, 3)` normalized target.
    pub target: Tensor,
    /// `(B, 1)`: 1 when the target is given, 0 for the null target.
    pub target_mask: Tensor,
    /// `(B, 6)` one-hot action; the last slot is the null action.
    pub action: Tensor,
}

pub struct DenoiserModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    dtype: DType,
    embed: Linear,
    hist_type: Tensor,
    pos: Tensor,
    phi_t: Mlp,
    phi_target: Mlp,
    null_target: Tensor,
    phi_action: Mlp,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
}

fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = (10000f64).powf(-((2 * (i / 2)) as f64) / d as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

impl DenoiserModel {
    pub fn new(config: &ModelConfig, dtype: DType) -> Result<Self, DiffusionError> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            dtype,
        };
        let embed = init.linear("embed", CHANNELS, d)?;
        let hist_type = init.normal("hist_type".into(), &[d], 0.02)?;
        let phi_t = init.mlp("phi_t", d, d, d)?;
        let phi_target = init.mlp("phi_target", 3, d, d)?;
        let null_target = init.normal("null_target".into(), &[d], 0.02)?;
        let phi_action = init.mlp("phi_action", ActionLabel::COUNT, d, d)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(Block {
                ln1: init.norm(&format!("block{l}.ln1"), d)?,
                self_attn: init.attention(&format!("block{l}.self"), d, config.heads)?,
                ln2: init.norm(&format!("block{l}.ln2"), d)?,
                cross_attn: init.attention(&format!("block{l}.cross"), d, config.heads)?,
                ln3: init.norm(&format!("block{l}.ln3"), d)?,
                mlp: init.mlp(&format!("block{l}.mlp"), d, 4 * d, d)?,
            });
        }
        let ln_out = init.norm("ln_out", d)?;
        let head = init.linear("head", d, CHANNELS)?;
        let seq = config.n_h + config.n_a;
        let pos_vals: Vec<f64> = (0..seq).flat_map(|i| sinusoid(i as f64, d)).collect();
        let pos = Tensor::from_vec(pos_vals, (seq, d), &Device::Cpu)?.to_dtype(dtype)?;
        let model = Self {
            config: config.clone(),
            store,
            dtype,
            embed,
            hist_type,
            pos,
            phi_t,
            phi_target,
            null_target,
            phi_action,
            blocks,
            ln_out,
            head,
        };
        log::debug!("denoiser with {} parameters", model.parameter_count());
        Ok(model)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn forward(&self, inp: &ModelInput) -> Result<Tensor, DiffusionError> {
        let c = &self.config;
        let (b, n_a, ch) = inp.x_t.dims3()?;
        if n_a != c.n_a || ch != CHANNELS {
            return Err(DiffusionError::Shape(format!("x_t is {:?}, expected (B, {}, {CHANNELS})", inp.x_t.dims(), c.n_a)));
        }
        let (hb, n_h, hch) = inp.history.dims3()?;
        if hb != b || n_h != c.n_h || hch != CHANNELS {
            return Err(DiffusionError::Shape(format!("history is {:?}, expected ({b}, {}, {CHANNELS})", inp.history.dims(), c.n_h)));
        }
        let d = c.d_model;
        let frames = self
            .embed
            .forward(&inp.x_t)?
            .broadcast_add(&self.pos.narrow(0, c.n_h, c.n_a)?)?;
        let mut x = if c.use_history {
            let hist = self
                .embed
                .forward(&inp.history)?
                .broadcast_add(&self.pos.narrow(0, 0, c.n_h)?)?
                .broadcast_add(&self.hist_type)?;
            Tensor::cat(&[&hist, &frames], 1)?
        } else {
            frames
        };
        // condition tokens
        let t_code = self.timestep_code(&inp.t, d)?;
        let e_t = self.phi_t.forward(&t_code)?;
        let e_target = self
            .phi_target
            .forward(&inp.target)?
            .broadcast_mul(&inp.target_mask)?
            .broadcast_add(&(inp.target_mask.ones_like()? - &inp.target_mask)?.broadcast_mul(&self.null_target)?)?;
        let e_action = self.phi_action.forward(&inp.action)?;
        let cond = Tensor::stack(&[&e_t, &e_target, &e_action], 1)?;
        for blk in &self.blocks {
            let h = blk.ln1.forward(&x)?;
            x = (&x + blk.self_attn.forward(&h, &h)?)?;
            let h = blk.ln2.forward(&x)?;
            x = (&x + blk.cross_attn.forward(&h, &cond)?)?;
            let h = blk.ln3.forward(&x)?;
            x = (&x + blk.mlp.forward(&h)?)?;
        }
        let x = if c.use_history { x.narrow(1, c.n_h, c.n_a)? } else { x };
        Ok(self.head.forward(&self.ln_out.forward(&x)?)?)
    }

    /// Sinusoidal code of the diffusion step, `(B, d)`.
    fn timestep_code(&self, t: &Tensor, d: usize) -> candle_core::Result<Tensor> {
        let half = d / 2;
        let freqs: Vec<f64> = (0..half).map(|i| (10000f64).powf(-(i as f64) / half as f64)).collect();
        let freqs = Tensor::from_vec(freqs, (1, half), &Device::Cpu)?.to_dtype(self.dtype)?;
        let arg = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
        let mut parts = vec![arg.sin()?, arg.cos()?];
        if d % 2 == 1 {
            parts.push(t.unsqueeze(1)?.zeros_like()?);
        }
        Tensor::cat(&parts, 1)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W, extra: &serde_json::Value) -> Result<(), DiffusionError> {
        let header = serde_json::json!({ "model": self.config, "extra": extra });
        let header = serde_json::to_vec(&header).map_err(|e| DiffusionError::Config(e.to_string()))?;
        w.write_all(CKPT_MAGIC)?;
        binio::write_u32(w, CKPT_VERSION)?;
        binio::write_u32(w, header.len() as u32)?;
        w.write_all(&header)?;
        binio::write_u32(w, self.store.vars.len() as u32)?;
        for (name, var) in &self.store.vars {
            binio::write_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            let dims = var.dims();
            binio::write_u32(w, dims.len() as u32)?;
            for &dim in dims {
                binio::write_u32(w, dim as u32)?;
            }
            let vals = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            binio::write_f32s(w, vals)?;
        }
        Ok(())
    }

    /// Returns the model (F32) and the extra JSON stored with it.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Self, serde_json::Value), DiffusionError> {
        let magic: [u8; 8] = binio::read_array(r)?;
        if &magic != CKPT_MAGIC {
            return Err(invalid("not an aerobatch checkpoint").into());
        }
        let version = binio::read_u32(r)?;
        if version != CKPT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")).into());
        }
        let len = binio::read_u32(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: serde_json::Value = serde_json::from_slice(&header).map_err(invalid)?;
        let config: ModelConfig = serde_json::from_value(header["model"].clone()).map_err(invalid)?;
        let model = Self::new(&config, DType::F32)?;
        let count = binio::read_u32(r)? as usize;
        if count != model.store.vars.len() {
            return Err(invalid(format!("checkpoint holds {count} tensors, model has {}", model.store.vars.len())).into());
        }
        for _ in 0..count {
            let nlen = binio::read_u32(r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(invalid)?;
            let ndims = binio::read_u32(r)? as usize;
            let dims = (0..ndims).map(|_| binio::read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
            let var = model
                .store
                .get(&name)
                .ok_or_else(|| invalid(format!("unknown tensor {name}")))?;
            if var.dims() != dims.as_slice() {
                return Err(invalid(format!("tensor {name} has shape {dims:?}, expected {:?}", var.dims())).into());
            }
            let vals = binio::read_f32s(r, dims.iter().product())?;
            var.set(&Tensor::from_vec(vals, dims.as_slice(), &Device::Cpu)?)?;
        }
        Ok((model, header["extra"].clone()))
    }
}
