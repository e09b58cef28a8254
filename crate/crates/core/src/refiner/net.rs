use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::numkernel::{init_normal, Rng, Tape, Tensor, Var};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RefinerVariant {
    Attention,
    Mlp,
    Conv,
}

impl RefinerVariant {
    pub const ALL: [RefinerVariant; 3] = [RefinerVariant::Attention, RefinerVariant::Mlp, RefinerVariant::Conv];

    pub fn name(self) -> &'static str {
        match self {
            RefinerVariant::Attention => "attention",
            RefinerVariant::Mlp => "mlp",
            RefinerVariant::Conv => "conv",
        }
    }
}

impl fmt::Display for RefinerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RefinerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(RefinerVariant::Attention),
            "mlp" => Ok(RefinerVariant::Mlp),
            "conv" => Ok(RefinerVariant::Conv),
            other => Err(Error::Domain(format!(
                "unknown refiner variant `{other}` (expected attention, mlp or conv)"
            ))),
        }
    }
}

/// Architecture of a refiner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefinerConfig {
    pub variant: RefinerVariant,
    pub d_model: usize,
    /// Longest sequence the refiner accepts; sizes the positional table.
    pub t_max: usize,
    pub heads: usize,
    /// Learned positional embeddings added to the attention input.
    pub positional: bool,
    /// Bare `e + MHA(e)` instead of the full attention + FFN block.
    pub eq3_plain: bool,
    /// Hidden width of the mlp / conv variants; attention uses `4 d`.
    pub hidden: usize,
}

impl RefinerConfig {
    /// Default config of `variant`, with the mlp and conv hidden widths chosen
    /// so their parameter count matches the attention block's.
    pub fn new(variant: RefinerVariant, d_model: usize, t_max: usize) -> Self {
        let attention = RefinerConfig {
            variant: RefinerVariant::Attention,
            d_model,
            t_max,
            heads: 8,
            positional: true,
            eq3_plain: false,
            hidden: 4 * d_model,
        };
        let target = attention.parameter_count() as f64;
        let hidden = match variant {
            RefinerVariant::Attention => 4 * d_model,
            RefinerVariant::Mlp => (target / (2 * d_model) as f64).round() as usize,
            RefinerVariant::Conv => (target / (6 * d_model) as f64).round() as usize,
        };
        RefinerConfig { variant, hidden: hidden.max(1), ..attention }
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        match self.variant {
            RefinerVariant::Attention => {
                let pos = if self.positional { self.t_max * d } else { 0 };
                let ffn = if self.eq3_plain { 0 } else { 2 * d * self.hidden + 4 * d };
                pos + 4 * d * d + ffn
            }
            RefinerVariant::Mlp => 2 * d * self.hidden,
            RefinerVariant::Conv => 6 * d * self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.t_max == 0 || self.hidden == 0 {
            return Err(Error::Domain("refiner dimensions must be positive".into()));
        }
        if self.variant == RefinerVariant::Attention && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads)) {
            return Err(Error::Domain(format!(
                "refiner d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Trainable refiner weights, held as named tensors in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    pub config: RefinerConfig,
    tensors: Vec<(String, Tensor)>,
}

fn layout(cfg: &RefinerConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, h) = (cfg.d_model, cfg.hidden);
    match cfg.variant {
        RefinerVariant::Attention => {
            let mut v = Vec::new();
            if cfg.positional {
                v.push(("ref.pos", vec![cfg.t_max, d]));
            }
            for n in ["ref.attn.wq", "ref.attn.wk", "ref.attn.wv", "ref.attn.wo"] {
                v.push((n, vec![d, d]));
            }
            if !cfg.eq3_plain {
                v.push(("ref.ln1.g", vec![d]));
                v.push(("ref.ln1.b", vec![d]));
                v.push(("ref.ffn.w1", vec![d, h]));
                v.push(("ref.ffn.w2", vec![h, d]));
                v.push(("ref.ln2.g", vec![d]));
                v.push(("ref.ln2.b", vec![d]));
            }
            v
        }
        RefinerVariant::Mlp => vec![("ref.ffn.w1", vec![d, h]), ("ref.ffn.w2", vec![h, d])],
        RefinerVariant::Conv => vec![("ref.conv.w1", vec![3 * d, h]), ("ref.conv.w2", vec![3 * h, d])],
    }
}

/// Output projections start at zero so a fresh refiner is the identity.
fn zero_init(name: &str) -> bool {
    matches!(name, "ref.attn.wo" | "ref.ffn.w2" | "ref.conv.w2")
}

impl RefinerParams {
    pub fn init(config: RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let tensors = layout(&config)
            .into_iter()
            .map(|(name, dims)| {
                let t = if zero_init(name) || name.ends_with(".b") {
                    Tensor::zeros(&dims)
                } else if name.ends_with(".g") {
                    Tensor::full(&dims, 1.0)
                } else {
                    init_normal(&mut rng, &dims, INIT_STD)
                };
                (name.to_string(), t)
            })
            .collect();
        Ok(RefinerParams { config, tensors })
    }

    /// Infers the variant from the tensor names present.
    pub fn from_named(mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        map.retain(|k, _| !k.starts_with("meta."));
        let fmt_err = |message: String| Error::Format { offset: 0, message };
        let variant = if map.contains_key("ref.attn.wq") {
            RefinerVariant::Attention
        } else if map.contains_key("ref.conv.w1") {
            RefinerVariant::Conv
        } else if map.contains_key("ref.ffn.w1") {
            RefinerVariant::Mlp
        } else {
            return Err(fmt_err("checkpoint holds no refiner tensors".into()));
        };
        let d = match variant {
            RefinerVariant::Attention => map["ref.attn.wq"].rows(),
            RefinerVariant::Mlp => map["ref.ffn.w1"].rows(),
            RefinerVariant::Conv => map["ref.conv.w1"].rows() / 3,
        };
        let positional = map.contains_key("ref.pos");
        let eq3_plain = variant == RefinerVariant::Attention && !map.contains_key("ref.ffn.w1");
        let hidden = match variant {
            RefinerVariant::Conv => map["ref.conv.w1"].cols(),
            _ if eq3_plain => 4 * d,
            _ => map["ref.ffn.w1"].cols(),
        };
        let config = RefinerConfig {
            variant,
            d_model: d,
            t_max: map.get("ref.pos").map_or(1, |t| t.rows()).max(1),
            heads: 8,
            positional,
            eq3_plain,
            hidden,
        };
        let config = if positional { config } else { RefinerConfig { t_max: usize::MAX, ..config } };
        let mut tensors = Vec::new();
        for (name, dims) in layout(&config) {
            let t = map
                .remove(name)
                .ok_or_else(|| fmt_err(format!("checkpoint lacks tensor `{name}`")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::shape(format!(
                    "tensor `{name}` has dims {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
            tensors.push((name.to_string(), t));
        }
        if let Some(extra) = map.keys().next() {
            return Err(fmt_err(format!("unexpected tensor `{extra}` in refiner checkpoint")));
        }
        Ok(RefinerParams { config, tensors })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn fingerprint(&self) -> String {
        crate::backbone::fingerprint(self.named_tensors().into_iter())
    }
}

/// Refiner weights placed on a tape as trainable leaves.
pub struct RefinerVars {
    config: RefinerConfig,
    vars: BTreeMap<String, Var>,
    /// Leaves in the order of the parameter tensors.
    pub trainable: Vec<Var>,
}

impl RefinerVars {
    pub fn attach(tape: &mut Tape, params: &RefinerParams) -> Self {
        let mut vars = BTreeMap::new();
        let mut trainable = Vec::new();
        for (name, t) in &params.tensors {
            let v = tape.param(t.clone());
            vars.insert(name.clone(), v);
            trainable.push(v);
        }
        RefinerVars { config: params.config, vars, trainable }
    }

    fn v(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// `e + block(e)` on the tape.
    pub fn refine(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let cfg = &self.config;
        let (t, d) = (tape.value(e).rows(), tape.value(e).cols());
        if d != cfg.d_model {
            return Err(Error::shape(format!(
                "refiner of width {} given embeddings of width {d}",
                cfg.d_model
            )));
        }
        if t == 0 {
            return Ok(e);
        }
        match cfg.variant {
            RefinerVariant::Attention => {
                if cfg.positional && t > cfg.t_max {
                    return Err(Error::Capacity { len: t, capacity: cfg.t_max });
                }
                let x = if cfg.positional {
                    let p = tape.slice_rows(self.v("ref.pos"), 0, t)?;
                    tape.add(e, p)?
                } else {
                    e
                };
                if cfg.eq3_plain {
                    let a = self.attention(tape, x)?;
                    return tape.add(e, a);
                }
                let h = tape.layernorm(x, self.v("ref.ln1.g"), self.v("ref.ln1.b"))?;
                let a = self.attention(tape, h)?;
                let x1 = tape.add(e, a)?;
                let h2 = tape.layernorm(x1, self.v("ref.ln2.g"), self.v("ref.ln2.b"))?;
                let f = ffn(tape, h2, self.v("ref.ffn.w1"), self.v("ref.ffn.w2"))?;
                tape.add(x1, f)
            }
            RefinerVariant::Mlp => {
                let f = ffn(tape, e, self.v("ref.ffn.w1"), self.v("ref.ffn.w2"))?;
                tape.add(e, f)
            }
            RefinerVariant::Conv => {
                let h = conv3(tape, e, self.v("ref.conv.w1"))?;
                let h = tape.gelu(h);
                let f = conv3(tape, h, self.v("ref.conv.w2"))?;
                tape.add(e, f)
            }
        }
    }

    /// Bidirectional multi-head self-attention.
    fn attention(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = tape.matmul(x, self.v("ref.attn.wq"))?;
        let k = tape.matmul(x, self.v("ref.attn.wk"))?;
        let v = tape.matmul(x, self.v("ref.attn.wv"))?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_t(qh, kh, false, true)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        tape.matmul(cat, self.v("ref.attn.wo"))
    }
}

fn ffn(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let u = tape.matmul(x, w1)?;
    let u = tape.gelu(u);
    tape.matmul(u, w2)
}

/// Kernel-3, same-padded 1-D convolution along positions: row t sees rows
/// t-1, t, t+1 (zeros past the ends). `w` stacks the three taps.
fn conv3(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let prev = tape.shift_rows(x, 1);
    let next = tape.shift_rows(x, -1);
    let window = tape.concat_cols(&[prev, x, next])?;
    tape.matmul(window, w)
}

/// Refines one embedding sequence outside of training.
pub fn refine(params: &RefinerParams, e: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = RefinerVars::attach(&mut tape, params);
    let x = tape.constant(e.clone());
    let out = vars.refine(&mut tape, x)?;
    Ok(tape.value(out).clone())
}
