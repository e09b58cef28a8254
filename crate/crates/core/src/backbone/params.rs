use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::numkernel::{init_normal, Rng, Tensor};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

/// With a tied head the hidden state keeps the current token's direction, so
/// an untrained model already leans toward repeating its input token. Larger
/// positional vectors dilute that share after the first LayerNorm and keep the
/// initial loss near `ln V`, while embeddings at this scale still carry enough
/// content for attention to learn copying quickly.
pub const EMBED_INIT_STD: f64 = 0.02;
pub const POS_INIT_STD: f64 = 0.08;

/// Shape of the causal transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl BackboneConfig {
    pub fn ffn_width(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.layers == 0 || self.max_len == 0 {
            return Err(Error::Domain("backbone dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Domain(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

const LAYER_FIELDS: [&str; 10] = [
    "wq", "wk", "wv", "wo", "w1", "w2", "ln1.g", "ln1.b", "ln2.g", "ln2.b",
];

impl LayerParams {
    fn init(rng: &mut Rng, d: usize, ffn: usize) -> Self {
        LayerParams {
            wq: init_normal(rng, &[d, d], INIT_STD),
            wk: init_normal(rng, &[d, d], INIT_STD),
            wv: init_normal(rng, &[d, d], INIT_STD),
            wo: init_normal(rng, &[d, d], INIT_STD),
            w1: init_normal(rng, &[d, ffn], INIT_STD),
            w2: init_normal(rng, &[ffn, d], INIT_STD),
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [&Tensor; 10] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2, &self.ln1_g, &self.ln1_b,
            &self.ln2_g, &self.ln2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }
}

/// Weights of the causal transformer. `embed` doubles as the output head and
/// as the codebook for nearest-neighbour decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    /// Final norm ahead of the tied output head.
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    frozen: bool,
}

fn take(map: &mut BTreeMap<String, Tensor>, name: &str, dims: &[usize]) -> Result<Tensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("checkpoint lacks tensor `{name}`"),
        })?;
    if t.dims() != dims {
        return Err(Error::shape(format!(
            "tensor `{name}` has dims {:?}, expected {dims:?}",
            t.dims()
        )));
    }
    Ok(t)
}

impl BackboneParams {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let mut embed = init_normal(&mut rng, &[config.vocab, d], EMBED_INIT_STD);
        for v in 0..config.vocab {
            while embed.row(v).iter().all(|&x| x == 0.0) {
                let fresh = init_normal(&mut rng, &[d], EMBED_INIT_STD);
                embed.row_mut(v).copy_from_slice(fresh.data());
            }
        }
        let pos = init_normal(&mut rng, &[config.max_len, d], POS_INIT_STD);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(&mut rng, d, config.ffn_width()))
            .collect();
        Ok(BackboneParams {
            config,
            embed,
            pos,
            layers,
            ln_f_g: Tensor::full(&[d], 1.0),
            ln_f_b: Tensor::zeros(&[d]),
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn require_frozen(&self, what: &str) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::contract(format!("{what} requires a frozen backbone")))
        }
    }

    /// Tensors in a fixed order with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &self.ln_f_g));
        out.push(("ln_f.b".to_string(), &self.ln_f_b));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed, &mut self.pos];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.ln_f_g);
        out.push(&mut self.ln_f_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds parameters from a named map; extra names are rejected.
    pub fn from_named(config: BackboneConfig, mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width();
        let embed = take(&mut map, "embed", &[config.vocab, d])?;
        let pos = take(&mut map, "pos", &[config.max_len, d])?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut get = |n: &str, dims: &[usize]| take(&mut map, &format!("layer{i}.{n}"), dims);
            layers.push(LayerParams {
                wq: get("wq", &[d, d])?,
                wk: get("wk", &[d, d])?,
                wv: get("wv", &[d, d])?,
                wo: get("wo", &[d, d])?,
                w1: get("w1", &[d, f])?,
                w2: get("w2", &[f, d])?,
                ln1_g: get("ln1.g", &[d])?,
                ln1_b: get("ln1.b", &[d])?,
                ln2_g: get("ln2.g", &[d])?,
                ln2_b: get("ln2.b", &[d])?,
            });
        }
        let ln_f_g = take(&mut map, "ln_f.g", &[d])?;
        let ln_f_b = take(&mut map, "ln_f.b", &[d])?;
        if let Some(extra) = map.keys().find(|k| !k.starts_with("meta.")) {
            return Err(Error::Format {
                offset: 0,
                message: format!("unexpected tensor `{extra}` in backbone checkpoint"),
            });
        }
        Ok(BackboneParams {
            config,
            embed,
            pos,
            layers,
            ln_f_g,
            ln_f_b,
            frozen: false,
        })
    }

    /// SHA-256 over names, dims and f64 bit patterns of every tensor.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.named_tensors().into_iter())
    }
}

pub(crate) fn fingerprint<'a>(tensors: impl Iterator<Item = (String, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Rank-r adapters on the query and value projections of every layer.
/// The effective projection is `W + A B / r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters {
    pub rank: usize,
    pub layers: Vec<LoraLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub q_a: Tensor,
    pub q_b: Tensor,
    pub v_a: Tensor,
    pub v_b: Tensor,
}

impl LoraAdapters {
    /// `A ~ N(0, 0.02^2)`, `B = 0`, so a fresh adapter leaves the model as is.
    pub fn init(config: &BackboneConfig, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Domain("LoRA rank must be >= 1".into()));
        }
        let d = config.d_model;
        let mut rng = Rng::new(seed);
        let layers = (0..config.layers)
            .map(|_| LoraLayer {
                q_a: init_normal(&mut rng, &[d, rank], INIT_STD),
                q_b: Tensor::zeros(&[rank, d]),
                v_a: init_normal(&mut rng, &[d, rank], INIT_STD),
                v_b: Tensor::zeros(&[rank, d]),
            })
            .collect();
        Ok(LoraAdapters { rank, layers })
    }

    pub fn scale(&self) -> f64 {
        1.0 / self.rank as f64
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("lora.layer{i}.q.a"), &l.q_a));
            out.push((format!("lora.layer{i}.q.b"), &l.q_b));
            out.push((format!("lora.layer{i}.v.a"), &l.v_a));
            out.push((format!("lora.layer{i}.v.b"), &l.v_b));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.q_a, &mut l.q_b, &mut l.v_a, &mut l.v_b])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn from_named(config: &BackboneConfig, mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        let d = config.d_model;
        let rank = map
            .get("lora.layer0.q.a")
            .map(|t| t.cols())
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: "checkpoint lacks `lora.layer0.q.a`".into(),
            })?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut get = |n: &str, dims: &[usize]| take(&mut map, &format!("lora.layer{i}.{n}"), dims);
            layers.push(LoraLayer {
                q_a: get("q.a", &[d, rank])?,
                q_b: get("q.b", &[rank, d])?,
                v_a: get("v.a", &[d, rank])?,
                v_b: get("v.b", &[rank, d])?,
            });
        }
        if let Some(extra) = map.keys().find(|k| !k.starts_with("meta.")) {
            return Err(Error::Format {
                offset: 0,
                message: format!("unexpected tensor `{extra}` in LoRA checkpoint"),
            });
        }
        Ok(LoraAdapters { rank, layers })
    }

    /// `W + A B / r` for one projection.
    pub(crate) fn merged(&self, w: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
        let mut delta = a.matmul(b).expect("adapter dims are consistent");
        let s = self.scale();
        delta.data_mut().iter_mut().for_each(|x| *x *= s);
        let mut out = w.clone();
        out.add_assign(delta.data());
        out
    }
}
