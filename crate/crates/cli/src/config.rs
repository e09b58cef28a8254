//! Run configuration: a flat TOML document whose keys are mirrored one to
//! one by command-line flags. Flags win over the file.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};
use vqrefine::backbone::BackboneConfig;
use vqrefine::refiner::{LossKind, RefinerConfig, RefinerVariant};
use vqrefine::synthdata::{GridSpec, Task};
use vqrefine::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "VQREFINE_OUT";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub h: usize,
    pub w: usize,
    pub v: usize,
    pub k: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub refiner_variant: RefinerVariant,
    pub loss: LossKind,
    pub refiner_pos: bool,
    pub eq3_plain: bool,
    pub pretrain_lr: f64,
    pub lr: f64,
    pub lora_lr: f64,
    pub lora_rank: usize,
    pub batch: usize,
    pub epochs: usize,
    pub steps: usize,
    pub pretrain_min_k: usize,
    pub seed: u64,
    pub train_pool: usize,
    pub test_pool: usize,
    pub prefix_frac: f64,
    pub segment_frac: f64,
    pub k_values: Vec<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Inpaint,
            h: 8,
            w: 8,
            v: 32,
            k: 4,
            d: 64,
            layers: 2,
            heads: 4,
            refiner_variant: RefinerVariant::Attention,
            loss: LossKind::Cosine,
            refiner_pos: true,
            eq3_plain: false,
            pretrain_lr: 3e-3,
            lr: 1e-4,
            lora_lr: 1e-4,
            lora_rank: 8,
            batch: 4,
            epochs: 2,
            steps: 2000,
            pretrain_min_k: 1,
            seed: 0,
            train_pool: 2000,
            test_pool: 200,
            prefix_frac: 70.0 / 256.0,
            segment_frac: 0.1,
            k_values: vec![1, 2, 3, 4],
            out_dir: None,
        }
    }
}

/// Every key of the document, in canonical order.
pub const KEYS: [&str; 27] = [
    "task",
    "H",
    "W",
    "V",
    "K",
    "d",
    "layers",
    "heads",
    "refiner_variant",
    "loss",
    "refiner_pos",
    "eq3_plain",
    "pretrain_lr",
    "lr",
    "lora_lr",
    "lora_rank",
    "batch",
    "epochs",
    "steps",
    "pretrain_min_k",
    "seed",
    "train_pool",
    "test_pool",
    "prefix_frac",
    "segment_frac",
    "K_values",
    "out_dir",
];

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

fn typed<T: DeserializeOwned>(key: &str, value: toml::Value) -> Result<T> {
    let shown = value.to_string();
    value
        .try_into()
        .map_err(|e: toml::de::Error| config_err(key, format!("type mismatch for value {shown}: {}", e.message().trim())))
}

fn parsed<T: std::str::FromStr<Err = Error>>(key: &str, value: toml::Value) -> Result<T> {
    let s: String = typed(key, value)?;
    s.parse().map_err(|e: Error| config_err(key, e.to_string()))
}

impl RunConfig {
    /// Sets one key from a TOML value; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: toml::Value) -> Result<()> {
        match key {
            "task" => self.task = parsed(key, value)?,
            "H" => self.h = typed(key, value)?,
            "W" => self.w = typed(key, value)?,
            "V" => self.v = typed(key, value)?,
            "K" => self.k = typed(key, value)?,
            "d" => self.d = typed(key, value)?,
            "layers" => self.layers = typed(key, value)?,
            "heads" => self.heads = typed(key, value)?,
            "refiner_variant" => self.refiner_variant = parsed(key, value)?,
            "loss" => self.loss = parsed(key, value)?,
            "refiner_pos" => self.refiner_pos = typed(key, value)?,
            "eq3_plain" => self.eq3_plain = typed(key, value)?,
            "pretrain_lr" => self.pretrain_lr = typed(key, value)?,
            "lr" => self.lr = typed(key, value)?,
            "lora_lr" => self.lora_lr = typed(key, value)?,
            "lora_rank" => self.lora_rank = typed(key, value)?,
            "batch" => self.batch = typed(key, value)?,
            "epochs" => self.epochs = typed(key, value)?,
            "steps" => self.steps = typed(key, value)?,
            "pretrain_min_k" => self.pretrain_min_k = typed(key, value)?,
            "seed" => self.seed = typed(key, value)?,
            "train_pool" => self.train_pool = typed(key, value)?,
            "test_pool" => self.test_pool = typed(key, value)?,
            "prefix_frac" => self.prefix_frac = typed(key, value)?,
            "segment_frac" => self.segment_frac = typed(key, value)?,
            "K_values" => self.k_values = typed(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(typed::<String>(key, value)?)),
            other => return Err(config_err(other, "unknown key")),
        }
        Ok(())
    }

    /// Applies every key of a TOML document on top of `self`.
    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("<document>", e.message().trim().to_string()))?;
        for (key, value) in table {
            self.set(&key, value)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_toml(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks every field against the preconditions of the modules it feeds.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("H", self.h),
            ("W", self.w),
            ("K", self.k),
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("lora_rank", self.lora_rank),
            ("batch", self.batch),
            ("train_pool", self.train_pool),
            ("test_pool", self.test_pool),
            ("pretrain_min_k", self.pretrain_min_k),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(config_err(key, format!("{key} ≥ 1 required, got 0")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(config_err("heads", format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if self.refiner_variant == RefinerVariant::Attention && !self.d.is_multiple_of(8) {
            return Err(config_err("d", "the attention refiner uses 8 heads, so d must be a multiple of 8"));
        }
        self.grid_spec().validate().map_err(|e| config_err("V", e.to_string()))?;
        if self.pretrain_min_k > self.k {
            return Err(config_err("pretrain_min_k", format!("pretrain_min_k ≤ K = {} required", self.k)));
        }
        for (key, lr) in [("pretrain_lr", self.pretrain_lr), ("lr", self.lr), ("lora_lr", self.lora_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(config_err(key, format!("{key} must be a finite, non-negative number")));
            }
        }
        if !(self.prefix_frac > 0.0 && self.prefix_frac < 1.0) {
            return Err(config_err("prefix_frac", "0 < prefix_frac < 1 required"));
        }
        if !(self.segment_frac > 0.0 && self.segment_frac <= 1.0) {
            return Err(config_err("segment_frac", "0 < segment_frac ≤ 1 required"));
        }
        if self.k_values.is_empty() {
            return Err(config_err("K_values", "at least one K required"));
        }
        for &k in &self.k_values {
            if k == 0 || k > self.k {
                return Err(config_err("K_values", format!("every K must lie in [1, K = {}], got {k}", self.k)));
            }
        }
        if self.train_pool < self.k {
            return Err(config_err("train_pool", "context retrieval needs train_pool ≥ K"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec { height: self.h, width: self.w, vocab: self.v, ..GridSpec::default() }
    }

    pub fn tokens_per_image(&self) -> usize {
        self.h * self.w
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            vocab: self.v,
            d_model: self.d,
            layers: self.layers,
            heads: self.heads,
            max_len: (2 * self.k + 2) * self.tokens_per_image(),
        }
    }

    pub fn refiner_config(&self, variant: RefinerVariant) -> RefinerConfig {
        let base = RefinerConfig::new(variant, self.d, self.tokens_per_image());
        RefinerConfig { positional: self.refiner_pos, eq3_plain: self.eq3_plain, ..base }
    }

    /// Output directory: the config value, else `$VQREFINE_OUT`, else `out`.
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// The resolved configuration as a TOML document in canonical key order.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let q = |x: &str| format!("{x:?}");
        line("task", q(self.task.name()));
        line("H", self.h.to_string());
        line("W", self.w.to_string());
        line("V", self.v.to_string());
        line("K", self.k.to_string());
        line("d", self.d.to_string());
        line("layers", self.layers.to_string());
        line("heads", self.heads.to_string());
        line("refiner_variant", q(self.refiner_variant.name()));
        line("loss", q(self.loss.name()));
        line("refiner_pos", self.refiner_pos.to_string());
        line("eq3_plain", self.eq3_plain.to_string());
        line("pretrain_lr", format!("{:?}", self.pretrain_lr));
        line("lr", format!("{:?}", self.lr));
        line("lora_lr", format!("{:?}", self.lora_lr));
        line("lora_rank", self.lora_rank.to_string());
        line("batch", self.batch.to_string());
        line("epochs", self.epochs.to_string());
        line("steps", self.steps.to_string());
        line("pretrain_min_k", self.pretrain_min_k.to_string());
        line("seed", self.seed.to_string());
        line("train_pool", self.train_pool.to_string());
        line("test_pool", self.test_pool.to_string());
        line("prefix_frac", format!("{:?}", self.prefix_frac));
        line("segment_frac", format!("{:?}", self.segment_frac));
        let ks: Vec<String> = self.k_values.iter().map(|k| k.to_string()).collect();
        line("K_values", format!("[{}]", ks.join(", ")));
        if let Some(dir) = &self.out_dir {
            line("out_dir", q(&dir.to_string_lossy()));
        }
        s
    }

    /// SHA-256 of the canonical document without `out_dir`, so the same run
    /// written to two places hashes alike.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { out_dir: None, ..self.clone() }.to_toml();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
