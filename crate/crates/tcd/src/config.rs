//! Run configuration: a flat key=value text format covering the model,
//! the optimizer, the losses, and data handling.
//!
//! Parsing is strict — an unknown key is an error, not a warning — so a
//! typo cannot silently fall back to a default. `to_text` emits every key
//! in a fixed order; that canonical form is what checkpoints embed and
//! hash.

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::objectives::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // model
    pub titans_blocks: usize,
    pub embedding_dim: usize,
    pub patch_size: usize,
    pub chunk_size: usize,
    pub memory_interval: usize,
    pub persistent_tokens: usize,
    pub heads: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub decoder_channels: usize,
    pub convex_kernel: usize,
    pub memory: bool,
    pub second_order: bool,
    pub adapter: bool,
    pub fusion: FusionKind,
    pub bilinear_upsample: bool,
    // loss
    pub lambda: f64,
    pub epsilon: f64,
    // training
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimKind,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub augment: bool,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            titans_blocks: 12,
            embedding_dim: 192,
            patch_size: 16,
            chunk_size: 64,
            memory_interval: 3,
            persistent_tokens: 4,
            heads: 3,
            image_size: 256,
            image_channels: 3,
            decoder_channels: 64,
            convex_kernel: 3,
            memory: true,
            second_order: false,
            adapter: true,
            fusion: FusionKind::TsSum,
            bilinear_upsample: false,
            lambda: 1.0,
            epsilon: 1.0,
            seed: 0,
            lr: 4e-3,
            momentum: 0.9,
            optimizer: OptimKind::Sgd,
            weight_decay: 0.0,
            clip_norm: 0.5,
            steps: 1000,
            augment: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub fn fusion_name(kind: FusionKind) -> &'static str {
    match kind {
        FusionKind::TsSum => "ts_sum",
        FusionKind::TsDiff => "ts_diff",
        FusionKind::TsConv => "ts_conv",
        FusionKind::SiamDiff => "siam_diff",
        FusionKind::SiamConc => "siam_conc",
        FusionKind::EarlyFusion => "early_fusion",
    }
}

pub fn parse_fusion(v: &str) -> Result<FusionKind> {
    Ok(match v {
        "ts_sum" => FusionKind::TsSum,
        "ts_diff" => FusionKind::TsDiff,
        "ts_conv" => FusionKind::TsConv,
        "siam_diff" => FusionKind::SiamDiff,
        "siam_conc" => FusionKind::SiamConc,
        "early_fusion" => FusionKind::EarlyFusion,
        _ => {
            return Err(Error::Config(format!(
                "fusion: got {v:?}, expected one of ts_sum ts_diff ts_conv siam_diff siam_conc early_fusion"
            )))
        }
    })
}

impl Config {
    /// Parses key=value lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys and duplicate keys are errors.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", ln + 1))
            })?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", ln + 1)));
            }
            match key {
                "titans_blocks" => cfg.titans_blocks = parse_num(key, v)?,
                "embedding_dim" => cfg.embedding_dim = parse_num(key, v)?,
                "patch_size" => cfg.patch_size = parse_num(key, v)?,
                "chunk_size" => cfg.chunk_size = parse_num(key, v)?,
                "memory_interval" => cfg.memory_interval = parse_num(key, v)?,
                "persistent_tokens" => cfg.persistent_tokens = parse_num(key, v)?,
                "heads" => cfg.heads = parse_num(key, v)?,
                "image_size" => cfg.image_size = parse_num(key, v)?,
                "image_channels" => cfg.image_channels = parse_num(key, v)?,
                "decoder_channels" => cfg.decoder_channels = parse_num(key, v)?,
                "convex_kernel" => cfg.convex_kernel = parse_num(key, v)?,
                "memory" => cfg.memory = parse_bool(key, v)?,
                "second_order" => cfg.second_order = parse_bool(key, v)?,
                "adapter" => cfg.adapter = parse_bool(key, v)?,
                "fusion" => cfg.fusion = parse_fusion(v)?,
                "upsample" => {
                    cfg.bilinear_upsample = match v {
                        "convex" => false,
                        "bilinear" => true,
                        _ => {
                            return Err(Error::Config(format!(
                                "upsample: got {v:?}, expected convex or bilinear"
                            )))
                        }
                    }
                }
                "lambda" => cfg.lambda = parse_num(key, v)?,
                "epsilon" => cfg.epsilon = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "lr" => cfg.lr = parse_num(key, v)?,
                "momentum" => cfg.momentum = parse_num(key, v)?,
                "optimizer" => {
                    cfg.optimizer = match v {
                        "sgd" => OptimKind::Sgd,
                        "adam" => OptimKind::Adam,
                        _ => {
                            return Err(Error::Config(format!(
                                "optimizer: got {v:?}, expected sgd or adam"
                            )))
                        }
                    }
                }
                "weight_decay" => cfg.weight_decay = parse_num(key, v)?,
                "clip_norm" => cfg.clip_norm = parse_num(key, v)?,
                "steps" => cfg.steps = parse_num(key, v)?,
                "augment" => cfg.augment = parse_bool(key, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", ln + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "titans_blocks = {}\nembedding_dim = {}\npatch_size = {}\nchunk_size = {}\n\
             memory_interval = {}\npersistent_tokens = {}\nheads = {}\nimage_size = {}\n\
             image_channels = {}\ndecoder_channels = {}\nconvex_kernel = {}\nmemory = {}\n\
             second_order = {}\nadapter = {}\nfusion = {}\nupsample = {}\nlambda = {}\n\
             epsilon = {}\nseed = {}\nlr = {}\nmomentum = {}\noptimizer = {}\n\
             weight_decay = {}\nclip_norm = {}\nsteps = {}\naugment = {}\n",
            self.titans_blocks,
            self.embedding_dim,
            self.patch_size,
            self.chunk_size,
            self.memory_interval,
            self.persistent_tokens,
            self.heads,
            self.image_size,
            self.image_channels,
            self.decoder_channels,
            self.convex_kernel,
            self.memory,
            self.second_order,
            self.adapter,
            fusion_name(self.fusion),
            if self.bilinear_upsample { "bilinear" } else { "convex" },
            self.lambda,
            self.epsilon,
            self.seed,
            self.lr,
            self.momentum,
            match self.optimizer {
                OptimKind::Sgd => "sgd",
                OptimKind::Adam => "adam",
            },
            self.weight_decay,
            self.clip_norm,
            self.steps,
            self.augment,
        )
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.titans_blocks,
            dim: self.embedding_dim,
            patch: self.patch_size,
            chunk: self.chunk_size,
            persistent: self.persistent_tokens,
            heads: self.heads,
            memory_interval: self.memory_interval,
            memory: self.memory,
            second_order: self.second_order,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, epsilon: self.epsilon }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.loss_config().validate()?;
        if self.image_size == 0 || self.image_size % (2 * self.patch_size) != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 2*patch_size = {}",
                self.image_size,
                2 * self.patch_size
            )));
        }
        if self.patch_size < 4 || !self.patch_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch_size must be a power of two >= 4, got {}",
                self.patch_size
            )));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        if self.decoder_channels == 0 {
            return Err(Error::Config("decoder_channels must be positive".into()));
        }
        if self.convex_kernel % 2 == 0 || self.convex_kernel == 0 {
            return Err(Error::Config(format!(
                "convex_kernel must be odd, got {}",
                self.convex_kernel
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}
