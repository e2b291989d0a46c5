//! Run configuration and its line-based `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! duplicate keys are errors. [`RunConfig::to_text`] emits every key, so a
//! saved snapshot parses back to the same config.

use std::fmt::Write as _;
use std::path::PathBuf;

use rgin_synth::TemplateMix;

use crate::error::{Result, RginError};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels; must be a multiple of 16.
    pub canvas: usize,
    /// Append normalised x/y coordinate planes to the image.
    pub coord_channels: bool,
    /// Output channels of the stem and the three backbone stages.
    pub widths: [usize; 4],
    /// Common channel count `m` of the projected maps.
    pub channels: usize,
    pub embed_dim: usize,
    /// GRU hidden size `n`, also the text feature size.
    pub hidden: usize,
    /// Attention projection size `d_a`.
    pub att_dim: usize,
    /// Multimodal fusion size `d`.
    pub fusion_dim: usize,
    pub heads: usize,
    pub priors: usize,
    pub slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub max_tokens: usize,
    pub enable_afs: bool,
    pub enable_garan: bool,
    pub enable_att_loss: bool,
    /// Also supervise the diffuse logits with the attention targets.
    pub supervise_diffuse: bool,
    pub lambda: f64,
    /// Weight of negative entries in the confidence loss.
    pub neg_weight: f64,
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canvas: 96,
            coord_channels: true,
            widths: [8, 16, 32, 64],
            channels: 64,
            embed_dim: 64,
            hidden: 128,
            att_dim: 64,
            fusion_dim: 128,
            heads: 2,
            priors: 3,
            slope: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            max_tokens: 16,
            enable_afs: true,
            enable_garan: true,
            enable_att_loss: true,
            supervise_diffuse: false,
            lambda: 0.05,
            neg_weight: 1.0,
            freeze_backbone: false,
        }
    }
}

impl ModelConfig {
    /// Side `s` of the prediction grid.
    pub fn grid(&self) -> usize {
        self.canvas / 16
    }

    pub fn input_channels(&self) -> usize {
        if self.coord_channels {
            5
        } else {
            3
        }
    }

    /// Tiny configuration for end-to-end gradient checks: 2×2 grid, `m = 8`,
    /// two heads, one prior.
    pub fn toy() -> Self {
        ModelConfig {
            canvas: 32,
            widths: [2, 3, 4, 4],
            channels: 8,
            embed_dim: 3,
            hidden: 4,
            att_dim: 3,
            fusion_dim: 4,
            heads: 2,
            priors: 1,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RginError::InvalidConfig(msg));
        if self.canvas < 32 || self.canvas % 16 != 0 {
            return bad(format!(
                "canvas {} must be a multiple of 16 and at least 32",
                self.canvas
            ));
        }
        let dims = [
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("att_dim", self.att_dim),
            ("fusion_dim", self.fusion_dim),
            ("heads", self.heads),
            ("priors", self.priors),
            ("max_tokens", self.max_tokens),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.widths.contains(&0) {
            return bad("widths must be positive".into());
        }
        if self.channels % self.heads != 0 {
            return bad(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return bad(format!("slope {} outside (0, 1)", self.slope));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_eps must be positive and bn_momentum in (0, 1]".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "lambda {} must be a finite non-negative number",
                self.lambda
            ));
        }
        if !(self.neg_weight >= 0.0 && self.neg_weight.is_finite()) {
            return bad(format!(
                "neg_weight {} must be non-negative",
                self.neg_weight
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate halves every this many epochs.
    pub lr_halve_every: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a lower validation loss.
    pub patience: usize,
    pub batch: usize,
    pub seed: u64,
    /// Worker threads for evaluation; training itself is single-threaded.
    pub threads: usize,
    /// Cap on training scenes per epoch (0 = all); useful for quick runs.
    pub train_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_halve_every: 10,
            max_epochs: 60,
            patience: 5,
            batch: 16,
            seed: 0,
            threads: 1,
            train_limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Scenes generated by `gen-data` across all splits.
    pub scenes: usize,
    pub mix: TemplateMix,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            scenes: 25_000,
            mix: TemplateMix::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{v:?} is not finite"))
    }
}

/// Every key understood by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "canvas",
    "coord_channels",
    "widths",
    "channels",
    "embed_dim",
    "hidden",
    "att_dim",
    "fusion_dim",
    "heads",
    "priors",
    "slope",
    "bn_eps",
    "bn_momentum",
    "max_tokens",
    "enable_afs",
    "enable_garan",
    "enable_att_loss",
    "supervise_diffuse",
    "lambda",
    "neg_weight",
    "freeze_backbone",
    "lr",
    "lr_halve_every",
    "max_epochs",
    "patience",
    "batch",
    "seed",
    "threads",
    "train_limit",
    "data_dir",
    "out_dir",
    "scenes",
    "mix",
];

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "canvas" => m.canvas = parse_num(value)?,
            "coord_channels" => m.coord_channels = parse_bool(value)?,
            "widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse_num(p.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                m.widths = parts
                    .try_into()
                    .map_err(|_| format!("widths needs 4 comma-separated values, got {value:?}"))?;
            }
            "channels" => m.channels = parse_num(value)?,
            "embed_dim" => m.embed_dim = parse_num(value)?,
            "hidden" => m.hidden = parse_num(value)?,
            "att_dim" => m.att_dim = parse_num(value)?,
            "fusion_dim" => m.fusion_dim = parse_num(value)?,
            "heads" => m.heads = parse_num(value)?,
            "priors" => m.priors = parse_num(value)?,
            "slope" => m.slope = parse_f64(value)?,
            "bn_eps" => m.bn_eps = parse_f64(value)?,
            "bn_momentum" => m.bn_momentum = parse_f64(value)?,
            "max_tokens" => m.max_tokens = parse_num(value)?,
            "enable_afs" => m.enable_afs = parse_bool(value)?,
            "enable_garan" => m.enable_garan = parse_bool(value)?,
            "enable_att_loss" => m.enable_att_loss = parse_bool(value)?,
            "supervise_diffuse" => m.supervise_diffuse = parse_bool(value)?,
            "lambda" => m.lambda = parse_f64(value)?,
            "neg_weight" => m.neg_weight = parse_f64(value)?,
            "freeze_backbone" => m.freeze_backbone = parse_bool(value)?,
            "lr" => t.lr = parse_f64(value)?,
            "lr_halve_every" => t.lr_halve_every = parse_num(value)?,
            "max_epochs" => t.max_epochs = parse_num(value)?,
            "patience" => t.patience = parse_num(value)?,
            "batch" => t.batch = parse_num(value)?,
            "seed" => t.seed = parse_num(value)?,
            "threads" => t.threads = parse_num(value)?,
            "train_limit" => t.train_limit = parse_num(value)?,
            "data_dir" => d.data_dir = PathBuf::from(value),
            "out_dir" => d.out_dir = PathBuf::from(value),
            "scenes" => d.scenes = parse_num(value)?,
            "mix" => d.mix = TemplateMix::parse(value).map_err(|e| e.to_string())?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| RginError::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RginError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0) {
            return Err(RginError::InvalidConfig(format!(
                "lr {} must be positive",
                t.lr
            )));
        }
        if t.batch < 2 {
            return Err(RginError::InvalidConfig(
                "batch must be at least 2 (batch norm)".into(),
            ));
        }
        if t.max_epochs == 0 || t.lr_halve_every == 0 || t.threads == 0 {
            return Err(RginError::InvalidConfig(
                "max_epochs, lr_halve_every and threads must be positive".into(),
            ));
        }
        if self.data.scenes < 10 {
            return Err(RginError::InvalidConfig(
                "scenes must be at least 10".into(),
            ));
        }
        self.data
            .mix
            .validate()
            .map_err(|e| RginError::InvalidConfig(e.to_string()))
    }

    /// Applies `RGIN_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("RGIN_SEED") {
            self.train.seed = v.trim().parse().map_err(|_| {
                RginError::InvalidConfig(format!("RGIN_SEED={v:?} is not an integer"))
            })?;
        }
        Ok(())
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let w = m.widths;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("canvas", m.canvas.to_string());
        put("coord_channels", m.coord_channels.to_string());
        put("widths", format!("{},{},{},{}", w[0], w[1], w[2], w[3]));
        put("channels", m.channels.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("hidden", m.hidden.to_string());
        put("att_dim", m.att_dim.to_string());
        put("fusion_dim", m.fusion_dim.to_string());
        put("heads", m.heads.to_string());
        put("priors", m.priors.to_string());
        put("slope", m.slope.to_string());
        put("bn_eps", m.bn_eps.to_string());
        put("bn_momentum", m.bn_momentum.to_string());
        put("max_tokens", m.max_tokens.to_string());
        put("enable_afs", m.enable_afs.to_string());
        put("enable_garan", m.enable_garan.to_string());
        put("enable_att_loss", m.enable_att_loss.to_string());
        put("supervise_diffuse", m.supervise_diffuse.to_string());
        put("lambda", m.lambda.to_string());
        put("neg_weight", m.neg_weight.to_string());
        put("freeze_backbone", m.freeze_backbone.to_string());
        put("lr", t.lr.to_string());
        put("lr_halve_every", t.lr_halve_every.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("patience", t.patience.to_string());
        put("batch", t.batch.to_string());
        put("seed", t.seed.to_string());
        put("threads", t.threads.to_string());
        put("train_limit", t.train_limit.to_string());
        put("data_dir", d.data_dir.display().to_string());
        put("out_dir", d.out_dir.display().to_string());
        put("scenes", d.scenes.to_string());
        put("mix", d.mix.to_string());
        s
    }
}
