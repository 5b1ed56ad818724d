//! Flat `key = value` configuration files and the training configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoding::EncoderConfig;
use crate::error::{Error, Result};
use crate::labels::LabelWeights;

/// Parsed `key = value` file. Keys are consumed by the config builders;
/// anything left over is an unknown key and a hard error.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (value, lineno)).is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((value, line)) => value.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad value '{value}' for key '{key}'"),
            }),
        }
    }

    /// Reject any key no builder consumed — silent typos are worse than errors.
    pub fn ensure_empty(&self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.iter().next() {
            return Err(Error::Parse {
                line: *line,
                message: format!("unknown key '{key}'"),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    None,
    Static,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::Static => "static",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(BaselineKind::None),
            "static" => Ok(BaselineKind::Static),
            other => Err(format!("unknown baseline '{other}'")),
        }
    }
}

/// Everything a training run needs: encoder dims, architecture sizes,
/// loss weights, optimizer settings and ablation switches.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_latent: usize,
    pub d_hidden: usize,
    pub classes: usize,
    pub t_max: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub vae_samples: usize,
    /// `extra` adds index-based sinusoidal encodings inside the transformer.
    pub positional_extra: bool,
    /// Zero the modality segment of x_t fed to the temporal layer.
    pub zero_modality_block: bool,
    pub baseline: BaselineKind,
    pub label_weights: LabelWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            d_latent: 16,
            d_hidden: 64,
            classes: 4,
            t_max: 64,
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 42,
            optimizer: OptimizerKind::Adam,
            grad_clip: 5.0,
            vae_samples: 1,
            positional_extra: false,
            zero_modality_block: false,
            baseline: BaselineKind::None,
            label_weights: LabelWeights::default(),
        }
    }
}

/// Fallback seed resolution: explicit flag, then file value, then the
/// TIMGEN_SEED environment variable, then the built-in default.
pub fn resolve_seed(flag: Option<u64>, file_value: Option<u64>, default: u64) -> u64 {
    flag.or(file_value)
        .or_else(|| {
            std::env::var("TIMGEN_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(default)
}

impl TrainConfig {
    pub fn from_config(mut file: ConfigFile) -> Result<Self> {
        let d = TrainConfig::default();
        let positional = file.take_raw("positional").unwrap_or_else(|| "none".into());
        let positional_extra = match positional.as_str() {
            "none" => false,
            "extra" => true,
            other => {
                return Err(Error::validation(format!(
                    "positional must be 'none' or 'extra', got '{other}'"
                )))
            }
        };
        let file_seed: Option<u64> = match file.take_raw("seed") {
            Some(v) => Some(v.parse().map_err(|_| Error::validation(format!("bad seed '{v}'")))?),
            None => None,
        };
        let cfg = Self {
            encoder: EncoderConfig {
                d_action: file.take("d_action", d.encoder.d_action)?,
                d_dev: file.take("d_dev", d.encoder.d_dev)?,
                d_plat: file.take("d_plat", d.encoder.d_plat)?,
                d_geo: file.take("d_geo", d.encoder.d_geo)?,
                geo_vocab: file.take("geo_vocab", d.encoder.geo_vocab)?,
                d_abs: file.take("d_abs", d.encoder.d_abs)?,
                d_gap: file.take("d_gap", d.encoder.d_gap)?,
                gap_buckets: file.take("gap_buckets", d.encoder.gap_buckets)?,
                d_text: file.take("d_text", d.encoder.d_text)?,
                d_img: file.take("d_img", d.encoder.d_img)?,
                d_video: file.take("d_video", d.encoder.d_video)?,
                d_audio: file.take("d_audio", d.encoder.d_audio)?,
                d_model: file.take("d_model", d.encoder.d_model)?,
            },
            n_layers: file.take("n_layers", d.n_layers)?,
            n_heads: file.take("n_heads", d.n_heads)?,
            d_ff: file.take("d_ff", d.d_ff)?,
            d_latent: file.take("d_latent", d.d_latent)?,
            d_hidden: file.take("d_hidden", d.d_hidden)?,
            classes: file.take("classes", d.classes)?,
            t_max: file.take("t_max", d.t_max)?,
            lambda1: file.take("lambda1", d.lambda1)?,
            lambda2: file.take("lambda2", d.lambda2)?,
            learning_rate: file.take("learning_rate", d.learning_rate)?,
            epochs: file.take("epochs", d.epochs)?,
            batch_size: file.take("batch_size", d.batch_size)?,
            seed: resolve_seed(None, file_seed, d.seed),
            optimizer: file.take("optimizer", d.optimizer)?,
            grad_clip: file.take("grad_clip", d.grad_clip)?,
            vae_samples: file.take("vae_samples", d.vae_samples)?,
            positional_extra,
            zero_modality_block: file.take("zero_modality_block", d.zero_modality_block)?,
            baseline: file.take("baseline", d.baseline)?,
            label_weights: LabelWeights {
                ecommerce: [
                    file.take("label_w_click", d.label_weights.ecommerce[0])?,
                    file.take("label_w_cart", d.label_weights.ecommerce[1])?,
                    file.take("label_w_purchase", d.label_weights.ecommerce[2])?,
                    file.take("label_w_comment", d.label_weights.ecommerce[3])?,
                ],
                video: [
                    file.take("label_v_ratio", d.label_weights.video[0])?,
                    file.take("label_v_like", d.label_weights.video[1])?,
                    file.take("label_v_comment", d.label_weights.video[2])?,
                    file.take("label_v_share", d.label_weights.video[3])?,
                ],
            },
        };
        file.ensure_empty()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_config(ConfigFile::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.label_weights.validate()?;
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::validation("lambda1 and lambda2 must be >= 0"));
        }
        if self.epochs < 1 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.t_max < 1 {
            return Err(Error::validation("t_max must be >= 1"));
        }
        if self.vae_samples < 1 {
            return Err(Error::validation("vae_samples must be >= 1"));
        }
        if self.n_heads == 0 || self.encoder.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {} not divisible by n_heads {}",
                self.encoder.d_model, self.n_heads
            )));
        }
        let sizes = [self.n_layers, self.d_ff, self.d_latent, self.d_hidden, self.classes];
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::validation(
                "n_layers, d_ff, d_latent, d_hidden and classes must be >= 1",
            ));
        }
        Ok(())
    }

    /// Effective configuration as `key = value` lines. Parsing this text back
    /// through [`TrainConfig::from_config`] reproduces the config exactly.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let e = &self.encoder;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_action", e.d_action.to_string());
        kv("d_dev", e.d_dev.to_string());
        kv("d_plat", e.d_plat.to_string());
        kv("d_geo", e.d_geo.to_string());
        kv("geo_vocab", e.geo_vocab.to_string());
        kv("d_abs", e.d_abs.to_string());
        kv("d_gap", e.d_gap.to_string());
        kv("gap_buckets", e.gap_buckets.to_string());
        kv("d_text", e.d_text.to_string());
        kv("d_img", e.d_img.to_string());
        kv("d_video", e.d_video.to_string());
        kv("d_audio", e.d_audio.to_string());
        kv("d_model", e.d_model.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("d_latent", self.d_latent.to_string());
        kv("d_hidden", self.d_hidden.to_string());
        kv("classes", self.classes.to_string());
        kv("t_max", self.t_max.to_string());
        kv("lambda1", self.lambda1.to_string());
        kv("lambda2", self.lambda2.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("optimizer", self.optimizer.as_str().to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("vae_samples", self.vae_samples.to_string());
        kv(
            "positional",
            if self.positional_extra { "extra" } else { "none" }.to_string(),
        );
        kv("zero_modality_block", self.zero_modality_block.to_string());
        kv("baseline", self.baseline.as_str().to_string());
        kv("label_w_click", self.label_weights.ecommerce[0].to_string());
        kv("label_w_cart", self.label_weights.ecommerce[1].to_string());
        kv("label_w_purchase", self.label_weights.ecommerce[2].to_string());
        kv("label_w_comment", self.label_weights.ecommerce[3].to_string());
        kv("label_v_ratio", self.label_weights.video[0].to_string());
        kv("label_v_like", self.label_weights.video[1].to_string());
        kv("label_v_comment", self.label_weights.video[2].to_string());
        kv("label_v_share", self.label_weights.video[3].to_string());
        s
    }
}
