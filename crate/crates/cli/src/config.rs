//! Flat `key = value` run configuration covering the model, training, the
//! synthetic corpus and optional IDX data paths.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tvt_core::data::{DomainStyle, SynthConfig, Texture};
use tvt_core::trainer::TrainConfig;
use tvt_core::ModelConfig;

/// Problem with a config file, naming the offending key where there is one.
#[derive(Debug)]
pub enum ConfigError {
    Missing(PathBuf, std::io::Error),
    Syntax { line: usize, text: String },
    UnknownKey(String),
    DuplicateKey(String),
    BadValue { key: String, value: String, reason: String },
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Missing(path, e) => write!(f, "cannot read config file {}: {e}", path.display()),
            ConfigError::Syntax { line, text } => write!(f, "line {line}: expected `key = value`, got `{text}`"),
            ConfigError::UnknownKey(k) => write!(f, "unknown config key `{k}`"),
            ConfigError::DuplicateKey(k) => write!(f, "config key `{k}` given twice"),
            ConfigError::BadValue { key, value, reason } => {
                write!(f, "invalid value `{value}` for `{key}`: {reason}")
            }
            ConfigError::Invalid(m) => write!(f, "invalid configuration: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// IDX files replacing the synthetic corpus. Target training labels are read
/// for format symmetry only; training never looks at them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    pub source_train_images: Option<PathBuf>,
    pub source_train_labels: Option<PathBuf>,
    pub target_train_images: Option<PathBuf>,
    pub target_train_labels: Option<PathBuf>,
    pub target_test_images: Option<PathBuf>,
    pub target_test_labels: Option<PathBuf>,
}

impl DataPaths {
    fn all(&self) -> [&Option<PathBuf>; 6] {
        [
            &self.source_train_images,
            &self.source_train_labels,
            &self.target_train_images,
            &self.target_train_labels,
            &self.target_test_images,
            &self.target_test_labels,
        ]
    }

    pub fn is_idx(&self) -> bool {
        self.all().iter().any(|p| p.is_some())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            coords_per_param: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataPaths,
    pub gradcheck: GradCheckSettings,
}


fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn texture_name(t: Texture) -> &'static str {
    match t {
        Texture::Flat => "flat",
        Texture::Stripes { .. } => "stripes",
        Texture::Checker { .. } => "checker",
    }
}

fn set_texture(style: &mut DomainStyle, key: &str, value: &str) -> Result<(), ConfigError> {
    style.texture = match value {
        "flat" => Texture::Flat,
        "stripes" => Texture::Stripes {
            period: match style.texture {
                Texture::Stripes { period } => period,
                _ => 6.0,
            },
        },
        "checker" => Texture::Checker {
            cell: match style.texture {
                Texture::Checker { cell } => cell,
                _ => 4,
            },
        },
        _ => {
            return Err(ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: "expected flat, stripes or checker".into(),
            })
        }
    };
    Ok(())
}

fn set_style(style: &mut DomainStyle, field: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
    match field {
        "texture" => set_texture(style, key, value)?,
        "texture_period" => match &mut style.texture {
            Texture::Stripes { period } => *period = parse(key, value)?,
            _ => return Err(ConfigError::Invalid(format!("`{key}` needs texture = stripes, set before it"))),
        },
        "texture_cell" => match &mut style.texture {
            Texture::Checker { cell } => *cell = parse(key, value)?,
            _ => return Err(ConfigError::Invalid(format!("`{key}` needs texture = checker, set before it"))),
        },
        "texture_amplitude" => style.texture_amplitude = parse(key, value)?,
        "background" => style.background = parse(key, value)?,
        "intensity_offset" => style.intensity_offset = parse(key, value)?,
        "contrast" => style.contrast = parse(key, value)?,
        "noise" => style.noise = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Missing(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines; `#` starts a comment. Absent keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (m, t, s, d) = (&mut self.model, &mut self.train, &mut self.synth, &mut self.data);
        let path = || Some(PathBuf::from(value));
        match key {
            "image_size" => m.image_size = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "classes" => m.classes = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "init_std" => m.init_std = parse(key, value)?,

            "alpha" => t.alpha = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "tam" => t.tam = parse(key, value)?,
            "peak_lr" => t.peak_lr = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "batch_source" => t.batch_source = parse(key, value)?,
            "batch_target" => t.batch_target = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "max_grad_norm" => t.max_grad_norm = parse(key, value)?,

            "synth_seed" => s.seed = parse(key, value)?,
            "train_count" => s.train_count = parse(key, value)?,
            "test_count" => s.test_count = parse(key, value)?,

            "source_train_images" => d.source_train_images = path(),
            "source_train_labels" => d.source_train_labels = path(),
            "target_train_images" => d.target_train_images = path(),
            "target_train_labels" => d.target_train_labels = path(),
            "target_test_images" => d.target_test_images = path(),
            "target_test_labels" => d.target_test_labels = path(),

            "gradcheck_coords_per_param" => self.gradcheck.coords_per_param = parse(key, value)?,
            "gradcheck_seed" => self.gradcheck.seed = parse(key, value)?,

            _ => {
                let handled = if let Some(field) = key.strip_prefix("source.") {
                    set_style(&mut s.source, field, key, value)?
                } else if let Some(field) = key.strip_prefix("target.") {
                    set_style(&mut s.target, field, key, value)?
                } else {
                    false
                };
                if !handled {
                    return Err(ConfigError::UnknownKey(key.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: tvt_core::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.data.is_idx() && self.data.all().iter().any(|p| p.is_none()) {
            return Err(ConfigError::Invalid(
                "IDX data needs all of source_train_images/labels, target_train_images/labels and \
                 target_test_images/labels"
                    .into(),
            ));
        }
        if self.gradcheck.coords_per_param == 0 {
            return Err(ConfigError::Invalid("gradcheck_coords_per_param must be at least 1".into()));
        }
        Ok(())
    }

    /// The synthetic corpus settings, with the class count taken from the model.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.model.classes,
            image_size: self.model.image_size,
            ..self.synth.clone()
        }
    }

    /// Every key with its effective value, in the same format [`RunConfig::parse`] reads.
    pub fn render(&self) -> String {
        let (m, t, s, d) = (&self.model, &self.train, &self.synth, &self.data);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("channels", m.channels.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("heads", m.heads.to_string());
        kv("depth", m.depth.to_string());
        kv("classes", m.classes.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("init_std", m.init_std.to_string());
        kv("alpha", t.alpha.to_string());
        kv("beta", t.beta.to_string());
        kv("gamma", t.gamma.to_string());
        kv("tam", t.tam.to_string());
        kv("peak_lr", t.peak_lr.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("momentum", t.momentum.to_string());
        kv("batch_source", t.batch_source.to_string());
        kv("batch_target", t.batch_target.to_string());
        kv("seed", t.seed.to_string());
        kv("eval_interval", t.eval_interval.to_string());
        kv("max_grad_norm", t.max_grad_norm.to_string());
        kv("synth_seed", s.seed.to_string());
        kv("train_count", s.train_count.to_string());
        kv("test_count", s.test_count.to_string());
        for (prefix, style) in [("source", &s.source), ("target", &s.target)] {
            kv(&format!("{prefix}.texture"), texture_name(style.texture).to_string());
            match style.texture {
                Texture::Stripes { period } => kv(&format!("{prefix}.texture_period"), period.to_string()),
                Texture::Checker { cell } => kv(&format!("{prefix}.texture_cell"), cell.to_string()),
                Texture::Flat => {}
            }
            kv(&format!("{prefix}.texture_amplitude"), style.texture_amplitude.to_string());
            kv(&format!("{prefix}.background"), style.background.to_string());
            kv(&format!("{prefix}.intensity_offset"), style.intensity_offset.to_string());
            kv(&format!("{prefix}.contrast"), style.contrast.to_string());
            kv(&format!("{prefix}.noise"), style.noise.to_string());
        }
        let paths = [
            ("source_train_images", &d.source_train_images),
            ("source_train_labels", &d.source_train_labels),
            ("target_train_images", &d.target_train_images),
            ("target_train_labels", &d.target_train_labels),
            ("target_test_images", &d.target_test_images),
            ("target_test_labels", &d.target_test_labels),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("gradcheck_coords_per_param", self.gradcheck.coords_per_param.to_string());
        kv("gradcheck_seed", self.gradcheck.seed.to_string());
        out
    }
}
