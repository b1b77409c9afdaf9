//! Experiment configuration: a sectioned `key = value` text file checked
//! against a fixed schema, with dotted-path overrides from the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fdm_core::denoiser::{DenoiserConfig, Parameterization};
use fdm_core::diffusion::ZetaMode;
use fdm_core::sampler::CondSpec;
use fdm_core::schedules::{RescaleMode, StageKind};
use fdm_core::trainer::TrainConfig;
use fdm_core::transforms::TransformKind;
use fdm_core::Shape;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    /// Part of the model identity (enters the config hash).
    pub hashed: bool,
}

const fn key(key: &'static str, default: &'static str, help: &'static str, hashed: bool) -> KeySpec {
    KeySpec {
        key,
        default,
        help,
        hashed,
    }
}

pub const SCHEMA: &[KeySpec] = &[
    key("transform.kind", "downsample", "downsample | blur_uniform | blur_gaussian | linear_ae", true),
    key("transform.stages", "2", "number of boundaries K", true),
    key("transform.image_size", "32", "stage-0 height and width", true),
    key("transform.channels", "3", "image channels", true),
    key("transform.gamma", "default", "default | estimate | comma-separated list, one per boundary", true),
    key("transform.ae_latent", "4x8x8", "linear_ae latent shape CxHxW", true),
    key("transform.ae_sweeps", "12", "linear_ae power-iteration sweeps", true),
    key("schedule.stage_kind", "linear", "linear | cosine stage boundaries", true),
    key("schedule.rescale", "vp", "none | sp | vp noise rescaling", true),
    key("schedule.zeta", "average", "drop | average boundary noise operator", false),
    key("model.base_channels", "40", "trunk width", true),
    key("model.time_frequencies", "6", "sinusoid frequencies for t", true),
    key("model.stage_frequencies", "2", "sinusoid frequencies for the stage index", true),
    key("model.parameterization", "v", "v | eps output head", true),
    key("model.seed", "0", "weight initialization seed", true),
    key("train.steps", "5000", "optimizer steps", false),
    key("train.lr", "1e-3", "AdamW learning rate", true),
    key("train.beta1", "0.9", "AdamW first-moment decay", true),
    key("train.beta2", "0.999", "AdamW second-moment decay", true),
    key("train.adam_eps", "1e-8", "AdamW epsilon", true),
    key("train.weight_decay", "1e-4", "decoupled weight decay", true),
    key("train.batch_size", "16", "images per step", true),
    key("train.ema_decay", "0.9999", "EMA decay", true),
    key("train.ema_warmup", "true", "use min(decay, (1+n)/(10+n))", true),
    key("train.seed", "0", "seed of the batch and (t, eps) stream", true),
    key("train.checkpoint_every", "1000", "steps between checkpoints (0: only at the end)", false),
    key("train.log_every", "1", "steps between CSV log rows", false),
    key("sample.eta", "1", "DDPM ratio in [0, 1]", false),
    key("sample.dt", "0.004", "step size; 1/dt must be an integer", false),
    key("sample.seed", "0", "seed of the first sample", false),
    key("sample.count", "16", "number of samples", false),
    key("cond.stage", "1", "stage of the condition", false),
    key("cond.lambda", "0.1", "initial gradient step size", false),
    key("cond.n_init", "20", "gradient-initialization steps", false),
    key("corpus.source", "blobs,n=2048,size=32", "blobs,n=N,size=S | dir:PATH", true),
    key("corpus.seed", "0", "synthetic corpus seed", true),
    key("output.dir", "runs/default", "output directory", false),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    Blobs { n: usize, size: usize },
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum GammaSpec {
    /// 1 for downsampling and blur stacks, estimated for the autoencoder.
    Default,
    Estimate,
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
    pub kind: TransformKind,
    pub stages: usize,
    pub image_size: usize,
    pub channels: usize,
    pub gamma: GammaSpec,
    pub ae_latent: Shape,
    pub ae_sweeps: usize,
    pub stage_kind: StageKind,
    pub rescale: RescaleMode,
    pub zeta: ZetaMode,
    pub model: DenoiserConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub train_steps: u64,
    pub train_seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub eta: f64,
    pub dt: f64,
    pub sample_seed: u64,
    pub sample_count: usize,
    pub cond: CondSpec,
    pub corpus: CorpusSource,
    pub corpus_seed: u64,
    pub output_dir: PathBuf,
}

fn parse<T: std::str::FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let raw = &values[key];
    raw.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        msg: format!("`{raw}`: {e}"),
    })
}

fn bad(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        msg: msg.into(),
    }
}

pub fn parse_shape(s: &str) -> Option<Shape> {
    let parts: Vec<usize> = s.split('x').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    match parts[..] {
        [c, h, w] => Some(Shape::new(c, h, w)),
        _ => None,
    }
}

pub fn parse_corpus(s: &str) -> Result<CorpusSource, ConfigError> {
    if let Some(dir) = s.strip_prefix("dir:") {
        return Ok(CorpusSource::Dir(PathBuf::from(dir)));
    }
    let mut parts = s.split(',');
    if parts.next().map(str::trim) != Some("blobs") {
        return Err(bad("corpus.source", format!("unknown corpus `{s}`")));
    }
    let (mut n, mut size) = (2048, 32);
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| bad("corpus.source", format!("expected key=value, got `{p}`")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| bad("corpus.source", format!("`{v}` is not a count")))?;
        match k.trim() {
            "n" => n = v,
            "size" => size = v,
            other => return Err(bad("corpus.source", format!("unknown blobs option `{other}`"))),
        }
    }
    if n == 0 || size == 0 {
        return Err(bad("corpus.source", "n and size must be positive"));
    }
    Ok(CorpusSource::Blobs { n, size })
}

impl ExperimentConfig {
    fn defaults() -> BTreeMap<String, String> {
        SCHEMA
            .iter()
            .map(|s| (s.key.to_string(), s.default.to_string()))
            .collect()
    }

    /// Parses config text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut values = Self::defaults();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(ConfigError::Syntax {
                    line: i + 1,
                    msg: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                if !SCHEMA.iter().any(|s| s.key.starts_with(&format!("{section}."))) {
                    return Err(ConfigError::UnknownKey(format!("[{section}]")));
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            if section.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "key outside of a section".into(),
                });
            }
            let dotted = format!("{section}.{}", k.trim());
            if spec(&dotted).is_none() {
                return Err(ConfigError::UnknownKey(dotted));
            }
            values.insert(dotted, v.trim().to_string());
        }
        Self::from_values(values)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Ok(Self::parse_text(&text)?)
    }

    pub fn default_config() -> Self {
        Self::from_values(Self::defaults()).expect("defaults are valid")
    }

    /// Applies `section.key=value` overrides.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut values = self.values.clone();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or(ConfigError::Syntax {
                line: 0,
                msg: format!("override `{o}` is not key=value"),
            })?;
            let k = k.trim();
            if spec(k).is_none() {
                return Err(ConfigError::UnknownKey(k.into()));
            }
            values.insert(k.into(), v.trim().into());
        }
        Self::from_values(values)
    }

    pub fn set<S: AsRef<str>>(&self, key: &str, value: S) -> Result<Self, ConfigError> {
        self.with_overrides(&[format!("{key}={}", value.as_ref())])
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let kind = match values["transform.kind"].as_str() {
            "downsample" => TransformKind::Downsample,
            "blur_uniform" => TransformKind::BlurUpsample,
            "blur_gaussian" => TransformKind::BlurGaussian,
            "linear_ae" => TransformKind::LinearAe,
            other => return Err(bad("transform.kind", format!("unknown transform `{other}`"))),
        };
        let stages: usize = parse(&values, "transform.stages")?;
        let gamma = match values["transform.gamma"].as_str() {
            "default" => GammaSpec::Default,
            "estimate" => GammaSpec::Estimate,
            list => GammaSpec::Values(
                list.split(',')
                    .map(|g| g.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad("transform.gamma", e.to_string()))?,
            ),
        };
        let ae_latent = parse_shape(&values["transform.ae_latent"])
            .ok_or_else(|| bad("transform.ae_latent", "expected CxHxW"))?;
        let stage_kind = match values["schedule.stage_kind"].as_str() {
            "linear" => StageKind::Linear,
            "cosine" => StageKind::Cosine,
            other => return Err(bad("schedule.stage_kind", format!("unknown `{other}`"))),
        };
        let rescale = match values["schedule.rescale"].as_str() {
            "none" => RescaleMode::None,
            "sp" => RescaleMode::SignalPreserved,
            "vp" => RescaleMode::VariancePreserved,
            other => return Err(bad("schedule.rescale", format!("unknown `{other}`"))),
        };
        let zeta = match values["schedule.zeta"].as_str() {
            "drop" => ZetaMode::Drop,
            "average" => ZetaMode::Average,
            other => return Err(bad("schedule.zeta", format!("unknown `{other}`"))),
        };
        let parameterization = match values["model.parameterization"].as_str() {
            "v" => Parameterization::Velocity,
            "eps" => Parameterization::Epsilon,
            other => return Err(bad("model.parameterization", format!("unknown `{other}`"))),
        };
        let model = DenoiserConfig {
            base_channels: parse(&values, "model.base_channels")?,
            time_frequencies: parse(&values, "model.time_frequencies")?,
            stage_frequencies: parse(&values, "model.stage_frequencies")?,
            parameterization,
        };
        let train = TrainConfig {
            lr: parse(&values, "train.lr")?,
            beta1: parse(&values, "train.beta1")?,
            beta2: parse(&values, "train.beta2")?,
            adam_eps: parse(&values, "train.adam_eps")?,
            weight_decay: parse(&values, "train.weight_decay")?,
            batch_size: parse(&values, "train.batch_size")?,
            ema_decay: parse(&values, "train.ema_decay")?,
            ema_warmup: parse(&values, "train.ema_warmup")?,
        };
        let cond = CondSpec {
            stage: parse(&values, "cond.stage")?,
            lambda: parse(&values, "cond.lambda")?,
            n_init: parse(&values, "cond.n_init")?,
        };
        let corpus = parse_corpus(&values["corpus.source"])?;
        let cfg = Self {
            kind,
            stages,
            image_size: parse(&values, "transform.image_size")?,
            channels: parse(&values, "transform.channels")?,
            gamma,
            ae_latent,
            ae_sweeps: parse(&values, "transform.ae_sweeps")?,
            stage_kind,
            rescale,
            zeta,
            model,
            model_seed: parse(&values, "model.seed")?,
            train,
            train_steps: parse(&values, "train.steps")?,
            train_seed: parse(&values, "train.seed")?,
            checkpoint_every: parse(&values, "train.checkpoint_every")?,
            log_every: parse(&values, "train.log_every")?,
            eta: parse(&values, "sample.eta")?,
            dt: parse(&values, "sample.dt")?,
            sample_seed: parse(&values, "sample.seed")?,
            sample_count: parse(&values, "sample.count")?,
            cond,
            corpus,
            corpus_seed: parse(&values, "corpus.seed")?,
            output_dir: PathBuf::from(&values["output.dir"]),
            values,
        };
        cfg.check_consistency()?;
        Ok(cfg)
    }

    fn check_consistency(&self) -> Result<(), ConfigError> {
        let inconsistent = |m: String| Err(ConfigError::Inconsistent(m));
        if self.channels == 0 || self.image_size == 0 {
            return inconsistent("channels and image_size must be positive".into());
        }
        match self.kind {
            TransformKind::Downsample | TransformKind::BlurUpsample => {
                let div = 1usize << self.stages.min(usize::BITS as usize - 1);
                // the denoiser halves once more inside the trunk
                if !self.image_size.is_multiple_of(div * 2) {
                    return inconsistent(format!(
                        "image_size {} must be divisible by 2^(K+1) = {}",
                        self.image_size,
                        div * 2
                    ));
                }
            }
            TransformKind::BlurGaussian => {
                if !self.image_size.is_multiple_of(2) {
                    return inconsistent("image_size must be even".into());
                }
            }
            TransformKind::LinearAe => {
                if self.stages != 1 {
                    return inconsistent("linear_ae has exactly one boundary (stages = 1)".into());
                }
                let dim = self.channels * self.image_size * self.image_size;
                if self.ae_latent.numel() > dim || !self.ae_latent.height.is_multiple_of(2) || !self.ae_latent.width.is_multiple_of(2) {
                    return inconsistent(format!(
                        "latent {} must be smaller than the image and have even extents",
                        self.ae_latent
                    ));
                }
            }
        }
        if let GammaSpec::Values(g) = &self.gamma {
            if g.len() != self.stages {
                return inconsistent(format!("{} gamma values for {} boundaries", g.len(), self.stages));
            }
        }
        if let CorpusSource::Blobs { size, .. } = self.corpus {
            if size != self.image_size {
                return inconsistent(format!(
                    "blob size {size} differs from image_size {}",
                    self.image_size
                ));
            }
        }
        if self.cond.stage > self.stages {
            return inconsistent(format!("cond.stage {} exceeds K = {}", self.cond.stage, self.stages));
        }
        if self.train.batch_size == 0 {
            return inconsistent("train.batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn image_shape(&self) -> Shape {
        Shape::new(self.channels, self.image_size, self.image_size)
    }

    /// Canonical text of all keys, grouped by section.
    pub fn to_text(&self) -> String {
        self.render(|_| true)
    }

    /// Canonical text of the keys that define the trained model.
    pub fn identity_text(&self) -> String {
        self.render(|s| s.hashed)
    }

    fn render(&self, keep: impl Fn(&KeySpec) -> bool) -> String {
        let mut out = String::new();
        let mut section = "";
        for s in SCHEMA.iter().filter(|s| keep(s)) {
            let (sec, k) = s.key.split_once('.').unwrap();
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{k} = {}", self.values[s.key]);
        }
        out
    }

    /// SHA-256 of [`Self::identity_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.identity_text().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Key-by-key differences between two identity texts, as `key: a -> b`.
pub fn identity_diff(a: &str, b: &str) -> Vec<String> {
    let parse = |t: &str| -> BTreeMap<String, String> {
        let mut section = String::new();
        let mut m = BTreeMap::new();
        for line in t.lines() {
            let line = line.trim();
            if let Some(s) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = s.to_string();
            } else if let Some((k, v)) = line.split_once('=') {
                m.insert(format!("{section}.{}", k.trim()), v.trim().to_string());
            }
        }
        m
    };
    let (ma, mb) = (parse(a), parse(b));
    let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter_map(|k| {
            let (va, vb) = (ma.get(k), mb.get(k));
            (va != vb).then(|| {
                format!(
                    "{k}: {} -> {}",
                    va.map_or("<absent>", String::as_str),
                    vb.map_or("<absent>", String::as_str)
                )
            })
        })
        .collect()
}

/// A commented config file listing every key with its default.
pub fn documented_defaults() -> String {
    let mut out = String::new();
    let mut section = "";
    for s in SCHEMA {
        let (sec, k) = s.key.split_once('.').unwrap();
        if sec != section {
            if !section.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{sec}]");
            section = sec;
        }
        let _ = writeln!(out, "# {}", s.help);
        let _ = writeln!(out, "{k} = {}", s.default);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_round_trip() {
        let cfg = ExperimentConfig::default_config();
        assert_eq!(cfg.kind, TransformKind::Downsample);
        assert_eq!(cfg.stages, 2);
        let again = ExperimentConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        let doc = ExperimentConfig::parse_text(&documented_defaults()).unwrap();
        assert_eq!(doc, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse_text("[train]\nstepz = 3\n").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("train.stepz".into()));
        assert!(ExperimentConfig::parse_text("[bogus]\n").is_err());
        assert!(ExperimentConfig::default_config()
            .with_overrides(&["model.width=3"])
            .is_err());
    }

    #[test]
    fn bad_values_and_inconsistency() {
        assert!(matches!(
            ExperimentConfig::parse_text("[schedule]\nrescale = loud\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse_text("[transform]\nstages = 5\n"),
            Err(ConfigError::Inconsistent(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse_text("[transform]\ngamma = 1.0\n"),
            Err(ConfigError::Inconsistent(_))
        ));
    }

    #[test]
    fn hash_tracks_model_identity_only() {
        let a = ExperimentConfig::default_config();
        let b = a.set("sample.seed", "9").unwrap().set("train.steps", "7").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = a.set("train.lr", "2e-3").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
        let diff = identity_diff(&a.identity_text(), &c.identity_text());
        assert_eq!(diff, vec!["train.lr: 1e-3 -> 2e-3".to_string()]);
    }

    #[test]
    fn corpus_specs() {
        assert_eq!(
            parse_corpus("blobs,n=2048,size=32").unwrap(),
            CorpusSource::Blobs { n: 2048, size: 32 }
        );
        assert_eq!(
            parse_corpus("dir:/data/x").unwrap(),
            CorpusSource::Dir(PathBuf::from("/data/x"))
        );
        assert!(parse_corpus("blobs,m=3").is_err());
        assert!(parse_corpus("faces").is_err());
    }
}
