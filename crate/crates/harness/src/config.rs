//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! data.generator = blobs
//! data.classes = 4
//! train.method = ours
//! train.noise = gaussian:0.5
//! loss.delta_d = 5.0
//! perturb.0 = gaussian:0.5
//! perturb.1.variant = occlusion
//! perturb.1.n_patches = 4
//! ```
//!
//! Every key must be known; a typo is an error rather than a silent default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use noisecurve_core::centroids::CentroidMode;
use noisecurve_core::data::{gen_blobs, gen_rings, gen_textures, Dataset};
use noisecurve_core::losses::LossConfig;
use noisecurve_core::model::Activation;
use noisecurve_core::perturb::{Orientation, PerturbationSpec};

use crate::error::{HarnessError, Result};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "NOISECURVE_SEED";

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Blobs { classes: usize, per_class: usize, dim: usize, spread: f64 },
    Rings { classes: usize, per_class: usize },
    Textures { classes: usize, per_class: usize, height: usize, width: usize },
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Normal,
    NoisyOnly,
    CleanPlusNoisy,
    Stability,
    Ours,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Normal,
        Method::NoisyOnly,
        Method::CleanPlusNoisy,
        Method::Stability,
        Method::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Normal => "normal",
            Method::NoisyOnly => "noisy_only",
            Method::CleanPlusNoisy => "clean_plus_noisy",
            Method::Stability => "stability",
            Method::Ours => "ours",
        }
    }

    pub fn needs_noise(self) -> bool {
        self != Method::Normal
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs at which the learning rate is multiplied by `lr_decay`;
    /// `None` places them at 30%, 60% and 80% of training.
    pub milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 64,
            milestones: None,
            lr_decay: 0.2,
        }
    }
}

impl OptimConfig {
    pub fn milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(m) => m.clone(),
            None => [0.3, 0.6, 0.8]
                .iter()
                .map(|f| (f * self.epochs as f64).round() as usize)
                .collect(),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureConfig {
    pub sigma: f64,
    pub delta: f64,
    pub draws: usize,
    pub t: f64,
    pub k: usize,
    /// Noise injections per test sample for the correct-count groups.
    pub noise_repeats: usize,
    /// Optional noise used for the robustness side; defaults to Gaussian `sigma`.
    pub noise: Option<PerturbationSpec>,
    pub max_samples: Option<usize>,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        Self {
            sigma: 0.06,
            delta: 0.1,
            draws: 500,
            t: 1e-2,
            k: 20,
            noise_repeats: 10,
            noise: None,
            max_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub split: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub feature_activation: Activation,
    pub method: Method,
    pub loss: LossConfig,
    pub centroid_mode: CentroidMode,
    pub centroid_gamma: f64,
    pub train_noise: Option<PerturbationSpec>,
    pub stability_weight: f64,
    pub optim: OptimConfig,
    pub perturbations: Vec<PerturbationSpec>,
    pub repeats: usize,
    pub curvature: CurvatureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::Blobs {
                classes: 4,
                per_class: 200,
                dim: 8,
                spread: 1.0,
            },
            split: 0.8,
            hidden: vec![32],
            feature_dim: 8,
            feature_activation: Activation::None,
            method: Method::Ours,
            loss: LossConfig::default(),
            centroid_mode: CentroidMode::Partial,
            centroid_gamma: 0.9,
            train_noise: None,
            stability_weight: 1.0,
            optim: OptimConfig::default(),
            perturbations: Vec::new(),
            repeats: 10,
            curvature: CurvatureConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a number, got `{value}`"))
}

fn list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn boolean(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

fn activation(key: &str, value: &str) -> std::result::Result<Activation, String> {
    match value {
        "relu" => Ok(Activation::Relu),
        "none" => Ok(Activation::None),
        _ => Err(format!("`{key}` expects relu or none, got `{value}`")),
    }
}

/// Per-field perturbation description collected from `perturb.N.*` keys.
#[derive(Default)]
struct PerturbFields {
    line: usize,
    text: Option<String>,
    fields: BTreeMap<String, String>,
}

impl PerturbFields {
    fn build(self) -> std::result::Result<PerturbationSpec, String> {
        if let Some(text) = self.text {
            if !self.fields.is_empty() {
                return Err("perturbation given both as a string and as fields".into());
            }
            return PerturbationSpec::parse(&text).map_err(|e| e.to_string());
        }
        let f = &self.fields;
        let get = |k: &str| f.get(k).map(String::as_str);
        let need = |k: &str| get(k).ok_or_else(|| format!("perturbation is missing `{k}`"));
        let allowed: &[&str] = match need("variant")? {
            "gaussian" => &["variant", "sigma"],
            "uniform" => &["variant", "amplitude"],
            "occlusion" => &["variant", "n_patches", "patch_h", "patch_w", "fill"],
            "stripes" => &["variant", "n_stripes", "thickness", "orientation"],
            "du_sample" | "du" => &["variant", "factor"],
            "clamp" => &["variant", "lo", "hi"],
            other => return Err(format!("unknown perturbation variant `{other}`")),
        };
        if let Some(k) = f.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(format!("unknown perturbation field `{k}`"));
        }
        Ok(match need("variant")? {
            "gaussian" => PerturbationSpec::Gaussian {
                sigma: num("sigma", need("sigma")?)?,
            },
            "uniform" => PerturbationSpec::Uniform {
                amplitude: num("amplitude", need("amplitude")?)?,
            },
            "occlusion" => PerturbationSpec::Occlusion {
                n_patches: num("n_patches", need("n_patches")?)?,
                patch_h: num("patch_h", need("patch_h")?)?,
                patch_w: num("patch_w", need("patch_w")?)?,
                fill: get("fill").map_or(Ok(0.0), |v| num("fill", v))?,
            },
            "stripes" => PerturbationSpec::Stripes {
                n_stripes: num("n_stripes", need("n_stripes")?)?,
                thickness: num("thickness", need("thickness")?)?,
                orientation: match get("orientation").unwrap_or("vertical") {
                    "vertical" => Orientation::Vertical,
                    "horizontal" => Orientation::Horizontal,
                    o => return Err(format!("unknown stripe orientation `{o}`")),
                },
            },
            "clamp" => PerturbationSpec::Clamp {
                lo: num("lo", need("lo")?)?,
                hi: num("hi", need("hi")?)?,
            },
            _ => PerturbationSpec::DuSample {
                factor: num("factor", need("factor")?)?,
            },
        })
    }
}

#[derive(Default)]
struct DataFields {
    generator: Option<String>,
    classes: Option<usize>,
    per_class: Option<usize>,
    dim: Option<usize>,
    spread: Option<f64>,
    height: Option<usize>,
    width: Option<usize>,
    path: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses config text; `NOISECURVE_SEED` is not consulted here.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut data = DataFields::default();
        let mut perturbs: BTreeMap<usize, PerturbFields> = BTreeMap::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| HarnessError::Config { line, message };
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(err(format!("`{key}` already set on line {prev}")));
            }
            let applied: std::result::Result<(), String> = (|| {
                match key {
                    "seed" => cfg.seed = num(key, value)?,
                    "data.generator" => data.generator = Some(value.to_string()),
                    "data.classes" => data.classes = Some(num(key, value)?),
                    "data.per_class" => data.per_class = Some(num(key, value)?),
                    "data.dim" => data.dim = Some(num(key, value)?),
                    "data.spread" => data.spread = Some(num(key, value)?),
                    "data.height" => data.height = Some(num(key, value)?),
                    "data.width" => data.width = Some(num(key, value)?),
                    "data.path" => data.path = Some(PathBuf::from(value)),
                    "data.split" => cfg.split = num(key, value)?,
                    "model.hidden" => cfg.hidden = list(key, value)?,
                    "model.feature_dim" => cfg.feature_dim = num(key, value)?,
                    "model.feature_activation" => cfg.feature_activation = activation(key, value)?,
                    "train.method" => cfg.method = value.parse().map_err(|e: HarnessError| e.to_string())?,
                    "train.noise" => {
                        cfg.train_noise = if value == "none" {
                            None
                        } else {
                            Some(PerturbationSpec::parse(value).map_err(|e| e.to_string())?)
                        }
                    }
                    "train.stability_weight" => cfg.stability_weight = num(key, value)?,
                    "train.epochs" => cfg.optim.epochs = num(key, value)?,
                    "train.batch_size" => cfg.optim.batch_size = num(key, value)?,
                    "train.lr" => cfg.optim.lr = num(key, value)?,
                    "train.momentum" => cfg.optim.momentum = num(key, value)?,
                    "train.nesterov" => cfg.optim.nesterov = boolean(key, value)?,
                    "train.weight_decay" => cfg.optim.weight_decay = num(key, value)?,
                    "train.lr_milestones" => cfg.optim.milestones = Some(list(key, value)?),
                    "train.lr_decay" => cfg.optim.lr_decay = num(key, value)?,
                    "loss.alpha" => cfg.loss.alpha = num(key, value)?,
                    "loss.beta" => cfg.loss.beta = num(key, value)?,
                    "loss.gamma_reg" => cfg.loss.gamma_reg = num(key, value)?,
                    "loss.lambda" => cfg.loss.lambda = num(key, value)?,
                    "loss.delta_v" => cfg.loss.delta_v = num(key, value)?,
                    "loss.delta_d" => cfg.loss.delta_d = num(key, value)?,
                    "centroids.mode" => cfg.centroid_mode = value.parse().map_err(|e: noisecurve_core::Error| e.to_string())?,
                    "centroids.gamma" => cfg.centroid_gamma = num(key, value)?,
                    "eval.repeats" => cfg.repeats = num(key, value)?,
                    "curvature.sigma" => cfg.curvature.sigma = num(key, value)?,
                    "curvature.delta" => cfg.curvature.delta = num(key, value)?,
                    "curvature.draws" => cfg.curvature.draws = num(key, value)?,
                    "curvature.t" => cfg.curvature.t = num(key, value)?,
                    "curvature.k" => cfg.curvature.k = num(key, value)?,
                    "curvature.noise_repeats" => cfg.curvature.noise_repeats = num(key, value)?,
                    "curvature.noise" => {
                        cfg.curvature.noise = Some(PerturbationSpec::parse(value).map_err(|e| e.to_string())?)
                    }
                    "curvature.max_samples" => cfg.curvature.max_samples = Some(num(key, value)?),
                    _ => {
                        let Some(rest) = key.strip_prefix("perturb.") else {
                            return Err(format!("unknown key `{key}`"));
                        };
                        let (index, field) = match rest.split_once('.') {
                            Some((i, f)) => (i, Some(f)),
                            None => (rest, None),
                        };
                        let index: usize = index.parse().map_err(|_| format!("unknown key `{key}`"))?;
                        let entry = perturbs.entry(index).or_default();
                        entry.line = line;
                        match field {
                            None => entry.text = Some(value.to_string()),
                            Some(f) => {
                                entry.fields.insert(f.to_string(), value.to_string());
                            }
                        }
                    }
                }
                Ok(())
            })();
            applied.map_err(err)?;
        }
        cfg.data = build_data(data).map_err(|message| HarnessError::Config { line: 0, message })?;
        for (_, p) in perturbs {
            let line = p.line;
            cfg.perturbations
                .push(p.build().map_err(|message| HarnessError::Config { line, message })?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `NOISECURVE_SEED` when it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Invalid(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        self.loss.validate()?;
        if self.method.needs_noise() && self.train_noise.is_none() {
            return bad(format!("method `{}` needs `train.noise`", self.method.name()));
        }
        if !(0.0 < self.split && self.split < 1.0) {
            return bad(format!("data.split must lie in (0, 1), got {}", self.split));
        }
        if self.optim.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.momentum) || !(self.optim.weight_decay >= 0.0) {
            return bad("learning rate must be > 0, momentum in [0, 1), weight decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.centroid_gamma) {
            return bad(format!("centroids.gamma must lie in [0, 1), got {}", self.centroid_gamma));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.stability_weight >= 0.0) {
            return bad("train.stability_weight must be >= 0".into());
        }
        Ok(())
    }

    /// Loss settings with the method's terms switched off where they do not apply.
    pub fn warnings(&self) -> Vec<String> {
        self.loss.validate().unwrap_or_default()
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        Ok(match &self.data {
            DataSource::Blobs {
                classes,
                per_class,
                dim,
                spread,
            } => gen_blobs(*classes, *per_class, *dim, *spread, self.seed)?,
            DataSource::Rings { classes, per_class } => gen_rings(*classes, *per_class, self.seed)?,
            DataSource::Textures {
                classes,
                per_class,
                height,
                width,
            } => gen_textures(*classes, *per_class, *height, *width, self.seed)?,
            DataSource::File { path } => Dataset::load(path)?,
        })
    }

    /// Renders the config back to its text form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        match &self.data {
            DataSource::Blobs {
                classes,
                per_class,
                dim,
                spread,
            } => {
                kv("data.generator", "blobs".into());
                kv("data.classes", classes.to_string());
                kv("data.per_class", per_class.to_string());
                kv("data.dim", dim.to_string());
                kv("data.spread", spread.to_string());
            }
            DataSource::Rings { classes, per_class } => {
                kv("data.generator", "rings".into());
                kv("data.classes", classes.to_string());
                kv("data.per_class", per_class.to_string());
            }
            DataSource::Textures {
                classes,
                per_class,
                height,
                width,
            } => {
                kv("data.generator", "textures".into());
                kv("data.classes", classes.to_string());
                kv("data.per_class", per_class.to_string());
                kv("data.height", height.to_string());
                kv("data.width", width.to_string());
            }
            DataSource::File { path } => {
                kv("data.generator", "file".into());
                kv("data.path", path.display().to_string());
            }
        }
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        kv("data.split", self.split.to_string());
        kv("model.hidden", join(&self.hidden));
        kv("model.feature_dim", self.feature_dim.to_string());
        kv(
            "model.feature_activation",
            match self.feature_activation {
                Activation::Relu => "relu".into(),
                Activation::None => "none".into(),
            },
        );
        kv("train.method", self.method.name().into());
        kv(
            "train.noise",
            self.train_noise.as_ref().map_or("none".into(), |n| n.to_string()),
        );
        kv("train.stability_weight", self.stability_weight.to_string());
        kv("train.epochs", self.optim.epochs.to_string());
        kv("train.batch_size", self.optim.batch_size.to_string());
        kv("train.lr", self.optim.lr.to_string());
        kv("train.momentum", self.optim.momentum.to_string());
        kv("train.nesterov", self.optim.nesterov.to_string());
        kv("train.weight_decay", self.optim.weight_decay.to_string());
        if let Some(m) = &self.optim.milestones {
            kv("train.lr_milestones", join(m));
        }
        kv("train.lr_decay", self.optim.lr_decay.to_string());
        kv("loss.alpha", self.loss.alpha.to_string());
        kv("loss.beta", self.loss.beta.to_string());
        kv("loss.gamma_reg", self.loss.gamma_reg.to_string());
        kv("loss.lambda", self.loss.lambda.to_string());
        kv("loss.delta_v", self.loss.delta_v.to_string());
        kv("loss.delta_d", self.loss.delta_d.to_string());
        kv(
            "centroids.mode",
            match self.centroid_mode {
                CentroidMode::Naive => "naive".into(),
                CentroidMode::Momentum => "momentum".into(),
                CentroidMode::Partial => "partial".into(),
            },
        );
        kv("centroids.gamma", self.centroid_gamma.to_string());
        kv("eval.repeats", self.repeats.to_string());
        for (i, p) in self.perturbations.iter().enumerate() {
            kv(&format!("perturb.{i}"), p.to_string());
        }
        let c = &self.curvature;
        kv("curvature.sigma", c.sigma.to_string());
        kv("curvature.delta", c.delta.to_string());
        kv("curvature.draws", c.draws.to_string());
        kv("curvature.t", c.t.to_string());
        kv("curvature.k", c.k.to_string());
        kv("curvature.noise_repeats", c.noise_repeats.to_string());
        if let Some(n) = &c.noise {
            kv("curvature.noise", n.to_string());
        }
        if let Some(m) = c.max_samples {
            kv("curvature.max_samples", m.to_string());
        }
        s
    }
}

fn build_data(f: DataFields) -> std::result::Result<DataSource, String> {
    let generator = f.generator.as_deref().unwrap_or("blobs");
    let classes = f.classes.unwrap_or(4);
    let per_class = f.per_class.unwrap_or(200);
    let stray = |allowed: &[&str]| -> std::result::Result<(), String> {
        let given = [
            ("data.dim", f.dim.is_some()),
            ("data.spread", f.spread.is_some()),
            ("data.height", f.height.is_some()),
            ("data.width", f.width.is_some()),
            ("data.path", f.path.is_some()),
        ];
        match given.iter().find(|(k, set)| *set && !allowed.contains(k)) {
            Some((k, _)) => Err(format!("`{k}` does not apply to generator `{generator}`")),
            None => Ok(()),
        }
    };
    Ok(match generator {
        "blobs" => {
            stray(&["data.dim", "data.spread"])?;
            DataSource::Blobs {
                classes,
                per_class,
                dim: f.dim.unwrap_or(8),
                spread: f.spread.unwrap_or(1.0),
            }
        }
        "rings" => {
            stray(&[])?;
            DataSource::Rings { classes, per_class }
        }
        "textures" => {
            stray(&["data.height", "data.width"])?;
            DataSource::Textures {
                classes,
                per_class,
                height: f.height.unwrap_or(12),
                width: f.width.unwrap_or(12),
            }
        }
        "file" => {
            stray(&["data.path"])?;
            DataSource::File {
                path: f.path.ok_or("generator `file` needs `data.path`")?,
            }
        }
        other => return Err(format!("unknown generator `{other}`")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys_and_perturbations() {
        let cfg = ExperimentConfig::parse(
            "seed = 3\ntrain.method = stability  # comment\ntrain.noise = gaussian:0.2\n\
             perturb.0 = gaussian:0.5\nperturb.1.variant = du\nperturb.1.factor = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.method, Method::Stability);
        assert_eq!(cfg.perturbations.len(), 2);
        assert_eq!(cfg.perturbations[1], PerturbationSpec::DuSample { factor: 2 });
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        assert!(matches!(
            ExperimentConfig::parse("train.methd = ours\n"),
            Err(HarnessError::Config { line: 1, .. })
        ));
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(ExperimentConfig::parse("train.method = ours\n").is_err());
        assert!(ExperimentConfig::parse("data.generator = rings\ndata.dim = 3\ntrain.method = normal\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = ExperimentConfig::parse(
            "train.noise = gaussian:0.3\ndata.generator = textures\nperturb.0 = du:2+stripes:2:1:vertical\n",
        )
        .unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
