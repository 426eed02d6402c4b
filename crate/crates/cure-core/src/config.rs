//! Run configuration: flat key=value files, command-line overrides,
//! architecture presets, and the replayable run manifest.
//!
//! Precedence: command-line flag > `CURE_SEED` environment variable (seed
//! only) > config file > built-in default.

use crate::attack::Norm;
use crate::error::{CureError, Result};
use crate::loss::LossMode;
use crate::network::{ConvGeom, InitScheme, Layer, Network};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Training mode: one of the loss modes or fine-tuning from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    LInf,
    L2,
    Joint,
    Max,
    Random,
    Scratch,
    Finetune,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::LInf => "linf",
            TrainMode::L2 => "l2",
            TrainMode::Joint => "joint",
            TrainMode::Max => "max",
            TrainMode::Random => "random",
            TrainMode::Scratch => "scratch",
            TrainMode::Finetune => "finetune",
        }
    }

    /// The loss the certified epochs optimize; fine-tuning runs the scratch
    /// objective.
    pub fn loss_mode(self) -> LossMode {
        match self {
            TrainMode::LInf => LossMode::LInf,
            TrainMode::L2 => LossMode::L2,
            TrainMode::Joint => LossMode::Joint,
            TrainMode::Max => LossMode::Max,
            TrainMode::Random => LossMode::Random,
            TrainMode::Scratch | TrainMode::Finetune => LossMode::Scratch,
        }
    }
}

/// Shape of the epsilon ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealShape {
    Linear,
    /// Cubic ease-in ramp: slow start, full value at the window end.
    Smooth,
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DataSource {
    Synthetic {
        n: usize,
        test_n: usize,
        k: usize,
        shape: Vec<usize>,
    },
    Mnist {
        images: String,
        labels: String,
        test_images: String,
        test_labels: String,
    },
}

/// Every knob of a training or evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub eps_inf: f64,
    pub eps_2: f64,
    pub lambda_inf: f64,
    pub lambda_2: f64,
    pub alpha: f64,
    pub eta: f64,
    pub beta: f64,
    pub q_norm: Norm,
    pub epochs: usize,
    pub anneal_epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: (usize, usize),
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub l1_weight: f64,
    pub attack_steps: usize,
    pub attack_step_size: f64,
    pub gp_enabled: bool,
    pub seed: u64,
    pub finetune_source: Option<String>,
    pub finetune_fraction: f64,
    pub elide_last: bool,
    pub warmup_tightness: f64,
    pub warmup_relu: f64,
    pub anneal_shape: AnnealShape,
    pub truncated_search: bool,
    pub gamma_from_full_eps: bool,
    pub init_scheme: String,
    pub init_gain: f64,
    pub arch: String,
    pub train_subset: usize,
    pub eval_samples: usize,
    pub pgd_eval_steps: usize,
    pub pgd_eval_restarts: usize,
    pub checkpoint_every: usize,
    pub data: DataSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Scratch,
            eps_inf: 0.3,
            eps_2: 1.0,
            lambda_inf: 0.4,
            lambda_2: 1e-5,
            alpha: 0.5,
            eta: 2.0,
            beta: 0.8,
            q_norm: Norm::L2,
            epochs: 70,
            anneal_epochs: 20,
            lr: 1e-4,
            lr_decay_epochs: (50, 60),
            lr_decay_factor: 0.2,
            batch_size: 256,
            l1_weight: 1e-6,
            attack_steps: 8,
            attack_step_size: 0.25,
            gp_enabled: true,
            seed: 0,
            finetune_source: None,
            finetune_fraction: 0.2,
            elide_last: true,
            warmup_tightness: 0.5,
            warmup_relu: 0.5,
            anneal_shape: AnnealShape::Linear,
            truncated_search: false,
            gamma_from_full_eps: false,
            init_scheme: "shi".to_string(),
            init_gain: 1.0,
            arch: "cnn4".to_string(),
            train_subset: 0,
            eval_samples: 1000,
            pgd_eval_steps: 50,
            pgd_eval_restarts: 3,
            checkpoint_every: 0,
            data: DataSource::Synthetic {
                n: 2000,
                test_n: 500,
                k: 10,
                shape: vec![1, 8, 8],
            },
        }
    }
}

/// Key name, expected type, and default shown by error messages and docs.
const VALID_KEYS: &[(&str, &str)] = &[
    ("mode", "one of linf|l2|joint|max|random|scratch|finetune"),
    ("eps_inf", "float >= 0"),
    ("eps_2", "float >= 0"),
    ("lambda_inf", "float in [0,1]"),
    ("lambda_2", "float in [0,1]"),
    ("alpha", "float in [0,1]"),
    ("eta", "float >= 0"),
    ("beta", "float in [0,1]"),
    ("q_norm", "one of linf|l2"),
    ("epochs", "integer >= 1"),
    ("anneal_epochs", "integer"),
    ("lr", "float > 0"),
    ("lr_decay_epoch1", "integer"),
    ("lr_decay_epoch2", "integer"),
    ("lr_decay_factor", "float in (0,1]"),
    ("batch_size", "integer >= 1"),
    ("l1_weight", "float >= 0"),
    ("attack_steps", "integer"),
    ("attack_step_size", "float > 0"),
    ("gp_enabled", "bool"),
    ("seed", "integer"),
    ("finetune_source", "path"),
    ("finetune_fraction", "float in (0,1]"),
    ("elide_last", "bool"),
    ("warmup_tightness", "float >= 0"),
    ("warmup_relu", "float >= 0"),
    ("anneal_shape", "one of linear|smooth"),
    ("truncated_search", "bool"),
    ("gamma_from_full_eps", "bool"),
    ("init_scheme", "one of shi|kaiming"),
    ("init_gain", "float > 0"),
    ("arch", "cnn4[:C,FC] | cnn7[:C,FC] | mlp:h1,h2,..."),
    ("train_subset", "integer (0 = all)"),
    ("eval_samples", "integer"),
    ("pgd_eval_steps", "integer"),
    ("pgd_eval_restarts", "integer >= 1"),
    ("checkpoint_every", "integer (0 = final only)"),
    ("data", "one of synthetic|mnist"),
    ("synth_n", "integer"),
    ("synth_test_n", "integer"),
    ("synth_k", "integer"),
    ("synth_shape", "dims like 1x8x8"),
    ("mnist_images", "path"),
    ("mnist_labels", "path"),
    ("mnist_test_images", "path"),
    ("mnist_test_labels", "path"),
];

fn valid_key_listing() -> String {
    let mut s = String::new();
    for (k, t) in VALID_KEYS {
        let _ = writeln!(s, "  {k} ({t})");
    }
    s
}

/// Parse a flat `key=value` file: UTF-8, `#` starts a comment, blank lines
/// ignored. Later assignments win within one source.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CureError::Config(format!(
                "line {}: expected key=value, got '{raw}'",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct KvReader<'a> {
    map: &'a BTreeMap<String, String>,
}

impl<'a> KvReader<'a> {
    fn f64(&self, key: &str, dst: &mut f64) -> Result<()> {
        if let Some(v) = self.map.get(key) {
            *dst = v.parse::<f64>().map_err(|_| type_err(key, "float", v))?;
        }
        Ok(())
    }

    fn usize(&self, key: &str, dst: &mut usize) -> Result<()> {
        if let Some(v) = self.map.get(key) {
            *dst = v.parse::<usize>().map_err(|_| type_err(key, "integer", v))?;
        }
        Ok(())
    }

    fn u64(&self, key: &str, dst: &mut u64) -> Result<()> {
        if let Some(v) = self.map.get(key) {
            *dst = v.parse::<u64>().map_err(|_| type_err(key, "integer", v))?;
        }
        Ok(())
    }

    fn bool(&self, key: &str, dst: &mut bool) -> Result<()> {
        if let Some(v) = self.map.get(key) {
            *dst = match v.as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                _ => return Err(type_err(key, "bool", v)),
            };
        }
        Ok(())
    }

    fn string(&self, key: &str, dst: &mut String) -> Result<()> {
        if let Some(v) = self.map.get(key) {
            *dst = v.clone();
        }
        Ok(())
    }
}

fn type_err(key: &str, expected: &str, got: &str) -> CureError {
    CureError::Config(format!(
        "key '{key}' expects {expected}, got '{got}'"
    ))
}

fn range_err(key: &str, detail: &str) -> CureError {
    CureError::Config(format!("key '{key}' out of range: {detail}"))
}

/// Parse a shape like `1x28x28`.
pub fn parse_shape(text: &str) -> Result<Vec<usize>> {
    text.split('x')
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| type_err("synth_shape", "dims like 1x8x8", text))
        })
        .collect()
}

/// Merge defaults, a config map, and override maps (later wins), then
/// validate. The `CURE_SEED` environment variable slots between the file
/// and the explicit overrides.
pub fn resolve_config(
    file_map: &BTreeMap<String, String>,
    overrides: &BTreeMap<String, String>,
) -> Result<TrainConfig> {
    let mut merged = file_map.clone();
    if let Ok(env_seed) = std::env::var("CURE_SEED") {
        if !env_seed.is_empty() {
            merged.insert("seed".to_string(), env_seed);
        }
    }
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    // Reject unknown keys before reading anything.
    for key in merged.keys() {
        if !VALID_KEYS.iter().any(|(k, _)| k == key) {
            return Err(CureError::Config(format!(
                "unknown key '{key}'; valid keys:\n{}",
                valid_key_listing()
            )));
        }
    }

    let mut cfg = TrainConfig::default();
    let r = KvReader { map: &merged };

    if let Some(v) = merged.get("mode") {
        cfg.mode = match v.as_str() {
            "linf" => TrainMode::LInf,
            "l2" => TrainMode::L2,
            "joint" => TrainMode::Joint,
            "max" => TrainMode::Max,
            "random" => TrainMode::Random,
            "scratch" => TrainMode::Scratch,
            "finetune" => TrainMode::Finetune,
            _ => return Err(type_err("mode", "linf|l2|joint|max|random|scratch|finetune", v)),
        };
    }
    r.f64("eps_inf", &mut cfg.eps_inf)?;
    r.f64("eps_2", &mut cfg.eps_2)?;
    r.f64("lambda_inf", &mut cfg.lambda_inf)?;
    r.f64("lambda_2", &mut cfg.lambda_2)?;
    r.f64("alpha", &mut cfg.alpha)?;
    r.f64("eta", &mut cfg.eta)?;
    r.f64("beta", &mut cfg.beta)?;
    if let Some(v) = merged.get("q_norm") {
        cfg.q_norm = match v.as_str() {
            "linf" => Norm::LInf,
            "l2" => Norm::L2,
            _ => return Err(type_err("q_norm", "linf|l2", v)),
        };
    }
    r.usize("epochs", &mut cfg.epochs)?;
    r.usize("anneal_epochs", &mut cfg.anneal_epochs)?;
    r.f64("lr", &mut cfg.lr)?;
    r.usize("lr_decay_epoch1", &mut cfg.lr_decay_epochs.0)?;
    r.usize("lr_decay_epoch2", &mut cfg.lr_decay_epochs.1)?;
    r.f64("lr_decay_factor", &mut cfg.lr_decay_factor)?;
    r.usize("batch_size", &mut cfg.batch_size)?;
    r.f64("l1_weight", &mut cfg.l1_weight)?;
    r.usize("attack_steps", &mut cfg.attack_steps)?;
    r.f64("attack_step_size", &mut cfg.attack_step_size)?;
    r.bool("gp_enabled", &mut cfg.gp_enabled)?;
    r.u64("seed", &mut cfg.seed)?;
    if let Some(v) = merged.get("finetune_source") {
        cfg.finetune_source = if v.is_empty() { None } else { Some(v.clone()) };
    }
    r.f64("finetune_fraction", &mut cfg.finetune_fraction)?;
    r.bool("elide_last", &mut cfg.elide_last)?;
    r.f64("warmup_tightness", &mut cfg.warmup_tightness)?;
    r.f64("warmup_relu", &mut cfg.warmup_relu)?;
    if let Some(v) = merged.get("anneal_shape") {
        cfg.anneal_shape = match v.as_str() {
            "linear" => AnnealShape::Linear,
            "smooth" => AnnealShape::Smooth,
            _ => return Err(type_err("anneal_shape", "linear|smooth", v)),
        };
    }
    r.bool("truncated_search", &mut cfg.truncated_search)?;
    r.bool("gamma_from_full_eps", &mut cfg.gamma_from_full_eps)?;
    r.string("init_scheme", &mut cfg.init_scheme)?;
    r.f64("init_gain", &mut cfg.init_gain)?;
    r.string("arch", &mut cfg.arch)?;
    r.usize("train_subset", &mut cfg.train_subset)?;
    r.usize("eval_samples", &mut cfg.eval_samples)?;
    r.usize("pgd_eval_steps", &mut cfg.pgd_eval_steps)?;
    r.usize("pgd_eval_restarts", &mut cfg.pgd_eval_restarts)?;
    r.usize("checkpoint_every", &mut cfg.checkpoint_every)?;

    if let Some(v) = merged.get("data") {
        match v.as_str() {
            "synthetic" => {
                if !matches!(cfg.data, DataSource::Synthetic { .. }) {
                    cfg.data = TrainConfig::default().data;
                }
            }
            "mnist" => {
                cfg.data = DataSource::Mnist {
                    images: String::new(),
                    labels: String::new(),
                    test_images: String::new(),
                    test_labels: String::new(),
                };
            }
            _ => return Err(type_err("data", "synthetic|mnist", v)),
        }
    }
    match &mut cfg.data {
        DataSource::Synthetic { n, test_n, k, shape } => {
            r.usize("synth_n", n)?;
            r.usize("synth_test_n", test_n)?;
            r.usize("synth_k", k)?;
            if let Some(v) = merged.get("synth_shape") {
                *shape = parse_shape(v)?;
            }
        }
        DataSource::Mnist {
            images,
            labels,
            test_images,
            test_labels,
        } => {
            r.string("mnist_images", images)?;
            r.string("mnist_labels", labels)?;
            r.string("mnist_test_images", test_images)?;
            r.string("mnist_test_labels", test_labels)?;
            for (key, val) in [
                ("mnist_images", &images),
                ("mnist_labels", &labels),
                ("mnist_test_images", &test_images),
                ("mnist_test_labels", &test_labels),
            ] {
                if val.is_empty() {
                    return Err(CureError::Config(format!(
                        "data=mnist requires key '{key}'"
                    )));
                }
            }
        }
    }

    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &TrainConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(range_err("alpha", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&cfg.beta) {
        return Err(range_err("beta", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&cfg.lambda_inf) {
        return Err(range_err("lambda_inf", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&cfg.lambda_2) {
        return Err(range_err("lambda_2", "must lie in [0, 1]"));
    }
    if cfg.eta < 0.0 {
        return Err(range_err("eta", "must be >= 0"));
    }
    if cfg.eps_inf < 0.0 || cfg.eps_2 < 0.0 {
        return Err(range_err("eps_inf/eps_2", "must be >= 0"));
    }
    if cfg.epochs == 0 {
        return Err(range_err("epochs", "must be >= 1"));
    }
    if cfg.anneal_epochs >= cfg.epochs && cfg.epochs > 1 {
        return Err(range_err(
            "anneal_epochs",
            "must be smaller than epochs",
        ));
    }
    let (d1, d2) = cfg.lr_decay_epochs;
    if d1 >= d2 || d2 >= cfg.epochs {
        if cfg.epochs > 1 {
            return Err(range_err(
                "lr_decay_epoch1/2",
                "milestones must be strictly increasing and below epochs",
            ));
        }
    }
    if cfg.batch_size == 0 {
        return Err(range_err("batch_size", "must be >= 1"));
    }
    if !(cfg.lr > 0.0) {
        return Err(range_err("lr", "must be > 0"));
    }
    if !(0.0 < cfg.lr_decay_factor && cfg.lr_decay_factor <= 1.0) {
        return Err(range_err("lr_decay_factor", "must lie in (0, 1]"));
    }
    if cfg.mode == TrainMode::Finetune && cfg.finetune_source.is_none() {
        return Err(CureError::Config(
            "finetune mode requires finetune_source".to_string(),
        ));
    }
    if !(0.0 < cfg.finetune_fraction && cfg.finetune_fraction <= 1.0) {
        return Err(range_err("finetune_fraction", "must lie in (0, 1]"));
    }
    if !matches!(cfg.init_scheme.as_str(), "shi" | "kaiming") {
        return Err(type_err("init_scheme", "shi|kaiming", &cfg.init_scheme));
    }
    if cfg.pgd_eval_restarts == 0 {
        return Err(range_err("pgd_eval_restarts", "must be >= 1"));
    }
    Ok(())
}

/// Read and resolve a config file plus overrides.
pub fn parse_config(path: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<TrainConfig> {
    let file_map = match path {
        Some(p) => parse_kv_text(&std::fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    resolve_config(&file_map, overrides)
}

impl TrainConfig {
    pub fn init_scheme(&self) -> InitScheme {
        match self.init_scheme.as_str() {
            "kaiming" => InitScheme::Kaiming,
            _ => InitScheme::Shi {
                gain: self.init_gain,
            },
        }
    }

    /// Loss settings at given (scheduled) epsilon and lambda values.
    pub fn loss_config(
        &self,
        eps_inf: f64,
        eps_2: f64,
        lambda_inf: f64,
        lambda_2: f64,
        seed: u64,
    ) -> crate::loss::LossConfig {
        crate::loss::LossConfig {
            alpha: self.alpha,
            eta: self.eta,
            q_norm: self.q_norm,
            l1_weight: self.l1_weight,
            eps_inf,
            eps_2,
            lambda_inf,
            lambda_2,
            elide_last: self.elide_last,
            attack_steps: self.attack_steps,
            attack_step_size: self.attack_step_size,
            truncated_search: self.truncated_search,
            gamma_from_full_eps: self.gamma_from_full_eps,
            seed,
        }
    }
}

/// Build a network from an architecture string.
///
/// - `cnn4[:C,FC]`: conv C, conv 2C (both 4x4 stride 2 pad 1), then a
///   hidden affine of FC units and the classification head.
/// - `cnn7[:C,FC]`: five 3x3 convolutions (C, C, 2C, 2C, 2C; the third has
///   stride 2), a hidden affine of FC units, and the head.
/// - `mlp:h1,h2,...`: flatten plus an affine/ReLU chain.
pub fn build_network(arch: &str, input_shape: &[usize], k: usize) -> Result<Network> {
    let (kind, args) = match arch.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (arch, None),
    };
    let parse_list = |a: &str| -> Result<Vec<usize>> {
        a.split(',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| type_err("arch", "integer list", a))
            })
            .collect()
    };
    match kind {
        "mlp" => {
            let hidden = match args {
                Some(a) => parse_list(a)?,
                None => vec![],
            };
            let mut layers = vec![Layer::Flatten];
            let mut cur: usize = input_shape.iter().product();
            for h in hidden {
                layers.push(Layer::affine(cur, h));
                layers.push(Layer::ReLU);
                cur = h;
            }
            layers.push(Layer::affine(cur, k));
            Network::new(input_shape.to_vec(), layers, k)
        }
        "cnn4" | "cnn7" => {
            if input_shape.len() != 3 {
                return Err(CureError::Config(format!(
                    "{kind} needs a (channels, height, width) input, got {input_shape:?}"
                )));
            }
            let (c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
            let defaults = if kind == "cnn4" { (16, 128) } else { (64, 512) };
            // cnn4 takes an optional third value: the first-layer kernel
            // size (even, >= 4). Wider stems spread the receptive field,
            // which lowers the per-unit l2/l1 weight-norm ratio the l2
            // certificate depends on.
            let (base, fc, stem_k) = match args {
                Some(a) => {
                    let v = parse_list(a)?;
                    match (kind, v.as_slice()) {
                        (_, [c, f]) => (*c, *f, 4),
                        ("cnn4", [c, f, k1]) if k1 % 2 == 0 && *k1 >= 4 => (*c, *f, *k1),
                        _ => return Err(type_err("arch", "C,FC[,K1 even >= 4]", a)),
                    }
                }
                None => (defaults.0, defaults.1, 4),
            };
            let conv = |ci, h, w, co, kern, stride, pad| {
                Layer::conv2d(ConvGeom {
                    in_channels: ci,
                    in_h: h,
                    in_w: w,
                    out_channels: co,
                    kernel: kern,
                    stride,
                    padding: pad,
                })
            };
            let mut layers = Vec::new();
            let (mut ch, mut hh, mut ww) = (c_in, h, w);
            if kind == "cnn4" {
                // Stem keeps the same 2x downsampling for any kernel size:
                // padding (k - 2) / 2.
                for (co, kern) in [(base, stem_k), (base * 2, 4)] {
                    let pad = (kern - 2) / 2;
                    layers.push(conv(ch, hh, ww, co, kern, 2, pad));
                    layers.push(Layer::ReLU);
                    ch = co;
                    hh = (hh + 2 * pad - kern) / 2 + 1;
                    ww = (ww + 2 * pad - kern) / 2 + 1;
                }
            } else {
                for (co, stride) in [(base, 1), (base, 1), (base * 2, 2), (base * 2, 1), (base * 2, 1)] {
                    layers.push(conv(ch, hh, ww, co, 3, stride, 1));
                    layers.push(Layer::ReLU);
                    ch = co;
                    hh = (hh + 2 - 3) / stride + 1;
                    ww = (ww + 2 - 3) / stride + 1;
                }
            }
            layers.push(Layer::Flatten);
            layers.push(Layer::affine(ch * hh * ww, fc));
            layers.push(Layer::ReLU);
            layers.push(Layer::affine(fc, k));
            Network::new(input_shape.to_vec(), layers, k)
        }
        _ => Err(CureError::Config(format!(
            "unknown arch '{arch}' (cnn4[:C,FC], cnn7[:C,FC], mlp:h1,h2,...)"
        ))),
    }
}

/// Everything needed to replay a run byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub out_dir: String,
    pub checkpoint: String,
    pub train_log: String,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sources_give_defaults() {
        let cfg = resolve_config(&BTreeMap::new(), &BTreeMap::new()).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.eta, 2.0);
        assert_eq!(cfg.beta, 0.8);
        assert_eq!(cfg.lambda_2, 1e-5);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.lr_decay_factor, 0.2);
    }

    #[test]
    fn file_roundtrip_and_comments() {
        let text = "# a comment\nalpha = 0.5\nepochs=10  # trailing\n\nlr_decay_epoch1=6\nlr_decay_epoch2=8\nanneal_epochs=3\n";
        let map = parse_kv_text(text).unwrap();
        let cfg = resolve_config(&map, &BTreeMap::new()).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.epochs, 10);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let mut map = BTreeMap::new();
        map.insert("alhpa".to_string(), "0.5".to_string());
        let err = resolve_config(&map, &BTreeMap::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown key 'alhpa'"));
        assert!(msg.contains("alpha"));
        assert!(msg.contains("lambda_2"));
    }

    #[test]
    fn type_and_range_errors_name_the_key() {
        let mut map = BTreeMap::new();
        map.insert("alpha".to_string(), "abc".to_string());
        let err = resolve_config(&map, &BTreeMap::new()).unwrap_err().to_string();
        assert!(err.contains("'alpha'") && err.contains("float"), "{err}");

        let mut map = BTreeMap::new();
        map.insert("alpha".to_string(), "1.5".to_string());
        let err = resolve_config(&map, &BTreeMap::new()).unwrap_err().to_string();
        assert!(err.contains("'alpha'") && err.contains("range"), "{err}");
    }

    #[test]
    fn flag_beats_file() {
        let mut file = BTreeMap::new();
        file.insert("alpha".to_string(), "0.25".to_string());
        let mut flags = BTreeMap::new();
        flags.insert("alpha".to_string(), "0.75".to_string());
        let cfg = resolve_config(&file, &flags).unwrap();
        assert_eq!(cfg.alpha, 0.75);
    }

    #[test]
    fn finetune_requires_source() {
        let mut map = BTreeMap::new();
        map.insert("mode".to_string(), "finetune".to_string());
        assert!(resolve_config(&map, &BTreeMap::new()).is_err());
        map.insert(
            "finetune_source".to_string(),
            "runs/linf/checkpoint.ckpt".to_string(),
        );
        let cfg = resolve_config(&map, &BTreeMap::new()).unwrap();
        assert_eq!(cfg.mode, TrainMode::Finetune);
    }

    #[test]
    fn mnist_source_requires_paths() {
        let mut map = BTreeMap::new();
        map.insert("data".to_string(), "mnist".to_string());
        let err = resolve_config(&map, &BTreeMap::new()).unwrap_err().to_string();
        assert!(err.contains("mnist_images"));
    }

    #[test]
    fn arch_presets_build() {
        let mlp = build_network("mlp:16,8", &[1, 4, 4], 3).unwrap();
        assert_eq!(mlp.num_classes(), 3);
        let cnn = build_network("cnn4:4,16", &[1, 8, 8], 5).unwrap();
        assert_eq!(cnn.num_classes(), 5);
        let deep = build_network("cnn7:4,16", &[1, 16, 16], 10).unwrap();
        assert_eq!(deep.param_layer_indices().len(), 7);
        assert!(build_network("resnet", &[1, 8, 8], 5).is_err());
    }

    #[test]
    fn cnn4_has_four_parameterized_layers() {
        let net = build_network("cnn4", &[1, 28, 28], 10).unwrap();
        assert_eq!(net.param_layer_indices().len(), 4);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = RunManifest {
            tool_version: "0.1.0".to_string(),
            config: TrainConfig::default(),
            dataset_fingerprint: "abc".to_string(),
            seed: 7,
            out_dir: "runs/x".to_string(),
            checkpoint: "runs/x/checkpoints/final.ckpt".to_string(),
            train_log: "runs/x/train_log.csv".to_string(),
        };
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.seed, 7);
    }
}
