//! TOML run configuration for training, evaluation and temperature search.
//!
//! ```toml
//! [model]
//! hidden = [64, 64]
//!
//! [data]
//! kind = "blobs"        # blobs | moons
//! n = 2000
//! classes = 4
//! noise = 0.5
//!
//! [train]
//! mode = "dkm"          # dkm | hard | gumbel | none
//! batch_size = 32
//! epochs = 30
//! learning_rate = 0.008 # optional
//! momentum = 0.9        # optional
//! gumbel_draws = 4      # optional, gumbel only
//!
//! [compression]         # required unless mode = "none"
//! bits = 2
//! dim = 1
//! temperature = 0.003
//! epsilon = 1e-4        # optional
//! max_iterations = 5    # optional
//! metric = "squared_euclidean"  # optional: squared_euclidean | euclidean
//! init = "kmeans_pp"            # optional: kmeans_pp | random_sample
//! small_layer_threshold = 10000 # optional
//! small_layer_bits = 8          # optional
//! skip_first_last = false       # optional
//!
//! [compression.layers.fc2]      # optional per-layer overrides
//! bits = 4
//!
//! [tau_search]          # optional
//! low = 1e-4
//! high = 1e-1
//! budget = 5
//! ```
//!
//! Validation collects every problem before failing.

use std::collections::BTreeMap;

use toml::{Table, Value};

use super::dataset::{DatasetKind, DatasetSpec};
use super::model::{LayerScheme, ModelSpec, SchemeOverride};
use super::{TrainConfig, TrainMode};
use crate::compression::LayerPolicy;
use crate::dkm::{DkmConfig, Init, Metric};
use crate::error::{DkmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TauSearchConfig {
    pub low: f64,
    pub high: f64,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub mode: TrainMode,
    pub tau_search: Option<TauSearchConfig>,
}

struct Checker {
    problems: Vec<String>,
}

impl Checker {
    fn section<'a>(&mut self, root: &'a Table, name: &str, required: bool) -> Option<&'a Table> {
        match root.get(name) {
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.problems.push(format!("`{name}` must be a table"));
                None
            }
            None => {
                if required {
                    self.problems.push(format!("missing key `{name}`"));
                }
                None
            }
        }
    }

    fn unknown(&mut self, t: &Table, path: &str, allowed: &[&str]) {
        for key in t.keys() {
            if !allowed.contains(&key.as_str()) {
                self.problems.push(format!("unknown key `{path}.{key}`"));
            }
        }
    }

    fn raw<'a>(&mut self, t: &'a Table, path: &str, key: &str, required: bool) -> Option<&'a Value> {
        let v = t.get(key);
        if v.is_none() && required {
            self.problems.push(format!("missing key `{path}.{key}`"));
        }
        v
    }

    fn float(&mut self, t: &Table, path: &str, key: &str, required: bool) -> Option<f64> {
        match self.raw(t, path, key, required)? {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.problems.push(format!("`{path}.{key}` must be a number"));
                None
            }
        }
    }

    fn uint(&mut self, t: &Table, path: &str, key: &str, required: bool) -> Option<usize> {
        match self.raw(t, path, key, required)? {
            Value::Integer(i) if *i >= 0 => Some(*i as usize),
            _ => {
                self.problems.push(format!("`{path}.{key}` must be a non-negative integer"));
                None
            }
        }
    }

    fn string<'a>(&mut self, t: &'a Table, path: &str, key: &str, required: bool) -> Option<&'a str> {
        match self.raw(t, path, key, required)? {
            Value::String(s) => Some(s),
            _ => {
                self.problems.push(format!("`{path}.{key}` must be a string"));
                None
            }
        }
    }

    fn boolean(&mut self, t: &Table, path: &str, key: &str) -> Option<bool> {
        match self.raw(t, path, key, false)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                self.problems.push(format!("`{path}.{key}` must be a boolean"));
                None
            }
        }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.problems.push(msg());
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| DkmError::Config(vec![e.message().to_string()]))?;
        let mut c = Checker { problems: Vec::new() };
        c.unknown(&root, "", &["model", "data", "train", "compression", "tau_search"]);

        let model = c.section(&root, "model", true);
        let hidden: Option<Vec<usize>> = model.and_then(|m| {
            c.unknown(m, "model", &["hidden"]);
            match c.raw(m, "model", "hidden", true)? {
                Value::Array(items) => {
                    let widths: Vec<usize> =
                        items.iter().filter_map(|v| v.as_integer().filter(|&i| i > 0).map(|i| i as usize)).collect();
                    if widths.len() != items.len() {
                        c.problems.push("`model.hidden` must be a list of positive integers".into());
                        None
                    } else {
                        Some(widths)
                    }
                }
                _ => {
                    c.problems.push("`model.hidden` must be a list of positive integers".into());
                    None
                }
            }
        });

        let data = c.section(&root, "data", true);
        let mut dataset = None;
        if let Some(d) = data {
            c.unknown(d, "data", &["kind", "n", "classes", "noise"]);
            let kind = c.string(d, "data", "kind", true).and_then(|k| match k {
                "blobs" => Some(DatasetKind::Blobs),
                "moons" => Some(DatasetKind::Moons),
                other => {
                    c.problems.push(format!("`data.kind` must be blobs or moons, got {other:?}"));
                    None
                }
            });
            let n = c.uint(d, "data", "n", true);
            let classes = c.uint(d, "data", "classes", true);
            let noise = c.float(d, "data", "noise", true);
            if let (Some(n), Some(classes)) = (n, classes) {
                c.check(classes >= 2, || "`data.classes` must be at least 2".into());
                c.check(n >= classes, || "`data.n` must be at least `data.classes`".into());
            }
            if let Some(noise) = noise {
                c.check(noise >= 0.0, || "`data.noise` must be non-negative".into());
            }
            if let (Some(kind), Some(n), Some(classes), Some(noise)) = (kind, n, classes, noise) {
                dataset = Some(DatasetSpec { kind, n, classes, noise });
            }
        }

        let train = c.section(&root, "train", true);
        let mut train_cfg = TrainConfig::default();
        let mut mode = None;
        if let Some(t) = train {
            c.unknown(t, "train", &["mode", "gumbel_draws", "learning_rate", "momentum", "batch_size", "epochs"]);
            let draws = c.uint(t, "train", "gumbel_draws", false).unwrap_or(1);
            c.check(draws >= 1, || "`train.gumbel_draws` must be at least 1".into());
            mode = c.string(t, "train", "mode", true).and_then(|m| match m {
                "dkm" => Some(TrainMode::Dkm),
                "hard" => Some(TrainMode::Hard),
                "gumbel" => Some(TrainMode::Gumbel { draws }),
                "none" => Some(TrainMode::None),
                other => {
                    c.problems.push(format!("`train.mode` must be dkm, hard, gumbel or none, got {other:?}"));
                    None
                }
            });
            if let Some(lr) = c.float(t, "train", "learning_rate", false) {
                c.check(lr > 0.0, || "`train.learning_rate` must be positive".into());
                train_cfg.learning_rate = lr;
            }
            if let Some(m) = c.float(t, "train", "momentum", false) {
                c.check((0.0..1.0).contains(&m), || "`train.momentum` must be in [0, 1)".into());
                train_cfg.momentum = m;
            }
            if let Some(bs) = c.uint(t, "train", "batch_size", true) {
                c.check(bs > 0, || "`train.batch_size` must be positive".into());
                train_cfg.batch_size = bs;
            }
            if let Some(e) = c.uint(t, "train", "epochs", true) {
                c.check(e > 0, || "`train.epochs` must be positive".into());
                train_cfg.epochs = e;
            }
        }

        let needs_scheme = !matches!(mode, Some(TrainMode::None));
        let compression = c.section(&root, "compression", needs_scheme);
        let scheme = compression.and_then(|t| parse_scheme(&mut c, t));

        let tau_search = c.section(&root, "tau_search", false).and_then(|t| {
            c.unknown(t, "tau_search", &["low", "high", "budget"]);
            let low = c.float(t, "tau_search", "low", true);
            let high = c.float(t, "tau_search", "high", true);
            let budget = c.uint(t, "tau_search", "budget", true);
            if let (Some(low), Some(high)) = (low, high) {
                c.check(low > 0.0 && low <= high, || "`tau_search` needs 0 < low <= high".into());
            }
            if let Some(b) = budget {
                c.check(b >= 3, || "`tau_search.budget` must be at least 3".into());
            }
            Some(TauSearchConfig { low: low?, high: high?, budget: budget? })
        });

        if !c.problems.is_empty() {
            return Err(DkmError::Config(c.problems));
        }
        let data = dataset.expect("validated");
        Ok(RunConfig {
            model: ModelSpec { input: 2, hidden: hidden.expect("validated"), output: data.classes, scheme },
            data,
            train: train_cfg,
            mode: mode.expect("validated"),
            tau_search,
        })
    }
}

fn parse_scheme(c: &mut Checker, t: &Table) -> Option<LayerScheme> {
    let path = "compression";
    c.unknown(
        t,
        path,
        &[
            "bits",
            "dim",
            "temperature",
            "epsilon",
            "max_iterations",
            "metric",
            "init",
            "small_layer_threshold",
            "small_layer_bits",
            "skip_first_last",
            "layers",
        ],
    );
    let bits = c.uint(t, path, "bits", true);
    let dim = c.uint(t, path, "dim", true);
    let temperature = c.float(t, path, "temperature", true);
    let mut base = DkmConfig::default();
    if let Some(e) = c.float(t, path, "epsilon", false) {
        base.epsilon = e;
    }
    if let Some(r) = c.uint(t, path, "max_iterations", false) {
        base.max_iterations = r;
    }
    if let Some(m) = c.string(t, path, "metric", false) {
        match m {
            "squared_euclidean" => base.metric = Metric::SquaredEuclidean,
            "euclidean" => base.metric = Metric::Euclidean,
            other => {
                c.problems.push(format!("`compression.metric` must be squared_euclidean or euclidean, got {other:?}"))
            }
        }
    }
    if let Some(i) = c.string(t, path, "init", false) {
        match i {
            "kmeans_pp" => base.init = Init::KmeansPp,
            "random_sample" => base.init = Init::RandomSample,
            other => c.problems.push(format!("`compression.init` must be kmeans_pp or random_sample, got {other:?}")),
        }
    }
    let mut policy = LayerPolicy { small_layer_threshold: None, small_layer_bits: 8, skip_first_last: false };
    policy.small_layer_threshold = c.uint(t, path, "small_layer_threshold", false);
    if let Some(b) = c.uint(t, path, "small_layer_bits", false) {
        policy.small_layer_bits = b as u32;
    }
    policy.skip_first_last = c.boolean(t, path, "skip_first_last").unwrap_or(false);

    let mut overrides = BTreeMap::new();
    if let Some(layers) = c.section(t, "layers", false) {
        for (name, v) in layers {
            let Value::Table(lt) = v else {
                c.problems.push(format!("`compression.layers.{name}` must be a table"));
                continue;
            };
            let lpath = format!("compression.layers.{name}");
            c.unknown(lt, &lpath, &["bits", "dim", "temperature", "epsilon", "max_iterations"]);
            let o = SchemeOverride {
                bits: c.uint(lt, &lpath, "bits", false).map(|b| b as u32),
                dim: c.uint(lt, &lpath, "dim", false),
                temperature: c.float(lt, &lpath, "temperature", false),
                epsilon: c.float(lt, &lpath, "epsilon", false),
                max_iterations: c.uint(lt, &lpath, "max_iterations", false),
            };
            overrides.insert(name.clone(), o);
        }
    }

    base.bits = bits? as u32;
    base.dim = dim?;
    base.temperature = temperature?;
    if let Err(DkmError::Parameter(msg)) = base.validate() {
        c.problems.push(format!("compression: {msg}"));
    }
    if policy.small_layer_threshold.is_some() && !(1..=16).contains(&policy.small_layer_bits) {
        c.problems.push("`compression.small_layer_bits` must be in [1, 16]".into());
    }
    Some(LayerScheme { base, policy, overrides })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[model]
hidden = [16, 16]

[data]
kind = "blobs"
n = 200
classes = 4
noise = 0.5

[train]
mode = "dkm"
batch_size = 32
epochs = 3

[compression]
bits = 2
dim = 1
temperature = 0.01

[compression.layers.fc2]
bits = 3

[tau_search]
low = 1e-3
high = 1e-1
budget = 4
"#;

    #[test]
    fn parses_full_config() {
        let cfg = RunConfig::from_toml_str(FULL).unwrap();
        assert_eq!(cfg.model.hidden, vec![16, 16]);
        assert_eq!(cfg.model.output, 4);
        assert_eq!(cfg.mode, TrainMode::Dkm);
        assert_eq!(cfg.train.learning_rate, 0.008);
        assert_eq!(cfg.train.momentum, 0.9);
        let scheme = cfg.model.scheme.unwrap();
        assert_eq!(scheme.base.epsilon, 1e-4);
        assert_eq!(scheme.base.max_iterations, 5);
        assert_eq!(scheme.overrides["fc2"].bits, Some(3));
        assert_eq!(cfg.tau_search.unwrap().budget, 4);
    }

    #[test]
    fn missing_key_is_named() {
        let text = FULL.replace("epochs = 3\n", "");
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("`train.epochs`"), "{err}");
    }

    #[test]
    fn lists_every_problem() {
        let text =
            FULL.replace("epochs = 3\n", "").replace("noise = 0.5", "noise = -1").replace("bits = 2", "bits = 0");
        let DkmError::Config(problems) = RunConfig::from_toml_str(&text).unwrap_err() else { panic!() };
        assert!(problems.iter().any(|p| p.contains("train.epochs")));
        assert!(problems.iter().any(|p| p.contains("data.noise")));
        assert!(problems.iter().any(|p| p.contains("bits")));
    }

    #[test]
    fn none_mode_does_not_need_compression() {
        let text = FULL.replace("mode = \"dkm\"", "mode = \"none\"");
        let text = &text[..text.find("[compression]").unwrap()];
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert!(cfg.model.scheme.is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = FULL.replace("[train]", "[train]\nwarmup = 3");
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("train.warmup"));
    }
}
