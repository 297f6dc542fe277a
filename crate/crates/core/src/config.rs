//! Run configuration: a TOML file with strict key checking, plus dotted-key
//! overrides used by hyperparameter sweeps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptOptions, MethodSpec};
use crate::augment::ViewSet;
use crate::error::{Error, Result};
use crate::icat::IcatConfig;
use crate::icwl::IcwlConfig;
use crate::model::SourceTrainConfig;
use crate::scenes::{mix_seed, SceneSpec, StreamSpec};

/// Adaptation hyperparameters shared by every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub lr: f64,
    pub teacher_momentum: f64,
    /// Threshold of the fixed-threshold baseline; `icat.tau0` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_tau: Option<f64>,
    /// Export a loss map every this many frames (0 disables).
    pub loss_map_every: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            teacher_momentum: 0.95,
            fixed_tau: None,
            loss_map_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub scene: SceneSpec,
    pub stream: StreamSpec,
    pub source: SourceTrainConfig,
    pub adapt: AdaptSection,
    pub icat: IcatConfig,
    pub icwl: IcwlConfig,
    pub views: ViewSet,
    /// Dotted key to list of values, e.g. `"icat.tau0" = [0.9, 0.99]`.
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            methods: ["source", "entropy", "fixed-threshold", "cotica", "icat-only", "icwl-only"]
                .map(String::from)
                .to_vec(),
            scene: SceneSpec::default(),
            stream: StreamSpec::default(),
            source: SourceTrainConfig::default(),
            adapt: AdaptSection::default(),
            icat: IcatConfig {
                tau0: 0.9,
                ..IcatConfig::default()
            },
            icwl: IcwlConfig::default(),
            views: ViewSet::default(),
            sweep: BTreeMap::new(),
        }
    }
}

/// One point of a sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// `key=value` pairs joined by `;`, empty for the base configuration.
    pub label: String,
    pub config: RunConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        self.scene.validate().map_err(config)?;
        self.stream.validate().map_err(config)?;
        if self.source.epochs == 0 {
            return Err(Error::Config("source.epochs must be at least 1".into()));
        }
        for name in &self.methods {
            self.method(name)?;
        }
        for key in self.sweep.keys() {
            self.lookup(key)?;
        }
        Ok(())
    }

    /// Method defaults before name resolution.
    pub fn base_method(&self) -> MethodSpec {
        let mut m = MethodSpec::new(crate::adapt::MethodKind::Cotica);
        m.icat = self.icat.clone();
        m.icwl = self.icwl.clone();
        m.lr = self.adapt.lr;
        m.teacher_momentum = self.adapt.teacher_momentum;
        m.fixed_tau = self.adapt.fixed_tau.unwrap_or(self.icat.tau0);
        m.views = self.views.clone();
        m
    }

    pub fn method(&self, name: &str) -> Result<MethodSpec> {
        MethodSpec::named(name, &self.base_method()).map_err(|e| Error::Config(format!("method {name:?}: {e}")))
    }

    /// The stream realised for one run seed.
    pub fn stream_for_seed(&self, seed: u64) -> StreamSpec {
        StreamSpec {
            seed: mix_seed(&[self.stream.seed, seed]),
            ..self.stream.clone()
        }
    }

    pub fn adapt_options(&self) -> AdaptOptions {
        AdaptOptions {
            loss_map_every: self.adapt.loss_map_every,
        }
    }

    fn lookup(&self, key: &str) -> Result<toml::Value> {
        let root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &root;
        for part in key.split('.') {
            node = node
                .get(part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        if node.is_table() {
            return Err(Error::Config(format!("{key:?} is a section, not a value")));
        }
        Ok(node.clone())
    }

    /// Copy of the configuration with one dotted key replaced.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self> {
        self.lookup(key)?;
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node.get_mut(*part).expect("checked by lookup");
        }
        let slot = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?} is not inside a section")))?;
        slot.insert(parts[parts.len() - 1].to_string(), value);
        let out: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        out.validate()?;
        Ok(out)
    }

    /// Cartesian product of the sweep grid, in key order. Without a sweep
    /// this is the base configuration alone.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        let mut out = vec![Variant {
            label: String::new(),
            config: RunConfig {
                sweep: BTreeMap::new(),
                ..self.clone()
            },
        }];
        for (key, values) in &self.sweep {
            if values.is_empty() {
                return Err(Error::Config(format!("sweep {key:?} has no values")));
            }
            let mut next = Vec::with_capacity(out.len() * values.len());
            for v in &out {
                for value in values {
                    let piece = format!("{key}={}", display_value(value));
                    let label = if v.label.is_empty() {
                        piece
                    } else {
                        format!("{};{piece}", v.label)
                    };
                    next.push(Variant {
                        label,
                        config: v.config.with_override(key, value.clone())?,
                    });
                }
            }
            out = next;
        }
        Ok(out)
    }
}

fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses `KEY=V1,V2,...`. Each value is read as a TOML literal when
/// possible and as a bare string otherwise.
pub fn parse_sweep_arg(arg: &str) -> Result<(String, Vec<toml::Value>)> {
    let (key, rest) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep {arg:?} is not KEY=V1,V2,...")))?;
    let key = key.trim();
    if key.is_empty() || rest.trim().is_empty() {
        return Err(Error::Config(format!("sweep {arg:?} is not KEY=V1,V2,...")));
    }
    let values = rest.split(',').map(|t| parse_literal(t.trim())).collect();
    Ok((key.to_string(), values))
}

fn parse_literal(token: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    match toml::from_str::<Probe>(&format!("v = {token}")) {
        Ok(p) => p.v,
        Err(_) => toml::Value::String(token.to_string()),
    }
}
