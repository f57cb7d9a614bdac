//! JSON run configuration and its merge with command-line flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use sdde_bem::assumptions::AuditConfig;
use sdde_bem::model::builtin_model;
use sdde_bem::{AssumptionConstants, Error, ImplicitSolveConfig, InitialHistory, Result, SddeModel};

pub const DEFAULT_MODEL: &str = "ex1-cubic";
pub const DEFAULT_SEED: u64 = 42;

/// Top-level document. Each subcommand reads its own section; `seed` and
/// `paths` here apply to every section that does not set them.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<String>,
    pub initial: Option<InitialHistory>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub solver: ImplicitSolveConfig,
    pub constants: Option<AssumptionConstants>,
    #[serde(default)]
    pub audit: AuditConfig,
    pub simulate: Option<Map<String, Value>>,
    pub strong_error: Option<Map<String, Value>>,
    pub rate: Option<Map<String, Value>>,
    pub invariant: Option<Map<String, Value>>,
    pub ergodicity: Option<Map<String, Value>>,
    pub moments: Option<Map<String, Value>>,
    #[serde(skip)]
    flag_seed: Option<u64>,
    #[serde(skip)]
    flag_paths: Option<usize>,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Simulate,
    StrongError,
    Rate,
    Invariant,
    Ergodicity,
    Moments,
}

impl Section {
    fn key(self) -> &'static str {
        match self {
            Section::Simulate => "simulate",
            Section::StrongError => "strong_error",
            Section::Rate => "rate",
            Section::Invariant => "invariant",
            Section::Ergodicity => "ergodicity",
            Section::Moments => "moments",
        }
    }

    /// Desk-scale defaults; `tau`-relative steps use the model's delay.
    fn defaults(self, tau: f64) -> Value {
        match self {
            Section::Simulate => json!({ "horizon": 2.0, "delta": 0.01, "paths": 1 }),
            Section::StrongError => json!({
                "horizon": 20.0, "delta_ref": 1e-3, "delta": 1e-2, "paths": 200
            }),
            Section::Rate => json!({
                "horizon": 4.0,
                "deltas": [tau / 32.0, tau / 64.0, tau / 128.0, tau / 256.0],
                "delta_ref": tau / 4096.0,
                "paths": 400
            }),
            Section::Invariant => json!({
                "t_ref": 30.0, "compare_times": [5.0, 10.0, 15.0, 20.0], "delta": 1e-2, "paths": 200
            }),
            Section::Ergodicity => json!({ "horizon": 30.0, "delta": 1e-2, "paths": 200 }),
            Section::Moments => json!({ "horizon": 50.0, "delta": 1e-2, "paths": 200 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub horizon: f64,
    pub delta: f64,
    pub paths: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Usage(format!("invalid config {}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.model.is_some() {
            self.model.clone_from(&o.model);
        }
        self.seed = o.seed.or(self.seed);
        self.paths = o.paths.or(self.paths);
        self.threads = o.threads.or(self.threads);
        if o.out.is_some() {
            self.out.clone_from(&o.out);
        }
        self.flag_seed = o.seed;
        self.flag_paths = o.paths;
    }

    pub fn model(&self) -> Result<SddeModel> {
        let m = builtin_model(self.model.as_deref().unwrap_or(DEFAULT_MODEL))?;
        Ok(match &self.initial {
            Some(h) => m.with_initial_history(h.clone()),
            None => m,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Constants for the audit: the file's block, or the built-in set for
    /// the default model.
    pub fn constants_for(&self, model: &SddeModel) -> Result<AssumptionConstants> {
        match &self.constants {
            Some(c) => Ok(c.clone()),
            None if model.name().starts_with(DEFAULT_MODEL) => Ok(AssumptionConstants::ex1()),
            None => Err(Error::Usage(format!(
                "model `{}` has no built-in constants; supply a `constants` block",
                model.name()
            ))),
        }
    }

    /// Section merged over defaults; flags beat the section, which beats
    /// the top-level `seed`/`paths`.
    pub fn section<T: DeserializeOwned>(&self, s: Section, tau: f64) -> Result<T> {
        let Value::Object(mut merged) = s.defaults(tau) else {
            unreachable!("defaults are objects")
        };
        merged.insert("seed".into(), json!(self.seed.unwrap_or(DEFAULT_SEED)));
        if let Some(p) = self.paths {
            merged.insert("paths".into(), json!(p));
        }
        let own = match s {
            Section::Simulate => &self.simulate,
            Section::StrongError => &self.strong_error,
            Section::Rate => &self.rate,
            Section::Invariant => &self.invariant,
            Section::Ergodicity => &self.ergodicity,
            Section::Moments => &self.moments,
        };
        if let Some(own) = own {
            merged.extend(own.clone());
        }
        if let Some(seed) = self.flag_seed {
            merged.insert("seed".into(), json!(seed));
        }
        if let Some(p) = self.flag_paths {
            merged.insert("paths".into(), json!(p));
        }
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Usage(format!("invalid `{}` section: {e}", s.key())))
    }
}
