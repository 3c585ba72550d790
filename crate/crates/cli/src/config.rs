//! Run configuration: a flat JSON object whose keys can be overridden from
//! the command line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use wqsp_core::bundled;
use wqsp_core::hydraulics::{GeneratorSettings, SegmentPolicy};
use wqsp_core::observability::MetricVariant;
use wqsp_core::placement::SelectionRule;

/// Problems with the configuration itself. These exit with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    #[default]
    KfDegenerate,
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// INP file, or `bundled:<name>` for a shipped network.
    pub network: Option<String>,
    /// Hydraulics JSON. Without it hydraulics are synthesized.
    pub hydraulics: Option<String>,
    /// One hydraulics JSON per demand scenario; overrides `hydraulics`.
    pub profiles: Vec<String>,
    /// Demand multipliers, one synthesized scenario each.
    pub demand_scales: Vec<f64>,
    pub steps: usize,
    pub dt_hydraulic_s: Option<f64>,
    pub fill_fraction: Option<f64>,
    pub swing: Option<f64>,
    pub policy: Option<PolicyKind>,
    pub segments: Option<usize>,
    pub dt: Option<f64>,
    pub dt_target: Option<f64>,
    pub window_s: f64,
    pub r: usize,
    pub variant: VariantKind,
    pub sigma: f64,
    pub prior_variance: f64,
    pub process_std: f64,
    pub selection: SelectionRule,
    pub lazy: bool,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub duration_s: Option<f64>,
    pub record_every: usize,
    pub count: usize,
    pub placement: Option<String>,
    pub sensors: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: None,
            hydraulics: None,
            profiles: Vec::new(),
            demand_scales: vec![1.0],
            steps: 24,
            dt_hydraulic_s: None,
            fill_fraction: None,
            swing: None,
            policy: None,
            segments: None,
            dt: None,
            dt_target: None,
            window_s: bundled::DEFAULT_WINDOW_S,
            r: 0,
            variant: VariantKind::KfDegenerate,
            sigma: 0.1,
            prior_variance: 1.0,
            process_std: 0.0,
            selection: SelectionRule::PerNode,
            lazy: false,
            seed: None,
            out: None,
            duration_s: None,
            record_every: 1,
            count: 10,
            placement: None,
            sensors: Vec::new(),
        }
    }
}

/// Flags shared by every command. Each one overrides the key of the same
/// name in the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file with flat keys
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Network INP file or bundled:<three-node|net1|grid>
    #[arg(long)]
    pub network: Option<String>,
    #[arg(long)]
    pub hydraulics: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// fixed or dynamic
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub dt_target: Option<f64>,
    /// Metric window k_f·Δt in seconds
    #[arg(long)]
    pub window_s: Option<f64>,
    /// Number of sensors
    #[arg(long, short = 'r')]
    pub r: Option<usize>,
    /// kf_degenerate or general
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub process_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, short = 'o')]
    pub out: Option<String>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub count: Option<usize>,
    /// placement.json from a previous `place` run
    #[arg(long)]
    pub placement: Option<String>,
    /// Comma-separated sensor node ids
    #[arg(long, value_delimiter = ',')]
    pub sensors: Option<Vec<String>>,
    /// Any other key, as key=value with a JSON or bare-string value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> anyhow::Result<Map<String, Value>> {
        let mut m = Map::new();
        let mut put = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(key.to_string(), v);
            }
        };
        put("network", self.network.clone().map(Value::from));
        put("hydraulics", self.hydraulics.clone().map(Value::from));
        put("steps", self.steps.map(Value::from));
        put("policy", self.policy.clone().map(Value::from));
        put("segments", self.segments.map(Value::from));
        put("dt", self.dt.map(Value::from));
        put("dt_target", self.dt_target.map(Value::from));
        put("window_s", self.window_s.map(Value::from));
        put("r", self.r.map(Value::from));
        put("variant", self.variant.clone().map(Value::from));
        put("sigma", self.sigma.map(Value::from));
        put("process_std", self.process_std.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("out", self.out.clone().map(Value::from));
        put("duration_s", self.duration_s.map(Value::from));
        put("count", self.count.map(Value::from));
        put("placement", self.placement.clone().map(Value::from));
        put("sensors", self.sensors.clone().map(Value::from));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::from(v));
            m.insert(k.trim().to_string(), value);
        }
        Ok(m)
    }
}

/// The merged configuration plus where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    /// Directory that relative paths in the config file are resolved against.
    pub base: PathBuf,
    pub file: Option<PathBuf>,
}

pub fn load(args: &ConfigArgs) -> anyhow::Result<Loaded> {
    let mut merged = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(config_error(format!("{} must hold a JSON object", path.display()))),
                Err(e) => return Err(config_error(format!("{}: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    merged.extend(args.overrides()?);
    let config: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| config_error(e.to_string()))?;
    let base = args
        .config
        .as_ref()
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    Ok(Loaded {
        config,
        base,
        file: args.config.clone(),
    })
}

impl Loaded {
    /// Resolves a path from the config relative to the config file.
    pub fn path(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() || self.base.as_os_str().is_empty() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn network(&self) -> anyhow::Result<&str> {
        self.config.network.as_deref().ok_or_else(|| config_error("`network` is required"))
    }

    pub fn bundled_name(&self) -> Option<&str> {
        self.config.network.as_deref().and_then(|n| n.strip_prefix("bundled:"))
    }

    pub fn out_dir(&self) -> anyhow::Result<PathBuf> {
        let out = self.config.out.as_deref().ok_or_else(|| config_error("`out` is required"))?;
        Ok(self.path(out))
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.config.seed.ok_or_else(|| config_error("`seed` is required for this command"))
    }

    pub fn generator(&self) -> GeneratorSettings {
        let base = self
            .bundled_name()
            .and_then(bundled::by_name)
            .map_or_else(GeneratorSettings::default, |(_, s)| s);
        GeneratorSettings {
            dt_hydraulic_s: self.config.dt_hydraulic_s.unwrap_or(base.dt_hydraulic_s),
            fill_fraction: self.config.fill_fraction.unwrap_or(base.fill_fraction),
            swing: self.config.swing.unwrap_or(base.swing),
        }
    }

    pub fn policy(&self) -> anyhow::Result<SegmentPolicy> {
        let c = &self.config;
        let fallback = self.bundled_name().and_then(bundled::default_policy);
        let kind = match (c.policy, fallback) {
            (Some(k), _) => k,
            (None, Some(SegmentPolicy::Dynamic { .. })) => PolicyKind::Dynamic,
            (None, _) => PolicyKind::Fixed,
        };
        Ok(match kind {
            PolicyKind::Fixed => {
                let segments = match (c.segments, fallback) {
                    (Some(s), _) => s,
                    (None, Some(SegmentPolicy::Fixed { segments, .. })) => segments,
                    _ => return Err(config_error("fixed policy needs `segments`")),
                };
                if segments == 0 {
                    return Err(config_error("`segments` must be at least 1"));
                }
                SegmentPolicy::Fixed { segments, dt: c.dt }
            }
            PolicyKind::Dynamic => {
                let dt_target = match (c.dt_target, fallback) {
                    (Some(t), _) => t,
                    (None, Some(SegmentPolicy::Dynamic { dt_target })) => dt_target,
                    _ => return Err(config_error("dynamic policy needs `dt_target`")),
                };
                if dt_target.is_nan() || dt_target <= 0.0 {
                    return Err(config_error("`dt_target` must be positive"));
                }
                SegmentPolicy::Dynamic { dt_target }
            }
        })
    }

    pub fn variant(&self) -> anyhow::Result<MetricVariant> {
        let c = &self.config;
        let v = match c.variant {
            VariantKind::KfDegenerate => MetricVariant::KfDegenerate,
            VariantKind::General => MetricVariant::General {
                sigma: c.sigma,
                prior_variance: c.prior_variance,
                process_variance: c.process_std * c.process_std,
            },
        };
        v.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"network": "bundled:net1", "r": 2, "seed": 5}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            r: Some(4),
            set: vec!["lazy=true".into(), "selection=per_set".into()],
            ..Default::default()
        };
        let loaded = load(&args).unwrap();
        assert_eq!(loaded.config.r, 4);
        assert_eq!(loaded.config.seed, Some(5));
        assert!(loaded.config.lazy);
        assert_eq!(loaded.config.selection, SelectionRule::PerSet);
        assert_eq!(loaded.bundled_name(), Some("net1"));
        assert_eq!(loaded.policy().unwrap(), SegmentPolicy::Dynamic { dt_target: 5.0 });
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let args = ConfigArgs {
            set: vec!["bogus=1".into()],
            ..Default::default()
        };
        let err = load(&args).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let loaded = Loaded {
            config: RunConfig::default(),
            base: PathBuf::from("/runs/a"),
            file: None,
        };
        assert_eq!(loaded.path("net.inp"), PathBuf::from("/runs/a/net.inp"));
        assert_eq!(loaded.path("/abs/net.inp"), PathBuf::from("/abs/net.inp"));
    }

    #[test]
    fn general_variant_checks_parameters() {
        let mut loaded = Loaded {
            config: RunConfig::default(),
            base: PathBuf::new(),
            file: None,
        };
        loaded.config.variant = VariantKind::General;
        loaded.config.sigma = 0.0;
        assert!(loaded.variant().is_err());
        loaded.config.sigma = 0.2;
        assert!(matches!(loaded.variant().unwrap(), MetricVariant::General { .. }));
    }
}
