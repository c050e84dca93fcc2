//! Versioned JSON run configuration for the command-line pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cart::{Aggregation, CvSettings, ParamGrid};
use crate::error::{Error, Result};
use crate::spline::SplineSettings;
use crate::sysmodel::{nine_bus_share, sg_share, sweep_axes, GridAxis, Sweep, SystemConfig};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "SO-DT")]
    SoDt,
    #[serde(rename = "MO-DT")]
    MoDt,
    #[serde(rename = "ENS-MO-DT")]
    EnsMoDt,
    #[serde(rename = "1DLI")]
    Li1d,
    #[serde(rename = "1DLA")]
    La1d,
    #[serde(rename = "2DLA")]
    La2d,
    #[serde(rename = "MO-DT-I")]
    MoDtI,
    #[serde(rename = "MO-DT-II")]
    MoDtII,
    #[serde(rename = "ENS-MO-DT-I")]
    EnsMoDtI,
    #[serde(rename = "ENS-MO-DT-II")]
    EnsMoDtII,
}

impl ModelKind {
    pub const ALL: [ModelKind; 10] = [
        ModelKind::SoDt,
        ModelKind::MoDt,
        ModelKind::EnsMoDt,
        ModelKind::Li1d,
        ModelKind::La1d,
        ModelKind::La2d,
        ModelKind::MoDtI,
        ModelKind::MoDtII,
        ModelKind::EnsMoDtI,
        ModelKind::EnsMoDtII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SoDt => "SO-DT",
            ModelKind::MoDt => "MO-DT",
            ModelKind::EnsMoDt => "ENS-MO-DT",
            ModelKind::Li1d => "1DLI",
            ModelKind::La1d => "1DLA",
            ModelKind::La2d => "2DLA",
            ModelKind::MoDtI => "MO-DT-I",
            ModelKind::MoDtII => "MO-DT-II",
            ModelKind::EnsMoDtI => "ENS-MO-DT-I",
            ModelKind::EnsMoDtII => "ENS-MO-DT-II",
        }
    }

    /// Predicts pole coordinates (as opposed to participation factors).
    pub fn is_pole_model(self) -> bool {
        matches!(
            self,
            ModelKind::SoDt | ModelKind::MoDt | ModelKind::EnsMoDt | ModelKind::Li1d | ModelKind::La1d | ModelKind::La2d
        )
    }

    pub fn is_spline(self) -> bool {
        matches!(self, ModelKind::Li1d | ModelKind::La1d | ModelKind::La2d)
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, ModelKind::EnsMoDt | ModelKind::EnsMoDtI | ModelKind::EnsMoDtII)
    }

    /// PF model organised per pole, needing pole coordinates as inputs.
    pub fn is_method2(self) -> bool {
        matches!(self, ModelKind::MoDtII | ModelKind::EnsMoDtII)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace([' ', '_'], "-");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model `{s}`")))
    }
}

/// Parses a comma-separated model list such as `SO-DT,ENS-MO-DT`.
pub fn parse_model_list(list: &str) -> Result<Vec<ModelKind>> {
    let mut out: Vec<ModelKind> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// A feature value, either already a share or given in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Raw(f64),
    /// 3-bus SG rating in MVA, converted with the 500 MVA converter rating.
    SgMva { sg_mva: f64 },
    /// Rating or demand divided by the 9-bus base.
    PerBase { per_base: f64 },
}

impl Value {
    pub fn resolve(self) -> f64 {
        match self {
            Value::Raw(v) => v,
            Value::SgMva { sg_mva } => sg_share(sg_mva),
            Value::PerBase { per_base } => nine_bus_share(per_base),
        }
    }
}

/// One sweep axis: a single feature, or several features moving together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisSpec {
    Single { feature: String, values: Vec<Value> },
    Coupled { features: Vec<String>, values: Vec<Vec<Value>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemRef {
    Builtin(String),
    /// System configuration file, relative to the run configuration file.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    pub train_fraction: f64,
    #[serde(default)]
    pub folds: Option<usize>,
}

impl Default for CvSpec {
    fn default() -> Self {
        CvSpec {
            train_fraction: 0.8,
            folds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_trees: usize,
    pub bootstrap: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            n_trees: 50,
            bootstrap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlot {
    pub model: ModelKind,
    /// Output column, e.g. `re_l2`; PF models take `file:column`, e.g.
    /// `pf_method1_pv3:pf_l5`.
    pub output: String,
    pub x: String,
    pub y: String,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
}

fn default_aggregation() -> Aggregation {
    Aggregation::Max
}

fn default_threshold() -> f64 {
    crate::eigen::DOMINANCE_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub system: SystemRef,
    pub grid: Vec<AxisSpec>,
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub hyper_grid: ParamGrid,
    #[serde(default)]
    pub cv: CvSpec,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub spline: SplineSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub dominance_threshold: f64,
    /// Test instances as a grid (Cartesian product of the axes).
    #[serde(default)]
    pub test_grid: Vec<AxisSpec>,
    /// Default point for single predictions.
    #[serde(default)]
    pub predict_point: BTreeMap<String, Value>,
    #[serde(default)]
    pub partition_plots: Vec<PartitionPlot>,
    pub out_dir: PathBuf,
    /// Directory of the configuration file, for resolving relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::from_json(&text, &base)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn system_config(&self) -> Result<SystemConfig> {
        match &self.system {
            SystemRef::Builtin(name) => SystemConfig::builtin(name)
                .ok_or_else(|| Error::InvalidConfig(format!("no built-in system named `{name}`"))),
            SystemRef::Path(p) => {
                let path = if p.is_absolute() { p.clone() } else { self.base_dir.join(p) };
                if !path.exists() {
                    return Err(Error::MissingFile(path));
                }
                SystemConfig::load(&path)
            }
        }
    }

    /// Checks the invariants that do not need the file system beyond the system file.
    pub fn validate(&self) -> Result<SystemConfig> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "run configuration version {} is not supported (expected {RUN_CONFIG_VERSION})",
                self.version
            )));
        }
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("at least one model must be selected".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("the grid specification is empty".into()));
        }
        if self.hyper_grid.is_empty() {
            return Err(Error::InvalidConfig("the hyperparameter grid is empty".into()));
        }
        if self.ensemble.n_trees == 0 {
            return Err(Error::InvalidConfig("ensembles need at least one tree".into()));
        }
        if !(self.cv.train_fraction > 0.0 && self.cv.train_fraction < 1.0) {
            return Err(Error::InvalidConfig("cv.train_fraction must lie in (0, 1)".into()));
        }
        if !(self.dominance_threshold > 0.0 && self.dominance_threshold <= 1.0) {
            return Err(Error::InvalidConfig("dominance_threshold must lie in (0, 1]".into()));
        }
        let sys = self.system_config()?;
        self.sweep(&sys)?;
        Ok(sys)
    }

    pub fn cv_settings(&self, seed: u64) -> CvSettings {
        CvSettings {
            train_fraction: self.cv.train_fraction,
            folds: self.cv.folds,
            seed,
        }
    }

    pub fn out_path(&self) -> PathBuf {
        self.out_dir.clone()
    }

    pub fn sweep(&self, sys: &SystemConfig) -> Result<Sweep> {
        axes_sweep(sys, &self.grid)
    }

    pub fn test_sweep(&self, sys: &SystemConfig) -> Result<Sweep> {
        if self.test_grid.is_empty() {
            return Err(Error::InvalidConfig("no test instances configured".into()));
        }
        axes_sweep(sys, &self.test_grid)
    }

    /// Point values in feature order from a name/value map.
    pub fn point_values(sys: &SystemConfig, map: &BTreeMap<String, Value>) -> Result<Vec<f64>> {
        let names = sys.feature_names();
        for k in map.keys() {
            if !names.contains(k) {
                return Err(Error::InvalidConfig(format!("unknown feature `{k}`")));
            }
        }
        names
            .iter()
            .map(|n| {
                map.get(n)
                    .map(|v| v.resolve())
                    .ok_or_else(|| Error::InvalidConfig(format!("point lacks feature `{n}`")))
            })
            .collect()
    }
}

fn feature_index(sys: &SystemConfig, name: &str) -> Result<usize> {
    sys.feature_names()
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown feature `{name}`")))
}

pub fn axes_sweep(sys: &SystemConfig, specs: &[AxisSpec]) -> Result<Sweep> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig("the grid specification is empty".into()));
    }
    let axes = specs
        .iter()
        .map(|s| match s {
            AxisSpec::Single { feature, values } => {
                if values.is_empty() {
                    return Err(Error::InvalidConfig(format!("no values for `{feature}`")));
                }
                Ok(GridAxis::single(
                    feature_index(sys, feature)?,
                    values.iter().map(|v| v.resolve()).collect(),
                ))
            }
            AxisSpec::Coupled { features, values } => {
                if values.is_empty() {
                    return Err(Error::InvalidConfig(format!("no values for {features:?}")));
                }
                Ok(GridAxis {
                    features: features.iter().map(|f| feature_index(sys, f)).collect::<Result<_>>()?,
                    values: values.iter().map(|row| row.iter().map(|v| v.resolve()).collect()).collect(),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    sweep_axes(sys, &axes)
}

/// Parses `name=value,name=value`.
pub fn parse_point(text: &str) -> Result<BTreeMap<String, Value>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected name=value, got `{kv}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("`{v}` is not a number")))?;
            Ok((k.trim().to_string(), Value::Raw(v)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> &'static str {
        r#"{
            "version": 1,
            "system": {"builtin": "three_bus"},
            "grid": [
                {"feature": "S_SGshare", "values": [{"sg_mva": 500}, {"sg_mva": 200}]},
                {"feature": "tau_v", "values": [0.1, 0.5]},
                {"feature": "R", "values": [0.05, 0.1, 0.2]}
            ],
            "models": ["MO-DT", "1DLI"],
            "test_grid": [
                {"feature": "S_SGshare", "values": [{"sg_mva": 330}]},
                {"feature": "tau_v", "values": [0.2]},
                {"feature": "R", "values": [0.07]}
            ],
            "out_dir": "out"
        }"#
    }

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_json(sample(), Path::new(".")).unwrap();
        assert_eq!(cfg.ensemble.n_trees, 50);
        assert_eq!(cfg.dominance_threshold, 0.3);
        assert_eq!(cfg.hyper_grid.len(), 24);
        let sys = cfg.validate().unwrap();
        let sweep = cfg.sweep(&sys).unwrap();
        assert_eq!(sweep.len(), 12);
        assert_eq!(sweep.points[0].values[0], 0.5);
        let test = cfg.test_sweep(&sys).unwrap();
        assert!((test.points[0].values[0] - 330.0 / 830.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = RunConfig::from_json(sample(), Path::new(".")).unwrap();
        cfg.models.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_json(sample(), Path::new(".")).unwrap();
        cfg.grid.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_json(sample(), Path::new(".")).unwrap();
        cfg.version = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_json(sample(), Path::new(".")).unwrap();
        cfg.system = SystemRef::Path("does/not/exist.json".into());
        assert!(matches!(cfg.validate(), Err(Error::MissingFile(_))));
    }

    #[test]
    fn model_names() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert_eq!(
            parse_model_list("ens-mo-dt, SO-DT,SO-DT").unwrap(),
            vec![ModelKind::SoDt, ModelKind::EnsMoDt]
        );
        assert!(parse_model_list("XGB").is_err());
    }

    #[test]
    fn point_parsing() {
        let p = parse_point("R=0.05, tau_v=0.65,S_SGshare=0.4").unwrap();
        let sys = SystemConfig::three_bus();
        assert_eq!(RunConfig::point_values(&sys, &p).unwrap(), vec![0.4, 0.65, 0.05]);
        assert!(parse_point("R").is_err());
    }
}
