//! End-to-end commands: generate databases, train model variants, evaluate them on
//! test instances, predict single points and draw maps.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cart::{self, feature_space_partition, from_json_deep, FitParams, ScoreRow, Splitter, Tree};
use crate::dataset::{
    self, align_sweep, assemble, file_stem, method2_input, pf_method1, pf_method2, solve_sweep, to_single_output,
    Layout, Part, Provenance, RegressionDB,
};
use crate::eigen::{dominant_groups, leading_group, modal_analysis, track_poles, ModalSolution};
use crate::ensemble::{fit_bagging, BaggedEnsemble, EnsembleParams};
use crate::error::{Error, Result};
use crate::metrics::{render_table, EvalReport, ReportBuilder, Timing};
use crate::runconfig::{ModelKind, PartitionPlot, RunConfig};
use crate::spline::{fit_family_1d, fit_family_2d, SplineFamily, SplineKind};
use crate::svg::{self, MarkerSeries, MarkerShape, PoleMarker};
use crate::sysmodel::{build_state_matrix, FeaturePoint, SystemConfig};

pub const MODEL_FILE_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

/// Order in which pole models are preferred when another step needs predicted poles.
const POLE_PREFERENCE: [ModelKind; 6] = [
    ModelKind::EnsMoDt,
    ModelKind::MoDt,
    ModelKind::SoDt,
    ModelKind::La1d,
    ModelKind::Li1d,
    ModelKind::La2d,
];

const PF_PREFERENCE: [ModelKind; 4] = [
    ModelKind::EnsMoDtI,
    ModelKind::EnsMoDtII,
    ModelKind::MoDtI,
    ModelKind::MoDtII,
];

/// Stable sub-seed for one use of the master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// All output files go through here, so writes happen from one thread in a fixed order.
#[derive(Debug, Default)]
pub struct Writer {
    pub written: Vec<PathBuf>,
}

impl Writer {
    fn ensure_parent(path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        Ok(())
    }

    pub fn write(&mut self, path: &Path, contents: &[u8]) -> Result<()> {
        Self::ensure_parent(path)?;
        fs::write(path, contents).map_err(|e| Error::io(path, e))?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    pub fn save_db(&mut self, db: &RegressionDB, path: &Path) -> Result<()> {
        Self::ensure_parent(path)?;
        dataset::save(db, path)?;
        self.written.push(path.to_path_buf());
        self.written.push(dataset::manifest_path(path));
        Ok(())
    }
}

// ---- directory layout ----

pub fn db_dir(out: &Path) -> PathBuf {
    out.join("db")
}

pub fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

pub fn reports_dir(out: &Path) -> PathBuf {
    out.join("reports")
}

pub fn predict_dir(out: &Path) -> PathBuf {
    out.join("predict")
}

pub fn db_path(out: &Path, config: &str, layout: Layout) -> PathBuf {
    db_dir(out).join(format!("{}.csv", file_stem(config, layout)))
}

pub fn model_path(out: &Path, kind: ModelKind, layout: Layout) -> PathBuf {
    models_dir(out).join(kind.name()).join(format!("{}.json", layout.tag()))
}

/// Files a model variant consists of, for a system with `m` modes.
pub fn model_layouts(kind: ModelKind, m: usize) -> Vec<Layout> {
    match kind {
        ModelKind::SoDt => [Part::Re, Part::Im]
            .into_iter()
            .flat_map(|part| (0..m).map(move |pole| Layout::SoSlice { part, pole }))
            .collect(),
        ModelKind::MoDt | ModelKind::EnsMoDt | ModelKind::Li1d | ModelKind::La1d | ModelKind::La2d => {
            vec![Layout::PolesRe, Layout::PolesIm]
        }
        ModelKind::MoDtI | ModelKind::EnsMoDtI => (0..m).map(|pv| Layout::PfMethod1 { pv }).collect(),
        ModelKind::MoDtII | ModelKind::EnsMoDtII => (0..m).map(|pole| Layout::PfMethod2 { pole }).collect(),
    }
}

// ---- trained models ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Tree(Tree),
    Ensemble(BaggedEnsemble),
    /// One family per output column.
    Splines(Vec<SplineFamily>),
}

impl Predictor {
    pub fn predict(&self, x: &[f64], allow_extrapolation: bool) -> Result<Vec<f64>> {
        match self {
            Predictor::Tree(t) => t.predict(x),
            Predictor::Ensemble(e) => e.predict(x),
            Predictor::Splines(f) => f.iter().map(|fam| fam.predict(x, allow_extrapolation)).collect(),
        }
    }
}

/// A fitted predictor with the metadata needed to use it on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub model: ModelKind,
    pub layout: Layout,
    pub provenance: Provenance,
    pub feature_names: Vec<String>,
    pub output_names: Vec<String>,
    pub predictor: Predictor,
}

impl TrainedModel {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: TrainedModel = from_json_deep(&text)?;
        if m.version != MODEL_FILE_VERSION {
            return Err(Error::InvalidConfig(format!(
                "{}: model file version {} is not supported",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    pub fn predict(&self, x: &[f64], allow_extrapolation: bool) -> Result<Vec<f64>> {
        if x.len() != self.feature_names.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_names.len(),
                got: x.len(),
                context: "model input length",
            });
        }
        self.predictor.predict(x, allow_extrapolation)
    }
}

// ---- generate ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub config: String,
    pub grid_hash: String,
    pub n_points: usize,
    pub n_states: usize,
    pub n_features: usize,
    /// Relative to the output directory.
    pub files: Vec<PathBuf>,
    pub timing: GenerateTiming,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateTiming {
    pub solve_s: f64,
    pub total_s: f64,
}

/// Sweep, eigen-analysis, alignment and assembly, without writing anything.
pub fn build_databases(cfg: &RunConfig, sys: &SystemConfig) -> Result<dataset::Assembled> {
    let sweep = cfg.sweep(sys)?;
    let mut summaries = solve_sweep(sys, &sweep, cfg.dominance_threshold)?;
    align_sweep(&sweep, &mut summaries)?;
    let provenance = Provenance {
        config: sys.name.clone(),
        grid_hash: sweep.hash(),
    };
    let solutions: Vec<(FeaturePoint, _)> = sweep.points.into_iter().zip(summaries).collect();
    assemble(&solutions, provenance)
}

pub fn generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    let start = Instant::now();
    let sys = cfg.validate()?;
    let t = Instant::now();
    let dbs = build_databases(cfg, &sys)?;
    let solve_s = t.elapsed().as_secs_f64();
    let out = cfg.out_path();
    let mut w = Writer::default();
    for db in [&dbs.re, &dbs.im, &dbs.pf_full] {
        w.save_db(db, &db_path(&out, &sys.name, db.layout))?;
    }
    let mut summary = GenerateSummary {
        config: sys.name.clone(),
        grid_hash: dbs.re.provenance.grid_hash.clone(),
        n_points: dbs.re.n_rows(),
        n_states: sys.n_states,
        n_features: sys.n_features,
        files: w
            .written
            .iter()
            .map(|p| p.strip_prefix(&out).unwrap_or(p).to_path_buf())
            .collect(),
        timing: GenerateTiming {
            solve_s,
            total_s: 0.0,
        },
    };
    summary.timing.total_s = start.elapsed().as_secs_f64();
    w.write_json(&db_dir(&out).join("generate_report.json"), &summary)?;
    Ok(summary)
}

pub struct BaseDbs {
    pub re: RegressionDB,
    pub im: RegressionDB,
    pub pf_full: Option<RegressionDB>,
}

pub fn load_databases(out: &Path, sys: &SystemConfig, with_pf: bool) -> Result<BaseDbs> {
    let re = dataset::load(&db_path(out, &sys.name, Layout::PolesRe))?;
    let im = dataset::load(&db_path(out, &sys.name, Layout::PolesIm))?;
    let pf_full = if with_pf {
        Some(dataset::load(&db_path(out, &sys.name, Layout::PfFull))?)
    } else {
        None
    };
    if re.provenance != im.provenance || pf_full.as_ref().is_some_and(|p| p.provenance != re.provenance) {
        return Err(Error::Manifest {
            path: db_dir(out),
            reason: "databases come from different sweeps".into(),
        });
    }
    if re.provenance.config != sys.name {
        return Err(Error::Manifest {
            path: db_dir(out),
            reason: format!("databases belong to `{}`, not `{}`", re.provenance.config, sys.name),
        });
    }
    Ok(BaseDbs { re, im, pf_full })
}

// ---- train ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    pub file: String,
    pub layout: Layout,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_params: Option<FitParams>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation_mse: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub cv_scores: Vec<ScoreRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_leaves: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub feature_importance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainReport {
    pub model: ModelKind,
    pub files: Vec<FileReport>,
    pub timing: TrainTiming,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub train_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub config: String,
    pub grid_hash: String,
    pub models: Vec<ModelTrainReport>,
}

pub fn train_report_path(out: &Path) -> PathBuf {
    models_dir(out).join("train_report.json")
}

struct Job {
    layout: Layout,
    db: RegressionDB,
}

fn jobs_for(kind: ModelKind, dbs: &BaseDbs) -> Result<Vec<Job>> {
    let m = dbs.re.n_outputs();
    let pf = || {
        dbs.pf_full
            .as_ref()
            .ok_or_else(|| Error::MissingFile(PathBuf::from("pf_full database")))
    };
    model_layouts(kind, m)
        .into_iter()
        .map(|layout| {
            let db = match layout {
                Layout::SoSlice { part: Part::Re, pole } => to_single_output(&dbs.re, pole)?,
                Layout::SoSlice { part: Part::Im, pole } => to_single_output(&dbs.im, pole)?,
                Layout::PolesRe => dbs.re.clone(),
                Layout::PolesIm => dbs.im.clone(),
                Layout::PfMethod1 { pv } => pf_method1(pf()?, pv)?,
                Layout::PfMethod2 { pole } => pf_method2(pf()?, &dbs.re, &dbs.im, pole)?,
                Layout::PfFull => unreachable!("no model trains on the full PF database"),
            };
            Ok(Job { layout, db })
        })
        .collect()
}

/// Features ordered by decreasing number of distinct values (ties keep feature order).
pub fn features_by_cardinality(x: &DMatrix<f64>) -> Vec<usize> {
    let counts: Vec<usize> = (0..x.ncols())
        .map(|j| {
            let mut v: Vec<f64> = x.column(j).iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len()
        })
        .collect();
    let mut idx: Vec<usize> = (0..x.ncols()).collect();
    idx.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    idx
}

fn train_job(cfg: &RunConfig, kind: ModelKind, job: &Job) -> Result<(TrainedModel, FileReport)> {
    let label = format!("{}/{}", kind.name(), job.layout.tag());
    let db = &job.db;
    let mut report = FileReport {
        file: format!("{}.json", job.layout.tag()),
        layout: job.layout,
        best_params: None,
        validation_mse: None,
        cv_scores: Vec::new(),
        n_leaves: None,
        feature_importance: Vec::new(),
    };
    let predictor = match kind {
        ModelKind::SoDt | ModelKind::MoDt | ModelKind::MoDtI | ModelKind::MoDtII => {
            let base = FitParams {
                splitter: Splitter::Best,
                seed: derive_seed(cfg.seed, &format!("{label}/fit")),
                ..FitParams::default()
            };
            let cv = cfg.cv_settings(derive_seed(cfg.seed, &format!("{label}/cv")));
            let (best, rows) = cart::grid_search_cv(&db.x, &db.y, &base, &cfg.hyper_grid, &cv)?;
            let tree = cart::fit(&db.x, &db.y, &best)?;
            report.validation_mse = rows.iter().find(|r| r.params == best).map(|r| r.validation_mse);
            report.best_params = Some(best);
            report.cv_scores = rows;
            report.n_leaves = Some(tree.n_leaves());
            report.feature_importance = tree.feature_importance();
            Predictor::Tree(tree)
        }
        ModelKind::EnsMoDt | ModelKind::EnsMoDtI | ModelKind::EnsMoDtII => {
            let defaults = EnsembleParams::default();
            let params = EnsembleParams {
                n_trees: cfg.ensemble.n_trees,
                bootstrap: cfg.ensemble.bootstrap,
                seed: derive_seed(cfg.seed, &format!("{label}/bagging")),
                tree: defaults.tree,
            };
            let e = fit_bagging(&db.x, &db.y, &params)?;
            report.n_leaves = Some(e.trees.iter().map(|t| t.n_leaves()).sum());
            report.feature_importance = e.feature_importance();
            Predictor::Ensemble(e)
        }
        ModelKind::Li1d | ModelKind::La1d | ModelKind::La2d => {
            let order = features_by_cardinality(&db.x);
            let fams = (0..db.n_outputs())
                .into_par_iter()
                .map(|k| {
                    let y: Vec<f64> = db.y.column(k).iter().copied().collect();
                    match kind {
                        ModelKind::Li1d => {
                            fit_family_1d(&db.x, &y, &db.feature_names, order[0], SplineKind::Li1d, &cfg.spline)
                        }
                        ModelKind::La1d => {
                            fit_family_1d(&db.x, &y, &db.feature_names, order[0], SplineKind::La1d, &cfg.spline)
                        }
                        _ => {
                            if order.len() < 2 {
                                return Err(Error::InvalidArgument("surfaces need two features".into()));
                            }
                            fit_family_2d(&db.x, &y, &db.feature_names, order[0], order[1], &cfg.spline)
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Predictor::Splines(fams)
        }
    };
    let model = TrainedModel {
        version: MODEL_FILE_VERSION,
        model: kind,
        layout: job.layout,
        provenance: db.provenance.clone(),
        feature_names: db.feature_names.clone(),
        output_names: db.output_names.clone(),
        predictor,
    };
    Ok((model, report))
}

fn model_json(model: &TrainedModel) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(model)?)
}

pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    let sys = cfg.validate()?;
    let out = cfg.out_path();
    let needs_pf = cfg.models.iter().any(|k| !k.is_pole_model());
    let dbs = load_databases(&out, &sys, needs_pf)?;
    let mut w = Writer::default();
    let mut models = Vec::new();
    for &kind in &cfg.models {
        let start = Instant::now();
        let jobs = jobs_for(kind, &dbs)?;
        // members of an ensemble already run in parallel; other variants parallelize
        // over their files
        let results: Vec<(TrainedModel, FileReport)> = if kind.is_ensemble() {
            jobs.iter().map(|j| train_job(cfg, kind, j)).collect::<Result<_>>()?
        } else {
            jobs.par_iter().map(|j| train_job(cfg, kind, j)).collect::<Result<_>>()?
        };
        let train_s = start.elapsed().as_secs_f64();
        let mut files = Vec::with_capacity(results.len());
        for (model, report) in results {
            w.write(&model_path(&out, kind, model.layout), &model_json(&model)?)?;
            files.push(report);
        }
        models.push(ModelTrainReport {
            model: kind,
            files,
            timing: TrainTiming { train_s },
        });
    }
    let report = TrainReport {
        version: REPORT_VERSION,
        config: sys.name.clone(),
        grid_hash: dbs.re.provenance.grid_hash.clone(),
        models,
    };
    // merge with earlier runs that trained other variants
    let path = train_report_path(&out);
    let mut merged = read_train_report(&out).filter(|r| r.grid_hash == report.grid_hash).unwrap_or(TrainReport {
        models: Vec::new(),
        ..report.clone()
    });
    for m in &report.models {
        merged.models.retain(|old| old.model != m.model);
        merged.models.push(m.clone());
    }
    merged.models.sort_by_key(|m| m.model);
    w.write_json(&path, &merged)?;
    Ok(report)
}

pub fn read_train_report(out: &Path) -> Option<TrainReport> {
    let text = fs::read_to_string(train_report_path(out)).ok()?;
    serde_json::from_str(&text).ok()
}

// ---- prediction helpers ----

/// Loaded files of one model variant.
pub struct ModelSet {
    pub kind: ModelKind,
    pub models: Vec<TrainedModel>,
}

impl ModelSet {
    pub fn load(out: &Path, kind: ModelKind, n_modes: usize) -> Result<Self> {
        let models = model_layouts(kind, n_modes)
            .into_iter()
            .map(|layout| TrainedModel::load(&model_path(out, kind, layout)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSet { kind, models })
    }

    pub fn exists(out: &Path, kind: ModelKind, n_modes: usize) -> bool {
        model_layouts(kind, n_modes)
            .iter()
            .all(|&l| model_path(out, kind, l).exists())
    }

    /// Pole prediction: real parts and imaginary parts.
    pub fn predict_poles(&self, x: &[f64], allow: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.kind.is_pole_model() {
            return Err(Error::InvalidArgument(format!("{} does not predict poles", self.kind)));
        }
        if self.kind == ModelKind::SoDt {
            let m = self.models.len() / 2;
            let one = |i: usize| self.models[i].predict(x, allow).map(|v| v[0]);
            let re = (0..m).map(one).collect::<Result<Vec<_>>>()?;
            let im = (m..2 * m).map(one).collect::<Result<Vec<_>>>()?;
            return Ok((re, im));
        }
        Ok((self.models[0].predict(x, allow)?, self.models[1].predict(x, allow)?))
    }

    /// Participation matrix prediction (states x modes). Method II needs predicted
    /// poles.
    pub fn predict_pf(&self, x: &[f64], poles: Option<(&[f64], &[f64])>) -> Result<DMatrix<f64>> {
        let n = self.models.len();
        let mut p = DMatrix::zeros(n, n);
        if self.kind.is_method2() {
            let (re, im) = poles.ok_or_else(|| Error::InvalidArgument("per-pole PF models need pole inputs".into()))?;
            for (m, model) in self.models.iter().enumerate() {
                let col = model.predict(&method2_input(x, re[m], im[m]), false)?;
                for (k, v) in col.into_iter().enumerate() {
                    p[(k, m)] = v;
                }
            }
        } else {
            for (pv, model) in self.models.iter().enumerate() {
                let row = model.predict(x, false)?;
                for (k, v) in row.into_iter().enumerate() {
                    p[(pv, k)] = v;
                }
            }
        }
        Ok(p)
    }
}

/// Exact modal solution of a point, with modes ordered like the nearest database row.
pub fn tracked_truth(sys: &SystemConfig, re: &RegressionDB, im: &RegressionDB, x: &[f64], threshold: f64) -> Result<ModalSolution> {
    let point = FeaturePoint::for_config(sys, x.to_vec())?;
    let a = build_state_matrix(sys, &point)?;
    let mut sol = modal_analysis(&a.a, &sys.group_labels, threshold)?;
    let row = nearest_row(&re.x, x);
    let reference: Vec<Complex64> = (0..re.n_outputs())
        .map(|k| Complex64::new(re.y[(row, k)], im.y[(row, k)]))
        .collect();
    let perm = track_poles(&reference, &sol.lambdas)?;
    sol.permute(&perm);
    Ok(sol)
}

/// Row of `x` closest to `point` after scaling every feature by its range.
pub fn nearest_row(x: &DMatrix<f64>, point: &[f64]) -> usize {
    let scale: Vec<f64> = (0..x.ncols())
        .map(|j| {
            let c = x.column(j);
            let r = c.max() - c.min();
            if r > 0.0 { r } else { 1.0 }
        })
        .collect();
    (0..x.nrows())
        .map(|i| {
            let d: f64 = (0..x.ncols()).map(|j| ((x[(i, j)] - point[j]) / scale[j]).powi(2)).sum();
            (i, d)
        })
        .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
        .0
}

fn flat(p: &DMatrix<f64>) -> Vec<f64> {
    p.iter().copied().collect()
}

fn first_available(out: &Path, prefs: &[ModelKind], allowed: &[ModelKind], n_modes: usize) -> Option<ModelKind> {
    prefs
        .iter()
        .copied()
        .find(|k| allowed.contains(k) && ModelSet::exists(out, *k, n_modes))
}

// ---- evaluate ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactInstance {
    pub features: Vec<f64>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub dominant: Vec<BTreeSet<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub version: u32,
    pub config: String,
    pub grid_hash: String,
    pub feature_names: Vec<String>,
    pub dominance_threshold: f64,
    /// Pole model whose predictions feed the per-pole PF models.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method2_pole_source: Option<ModelKind>,
    pub exact: Vec<ExactInstance>,
    pub models: Vec<EvalReport>,
}

pub fn eval_report_path(out: &Path) -> PathBuf {
    reports_dir(out).join("eval_report.json")
}

struct Predictions {
    poles: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn evaluate(cfg: &RunConfig, models: &[ModelKind], allow_extrapolation: bool) -> Result<EvaluationReport> {
    let sys = cfg.validate()?;
    let out = cfg.out_path();
    let dbs = load_databases(&out, &sys, false)?;
    let m = dbs.re.n_outputs();
    let test = cfg.test_sweep(&sys)?;
    let thr = cfg.dominance_threshold;
    let exact: Vec<ModalSolution> = test
        .points
        .iter()
        .map(|p| tracked_truth(&sys, &dbs.re, &dbs.im, &p.values, thr))
        .collect::<Result<_>>()?;
    let train_report = read_train_report(&out);
    let train_s = |k: ModelKind| {
        train_report
            .as_ref()
            .and_then(|r| r.models.iter().find(|x| x.model == k))
            .map_or(0.0, |x| x.timing.train_s)
    };
    for &k in models {
        if !ModelSet::exists(&out, k, m) {
            return Err(Error::MissingFile(model_path(&out, k, model_layouts(k, m)[0])));
        }
    }

    let mut reports = Vec::new();
    let mut pole_preds: Vec<(ModelKind, Predictions)> = Vec::new();
    for &kind in models.iter().filter(|k| k.is_pole_model()) {
        let set = ModelSet::load(&out, kind, m)?;
        let t = Instant::now();
        let poles = test
            .points
            .iter()
            .map(|p| set.predict_poles(&p.values, allow_extrapolation))
            .collect::<Result<Vec<_>>>()?;
        let test_s = t.elapsed().as_secs_f64();
        let mut b = ReportBuilder::new();
        for ((p, sol), (re, im)) in test.points.iter().zip(&exact).zip(&poles) {
            let tre: Vec<f64> = sol.lambdas.iter().map(|l| l.re).collect();
            let tim: Vec<f64> = sol.lambdas.iter().map(|l| l.im).collect();
            b.add(p.values.clone(), Some((&tre, re)), Some((&tim, im)), None, None)?;
        }
        reports.push(b.finish(kind.name(), Timing { train_s: train_s(kind), test_s })?);
        pole_preds.push((kind, Predictions { poles }));
    }

    // poles for the per-pole PF models
    let mut method2_source = None;
    let mut method2_poles: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
    if models.iter().any(|k| k.is_method2()) {
        let src = POLE_PREFERENCE
            .iter()
            .copied()
            .find(|k| pole_preds.iter().any(|(p, _)| p == k))
            .or_else(|| first_available(&out, &POLE_PREFERENCE, &ModelKind::ALL, m));
        if let Some(src) = src {
            let poles = match pole_preds.iter().find(|(k, _)| *k == src) {
                Some((_, p)) => p.poles.clone(),
                None => {
                    let set = ModelSet::load(&out, src, m)?;
                    test.points
                        .iter()
                        .map(|p| set.predict_poles(&p.values, allow_extrapolation))
                        .collect::<Result<_>>()?
                }
            };
            method2_source = Some(src);
            method2_poles = Some(poles);
        } else {
            method2_poles = Some(
                exact
                    .iter()
                    .map(|s| (s.lambdas.iter().map(|l| l.re).collect(), s.lambdas.iter().map(|l| l.im).collect()))
                    .collect(),
            );
        }
    }

    let mut pf_groups: Vec<(ModelKind, Vec<Vec<String>>)> = Vec::new();
    for &kind in models.iter().filter(|k| !k.is_pole_model()) {
        let set = ModelSet::load(&out, kind, m)?;
        let t = Instant::now();
        let preds = test
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let poles = method2_poles.as_ref().map(|v| (v[i].0.as_slice(), v[i].1.as_slice()));
                set.predict_pf(&p.values, poles)
            })
            .collect::<Result<Vec<_>>>()?;
        let test_s = t.elapsed().as_secs_f64();
        let mut b = ReportBuilder::new();
        let mut leading = Vec::new();
        for ((p, sol), pred) in test.points.iter().zip(&exact).zip(&preds) {
            let groups = dominant_groups(pred, &sys.group_labels, thr)?;
            b.add(
                p.values.clone(),
                None,
                None,
                Some((&flat(&sol.p), &flat(pred))),
                Some((&sol.dominant, &groups)),
            )?;
            leading.push(leading_group(pred, &sys.group_labels));
        }
        reports.push(b.finish(kind.name(), Timing { train_s: train_s(kind), test_s })?);
        pf_groups.push((kind, leading));
    }

    let report = EvaluationReport {
        version: REPORT_VERSION,
        config: sys.name.clone(),
        grid_hash: dbs.re.provenance.grid_hash.clone(),
        feature_names: sys.feature_names(),
        dominance_threshold: thr,
        method2_pole_source: method2_source,
        exact: test
            .points
            .iter()
            .zip(&exact)
            .map(|(p, s)| ExactInstance {
                features: p.values.clone(),
                re: s.lambdas.iter().map(|l| l.re).collect(),
                im: s.lambdas.iter().map(|l| l.im).collect(),
                dominant: s.dominant.clone(),
            })
            .collect(),
        models: reports,
    };

    let mut w = Writer::default();
    let rdir = reports_dir(&out);
    w.write_json(&eval_report_path(&out), &report)?;
    w.write(&rdir.join("eval_report.txt"), render_table(&report.models).as_bytes())?;

    // modal maps: exact crosses against each pole model's circles
    let exact_leading: Vec<Vec<String>> = exact.iter().map(|s| leading_group(&s.p, &sys.group_labels)).collect();
    let pred_leading = PF_PREFERENCE
        .iter()
        .find_map(|k| pf_groups.iter().find(|(p, _)| p == k))
        .map(|(_, g)| g);
    for (kind, preds) in &pole_preds {
        let mut exact_series = Vec::new();
        let mut pred_series = Vec::new();
        for (i, sol) in exact.iter().enumerate() {
            for (k, l) in sol.lambdas.iter().enumerate() {
                let eg = Some(exact_leading[i][k].clone());
                let pg = pred_leading.map(|g| g[i][k].clone());
                exact_series.push(PoleMarker {
                    re: l.re,
                    im: l.im,
                    exact_group: eg.clone(),
                    predicted_group: None,
                });
                pred_series.push(PoleMarker {
                    re: preds.poles[i].0[k],
                    im: preds.poles[i].1[k],
                    exact_group: eg,
                    predicted_group: pg,
                });
            }
        }
        let svg = svg::modal_map(
            &format!("{}: exact vs predicted poles ({} instances)", kind, exact.len()),
            &[
                MarkerSeries {
                    label: "exact".into(),
                    shape: MarkerShape::Cross,
                    markers: exact_series,
                },
                MarkerSeries {
                    label: kind.name().into(),
                    shape: MarkerShape::Circle,
                    markers: pred_series,
                },
            ],
        );
        w.write(&rdir.join(format!("modal_map_{}.svg", kind.name())), svg.as_bytes())?;
    }
    for plot in cfg.partition_plots.iter().filter(|p| models.contains(&p.model)) {
        let (name, svg) = partition_svg(&out, &sys, plot)?;
        w.write(&rdir.join(name), svg.as_bytes())?;
    }
    Ok(report)
}

// ---- partition plots ----

fn feature_pos(names: &[String], name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown feature `{name}`")))
}

/// Renders one configured partition plot; returns the file name and the SVG text.
pub fn partition_svg(out: &Path, sys: &SystemConfig, plot: &PartitionPlot) -> Result<(String, String)> {
    if !matches!(plot.model, ModelKind::SoDt | ModelKind::MoDt | ModelKind::MoDtI | ModelKind::MoDtII) {
        return Err(Error::InvalidConfig(format!(
            "partition maps need a single-tree model, not {}",
            plot.model
        )));
    }
    let m = sys.n_states;
    let (file, column) = match plot.output.split_once(':') {
        Some((f, c)) => (f.to_string(), c.to_string()),
        None => {
            let column = plot.output.clone();
            let part = if column.starts_with("re_") {
                Part::Re
            } else if column.starts_with("im_") {
                Part::Im
            } else {
                return Err(Error::InvalidConfig(format!(
                    "output `{column}` needs the form file:column"
                )));
            };
            let file = match plot.model {
                ModelKind::SoDt => {
                    let k: usize = column[4..]
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad pole output `{column}`")))?;
                    if k == 0 || k > m {
                        return Err(Error::IndexOutOfRange { index: k, limit: m });
                    }
                    Layout::SoSlice { part, pole: k - 1 }.tag()
                }
                _ => match part {
                    Part::Re => Layout::PolesRe.tag(),
                    Part::Im => Layout::PolesIm.tag(),
                },
            };
            (file, column)
        }
    };
    let path = models_dir(out).join(plot.model.name()).join(format!("{file}.json"));
    let model = TrainedModel::load(&path)?;
    let Predictor::Tree(tree) = &model.predictor else {
        return Err(Error::InvalidConfig(format!("{} is not a single tree", path.display())));
    };
    let output = if model.output_names.len() == 1 {
        0
    } else {
        feature_pos(&model.output_names, &column)?
    };
    let fi = feature_pos(&model.feature_names, &plot.x)?;
    let fj = feature_pos(&model.feature_names, &plot.y)?;
    let regions = feature_space_partition(tree, fi, fj, plot.aggregation, output)?;
    let agg = format!("{:?}", plot.aggregation).to_lowercase();
    let title = format!("{} {}: {} over the other features", plot.model, column, agg);
    let svg = svg::partition_map(&title, &plot.x, &plot.y, &column, &regions);
    let name = format!("partition_{}_{}_{}_{}.svg", plot.model.name(), column, plot.x, plot.y);
    Ok((name, svg))
}

// ---- predict ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedPole {
    pub re: f64,
    pub im: f64,
    pub dominant: BTreeSet<String>,
    pub leading: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictTiming {
    /// Whole prediction command including model loading.
    pub predict_s: f64,
    /// Prediction with models already in memory.
    pub inference_s: f64,
    /// Build the state matrix and run the modal analysis for the same point.
    pub direct_s: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub version: u32,
    pub config: String,
    pub feature_names: Vec<String>,
    pub point: Vec<f64>,
    pub pole_model: ModelKind,
    pub pf_model: Option<ModelKind>,
    pub poles: Vec<PredictedPole>,
    pub exact: Vec<PredictedPole>,
    pub timing: PredictTiming,
}

pub fn prediction_path(out: &Path) -> PathBuf {
    predict_dir(out).join("prediction.json")
}

fn direct_solution(sys: &SystemConfig, x: &[f64], thr: f64) -> Result<ModalSolution> {
    let point = FeaturePoint::for_config(sys, x.to_vec())?;
    let a = build_state_matrix(sys, &point)?;
    modal_analysis(&a.a, &sys.group_labels, thr)
}

/// Predicts the modal map and dominant groups of one point with the best available
/// pole and PF models among `allowed`.
pub fn predict(cfg: &RunConfig, point: &[f64], allowed: &[ModelKind], allow_extrapolation: bool) -> Result<PredictionReport> {
    let sys = cfg.validate()?;
    let out = cfg.out_path();
    let m = sys.n_states;
    let thr = cfg.dominance_threshold;
    let fp = FeaturePoint::for_config(&sys, point.to_vec())?;
    sys.check_point(&fp)?;

    let start = Instant::now();
    let pole_kind = first_available(&out, &POLE_PREFERENCE, allowed, m).ok_or_else(|| {
        Error::MissingFile(models_dir(&out).join("<pole model>"))
    })?;
    let pf_kind = first_available(&out, &PF_PREFERENCE, allowed, m);
    let pole_set = ModelSet::load(&out, pole_kind, m)?;
    let pf_set = pf_kind.map(|k| ModelSet::load(&out, k, m)).transpose()?;
    let t_inf = Instant::now();
    let (re, im) = pole_set.predict_poles(point, allow_extrapolation)?;
    let pf = pf_set
        .as_ref()
        .map(|s| s.predict_pf(point, Some((&re, &im))))
        .transpose()?;
    let groups = pf.as_ref().map(|p| dominant_groups(p, &sys.group_labels, thr)).transpose()?;
    let leading = pf.as_ref().map(|p| leading_group(p, &sys.group_labels));
    let inference_s = t_inf.elapsed().as_secs_f64();
    let predict_s = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let direct = direct_solution(&sys, point, thr)?;
    let direct_s = t.elapsed().as_secs_f64();

    // exact modes in predicted-slot order, for side-by-side comparison
    let predicted: Vec<Complex64> = re.iter().zip(&im).map(|(&a, &b)| Complex64::new(a, b)).collect();
    let mut exact_sol = direct;
    let perm = track_poles(&predicted, &exact_sol.lambdas)?;
    exact_sol.permute(&perm);
    let exact_leading = leading_group(&exact_sol.p, &sys.group_labels);

    let poles: Vec<PredictedPole> = (0..m)
        .map(|k| PredictedPole {
            re: re[k],
            im: im[k],
            dominant: groups.as_ref().map(|g| g[k].clone()).unwrap_or_default(),
            leading: leading.as_ref().map(|g| g[k].clone()).unwrap_or_default(),
        })
        .collect();
    let exact: Vec<PredictedPole> = (0..m)
        .map(|k| PredictedPole {
            re: exact_sol.lambdas[k].re,
            im: exact_sol.lambdas[k].im,
            dominant: exact_sol.dominant[k].clone(),
            leading: exact_leading[k].clone(),
        })
        .collect();
    let report = PredictionReport {
        version: REPORT_VERSION,
        config: sys.name.clone(),
        feature_names: sys.feature_names(),
        point: point.to_vec(),
        pole_model: pole_kind,
        pf_model: pf_kind,
        poles,
        exact,
        timing: PredictTiming {
            predict_s,
            inference_s,
            direct_s,
            ratio: predict_s / direct_s.max(f64::MIN_POSITIVE),
        },
    };

    let mut w = Writer::default();
    w.write_json(&prediction_path(&out), &report)?;
    let marker = |p: &PredictedPole, e: &PredictedPole, predicted: bool| PoleMarker {
        re: p.re,
        im: p.im,
        exact_group: Some(e.leading.clone()),
        predicted_group: (predicted && !p.leading.is_empty()).then(|| p.leading.clone()),
    };
    let svg = svg::modal_map(
        &format!("Predicted modal map ({} + {})", pole_kind, pf_kind.map_or("exact PFs", |k| k.name())),
        &[
            MarkerSeries {
                label: "exact".into(),
                shape: MarkerShape::Cross,
                markers: report.exact.iter().map(|e| marker(e, e, false)).collect(),
            },
            MarkerSeries {
                label: "predicted".into(),
                shape: MarkerShape::Circle,
                markers: report.poles.iter().zip(&report.exact).map(|(p, e)| marker(p, e, true)).collect(),
            },
        ],
    );
    w.write(&predict_dir(&out).join("modal_map.svg"), svg.as_bytes())?;
    Ok(report)
}

// ---- map ----

/// Modal map of the whole training sweep plus the configured partition plots.
pub fn map(cfg: &RunConfig, models: &[ModelKind]) -> Result<Vec<PathBuf>> {
    let sys = cfg.validate()?;
    let out = cfg.out_path();
    let dbs = load_databases(&out, &sys, true)?;
    let pf = dbs.pf_full.as_ref().expect("requested");
    let n = sys.n_states;
    let mut markers = Vec::with_capacity(dbs.re.n_rows() * n);
    for s in 0..dbs.re.n_rows() {
        let p = DMatrix::from_fn(n, n, |i, k| pf.y[(s * n + i, k)]);
        let lead = leading_group(&p, &sys.group_labels);
        for k in 0..n {
            markers.push(PoleMarker {
                re: dbs.re.y[(s, k)],
                im: dbs.im.y[(s, k)],
                exact_group: Some(lead[k].clone()),
                predicted_group: None,
            });
        }
    }
    let mut w = Writer::default();
    let rdir = reports_dir(&out);
    let svg = svg::modal_map(
        &format!("{}: modal map of {} operating points", sys.name, dbs.re.n_rows()),
        &[MarkerSeries {
            label: "sweep".into(),
            shape: MarkerShape::Cross,
            markers,
        }],
    );
    w.write(&rdir.join("modal_map_sweep.svg"), svg.as_bytes())?;
    for plot in cfg.partition_plots.iter().filter(|p| models.contains(&p.model)) {
        let (name, svg) = partition_svg(&out, &sys, plot)?;
        w.write(&rdir.join(name), svg.as_bytes())?;
    }
    Ok(w.written)
}
