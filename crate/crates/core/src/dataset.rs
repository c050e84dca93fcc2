//! Regression databases assembled from sweep results, their SO/MO and PF views, the
//! validation split and CSV persistence.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{modal_analysis, track_poles, ModeSummary};
use crate::error::{Error, Result};
use crate::sysmodel::{build_state_matrix, FeaturePoint, Sweep, SystemConfig};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Re,
    Im,
}

/// Which view of the modal data a database holds. Indices are 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    PolesRe,
    PolesIm,
    PfFull,
    PfMethod1 { pv: usize },
    PfMethod2 { pole: usize },
    SoSlice { part: Part, pole: usize },
}

impl Layout {
    /// File-name tag; user-facing indices are 1-based.
    pub fn tag(&self) -> String {
        match self {
            Layout::PolesRe => "poles_re".into(),
            Layout::PolesIm => "poles_im".into(),
            Layout::PfFull => "pf_full".into(),
            Layout::PfMethod1 { pv } => format!("pf_method1_pv{}", pv + 1),
            Layout::PfMethod2 { pole } => format!("pf_method2_pole{}", pole + 1),
            Layout::SoSlice { part: Part::Re, pole } => format!("so_re_pole{}", pole + 1),
            Layout::SoSlice { part: Part::Im, pole } => format!("so_im_pole{}", pole + 1),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: String,
    pub grid_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionDB {
    pub layout: Layout,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub output_names: Vec<String>,
    pub provenance: Provenance,
}

impl RegressionDB {
    pub fn new(
        layout: Layout,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        feature_names: Vec<String>,
        output_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.nrows(),
                context: "x and y row counts",
            });
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                got: feature_names.len(),
                context: "feature names",
            });
        }
        if output_names.len() != y.ncols() {
            return Err(Error::DimensionMismatch {
                expected: y.ncols(),
                got: output_names.len(),
                context: "output names",
            });
        }
        Ok(RegressionDB {
            layout,
            x,
            y,
            feature_names,
            output_names,
            provenance,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.y.ncols()
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn y_row(&self, i: usize) -> Vec<f64> {
        self.y.row(i).iter().copied().collect()
    }

    /// Sub-database with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> RegressionDB {
        RegressionDB {
            layout: self.layout,
            x: DMatrix::from_fn(rows.len(), self.x.ncols(), |i, j| self.x[(rows[i], j)]),
            y: DMatrix::from_fn(rows.len(), self.y.ncols(), |i, j| self.y[(rows[i], j)]),
            feature_names: self.feature_names.clone(),
            output_names: self.output_names.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Solves every sweep point (in parallel) and returns the per-point modal summaries,
/// still in solver (sorted) order.
pub fn solve_sweep(config: &SystemConfig, sweep: &Sweep, threshold: f64) -> Result<Vec<ModeSummary>> {
    sweep
        .points
        .par_iter()
        .enumerate()
        .map(|(index, point)| {
            let solve = || -> Result<ModeSummary> {
                let sm = build_state_matrix(config, point)?;
                Ok(modal_analysis(&sm.a, &config.group_labels, threshold)?.summary())
            };
            solve().map_err(|e| Error::AtPoint {
                index,
                point: describe_point(point),
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn describe_point(point: &FeaturePoint) -> String {
    point
        .names
        .iter()
        .zip(&point.values)
        .map(|(n, v)| format!("{n}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Reorders the modes of every point so that column `m` follows one physical mode
/// across the grid. Each point is matched against its already aligned grid
/// predecessor, which is a single axis step away.
pub fn align_sweep(sweep: &Sweep, summaries: &mut [ModeSummary]) -> Result<()> {
    if summaries.len() != sweep.len() {
        return Err(Error::DimensionMismatch {
            expected: sweep.len(),
            got: summaries.len(),
            context: "one modal solution per sweep point",
        });
    }
    for i in 1..summaries.len() {
        let prev = sweep.predecessor(i).expect("only the first point lacks a predecessor");
        debug_assert!(prev < i);
        let perm = track_poles(&summaries[prev].lambdas, &summaries[i].lambdas)?;
        summaries[i].permute(&perm);
    }
    Ok(())
}

pub fn pole_names(part: Part, m: usize) -> Vec<String> {
    let tag = match part {
        Part::Re => "re",
        Part::Im => "im",
    };
    (1..=m).map(|k| format!("{tag}_l{k}")).collect()
}

pub fn pf_pole_names(m: usize) -> Vec<String> {
    (1..=m).map(|k| format!("pf_l{k}")).collect()
}

pub fn pf_pv_names(n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("pf_x{k}")).collect()
}

/// The three base databases: pole real parts, pole imaginary parts, and the stacked
/// participation matrices (rows grouped by simulation, then state).
#[derive(Clone, Debug, PartialEq)]
pub struct Assembled {
    pub re: RegressionDB,
    pub im: RegressionDB,
    pub pf_full: RegressionDB,
}

/// Builds the databases from aligned solutions, keeping sweep order.
pub fn assemble(solutions: &[(FeaturePoint, ModeSummary)], provenance: Provenance) -> Result<Assembled> {
    let (first_point, first) = solutions.first().ok_or(Error::EmptyInput("solutions"))?;
    let ns = solutions.len();
    let nf = first_point.len();
    let m = first.n_modes();
    let n = first.p.nrows();
    if first.p.ncols() != m || n != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: first.p.ncols().min(n),
            context: "square participation matrix",
        });
    }
    for (point, sol) in solutions {
        if sol.n_modes() != m || sol.p.nrows() != n || sol.p.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: sol.n_modes(),
                context: "mode count across solutions",
            });
        }
        if point.len() != nf || point.names != first_point.names {
            return Err(Error::DimensionMismatch {
                expected: nf,
                got: point.len(),
                context: "feature vector across solutions",
            });
        }
    }
    let names = first_point.names.clone();
    let x = DMatrix::from_fn(ns, nf, |s, f| solutions[s].0.values[f]);
    let re = DMatrix::from_fn(ns, m, |s, k| solutions[s].1.lambdas[k].re);
    let im = DMatrix::from_fn(ns, m, |s, k| solutions[s].1.lambdas[k].im);
    let pf_x = DMatrix::from_fn(ns * n, nf, |r, f| solutions[r / n].0.values[f]);
    let pf_y = DMatrix::from_fn(ns * n, m, |r, k| solutions[r / n].1.p[(r % n, k)]);

    let out = Assembled {
        re: RegressionDB::new(Layout::PolesRe, x.clone(), re, names.clone(), pole_names(Part::Re, m), provenance.clone())?,
        im: RegressionDB::new(Layout::PolesIm, x, im, names.clone(), pole_names(Part::Im, m), provenance.clone())?,
        pf_full: RegressionDB::new(Layout::PfFull, pf_x, pf_y, names, pf_pole_names(m), provenance)?,
    };
    debug_assert_eq!(out.pf_full.n_rows(), ns * n);
    Ok(out)
}

/// Single-output slice: pole `m` (0-based) of a pole database.
pub fn to_single_output(db: &RegressionDB, m: usize) -> Result<RegressionDB> {
    let part = match db.layout {
        Layout::PolesRe => Part::Re,
        Layout::PolesIm => Part::Im,
        other => {
            return Err(Error::InvalidArgument(format!(
                "single-output slices need a pole database, got {other}"
            )))
        }
    };
    if m >= db.n_outputs() {
        return Err(Error::IndexOutOfRange {
            index: m,
            limit: db.n_outputs(),
        });
    }
    RegressionDB::new(
        Layout::SoSlice { part, pole: m },
        db.x.clone(),
        db.y.columns(m, 1).into_owned(),
        db.feature_names.clone(),
        vec![db.output_names[m].clone()],
        db.provenance.clone(),
    )
}

fn check_pf_full(db: &RegressionDB) -> Result<()> {
    if db.layout != Layout::PfFull {
        return Err(Error::InvalidArgument(format!(
            "expected the full participation database, got {}",
            db.layout
        )));
    }
    Ok(())
}

/// Number of states (rows per simulation) in a full PF database.
pub fn pf_states(db: &RegressionDB) -> usize {
    db.n_outputs()
}

/// Method I view: the participation of state `pv` (0-based) in all modes.
pub fn pf_method1(pf_full: &RegressionDB, pv: usize) -> Result<RegressionDB> {
    check_pf_full(pf_full)?;
    let n = pf_states(pf_full);
    if pv >= n {
        return Err(Error::IndexOutOfRange { index: pv, limit: n });
    }
    let ns = pf_full.n_rows() / n;
    RegressionDB::new(
        Layout::PfMethod1 { pv },
        DMatrix::from_fn(ns, pf_full.n_features(), |s, f| pf_full.x[(s * n + pv, f)]),
        DMatrix::from_fn(ns, n, |s, k| pf_full.y[(s * n + pv, k)]),
        pf_full.feature_names.clone(),
        pf_full.output_names.clone(),
        pf_full.provenance.clone(),
    )
}

/// Method II inputs for one pole: features followed by the pole's real and imaginary
/// parts.
pub fn method2_input(features: &[f64], re: f64, im: f64) -> Vec<f64> {
    let mut v = features.to_vec();
    v.push(re);
    v.push(im);
    v
}

pub fn method2_feature_names(feature_names: &[String]) -> Vec<String> {
    let mut names = feature_names.to_vec();
    names.push("pole_re".into());
    names.push("pole_im".into());
    names
}

/// Method II view: the participation of all states in pole `m` (0-based), with the
/// pole itself appended to the inputs.
pub fn pf_method2(pf_full: &RegressionDB, re: &RegressionDB, im: &RegressionDB, m: usize) -> Result<RegressionDB> {
    check_pf_full(pf_full)?;
    let n = pf_states(pf_full);
    if m >= n {
        return Err(Error::IndexOutOfRange { index: m, limit: n });
    }
    let ns = re.n_rows();
    if im.n_rows() != ns || pf_full.n_rows() != ns * n || re.n_outputs() != n || im.n_outputs() != n {
        return Err(Error::DimensionMismatch {
            expected: ns * n,
            got: pf_full.n_rows(),
            context: "PF rows vs pole database rows",
        });
    }
    let nf = re.n_features();
    let x = DMatrix::from_fn(ns, nf + 2, |s, f| match f {
        _ if f < nf => re.x[(s, f)],
        _ if f == nf => re.y[(s, m)],
        _ => im.y[(s, m)],
    });
    let y = DMatrix::from_fn(ns, n, |s, k| pf_full.y[(s * n + k, m)]);
    RegressionDB::new(
        Layout::PfMethod2 { pole: m },
        x,
        y,
        method2_feature_names(&re.feature_names),
        pf_pv_names(n),
        re.provenance.clone(),
    )
}

/// Seeded row partition: the first `round(fraction * n)` rows of a shuffled index list
/// train, the rest validate.
pub fn split_indices(n_rows: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "training fraction {fraction} must lie strictly between 0 and 1"
        )));
    }
    if n_rows < 2 {
        return Err(Error::EmptyInput("split needs at least two rows"));
    }
    let mut idx: Vec<usize> = (0..n_rows).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n_rows as f64 * fraction).round() as usize).clamp(1, n_rows - 1);
    let validate = idx.split_off(n_train);
    Ok((idx, validate))
}

pub fn split_train_validate(db: &RegressionDB, fraction: f64, seed: u64) -> Result<(RegressionDB, RegressionDB)> {
    let (train, validate) = split_indices(db.n_rows(), fraction, seed)?;
    Ok((db.select_rows(&train), db.select_rows(&validate)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    layout: Layout,
    provenance: Provenance,
    n_rows: usize,
    n_features: usize,
    n_outputs: usize,
    feature_names: Vec<String>,
    output_names: Vec<String>,
}

/// `{config}_{layout}` file stem.
pub fn file_stem(config: &str, layout: Layout) -> String {
    format!("{config}_{}", layout.tag())
}

pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the CSV payload at `path` and the JSON manifest next to it.
pub fn save(db: &RegressionDB, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<&str> = db
        .feature_names
        .iter()
        .chain(&db.output_names)
        .map(String::as_str)
        .collect();
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..db.n_rows() {
        record.clear();
        for v in db.x.row(i).iter().chain(db.y.row(i).iter()) {
            // Debug formatting is the shortest decimal that parses back bit-exactly
            record.push(format!("{v:?}"));
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        layout: db.layout,
        provenance: db.provenance.clone(),
        n_rows: db.n_rows(),
        n_features: db.n_features(),
        n_outputs: db.n_outputs(),
        feature_names: db.feature_names.clone(),
        output_names: db.output_names.clone(),
    };
    let mpath = manifest_path(path);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
}

pub fn load(path: &Path) -> Result<RegressionDB> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mismatch = |reason: String| Error::Manifest {
        path: mpath.clone(),
        reason,
    };
    if manifest.version != MANIFEST_VERSION {
        return Err(mismatch(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.feature_names.len() != manifest.n_features || manifest.output_names.len() != manifest.n_outputs {
        return Err(mismatch("name lists disagree with declared shape".into()));
    }

    let malformed = |reason: String| Error::MalformedCsv {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let width = manifest.n_features + manifest.n_outputs;
    if header.len() != width {
        return Err(mismatch(format!("CSV has {} columns, manifest declares {width}", header.len())));
    }
    let expected: Vec<&String> = manifest.feature_names.iter().chain(&manifest.output_names).collect();
    if header.iter().zip(&expected).any(|(a, b)| a != *b) {
        return Err(mismatch("CSV header does not match manifest names".into()));
    }
    let mut data = Vec::with_capacity(manifest.n_rows * width);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != width {
            return Err(malformed(format!("row {rows} has {} fields, expected {width}", rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| malformed(format!("row {rows}: `{field}` is not a number")))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows != manifest.n_rows {
        return Err(mismatch(format!("CSV has {rows} rows, manifest declares {}", manifest.n_rows)));
    }
    let all = DMatrix::from_row_slice(rows, width, &data);
    RegressionDB::new(
        manifest.layout,
        all.columns(0, manifest.n_features).into_owned(),
        all.columns(manifest.n_features, manifest.n_outputs).into_owned(),
        manifest.feature_names,
        manifest.output_names,
        manifest.provenance,
    )
}
