//! Error and classification metrics, and the evaluation report.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_len(a: usize, b: usize, context: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            got: b,
            context,
        });
    }
    Ok(())
}

/// Wave Hedges error: mean of `|t - p| / max(|t|, |p|)`, where a component with both
/// values zero contributes zero.
pub fn whe(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    same_len(y_true.len(), y_pred.len(), "whe operands")?;
    if y_true.is_empty() {
        return Err(Error::EmptyInput("whe operands"));
    }
    let sum: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(&t, &p)| {
            let den = t.abs().max(p.abs());
            if den == 0.0 {
                0.0
            } else {
                (t - p).abs() / den
            }
        })
        .sum();
    Ok(sum / y_true.len() as f64)
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    same_len(y_true.len(), y_pred.len(), "mae operands")?;
    if y_true.is_empty() {
        return Err(Error::EmptyInput("mae operands"));
    }
    Ok(y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / y_true.len() as f64)
}

/// Number of poles whose predicted dominant-group set differs from the true one.
pub fn misclassified_count(truth: &[BTreeSet<String>], pred: &[BTreeSet<String>]) -> Result<usize> {
    same_len(truth.len(), pred.len(), "dominant-group lists")?;
    Ok(truth.iter().zip(pred).filter(|(a, b)| a != b).count())
}

pub fn misclassification(truth: &[BTreeSet<String>], pred: &[BTreeSet<String>]) -> Result<f64> {
    let n = misclassified_count(truth, pred)?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("dominant-group lists"));
    }
    Ok(n as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_s: f64,
    pub test_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub features: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub whe_re: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub whe_im: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mae_pf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub misclassified: Option<usize>,
    /// Predicted pole coordinates (real parts then imaginary parts) when available.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted_poles: Option<Vec<f64>>,
}

/// Scores of one model over all test instances. Averages are taken over the flattened
/// instance-by-pole matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub whe_re: Option<f64>,
    pub whe_im: Option<f64>,
    pub mae_pf: Option<f64>,
    pub misclassified_fraction: Option<f64>,
    pub misclassified_poles: Option<usize>,
    pub total_poles: usize,
    pub instances: Vec<InstanceResult>,
    pub timing: Timing,
}

/// Accumulates per-instance results into an [`EvalReport`].
#[derive(Debug, Default)]
pub struct ReportBuilder {
    re: (Vec<f64>, Vec<f64>),
    im: (Vec<f64>, Vec<f64>),
    pf: (Vec<f64>, Vec<f64>),
    wrong: Option<usize>,
    poles: usize,
    instances: Vec<InstanceResult>,
}

impl ReportBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one instance. Pole pairs are `(truth, prediction)`; PF pairs likewise, and
    /// `groups` are the true and predicted dominant-group sets per pole.
    pub fn add(
        &mut self,
        features: Vec<f64>,
        re: Option<(&[f64], &[f64])>,
        im: Option<(&[f64], &[f64])>,
        pf: Option<(&[f64], &[f64])>,
        groups: Option<(&[BTreeSet<String>], &[BTreeSet<String>])>,
    ) -> Result<()> {
        let mut r = InstanceResult {
            features,
            whe_re: None,
            whe_im: None,
            mae_pf: None,
            misclassified: None,
            predicted_poles: None,
        };
        if let Some((t, p)) = re {
            r.whe_re = Some(whe(t, p)?);
            self.re.0.extend_from_slice(t);
            self.re.1.extend_from_slice(p);
        }
        if let Some((t, p)) = im {
            r.whe_im = Some(whe(t, p)?);
            self.im.0.extend_from_slice(t);
            self.im.1.extend_from_slice(p);
        }
        if let (Some((_, pr)), Some((_, pi))) = (re, im) {
            r.predicted_poles = Some(pr.iter().chain(pi).copied().collect());
        }
        if let Some((t, p)) = pf {
            r.mae_pf = Some(mae(t, p)?);
            self.pf.0.extend_from_slice(t);
            self.pf.1.extend_from_slice(p);
        }
        if let Some((t, p)) = groups {
            let n = misclassified_count(t, p)?;
            r.misclassified = Some(n);
            *self.wrong.get_or_insert(0) += n;
            self.poles += t.len();
        }
        self.instances.push(r);
        Ok(())
    }

    pub fn finish(self, model: &str, timing: Timing) -> Result<EvalReport> {
        let avg = |(t, p): &(Vec<f64>, Vec<f64>), f: fn(&[f64], &[f64]) -> Result<f64>| {
            if t.is_empty() {
                Ok(None)
            } else {
                f(t, p).map(Some)
            }
        };
        let total_poles = if self.poles > 0 {
            self.poles
        } else {
            self.re.0.len()
        };
        Ok(EvalReport {
            model: model.to_string(),
            whe_re: avg(&self.re, whe)?,
            whe_im: avg(&self.im, whe)?,
            mae_pf: avg(&self.pf, mae)?,
            misclassified_fraction: self
                .wrong
                .filter(|_| self.poles > 0)
                .map(|w| w as f64 / self.poles as f64),
            misclassified_poles: self.wrong,
            total_poles,
            instances: self.instances,
            timing,
        })
    }
}

impl EvalReport {
    /// Mean of the real and imaginary WHE, when both exist.
    pub fn pole_whe(&self) -> Option<f64> {
        Some(0.5 * (self.whe_re? + self.whe_im?))
    }
}

fn cell(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"))
}

/// Plain-text table with one row per model.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = [
        "Model",
        "Train [s]",
        "Test [s]",
        "WHE re",
        "WHE im",
        "MAE PF",
        "Misclassified",
    ];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                format!("{:.3}", r.timing.train_s),
                format!("{:.4}", r.timing.test_s),
                cell(r.whe_re, 5),
                cell(r.whe_im, 5),
                cell(r.mae_pf, 5),
                match (r.misclassified_poles, r.misclassified_fraction) {
                    (Some(n), Some(f)) => format!("{n}/{} ({:.2}%)", r.total_poles, 100.0 * f),
                    _ => "-".into(),
                },
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn whe_examples() {
        assert_eq!(whe(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(whe(&[1.0], &[2.0]).unwrap(), 0.5);
        assert_eq!(whe(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(whe(&[1.0], &[-1.0]).unwrap(), 2.0);
        let a = [0.3, -4.0, 2.5];
        let b: Vec<f64> = a.iter().map(|v| v * 4.0).collect();
        assert!((whe(&a, &b).unwrap() - 0.75).abs() < 1e-15);
        assert!(whe(&[1.0], &[1.0, 2.0]).is_err());
        assert!(whe(&[], &[]).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!((mae(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!(mae(&[1.0], &[]).is_err());
    }

    #[test]
    fn misclassification_counting() {
        let t: Vec<_> = (0..22).map(|_| set(&["SG mechanics"])).collect();
        let mut p = t.clone();
        assert_eq!(misclassification(&t, &p).unwrap(), 0.0);
        p[5] = set(&["SG mechanics", "VSC controllers"]);
        assert!((misclassification(&t, &p).unwrap() - 1.0 / 22.0).abs() < 1e-15);
        assert!(misclassification(&t, &p[..3]).is_err());
    }

    #[test]
    fn report_flattens_instances() {
        let mut b = ReportBuilder::new();
        b.add(vec![0.0], Some((&[1.0, 1.0], &[2.0, 1.0])), Some((&[1.0, 1.0], &[1.0, 1.0])), None, None)
            .unwrap();
        b.add(vec![1.0], Some((&[1.0, 1.0], &[1.0, 1.0])), Some((&[1.0, 1.0], &[1.0, 1.0])), None, None)
            .unwrap();
        let r = b.finish("MO-DT", Timing::default()).unwrap();
        assert_eq!(r.whe_re, Some(0.125));
        assert_eq!(r.whe_im, Some(0.0));
        assert_eq!(r.misclassified_fraction, None);
        assert_eq!(r.instances[0].whe_re, Some(0.25));
        let table = render_table(&[r]);
        assert!(table.lines().count() == 3 && table.contains("MO-DT"));
    }

    #[test]
    fn report_misclassified_fraction() {
        let t = vec![set(&["a"]), set(&["b"])];
        let p = vec![set(&["a"]), set(&["a"])];
        let mut b = ReportBuilder::new();
        b.add(vec![], None, None, Some((&[0.5, 1.0], &[0.5, 0.0])), Some((&t, &p))).unwrap();
        b.add(vec![], None, None, Some((&[0.5, 1.0], &[0.5, 1.0])), Some((&t, &t))).unwrap();
        let r = b.finish("MO-DT-I", Timing::default()).unwrap();
        assert_eq!(r.misclassified_fraction, Some(0.25));
        assert_eq!(r.mae_pf, Some(0.25));
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
