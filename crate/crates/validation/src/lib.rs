//! Helpers for end-to-end checks: timed pipeline runs and run-to-run comparison of
//! output trees with timing fields removed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use modalreg::pipeline;
use modalreg::runconfig::RunConfig;
use modalreg::Result;
use serde_json::Value;

#[derive(Clone, Debug, Default)]
pub struct StageTimes {
    pub generate_s: f64,
    pub train_s: f64,
    pub evaluate_s: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.generate_s + self.train_s + self.evaluate_s
    }
}

/// generate, train and evaluate with the configured models.
pub fn run_pipeline(cfg: &RunConfig) -> Result<StageTimes> {
    let t = Instant::now();
    pipeline::generate(cfg)?;
    let generate_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    pipeline::train(cfg)?;
    let train_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    pipeline::evaluate(cfg, &cfg.models, false)?;
    let evaluate_s = t.elapsed().as_secs_f64();
    Ok(StageTimes {
        generate_s,
        train_s,
        evaluate_s,
    })
}

/// Removes every object member named `key`, at any depth.
pub fn strip_key(v: &mut Value, key: &str) {
    match v {
        Value::Object(map) => {
            map.remove(key);
            map.values_mut().for_each(|c| strip_key(c, key));
        }
        Value::Array(items) => items.iter_mut().for_each(|c| strip_key(c, key)),
        _ => {}
    }
}

/// Text report with the two timing columns removed from every model row.
fn strip_table_timing(text: &str) -> String {
    text.lines()
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() > 3 && f[1].parse::<f64>().is_ok() && f[2].parse::<f64>().is_ok() {
                let mut kept = vec![f[0]];
                kept.extend(&f[3..]);
                kept.join(" ")
            } else {
                line.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn normalized(path: &Path) -> std::io::Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    if name.ends_with("_report.json") || name == "prediction.json" {
        if let Ok(mut v) = serde_json::from_slice::<Value>(&bytes) {
            strip_key(&mut v, "timing");
            return Ok(serde_json::to_vec(&v).expect("serializable"));
        }
    }
    if name == "eval_report.txt" {
        return Ok(strip_table_timing(&String::from_utf8_lossy(&bytes)).into_bytes());
    }
    Ok(bytes)
}

/// Relative paths of all files below `root`, sorted.
pub fn list_files(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// Files that differ between two output trees (or exist in only one), ignoring
/// timing fields.
pub fn differing_files(a: &Path, b: &Path) -> std::io::Result<Vec<PathBuf>> {
    let fa = list_files(a)?;
    let fb = list_files(b)?;
    let mut diff: Vec<PathBuf> = fa.iter().filter(|p| !fb.contains(p)).cloned().collect();
    diff.extend(fb.iter().filter(|p| !fa.contains(p)).cloned());
    for p in fa.iter().filter(|p| fb.contains(p)) {
        if normalized(&a.join(p))? != normalized(&b.join(p))? {
            diff.push(p.clone());
        }
    }
    diff.sort();
    Ok(diff)
}

/// Number of distinct vectors, comparing bit patterns.
pub fn distinct_count(rows: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    keys.sort();
    keys.dedup();
    keys.len()
}
