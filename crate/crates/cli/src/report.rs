//! `stats` text and `report` files computed from a records table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use shapebias::bias::{final_records, pair_mn_ib, training_windows};
use shapebias::corpus::{BiasRecord, ModelKind};
use shapebias::stats::{corr_t_test, kde, linspace, mean_std, paired_t_test, pearson, silverman_bandwidth, CorrTestResult};
use shapebias::{Error, Result};

use crate::svg::{line_plot, scatter_plot, Series};

pub const WINDOW_NAMES: [&str; 3] = ["start", "middle", "end"];

/// Dataset to analyse: the requested one, or the first in sorted order.
pub fn pick_dataset(records: &[BiasRecord], requested: Option<&str>) -> Result<String> {
    let mut names: Vec<&str> = records.iter().map(|r| r.dataset.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    match requested {
        Some(d) if names.contains(&d) => Ok(d.to_string()),
        Some(d) => Err(Error::Contract(format!(
            "dataset {d:?} not in records (have: {})",
            names.join(", ")
        ))),
        None => names
            .first()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Contract("records file has no rows".into())),
    }
}

pub fn format_corr(r: &CorrTestResult) -> String {
    format!("rho={:.6}\tt={:.6}\tdf={}\tp_one_tail={:.6}", r.rho, r.t, r.df, r.p_one_tail)
}

fn summary_line(label: &str, values: &[f64]) -> String {
    match mean_std(values) {
        Ok((m, s)) => format!("{label}\tn={}\tmean={m:.6}\tstd={s:.6}\tstd_kind=sample(n-1)", values.len()),
        Err(e) => format!("{label}\tn={}\tundefined\t{e}", values.len()),
    }
}

/// Bias/accuracy correlation over the final IB checkpoint of every seed.
pub fn bias_accuracy_corr(records: &[BiasRecord], dataset: &str) -> Result<CorrTestResult> {
    let finals = final_records(records, ModelKind::Ib, dataset);
    let bias: Vec<f64> = finals.iter().map(|r| r.bias).collect();
    let acc: Vec<f64> = finals.iter().map(|r| r.accuracy).collect();
    let rho = pearson(&bias, &acc)?;
    corr_t_test(rho, bias.len())
}

/// The lines printed by `stats`.
pub fn stats_lines(records: &[BiasRecord], dataset: &str) -> Vec<String> {
    let mut out = vec![format!("dataset\t{dataset}")];
    for (kind, label) in [(ModelKind::Ib, "ib_final_bias"), (ModelKind::Mn, "mn_final_bias")] {
        let v: Vec<f64> = final_records(records, kind, dataset).iter().map(|r| r.bias).collect();
        if !v.is_empty() {
            out.push(summary_line(label, &v));
        }
    }
    out.push(match bias_accuracy_corr(records, dataset) {
        Ok(r) => format!("bias_accuracy_corr\t{}", format_corr(&r)),
        Err(e) => format!("bias_accuracy_corr\tundefined\t{e}"),
    });
    let paired = pair_mn_ib(records, dataset).and_then(|pairs| {
        let mn: Vec<f64> = pairs.iter().map(|p| p.mn_bias).collect();
        let ib: Vec<f64> = pairs.iter().map(|p| p.ib_bias).collect();
        paired_t_test(&mn, &ib).map(|t| (t, pairs.len()))
    });
    out.push(match paired {
        Ok((t, n)) => format!("mn_vs_ib_paired_t\tn={n}\tt={:.6}\tdf={}\tp_two_tail={:.6}", t.t, t.df, t.p_two_tail),
        Err(e) => format!("mn_vs_ib_paired_t\tundefined\t{e}"),
    });
    out
}

#[derive(Clone, Debug, Default)]
pub struct ReportOptions {
    pub dataset: Option<String>,
    pub bandwidth: Option<f64>,
    pub kde_points: Option<usize>,
}

fn ib_series(records: &[BiasRecord], dataset: &str, value: impl Fn(&BiasRecord) -> f64) -> BTreeMap<u64, Vec<(usize, f64)>> {
    let mut by_seed: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.model_kind == ModelKind::Ib && r.dataset == dataset) {
        by_seed.entry(r.seed).or_default().push((r.step, value(r)));
    }
    for v in by_seed.values_mut() {
        v.sort_by_key(|p| p.0);
    }
    by_seed
}

fn seed_table(header: &str, by_seed: &BTreeMap<u64, Vec<(usize, f64)>>) -> String {
    let mut s = format!("seed,step,{header}\n");
    for (seed, pts) in by_seed {
        for (step, v) in pts {
            let _ = writeln!(s, "{seed},{step},{v}");
        }
    }
    s
}

fn seed_series(by_seed: &BTreeMap<u64, Vec<(usize, f64)>>) -> Vec<Series> {
    by_seed
        .iter()
        .map(|(seed, pts)| Series {
            label: format!("seed {seed}"),
            points: pts.iter().map(|&(s, v)| (s as f64, v)).collect(),
        })
        .collect()
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    written.push(path);
    Ok(())
}

/// Writes the four CSV tables and their four plots; returns the paths.
pub fn write_report(records: &[BiasRecord], out: &Path, opts: &ReportOptions) -> Result<Vec<PathBuf>> {
    let dataset = pick_dataset(records, opts.dataset.as_deref())?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let mut written = Vec::new();

    let bias = ib_series(records, &dataset, |r| r.bias);
    if bias.is_empty() {
        return Err(Error::Contract(format!("no IB records for dataset {dataset:?}")));
    }
    write(out.join("bias_vs_step.csv"), &seed_table("bias", &bias), &mut written)?;
    let svg = line_plot(&format!("IB shape bias during training ({dataset})"), "training step", "shape bias B_s", &seed_series(&bias), Some((0.0, 1.0)));
    write(out.join("bias_vs_step.svg"), &svg, &mut written)?;

    let acc = ib_series(records, &dataset, |r| r.accuracy);
    write(out.join("accuracy_vs_step.csv"), &seed_table("accuracy", &acc), &mut written)?;
    let svg = line_plot("Embedder test accuracy during training", "training step", "accuracy", &seed_series(&acc), Some((0.0, 1.0)));
    write(out.join("accuracy_vs_step.svg"), &svg, &mut written)?;

    let steps: Vec<usize> = bias.values().flat_map(|v| v.iter().map(|p| p.0)).collect();
    let windows = training_windows(&steps)?;
    let grid = linspace(-0.25, 1.25, opts.kde_points.unwrap_or(301));
    let mut table = String::from("window,bandwidth,x,density\n");
    let mut series = Vec::new();
    for (name, steps) in WINDOW_NAMES.iter().zip(&windows) {
        let values: Vec<f64> = bias
            .values()
            .flat_map(|v| v.iter().filter(|p| steps.contains(&p.0)).map(|p| p.1))
            .collect();
        let h = match opts.bandwidth {
            Some(h) => h,
            None => silverman_bandwidth(&values)?,
        };
        let d = kde(&values, &grid, Some(h))?;
        for (x, y) in d.grid.iter().zip(&d.density) {
            let _ = writeln!(table, "{name},{h},{x},{y}");
        }
        series.push(Series {
            label: format!("{name} (steps {}-{})", steps[0], steps[steps.len() - 1]),
            points: d.grid.iter().copied().zip(d.density.iter().copied()).collect(),
        });
    }
    write(out.join("bias_kde.csv"), &table, &mut written)?;
    let svg = line_plot("Shape bias density by training window", "shape bias B_s", "density", &series, None);
    write(out.join("bias_kde.svg"), &svg, &mut written)?;

    let pairs = if records.iter().any(|r| r.model_kind == ModelKind::Mn && r.dataset == dataset) {
        pair_mn_ib(records, &dataset)?
    } else {
        Vec::new()
    };
    let mut table = String::from("embedder_seed,mn_seed,ib_bias,mn_bias\n");
    for p in &pairs {
        let _ = writeln!(table, "{},{},{},{}", p.embedder_seed, p.mn_seed, p.ib_bias, p.mn_bias);
    }
    write(out.join("mn_vs_ib.csv"), &table, &mut written)?;
    let pts: Vec<(f64, f64)> = pairs.iter().map(|p| (p.ib_bias, p.mn_bias)).collect();
    let svg = scatter_plot("MN bias vs. bias of its embedder (IB)", "IB shape bias", "MN shape bias", &pts, (0.0, 1.0));
    write(out.join("mn_vs_ib.svg"), &svg, &mut written)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(kind: ModelKind, seed: u64, step: usize, bias: f64, accuracy: f64) -> BiasRecord {
        BiasRecord { model_kind: kind, seed, step, dataset: "synthetic".into(), bias, accuracy }
    }

    fn population() -> Vec<BiasRecord> {
        let mut v = Vec::new();
        for s in 0..4u64 {
            for step in [0, 10, 20] {
                v.push(rec(ModelKind::Ib, s, step, 0.1 * s as f64 + step as f64 / 100.0, 0.5 + 0.03 * (s * s) as f64 + step as f64 / 100.0));
            }
            for j in 0..2 {
                v.push(rec(ModelKind::Mn, s * 1000 + j, 0, 0.3, 0.5));
                v.push(rec(ModelKind::Mn, s * 1000 + j, 5, 0.1 * s as f64 + 0.2, 0.6));
            }
        }
        v
    }

    #[test]
    fn identical_biases_give_zero_paired_t() {
        let mut v = population();
        for r in v.iter_mut().filter(|r| r.model_kind == ModelKind::Mn && r.step == 5) {
            r.bias = 0.1 * (r.seed / 1000) as f64 + 0.2;
        }
        let lines = stats_lines(&v, "synthetic");
        assert!(lines.iter().any(|l| l.starts_with("mn_vs_ib_paired_t\tn=8\tt=0.000000\tdf=7\tp_two_tail=1.000000")), "{lines:?}");
    }

    #[test]
    fn correlation_line_is_the_library_result() {
        let v = population();
        let lines = stats_lines(&v, "synthetic");
        let expected = format!("bias_accuracy_corr\t{}", format_corr(&bias_accuracy_corr(&v, "synthetic").unwrap()));
        assert!(lines.contains(&expected));
        let finals = final_records(&v, ModelKind::Ib, "synthetic");
        let b: Vec<f64> = finals.iter().map(|r| r.bias).collect();
        let a: Vec<f64> = finals.iter().map(|r| r.accuracy).collect();
        let direct = corr_t_test(pearson(&b, &a).unwrap(), 4).unwrap();
        assert!(lines.contains(&format!("bias_accuracy_corr\t{}", format_corr(&direct))));
    }

    #[test]
    fn report_writes_four_plots_and_four_tables() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&population(), dir.path(), &ReportOptions::default()).unwrap();
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "svg").count(), 4);
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "csv").count(), 4);
        let pairs = std::fs::read_to_string(dir.path().join("mn_vs_ib.csv")).unwrap();
        assert_eq!(pairs.lines().count(), 9);
        assert!(write_report(&population(), dir.path(), &ReportOptions { dataset: Some("nope".into()), ..Default::default() }).is_err());
    }
}
