use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::pipeline::RunRecord;
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::evalkit::{EmbeddingDump, MetricReport};

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Mean and unbiased standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn axis_of(r: &RunRecord) -> (String, String) {
    r.axis
        .as_ref()
        .map(|a| (a.axis.clone(), a.value.clone()))
        .unwrap_or_else(|| ("none".into(), String::new()))
}

/// One row per (record, method): `axis,value,seed,method,<metrics>,runtime_s`.
pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("axis,value,seed,method");
    for m in MetricReport::METRICS {
        s.push(',');
        s.push_str(m);
    }
    s.push_str(",runtime_s\n");
    for r in records {
        let (axis, value) = axis_of(r);
        for (method, rep) in &r.reports {
            let _ = write!(s, "{axis},{value},{},{method}", r.seed);
            for m in MetricReport::METRICS {
                let _ = write!(s, ",{}", fmt_opt(rep.metric(m)));
            }
            let _ = writeln!(s, ",{:.3}", r.phase_seconds.total());
        }
    }
    s
}

type CellKey = (String, String, String);

/// Per (axis, value, method) metric values across seeds, in first-seen order.
pub fn group_metrics(records: &[RunRecord]) -> Vec<(CellKey, BTreeMap<&'static str, Vec<f64>>)> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut cells: BTreeMap<CellKey, BTreeMap<&'static str, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let (axis, value) = axis_of(r);
        for (method, rep) in &r.reports {
            let key = (axis.clone(), value.clone(), method.clone());
            if !cells.contains_key(&key) {
                order.push(key.clone());
            }
            let cell = cells.entry(key).or_default();
            for m in MetricReport::METRICS {
                if let Some(v) = rep.metric(m) {
                    cell.entry(m).or_default().push(v);
                }
            }
        }
    }
    order
        .into_iter()
        .map(|k| {
            let v = cells.remove(&k).unwrap_or_default();
            (k, v)
        })
        .collect()
}

/// Method × metric table with mean and unbiased std across seeds.
pub fn table_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("axis,value,method,n");
    for m in MetricReport::METRICS {
        let _ = write!(s, ",{m}_mean,{m}_std");
    }
    s.push('\n');
    for ((axis, value, method), metrics) in group_metrics(records) {
        let n = metrics.values().map(Vec::len).max().unwrap_or(0);
        let _ = write!(s, "{axis},{value},{method},{n}");
        for m in MetricReport::METRICS {
            match metrics.get(m) {
                Some(vals) => {
                    let (mean, std) = mean_std(vals);
                    let _ = write!(s, ",{mean:.6},{std:.6}");
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Line plot of `metric` against the ablation value, one line per method,
/// with a ±1 std band.
pub fn plot_axis(records: &[RunRecord], axis: &str, metric: &str, path: &Path) -> Result<()> {
    let groups: Vec<_> = group_metrics(records)
        .into_iter()
        .filter(|((a, _, _), _)| a == axis)
        .collect();
    let mut values: Vec<String> = Vec::new();
    for ((_, v, _), _) in &groups {
        if !values.contains(v) {
            values.push(v.clone());
        }
    }
    let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
    let x_of = |v: &str| -> f64 {
        match &numeric {
            Some(_) => v.parse().unwrap_or(0.0),
            None => values.iter().position(|x| x == v).unwrap_or(0) as f64,
        }
    };
    let mut series: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for ((_, v, method), metrics) in &groups {
        if let Some(vals) = metrics.get(metric) {
            let (m, s) = mean_std(vals);
            series
                .entry(method.clone())
                .or_default()
                .push((x_of(v), m, s));
        }
    }
    if series.is_empty() {
        return Ok(());
    }
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    let lo_y = series
        .values()
        .flatten()
        .map(|p| p.1 - p.2)
        .fold(f64::INFINITY, f64::min);
    let hi_y = series
        .values()
        .flatten()
        .map(|p| p.1 + p.2)
        .fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let pad_x = ((x1 - x0) * 0.05).max(0.5);
    let pad_y = ((hi_y - lo_y) * 0.1).max(1e-3);
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{metric} vs {axis}"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d((x0 - pad_x)..(x1 + pad_x), (lo_y - pad_y)..(hi_y + pad_y))?;
        let labels = values.clone();
        let categorical = numeric.is_none();
        chart
            .configure_mesh()
            .x_desc(axis)
            .y_desc(metric)
            .x_label_formatter(&|x| {
                if categorical {
                    let i = x.round();
                    if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                        return labels[i as usize].clone();
                    }
                    return String::new();
                }
                format!("{x}")
            })
            .draw()?;
        for (k, (method, mut pts)) in series.clone().into_iter().enumerate() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let color = Palette99::pick(k).to_rgba();
            let mut band: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1 + p.2)).collect();
            band.extend(pts.iter().rev().map(|p| (p.0, p.1 - p.2)));
            chart.draw_series(std::iter::once(Polygon::new(
                band,
                color.mix(0.15).filled(),
            )))?;
            chart
                .draw_series(LineSeries::new(
                    pts.iter().map(|p| (p.0, p.1)),
                    color.stroke_width(2),
                ))?
                .label(method)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(
                pts.iter()
                    .map(|p| Circle::new((p.0, p.1), 3, color.filled())),
            )?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `summary.csv`, `table.csv`, `records.json`, per-record training
/// curves and one plot per ablation axis. Returns the written paths.
pub fn emit_report(records: &[RunRecord], out: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Empty("records to report"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: &str| -> Result<()> {
        let p = out.join(name);
        write(&p, text)?;
        written.push(p);
        Ok(())
    };
    put("summary.csv", &summary_csv(records))?;
    put("table.csv", &table_csv(records))?;
    let json =
        serde_json::to_string_pretty(records).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    put("records.json", &json)?;
    let mut axes: Vec<String> = records
        .iter()
        .filter_map(|r| r.axis.as_ref().map(|a| a.axis.clone()))
        .collect();
    axes.sort();
    axes.dedup();
    for axis in axes {
        for metric in ["accuracy", "macro_f1", "pearson_r"] {
            let any = records
                .iter()
                .any(|r| r.reports.values().any(|rep| rep.metric(metric).is_some()));
            if !any {
                continue;
            }
            let p = out.join(format!("ablation_{axis}_{metric}.svg"));
            plot_axis(records, &axis, metric, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Top-two principal directions of the rows of `m` (power iteration with
/// deflation on the covariance).
pub fn pca_2d(m: &Mat) -> Mat {
    let n = m.nrows();
    let d = m.ncols();
    if n == 0 || d == 0 {
        return Mat::zeros((n, 2));
    }
    let mean = m.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = m - &mean.insert_axis(ndarray::Axis(0));
    let mut cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let mut comps = Mat::zeros((d, 2));
    for k in 0..2.min(d) {
        let mut v = ndarray::Array1::from_shape_fn(d, |i| 1.0 + (i as f64 + k as f64) * 0.01);
        for _ in 0..500 {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                break;
            }
            v = w / norm;
        }
        let lambda = v.dot(&cov.dot(&v));
        let outer = v
            .clone()
            .insert_axis(ndarray::Axis(1))
            .dot(&v.clone().insert_axis(ndarray::Axis(0)));
        cov = cov - outer * lambda;
        comps.column_mut(k).assign(&v);
    }
    centered.dot(&comps)
}

/// CSV with one row per scored sample: both feature sets projected onto the
/// principal axes of their union.
pub fn embeddings_csv(dump: &EmbeddingDump) -> String {
    let joint = ndarray::concatenate![ndarray::Axis(0), dump.unadapted, dump.adapted];
    let proj = pca_2d(&joint);
    let n = dump.domain_ids.len();
    let mut s = String::from("domain_id,label,unadapted_x,unadapted_y,adapted_x,adapted_y\n");
    for i in 0..n {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            dump.domain_ids[i],
            dump.labels[i],
            proj[[i, 0]],
            proj[[i, 1]],
            proj[[n + i, 0]],
            proj[[n + i, 1]]
        );
    }
    s
}
