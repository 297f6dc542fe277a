//! Rollups derived purely from run records: per-class summary, the
//! domains-by-rounds table with gain over the source model, per-class
//! bars, sweep tables and the threshold/usage correlation, each as CSV,
//! plus SVG charts and a markdown digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adapt::{summarize, threshold_reports, CellSummary, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::{threshold_usage_correlation, ThresholdUsage};
use crate::scenes::class_name;
use crate::svg;

pub const SOURCE_METHOD: &str = "source";

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs sharing a method and sweep variant, ordered by seed.
#[derive(Clone, Debug)]
pub struct Group<'a> {
    pub method: String,
    pub variant: String,
    pub runs: Vec<&'a RunRecord>,
}

/// Groups in first-appearance order of (variant, method).
pub fn group_runs(runs: &[RunRecord]) -> Vec<Group<'_>> {
    let mut groups: Vec<Group<'_>> = Vec::new();
    for r in runs {
        match groups.iter_mut().find(|g| g.method == r.method && g.variant == r.variant) {
            Some(g) => g.runs.push(r),
            None => groups.push(Group {
                method: r.method.clone(),
                variant: r.variant.clone(),
                runs: vec![r],
            }),
        }
    }
    for g in &mut groups {
        g.runs.sort_by_key(|r| r.seed);
    }
    groups
}

fn cell_key(c: &CellSummary) -> String {
    format!("r{}_{}", c.round + 1, c.domain)
}

fn mean_of_cells(cells: &[CellSummary]) -> f64 {
    cells.iter().map(|c| c.miou).sum::<f64>() / cells.len() as f64
}

/// One method/variant row pair of the domains-by-rounds table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub variant: String,
    pub seeds: usize,
    /// Column keys like `r1_fog`, in stream order.
    pub columns: Vec<String>,
    pub cell_mean: Vec<f64>,
    pub cell_std: Vec<f64>,
    pub mean: f64,
    pub mean_std: f64,
    /// Gain over the source model; `None` without a source run.
    pub gain: Option<f64>,
    pub gain_std: Option<f64>,
    pub round_mean: Vec<f64>,
}

/// Mean mIoU over the cells of every seed, keyed by seed.
fn per_seed_means(g: &Group<'_>) -> BTreeMap<u64, f64> {
    g.runs
        .iter()
        .map(|r| (r.seed, mean_of_cells(&summarize(&r.frames))))
        .collect()
}

pub fn table_rows(runs: &[RunRecord]) -> Result<Vec<TableRow>> {
    if runs.is_empty() {
        return Err(Error::InvalidParameter("no run records to report".into()));
    }
    let groups = group_runs(runs);
    let source_means = |variant: &str| -> Option<BTreeMap<u64, f64>> {
        groups
            .iter()
            .find(|g| g.method == SOURCE_METHOD && g.variant == variant)
            .or_else(|| groups.iter().find(|g| g.method == SOURCE_METHOD && g.variant.is_empty()))
            .map(per_seed_means)
    };
    let mut rows = Vec::new();
    for g in &groups {
        let summaries: Vec<Vec<CellSummary>> = g.runs.iter().map(|r| summarize(&r.frames)).collect();
        let columns: Vec<String> = summaries[0].iter().map(cell_key).collect();
        for (r, s) in g.runs.iter().zip(&summaries) {
            if s.iter().map(cell_key).ne(columns.iter().cloned()) {
                return Err(Error::Shape(format!(
                    "{} seed {} has a different stream layout from its group",
                    r.method, r.seed
                )));
            }
        }
        let (cell_mean, cell_std): (Vec<f64>, Vec<f64>) = (0..columns.len())
            .map(|k| mean_std(&summaries.iter().map(|s| s[k].miou).collect::<Vec<_>>()))
            .unzip();
        let seed_means = per_seed_means(g);
        let (mean, mean_sd) = mean_std(&seed_means.values().copied().collect::<Vec<_>>());
        let (gain, gain_std) = match source_means(&g.variant) {
            Some(src) => {
                let (src_avg, _) = mean_std(&src.values().copied().collect::<Vec<_>>());
                let diffs: Vec<f64> = seed_means
                    .iter()
                    .map(|(seed, m)| m - src.get(seed).copied().unwrap_or(src_avg))
                    .collect();
                let (a, b) = mean_std(&diffs);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let rounds = summaries[0].iter().map(|c| c.round).max().map_or(0, |r| r + 1);
        let round_mean = (0..rounds)
            .map(|round| {
                let per_seed: Vec<f64> = summaries
                    .iter()
                    .map(|s| {
                        let cells: Vec<CellSummary> = s.iter().filter(|c| c.round == round).cloned().collect();
                        mean_of_cells(&cells)
                    })
                    .collect();
                mean_std(&per_seed).0
            })
            .collect();
        rows.push(TableRow {
            method: g.method.clone(),
            variant: g.variant.clone(),
            seeds: g.runs.len(),
            columns,
            cell_mean,
            cell_std,
            mean,
            mean_std: mean_sd,
            gain,
            gain_std,
            round_mean,
        });
    }
    Ok(rows)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn csv_line(fields: &[String]) -> String {
    fields.join(",") + "\n"
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else { return out };
    let mut header: Vec<String> = ["method", "variant", "stat", "seeds"].map(String::from).to_vec();
    header.extend(first.columns.iter().cloned());
    header.extend(["mean", "gain"].map(String::from));
    out += &csv_line(&header);
    for r in rows {
        for (stat, cells, mean, gain) in [
            ("mean", &r.cell_mean, r.mean, r.gain),
            ("std", &r.cell_std, r.mean_std, r.gain_std),
        ] {
            let mut f = vec![r.method.clone(), r.variant.clone(), stat.to_string(), r.seeds.to_string()];
            f.extend(cells.iter().map(|&v| fmt(v)));
            f.push(fmt(mean));
            f.push(opt(gain));
            out += &csv_line(&f);
        }
    }
    out
}

/// Per (run, cell, class) IoU rows.
pub fn summary_csv(runs: &[RunRecord]) -> String {
    let mut out = csv_line(&["method", "variant", "seed", "round", "domain_index", "domain", "class", "class_name", "iou"].map(String::from));
    for r in runs {
        for cell in summarize(&r.frames) {
            for (c, iou) in cell.iou.iter().enumerate() {
                out += &csv_line(&[
                    r.method.clone(),
                    r.variant.clone(),
                    r.seed.to_string(),
                    (cell.round + 1).to_string(),
                    cell.domain_index.to_string(),
                    cell.domain.to_string(),
                    c.to_string(),
                    class_name(c),
                    opt(*iou),
                ]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRow {
    pub method: String,
    pub variant: String,
    pub class: usize,
    pub mean: f64,
    pub std: f64,
}

/// Per class, the mean over present cells for each seed, then mean and
/// standard deviation over seeds.
pub fn class_rows(runs: &[RunRecord]) -> Vec<ClassRow> {
    let mut rows = Vec::new();
    for g in group_runs(runs) {
        let classes = g.runs[0].frames.first().map_or(0, |f| f.classes());
        for c in 0..classes {
            let per_seed: Vec<f64> = g
                .runs
                .iter()
                .filter_map(|r| {
                    let v: Vec<f64> = summarize(&r.frames).iter().filter_map(|cell| cell.iou[c]).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            if per_seed.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&per_seed);
            rows.push(ClassRow {
                method: g.method.clone(),
                variant: g.variant.clone(),
                class: c,
                mean,
                std,
            });
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsageRow {
    pub method: String,
    pub variant: String,
    pub seed: u64,
    pub usage: ThresholdUsage,
}

/// Threshold/usage correlation for every run that produced threshold
/// reports and has at least three usable classes.
pub fn usage_rows(runs: &[RunRecord]) -> Vec<UsageRow> {
    runs.iter()
        .filter_map(|r| {
            let reports = threshold_reports(r);
            if reports.is_empty() {
                return None;
            }
            threshold_usage_correlation(&reports).ok().map(|usage| UsageRow {
                method: r.method.clone(),
                variant: r.variant.clone(),
                seed: r.seed,
                usage,
            })
        })
        .collect()
}

fn usage_csv(rows: &[UsageRow]) -> String {
    let mut out = csv_line(
        &["method", "variant", "seed", "class", "class_name", "mean_tau", "mean_usage", "rho", "degenerate"].map(String::from),
    );
    for r in rows {
        let u = &r.usage;
        for (k, &c) in u.classes.iter().enumerate() {
            out += &csv_line(&[
                r.method.clone(),
                r.variant.clone(),
                r.seed.to_string(),
                c.to_string(),
                class_name(c),
                format!("{:.8}", u.mean_tau[k]),
                format!("{:.8}", u.mean_usage[k]),
                fmt(u.correlation.rho),
                u.correlation.degenerate.to_string(),
            ]);
        }
    }
    out
}

fn label(method: &str, variant: &str) -> String {
    if variant.is_empty() {
        method.to_string()
    } else {
        format!("{method} [{variant}]")
    }
}

fn markdown(rows: &[TableRow], usage: &[UsageRow]) -> String {
    let mut md = String::from("# Adaptation report\n\n## Mean IoU by round and domain (mean over seeds)\n\n");
    if let Some(first) = rows.first() {
        let _ = writeln!(md, "| method | {} | Mean | Gain |", first.columns.join(" | "));
        let _ = writeln!(md, "|---|{}---|---|", "---|".repeat(first.columns.len()));
        for r in rows {
            let cells: Vec<String> = r.cell_mean.iter().map(|v| format!("{:.1}", v * 100.0)).collect();
            let _ = writeln!(
                md,
                "| {} | {} | {:.1} ± {:.1} | {} |",
                label(&r.method, &r.variant),
                cells.join(" | "),
                r.mean * 100.0,
                r.mean_std * 100.0,
                r.gain.map(|g| format!("{:+.1}", g * 100.0)).unwrap_or_else(|| "n/a".into())
            );
        }
    }
    if !usage.is_empty() {
        md += "\n## Threshold vs augmentation usage (Spearman rank correlation)\n\n| method | seed | rho |\n|---|---|---|\n";
        for u in usage {
            let _ = writeln!(
                md,
                "| {} | {} | {:.4}{} |",
                label(&u.method, &u.variant),
                u.seed,
                u.usage.correlation.rho,
                if u.usage.correlation.degenerate { " (degenerate)" } else { "" }
            );
        }
    }
    md
}

fn sweep_outputs(rows: &[TableRow]) -> Option<(String, String)> {
    if rows.iter().all(|r| r.variant.is_empty()) {
        return None;
    }
    let rounds = rows.iter().map(|r| r.round_mean.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["method", "variant"].map(String::from).to_vec();
    header.extend((1..=rounds).map(|r| format!("round{r}")));
    header.extend(["mean", "std"].map(String::from));
    let mut csv = csv_line(&header);
    for r in rows {
        let mut f = vec![r.method.clone(), r.variant.clone()];
        f.extend(r.round_mean.iter().map(|&v| fmt(v)));
        f.push(fmt(r.mean));
        f.push(fmt(r.mean_std));
        csv += &csv_line(&f);
    }
    let mut variants: Vec<String> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let series: Vec<(String, Vec<f64>)> = methods
        .iter()
        .map(|m| {
            let values = variants
                .iter()
                .map(|v| {
                    rows.iter()
                        .find(|r| &r.method == m && &r.variant == v)
                        .map_or(f64::NAN, |r| r.mean)
                })
                .collect();
            (m.clone(), values)
        })
        .collect();
    let chart = svg::line_chart("Sensitivity sweep", "variant", "mean mIoU", &variants, &series);
    Some((csv, chart))
}

/// Every report file as (name, contents), in a fixed order.
pub fn render(runs: &[RunRecord]) -> Result<Vec<(String, String)>> {
    let rows = table_rows(runs)?;
    let classes = class_rows(runs);
    let usage = usage_rows(runs);
    let mut files = vec![
        ("summary.csv".to_string(), summary_csv(runs)),
        ("table.csv".to_string(), table_csv(&rows)),
    ];

    let mut class_csv = csv_line(&["method", "variant", "class", "class_name", "mean_iou", "std_iou"].map(String::from));
    for c in &classes {
        class_csv += &csv_line(&[c.method.clone(), c.variant.clone(), c.class.to_string(), class_name(c.class), fmt(c.mean), fmt(c.std)]);
    }
    files.push(("class_iou.csv".into(), class_csv));
    files.push(("threshold_usage.csv".into(), usage_csv(&usage)));
    if let Some((csv, chart)) = sweep_outputs(&rows) {
        files.push(("sweep.csv".into(), csv));
        files.push(("sweep.svg".into(), chart));
    }

    let rounds = rows.iter().map(|r| r.round_mean.len()).max().unwrap_or(0);
    let round_labels: Vec<String> = (1..=rounds).map(|r| format!("round {r}")).collect();
    let series: Vec<(String, Vec<f64>)> = rows
        .iter()
        .map(|r| (label(&r.method, &r.variant), r.round_mean.clone()))
        .collect();
    files.push(("rounds.svg".into(), svg::line_chart("Mean IoU per round", "round", "mIoU", &round_labels, &series)));

    let n_classes = classes.iter().map(|c| c.class + 1).max().unwrap_or(0);
    let class_labels: Vec<String> = (0..n_classes).map(class_name).collect();
    let bars: Vec<(String, Vec<f64>)> = group_runs(runs)
        .iter()
        .map(|g| {
            let values = (0..n_classes)
                .map(|c| {
                    classes
                        .iter()
                        .find(|r| r.method == g.method && r.variant == g.variant && r.class == c)
                        .map_or(f64::NAN, |r| r.mean)
                })
                .collect();
            (label(&g.method, &g.variant), values)
        })
        .collect();
    files.push(("class_iou.svg".into(), svg::bar_chart("Per-class IoU", "IoU", &class_labels, &bars)));

    let points: Vec<(String, Vec<(f64, f64, String)>)> = usage
        .iter()
        .map(|u| {
            let pts = u
                .usage
                .classes
                .iter()
                .enumerate()
                .map(|(k, &c)| (u.usage.mean_tau[k], u.usage.mean_usage[k], class_name(c)))
                .collect();
            (
                format!("{} s{} rho={:.2}", label(&u.method, &u.variant), u.seed, u.usage.correlation.rho),
                pts,
            )
        })
        .collect();
    files.push((
        "threshold_usage.svg".into(),
        svg::scatter("Mean threshold vs augmentation usage", "mean threshold", "usage ratio", &points),
    ));
    files.push(("report.md".into(), markdown(&rows, &usage)));
    Ok(files)
}

/// Writes [`render`] output into `dir`.
pub fn write_report(dir: &Path, runs: &[RunRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    render(runs)?
        .into_iter()
        .map(|(name, body)| {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::FrameRecord;
    use crate::icat::ThresholdReport;
    use crate::scenes::DomainKind;

    fn run(method: &str, seed: u64, hit: u64) -> RunRecord {
        let frames = (0..4)
            .map(|i| FrameRecord {
                index: i,
                round: i / 2,
                domain_index: i % 2,
                domain: if i % 2 == 0 { DomainKind::Fog } else { DomainKind::Snow },
                intersection: vec![hit, 4, 2],
                union: vec![8, 8, 4],
                correct: hit + 6,
                pixels: 16,
                loss: 0.0,
                thresholds: (method != SOURCE_METHOD).then(|| ThresholdReport {
                    tau: vec![0.99, 0.98, 0.97],
                    phi: vec![0.99, 0.8, 0.7],
                    counts: vec![4, 4, 4],
                    mask_counts: vec![4, 4, 4],
                    accepted: vec![1, 2, 3],
                }),
                delta: vec![1.0; 3],
                weights: vec![0.0; 3],
                wall_ms: 0.0,
                loss_map: None,
            })
            .collect();
        RunRecord {
            method: method.into(),
            variant: String::new(),
            seed,
            frames,
        }
    }

    #[test]
    fn source_only_gain_is_zero() {
        let rows = table_rows(&[run("source", 0, 4)]).unwrap();
        assert_eq!(rows[0].gain, Some(0.0));
        assert_eq!(rows[0].gain_std, Some(0.0));
        assert_eq!(rows[0].columns, ["r1_fog", "r1_snow", "r2_fog", "r2_snow"]);
        let csv = table_csv(&rows);
        assert!(csv.lines().nth(1).unwrap().ends_with(",0.000000"));
    }

    #[test]
    fn identical_seeds_have_zero_std() {
        let rows = table_rows(&[run("cotica", 0, 6), run("cotica", 1, 6)]).unwrap();
        assert_eq!(rows[0].mean_std, 0.0);
        assert!(rows[0].cell_std.iter().all(|&s| s == 0.0));
        assert_eq!(rows[0].gain, None);
    }

    #[test]
    fn gain_is_paired_by_seed() {
        let runs = [run("source", 0, 4), run("source", 1, 2), run("cotica", 0, 6), run("cotica", 1, 6)];
        let rows = table_rows(&runs).unwrap();
        // mIoU = (hit/8 + 0.5 + 0.5) / 3, so each unit of `hit` is 1/24.
        assert!((rows[1].gain.unwrap() - (2.0 / 24.0 + 4.0 / 24.0) / 2.0).abs() < 1e-12);
        assert!(rows[1].gain_std.unwrap() > 0.0);
    }

    #[test]
    fn usage_matches_metrics() {
        let r = run("cotica", 0, 6);
        let rows = usage_rows(std::slice::from_ref(&r));
        let direct = threshold_usage_correlation(&threshold_reports(&r)).unwrap();
        assert_eq!(rows[0].usage, direct);
        assert!(rows[0].usage.correlation.rho > 0.0);
        let files = render(&[r]).unwrap();
        let md = &files.iter().find(|f| f.0 == "report.md").unwrap().1;
        assert!(md.contains(&format!("{:.4}", direct.correlation.rho)));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(render(&[]).is_err());
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
