//! Summary tables over stored run directories.
//!
//! Every directory below the results root that holds an `accuracy.csv` and a
//! `config.echo` is one run. Runs sharing a config `name` form one row; their
//! per-cluster means are averaged and the row's mean and standard deviation
//! are taken over those cluster means.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::config::parse_config_str;
use crate::error::{Error, Result};
use crate::simulator::{mean_std, ClientResult, ClusterSummary};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub protocol: String,
    pub runs: usize,
    pub cluster_means: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, None, e.to_string()))
}

pub fn read_accuracy_csv(path: &Path) -> Result<Vec<ClientResult>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "client_id,cluster_id,test_accuracy,best_val_loss" {
        return Err(Error::ingestion(path, Some(0), format!("unexpected header `{header}`")));
    }
    let mut offset = header.len() as u64 + 1;
    let mut out = Vec::new();
    for line in lines {
        let bad = || Error::ingestion(path, Some(offset), format!("malformed row `{line}`"));
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(bad());
        }
        out.push(ClientResult {
            client_id: fields[0].parse().map_err(|_| bad())?,
            cluster_id: fields[1].parse().map_err(|_| bad())?,
            test_accuracy: fields[2].parse().map_err(|_| bad())?,
            best_val_loss: fields[3].parse().map_err(|_| bad())?,
        });
        offset += line.len() as u64 + 1;
    }
    if out.is_empty() {
        return Err(Error::ingestion(path, None, "no client rows"));
    }
    Ok(out)
}

struct Run {
    protocol: String,
    n_clusters: usize,
    summary: ClusterSummary,
    source: PathBuf,
}

fn load_run(dir: &Path) -> Result<(String, Run)> {
    let accuracy_path = dir.join("accuracy.csv");
    let clients = read_accuracy_csv(&accuracy_path)?;
    let echo_path = dir.join("config.echo");
    let cfg =
        parse_config_str(&read_text(&echo_path)?).map_err(|e| Error::ingestion(&echo_path, None, e.to_string()))?;
    let n_clusters = cfg.layout.clusters.len();
    if let Some(c) = clients.iter().find(|c| c.cluster_id >= n_clusters) {
        return Err(Error::ingestion(
            &accuracy_path,
            None,
            format!("cluster {} not in the run's {n_clusters}-cluster layout", c.cluster_id),
        ));
    }
    Ok((
        cfg.name.clone(),
        Run {
            protocol: cfg.protocol.name().to_string(),
            n_clusters,
            summary: ClusterSummary::from_clients(&clients, n_clusters),
            source: accuracy_path,
        },
    ))
}

/// Scans `results_dir` and builds one row per run name, sorted by name.
pub fn summarize(results_dir: &Path) -> Result<Summary> {
    let mut groups: BTreeMap<String, Vec<Run>> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = WalkDir::new(results_dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "accuracy.csv")
        .map(|e| e.path().parent().unwrap_or(results_dir).to_path_buf())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::ingestion(results_dir, None, "no accuracy.csv found"));
    }
    for dir in entries {
        let (name, run) = load_run(&dir)?;
        groups.entry(name).or_default().push(run);
    }

    let mut rows = Vec::with_capacity(groups.len());
    for (name, runs) in groups {
        let n_clusters = runs[0].n_clusters;
        if let Some(odd) = runs.iter().find(|r| r.n_clusters != n_clusters) {
            return Err(Error::ingestion(
                &odd.source,
                None,
                format!("run `{name}` has {} clusters, others have {n_clusters}", odd.n_clusters),
            ));
        }
        let cluster_means: Vec<f64> = (0..n_clusters)
            .map(|c| runs.iter().map(|r| r.summary.cluster_means[c]).sum::<f64>() / runs.len() as f64)
            .collect();
        let (mean, std) = mean_std(&cluster_means);
        rows.push(SummaryRow {
            name,
            protocol: runs[0].protocol.clone(),
            runs: runs.len(),
            cluster_means,
            mean,
            std,
        });
    }
    Ok(Summary { rows })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl Summary {
    fn max_clusters(&self) -> usize {
        self.rows.iter().map(|r| r.cluster_means.len()).max().unwrap_or(0)
    }

    fn cells(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let width = self.max_clusters();
        let mut header = vec!["name".to_string(), "protocol".into(), "n".into()];
        header.extend((0..width).map(|c| format!("cluster_{c}")));
        header.extend(["mean".to_string(), "std".into()]);
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.name.clone(), r.protocol.clone(), r.runs.to_string()];
                cells.extend((0..width).map(|c| r.cluster_means.get(c).map(|&v| pct(v)).unwrap_or_default()));
                cells.extend([pct(r.mean), pct(r.std)]);
                cells
            })
            .collect();
        (header, rows)
    }

    /// Accuracies in percent, two decimals.
    pub fn to_csv(&self) -> String {
        let (header, rows) = self.cells();
        let mut out = header.join(",");
        out.push('\n');
        for row in rows {
            let escaped: Vec<String> = row
                .iter()
                .map(|c| if c.contains(',') { format!("\"{c}\"") } else { c.clone() })
                .collect();
            out.push_str(&escaped.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let (header, rows) = self.cells();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&rows) {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Summarizes `results_dir`, writes `summary.csv` there and returns the summary.
pub fn report(results_dir: &Path) -> Result<Summary> {
    let summary = summarize(results_dir)?;
    let path = results_dir.join("summary.csv");
    std::fs::write(&path, summary.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
