//! CSV report emission. Files are written to a temporary sibling and renamed
//! into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsReport;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const PARAMS_FILE: &str = "params.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Write `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv buffer: {e}")))
}

/// `method, seed, order_id, after_task, eval_task, accuracy`; tasks are
/// 1-based stream positions.
pub fn metrics_csv(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    let rows = reports.iter().flat_map(|r| {
        r.acc.iter().enumerate().flat_map(move |(t, row)| {
            row.iter().enumerate().map(move |(i, a)| {
                vec![
                    r.method.clone(),
                    r.seed.to_string(),
                    r.order_id.clone(),
                    (t + 1).to_string(),
                    (i + 1).to_string(),
                    a.to_string(),
                ]
            })
        })
    });
    csv_bytes(&["method", "seed", "order_id", "after_task", "eval_task", "accuracy"], rows)
}

/// `method, seed, avg_accuracy, mean_forgetting, trainable_params, order_id`.
pub fn summary_csv(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    let rows = reports.iter().map(|r| {
        vec![
            r.method.clone(),
            r.seed.to_string(),
            r.final_average().to_string(),
            r.mean_forgetting().to_string(),
            r.final_trainable().to_string(),
            r.order_id.clone(),
        ]
    });
    csv_bytes(
        &["method", "seed", "avg_accuracy", "mean_forgetting", "trainable_params", "order_id"],
        rows,
    )
}

/// Per-task trajectory: mean seen accuracy and accuracy on the first task.
pub fn trajectory_csv(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    let rows = reports.iter().flat_map(|r| {
        let seen = r.seen_average();
        r.acc.iter().enumerate().map(move |(t, row)| {
            vec![
                r.method.clone(),
                r.seed.to_string(),
                r.order_id.clone(),
                (t + 1).to_string(),
                seen[t].to_string(),
                row[0].to_string(),
                r.trainable_params[t].to_string(),
            ]
        })
    });
    csv_bytes(
        &["method", "seed", "order_id", "after_task", "seen_avg_accuracy", "first_task_accuracy", "trainable_params"],
        rows,
    )
}

/// Parameter overhead per run.
pub fn params_csv(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    let rows = reports.iter().map(|r| {
        let overhead = if r.base_params == 0 {
            0.0
        } else {
            r.selector_params as f64 / r.base_params as f64
        };
        vec![
            r.method.clone(),
            r.seed.to_string(),
            r.order_id.clone(),
            r.base_params.to_string(),
            r.adapter_params.to_string(),
            r.selector_params.to_string(),
            r.final_trainable().to_string(),
            overhead.to_string(),
        ]
    });
    csv_bytes(
        &[
            "method",
            "seed",
            "order_id",
            "base_params",
            "adapter_params",
            "selector_params",
            "trainable_params",
            "selector_overhead",
        ],
        rows,
    )
}

/// Write every report file into `out_dir`, creating it if needed. Returns
/// the written paths.
pub fn emit_report(reports: &[MetricsReport], config_text: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files: [(&str, Vec<u8>); 5] = [
        (METRICS_FILE, metrics_csv(reports)?),
        (SUMMARY_FILE, summary_csv(reports)?),
        (TRAJECTORY_FILE, trajectory_csv(reports)?),
        (PARAMS_FILE, params_csv(reports)?),
        (CONFIG_FILE, config_text.as_bytes().to_vec()),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Rebuild accuracy matrices from `metrics.csv` contents. Parameter counts
/// and digests are not part of that file and come back empty.
pub fn reports_from_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricsReport>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr.headers()?.clone();
    let expected = ["method", "seed", "order_id", "after_task", "eval_task", "accuracy"];
    if headers.iter().ne(expected) {
        return Err(Error::Format(format!("unexpected metrics header {headers:?}")));
    }
    let mut reports: Vec<MetricsReport> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad {} {:?}", expected[i], &rec[i])))
        };
        let seed: u64 = rec[1].parse().map_err(|_| Error::Format(format!("bad seed {:?}", &rec[1])))?;
        let (after, eval) = (num(3)?, num(4)?);
        let acc: f64 = rec[5].parse().map_err(|_| Error::Format(format!("bad accuracy {:?}", &rec[5])))?;
        let pos = reports
            .iter()
            .position(|r| r.method == rec[0] && r.seed == seed && r.order_id == rec[2]);
        let r = match pos {
            Some(p) => &mut reports[p],
            None => {
                reports.push(MetricsReport::new(&rec[0], seed, &rec[2], ""));
                reports.last_mut().expect("just pushed")
            }
        };
        if after == 0 || eval == 0 || eval > after {
            return Err(Error::Format(format!("row after_task={after} eval_task={eval} is outside the triangle")));
        }
        while r.acc.len() < after {
            r.acc.push(Vec::new());
            r.trainable_params.push(0);
            r.wall_clock_secs.push(0.0);
        }
        let row = &mut r.acc[after - 1];
        if row.len() + 1 != eval {
            return Err(Error::Format(format!("rows for after_task={after} are out of order")));
        }
        row.push(acc);
    }
    for r in &reports {
        if r.acc.iter().enumerate().any(|(t, row)| row.len() != t + 1) {
            return Err(Error::Format(format!("{} seed {}: incomplete accuracy triangle", r.method, r.seed)));
        }
    }
    Ok(reports)
}

/// One row per method: runs, mean final average accuracy and mean
/// forgetting over every seed and order.
pub fn comparison_rows(reports: &[MetricsReport]) -> Vec<(String, usize, f64, f64)> {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let runs: Vec<&MetricsReport> = reports.iter().filter(|r| r.method == m).collect();
            let n = runs.len() as f64;
            (
                m.to_string(),
                runs.len(),
                runs.iter().map(|r| r.final_average()).sum::<f64>() / n,
                runs.iter().map(|r| r.mean_forgetting()).sum::<f64>() / n,
            )
        })
        .collect()
}

pub fn comparison_csv(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    let rows = comparison_rows(reports)
        .into_iter()
        .map(|(m, n, a, f)| vec![m, n.to_string(), a.to_string(), f.to_string()]);
    csv_bytes(&["method", "runs", "avg_accuracy", "mean_forgetting"], rows)
}
