use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 13] = [
    "trunk",
    "iter",
    "stage",
    "norm_choice",
    "addr_acc",
    "used_acc",
    "mrr",
    "recall_at_1",
    "tv_distance",
    "crm_loss",
    "kl_loss",
    "mlm_loss",
    "tau",
];

/// One E/M iteration of the training timeline. `iter` 0 is the cold-start
/// pass.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub trunk: usize,
    pub iter: usize,
    pub stage: u8,
    pub norm_choice: Option<String>,
    pub addr_acc: Option<f64>,
    pub used_acc: Option<f64>,
    pub mrr: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub tv_distance: Option<f64>,
    pub crm_loss: Option<f64>,
    pub kl_loss: Option<f64>,
    pub mlm_loss: Option<f64>,
    pub tau: Option<f64>,
    /// Predicted distance histogram; written to the sidecar file.
    #[serde(default)]
    pub histogram: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    path.with_file_name(format!("{stem}.histogram.csv"))
}

/// Writes the timeline CSV at `path` and the distance histograms next to
/// it as `<stem>.histogram.csv`.
pub fn export_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    let mut hist = String::from("trunk,iter,distance,fraction\n");
    for r in rows {
        let fields = [
            r.trunk.to_string(),
            r.iter.to_string(),
            r.stage.to_string(),
            r.norm_choice.clone().unwrap_or_default(),
            opt(r.addr_acc),
            opt(r.used_acc),
            opt(r.mrr),
            opt(r.recall_at_1),
            opt(r.tv_distance),
            opt(r.crm_loss),
            opt(r.kl_loss),
            opt(r.mlm_loss),
            opt(r.tau),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
        for (d, f) in r.histogram.iter().enumerate() {
            let _ = writeln!(hist, "{},{},{},{}", r.trunk, r.iter, d + 1, f);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, hist).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("bad number {s:?}"),
    })
}

fn parse_int<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad integer {s:?}"),
    })
}

/// Reads back a timeline written by [`export_metrics`], histograms
/// included when the sidecar exists.
pub fn parse_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CSV_COLUMNS.join(",") {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected metrics header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != CSV_COLUMNS.len() {
            return Err(Error::Parse {
                line: n,
                message: format!("expected {} fields, found {}", CSV_COLUMNS.len(), f.len()),
            });
        }
        rows.push(MetricsRow {
            trunk: parse_int(f[0], n)?,
            iter: parse_int(f[1], n)?,
            stage: parse_int(f[2], n)?,
            norm_choice: (!f[3].is_empty()).then(|| f[3].to_string()),
            addr_acc: parse_opt(f[4], n)?,
            used_acc: parse_opt(f[5], n)?,
            mrr: parse_opt(f[6], n)?,
            recall_at_1: parse_opt(f[7], n)?,
            tv_distance: parse_opt(f[8], n)?,
            crm_loss: parse_opt(f[9], n)?,
            kl_loss: parse_opt(f[10], n)?,
            mlm_loss: parse_opt(f[11], n)?,
            tau: parse_opt(f[12], n)?,
            histogram: Vec::new(),
        });
    }
    let side = sidecar_path(path);
    if let Ok(text) = std::fs::read_to_string(&side) {
        for (i, l) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected 4 histogram fields".into(),
                });
            }
            let (trunk, iter): (usize, usize) = (parse_int(f[0], i + 1)?, parse_int(f[1], i + 1)?);
            let frac = parse_opt(f[3], i + 1)?.unwrap_or(0.0);
            if let Some(r) = rows.iter_mut().find(|r| r.trunk == trunk && r.iter == iter) {
                r.histogram.push(frac);
            }
        }
    }
    Ok(rows)
}
