//! Files written next to `report.json`: CSV series and SVG plots.

use std::fs;
use std::path::{Path, PathBuf};

use hamcheck_core::extremal::Extremal;
use hamcheck_core::flowsheet::{FlowSheet, SheetRow};
use thiserror::Error;

use crate::plot::{histogram, line_plot, Series};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, OutputError> {
    fs::write(&path, contents).map_err(|source| OutputError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, OutputError> {
    csv::Writer::from_path(path).map_err(|source| OutputError::Csv {
        path: path.to_owned(),
        source,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

pub fn ensure_dir(dir: &Path) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(|source| OutputError::Io {
        path: dir.to_owned(),
        source,
    })
}

pub fn write_report(dir: &Path, json: &str) -> Result<PathBuf, OutputError> {
    write(dir.join("report.json"), json)
}

/// `t, q0_1.., q_1.., p_1.., theta, minsv`, one row per time sample and column.
pub fn write_sheet_csv(dir: &Path, rows: &[SheetRow]) -> Result<PathBuf, OutputError> {
    let path = dir.join("sheet.csv");
    let n = rows.first().map_or(0, |r| r.q.len());
    let mut w = csv_writer(&path)?;
    let mut head = vec!["t".to_string()];
    for prefix in ["q0", "q", "p"] {
        head.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    head.extend(["theta".into(), "minsv".into()]);
    let err = |source| OutputError::Csv { path: path.clone(), source };
    w.write_record(&head).map_err(err)?;
    for r in rows {
        let mut rec = vec![fmt(r.t)];
        rec.extend(r.q0.iter().chain(&r.q).chain(&r.p).map(|&v| fmt(v)));
        rec.extend([fmt(r.theta), fmt(r.minsv)]);
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|source| OutputError::Io { path: path.clone(), source })?;
    Ok(path)
}

pub fn write_margins_csv(dir: &Path, margins: &[(String, f64)]) -> Result<PathBuf, OutputError> {
    let path = dir.join("margins.csv");
    let mut w = csv_writer(&path)?;
    let err = |source| OutputError::Csv { path: path.clone(), source };
    w.write_record(["label", "margin"]).map_err(err)?;
    for (label, m) in margins {
        w.write_record([label.as_str(), &fmt(*m)]).map_err(err)?;
    }
    w.flush().map_err(|source| OutputError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Reference extremal sampled on 201 uniform times plus its breakpoints.
pub fn write_extremal_csv(dir: &Path, ext: &Extremal) -> Result<PathBuf, OutputError> {
    let path = dir.join("extremal.csv");
    let n = ext.dim();
    let mut w = csv_writer(&path)?;
    let err = |source| OutputError::Csv { path: path.clone(), source };
    let mut head = vec!["t".to_string()];
    head.extend((1..=n).map(|i| format!("x_{i}")));
    head.extend((1..=n).map(|i| format!("lambda_{i}")));
    w.write_record(&head).map_err(err)?;
    let mut times: Vec<f64> = (0..=200).map(|k| ext.horizon * k as f64 / 200.0).collect();
    times.extend(ext.breakpoints());
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    for t in times {
        let l = ext.lambda_at(t);
        let mut rec = vec![fmt(t)];
        rec.extend(l.q.iter().chain(l.p.iter()).map(|&v| fmt(v)));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|source| OutputError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Smallest singular value of the sheet Jacobian over the grid, per time.
pub fn minsv_profile(rows: &[SheetRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(last) if last.0 == r.t => last.1 = last.1.min(r.minsv),
            _ => out.push((r.t, r.minsv)),
        }
    }
    out
}

pub fn write_plots(dir: &Path, sheet: Option<&FlowSheet>, margins: &[(String, f64)]) -> Result<Vec<PathBuf>, OutputError> {
    let mut files = Vec::new();
    if let Some(sheet) = sheet {
        let rows = sheet.rows();
        files.push(write(
            dir.join("minsv.svg"),
            &line_plot(
                "smallest singular value of the projected sheet",
                "t",
                "min singular value",
                &[Series::new(minsv_profile(&rows))],
            ),
        )?);
        let center = sheet.center_column();
        let theta: Vec<(f64, f64)> = sheet.times.iter().map(|&t| (t, center.state(t).theta)).collect();
        files.push(write(
            dir.join("theta.svg"),
            &line_plot("theta along the reference column", "t", "theta", &[Series::new(theta)]),
        )?);
        let field: Vec<Series> = sheet
            .columns
            .iter()
            .map(|col| Series::new(sheet.times.iter().map(|&t| (t, col.state(t).ell.q[0])).collect()))
            .collect();
        files.push(write(
            dir.join("field.svg"),
            &line_plot("projected extremal field", "t", "q_1", &field),
        )?);
    }
    let values: Vec<f64> = margins.iter().map(|m| m.1).collect();
    files.push(write(
        dir.join("margins.svg"),
        &histogram("cost-comparison margins", "margin", &values, 20),
    )?);
    Ok(files)
}
