//! File formats: curve CSV, JSON documents, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::correlation::CorrelationCurve;
use crate::error::{Error, Result};

/// Write `bytes` to a temporary sibling of `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format {
            what: "path",
            detail: format!("{} has no file name", path.display()),
        })?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// `delta1_rad,g_value[,sigma]` with one row per scan point.
pub fn curve_to_csv(curve: &CorrelationCurve) -> String {
    let mut out = String::from("delta1_rad,g_value");
    if curve.sigma.is_some() {
        out.push_str(",sigma");
    }
    out.push('\n');
    for (i, (d, g)) in curve.delta1.iter().zip(&curve.values).enumerate() {
        match &curve.sigma {
            Some(s) => out.push_str(&format!("{d},{g},{}\n", s[i])),
            None => out.push_str(&format!("{d},{g}\n")),
        }
    }
    out
}

pub fn curve_from_csv(text: &str, order: usize) -> Result<CorrelationCurve> {
    let bad = |detail: String| Error::Format {
        what: "curve CSV",
        detail,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let with_sigma = match header.as_slice() {
        ["delta1_rad", "g_value"] => false,
        ["delta1_rad", "g_value", "sigma"] => true,
        other => return Err(bad(format!("unexpected header {other:?}"))),
    };
    let (mut delta1, mut values, mut sigma) = (Vec::new(), Vec::new(), Vec::new());
    for (row, line) in lines.enumerate() {
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", row + 1)))?;
        if fields.len() != header.len() {
            return Err(bad(format!(
                "row {} has {} fields, expected {}",
                row + 1,
                fields.len(),
                header.len()
            )));
        }
        delta1.push(fields[0]);
        values.push(fields[1]);
        if with_sigma {
            sigma.push(fields[2]);
        }
    }
    let mut curve = CorrelationCurve::new(order, delta1, values)?;
    if with_sigma {
        curve.sigma = Some(sigma);
        curve.validate()?;
    }
    Ok(curve)
}

pub fn write_curve_csv(path: &Path, curve: &CorrelationCurve) -> Result<()> {
    write_atomic(path, curve_to_csv(curve).as_bytes())
}

pub fn read_curve_csv(path: &Path, order: usize) -> Result<CorrelationCurve> {
    curve_from_csv(&fs::read_to_string(path)?, order)
}

/// Curve file names inside an output directory.
pub fn curve_path(dir: &Path, order: usize) -> PathBuf {
    dir.join(format!("g{order}.csv"))
}

pub fn replicates_path(dir: &Path, order: usize) -> PathBuf {
    dir.join(format!("g{order}.replicates.json"))
}

/// Write a curve and, when present, its bootstrap replicates next to it.
pub fn write_curve_bundle(dir: &Path, curve: &CorrelationCurve) -> Result<()> {
    write_curve_csv(&curve_path(dir, curve.order), curve)?;
    if let Some(reps) = &curve.replicates {
        write_json(&replicates_path(dir, curve.order), reps)?;
    }
    Ok(())
}

pub fn read_curve_bundle(dir: &Path, order: usize) -> Result<CorrelationCurve> {
    let mut curve = read_curve_csv(&curve_path(dir, order), order)?;
    let reps = replicates_path(dir, order);
    if reps.exists() {
        curve.replicates = Some(read_json(&reps)?);
        curve.validate()?;
    }
    Ok(curve)
}
