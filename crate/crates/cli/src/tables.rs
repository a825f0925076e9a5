//! CSV tables written by `analyze`.

use std::path::Path;

use crate::driver::{FrontierPoint, SensitivityRow};
use crate::error::{CliError, CliResult};

fn write<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> CliResult<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `i,j,value`
pub fn write_cka(path: &Path, table: &[(usize, usize, f64)]) -> CliResult<()> {
    write(path, ["i", "j", "value"], table.iter().map(|(i, j, v)| [i.to_string(), j.to_string(), format!("{v:?}")]))
}

/// `layer,loss_increase,allocated_ratio`
pub fn write_sensitivity(path: &Path, rows: &[SensitivityRow]) -> CliResult<()> {
    write(
        path,
        ["layer", "loss_increase", "allocated_ratio"],
        rows.iter().map(|r| [r.layer.to_string(), format!("{:?}", r.loss_increase), format!("{:?}", r.allocated_ratio)]),
    )
}

/// `ratio,loss,params`
pub fn write_frontier(path: &Path, points: &[FrontierPoint]) -> CliResult<()> {
    write(
        path,
        ["ratio", "loss", "params"],
        points.iter().map(|p| [format!("{:?}", p.ratio), format!("{:?}", p.loss), p.params.to_string()]),
    )
}
