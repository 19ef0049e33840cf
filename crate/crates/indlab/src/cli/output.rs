//! CSV and JSON emitters. All floats in CSV go through [`crate::format_f64`]
//! (17 significant digits, '.' decimal, no locale) so files round-trip
//! losslessly and byte-identically per seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::flow::{ComparisonPoint, FlowTrajectory};
use crate::format_f64;
use crate::matrix::Matrix;
use crate::reference::StdTrainRecord;
use crate::train::Trajectory;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Header: `step,loss,res_w1,res_w2,res_w3,a1..a3,b1..b12,g1..g4`.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "step,loss,res_w1,res_w2,res_w3")?;
    for i in 1..=3 {
        write!(f, ",a{i}")?;
    }
    for i in 1..=12 {
        write!(f, ",b{i}")?;
    }
    for i in 1..=4 {
        write!(f, ",g{i}")?;
    }
    writeln!(f)?;
    for rec in &traj.records {
        write!(f, "{},{}", rec.step, format_f64(rec.loss))?;
        for r in rec.relative_residual {
            write!(f, ",{}", format_f64(r))?;
        }
        for v in rec.params.flat() {
            write!(f, ",{}", format_f64(v))?;
        }
        writeln!(f)?;
    }
    Ok(())
}

pub fn write_flow_csv(path: &Path, traj: &FlowTrajectory) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "t,alpha,beta,gamma,loss")?;
    for s in &traj.samples {
        writeln!(
            f,
            "{},{},{},{},{}",
            format_f64(s.t),
            format_f64(s.alpha),
            format_f64(s.beta),
            format_f64(s.gamma),
            format_f64(s.loss)
        )?;
    }
    Ok(())
}

pub fn write_comparison_csv(path: &Path, table: &[ComparisonPoint]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "t,sgd_alpha,sgd_beta,sgd_gamma,flow_alpha,flow_beta,flow_gamma"
    )?;
    for p in table {
        write!(f, "{}", format_f64(p.t))?;
        for v in p.sgd.iter().chain(p.flow.iter()) {
            write!(f, ",{}", format_f64(*v))?;
        }
        writeln!(f)?;
    }
    Ok(())
}

pub fn write_loss_curve_csv(path: &Path, curve: &[StdTrainRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "step,loss,accuracy")?;
    for rec in curve {
        writeln!(
            f,
            "{},{},{}",
            rec.step,
            format_f64(rec.loss),
            format_f64(rec.accuracy)
        )?;
    }
    Ok(())
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for i in 0..m.rows() {
        let mut first = true;
        for v in m.row(i) {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{}", format_f64(*v))?;
            first = false;
        }
        writeln!(f)?;
    }
    Ok(())
}
