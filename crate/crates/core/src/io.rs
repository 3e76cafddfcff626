//! On-disk formats: little-endian `f64` arrays behind a `(M, N, d)` header, CSV series
//! and pretty JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixedpoint::IterationRow;
use crate::measure::MeasureFlow;

/// Writes `array` as three `u64` dimensions followed by row-major `f64` data, all little-endian.
pub fn write_array<W: Write>(mut w: W, array: &Array3<f64>) -> Result<()> {
    let (m, n, d) = array.dim();
    for dim in [m, n, d] {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    for v in array.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_array<R: Read>(mut r: R) -> Result<Array3<f64>> {
    let mut word = [0u8; 8];
    let mut dims = [0usize; 3];
    for dim in &mut dims {
        r.read_exact(&mut word)?;
        *dim = usize::try_from(u64::from_le_bytes(word))
            .map_err(|_| Error::Measure("array header does not fit in memory".into()))?;
    }
    let len = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Measure("array header overflows".into()))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), data).map_err(|e| Error::Measure(e.to_string()))
}

pub fn write_array_file(path: &Path, array: &Array3<f64>) -> Result<()> {
    write_array(BufWriter::new(File::create(path)?), array)
}

pub fn read_array_file(path: &Path) -> Result<Array3<f64>> {
    read_array(BufReader::new(File::open(path)?))
}

/// Iteration history with columns `k, residual, Y0, bmo_Z, kl_step, clip_rate`.
pub fn write_iterations_csv<W: Write>(mut w: W, rows: &[IterationRow]) -> Result<()> {
    writeln!(w, "k,residual,Y0,bmo_Z,kl_step,clip_rate")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.k, r.residual, r.y0, r.bmo_z, r.kl_step, r.clip_rate)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-time weighted means of a flow: `t, x_1.., v_1.., m1` where `m1` is the first moment.
pub fn write_flow_summary_csv<W: Write>(mut w: W, flow: &MeasureFlow) -> Result<()> {
    let (d, r) = (flow.dim_state(), flow.dim_values());
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..r).map(|j| format!("v{j}")));
    header.push("m1".into());
    writeln!(w, "{}", header.join(","))?;
    for n in 0..=flow.grid().n_steps() {
        let s = flow.marginal(n)?;
        let mut fields = vec![flow.grid().time(n).to_string()];
        fields.extend(s.state_mean.iter().map(f64::to_string));
        fields.extend(s.action_mean.iter().map(f64::to_string));
        fields.push(s.first_moment.to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of `(header, values)` written as a CSV table.
pub fn write_table_csv<W: Write>(mut w: W, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let fields: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
