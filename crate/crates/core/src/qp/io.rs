//! Binary container for [`OcpQp`] instances.
//!
//! Layout (little-endian): magic `ZOGPQP01`, then `u64` horizon, `n_x`,
//! `n_u`, then matrices each written as `u64 rows`, `u64 cols` and the
//! entries in row-major order as `f64`. Vectors are single-column matrices.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use super::{OcpQp, StageQp, TerminalQp};
use crate::error::{invalid, Result};

const MAGIC: &[u8; 8] = b"ZOGPQP01";

fn put_u64<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u64).to_le_bytes())?;
    Ok(())
}

fn put_mat<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    put_u64(w, m.nrows())?;
    put_u64(w, m.ncols())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn put_vec<W: Write>(w: &mut W, v: &DVector<f64>) -> Result<()> {
    put_mat(w, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

fn get_u64<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| invalid("dimension does not fit in memory"))
}

fn get_mat<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let (fr, fc) = (get_u64(r)?, get_u64(r)?);
    if (fr, fc) != (rows, cols) && !(rows == usize::MAX && fc == cols) {
        return Err(invalid(format!("expected a {rows}×{cols} matrix, found {fr}×{fc}")));
    }
    if fr.saturating_mul(fc) > 1 << 28 {
        return Err(invalid(format!("matrix of {fr}×{fc} entries is too large")));
    }
    let mut m = DMatrix::zeros(fr, fc);
    let mut b = [0u8; 8];
    for i in 0..fr {
        for j in 0..fc {
            r.read_exact(&mut b)?;
            m[(i, j)] = f64::from_le_bytes(b);
        }
    }
    Ok(m)
}

fn get_vec<R: Read>(r: &mut R, len: usize) -> Result<DVector<f64>> {
    let m = get_mat(r, len, 1)?;
    Ok(DVector::from_column_slice(m.as_slice()))
}

/// Reads a matrix with any row count and the given column count.
fn get_rows<R: Read>(r: &mut R, cols: usize) -> Result<DMatrix<f64>> {
    get_mat(r, usize::MAX, cols)
}

pub fn write_qp<W: Write>(mut w: W, qp: &OcpQp) -> Result<()> {
    qp.validate()?;
    w.write_all(MAGIC)?;
    put_u64(&mut w, qp.horizon())?;
    put_u64(&mut w, qp.n_x())?;
    put_u64(&mut w, qp.n_u())?;
    put_vec(&mut w, &qp.x0)?;
    for s in &qp.stages {
        put_mat(&mut w, &s.h_xx)?;
        put_mat(&mut w, &s.h_uu)?;
        put_mat(&mut w, &s.h_ux)?;
        put_vec(&mut w, &s.g_x)?;
        put_vec(&mut w, &s.g_u)?;
        put_mat(&mut w, &s.a)?;
        put_mat(&mut w, &s.b)?;
        put_vec(&mut w, &s.c)?;
        put_mat(&mut w, &s.c_x)?;
        put_mat(&mut w, &s.c_u)?;
        put_vec(&mut w, &s.d)?;
    }
    let t = &qp.terminal;
    put_mat(&mut w, &t.h_xx)?;
    put_vec(&mut w, &t.g_x)?;
    put_mat(&mut w, &t.c_x)?;
    put_vec(&mut w, &t.d)?;
    Ok(())
}

pub fn read_qp<R: Read>(mut r: R) -> Result<OcpQp> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not a QP container (bad magic)"));
    }
    let n = get_u64(&mut r)?;
    let nx = get_u64(&mut r)?;
    let nu = get_u64(&mut r)?;
    let x0 = get_vec(&mut r, nx)?;
    let mut stages = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let h_xx = get_mat(&mut r, nx, nx)?;
        let h_uu = get_mat(&mut r, nu, nu)?;
        let h_ux = get_mat(&mut r, nu, nx)?;
        let g_x = get_vec(&mut r, nx)?;
        let g_u = get_vec(&mut r, nu)?;
        let a = get_mat(&mut r, nx, nx)?;
        let b = get_mat(&mut r, nx, nu)?;
        let c = get_vec(&mut r, nx)?;
        let c_x = get_rows(&mut r, nx)?;
        let c_u = get_mat(&mut r, c_x.nrows(), nu)?;
        let d = get_vec(&mut r, c_x.nrows())?;
        stages.push(StageQp {
            h_xx,
            h_uu,
            h_ux,
            g_x,
            g_u,
            a,
            b,
            c,
            c_x,
            c_u,
            d,
        });
    }
    let h_xx = get_mat(&mut r, nx, nx)?;
    let g_x = get_vec(&mut r, nx)?;
    let c_x = get_rows(&mut r, nx)?;
    let d = get_vec(&mut r, c_x.nrows())?;
    let qp = OcpQp {
        x0,
        stages,
        terminal: TerminalQp { h_xx, g_x, c_x, d },
    };
    qp.validate()?;
    Ok(qp)
}
