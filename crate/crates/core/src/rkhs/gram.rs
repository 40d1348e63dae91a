//! Gram matrices for the kernel games, grouped over distinct points.
//!
//! Rows with bitwise-identical (proxy, a, x) coordinates index the same
//! Gram row, and the bundle records the row-to-cell maps plus joint-cell
//! counts. Every quantity the fits need is an exact function of these
//! aggregates; on data without repeats the grouping is the identity and
//! the matrices are the familiar n x n ones.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{t_apply_kernel, ContrastSpec, Integration, ObservationTable, RowMatrix};
use crate::rkhs::KernelSpec;

/// One distinct (z-cell, w-cell) combination and how many rows carry it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointCell {
    pub z_cell: usize,
    pub w_cell: usize,
    pub count: usize,
}

/// Precomputed kernel quantities for one (data, kernel_z, kernel_w,
/// contrast) combination.
pub struct GramBundle {
    kernel_z: KernelSpec,
    kernel_w: KernelSpec,
    integration: Integration,
    contrast_name: String,
    n: usize,
    p_z: usize,
    p_w: usize,
    d_x: usize,
    /// Distinct (z, a, x) points, one row per cell.
    z_points: RowMatrix,
    /// Distinct (w, a, x) points.
    w_points: RowMatrix,
    row_zcell: Vec<usize>,
    row_wcell: Vec<usize>,
    joint: Vec<JointCell>,
    k_z: DMatrix<f64>,
    k_w1: DMatrix<f64>,
    k_w2: DMatrix<f64>,
    /// Contrast weight at each z-cell's own (a, x).
    pi_z: Vec<f64>,
    cnt_z: Vec<f64>,
    cnt_w: Vec<f64>,
    psd_ok_z: bool,
    psd_ok_w1: bool,
    data_digest: [u8; 32],
    notes: Vec<String>,
}

impl GramBundle {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gz(&self) -> usize {
        self.z_points.nrows()
    }

    pub fn gw(&self) -> usize {
        self.w_points.nrows()
    }

    pub fn k_z(&self) -> &DMatrix<f64> {
        &self.k_z
    }

    pub fn k_w1(&self) -> &DMatrix<f64> {
        &self.k_w1
    }

    pub fn k_w2(&self) -> &DMatrix<f64> {
        &self.k_w2
    }

    pub fn pi_z(&self) -> &[f64] {
        &self.pi_z
    }

    pub fn cnt_z(&self) -> &[f64] {
        &self.cnt_z
    }

    pub fn cnt_w(&self) -> &[f64] {
        &self.cnt_w
    }

    pub fn joint(&self) -> &[JointCell] {
        &self.joint
    }

    pub fn row_zcell(&self) -> &[usize] {
        &self.row_zcell
    }

    pub fn row_wcell(&self) -> &[usize] {
        &self.row_wcell
    }

    pub fn kernel_z(&self) -> &KernelSpec {
        &self.kernel_z
    }

    pub fn kernel_w(&self) -> &KernelSpec {
        &self.kernel_w
    }

    pub fn integration(&self) -> &Integration {
        &self.integration
    }

    pub fn psd_ok(&self) -> (bool, bool) {
        (self.psd_ok_z, self.psd_ok_w1)
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    /// (proxy, a, x) of z-cell `c`.
    pub fn z_point(&self, c: usize) -> (&[f64], f64, &[f64]) {
        split_point(self.z_points.row(c), self.p_z, self.d_x)
    }

    pub(crate) fn z_points(&self) -> &RowMatrix {
        &self.z_points
    }

    pub(crate) fn w_points(&self) -> &RowMatrix {
        &self.w_points
    }

    pub(crate) fn dims(&self) -> (usize, usize, usize) {
        (self.p_z, self.p_w, self.d_x)
    }

    /// (proxy, a, x) of w-cell `c`.
    pub fn w_point(&self, c: usize) -> (&[f64], f64, &[f64]) {
        split_point(self.w_points.row(c), self.p_w, self.d_x)
    }

    /// Errors unless the bundle was built from exactly this table.
    pub fn check_matches(&self, data: &ObservationTable) -> Result<()> {
        if table_digest(data) != self.data_digest {
            return Err(Error::validation(
                "gram bundle was built from different data than supplied",
            ));
        }
        Ok(())
    }

    /// Per-z-cell sums of y.
    pub fn sum_y_by_zcell(&self, data: &ObservationTable) -> DVector<f64> {
        let mut out = DVector::zeros(self.gz());
        for (i, &c) in self.row_zcell.iter().enumerate() {
            out[c] += data.y()[i];
        }
        out
    }

    /// L·v where L[cz, cw] is the joint row count: aggregates a per-w-cell
    /// vector into per-z-cell totals.
    pub fn lift_w_to_z(&self, per_wcell: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.gz());
        for j in &self.joint {
            out[j.z_cell] += j.count as f64 * per_wcell[j.w_cell];
        }
        out
    }

    /// Lᵀ·v: aggregates a per-z-cell vector into per-w-cell totals.
    pub fn lift_z_to_w(&self, per_zcell: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.gw());
        for j in &self.joint {
            out[j.w_cell] += j.count as f64 * per_zcell[j.z_cell];
        }
        out
    }

    /// L·F for a per-w-cell matrix F (gw×d) -> gz×d.
    pub fn lift_w_matrix_to_z(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.gz(), f.ncols());
        for j in &self.joint {
            let c = j.count as f64;
            for k in 0..f.ncols() {
                out[(j.z_cell, k)] += c * f[(j.w_cell, k)];
            }
        }
        out
    }

    /// Lᵀ·F for a per-z-cell matrix F (gz×d) -> gw×d.
    pub fn lift_z_matrix_to_w(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.gw(), f.ncols());
        for j in &self.joint {
            let c = j.count as f64;
            for k in 0..f.ncols() {
                out[(j.w_cell, k)] += c * f[(j.z_cell, k)];
            }
        }
        out
    }
}

fn split_point(row: &[f64], p: usize, d_x: usize) -> (&[f64], f64, &[f64]) {
    debug_assert_eq!(row.len(), p + 1 + d_x);
    (&row[..p], row[p], &row[p + 1..])
}

/// Groups rows of `points` by bitwise equality; returns (distinct rows in
/// first-occurrence order, row -> cell index).
fn group_points(points: &RowMatrix) -> (RowMatrix, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut distinct = RowMatrix::zero_rows(points.ncols());
    let mut map = Vec::with_capacity(points.nrows());
    for i in 0..points.nrows() {
        let row = points.row(i);
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let next = seen.len();
        let cell = *seen.entry(key).or_insert_with(|| {
            distinct.push_row(row);
            next
        });
        map.push(cell);
    }
    (distinct, map)
}

fn stack_points(data: &ObservationTable, use_z: bool) -> RowMatrix {
    let p = if use_z { data.p_z() } else { data.p_w() };
    let mut out = RowMatrix::zero_rows(p + 1 + data.d_x());
    let mut buf = vec![0.0; p + 1 + data.d_x()];
    for i in 0..data.n() {
        let proxy = if use_z { data.z_row(i) } else { data.w_row(i) };
        buf[..p].copy_from_slice(proxy);
        buf[p] = data.a()[i];
        buf[p + 1..].copy_from_slice(data.x_row(i));
        out.push_row(&buf);
    }
    out
}

/// Deterministic digest of a table's exact contents.
pub(crate) fn table_digest(data: &ObservationTable) -> [u8; 32] {
    let mut h = Sha256::new();
    for dim in [data.n(), data.p_w(), data.p_z(), data.d_x()] {
        h.update((dim as u64).to_le_bytes());
    }
    h.update(serde_json::to_vec(data.action_kind()).expect("action kind serializes"));
    for &v in data.y() {
        h.update(v.to_bits().to_le_bytes());
    }
    for &v in data.a() {
        h.update(v.to_bits().to_le_bytes());
    }
    for i in 0..data.n() {
        for &v in data.w_row(i) {
            h.update(v.to_bits().to_le_bytes());
        }
        for &v in data.z_row(i) {
            h.update(v.to_bits().to_le_bytes());
        }
        for &v in data.x_row(i) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Cache key binding a bundle to (data, kernels, contrast).
pub fn gram_cache_key(
    data: &ObservationTable,
    kernel_z: &KernelSpec,
    kernel_w: &KernelSpec,
    contrast: &ContrastSpec,
) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(table_digest(data));
    h.update(serde_json::to_vec(kernel_z)?);
    h.update(serde_json::to_vec(kernel_w)?);
    h.update(contrast.name().as_bytes());
    h.update(serde_json::to_vec(contrast.integration())?);
    Ok(h.finalize().into())
}

pub(crate) fn gram_matrix(
    kernel: &KernelSpec,
    points: &RowMatrix,
    p: usize,
    d_x: usize,
) -> DMatrix<f64> {
    let g = points.nrows();
    let mut buf = vec![0.0; g * g];
    buf.par_chunks_mut(g).enumerate().for_each(|(i, row)| {
        let (ui, ai, xi) = split_point(points.row(i), p, d_x);
        for (j, slot) in row.iter_mut().enumerate() {
            let (uj, aj, xj) = split_point(points.row(j), p, d_x);
            *slot = kernel.eval(ui, ai, xi, uj, aj, xj);
        }
    });
    DMatrix::from_row_slice(g, g, &buf)
}

fn psd_flag(k: &DMatrix<f64>) -> (bool, f64) {
    if k.nrows() == 0 {
        return (true, 0.0);
    }
    let eig = k.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    (min >= -1e-10 * max.max(1e-300), min)
}

/// Builds the Gram quantities both kernel fits consume.
pub fn build_gram_bundle(
    data: &ObservationTable,
    kernel_z: &KernelSpec,
    kernel_w: &KernelSpec,
    contrast: &ContrastSpec,
) -> Result<GramBundle> {
    if data.n() == 0 {
        return Err(Error::validation("gram bundle needs n >= 1"));
    }
    kernel_z.validate()?;
    kernel_w.validate()?;
    contrast.check_compatible(data.action_kind())?;

    let (z_points, row_zcell) = group_points(&stack_points(data, true));
    let (w_points, row_wcell) = group_points(&stack_points(data, false));

    let mut joint_idx: HashMap<(usize, usize), usize> = HashMap::new();
    let mut joint: Vec<JointCell> = Vec::new();
    for i in 0..data.n() {
        let key = (row_zcell[i], row_wcell[i]);
        match joint_idx.get(&key) {
            Some(&j) => joint[j].count += 1,
            None => {
                joint_idx.insert(key, joint.len());
                joint.push(JointCell { z_cell: key.0, w_cell: key.1, count: 1 });
            }
        }
    }

    let k_z = gram_matrix(kernel_z, &z_points, data.p_z(), data.d_x());
    let k_w1 = gram_matrix(kernel_w, &w_points, data.p_w(), data.d_x());

    let gw = w_points.nrows();
    let mut k_w2_buf = vec![0.0; gw * gw];
    k_w2_buf.par_chunks_mut(gw).enumerate().for_each(|(i, row)| {
        let anchor = split_point(w_points.row(i), data.p_w(), data.d_x());
        for (j, slot) in row.iter_mut().enumerate() {
            let (wj, _aj, xj) = split_point(w_points.row(j), data.p_w(), data.d_x());
            *slot = t_apply_kernel(kernel_w, contrast, anchor, (wj, xj));
        }
    });
    let k_w2 = DMatrix::from_row_slice(gw, gw, &k_w2_buf);

    let gz = z_points.nrows();
    let mut pi_z = vec![0.0; gz];
    for (c, slot) in pi_z.iter_mut().enumerate() {
        let (_zc, ac, xc) = split_point(z_points.row(c), data.p_z(), data.d_x());
        *slot = contrast.pi(ac, xc);
        if !slot.is_finite() {
            return Err(Error::computation(format!("contrast weight non-finite at cell {c}")));
        }
    }

    let mut cnt_z = vec![0.0; gz];
    for &c in &row_zcell {
        cnt_z[c] += 1.0;
    }
    let mut cnt_w = vec![0.0; gw];
    for &c in &row_wcell {
        cnt_w[c] += 1.0;
    }

    let mut notes = Vec::new();
    let (psd_ok_z, min_z) = psd_flag(&k_z);
    if !psd_ok_z {
        notes.push(format!("k_z minimum eigenvalue {min_z} below PSD tolerance"));
    }
    let (psd_ok_w1, min_w) = psd_flag(&k_w1);
    if !psd_ok_w1 {
        notes.push(format!("k_w1 minimum eigenvalue {min_w} below PSD tolerance"));
    }

    Ok(GramBundle {
        kernel_z: kernel_z.clone(),
        kernel_w: kernel_w.clone(),
        integration: contrast.integration().clone(),
        contrast_name: contrast.name().to_string(),
        n: data.n(),
        p_z: data.p_z(),
        p_w: data.p_w(),
        d_x: data.d_x(),
        z_points,
        w_points,
        row_zcell,
        row_wcell,
        joint,
        k_z,
        k_w1,
        k_w2,
        pi_z,
        cnt_z,
        cnt_w,
        psd_ok_z,
        psd_ok_w1,
        data_digest: table_digest(data),
        notes,
    })
}

const CACHE_MAGIC: &[u8; 8] = b"PBGB0001";

impl GramBundle {
    /// Writes the bundle to a binary sidecar bound to `key`.
    pub fn save_cache(&self, path: &Path, key: &[u8; 32]) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(key)?;
        w.write_all(&self.data_digest)?;
        for v in [
            self.n,
            self.p_z,
            self.p_w,
            self.d_x,
            self.z_points.ncols(),
            self.z_points.nrows(),
            self.w_points.ncols(),
            self.w_points.nrows(),
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.psd_ok_z), u8::from(self.psd_ok_w1)])?;
        for json in [
            serde_json::to_vec(&self.kernel_z)?,
            serde_json::to_vec(&self.kernel_w)?,
            serde_json::to_vec(&self.integration)?,
            self.contrast_name.as_bytes().to_vec(),
        ] {
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
        }
        for arr in [
            self.z_points.as_slice(),
            self.w_points.as_slice(),
            self.k_z.as_slice(),
            self.k_w1.as_slice(),
            self.k_w2.as_slice(),
            &self.pi_z,
            &self.cnt_z,
            &self.cnt_w,
        ] {
            write_f64s(&mut w, arr)?;
        }
        write_u64s(&mut w, self.row_zcell.iter().map(|&v| v as u64))?;
        write_u64s(&mut w, self.row_wcell.iter().map(|&v| v as u64))?;
        w.write_all(&(self.joint.len() as u64).to_le_bytes())?;
        for j in &self.joint {
            for v in [j.z_cell, j.w_cell, j.count] {
                w.write_all(&(v as u64).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a cached bundle. `Ok(None)` when the file is absent or was
    /// built under a different key; errors only on a corrupt file.
    pub fn load_cache(path: &Path, key: &[u8; 32]) -> Result<Option<GramBundle>> {
        let file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::validation("gram cache: bad magic"));
        }
        let mut stored_key = [0u8; 32];
        r.read_exact(&mut stored_key)?;
        if &stored_key != key {
            return Ok(None);
        }
        let mut data_digest = [0u8; 32];
        r.read_exact(&mut data_digest)?;
        let n = read_u64(&mut r)? as usize;
        let p_z = read_u64(&mut r)? as usize;
        let p_w = read_u64(&mut r)? as usize;
        let d_x = read_u64(&mut r)? as usize;
        let z_cols = read_u64(&mut r)? as usize;
        let gz = read_u64(&mut r)? as usize;
        let w_cols = read_u64(&mut r)? as usize;
        let gw = read_u64(&mut r)? as usize;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let kernel_z: KernelSpec = serde_json::from_slice(&read_bytes(&mut r)?)?;
        let kernel_w: KernelSpec = serde_json::from_slice(&read_bytes(&mut r)?)?;
        let integration: Integration = serde_json::from_slice(&read_bytes(&mut r)?)?;
        let contrast_name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::validation("gram cache: contrast name not UTF-8"))?;
        let z_points = RowMatrix::new(read_f64s(&mut r)?, z_cols)?;
        let w_points = RowMatrix::new(read_f64s(&mut r)?, w_cols)?;
        let k_z = DMatrix::from_column_slice(gz, gz, &read_f64s(&mut r)?);
        let k_w1 = DMatrix::from_column_slice(gw, gw, &read_f64s(&mut r)?);
        let k_w2 = DMatrix::from_column_slice(gw, gw, &read_f64s(&mut r)?);
        let pi_z = read_f64s(&mut r)?;
        let cnt_z = read_f64s(&mut r)?;
        let cnt_w = read_f64s(&mut r)?;
        let row_zcell: Vec<usize> = read_u64s(&mut r)?.into_iter().map(|v| v as usize).collect();
        let row_wcell: Vec<usize> = read_u64s(&mut r)?.into_iter().map(|v| v as usize).collect();
        let jn = read_u64(&mut r)? as usize;
        let mut joint = Vec::with_capacity(jn);
        for _ in 0..jn {
            joint.push(JointCell {
                z_cell: read_u64(&mut r)? as usize,
                w_cell: read_u64(&mut r)? as usize,
                count: read_u64(&mut r)? as usize,
            });
        }
        if z_points.nrows() != gz || w_points.nrows() != gw || row_zcell.len() != n {
            return Err(Error::validation("gram cache: inconsistent dimensions"));
        }
        Ok(Some(GramBundle {
            kernel_z,
            kernel_w,
            integration,
            contrast_name,
            n,
            p_z,
            p_w,
            d_x,
            z_points,
            w_points,
            row_zcell,
            row_wcell,
            joint,
            k_z,
            k_w1,
            k_w2,
            pi_z,
            cnt_z,
            cnt_w,
            psd_ok_z: flags[0] != 0,
            psd_ok_w1: flags[1] != 0,
            data_digest,
            notes: vec!["loaded from cache".to_string()],
        }))
    }
}

fn write_f64s<W: Write>(w: &mut W, arr: &[f64]) -> Result<()> {
    w.write_all(&(arr.len() as u64).to_le_bytes())?;
    for v in arr {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_u64s<W: Write>(w: &mut W, it: impl ExactSizeIterator<Item = u64>) -> Result<()> {
    w.write_all(&(it.len() as u64).to_le_bytes())?;
    for v in it {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u64(r)? as usize;
    if len > (1 << 30) {
        return Err(Error::validation("gram cache: implausible field length"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let len = read_u64(r)? as usize;
    if len > (1 << 28) {
        return Err(Error::validation("gram cache: implausible array length"));
    }
    let mut out = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn read_u64s<R: Read>(r: &mut R) -> Result<Vec<u64>> {
    let len = read_u64(r)? as usize;
    if len > (1 << 28) {
        return Err(Error::validation("gram cache: implausible array length"));
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_u64(r)?);
    }
    Ok(out)
}
