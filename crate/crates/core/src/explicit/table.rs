//! Lookup-table files.
//!
//! JSON layout:
//!
//! ```text
//! { "version": 1, "segment_count": S, "nu": Nu, "theta_dim": 5,
//!   "locate_tol": 1e-9, "rounding": null | digits,
//!   "segments": [ { "segment_index": i, "theta_box": {"lo": [..], "hi": [..]},
//!                   "regions": [ { "p": p, "E": [p*5, row-major], "e": [p],
//!                                  "K": [Nu*5, row-major], "g": [Nu],
//!                                  "active_set": [..] } ] } ] }
//! ```
//!
//! The binary layout stores the same fields in the same order, little
//! endian: magic `NDCTABLE`, u32 version, u32 segment count, u32 Nu, u32
//! theta dim, f64 locate tol, i32 rounding (-1 for none); per segment u32
//! index, 5 f64 lower bounds, 5 f64 upper bounds, u32 region count; per
//! region u32 p, E, e, K, g as f64, u32 active count, u32 indices.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CriticalRegion, EngineError, ExplicitSolution, ThetaBox, LOCATE_TOL};
use crate::fsutil::write_atomic;
use crate::mpqp::THETA_DIM;

pub const TABLE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NDCTABLE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Json,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableFile {
    pub locate_tol: f64,
    /// Decimal places the entries were rounded to, if any.
    pub rounding: Option<i32>,
    pub solutions: Vec<ExplicitSolution>,
}

impl TableFile {
    pub fn new(solutions: Vec<ExplicitSolution>) -> Self {
        Self {
            locate_tol: LOCATE_TOL,
            rounding: None,
            solutions,
        }
    }

    pub fn rounded(&self, decimals: i32) -> Self {
        Self {
            locate_tol: self.locate_tol,
            rounding: Some(decimals),
            solutions: self.solutions.iter().map(|s| s.rounded(decimals)).collect(),
        }
    }

    pub fn stored_reals(&self) -> usize {
        self.solutions.iter().map(|s| s.stats().stored_reals).sum()
    }

    fn nu(&self) -> usize {
        self.solutions.first().map_or(0, |s| s.nu)
    }

    pub fn to_json(&self) -> String {
        let file = JsonFile {
            version: TABLE_VERSION,
            segment_count: self.solutions.len(),
            nu: self.nu(),
            theta_dim: THETA_DIM,
            locate_tol: self.locate_tol,
            rounding: self.rounding,
            segments: self
                .solutions
                .iter()
                .map(|s| JsonSegment {
                    segment_index: s.segment_index,
                    theta_box: s.theta_box,
                    regions: s.regions.iter().map(JsonRegion::from).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: JsonFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.version != TABLE_VERSION {
            return Err(format!("unsupported version {}", file.version));
        }
        if file.theta_dim != THETA_DIM {
            return Err(format!("theta_dim {} != {THETA_DIM}", file.theta_dim));
        }
        if file.segment_count != file.segments.len() {
            return Err("segment_count does not match segments".into());
        }
        let nu = file.nu;
        let solutions = file
            .segments
            .into_iter()
            .map(|seg| {
                let regions = seg
                    .regions
                    .into_iter()
                    .map(|r| r.into_region(nu, seg.segment_index))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ExplicitSolution {
                    segment_index: seg.segment_index,
                    nu,
                    theta_box: seg.theta_box,
                    regions,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Self {
            locate_tol: file.locate_tol,
            rounding: file.rounding,
            solutions,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, TABLE_VERSION as usize);
        put_u32(&mut out, self.solutions.len());
        put_u32(&mut out, self.nu());
        put_u32(&mut out, THETA_DIM);
        out.extend_from_slice(&self.locate_tol.to_le_bytes());
        out.extend_from_slice(&self.rounding.unwrap_or(-1).to_le_bytes());
        for s in &self.solutions {
            put_u32(&mut out, s.segment_index);
            for v in s.theta_box.lo.iter().chain(&s.theta_box.hi) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, s.regions.len());
            for r in &s.regions {
                put_u32(&mut out, r.e_mat.nrows());
                put_row_major(&mut out, &r.e_mat);
                put_f64s(&mut out, r.e_vec.iter());
                put_row_major(&mut out, &r.k);
                put_f64s(&mut out, r.g.iter());
                put_u32(&mut out, r.active_set.len());
                for &a in &r.active_set {
                    put_u32(&mut out, a);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = rd.u32()?;
        if version != TABLE_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let segments = rd.u32()? as usize;
        let nu = rd.u32()? as usize;
        let theta_dim = rd.u32()? as usize;
        if theta_dim != THETA_DIM {
            return Err(format!("theta_dim {theta_dim} != {THETA_DIM}"));
        }
        let locate_tol = rd.f64()?;
        let rounding = match i32::from_le_bytes(rd.take(4)?.try_into().unwrap()) {
            -1 => None,
            d => Some(d),
        };
        let mut solutions = Vec::with_capacity(segments.min(1024));
        for _ in 0..segments {
            let segment_index = rd.u32()? as usize;
            let mut theta_box = ThetaBox::default();
            for v in theta_box.lo.iter_mut().chain(theta_box.hi.iter_mut()) {
                *v = rd.f64()?;
            }
            let n_regions = rd.u32()? as usize;
            let mut regions = Vec::with_capacity(n_regions.min(1 << 16));
            for _ in 0..n_regions {
                let p = rd.u32()? as usize;
                let e_mat = DMatrix::from_row_slice(p, THETA_DIM, &rd.f64s(p * THETA_DIM)?);
                let e_vec = DVector::from_vec(rd.f64s(p)?);
                let k = DMatrix::from_row_slice(nu, THETA_DIM, &rd.f64s(nu * THETA_DIM)?);
                let g = DVector::from_vec(rd.f64s(nu)?);
                let na = rd.u32()? as usize;
                let active_set = (0..na)
                    .map(|_| rd.u32().map(|v| v as usize))
                    .collect::<Result<Vec<_>, _>>()?;
                regions.push(CriticalRegion {
                    e_mat,
                    e_vec,
                    k,
                    g,
                    active_set,
                    segment_index,
                });
            }
            solutions.push(ExplicitSolution {
                segment_index,
                nu,
                theta_box,
                regions,
            });
        }
        if rd.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self {
            locate_tol,
            rounding,
            solutions,
        })
    }
}

pub fn export_table(table: &TableFile, path: &Path, format: TableFormat) -> Result<(), EngineError> {
    let bytes = match format {
        TableFormat::Json => table.to_json().into_bytes(),
        TableFormat::Binary => table.to_bytes(),
    };
    write_atomic(path, &bytes).map_err(|source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads either format, told apart by the binary magic.
pub fn import_table(path: &Path) -> Result<TableFile, EngineError> {
    let bytes = fs::read(path).map_err(|source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed = if bytes.starts_with(MAGIC) {
        TableFile::from_bytes(&bytes)
    } else {
        std::str::from_utf8(&bytes)
            .map_err(|e| e.to_string())
            .and_then(TableFile::from_json)
    };
    parsed.map_err(|reason| EngineError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vals: impl Iterator<Item = &'a f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        put_f64s(out, m.row(i).iter());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonFile {
    version: u32,
    segment_count: usize,
    nu: usize,
    theta_dim: usize,
    locate_tol: f64,
    rounding: Option<i32>,
    segments: Vec<JsonSegment>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSegment {
    segment_index: usize,
    theta_box: ThetaBox,
    regions: Vec<JsonRegion>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRegion {
    p: usize,
    #[serde(rename = "E")]
    e_mat: Vec<f64>,
    e: Vec<f64>,
    #[serde(rename = "K")]
    k: Vec<f64>,
    g: Vec<f64>,
    active_set: Vec<usize>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<&CriticalRegion> for JsonRegion {
    fn from(r: &CriticalRegion) -> Self {
        Self {
            p: r.e_mat.nrows(),
            e_mat: row_major(&r.e_mat),
            e: r.e_vec.as_slice().to_vec(),
            k: row_major(&r.k),
            g: r.g.as_slice().to_vec(),
            active_set: r.active_set.clone(),
        }
    }
}

impl JsonRegion {
    fn into_region(self, nu: usize, segment_index: usize) -> Result<CriticalRegion, String> {
        if self.e_mat.len() != self.p * THETA_DIM
            || self.e.len() != self.p
            || self.k.len() != nu * THETA_DIM
            || self.g.len() != nu
        {
            return Err("region dimensions do not match header".into());
        }
        Ok(CriticalRegion {
            e_mat: DMatrix::from_row_slice(self.p, THETA_DIM, &self.e_mat),
            e_vec: DVector::from_vec(self.e),
            k: DMatrix::from_row_slice(nu, THETA_DIM, &self.k),
            g: DVector::from_vec(self.g),
            active_set: self.active_set,
            segment_index,
        })
    }
}
