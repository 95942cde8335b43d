//! Multi-segment linearization of the output map.
//!
//! Each segment replaces h(Vs) by its tangent at an operating point and
//! R0(Vs) by its value there, which turns the output map into `C x + D`.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NdcParams;

pub type OutputMatrix = SMatrix<f64, 5, 3>;
pub type OutputOffset = SVector<f64, 5>;

/// Output rows of the linear map.
pub const Y_SOC: usize = 0;
pub const Y_VS: usize = 1;
pub const Y_CURRENT: usize = 2;
pub const Y_VOLTAGE: usize = 3;
pub const Y_ETA: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("segment table is empty")]
    Empty,
    #[error("segment {index}: range [{lo}, {hi}] is empty or reversed")]
    EmptyRange { index: usize, lo: f64, hi: f64 },
    #[error("segment {index}: operating point {op} lies outside [{lo}, {hi}]")]
    OperatingPointOutside { index: usize, op: f64, lo: f64, hi: f64 },
    #[error("segments {prev} and {next} leave a gap or overlap ({end} vs {start})")]
    NotContiguous {
        prev: usize,
        next: usize,
        end: f64,
        start: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub lambda1: f64,
    pub lambda2: f64,
    pub r0: f64,
}

/// Tangent of h and value of R0 at `vs_op`.
pub fn linearize_at(params: &NdcParams, vs_op: f64) -> Linearization {
    let lambda1 = params.ocv_slope(vs_op);
    Linearization {
        lambda1,
        lambda2: params.ocv(vs_op) - lambda1 * vs_op,
        r0: params.r0(vs_op),
    }
}

/// Linear output map `y = C x + D` for an arbitrary linearization.
pub fn output_map(
    params: &NdcParams,
    lin: &Linearization,
    gamma1: f64,
) -> (OutputMatrix, OutputOffset) {
    let total = params.cb + params.cs;
    let (eta_b, eta_s) = params.eta_coefficients(gamma1);
    #[rustfmt::skip]
    let c = OutputMatrix::new(
        params.cb / total, params.cs / total, 0.0,
        0.0, 1.0, 0.0,
        0.0, 0.0, 1.0,
        0.0, lin.lambda1, lin.r0,
        eta_b, eta_s, 0.0,
    );
    let d = OutputOffset::new(0.0, 0.0, 0.0, lin.lambda2, 0.0);
    (c, d)
}

/// Row of a segment definition: range and operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breakpoint {
    pub vs_lo: f64,
    pub vs_hi: f64,
    pub vs_op: f64,
}

impl Breakpoint {
    pub const fn new(vs_lo: f64, vs_hi: f64, vs_op: f64) -> Self {
        Self { vs_lo, vs_hi, vs_op }
    }
}

/// The nine-segment setting used for the reference cell.
pub fn default_breakpoints() -> Vec<Breakpoint> {
    vec![
        Breakpoint::new(0.20, 0.50, 0.39),
        Breakpoint::new(0.50, 0.60, 0.60),
        Breakpoint::new(0.60, 0.70, 0.70),
        Breakpoint::new(0.70, 0.74, 0.74),
        Breakpoint::new(0.74, 0.78, 0.78),
        Breakpoint::new(0.78, 0.81, 0.81),
        Breakpoint::new(0.81, 0.84, 0.84),
        Breakpoint::new(0.84, 0.87, 0.87),
        Breakpoint::new(0.87, 0.90, 0.90),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSegment {
    /// 1-based.
    pub index: usize,
    pub vs_lo: f64,
    pub vs_hi: f64,
    pub vs_op: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub r0_const: f64,
    pub c_mat: OutputMatrix,
    pub d_vec: OutputOffset,
}

impl LinearSegment {
    pub fn linearization(&self) -> Linearization {
        Linearization {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            r0: self.r0_const,
        }
    }

    pub fn outputs(&self, x: &Vector3<f64>) -> OutputOffset {
        self.c_mat * x + self.d_vec
    }
}

/// Where a surface voltage falls in the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentChoice {
    /// 0-based position in [`SegmentTable::segments`].
    pub position: usize,
    /// Set when Vs was outside the covered range and got clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTable {
    pub segments: Vec<LinearSegment>,
    pub gamma1: f64,
}

impl SegmentTable {
    pub fn build(
        params: &NdcParams,
        breakpoints: &[Breakpoint],
        gamma1: f64,
    ) -> Result<Self, SegmentError> {
        if breakpoints.is_empty() {
            return Err(SegmentError::Empty);
        }
        for (i, b) in breakpoints.iter().enumerate() {
            if !(b.vs_lo < b.vs_hi) {
                return Err(SegmentError::EmptyRange {
                    index: i + 1,
                    lo: b.vs_lo,
                    hi: b.vs_hi,
                });
            }
            if !(b.vs_lo..=b.vs_hi).contains(&b.vs_op) {
                return Err(SegmentError::OperatingPointOutside {
                    index: i + 1,
                    op: b.vs_op,
                    lo: b.vs_lo,
                    hi: b.vs_hi,
                });
            }
        }
        for (i, w) in breakpoints.windows(2).enumerate() {
            if w[0].vs_hi != w[1].vs_lo {
                return Err(SegmentError::NotContiguous {
                    prev: i + 1,
                    next: i + 2,
                    end: w[0].vs_hi,
                    start: w[1].vs_lo,
                });
            }
        }

        let segments = breakpoints
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let lin = linearize_at(params, b.vs_op);
                let (c_mat, d_vec) = output_map(params, &lin, gamma1);
                LinearSegment {
                    index: i + 1,
                    vs_lo: b.vs_lo,
                    vs_hi: b.vs_hi,
                    vs_op: b.vs_op,
                    lambda1: lin.lambda1,
                    lambda2: lin.lambda2,
                    r0_const: lin.r0,
                    c_mat,
                    d_vec,
                }
            })
            .collect();
        Ok(Self { segments, gamma1 })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn coverage(&self) -> (f64, f64) {
        (
            self.segments.first().map_or(f64::NAN, |s| s.vs_lo),
            self.segments.last().map_or(f64::NAN, |s| s.vs_hi),
        )
    }

    /// Half-open lookup: a shared endpoint belongs to the upper segment,
    /// the last segment is closed, and Vs outside the coverage clamps to
    /// the nearest end segment.
    pub fn select(&self, vs: f64) -> SegmentChoice {
        let (lo, hi) = self.coverage();
        let last = self.segments.len() - 1;
        if vs < lo {
            return SegmentChoice {
                position: 0,
                clamped: true,
            };
        }
        if vs > hi {
            return SegmentChoice {
                position: last,
                clamped: true,
            };
        }
        let position = self
            .segments
            .iter()
            .position(|s| vs >= s.vs_lo && vs < s.vs_hi)
            .unwrap_or(last);
        SegmentChoice {
            position,
            clamped: false,
        }
    }

    pub fn rows(&self) -> Vec<SegmentRow> {
        self.segments
            .iter()
            .map(|s| SegmentRow {
                index: s.index,
                vs_lo: s.vs_lo,
                vs_hi: s.vs_hi,
                vs_op: s.vs_op,
                lambda1: s.lambda1,
                lambda2: s.lambda2,
                r0: s.r0_const,
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&SegmentTableFile {
            gamma1: self.gamma1,
            segments: self.rows(),
        })
    }

    /// Rebuilds a table from its exported form. The linearization columns
    /// are taken as given, so an edited file overrides the model.
    pub fn from_json(params: &NdcParams, json: &str) -> Result<Self, SegmentImportError> {
        let file: SegmentTableFile = serde_json::from_str(json)?;
        let breakpoints: Vec<Breakpoint> = file
            .segments
            .iter()
            .map(|r| Breakpoint::new(r.vs_lo, r.vs_hi, r.vs_op))
            .collect();
        let mut table = Self::build(params, &breakpoints, file.gamma1)?;
        for (seg, row) in table.segments.iter_mut().zip(&file.segments) {
            let lin = Linearization {
                lambda1: row.lambda1,
                lambda2: row.lambda2,
                r0: row.r0,
            };
            let (c, d) = output_map(params, &lin, file.gamma1);
            seg.lambda1 = lin.lambda1;
            seg.lambda2 = lin.lambda2;
            seg.r0_const = lin.r0;
            seg.c_mat = c;
            seg.d_vec = d;
        }
        Ok(table)
    }
}

#[derive(Debug, Error)]
pub enum SegmentImportError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

/// Exported table row, one per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRow {
    pub index: usize,
    pub vs_lo: f64,
    pub vs_hi: f64,
    pub vs_op: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub r0: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentTableFile {
    gamma1: f64,
    segments: Vec<SegmentRow>,
}
