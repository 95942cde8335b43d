//! Offline synthesis of the full lookup law: segment table, condensed
//! problems and explored regions.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::explicit::{explore, EngineError, ExplicitSolution, ExploreReport, ExploreSettings, ThetaBox};
use crate::model::{DiscreteModel, ModelError, NdcParams};
use crate::mpqp::{build, ConfigError, MpcConfig, MpqpProblem};
use crate::par;
use crate::segments::{Breakpoint, SegmentError, SegmentTable};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Segments(#[from] SegmentError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("segment {segment}: {source}")]
    Explore {
        segment: usize,
        source: EngineError,
    },
}

#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub solution: ExplicitSolution,
    pub report: ExploreReport,
    pub wall_time: Duration,
}

/// Linear models and problems shared by all controllers of one setup.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: NdcParams,
    pub model: DiscreteModel,
    pub table: SegmentTable,
    pub mpc: MpcConfig,
    pub problems: Vec<MpqpProblem>,
}

impl Plant {
    pub fn new(params: NdcParams, breakpoints: &[Breakpoint], mpc: MpcConfig, dt: f64) -> Result<Self, SynthesisError> {
        params.validate()?;
        mpc.validate()?;
        let model = params.discretize(dt)?;
        let table = SegmentTable::build(&params, breakpoints, mpc.gamma1)?;
        let problems = table
            .segments
            .iter()
            .map(|s| build(&model, s, &mpc, s.index))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            params,
            model,
            table,
            mpc,
            problems,
        })
    }

    /// Explores every segment, in parallel when enabled. The first failing
    /// segment is reported.
    pub fn synthesize(&self, bbox: &ThetaBox, settings: &ExploreSettings) -> Result<Vec<SegmentOutcome>, SynthesisError> {
        self.synthesize_each(bbox, settings).into_iter().collect()
    }

    /// Per-segment results, in table order.
    pub fn synthesize_each(
        &self,
        bbox: &ThetaBox,
        settings: &ExploreSettings,
    ) -> Vec<Result<SegmentOutcome, SynthesisError>> {
        par::map(&self.problems, |p| {
            let t0 = Instant::now();
            explore(p, bbox, settings)
                .map(|(solution, report)| SegmentOutcome {
                    solution,
                    report,
                    wall_time: t0.elapsed(),
                })
                .map_err(|source| SynthesisError::Explore {
                    segment: p.segment_index,
                    source,
                })
        })
    }
}
