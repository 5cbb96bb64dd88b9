//! Versioned on-disk form of a rearrangement run ("v1").
//!
//! The permutation is stored as its deviations from the identity, as
//! `[position, index]` pairs sorted by position, together with the covered
//! prefix length. Exact scalars serialize as `p/q` strings; float scalars as
//! shortest round-trip decimals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::permutation::PermutationPrefix;
use crate::rearrange::{RearrangementResult, StageRecord};
use crate::scalar::{Mode, Scalar, DEFAULT_FLOAT_SLACK};

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub engine: String,
    pub series: String,
    pub set: IndexSet,
    pub target: String,
    pub mode: Mode,
    pub slack: f64,
    pub stages: u64,
    pub budget: u64,
    pub prefix_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageLogEntry {
    pub stage: u64,
    pub checkpoint: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_prime: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_bound: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forced_position: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forced_index: Option<u64>,
    pub picks: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub meta: RunMeta,
    /// Deviations from the identity, sorted by position.
    pub sigma_prefix: Vec<(u64, u64)>,
    pub checkpoints: Vec<u64>,
    pub checkpoint_sums: Vec<String>,
    pub targets: Vec<String>,
    pub stage_log: Vec<StageLogEntry>,
}

impl RunRecord {
    pub fn new(
        result: &RearrangementResult,
        series: &str,
        set: &IndexSet,
        target: &str,
        budget: u64,
        slack: f64,
    ) -> Self {
        RunRecord {
            schema: SCHEMA_VERSION.into(),
            meta: RunMeta {
                engine: result.engine.clone(),
                series: series.into(),
                set: set.clone(),
                target: target.into(),
                mode: result.mode,
                slack,
                stages: result.stages(),
                budget,
                prefix_len: result.sigma.len(),
            },
            sigma_prefix: result
                .sigma
                .deviations()
                .iter()
                .map(|(&p, &v)| (p, v))
                .collect(),
            checkpoints: result.checkpoints.clone(),
            checkpoint_sums: result
                .checkpoint_sums
                .iter()
                .map(|s| s.to_string())
                .collect(),
            targets: result.targets_used.iter().map(|s| s.to_string()).collect(),
            stage_log: result
                .stage_log
                .iter()
                .map(|r: &StageRecord| StageLogEntry {
                    stage: r.stage,
                    checkpoint: r.checkpoint,
                    k_prime: r.k_prime,
                    tail_bound: r.tail_bound.as_ref().map(|b| b.to_string()),
                    forced_position: r.forced.map(|f| f.0),
                    forced_index: r.forced.map(|f| f.1),
                    picks: r.picks,
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: RunRecord = serde_json::from_str(text)?;
        if record.schema != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported run schema {:?}",
                record.schema
            )));
        }
        if record.checkpoints.len() != record.checkpoint_sums.len()
            || record.checkpoints.len() != record.targets.len()
        {
            return Err(Error::InvalidArgument(
                "checkpoint, sum, and target arrays must have equal length".into(),
            ));
        }
        Ok(record)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run record serializes")
    }

    pub fn sigma(&self) -> Result<PermutationPrefix> {
        let deviations: BTreeMap<u64, u64> = self.sigma_prefix.iter().copied().collect();
        PermutationPrefix::from_deviations(self.meta.prefix_len, deviations)
    }

    pub fn parse_scalar(&self, text: &str) -> Result<Scalar> {
        Scalar::parse(text, self.meta.mode)
    }
}

pub fn default_slack(mode: Mode) -> f64 {
    match mode {
        Mode::Exact => 0.0,
        Mode::Float => DEFAULT_FLOAT_SLACK,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rearrange::{riemann_rearrange, EngineOptions, TargetSpec};
    use crate::series::SeriesSource;

    #[test]
    fn round_trip() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let target = TargetSpec::Const(Scalar::ratio(1, 2, Mode::Exact));
        let result =
            riemann_rearrange(&src, &target, 10, &EngineOptions::default()).unwrap();
        let record = RunRecord::new(
            &result,
            "altharmonic",
            &IndexSet::all(),
            "const:1/2",
            1000,
            0.0,
        );
        let text = record.to_json();
        let back = RunRecord::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        assert_eq!(back.sigma().unwrap(), result.sigma);
        assert_eq!(back.checkpoints, result.checkpoints);
    }
}
