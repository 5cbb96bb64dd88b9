//! Independent verification of rearrangement runs.
//!
//! The verifier shares nothing with the engines: it reconstructs the source
//! from the run metadata and recomputes every checkpoint sum by naive
//! left-to-right summation over the stored permutation. Checks:
//!
//! - |S_{k_n} - b_n| <= 1/n (+ slack in float mode), with S recomputed;
//! - recorded checkpoint sums match the recomputed ones;
//! - checkpoints strictly increase;
//! - the permutation prefix is injective;
//! - identity off A (deviations only touch A, and map into A);
//! - surjectivity progress for constrained runs: after stage n the n
//!   smallest elements of A appear in the image.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::index_set::IndexSet;
use crate::rearrange::RearrangementResult;
use crate::run_record::RunRecord;
use crate::scalar::{Mode, Scalar, SumAccumulator};
use crate::series::{SeriesSource, TermStream};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageCheck {
    pub stage: u64,
    pub checkpoint: u64,
    pub recomputed: String,
    pub recorded: String,
    pub target: String,
    pub err: String,
    pub bound: String,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaChecks {
    pub injective: bool,
    pub identity_off_a: bool,
    pub surjectivity_progress: bool,
    pub monotone_checkpoints: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub mode: Mode,
    pub slack: f64,
    pub stages: Vec<StageCheck>,
    pub sigma_checks: SigmaChecks,
    pub overall: bool,
}

impl VerificationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,k_n,S,b,err,bound,ok\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.stage, s.checkpoint, s.recomputed, s.target, s.err, s.bound, s.ok
            ));
        }
        out
    }

    pub fn first_failed_stage(&self) -> Option<u64> {
        self.stages.iter().find(|s| !s.ok).map(|s| s.stage)
    }
}

/// Verifies an in-memory result against its source and constraint set.
pub fn verify(
    result: &RearrangementResult,
    source: &SeriesSource,
    a: &IndexSet,
    slack: f64,
) -> VerificationReport {
    let record_sums: Vec<String> = result.checkpoint_sums.iter().map(|s| s.to_string()).collect();
    let target_strs: Vec<String> = result.targets_used.iter().map(|s| s.to_string()).collect();
    run_checks(
        source,
        a,
        &result.sigma,
        &result.checkpoints,
        &record_sums,
        &target_strs,
        result.mode,
        slack,
        result.engine == "constrain",
    )
}

/// Verifies a run record, reconstructing the source from its metadata.
pub fn verify_record(record: &RunRecord) -> Result<VerificationReport> {
    let mode = record.meta.mode;
    let source = SeriesSource::parse_spec(&record.meta.series, mode)?;
    let sigma = record.sigma()?;
    Ok(run_checks(
        &source,
        &record.meta.set,
        &sigma,
        &record.checkpoints,
        &record.checkpoint_sums,
        &record.targets,
        mode,
        record.meta.slack,
        record.meta.engine == "constrain",
    ))
}

#[allow(clippy::too_many_arguments)]
fn run_checks(
    source: &SeriesSource,
    a: &IndexSet,
    sigma: &crate::permutation::PermutationPrefix,
    checkpoints: &[u64],
    recorded_sums: &[String],
    targets: &[String],
    mode: Mode,
    slack: f64,
    check_surjectivity: bool,
) -> VerificationReport {
    let slack_scalar = match mode {
        Mode::Exact => Scalar::zero(Mode::Exact),
        Mode::Float => Scalar::Float(slack.max(0.0)),
    };

    let monotone = checkpoints.windows(2).all(|w| w[0] < w[1])
        && checkpoints.first().map(|&k| k >= 1).unwrap_or(true);
    let injective = sigma.is_injective();
    let identity_off_a = sigma.identity_off(a);

    // Surjectivity progress: the n-th smallest element of A must be in the
    // image no later than position k_n.
    let surjectivity_progress = if check_surjectivity {
        let inverse = sigma.inverse_deviations();
        (1..=checkpoints.len() as u64).all(|n| {
            match a.enumerate(n) {
                Some(e) => match sigma.position_of_in(e, &inverse) {
                    Some(p) => p <= checkpoints[n as usize - 1],
                    None => false,
                },
                None => false,
            }
        })
    } else {
        true
    };

    // One naive pass over every position, recomputing sums from scratch.
    let mut stages = Vec::with_capacity(checkpoints.len());
    let mut acc = SumAccumulator::new(mode);
    let mut stream = TermStream::new(source, 1);
    let mut devs = sigma.deviations().iter().peekable();
    let mut next_checkpoint = 0usize;
    let last = checkpoints.last().copied().unwrap_or(0);
    let mut ok_all = monotone && injective && identity_off_a && surjectivity_progress;

    for j in 1..=last {
        let deviated = match devs.peek() {
            Some((&p, &v)) if p == j => {
                devs.next();
                Some(v)
            }
            _ => None,
        };
        match deviated {
            Some(v) => {
                // Keep the monotone stream aligned: consume and discard.
                let _ = stream.next_small();
                acc.add(&source.term(v));
            }
            None => match stream.next_small() {
                Some((num, den)) => {
                    if num == 1 || num == -1 {
                        acc.add_unit_fraction(num < 0, den);
                    } else if num != 0 {
                        acc.add(&Scalar::ratio(num, den as i64, mode));
                    }
                }
                None => acc.add(&source.term(j)),
            },
        }
        while next_checkpoint < checkpoints.len() && checkpoints[next_checkpoint] == j {
            let n = next_checkpoint as u64 + 1;
            let recomputed = acc.value(mode);
            let target = Scalar::parse(&targets[next_checkpoint], mode)
                .unwrap_or_else(|_| Scalar::zero(mode));
            let recorded = Scalar::parse(&recorded_sums[next_checkpoint], mode).ok();
            let err = recomputed.sub(&target).abs();
            let bound = Scalar::ratio(1, n as i64, mode).add(&slack_scalar);
            let bound_ok = err.le(&bound);
            let recorded_ok = match &recorded {
                Some(r) => r.sub(&recomputed).abs().le(&slack_scalar),
                None => false,
            };
            let ok = bound_ok && recorded_ok;
            ok_all &= ok;
            stages.push(StageCheck {
                stage: n,
                checkpoint: j,
                recomputed: recomputed.to_string(),
                recorded: recorded_sums[next_checkpoint].clone(),
                target: targets[next_checkpoint].clone(),
                err: err.to_string(),
                bound: bound.to_string(),
                ok,
            });
            next_checkpoint += 1;
        }
    }

    VerificationReport {
        mode,
        slack,
        stages,
        sigma_checks: SigmaChecks {
            injective,
            identity_off_a,
            surjectivity_progress,
            monotone_checkpoints: monotone,
        },
        overall: ok_all,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rearrange::{
        constrained_rearrange, riemann_rearrange, EngineOptions, TargetSeq, TargetSpec,
    };
    use crate::run_record::RunRecord;

    #[test]
    fn verifies_riemann_run() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let target = TargetSpec::Const(Scalar::ratio(1, 2, Mode::Exact));
        let r = riemann_rearrange(&src, &target, 30, &EngineOptions::default()).unwrap();
        let report = verify(&r, &src, &IndexSet::all(), 0.0);
        assert!(report.overall, "{report:?}");
        assert_eq!(report.stages.len(), 30);
    }

    #[test]
    fn verifies_constrained_run_with_progress() {
        let src = SeriesSource::altpow4ceil(Mode::Exact);
        let a = IndexSet::residues(4, vec![1, 2]).unwrap();
        let target = TargetSpec::Sequence(TargetSeq::Alternating);
        let r = constrained_rearrange(&src, &a, &target, 10, &EngineOptions::default()).unwrap();
        let report = verify(&r, &src, &a, 0.0);
        assert!(report.overall, "{report:?}");
        assert!(report.sigma_checks.surjectivity_progress);
    }

    #[test]
    fn empty_run_passes_vacuously() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let r = crate::rearrange::constrained_rearrange(
            &src,
            &IndexSet::all(),
            &TargetSpec::Sequence(TargetSeq::Zero),
            0,
            &EngineOptions::default(),
        )
        .unwrap();
        let report = verify(&r, &src, &IndexSet::all(), 0.0);
        assert!(report.overall);
        assert!(report.stages.is_empty());
    }

    #[test]
    fn tampered_sum_fails_at_that_stage() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let target = TargetSpec::Const(Scalar::ratio(1, 2, Mode::Exact));
        let r = riemann_rearrange(&src, &target, 12, &EngineOptions::default()).unwrap();
        let mut record = RunRecord::new(&r, "altharmonic", &IndexSet::all(), "const:1/2", 100, 0.0);
        // Perturb the recorded sum at stage 7 by 1.
        let s = Scalar::parse(&record.checkpoint_sums[6], Mode::Exact).unwrap();
        record.checkpoint_sums[6] = s.add(&Scalar::from_int(1, Mode::Exact)).to_string();
        let report = verify_record(&record).unwrap();
        assert!(!report.overall);
        assert_eq!(report.first_failed_stage(), Some(7));
        // All other stages still pass.
        assert!(report.stages.iter().filter(|s| !s.ok).count() == 1);
    }

    #[test]
    fn fabricated_noninjective_sigma_is_caught() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let target = TargetSpec::Const(Scalar::ratio(1, 2, Mode::Exact));
        let r = riemann_rearrange(&src, &target, 5, &EngineOptions::default()).unwrap();
        let mut record = RunRecord::new(&r, "altharmonic", &IndexSet::all(), "const:1/2", 100, 0.0);
        // Point two positions at the same index.
        record.sigma_prefix = vec![(1, 4), (2, 4)];
        let report = verify_record(&record).unwrap();
        assert!(!report.sigma_checks.injective);
        assert!(!report.overall);
    }
}
