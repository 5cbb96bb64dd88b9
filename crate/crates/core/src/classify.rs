//! Potential-conditional-convergence classification and topological sums.
//!
//! Analytic verdicts come from builtin certificates only. Empirical verdicts
//! are finite-horizon evidence computed in f64 and are labeled as such; they
//! are never treated as proofs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::{KahanSum, Scalar};
use crate::series::{SeriesSource, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum ClassifyPolicy {
    Analytic,
    Empirical {
        horizon: u64,
        divergence_threshold: f64,
        smallness_threshold: f64,
    },
}

impl ClassifyPolicy {
    pub fn empirical_default() -> Self {
        ClassifyPolicy::Empirical {
            horizon: 100_000,
            divergence_threshold: 10.0,
            smallness_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PccReport {
    pub cond_a: Verdict,
    pub cond_b: Verdict,
    pub cond_c: Verdict,
    pub evidence: ClassifyPolicy,
}

impl PccReport {
    pub fn overall(&self) -> Verdict {
        let all = [self.cond_a, self.cond_b, self.cond_c];
        if all.iter().any(|v| *v == Verdict::Fails) {
            Verdict::Fails
        } else if all.iter().all(|v| *v == Verdict::Holds) {
            Verdict::Holds
        } else {
            Verdict::Inconclusive
        }
    }

    pub fn holds(&self) -> bool {
        self.overall() == Verdict::Holds
    }
}

/// Classifies Σa_n⁺ = ∞, Σa_n⁻ = ∞, a_n → 0.
pub fn classify_pcc(source: &SeriesSource, policy: ClassifyPolicy) -> PccReport {
    match policy {
        ClassifyPolicy::Analytic => {
            let (a, b, c) = source
                .certificates()
                .pcc
                .unwrap_or((Verdict::Inconclusive, Verdict::Inconclusive, Verdict::Inconclusive));
            PccReport {
                cond_a: a,
                cond_b: b,
                cond_c: c,
                evidence: policy,
            }
        }
        ClassifyPolicy::Empirical {
            horizon,
            divergence_threshold,
            smallness_threshold,
        } => {
            let horizon = match source.finite_len() {
                Some(len) => horizon.min(len),
                None => horizon,
            }
            .max(1);
            let mut pos = KahanSum::default();
            let mut neg = KahanSum::default();
            // Magnitude maxima over the last quarter and the quarter before,
            // for the decay-trend test of condition (c).
            let q3 = horizon - horizon / 4;
            let q2 = horizon / 2;
            let mut max_last = 0.0f64;
            let mut max_prev = 0.0f64;
            for n in 1..=horizon {
                let v = match source.term_small(n) {
                    Some((num, den)) => num as f64 / den as f64,
                    None => source.term(n).to_f64(),
                };
                if v > 0.0 {
                    pos.add(v);
                } else if v < 0.0 {
                    neg.add(-v);
                }
                let mag = v.abs();
                if n > q3 {
                    max_last = max_last.max(mag);
                } else if n > q2 {
                    max_prev = max_prev.max(mag);
                }
            }
            let verdict_sum = |s: f64| {
                if s > divergence_threshold {
                    Verdict::Holds
                } else {
                    Verdict::Inconclusive
                }
            };
            let cond_c = if max_last < smallness_threshold {
                Verdict::Holds
            } else if max_last >= max_prev {
                // Large terms persist with no decay trend.
                Verdict::Fails
            } else {
                Verdict::Inconclusive
            };
            PccReport {
                cond_a: verdict_sum(pos.value()),
                cond_b: verdict_sum(neg.value()),
                cond_c,
                evidence: policy,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologicalSum {
    Certified { value: String, index: u64 },
    Uncertified { value: String, horizon: u64 },
    PlusInfinity,
    MinusInfinity,
    Undecided,
}

/// Estimates the sum of the series.
///
/// With a tail oracle the estimate is a certified enclosure: the returned
/// partial sum A_m satisfies |A_m - Σ| <= tol. Without one, a finite-horizon
/// Cauchy-window heuristic runs and the outcome is labeled uncertified.
pub fn topological_sum(source: &SeriesSource, tol: &Scalar, horizon: u64) -> Result<TopologicalSum> {
    assert!(tol.is_positive(), "tolerance must be positive");
    if source.has_tail_oracle() {
        let mut m = if source.tail_bound(0)?.le(tol) {
            0
        } else {
            source.tail_index_for(tol, 0)?
        };
        if let Some(len) = source.finite_len() {
            m = m.min(len);
        }
        let mode = source.mode();
        let mut acc = crate::scalar::SumAccumulator::new(mode);
        let mut stream = crate::series::TermStream::new(source, 1);
        for _ in 0..m {
            match stream.next_small() {
                Some((num, den)) => {
                    if num == 1 || num == -1 {
                        acc.add_unit_fraction(num < 0, den);
                    } else if num != 0 {
                        acc.add(&Scalar::ratio(num, den as i64, mode));
                    }
                }
                None => acc.add(&stream.next_term()),
            }
        }
        return Ok(TopologicalSum::Certified {
            value: acc.value(mode).to_string(),
            index: m,
        });
    }

    // Heuristic path: inspect the partial-sum trajectory up to the horizon.
    let horizon = horizon.max(16);
    let mut sum = KahanSum::default();
    let window = (horizon / 10).max(2);
    let wstart = horizon - window;
    let mut wmin = f64::INFINITY;
    let mut wmax = f64::NEG_INFINITY;
    let mut monotone_up = true;
    let mut monotone_down = true;
    let mut prev = 0.0;
    let mut half_value = 0.0;
    for n in 1..=horizon {
        let v = match source.term_small(n) {
            Some((num, den)) => num as f64 / den as f64,
            None => source.term(n).to_f64(),
        };
        sum.add(v);
        let s = sum.value();
        if n == horizon / 2 {
            half_value = s;
        }
        if n > horizon / 2 {
            if s < prev {
                monotone_up = false;
            }
            if s > prev {
                monotone_down = false;
            }
        }
        if n > wstart {
            wmin = wmin.min(s);
            wmax = wmax.max(s);
        }
        prev = s;
    }
    let tolf = tol.to_f64();
    let last = sum.value();
    if wmax - wmin <= tolf {
        return Ok(TopologicalSum::Uncertified {
            value: Scalar::Float(last).to_string(),
            horizon,
        });
    }
    if monotone_up && last - half_value > tolf.max(f64::EPSILON) {
        return Ok(TopologicalSum::PlusInfinity);
    }
    if monotone_down && half_value - last > tolf.max(f64::EPSILON) {
        return Ok(TopologicalSum::MinusInfinity);
    }
    Ok(TopologicalSum::Undecided)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Mode;
    use crate::series::restrict;
    use crate::index_set::IndexSet;

    #[test]
    fn analytic_verdicts() {
        let r = classify_pcc(&SeriesSource::altharmonic(Mode::Exact), ClassifyPolicy::Analytic);
        assert!(r.holds());
        let r = classify_pcc(&SeriesSource::altsign(Mode::Exact), ClassifyPolicy::Analytic);
        assert_eq!(r.cond_c, Verdict::Fails);
        assert_eq!(r.overall(), Verdict::Fails);
        // All-positive series: no negative mass.
        let geo = SeriesSource::geometric(num::BigRational::new(1.into(), 2.into()), Mode::Float)
            .unwrap();
        let r = classify_pcc(&geo, ClassifyPolicy::Analytic);
        assert_eq!(r.cond_b, Verdict::Fails);
    }

    #[test]
    fn classification_is_deterministic() {
        let src = SeriesSource::triples(Mode::Float);
        let policy = ClassifyPolicy::Empirical {
            horizon: 50_000,
            divergence_threshold: 5.0,
            smallness_threshold: 1e-3,
        };
        assert_eq!(classify_pcc(&src, policy), classify_pcc(&src, policy));
    }

    #[test]
    fn empirical_on_triples() {
        let src = SeriesSource::triples(Mode::Float);
        let r = classify_pcc(
            &src,
            ClassifyPolicy::Empirical {
                horizon: 100_000,
                divergence_threshold: 10.0,
                smallness_threshold: 1e-3,
            },
        );
        // Positive mass 2*H_33333 ≈ 21, negative ≈ 10.5.
        assert_eq!(r.cond_a, Verdict::Holds);
        assert_eq!(r.cond_b, Verdict::Holds);
        assert_eq!(r.cond_c, Verdict::Holds);
    }

    #[test]
    fn empirical_inconclusive_on_altsign() {
        let src = SeriesSource::altsign(Mode::Float);
        let r = classify_pcc(
            &src,
            ClassifyPolicy::Empirical {
                horizon: 10_000,
                divergence_threshold: 10.0,
                smallness_threshold: 1e-3,
            },
        );
        assert_eq!(r.cond_a, Verdict::Holds);
        assert_eq!(r.cond_c, Verdict::Fails);
    }

    #[test]
    fn certified_sum_of_altharmonic_hits_ln2() {
        let src = SeriesSource::altharmonic(Mode::Float);
        let tol = Scalar::Float(1e-4);
        match topological_sum(&src, &tol, 1000).unwrap() {
            TopologicalSum::Certified { value, .. } => {
                let v: f64 = value.parse().unwrap();
                assert!((v - std::f64::consts::LN_2).abs() <= 1e-4);
            }
            other => panic!("expected certified, got {other:?}"),
        }
    }

    #[test]
    fn zero_series_certified() {
        let zero = restrict(
            &SeriesSource::altharmonic(Mode::Exact),
            &IndexSet::complement(IndexSet::all()),
        );
        match topological_sum(&zero, &Scalar::ratio(1, 100, Mode::Exact), 100).unwrap() {
            TopologicalSum::Certified { value, .. } => assert_eq!(value, "0"),
            other => panic!("expected certified zero, got {other:?}"),
        }
    }

    #[test]
    fn harmonic_blows_up() {
        // 1/n has no oracle here: feed it as a derived rule.
        struct Harmonic;
        impl crate::series::DerivedRule for Harmonic {
            fn label(&self) -> String {
                "harmonic".into()
            }
            fn term(&self, n: u64, mode: Mode) -> Scalar {
                match mode {
                    Mode::Float => Scalar::Float(1.0 / n as f64),
                    Mode::Exact => Scalar::ratio(1, n as i64, Mode::Exact),
                }
            }
            fn term_small(&self, n: u64) -> Option<(i64, u64)> {
                Some((1, n))
            }
        }
        let src = SeriesSource::from_derived(std::sync::Arc::new(Harmonic), Mode::Float);
        match topological_sum(&src, &Scalar::Float(1e-3), 1_000_000).unwrap() {
            TopologicalSum::PlusInfinity => {}
            other => panic!("expected +inf, got {other:?}"),
        }
    }
}
