//! Sequence representatives, c0-equivalence monitoring, quotient series, and
//! subnumber extraction.
//!
//! A represented real sequence here is always a concrete rule; equivalence
//! classes are never materialized. Monitoring against a tolerance schedule is
//! finite-horizon evidence, deliberately labeled as such, never a limit proof.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rearrange::RearrangementResult;
use crate::scalar::{Mode, Scalar, SumAccumulator};
use crate::series::{partial_sums, DerivedRule, SegmentFilter, SeriesSource};

/// A concrete representative of a real sequence, total on n >= 1.
#[derive(Clone)]
pub struct HyperRep {
    backing: Backing,
    pub label: String,
}

#[derive(Clone)]
enum Backing {
    /// Partial sums A_n of a series, cached incrementally.
    PartialSums {
        source: SeriesSource,
        cache: Arc<Mutex<Vec<Scalar>>>,
    },
    /// Explicit prefix, zero-extended to stay total.
    Values(Arc<Vec<Scalar>>),
    /// Composition with a strictly increasing selector.
    Extracted {
        base: Arc<HyperRep>,
        selector: Selector,
    },
}

impl HyperRep {
    /// The analytical-sum representative of a series.
    pub fn from_partial_sums(source: &SeriesSource) -> Self {
        HyperRep {
            label: format!("an({})", source.label()),
            backing: Backing::PartialSums {
                source: source.clone(),
                cache: Arc::new(Mutex::new(Vec::new())),
            },
        }
    }

    pub fn from_values(values: Vec<Scalar>, label: &str) -> Self {
        HyperRep {
            backing: Backing::Values(Arc::new(values)),
            label: label.to_string(),
        }
    }

    pub fn value(&self, n: u64) -> Result<Scalar> {
        assert!(n >= 1, "sequence indices are 1-based");
        match &self.backing {
            Backing::PartialSums { source, cache } => {
                if let Some(len) = source.finite_len() {
                    if n > len {
                        return Err(Error::ExhaustedSet(n));
                    }
                }
                let mut cache = cache.lock().expect("partial-sum cache");
                while (cache.len() as u64) < n {
                    let next = cache.len() as u64 + 1;
                    let prev = cache
                        .last()
                        .cloned()
                        .unwrap_or_else(|| Scalar::zero(source.mode()));
                    cache.push(prev.add(&source.try_term(next)?));
                }
                Ok(cache[n as usize - 1].clone())
            }
            Backing::Values(values) => Ok(values
                .get(n as usize - 1)
                .cloned()
                .unwrap_or_else(|| Scalar::zero(Mode::Exact))),
            Backing::Extracted { base, selector } => base.value(selector.apply(n)?),
        }
    }

    pub fn prefix(&self, n: u64) -> Result<Vec<Scalar>> {
        (1..=n).map(|i| self.value(i)).collect()
    }
}

/// Strictly increasing index rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Selector {
    /// n -> k·n.
    Stride { k: u64 },
    /// n -> n + s.
    Shift { s: u64 },
    /// Explicit strictly increasing table.
    Table { indices: Vec<u64> },
}

impl Selector {
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(k) = spec.strip_prefix("stride:") {
            let k: u64 = k
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad stride {k:?}")))?;
            return Selector::Stride { k }.validated();
        }
        if let Some(s) = spec.strip_prefix("shift:") {
            let s: u64 = s
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad shift {s:?}")))?;
            return Selector::Shift { s }.validated();
        }
        if spec == "identity" {
            return Ok(Selector::Stride { k: 1 });
        }
        Err(Error::InvalidArgument(format!(
            "unknown selector {spec:?} (expected stride:<k>, shift:<s>, identity)"
        )))
    }

    pub fn validated(self) -> Result<Self> {
        match &self {
            Selector::Stride { k } => {
                if *k == 0 {
                    return Err(Error::NonMonotoneSelector(1));
                }
            }
            Selector::Shift { .. } => {}
            Selector::Table { indices } => {
                if indices.is_empty() || indices[0] == 0 {
                    return Err(Error::NonMonotoneSelector(1));
                }
                for (i, w) in indices.windows(2).enumerate() {
                    if w[1] <= w[0] {
                        return Err(Error::NonMonotoneSelector(i as u64 + 2));
                    }
                }
            }
        }
        Ok(self)
    }

    pub fn apply(&self, n: u64) -> Result<u64> {
        match self {
            Selector::Stride { k } => Ok(n * k),
            Selector::Shift { s } => Ok(n + s),
            Selector::Table { indices } => indices
                .get(n as usize - 1)
                .copied()
                .ok_or(Error::ExhaustedSet(n)),
        }
    }
}

/// Witness for a subnumber relation: the extracted subsequence.
pub fn subnumber_extract(rep: &HyperRep, selector: Selector) -> Result<HyperRep> {
    let selector = selector.validated()?;
    Ok(HyperRep {
        label: format!("{}[{selector:?}]", rep.label),
        backing: Backing::Extracted {
            base: Arc::new(rep.clone()),
            selector,
        },
    })
}

/// Partial sums A_1..A_N as the representative prefix of the analytical sum.
pub fn analytical_sum(source: &SeriesSource, n: u64) -> Result<Vec<Scalar>> {
    partial_sums(source, n)
}

/// Surjective projection of ℕ with finite consecutive fibers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QuotientMap {
    Monotone { fiber_ends: FiberEnds },
    /// Explicit fiber table over a declared horizon; fiber i is the i-th
    /// entry (consecutive run of integers), and the runs partition 1..=H.
    General { fibers: Vec<(u64, u64)> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FiberEnds {
    Named(String),
    Explicit(Vec<u64>),
}

impl QuotientMap {
    /// Builtins: `j0` groups {2k-1, 2k}; `j1` groups {1,2,3} then {2k, 2k+1};
    /// `identity` keeps singleton fibers.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec {
            "j0" | "j1" | "identity" => Ok(QuotientMap::Monotone {
                fiber_ends: FiberEnds::Named(spec.into()),
            }),
            other => {
                let map: QuotientMap = serde_json::from_str(other)?;
                map.validated()
            }
        }
    }

    pub fn validated(self) -> Result<Self> {
        match &self {
            QuotientMap::Monotone { fiber_ends } => match fiber_ends {
                FiberEnds::Named(name) => {
                    if !matches!(name.as_str(), "j0" | "j1" | "identity") {
                        return Err(Error::InvalidQuotientMap(format!(
                            "unknown builtin {name:?}"
                        )));
                    }
                }
                FiberEnds::Explicit(ends) => {
                    if ends.is_empty() || ends[0] == 0 {
                        return Err(Error::InvalidQuotientMap(
                            "fiber ends must start at a positive integer".into(),
                        ));
                    }
                    if ends.windows(2).any(|w| w[1] <= w[0]) {
                        return Err(Error::InvalidQuotientMap(
                            "fiber ends must strictly increase".into(),
                        ));
                    }
                }
            },
            QuotientMap::General { fibers } => {
                if fibers.is_empty() {
                    return Err(Error::InvalidQuotientMap("no fibers".into()));
                }
                for &(l, r) in fibers {
                    if l == 0 || r < l {
                        return Err(Error::InvalidQuotientMap(format!(
                            "bad fiber [{l},{r}]"
                        )));
                    }
                }
                // The runs must partition 1..=H.
                let mut sorted = fibers.clone();
                sorted.sort_unstable();
                let mut expect = 1;
                for (l, r) in sorted {
                    if l != expect {
                        return Err(Error::InvalidQuotientMap(format!(
                            "fibers do not partition: gap before {l}"
                        )));
                    }
                    expect = r + 1;
                }
            }
        }
        Ok(self)
    }

    pub fn is_monotone(&self) -> bool {
        matches!(self, QuotientMap::Monotone { .. })
    }

    /// End position of fiber i (monotone maps only).
    pub fn fiber_end(&self, i: u64) -> Result<u64> {
        match self {
            QuotientMap::Monotone { fiber_ends } => match fiber_ends {
                FiberEnds::Named(name) => Ok(match name.as_str() {
                    "j0" => 2 * i,
                    "j1" => 2 * i + 1,
                    _ => i,
                }),
                FiberEnds::Explicit(ends) => ends
                    .get(i as usize - 1)
                    .copied()
                    .ok_or(Error::ExhaustedSet(i)),
            },
            QuotientMap::General { .. } => Err(Error::InvalidQuotientMap(
                "fiber ends are only defined for monotone maps".into(),
            )),
        }
    }

    /// Closed interval of fiber i.
    pub fn fiber(&self, i: u64) -> Result<(u64, u64)> {
        match self {
            QuotientMap::Monotone { .. } => {
                let end = self.fiber_end(i)?;
                let start = if i == 1 { 1 } else { self.fiber_end(i - 1)? + 1 };
                Ok((start, end))
            }
            QuotientMap::General { fibers } => fibers
                .get(i as usize - 1)
                .copied()
                .ok_or(Error::ExhaustedSet(i)),
        }
    }

    pub fn fiber_count(&self) -> Option<u64> {
        match self {
            QuotientMap::Monotone {
                fiber_ends: FiberEnds::Explicit(ends),
            } => Some(ends.len() as u64),
            QuotientMap::Monotone { .. } => None,
            QuotientMap::General { fibers } => Some(fibers.len() as u64),
        }
    }
}

struct QuotientRule {
    base: SeriesSource,
    map: QuotientMap,
}

impl DerivedRule for QuotientRule {
    fn label(&self) -> String {
        format!("quotient({})", self.base.label())
    }

    fn term(&self, n: u64, mode: Mode) -> Scalar {
        self.try_term(n, mode)
            .expect("quotient term within validated fibers")
    }

    fn try_term(&self, n: u64, _mode: Mode) -> Result<Scalar> {
        let (start, end) = self.map.fiber(n)?;
        Ok(self.base.segment_sum(start - 1, end, SegmentFilter::All))
    }

    fn finite_len(&self) -> Option<u64> {
        self.map.fiber_count()
    }
}

/// b_i = Σ_{j in p^{-1}(i)} a_j as a lazy series.
pub fn quotient_series(source: &SeriesSource, map: QuotientMap) -> Result<SeriesSource> {
    let map = map.validated()?;
    Ok(SeriesSource::from_derived(
        Arc::new(QuotientRule {
            base: source.clone(),
            map,
        }),
        source.mode(),
    ))
}

struct CheckpointQuotientRule {
    base: SeriesSource,
    deviations: Arc<BTreeMap<u64, u64>>,
    ends: Arc<Vec<u64>>,
}

impl DerivedRule for CheckpointQuotientRule {
    fn label(&self) -> String {
        format!("checkpoint-quotient({})", self.base.label())
    }

    fn term(&self, n: u64, mode: Mode) -> Scalar {
        self.try_term(n, mode)
            .expect("checkpoint quotient term within range")
    }

    fn try_term(&self, n: u64, _mode: Mode) -> Result<Scalar> {
        let end = *self
            .ends
            .get(n as usize - 1)
            .ok_or(Error::ExhaustedSet(n))?;
        let start = if n == 1 {
            0
        } else {
            self.ends[n as usize - 2]
        };
        // Identity segment plus the effect of the permutation's deviations.
        let mut sum = self.base.segment_sum(start, end, SegmentFilter::All);
        for (&position, &index) in self.deviations.range(start + 1..=end) {
            sum = sum
                .add(&self.base.term(index))
                .sub(&self.base.term(position));
        }
        Ok(sum)
    }

    fn finite_len(&self) -> Option<u64> {
        Some(self.ends.len() as u64)
    }
}

/// Groups the rearranged series at the checkpoints of a result: fiber n is
/// (k_{n-1}, k_n] and the quotient term is the sum of a_{σ(j)} over it. The
/// partial sums of the quotient reproduce the checkpoint sums exactly.
pub fn checkpoints_to_quotient(
    result: &RearrangementResult,
    source: &SeriesSource,
) -> Result<(SeriesSource, QuotientMap)> {
    if result.checkpoints.is_empty() {
        return Err(Error::EmptyResult);
    }
    let map = QuotientMap::Monotone {
        fiber_ends: FiberEnds::Explicit(result.checkpoints.clone()),
    }
    .validated()?;
    let rule = CheckpointQuotientRule {
        base: source.clone(),
        deviations: Arc::new(result.sigma.deviations().clone()),
        ends: Arc::new(result.checkpoints.clone()),
    };
    Ok((
        SeriesSource::from_derived(Arc::new(rule), source.mode()),
        map,
    ))
}

/// Tolerance schedule for c0-equivalence monitoring: positive, nonincreasing.
#[derive(Debug, Clone)]
pub enum ToleranceSchedule {
    InverseN,
    Constant(Scalar),
    Table(Vec<Scalar>),
}

impl ToleranceSchedule {
    pub fn validated(self) -> Result<Self> {
        match &self {
            ToleranceSchedule::InverseN => {}
            ToleranceSchedule::Constant(t) => {
                if !t.is_positive() {
                    return Err(Error::InvalidArgument(
                        "tolerance must be positive".into(),
                    ));
                }
            }
            ToleranceSchedule::Table(ts) => {
                if ts.is_empty() || ts.iter().any(|t| !t.is_positive()) {
                    return Err(Error::InvalidArgument(
                        "tolerances must be positive".into(),
                    ));
                }
                for w in ts.windows(2) {
                    if w[0].lt(&w[1]) {
                        return Err(Error::InvalidArgument(
                            "tolerance schedule must be nonincreasing".into(),
                        ));
                    }
                }
            }
        }
        Ok(self)
    }

    pub fn tolerance(&self, n: u64, mode: Mode) -> Scalar {
        match self {
            ToleranceSchedule::InverseN => Scalar::ratio(1, n as i64, mode),
            ToleranceSchedule::Constant(t) => t.clone(),
            ToleranceSchedule::Table(ts) => ts
                .get(n as usize - 1)
                .cloned()
                .unwrap_or_else(|| ts.last().expect("nonempty").clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum MonitorVerdict {
    Consistent { max_deviation: String, witness: u64 },
    Violated { at: u64, deviation: String, tolerance: String },
}

/// Finite-horizon evidence report; never a limit proof.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorReport {
    pub horizon: u64,
    #[serde(flatten)]
    pub verdict: MonitorVerdict,
    pub note: String,
}

/// Checks |x_n - y_n| <= tol_n for n <= N.
pub fn c0_equiv_monitor(
    x: &HyperRep,
    y: &HyperRep,
    horizon: u64,
    schedule: &ToleranceSchedule,
    mode: Mode,
) -> Result<MonitorReport> {
    let mut max_dev: Option<Scalar> = None;
    let mut witness = 1;
    for n in 1..=horizon {
        let dev = x.value(n)?.sub(&y.value(n)?).abs();
        let tol = schedule.tolerance(n, mode);
        if tol.lt(&dev) {
            return Ok(MonitorReport {
                horizon,
                verdict: MonitorVerdict::Violated {
                    at: n,
                    deviation: dev.to_string(),
                    tolerance: tol.to_string(),
                },
                note: "finite-horizon evidence only".into(),
            });
        }
        if max_dev.as_ref().map(|m| m.lt(&dev)).unwrap_or(true) {
            max_dev = Some(dev);
            witness = n;
        }
    }
    Ok(MonitorReport {
        horizon,
        verdict: MonitorVerdict::Consistent {
            max_deviation: max_dev
                .unwrap_or_else(|| Scalar::zero(mode))
                .to_string(),
            witness,
        },
        note: "finite-horizon evidence only".into(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstructionReport {
    pub horizon: u64,
    pub fibers_checked: u64,
    pub all_integer: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_violation: Option<u64>,
}

/// For the ±1 series: every monotone quotient of every permutation has
/// integer partial sums, so only integer-valued sequence classes are
/// reachable. Confirms the obstruction concretely up to a horizon.
pub fn brst_integer_obstruction(
    map: &QuotientMap,
    sigma: &crate::permutation::PermutationPrefix,
    horizon: u64,
) -> Result<ObstructionReport> {
    if !map.is_monotone() {
        return Err(Error::InvalidQuotientMap(
            "integer obstruction applies to monotone quotients".into(),
        ));
    }
    let src = SeriesSource::altsign(Mode::Exact);
    let mut acc = SumAccumulator::new(Mode::Exact);
    let mut fibers = 0;
    let mut position = 0u64;
    let mut all_integer = true;
    let mut first_violation = None;
    for i in 1.. {
        let end = match map.fiber_end(i) {
            Ok(e) => e,
            Err(_) => break,
        };
        if end > horizon {
            break;
        }
        while position < end {
            position += 1;
            // Identity beyond the stored prefix.
            let idx = sigma.value(position).unwrap_or(position);
            acc.add(&src.term(idx));
        }
        fibers = i;
        if let Scalar::Exact(v) = acc.value(Mode::Exact) {
            if !num::Integer::is_multiple_of(v.numer(), v.denom()) {
                all_integer = false;
                first_violation.get_or_insert(i);
            }
        }
    }
    Ok(ObstructionReport {
        horizon,
        fibers_checked: fibers,
        all_integer,
        first_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permutation::PermutationPrefix;

    fn exact(v: i64) -> Scalar {
        Scalar::from_int(v, Mode::Exact)
    }

    #[test]
    fn altsign_quotients_match_projections() {
        let src = SeriesSource::altsign(Mode::Exact);
        let j0 = quotient_series(&src, QuotientMap::parse("j0").unwrap()).unwrap();
        let j1 = quotient_series(&src, QuotientMap::parse("j1").unwrap()).unwrap();
        for i in 1..=100 {
            assert_eq!(j0.term(i), exact(0));
            assert_eq!(j1.term(i), exact(if i == 1 { 1 } else { 0 }));
        }
    }

    #[test]
    fn identity_quotient_is_the_series() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let q = quotient_series(&src, QuotientMap::parse("identity").unwrap()).unwrap();
        for i in 1..=20 {
            assert_eq!(q.term(i), src.term(i));
        }
    }

    #[test]
    fn monotone_quotient_partial_sums_hit_fiber_ends() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let ends = vec![2, 5, 9, 14];
        let map = QuotientMap::Monotone {
            fiber_ends: FiberEnds::Explicit(ends.clone()),
        };
        let q = quotient_series(&src, map).unwrap();
        let qs = partial_sums(&q, 4).unwrap();
        let base = partial_sums(&src, 14).unwrap();
        for (i, &end) in ends.iter().enumerate() {
            assert_eq!(qs[i], base[end as usize - 1]);
        }
    }

    #[test]
    fn quotient_map_validation() {
        assert!(QuotientMap::Monotone {
            fiber_ends: FiberEnds::Explicit(vec![2, 2])
        }
        .validated()
        .is_err());
        assert!(QuotientMap::General {
            fibers: vec![(1, 3), (5, 6)]
        }
        .validated()
        .is_err());
        assert!(QuotientMap::General {
            fibers: vec![(1, 3), (4, 6)]
        }
        .validated()
        .is_ok());
        // Non-monotone but valid: fiber 1 is {4,5,6}, fiber 2 is {1,2,3}.
        assert!(QuotientMap::General {
            fibers: vec![(4, 6), (1, 3)]
        }
        .validated()
        .is_ok());
    }

    #[test]
    fn subnumber_composition() {
        let src = SeriesSource::altsign(Mode::Exact);
        let rep = HyperRep::from_partial_sums(&src);
        // Even positions of 1,0,1,0,... are constant 0.
        let evens = subnumber_extract(&rep, Selector::Stride { k: 2 }).unwrap();
        for n in 1..=50 {
            assert_eq!(evens.value(n).unwrap(), exact(0));
        }
        // extract(extract(rep, s1), s2) = extract(rep, s1 ∘ s2)
        let s1 = Selector::Stride { k: 2 };
        let s2 = Selector::Shift { s: 3 };
        let a = subnumber_extract(&subnumber_extract(&rep, s1.clone()).unwrap(), s2.clone())
            .unwrap();
        for n in 1..=40 {
            let composed = s1.apply(s2.apply(n).unwrap()).unwrap();
            assert_eq!(a.value(n).unwrap(), rep.value(composed).unwrap());
        }
    }

    #[test]
    fn selector_validation() {
        assert!(Selector::Stride { k: 0 }.validated().is_err());
        assert!(Selector::Table {
            indices: vec![1, 3, 3]
        }
        .validated()
        .is_err());
        assert!(Selector::parse("stride:2").is_ok());
        assert!(Selector::parse("nope").is_err());
    }

    #[test]
    fn monitor_trivial_and_violated() {
        let src = SeriesSource::altsign(Mode::Exact);
        let rep = HyperRep::from_partial_sums(&src);
        let same = c0_equiv_monitor(
            &rep,
            &rep,
            100,
            &ToleranceSchedule::Constant(Scalar::ratio(1, 1000, Mode::Exact)),
            Mode::Exact,
        )
        .unwrap();
        assert!(matches!(same.verdict, MonitorVerdict::Consistent { .. }));

        // 1,0,1,0,... against constant zero violates immediately.
        let zero = HyperRep::from_values(vec![], "zero");
        let bad = c0_equiv_monitor(
            &rep,
            &zero,
            100,
            &ToleranceSchedule::Constant(Scalar::ratio(1, 2, Mode::Exact)),
            Mode::Exact,
        )
        .unwrap();
        match bad.verdict {
            MonitorVerdict::Violated { at, .. } => assert_eq!(at, 1),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn integer_obstruction_builtin_projections() {
        let id = PermutationPrefix::identity(0);
        for name in ["j0", "j1"] {
            let map = QuotientMap::parse(name).unwrap();
            let report = brst_integer_obstruction(&map, &id, 100).unwrap();
            assert!(report.all_integer, "{name}");
            assert!(report.fibers_checked >= 49);
        }
    }
}
