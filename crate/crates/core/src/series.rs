//! Lazy real series: term rules, sign structure, tail-bound oracles, and
//! closed-form segment sums.
//!
//! A series is never materialized. Callers pull terms on demand, and the
//! engines exploit the magnitude profile of the builtin families (piecewise
//! constant magnitudes with a periodic sign pattern) to sum far-out index
//! ranges without touching every position.

use std::fmt;
use std::sync::Arc;

use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::scalar::{Mode, Scalar, SumAccumulator};

/// Verdict of a single classification condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Holds,
    Fails,
    Inconclusive,
}

/// Extension hook for series derived from other machinery (quotients,
/// permuted views). Implementations must be deterministic.
pub trait DerivedRule: Send + Sync {
    fn label(&self) -> String;
    fn term(&self, n: u64, mode: Mode) -> Scalar;
    /// Fast path returning (numerator, denominator) when machine-sized.
    fn term_small(&self, _n: u64) -> Option<(i64, u64)> {
        None
    }
    fn finite_len(&self) -> Option<u64> {
        None
    }
    /// Fallible access for rules whose lazy extension can run out of budget.
    fn try_term(&self, n: u64, mode: Mode) -> Result<Scalar> {
        Ok(self.term(n, mode))
    }
}

#[derive(Clone)]
enum TermRule {
    AltSign,
    AltHarmonic,
    AltPow4Ceil,
    Geometric(BigRational),
    Triples,
    FiniteList(Vec<BigRational>),
    Restricted {
        base: Arc<SeriesSource>,
        set: IndexSet,
    },
    Derived(Arc<dyn DerivedRule>),
}

/// Certified tail bound: `bound(m)` dominates `sup_q |Σ_{j=m+1}^q a_j|`.
#[derive(Clone)]
pub enum TailOracle {
    /// Identically zero tail.
    Zero,
    /// Alternating series with nonincreasing magnitudes: first omitted term.
    NextTermMagnitude,
    /// Positive geometric tail r^{m+1}/(1-r).
    Geometric(BigRational),
    /// Finite support: precomputed suffix extrema, index m -> bound.
    FiniteTail(Vec<BigRational>),
}

/// Analytic facts carried by a source. Absent certificates simply disable
/// the operations that require them; nothing is inferred at run time.
#[derive(Clone, Default)]
pub struct Certificates {
    /// Signs strictly alternate and |a_n| is nonincreasing.
    pub alternating_nonincreasing: bool,
    /// |a_n| -> 0.
    pub magnitudes_vanish: bool,
    /// Sum of |a_n| diverges, also along any residue class.
    pub magnitude_sum_diverges: bool,
    /// Analytic verdicts for conditions (a), (b), (c).
    pub pcc: Option<(Verdict, Verdict, Verdict)>,
    /// The series converges conditionally.
    pub conditionally_convergent: bool,
}

/// Magnitude/sign structure of the builtin families: |a_n| = 1/level(n) with
/// level nondecreasing in n, and sign determined by n mod sign_period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelKind {
    /// level(n) = 1 (altsign).
    Constant,
    /// level(n) = n (altharmonic).
    PerIndex,
    /// level(n) = ceil(n^(1/4)).
    FourthPower,
    /// level(n) = ceil(n/3) (triples).
    Triads,
}

#[derive(Debug, Clone, Copy)]
pub struct MagProfile {
    pub sign_period: u64,
    /// Sign of indices with n % sign_period == r, entry r.
    pub sign_by_residue: [i8; 3],
    pub level: LevelKind,
}

impl MagProfile {
    #[inline]
    pub fn sign(&self, n: u64) -> i8 {
        self.sign_by_residue[(n % self.sign_period) as usize]
    }

    #[inline]
    pub fn level_of(&self, n: u64) -> u64 {
        match self.level {
            LevelKind::Constant => 1,
            LevelKind::PerIndex => n,
            LevelKind::FourthPower => root4_ceil(n),
            LevelKind::Triads => n.div_ceil(3),
        }
    }

    /// Closed range of indices at a given magnitude level.
    pub fn level_range(&self, level: u64) -> (u64, u64) {
        match self.level {
            LevelKind::Constant => (1, u64::MAX),
            LevelKind::PerIndex => (level, level),
            LevelKind::FourthPower => {
                let lo = if level == 1 {
                    1
                } else {
                    pow4(level - 1).saturating_add(1)
                };
                (lo, pow4(level).min(u64::MAX))
            }
            LevelKind::Triads => (3 * level - 2, 3 * level),
        }
    }

    /// Whether magnitudes shrink without bound.
    pub fn vanishing(&self) -> bool {
        self.level != LevelKind::Constant
    }
}

fn pow4(m: u64) -> u64 {
    let sq = (m as u128) * (m as u128);
    let p4 = sq * sq;
    if p4 > u64::MAX as u128 {
        u64::MAX
    } else {
        p4 as u64
    }
}

/// Smallest m with m^4 >= n.
pub fn root4_ceil(n: u64) -> u64 {
    if n <= 1 {
        return 1;
    }
    let mut m = ((n as f64).sqrt().sqrt()) as u64;
    while pow4(m) < n {
        m += 1;
    }
    while m > 1 && pow4(m - 1) >= n {
        m -= 1;
    }
    m
}

/// A lazily evaluated real series fixed to one arithmetic mode.
#[derive(Clone)]
pub struct SeriesSource {
    rule: TermRule,
    mode: Mode,
    oracle: Option<TailOracle>,
    certs: Certificates,
    label: String,
}

impl fmt::Debug for SeriesSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SeriesSource({}, {})", self.label, self.mode)
    }
}

impl SeriesSource {
    pub fn altsign(mode: Mode) -> Self {
        SeriesSource {
            rule: TermRule::AltSign,
            mode,
            oracle: Some(TailOracle::NextTermMagnitude),
            certs: Certificates {
                alternating_nonincreasing: true,
                magnitudes_vanish: false,
                magnitude_sum_diverges: true,
                pcc: Some((Verdict::Holds, Verdict::Holds, Verdict::Fails)),
                conditionally_convergent: false,
            },
            label: "altsign".into(),
        }
    }

    pub fn altharmonic(mode: Mode) -> Self {
        SeriesSource {
            rule: TermRule::AltHarmonic,
            mode,
            oracle: Some(TailOracle::NextTermMagnitude),
            certs: Certificates {
                alternating_nonincreasing: true,
                magnitudes_vanish: true,
                magnitude_sum_diverges: true,
                pcc: Some((Verdict::Holds, Verdict::Holds, Verdict::Holds)),
                conditionally_convergent: true,
            },
            label: "altharmonic".into(),
        }
    }

    pub fn altpow4ceil(mode: Mode) -> Self {
        SeriesSource {
            rule: TermRule::AltPow4Ceil,
            mode,
            oracle: Some(TailOracle::NextTermMagnitude),
            certs: Certificates {
                alternating_nonincreasing: true,
                magnitudes_vanish: true,
                magnitude_sum_diverges: true,
                pcc: Some((Verdict::Holds, Verdict::Holds, Verdict::Holds)),
                conditionally_convergent: true,
            },
            label: "altpow4ceil".into(),
        }
    }

    /// Positive geometric series r^n with 0 < r < 1.
    pub fn geometric(ratio: BigRational, mode: Mode) -> Result<Self> {
        if !ratio.is_positive() || ratio >= BigRational::one() {
            return Err(Error::InvalidArgument(
                "geometric ratio must satisfy 0 < r < 1".into(),
            ));
        }
        let label = format!("geometric:{}", Scalar::Exact(ratio.clone()));
        Ok(SeriesSource {
            rule: TermRule::Geometric(ratio.clone()),
            mode,
            oracle: Some(TailOracle::Geometric(ratio)),
            certs: Certificates {
                alternating_nonincreasing: false,
                magnitudes_vanish: true,
                magnitude_sum_diverges: false,
                pcc: Some((Verdict::Fails, Verdict::Fails, Verdict::Holds)),
                conditionally_convergent: false,
            },
            label,
        })
    }

    /// 1/k, 1/k, -1/k for k = 1, 2, ... Divergent but potentially
    /// conditionally convergent.
    pub fn triples(mode: Mode) -> Self {
        SeriesSource {
            rule: TermRule::Triples,
            mode,
            oracle: None,
            certs: Certificates {
                alternating_nonincreasing: false,
                magnitudes_vanish: true,
                magnitude_sum_diverges: true,
                pcc: Some((Verdict::Holds, Verdict::Holds, Verdict::Holds)),
                conditionally_convergent: false,
            },
            label: "triples".into(),
        }
    }

    /// Finite list of terms, zero-extended beyond the list.
    pub fn finite_list(values: Vec<BigRational>, mode: Mode) -> Self {
        let oracle = TailOracle::FiniteTail(finite_tail_bounds(&values));
        SeriesSource {
            rule: TermRule::FiniteList(values),
            mode,
            oracle: Some(oracle),
            certs: Certificates {
                alternating_nonincreasing: false,
                magnitudes_vanish: true,
                magnitude_sum_diverges: false,
                pcc: Some((Verdict::Fails, Verdict::Fails, Verdict::Holds)),
                conditionally_convergent: false,
            },
            label: "finite-list".into(),
        }
    }

    pub fn from_derived(rule: Arc<dyn DerivedRule>, mode: Mode) -> Self {
        let label = rule.label();
        SeriesSource {
            rule: TermRule::Derived(rule),
            mode,
            oracle: None,
            certs: Certificates::default(),
            label,
        }
    }

    /// Parses CLI series spec strings: builtin names, `geometric:<r>`,
    /// `file:<path>` with one literal per line.
    pub fn parse_spec(spec: &str, mode: Mode) -> Result<Self> {
        match spec {
            "altsign" => Ok(Self::altsign(mode)),
            "altharmonic" => Ok(Self::altharmonic(mode)),
            "altpow4ceil" => Ok(Self::altpow4ceil(mode)),
            "triples" => Ok(Self::triples(mode)),
            _ => {
                if let Some(r) = spec.strip_prefix("geometric:") {
                    let ratio = crate::scalar::parse_rational(r)?;
                    return Self::geometric(ratio, mode);
                }
                if let Some(path) = spec.strip_prefix("file:") {
                    let text = std::fs::read_to_string(path)?;
                    let mut values = Vec::new();
                    for line in text.lines() {
                        let line = line.trim();
                        if line.is_empty() || line.starts_with('#') {
                            continue;
                        }
                        values.push(crate::scalar::parse_rational(line)?);
                    }
                    let mut src = Self::finite_list(values, mode);
                    src.label = spec.to_string();
                    return Ok(src);
                }
                Err(Error::InvalidArgument(format!(
                    "unknown series spec {spec:?}"
                )))
            }
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn certificates(&self) -> &Certificates {
        &self.certs
    }

    /// Overrides certificates; used for caller-asserted preconditions.
    pub fn assert_certificates(&mut self, certs: Certificates) {
        self.certs = certs;
    }

    pub fn set_oracle(&mut self, oracle: Option<TailOracle>) {
        self.oracle = oracle;
    }

    pub fn has_tail_oracle(&self) -> bool {
        self.oracle.is_some()
    }

    /// Length when the series is a restriction to a finite set; `None` means
    /// the series is total on all n >= 1 (zero-extended builtins included).
    pub fn finite_len(&self) -> Option<u64> {
        match &self.rule {
            TermRule::Restricted { set, .. } => set.cardinality(),
            TermRule::Derived(rule) => rule.finite_len(),
            _ => None,
        }
    }

    /// n-th term, n >= 1. Panics beyond the length of a finite restriction;
    /// use [`SeriesSource::finite_len`] first where that can happen.
    pub fn term(&self, n: u64) -> Scalar {
        assert!(n >= 1, "series indices are 1-based");
        if let Some((num, den)) = self.term_small(n) {
            return match self.mode {
                Mode::Exact => Scalar::Exact(BigRational::new(num.into(), (den as i64).into())),
                Mode::Float => Scalar::Float(num as f64 / den as f64),
            };
        }
        match &self.rule {
            TermRule::Geometric(r) => {
                match self.mode {
                    Mode::Exact => {
                        let exp = i32::try_from(n).expect("geometric exponent fits i32");
                        Scalar::Exact(r.pow(exp))
                    }
                    Mode::Float => Scalar::Float(crate::scalar::rational_to_f64(r).powi(n as i32)),
                }
            }
            TermRule::FiniteList(values) => match values.get(n as usize - 1) {
                Some(v) => Scalar::from_rational(v.clone(), self.mode),
                None => Scalar::zero(self.mode),
            },
            TermRule::Restricted { base, set } => {
                let idx = set
                    .enumerate(n)
                    .unwrap_or_else(|| panic!("restricted series has no term {n}"));
                base.term(idx)
            }
            TermRule::Derived(rule) => rule.term(n, self.mode),
            // Profile builtins are fully covered by term_small.
            _ => unreachable!("profile builtins handled by term_small"),
        }
    }

    /// Like [`SeriesSource::term`], but exhausted restrictions and derived
    /// rules that fail to extend surface errors instead of panicking.
    pub fn try_term(&self, n: u64) -> Result<Scalar> {
        match &self.rule {
            TermRule::Restricted { set, .. } => {
                if set.enumerate(n).is_none() {
                    return Err(Error::ExhaustedSet(n));
                }
                Ok(self.term(n))
            }
            TermRule::Derived(rule) => rule.try_term(n, self.mode),
            _ => Ok(self.term(n)),
        }
    }

    /// (numerator, denominator) when machine-sized. Zero is (0, 1).
    pub fn term_small(&self, n: u64) -> Option<(i64, u64)> {
        match &self.rule {
            TermRule::AltSign => Some((if n % 2 == 1 { 1 } else { -1 }, 1)),
            TermRule::AltHarmonic => Some((if n % 2 == 1 { 1 } else { -1 }, n)),
            TermRule::AltPow4Ceil => Some((if n % 2 == 1 { 1 } else { -1 }, root4_ceil(n))),
            TermRule::Triples => {
                let k = n.div_ceil(3);
                Some((if n % 3 == 0 { -1 } else { 1 }, k))
            }
            TermRule::Geometric(_) => None,
            TermRule::FiniteList(values) => match values.get(n as usize - 1) {
                Some(v) => {
                    let num = v.numer().to_i64()?;
                    let den = v.denom().to_u64()?;
                    Some((num, den))
                }
                None => Some((0, 1)),
            },
            TermRule::Restricted { base, set } => base.term_small(set.enumerate(n)?),
            TermRule::Derived(rule) => rule.term_small(n),
        }
    }

    pub fn profile(&self) -> Option<MagProfile> {
        let alt2 = |level| MagProfile {
            sign_period: 2,
            sign_by_residue: [-1, 1, 0],
            level,
        };
        match &self.rule {
            TermRule::AltSign => Some(alt2(LevelKind::Constant)),
            TermRule::AltHarmonic => Some(alt2(LevelKind::PerIndex)),
            TermRule::AltPow4Ceil => Some(alt2(LevelKind::FourthPower)),
            TermRule::Triples => Some(MagProfile {
                sign_period: 3,
                sign_by_residue: [-1, 1, 1],
                level: LevelKind::Triads,
            }),
            _ => None,
        }
    }

    /// For a restriction, the underlying base series and set.
    pub fn restriction(&self) -> Option<(&SeriesSource, &IndexSet)> {
        match &self.rule {
            TermRule::Restricted { base, set } => Some((base, set)),
            _ => None,
        }
    }

    /// Certified bound on sup_q |Σ_{j=m+1}^q a_j|.
    pub fn tail_bound(&self, m: u64) -> Result<Scalar> {
        let oracle = self.oracle.as_ref().ok_or(Error::MissingOracle)?;
        Ok(match oracle {
            TailOracle::Zero => Scalar::zero(self.mode),
            TailOracle::NextTermMagnitude => {
                if let Some(len) = self.finite_len() {
                    if m >= len {
                        return Ok(Scalar::zero(self.mode));
                    }
                }
                self.term(m + 1).abs()
            }
            TailOracle::Geometric(r) => match self.mode {
                Mode::Exact => {
                    let exp = i32::try_from(m + 1)
                        .map_err(|_| Error::InvalidArgument("tail index too large".into()))?;
                    Scalar::Exact(r.pow(exp) / (BigRational::one() - r))
                }
                Mode::Float => {
                    let rf = crate::scalar::rational_to_f64(r);
                    Scalar::Float(rf.powi((m + 1) as i32) / (1.0 - rf))
                }
            },
            TailOracle::FiniteTail(bounds) => match bounds.get(m as usize) {
                Some(b) => Scalar::from_rational(b.clone(), self.mode),
                None => Scalar::zero(self.mode),
            },
        })
    }

    /// Smallest m > after with tail_bound(m) <= tol, found by doubling then
    /// bisection on the nonincreasing oracle.
    pub fn tail_index_for(&self, tol: &Scalar, after: u64) -> Result<u64> {
        let fits = |m: u64| -> Result<bool> { Ok(self.tail_bound(m)?.le(tol)) };
        let mut lo = after + 1;
        if fits(lo)? {
            return Ok(lo);
        }
        let mut hi = lo.saturating_mul(2).max(lo + 1);
        let mut guard = 0;
        while !fits(hi)? {
            if hi >= u64::MAX / 2 {
                return Err(Error::InvalidArgument(
                    "tail oracle never reaches the requested tolerance".into(),
                ));
            }
            hi *= 2;
            guard += 1;
            if guard > 128 {
                return Err(Error::InvalidArgument(
                    "tail oracle never reaches the requested tolerance".into(),
                ));
            }
        }
        lo += 1;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if fits(mid)? {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Ok(lo)
    }

    /// Exact sum of a_j over j in (lo, hi] meeting the filter. Uses the
    /// magnitude profile to handle constant-magnitude runs in closed form;
    /// otherwise walks the range term by term.
    pub fn segment_sum(&self, lo: u64, hi: u64, filter: SegmentFilter<'_>) -> Scalar {
        if hi <= lo {
            return Scalar::zero(self.mode);
        }
        if let Some(profile) = self.profile() {
            if let Some(sum) = profile_segment_sum(self, &profile, lo, hi, &filter) {
                return sum;
            }
        }
        let mut acc = SumAccumulator::new(self.mode);
        for n in (lo + 1)..=hi {
            if filter.admits(n) {
                match self.term_small(n) {
                    Some((num, den)) => {
                        if num == 1 || num == -1 {
                            acc.add_unit_fraction(num < 0, den);
                        } else if num != 0 {
                            acc.add(&Scalar::ratio(num, den as i64, self.mode));
                        }
                    }
                    None => acc.add(&self.term(n)),
                }
            }
        }
        acc.value(self.mode)
    }
}

/// Range filter for segment sums.
pub enum SegmentFilter<'a> {
    All,
    In(&'a IndexSet),
    NotIn(&'a IndexSet),
}

impl SegmentFilter<'_> {
    fn admits(&self, n: u64) -> bool {
        match self {
            SegmentFilter::All => true,
            SegmentFilter::In(set) => set.member(n),
            SegmentFilter::NotIn(set) => !set.member(n),
        }
    }
}

fn profile_segment_sum(
    src: &SeriesSource,
    profile: &MagProfile,
    lo: u64,
    hi: u64,
    filter: &SegmentFilter<'_>,
) -> Option<Scalar> {
    // Counting x in [a,b] with x ≡ r (mod sign_period) and x in the filter
    // must be closed-form, otherwise fall back to iteration.
    let counter = CongruentCounter::new(filter)?;
    let mut acc = SumAccumulator::new(src.mode());
    let mut level = profile.level_of(lo + 1);
    loop {
        let (ls, le) = profile.level_range(level);
        let a = ls.max(lo + 1);
        let b = le.min(hi);
        if a <= b {
            let mut net: i64 = 0;
            for r in 0..profile.sign_period {
                let sign = profile.sign_by_residue[r as usize] as i64;
                if sign == 0 {
                    continue;
                }
                let cnt = counter.count_with_period(a, b, r, profile.sign_period);
                net += sign * cnt as i64;
            }
            if net != 0 {
                acc.add(&Scalar::ratio(net, level as i64, src.mode()));
            }
        }
        if le >= hi {
            break;
        }
        level += 1;
    }
    Some(acc.value(src.mode()))
}

/// Closed-form counting of {x in [a,b] : x ≡ r (mod p), x in filter}.
enum CongruentCounter<'a> {
    Plain,
    Residues {
        modulus: u64,
        residues: &'a [u64],
        complement: bool,
    },
    Finite {
        elements: &'a [u64],
        complement: bool,
    },
}

impl<'a> CongruentCounter<'a> {
    fn new(filter: &'a SegmentFilter<'_>) -> Option<CongruentCounter<'a>> {
        let (set, complement) = match filter {
            SegmentFilter::All => return Some(CongruentCounter::Plain),
            SegmentFilter::In(set) => (*set, false),
            SegmentFilter::NotIn(set) => (*set, true),
        };
        // Unwrap one complement layer if present.
        let (set, complement) = match set {
            IndexSet::Complement { of } => (of.as_ref(), !complement),
            other => (other, complement),
        };
        match set {
            IndexSet::All => Some(if complement {
                // Empty filter.
                CongruentCounter::Finite {
                    elements: &[],
                    complement: false,
                }
            } else {
                CongruentCounter::Plain
            }),
            IndexSet::Residues { modulus, residues } => Some(CongruentCounter::Residues {
                modulus: *modulus,
                residues,
                complement,
            }),
            IndexSet::Finite { elements } => Some(CongruentCounter::Finite {
                elements,
                complement,
            }),
            _ => None,
        }
    }

}

/// Count of x in [a, b] with x ≡ r (mod m), x >= 1, representative r in
/// 0..m (0 meaning the class of m).
pub fn count_class(a: u64, b: u64, r: u64, m: u64) -> u64 {
    if a > b {
        return 0;
    }
    let first = {
        // smallest x >= a with x % m == r
        let rr = r % m;
        let am = a % m;
        let delta = (rr + m - am) % m;
        a.checked_add(delta)
    };
    match first {
        Some(f) if f <= b => (b - f) / m + 1,
        _ => 0,
    }
}

fn finite_tail_bounds(values: &[BigRational]) -> Vec<BigRational> {
    // bounds[m] = max over q > m of |S_q - S_m| for the finite support.
    let n = values.len();
    let mut partial = Vec::with_capacity(n + 1);
    partial.push(BigRational::zero());
    for v in values {
        let prev = partial.last().expect("nonempty").clone();
        partial.push(prev + v);
    }
    let mut suffix_max = partial.clone();
    let mut suffix_min = partial.clone();
    for i in (0..n).rev() {
        if suffix_max[i + 1] > suffix_max[i] {
            suffix_max[i] = suffix_max[i + 1].clone();
        }
        if suffix_min[i + 1] < suffix_min[i] {
            suffix_min[i] = suffix_min[i + 1].clone();
        }
    }
    (0..=n)
        .map(|m| {
            let up = &suffix_max[m] - &partial[m];
            let down = &partial[m] - &suffix_min[m];
            if up > down {
                up
            } else {
                down
            }
        })
        .collect()
}

/// Restriction of a series to an index set: term i = a_{enumerate(i)}.
///
/// Tail oracles and certificates are propagated when the structure allows:
/// empty sets get the zero oracle, finite sets an exact finite-tail oracle,
/// and alternation-preserving sets inherit the next-term bound.
pub fn restrict(source: &SeriesSource, set: &IndexSet) -> SeriesSource {
    if set.is_all() {
        return source.clone();
    }
    let mode = source.mode();
    let label = format!("{}|{}", source.label(), set.to_json());
    let mut out = SeriesSource {
        rule: TermRule::Restricted {
            base: Arc::new(source.clone()),
            set: set.clone(),
        },
        mode,
        oracle: None,
        certs: Certificates::default(),
        label,
    };

    if set.is_empty() {
        out.oracle = Some(TailOracle::Zero);
        out.certs.magnitudes_vanish = true;
        out.certs.pcc = Some((Verdict::Fails, Verdict::Fails, Verdict::Holds));
        return out;
    }
    if let Some(card) = set.cardinality() {
        // Finite restriction: exact tail bounds over the visible support.
        let values: Vec<BigRational> = (1..=card)
            .map(|i| match out.term(i) {
                Scalar::Exact(r) => r,
                Scalar::Float(f) => {
                    BigRational::from_float(f).unwrap_or_else(BigRational::zero)
                }
            })
            .collect();
        out.oracle = Some(TailOracle::FiniteTail(finite_tail_bounds(&values)));
        out.certs.pcc = Some((Verdict::Fails, Verdict::Fails, Verdict::Holds));
        return out;
    }
    if source.certificates().alternating_nonincreasing
        && alternation_preserved(source, set)
    {
        out.oracle = Some(TailOracle::NextTermMagnitude);
        out.certs.alternating_nonincreasing = true;
        out.certs.magnitudes_vanish = source.certificates().magnitudes_vanish;
        out.certs.magnitude_sum_diverges = source.certificates().magnitude_sum_diverges;
        if out.certs.magnitudes_vanish && out.certs.magnitude_sum_diverges {
            out.certs.conditionally_convergent = true;
            out.certs.pcc = Some((Verdict::Holds, Verdict::Holds, Verdict::Holds));
        } else if !out.certs.magnitudes_vanish {
            out.certs.pcc = Some((Verdict::Holds, Verdict::Holds, Verdict::Fails));
        }
    }
    out
}

/// True when consecutive elements of the set alternate term sign under the
/// base profile. Decided in closed form for periodic sets; finite sets are
/// scanned directly.
fn alternation_preserved(source: &SeriesSource, set: &IndexSet) -> bool {
    let profile = match source.profile() {
        Some(p) => p,
        None => return false,
    };
    match set {
        IndexSet::All => true,
        IndexSet::Residues { modulus, residues } => {
            if modulus % profile.sign_period != 0 {
                return false;
            }
            // One period plus the wrap determines the whole pattern.
            let len = residues.len();
            for i in 0..len {
                let cur = profile.sign(residues[i]);
                let next = profile.sign(residues[(i + 1) % len] + u64::from(i + 1 == len) * modulus);
                if cur == 0 || next == 0 || cur == next {
                    return false;
                }
            }
            true
        }
        IndexSet::Complement { .. } => {
            // Normalize complements of periodic sets to periodic sets.
            if let Some(norm) = normalize_to_residues(set) {
                alternation_preserved(source, &norm)
            } else {
                false
            }
        }
        _ => false,
    }
}

/// Rewrites complements of residue patterns as residue patterns.
pub fn normalize_to_residues(set: &IndexSet) -> Option<IndexSet> {
    match set {
        IndexSet::Residues { .. } => Some(set.clone()),
        IndexSet::All => None,
        IndexSet::Complement { of } => match of.as_ref() {
            IndexSet::Residues { modulus, residues } => {
                let rest: Vec<u64> = (1..=*modulus).filter(|r| !residues.contains(r)).collect();
                if rest.is_empty() {
                    None
                } else {
                    IndexSet::residues(*modulus, rest).ok()
                }
            }
            IndexSet::Complement { of } => normalize_to_residues(of),
            _ => None,
        },
        _ => None,
    }
}

/// Partial sums S_1..S_N by left-to-right accumulation.
pub fn partial_sums(source: &SeriesSource, n: u64) -> Result<Vec<Scalar>> {
    if let Some(len) = source.finite_len() {
        if n > len {
            return Err(Error::ExhaustedSet(len + 1));
        }
    }
    let mut acc = SumAccumulator::new(source.mode());
    let mut out = Vec::with_capacity(n as usize);
    for i in 1..=n {
        acc.add(&source.term(i));
        out.push(acc.value(source.mode()));
    }
    Ok(out)
}

/// Sign decomposition a = a⁺ - a⁻ with a⁺ = max(a, 0).
pub struct SignParts {
    pub plus: SeriesSource,
    pub minus: SeriesSource,
}

struct SignPartRule {
    base: Arc<SeriesSource>,
    plus: bool,
}

impl DerivedRule for SignPartRule {
    fn label(&self) -> String {
        format!(
            "{}{}",
            self.base.label(),
            if self.plus { "+" } else { "-" }
        )
    }

    fn term(&self, n: u64, mode: Mode) -> Scalar {
        let a = self.base.term(n);
        let keep = if self.plus {
            a.is_positive()
        } else {
            a.is_negative()
        };
        if keep {
            if self.plus {
                a
            } else {
                a.neg()
            }
        } else {
            Scalar::zero(mode)
        }
    }

    fn term_small(&self, n: u64) -> Option<(i64, u64)> {
        let (num, den) = self.base.term_small(n)?;
        Some(if self.plus {
            (num.max(0), den)
        } else {
            ((-num).max(0), den)
        })
    }

    fn finite_len(&self) -> Option<u64> {
        self.base.finite_len()
    }
}

pub fn sign_split(source: &SeriesSource) -> SignParts {
    let base = Arc::new(source.clone());
    let mode = source.mode();
    SignParts {
        plus: SeriesSource::from_derived(
            Arc::new(SignPartRule {
                base: Arc::clone(&base),
                plus: true,
            }),
            mode,
        ),
        minus: SeriesSource::from_derived(Arc::new(SignPartRule { base, plus: false }), mode),
    }
}

/// Scalar max(a, 0) and max(-a, 0) for plain values.
pub fn split_value(a: &BigRational) -> (BigRational, BigRational) {
    if a.is_positive() {
        (a.clone(), BigRational::zero())
    } else {
        (BigRational::zero(), -a)
    }
}

/// Streaming monotone term reader. Amortizes magnitude-level lookups for
/// profile sources; the verifier walks billions of positions through this.
pub struct TermStream<'a> {
    source: &'a SeriesSource,
    profile: Option<MagProfile>,
    next: u64,
    level: u64,
    level_end: u64,
}

impl<'a> TermStream<'a> {
    pub fn new(source: &'a SeriesSource, start: u64) -> Self {
        let profile = source.profile();
        let (level, level_end) = match &profile {
            Some(p) => {
                let l = p.level_of(start);
                (l, p.level_range(l).1)
            }
            None => (0, 0),
        };
        TermStream {
            source,
            profile,
            next: start,
            level,
            level_end,
        }
    }

    /// Term at the current position as (num, den), advancing the cursor.
    #[inline]
    pub fn next_small(&mut self) -> Option<(i64, u64)> {
        let n = self.next;
        self.next += 1;
        match &self.profile {
            Some(p) => {
                if n > self.level_end {
                    self.level = p.level_of(n);
                    self.level_end = p.level_range(self.level).1;
                }
                let sign = p.sign_by_residue[(n % p.sign_period) as usize];
                Some((sign as i64, self.level))
            }
            None => self.source.term_small(n),
        }
    }

    /// Term at the current position in full precision, advancing the cursor.
    pub fn next_term(&mut self) -> Scalar {
        match self.next_small() {
            Some((num, den)) => {
                let mode = self.source.mode();
                match mode {
                    Mode::Exact => {
                        Scalar::Exact(BigRational::new(num.into(), (den as i64).into()))
                    }
                    Mode::Float => Scalar::Float(num as f64 / den as f64),
                }
            }
            None => {
                let n = self.next - 1;
                self.source.term(n)
            }
        }
    }
}

impl CongruentCounter<'_> {
    fn count_with_period(&self, a: u64, b: u64, r: u64, period: u64) -> u64 {
        match self {
            CongruentCounter::Plain => count_class(a, b, r, period),
            CongruentCounter::Residues {
                modulus,
                residues,
                complement,
            } => {
                let mut total = 0;
                for &c in *residues {
                    total += count_crt(a, b, r, period, c % *modulus, *modulus);
                }
                if *complement {
                    count_class(a, b, r, period) - total
                } else {
                    total
                }
            }
            CongruentCounter::Finite {
                elements,
                complement,
            } => {
                let lo = elements.partition_point(|&x| x < a);
                let hi = elements.partition_point(|&x| x <= b);
                let inside = elements[lo..hi]
                    .iter()
                    .filter(|&&x| x % period == r % period)
                    .count() as u64;
                if *complement {
                    count_class(a, b, r, period) - inside
                } else {
                    inside
                }
            }
        }
    }
}

/// Count of x in [a,b] with x ≡ r1 (mod m1) and x ≡ r2 (mod m2).
fn count_crt(a: u64, b: u64, r1: u64, m1: u64, r2: u64, m2: u64) -> u64 {
    let g = crate::scalar::gcd_u64(m1, m2);
    let r1 = r1 % m1;
    let r2 = r2 % m2;
    if r1 % g != r2 % g {
        return 0;
    }
    let lcm = m1 / g * m2;
    // m1 is a small sign period; scan its multiples for the combined class.
    let mut combined = None;
    let mut c = r2;
    for _ in 0..m1 {
        if c % m1 == r1 {
            combined = Some(c % lcm);
            break;
        }
        c += m2;
    }
    match combined {
        Some(c) => count_class(a, b, c, lcm),
        None => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::bigint::BigInt;

    fn rat(p: i64, q: i64) -> BigRational {
        BigRational::new(BigInt::from(p), BigInt::from(q))
    }

    #[test]
    fn builtin_terms() {
        let ah = SeriesSource::altharmonic(Mode::Exact);
        assert_eq!(ah.term(1), Scalar::Exact(rat(1, 1)));
        assert_eq!(ah.term(2), Scalar::Exact(rat(-1, 2)));
        let asg = SeriesSource::altsign(Mode::Exact);
        assert_eq!(asg.term(2), Scalar::Exact(rat(-1, 1)));
        let tri = SeriesSource::triples(Mode::Exact);
        assert_eq!(tri.term(1), Scalar::Exact(rat(1, 1)));
        assert_eq!(tri.term(3), Scalar::Exact(rat(-1, 1)));
        assert_eq!(tri.term(4), Scalar::Exact(rat(1, 2)));
        let fl = SeriesSource::finite_list(vec![rat(3, 1), rat(-1, 1)], Mode::Exact);
        assert_eq!(fl.term(5), Scalar::Exact(rat(0, 1)));
    }

    #[test]
    fn root4_boundaries() {
        assert_eq!(root4_ceil(1), 1);
        assert_eq!(root4_ceil(2), 2);
        assert_eq!(root4_ceil(16), 2);
        assert_eq!(root4_ceil(17), 3);
        assert_eq!(root4_ceil(81), 3);
        assert_eq!(root4_ceil(82), 4);
        for n in 1..5000u64 {
            let m = root4_ceil(n);
            assert!(pow4(m) >= n && (m == 1 || pow4(m - 1) < n));
        }
    }

    #[test]
    fn partial_sums_altharmonic() {
        let ah = SeriesSource::altharmonic(Mode::Exact);
        let sums = partial_sums(&ah, 4).unwrap();
        let expect = [rat(1, 1), rat(1, 2), rat(5, 6), rat(7, 12)];
        for (got, want) in sums.iter().zip(expect) {
            assert_eq!(got, &Scalar::Exact(want));
        }
    }

    #[test]
    fn partial_sums_altsign() {
        let sums = partial_sums(&SeriesSource::altsign(Mode::Exact), 4).unwrap();
        let expect = [1, 0, 1, 0];
        for (got, want) in sums.iter().zip(expect) {
            assert_eq!(got, &Scalar::Exact(rat(want, 1)));
        }
    }

    #[test]
    fn sign_split_identities() {
        let ah = SeriesSource::altharmonic(Mode::Exact);
        let parts = sign_split(&ah);
        assert_eq!(parts.plus.term(1), Scalar::Exact(rat(1, 1)));
        assert_eq!(parts.minus.term(1), Scalar::Exact(rat(0, 1)));
        assert_eq!(parts.plus.term(2), Scalar::Exact(rat(0, 1)));
        assert_eq!(parts.minus.term(2), Scalar::Exact(rat(1, 2)));
    }

    #[test]
    fn tail_bounds() {
        let ah = SeriesSource::altharmonic(Mode::Exact);
        assert_eq!(ah.tail_bound(10).unwrap(), Scalar::Exact(rat(1, 11)));
        let geo = SeriesSource::geometric(rat(1, 2), Mode::Exact).unwrap();
        assert_eq!(geo.tail_bound(3).unwrap(), Scalar::Exact(rat(1, 8)));
        let zero = restrict(
            &ah,
            &IndexSet::complement(IndexSet::all()),
        );
        assert_eq!(zero.tail_bound(5).unwrap(), Scalar::Exact(rat(0, 1)));
    }

    #[test]
    fn tail_index_search() {
        let ah = SeriesSource::altharmonic(Mode::Exact);
        let tol = Scalar::ratio(1, 10, Mode::Exact);
        // Smallest m with 1/(m+1) <= 1/10 is 9.
        assert_eq!(ah.tail_index_for(&tol, 0).unwrap(), 9);
        assert_eq!(ah.tail_index_for(&tol, 20).unwrap(), 21);
    }

    #[test]
    fn restriction_enumerates_base() {
        let ah = SeriesSource::altharmonic(Mode::Exact);
        let odds = IndexSet::residues(2, vec![1]).unwrap();
        let r = restrict(&ah, &odds);
        assert_eq!(r.term(2), Scalar::Exact(rat(1, 3)));
        assert!(r.certificates().alternating_nonincreasing == false);

        let alt = IndexSet::residues(4, vec![1, 2]).unwrap();
        let r = restrict(&ah, &alt);
        assert!(r.certificates().alternating_nonincreasing);
        assert!(r.certificates().conditionally_convergent);
        assert_eq!(r.term(3), Scalar::Exact(rat(1, 5)));
    }

    #[test]
    fn finite_restriction_has_exact_tail() {
        let ah = SeriesSource::altharmonic(Mode::Exact);
        let set = IndexSet::finite(vec![2, 4]).unwrap();
        let r = restrict(&ah, &set);
        assert_eq!(r.finite_len(), Some(2));
        assert_eq!(r.term(1), Scalar::Exact(rat(-1, 2)));
        // Tail beyond position 0 can dip to -3/4.
        assert_eq!(r.tail_bound(0).unwrap(), Scalar::Exact(rat(3, 4)));
        assert_eq!(r.tail_bound(2).unwrap(), Scalar::Exact(rat(0, 1)));
        assert!(matches!(
            partial_sums(&r, 3),
            Err(Error::ExhaustedSet(3))
        ));
    }

    #[test]
    fn off_a_restriction_for_constrained_runs() {
        let src = SeriesSource::altpow4ceil(Mode::Exact);
        let a = IndexSet::residues(4, vec![1, 2]).unwrap();
        let off = restrict(&src, &IndexSet::complement(a));
        // Off-A indices are 3,4,7,8,...: alternating, nonincreasing.
        assert!(off.certificates().alternating_nonincreasing);
        assert_eq!(off.term(1), Scalar::Exact(rat(1, 2)));
        assert_eq!(off.term(2), Scalar::Exact(rat(-1, 2)));
        assert!(off.has_tail_oracle());
    }

    #[test]
    fn segment_sums_match_iteration() {
        let src = SeriesSource::altpow4ceil(Mode::Exact);
        let a = IndexSet::residues(4, vec![1, 2]).unwrap();
        for (lo, hi) in [(0u64, 50u64), (7, 200), (80, 85), (100, 1000)] {
            for filter_case in 0..3 {
                let filter = match filter_case {
                    0 => SegmentFilter::All,
                    1 => SegmentFilter::In(&a),
                    _ => SegmentFilter::NotIn(&a),
                };
                let fast = src.segment_sum(lo, hi, filter);
                let mut acc = SumAccumulator::new(Mode::Exact);
                for n in lo + 1..=hi {
                    let admit = match filter_case {
                        0 => true,
                        1 => a.member(n),
                        _ => !a.member(n),
                    };
                    if admit {
                        acc.add(&src.term(n));
                    }
                }
                assert_eq!(fast, acc.value(Mode::Exact), "range ({lo},{hi}]");
            }
        }
    }

    #[test]
    fn term_stream_agrees_with_random_access() {
        for src in [
            SeriesSource::altpow4ceil(Mode::Exact),
            SeriesSource::triples(Mode::Exact),
            SeriesSource::altharmonic(Mode::Exact),
        ] {
            let mut stream = TermStream::new(&src, 5);
            for n in 5..200 {
                assert_eq!(stream.next_small(), src.term_small(n), "{} at {n}", src.label());
            }
        }
    }

    #[test]
    fn spec_strings() {
        assert!(SeriesSource::parse_spec("altharmonic", Mode::Exact).is_ok());
        assert!(SeriesSource::parse_spec("geometric:1/2", Mode::Float).is_ok());
        assert!(SeriesSource::parse_spec("geometric:2", Mode::Float).is_err());
        assert!(SeriesSource::parse_spec("nope", Mode::Float).is_err());
    }
}
