//! Rearrangement engines: the classical greedy construction toward a target,
//! the constrained construction that fixes the permutation off a set A while
//! its checkpoint sums track an arbitrary target sequence within 1/n, and the
//! two-step pipeline for potentially conditionally convergent series.
//!
//! Engines are deterministic single-threaded state machines. Every stage is
//! certified afterwards by the independent verifier, never by engine state.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use num::rational::BigRational;
use num::{Signed, ToPrimitive};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::permutation::{compose, PermutationPrefix, PermutationView};
use crate::scalar::{Mode, Scalar};
use crate::series::{
    normalize_to_residues, restrict, Certificates, DerivedRule, LevelKind, MagProfile,
    SegmentFilter, SeriesSource, Verdict,
};

pub const DEFAULT_STAGE_BUDGET: u64 = 10_000_000;

/// Stage term budget, overridable through SERIESFORGE_BUDGET.
pub fn default_budget() -> u64 {
    std::env::var("SERIESFORGE_BUDGET")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_STAGE_BUDGET)
}

#[derive(Debug, Clone)]
pub enum TargetSeq {
    /// b_n = n mod 2.
    AltSign01,
    /// b_n = (-1)^n.
    Alternating,
    Zero,
    /// Explicit prefix, zero-extended.
    Values(Vec<BigRational>),
}

#[derive(Debug, Clone)]
pub enum TargetSpec {
    Const(Scalar),
    PlusInf,
    MinusInf,
    Sequence(TargetSeq),
}

impl TargetSpec {
    pub fn parse(spec: &str, mode: Mode) -> Result<Self> {
        if let Some(v) = spec.strip_prefix("const:") {
            return Ok(TargetSpec::Const(Scalar::parse(v, mode)?));
        }
        match spec {
            "plusinf" => return Ok(TargetSpec::PlusInf),
            "minusinf" => return Ok(TargetSpec::MinusInf),
            _ => {}
        }
        if let Some(seq) = spec.strip_prefix("seq:") {
            let seq = match seq {
                "altsign01" => TargetSeq::AltSign01,
                "alternating" => TargetSeq::Alternating,
                "zero" => TargetSeq::Zero,
                other => {
                    if let Some(path) = other.strip_prefix("file:") {
                        let text = std::fs::read_to_string(path)?;
                        let mut values = Vec::new();
                        for line in text.lines() {
                            let line = line.trim();
                            if line.is_empty() || line.starts_with('#') {
                                continue;
                            }
                            values.push(crate::scalar::parse_rational(line)?);
                        }
                        TargetSeq::Values(values)
                    } else {
                        return Err(Error::InvalidArgument(format!(
                            "unknown target sequence {other:?}"
                        )));
                    }
                }
            };
            return Ok(TargetSpec::Sequence(seq));
        }
        Err(Error::InvalidArgument(format!(
            "unknown target spec {spec:?} (expected const:<x>, plusinf, minusinf, seq:<name>)"
        )))
    }

    pub fn label(&self) -> String {
        match self {
            TargetSpec::Const(b) => format!("const:{b}"),
            TargetSpec::PlusInf => "plusinf".into(),
            TargetSpec::MinusInf => "minusinf".into(),
            TargetSpec::Sequence(TargetSeq::AltSign01) => "seq:altsign01".into(),
            TargetSpec::Sequence(TargetSeq::Alternating) => "seq:alternating".into(),
            TargetSpec::Sequence(TargetSeq::Zero) => "seq:zero".into(),
            TargetSpec::Sequence(TargetSeq::Values(_)) => "seq:values".into(),
        }
    }

    /// n-th tracked value; divergent targets are lowered to b_n = ±n.
    pub fn value(&self, n: u64, mode: Mode) -> Scalar {
        match self {
            TargetSpec::Const(b) => b.clone(),
            TargetSpec::PlusInf => Scalar::from_int(n as i64, mode),
            TargetSpec::MinusInf => Scalar::from_int(-(n as i64), mode),
            TargetSpec::Sequence(TargetSeq::AltSign01) => {
                Scalar::from_int((n % 2) as i64, mode)
            }
            TargetSpec::Sequence(TargetSeq::Alternating) => {
                Scalar::from_int(if n % 2 == 0 { 1 } else { -1 }, mode)
            }
            TargetSpec::Sequence(TargetSeq::Zero) => Scalar::zero(mode),
            TargetSpec::Sequence(TargetSeq::Values(values)) => values
                .get(n as usize - 1)
                .map(|v| Scalar::from_rational(v.clone(), mode))
                .unwrap_or_else(|| Scalar::zero(mode)),
        }
    }
}

/// Per-stage construction log.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: u64,
    pub checkpoint: u64,
    pub k_prime: Option<u64>,
    pub tail_bound: Option<Scalar>,
    pub forced: Option<(u64, u64)>,
    pub picks: u64,
}

#[derive(Debug, Clone)]
pub struct RearrangementResult {
    pub engine: String,
    pub sigma: PermutationPrefix,
    pub checkpoints: Vec<u64>,
    pub checkpoint_sums: Vec<Scalar>,
    pub targets_used: Vec<Scalar>,
    pub stage_log: Vec<StageRecord>,
    pub mode: Mode,
}

impl RearrangementResult {
    fn empty(engine: &str, mode: Mode) -> Self {
        RearrangementResult {
            engine: engine.into(),
            sigma: PermutationPrefix::identity(0),
            checkpoints: Vec::new(),
            checkpoint_sums: Vec::new(),
            targets_used: Vec::new(),
            stage_log: Vec::new(),
            mode,
        }
    }

    pub fn stages(&self) -> u64 {
        self.checkpoints.len() as u64
    }
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub budget: u64,
    /// Treat the source as potentially conditionally convergent.
    pub assume_pcc: bool,
    /// Treat the restriction to A as conditionally convergent.
    pub assume_cc: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            budget: default_budget(),
            assume_pcc: false,
            assume_cc: false,
        }
    }
}

fn pcc_gate(source: &SeriesSource, opts: &EngineOptions) -> Result<()> {
    if opts.assume_pcc {
        return Ok(());
    }
    match source.certificates().pcc {
        Some((Verdict::Holds, Verdict::Holds, Verdict::Holds)) => Ok(()),
        _ => Err(Error::NotPcc),
    }
}

/// Walks the indices of one sign of a series in increasing order.
enum SignCursor {
    /// Closed-form: the sign class is an index set.
    Set { set: IndexSet, next_ord: u64 },
    /// Scan terms one by one.
    Scan { next_index: u64 },
}

impl SignCursor {
    fn new(source: &SeriesSource, positive: bool) -> Self {
        match source.profile().and_then(|p| sign_class_set(&p, positive)) {
            Some(set) => SignCursor::Set { set, next_ord: 1 },
            None => SignCursor::Scan { next_index: 1 },
        }
    }

    fn next(&mut self, source: &SeriesSource, positive: bool, work: &mut u64) -> Result<u64> {
        match self {
            SignCursor::Set { set, next_ord } => {
                let idx = set
                    .enumerate(*next_ord)
                    .ok_or(Error::ExhaustedSet(*next_ord))?;
                *next_ord += 1;
                *work += 1;
                Ok(idx)
            }
            SignCursor::Scan { next_index } => loop {
                if let Some(len) = source.finite_len() {
                    if *next_index > len {
                        return Err(Error::ExhaustedSet(*next_index));
                    }
                }
                let n = *next_index;
                *next_index += 1;
                *work += 1;
                let t = source.try_term(n)?;
                let keep = if positive {
                    t.is_positive()
                } else {
                    t.is_negative()
                };
                if keep {
                    return Ok(n);
                }
            },
        }
    }
}

/// Residue class of one term sign under a magnitude profile.
fn sign_class_set(profile: &MagProfile, positive: bool) -> Option<IndexSet> {
    let want: i8 = if positive { 1 } else { -1 };
    let classes: Vec<u64> = (0..profile.sign_period)
        .filter(|&r| profile.sign_by_residue[r as usize] == want)
        .map(|r| if r == 0 { profile.sign_period } else { r })
        .collect();
    if classes.is_empty() {
        None
    } else {
        IndexSet::residues(profile.sign_period, classes).ok()
    }
}

/// Classical greedy rearrangement toward the target, crossing back and forth
/// until each stage lands within 1/n.
pub fn riemann_rearrange(
    source: &SeriesSource,
    target: &TargetSpec,
    stages: u64,
    opts: &EngineOptions,
) -> Result<RearrangementResult> {
    if stages == 0 {
        return Err(Error::InvalidArgument("riemann needs at least one stage".into()));
    }
    pcc_gate(source, opts)?;
    let mode = source.mode();
    let mut pos_cursor = SignCursor::new(source, true);
    let mut neg_cursor = SignCursor::new(source, false);
    let mut values: Vec<u64> = Vec::new();
    let mut sum = Scalar::zero(mode);
    let mut out = RearrangementResult::empty("riemann", mode);

    for n in 1..=stages {
        let b = target.value(n, mode);
        let tol = Scalar::ratio(1, n as i64, mode);
        let mut consumed: u64 = 0;
        let mut work: u64 = 0;
        let mut crossed = false;
        loop {
            if crossed && consumed >= 1 && sum.sub(&b).abs().le(&tol) {
                break;
            }
            if consumed >= opts.budget || work >= opts.budget.saturating_mul(4) {
                finish_result(&mut out, &values);
                return Err(Error::StageBudgetExceeded {
                    stage: n as usize,
                    budget: opts.budget,
                    partial: Box::new(out),
                });
            }
            let up = sum.le(&b);
            let idx = if up {
                pos_cursor.next(source, true, &mut work)?
            } else {
                neg_cursor.next(source, false, &mut work)?
            };
            sum = sum.add(&source.term(idx));
            values.push(idx);
            consumed += 1;
            crossed = if up { b.le(&sum) } else { sum.le(&b) };
        }
        out.checkpoints.push(values.len() as u64);
        out.checkpoint_sums.push(sum.clone());
        out.targets_used.push(b);
        out.stage_log.push(StageRecord {
            stage: n,
            checkpoint: values.len() as u64,
            k_prime: None,
            tail_bound: None,
            forced: None,
            picks: consumed,
        });
    }
    finish_result(&mut out, &values);
    Ok(out)
}

fn finish_result(out: &mut RearrangementResult, values: &[u64]) {
    out.sigma = PermutationPrefix::from_values(values);
}

/// Greedy permutation toward constant 0 with a forced placement of the
/// smallest unused index before every crossing pass. Extends on demand.
pub struct GreedyZeroPermutation {
    base: SeriesSource,
    budget: u64,
    state: Mutex<ZeroState>,
}

struct ZeroState {
    emitted: Vec<u64>,
    used: BTreeSet<u64>,
    frontier: u64,
    pos_cursor: SignCursor,
    neg_cursor: SignCursor,
    sum: Scalar,
}

impl GreedyZeroPermutation {
    pub fn new(source: &SeriesSource, opts: &EngineOptions) -> Result<Arc<Self>> {
        pcc_gate(source, opts)?;
        let mode = source.mode();
        Ok(Arc::new(GreedyZeroPermutation {
            base: source.clone(),
            budget: opts.budget,
            state: Mutex::new(ZeroState {
                emitted: Vec::new(),
                used: BTreeSet::new(),
                frontier: 1,
                pos_cursor: SignCursor::new(source, true),
                neg_cursor: SignCursor::new(source, false),
                sum: Scalar::zero(mode),
            }),
        }))
    }

    pub fn prefix(&self, len: u64) -> Result<Vec<u64>> {
        self.extend_to(len)?;
        let state = self.state.lock().expect("permutation lock");
        Ok(state.emitted[..len as usize].to_vec())
    }

    fn extend_to(&self, len: u64) -> Result<()> {
        let mut state = self.state.lock().expect("permutation lock");
        while (state.emitted.len() as u64) < len {
            self.cycle(&mut state)?;
        }
        Ok(())
    }

    /// One forced placement, then one crossing pass toward 0.
    fn cycle(&self, state: &mut ZeroState) -> Result<()> {
        let mode = self.base.mode();
        let mut f = state.frontier;
        while state.used.contains(&f) {
            f += 1;
        }
        state.frontier = f + 1;
        let keep = state.used.split_off(&state.frontier);
        state.used = keep;
        state.used.insert(f);
        state.emitted.push(f);
        state.sum = state.sum.add(&self.base.term(f));

        let zero = Scalar::zero(mode);
        let up = state.sum.le(&zero);
        let mut work: u64 = 0;
        loop {
            let crossed = if up {
                zero.le(&state.sum)
            } else {
                state.sum.le(&zero)
            };
            if crossed {
                break;
            }
            let idx = loop {
                let cand = if up {
                    state.pos_cursor.next(&self.base, true, &mut work)?
                } else {
                    state.neg_cursor.next(&self.base, false, &mut work)?
                };
                if !state.used.contains(&cand) {
                    break cand;
                }
            };
            if work > self.budget {
                return Err(Error::StageBudgetExceeded {
                    stage: state.emitted.len(),
                    budget: self.budget,
                    partial: Box::new(RearrangementResult::empty("convergentize", mode)),
                });
            }
            state.used.insert(idx);
            state.emitted.push(idx);
            state.sum = state.sum.add(&self.base.term(idx));
        }
        Ok(())
    }
}

impl PermutationView for GreedyZeroPermutation {
    fn value_at(&self, j: u64) -> Result<u64> {
        if j == 0 {
            return Err(Error::InsufficientDomain(0));
        }
        self.extend_to(j)?;
        let state = self.state.lock().expect("permutation lock");
        Ok(state.emitted[j as usize - 1])
    }
}

/// Convergentized view a_{π(n)} of a series.
pub struct PermutedSeries {
    pub perm: Arc<GreedyZeroPermutation>,
    pub base: SeriesSource,
}

impl DerivedRule for PermutedSeries {
    fn label(&self) -> String {
        format!("convergentize({})", self.base.label())
    }

    fn term(&self, n: u64, mode: Mode) -> Scalar {
        let _ = mode;
        let idx = self
            .perm
            .value_at(n)
            .expect("lazy permutation extension exceeded its budget");
        self.base.term(idx)
    }

    fn term_small(&self, n: u64) -> Option<(i64, u64)> {
        let idx = self.perm.value_at(n).ok()?;
        self.base.term_small(idx)
    }

    fn try_term(&self, n: u64, _mode: Mode) -> Result<Scalar> {
        Ok(self.base.term(self.perm.value_at(n)?))
    }
}

/// Builds the convergentized permutation generator for a pcc series.
pub fn convergentize(
    source: &SeriesSource,
    opts: &EngineOptions,
) -> Result<Arc<GreedyZeroPermutation>> {
    GreedyZeroPermutation::new(source, opts)
}

/// Picks terms of one sign from the unused part of A, coarsest magnitude
/// first, never exceeding the requested cap.
///
/// All picks come from indices strictly beyond `floor`: everything at or
/// below it belongs to the identity stretches of some stage, so drawing from
/// above keeps the permutation injective by construction.
struct LevelPicker {
    profile: MagProfile,
    pos_set: IndexSet,
    neg_set: IndexSet,
    floor: u64,
    min_level: u64,
    /// (positive, level) -> next candidate ordinal within the sign set.
    pointers: HashMap<(bool, u64), u64>,
}

impl LevelPicker {
    fn level_floor(&self, cap: &Scalar) -> Result<u64> {
        // Smallest level L with 1/L <= cap.
        let level = match cap {
            Scalar::Exact(r) => {
                if !r.is_positive() {
                    return Err(Error::InvalidArgument("cap must be positive".into()));
                }
                let ceil = (r.denom() + r.numer() - num::BigInt::from(1)) / r.numer();
                ceil.to_u64().ok_or_else(|| {
                    Error::InvalidArgument("tolerance finer than supported levels".into())
                })?
            }
            Scalar::Float(f) => {
                if *f <= 0.0 {
                    return Err(Error::InvalidArgument("cap must be positive".into()));
                }
                (1.0 / f).ceil() as u64
            }
        };
        Ok(level.max(1))
    }

    fn pick(
        &mut self,
        positive: bool,
        cap: &Scalar,
        consumed: &dyn Fn(u64) -> bool,
        work: &mut u64,
        budget: u64,
    ) -> Result<u64> {
        let set = if positive { &self.pos_set } else { &self.neg_set };
        let mut level = self.level_floor(cap)?.max(self.min_level);
        if self.profile.level == LevelKind::Constant && level > 1 {
            return Err(Error::InvalidArgument(
                "term magnitudes do not decay below the requested cap".into(),
            ));
        }
        loop {
            *work += 1;
            if *work > budget {
                return Err(Error::StageBudgetExceeded {
                    stage: 0,
                    budget,
                    partial: Box::new(RearrangementResult::empty("constrain", Mode::Exact)),
                });
            }
            let (ls, le) = self.profile.level_range(level);
            let ls = ls.max(self.floor.saturating_add(1));
            let lo_ord = set.count(ls.saturating_sub(1)) + 1;
            let hi_ord = set.count(le);
            let ptr = self.pointers.entry((positive, level)).or_insert(lo_ord);
            let mut ord = (*ptr).max(lo_ord);
            let mut found = None;
            while ord <= hi_ord {
                *work += 1;
                let idx = set.enumerate(ord).ok_or(Error::ExhaustedSet(ord))?;
                if consumed(idx) {
                    ord += 1;
                } else {
                    found = Some(idx);
                    break;
                }
            }
            *ptr = ord;
            if let Some(idx) = found {
                *ptr = ord + 1;
                return Ok(idx);
            }
            level += 1;
        }
    }
}

/// Fallback for sources without a magnitude profile: consume A-indices of the
/// wanted sign in plain increasing order.
struct CursorPicker {
    /// Next A-ordinal to inspect, per sign.
    pos_ord: u64,
    neg_ord: u64,
}

impl CursorPicker {
    fn pick(
        &mut self,
        source: &SeriesSource,
        a: &IndexSet,
        positive: bool,
        consumed: &dyn Fn(u64) -> bool,
        work: &mut u64,
        budget: u64,
    ) -> Result<u64> {
        let ord = if positive {
            &mut self.pos_ord
        } else {
            &mut self.neg_ord
        };
        loop {
            *work += 1;
            if *work > budget {
                return Err(Error::StageBudgetExceeded {
                    stage: 0,
                    budget,
                    partial: Box::new(RearrangementResult::empty("constrain", source.mode())),
                });
            }
            let idx = a.enumerate(*ord).ok_or(Error::ExhaustedSet(*ord))?;
            *ord += 1;
            let t = source.try_term(idx)?;
            let keep = if positive {
                t.is_positive()
            } else {
                t.is_negative()
            };
            if keep && !consumed(idx) {
                return Ok(idx);
            }
        }
    }
}

enum Picker {
    Level(LevelPicker),
    Cursor(CursorPicker),
}

/// Indices consumed implicitly by identity stretches plus explicit picks.
#[derive(Default)]
struct ConsumedSet {
    used: BTreeSet<u64>,
    forced_positions: BTreeSet<u64>,
    /// Sorted disjoint position ranges assigned identically.
    identity_ranges: Vec<(u64, u64)>,
}

impl ConsumedSet {
    fn contains(&self, idx: u64) -> bool {
        if self.used.contains(&idx) {
            return true;
        }
        let at = self.identity_ranges.partition_point(|&(lo, _)| lo <= idx);
        if at == 0 {
            return false;
        }
        let (lo, hi) = self.identity_ranges[at - 1];
        idx >= lo && idx <= hi && !self.forced_positions.contains(&idx)
    }

    fn push_range(&mut self, lo: u64, hi: u64) {
        if lo <= hi {
            debug_assert!(self
                .identity_ranges
                .last()
                .map(|&(_, prev)| prev < lo)
                .unwrap_or(true));
            self.identity_ranges.push((lo, hi));
        }
    }
}

/// Constrained rearrangement: identity off A, one forced placement per stage,
/// and checkpoint sums tracking the target within 1/n.
///
/// Stage n: find the smallest k' > k_{n-1} past which the off-A tail is
/// certified below 1/(2n); assign everything in (k_{n-1}, k'] identically
/// except the first A-position, which receives the smallest A-index missing
/// from the image; then place greedily chosen unused A-indices on the
/// A-positions after k' until their sum lands within 1/(2n) of the residual
/// target. The off-A overhang past k' is covered by the tail certificate, so
/// the checkpoint error is at most 1/n.
pub fn constrained_rearrange(
    source: &SeriesSource,
    a: &IndexSet,
    target: &TargetSpec,
    stages: u64,
    opts: &EngineOptions,
) -> Result<RearrangementResult> {
    let mode = source.mode();
    let a = normalize_to_residues(a).unwrap_or_else(|| a.clone());
    if a.is_empty() {
        return Err(Error::InvalidArgument("constraint set A must be nonempty".into()));
    }

    let restricted = restrict(source, &a);
    if !restricted.certificates().conditionally_convergent && !opts.assume_cc {
        return Err(Error::NotConditionallyConvergentOnA);
    }
    let off_set = IndexSet::complement(a.clone());
    let off_series = restrict(source, &off_set);
    if !off_series.has_tail_oracle() {
        return Err(Error::MissingOracle);
    }
    if stages == 0 {
        return Ok(RearrangementResult::empty("constrain", mode));
    }

    // Identity stretches never reach past the final stage's Cauchy index, so
    // greedy picks drawn from strictly beyond it can never collide with an
    // identically assigned position.
    let pick_floor = {
        let final_tol = Scalar::ratio(1, 2 * stages as i64, mode);
        if off_series.tail_bound(0)?.le(&final_tol) {
            0
        } else {
            let r = off_series.tail_index_for(&final_tol, 0)?;
            off_set.enumerate(r).ok_or(Error::ExhaustedSet(r))?
        }
    };

    let mut picker = match source.profile() {
        Some(profile) => {
            let pos = signed_subset(&a, &profile, true);
            let neg = signed_subset(&a, &profile, false);
            match (pos, neg) {
                (Some(pos_set), Some(neg_set)) => Picker::Level(LevelPicker {
                    min_level: profile.level_of(pick_floor.saturating_add(1)),
                    profile,
                    pos_set,
                    neg_set,
                    floor: pick_floor,
                    pointers: HashMap::new(),
                }),
                _ => Picker::Cursor(CursorPicker {
                    pos_ord: a.count(pick_floor) + 1,
                    neg_ord: a.count(pick_floor) + 1,
                }),
            }
        }
        None => Picker::Cursor(CursorPicker {
            pos_ord: a.count(pick_floor) + 1,
            neg_ord: a.count(pick_floor) + 1,
        }),
    };

    let mut consumed = ConsumedSet::default();
    let mut sigma = PermutationPrefix::identity(0);
    let mut out = RearrangementResult::empty("constrain", mode);
    let mut sum = Scalar::zero(mode);
    let mut k_prev: u64 = 0;
    let mut forced_ord: u64 = 1;

    for stage in 1..=stages {
        let b = target.value(stage, mode);
        let tol_half = Scalar::ratio(1, 2 * stage as i64, mode);

        // (i) Cauchy index for the off-A tail.
        let off_count = |x: u64| x - a.count(x);
        let r_star = if off_series.tail_bound(0)?.le(&tol_half) {
            0
        } else {
            off_series.tail_index_for(&tol_half, 0)?
        };
        let k_prime = if r_star == 0 {
            k_prev + 1
        } else {
            let boundary = off_set
                .enumerate(r_star)
                .ok_or(Error::ExhaustedSet(r_star))?;
            boundary.max(k_prev + 1)
        };
        let tail_bound = off_series.tail_bound(off_count(k_prime))?;

        // (ii) forced placement at the first A-position after k_prev.
        let j_forced = a
            .next_member_after(k_prev)
            .ok_or(Error::ExhaustedSet(k_prev))?;
        consumed.push_range(k_prev + 1, k_prime);
        consumed.forced_positions.insert(j_forced);
        let forced_idx = {
            let mut ord = forced_ord;
            loop {
                let idx = a.enumerate(ord).ok_or(Error::ExhaustedSet(ord))?;
                if !consumed.contains(idx) {
                    forced_ord = ord + 1;
                    break idx;
                }
                ord += 1;
            }
        };
        consumed.used.insert(forced_idx);
        sigma.assign(j_forced, forced_idx);
        let forced_term = source.try_term(forced_idx)?;

        // (iii) residual for the greedy picks beyond k'.
        let identity_sum = {
            let whole = source.segment_sum(k_prev, k_prime, SegmentFilter::All);
            if j_forced <= k_prime {
                whole.sub(&source.try_term(j_forced)?)
            } else {
                whole
            }
        };
        let residual = b
            .sub(&sum)
            .sub(&forced_term)
            .sub(&identity_sum);

        let mut pick_positions = PositionAllocator {
            ord: a.count(k_prime) + 1,
            skip: if j_forced > k_prime {
                Some(j_forced)
            } else {
                None
            },
        };
        let mut g = Scalar::zero(mode);
        let mut picks: u64 = 0;
        let mut work: u64 = 0;
        let mut k_next = k_prime.max(j_forced);
        let mut stage_failed: Option<Error> = None;

        match &mut picker {
            Picker::Level(level_picker) => loop {
                let gap = residual.sub(&g);
                let within = gap.abs().le(&tol_half);
                if within && picks >= 1 {
                    break;
                }
                let positive = !gap.is_negative();
                let cap = if within { tol_half.clone() } else { gap.abs() };
                let used_view = &consumed;
                let idx = match level_picker.pick(
                    positive,
                    &cap,
                    &|i| used_view.contains(i),
                    &mut work,
                    opts.budget,
                ) {
                    Ok(idx) => idx,
                    Err(e) => {
                        stage_failed = Some(e);
                        break;
                    }
                };
                let position = match pick_positions.next(&a) {
                    Ok(p) => p,
                    Err(e) => {
                        stage_failed = Some(e);
                        break;
                    }
                };
                consumed.used.insert(idx);
                sigma.assign(position, idx);
                g = g.add(&source.term(idx));
                picks += 1;
                k_next = position;
                if picks > opts.budget {
                    stage_failed = Some(Error::StageBudgetExceeded {
                        stage: stage as usize,
                        budget: opts.budget,
                        partial: Box::new(RearrangementResult::empty("constrain", mode)),
                    });
                    break;
                }
            },
            Picker::Cursor(cursor_picker) => {
                let mut crossed = false;
                loop {
                    let gap = residual.sub(&g);
                    if crossed && picks >= 1 && gap.abs().le(&tol_half) {
                        break;
                    }
                    let up = g.le(&residual);
                    let used_view = &consumed;
                    let idx = match cursor_picker.pick(
                        source,
                        &a,
                        up,
                        &|i| used_view.contains(i),
                        &mut work,
                        opts.budget,
                    ) {
                        Ok(idx) => idx,
                        Err(e) => {
                            stage_failed = Some(e);
                            break;
                        }
                    };
                    let position = match pick_positions.next(&a) {
                        Ok(p) => p,
                        Err(e) => {
                            stage_failed = Some(e);
                            break;
                        }
                    };
                    consumed.used.insert(idx);
                    sigma.assign(position, idx);
                    g = g.add(&source.term(idx));
                    picks += 1;
                    k_next = position;
                    crossed = if up { residual.le(&g) } else { g.le(&residual) };
                    if picks > opts.budget {
                        stage_failed = Some(Error::StageBudgetExceeded {
                            stage: stage as usize,
                            budget: opts.budget,
                            partial: Box::new(RearrangementResult::empty("constrain", mode)),
                        });
                        break;
                    }
                }
            }
        }

        if let Some(err) = stage_failed {
            sigma.extend_identity(k_next);
            out.sigma = sigma;
            return Err(match err {
                Error::StageBudgetExceeded { budget, .. } => Error::StageBudgetExceeded {
                    stage: stage as usize,
                    budget,
                    partial: Box::new(out),
                },
                other => other,
            });
        }

        // (iv) checkpoint and the exact sum over everything placed.
        let overhang = source.segment_sum(k_prime, k_next, SegmentFilter::NotIn(&a));
        sum = sum
            .add(&forced_term)
            .add(&identity_sum)
            .add(&g)
            .add(&overhang);
        sigma.extend_identity(k_next);
        out.checkpoints.push(k_next);
        out.checkpoint_sums.push(sum.clone());
        out.targets_used.push(b);
        out.stage_log.push(StageRecord {
            stage,
            checkpoint: k_next,
            k_prime: Some(k_prime),
            tail_bound: Some(tail_bound),
            forced: Some((j_forced, forced_idx)),
            picks,
        });
        k_prev = k_next;
    }

    out.sigma = sigma;
    Ok(out)
}

struct PositionAllocator {
    ord: u64,
    skip: Option<u64>,
}

impl PositionAllocator {
    fn next(&mut self, a: &IndexSet) -> Result<u64> {
        loop {
            let p = a.enumerate(self.ord).ok_or(Error::ExhaustedSet(self.ord))?;
            self.ord += 1;
            if Some(p) != self.skip {
                return Ok(p);
            }
        }
    }
}

/// A-indices of one sign as an index set, when expressible in closed form.
fn signed_subset(a: &IndexSet, profile: &MagProfile, positive: bool) -> Option<IndexSet> {
    let want: i8 = if positive { 1 } else { -1 };
    let period = profile.sign_period;
    let norm = |r: u64| if r % period == 0 { period } else { r % period };
    match a {
        IndexSet::All => sign_class_set(profile, positive),
        IndexSet::Residues { modulus, residues } => {
            let (modulus, residues) = if modulus % period == 0 {
                (*modulus, residues.clone())
            } else {
                // Expand to a common period.
                let g = crate::scalar::gcd_u64(*modulus, period);
                let l = modulus / g * period;
                let expanded: Vec<u64> = residues
                    .iter()
                    .flat_map(|&r| (0..l / modulus).map(move |k| r + k * modulus))
                    .collect();
                (l, expanded)
            };
            let filtered: Vec<u64> = residues
                .into_iter()
                .filter(|&r| profile.sign_by_residue[(norm(r) % period) as usize] == want)
                .collect();
            if filtered.is_empty() {
                IndexSet::finite(vec![]).ok()
            } else {
                IndexSet::residues(modulus, filtered).ok()
            }
        }
        IndexSet::Finite { elements } => {
            let filtered: Vec<u64> = elements
                .iter()
                .copied()
                .filter(|&n| profile.sign_by_residue[(n % period) as usize] == want)
                .collect();
            IndexSet::finite(filtered).ok()
        }
        _ => None,
    }
}

/// Pipeline for potentially conditionally convergent series: convergentize
/// with π, run the constrained construction on the rearranged series with
/// A = ℕ, and return the composite permutation π ∘ σ'.
pub fn rearrange_pcc(
    source: &SeriesSource,
    target: &TargetSpec,
    stages: u64,
    opts: &EngineOptions,
) -> Result<RearrangementResult> {
    pcc_gate(source, opts)?;
    let mode = source.mode();
    let pi = convergentize(source, opts)?;
    let mut rearranged = SeriesSource::from_derived(
        Arc::new(PermutedSeries {
            perm: Arc::clone(&pi),
            base: source.clone(),
        }),
        mode,
    );
    // The greedy-to-zero rearrangement converges by construction; its
    // magnitudes are the original ones, so both signed parts still diverge.
    rearranged.assert_certificates(Certificates {
        alternating_nonincreasing: false,
        magnitudes_vanish: true,
        magnitude_sum_diverges: true,
        pcc: Some((Verdict::Holds, Verdict::Holds, Verdict::Holds)),
        conditionally_convergent: true,
    });

    let compose_with_pi = |inner: &PermutationPrefix| -> Result<PermutationPrefix> {
        compose(pi.as_ref(), inner, inner.len())
    };

    match constrained_rearrange(&rearranged, &IndexSet::all(), target, stages, opts) {
        Ok(mut inner) => {
            inner.sigma = compose_with_pi(&inner.sigma)?;
            inner.engine = "pcc-rearrange".into();
            Ok(inner)
        }
        Err(Error::StageBudgetExceeded {
            stage,
            budget,
            partial,
        }) => {
            let mut partial = *partial;
            if let Ok(composed) = compose_with_pi(&partial.sigma) {
                partial.sigma = composed;
            }
            partial.engine = "pcc-rearrange".into();
            Err(Error::StageBudgetExceeded {
                stage,
                budget,
                partial: Box::new(partial),
            })
        }
        Err(other) => Err(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::Zero;

    fn exact_opts() -> EngineOptions {
        EngineOptions {
            budget: 1_000_000,
            ..Default::default()
        }
    }

    #[test]
    fn riemann_single_step_crossing() {
        // Target equal to a_1 > 0: the first crossing lands at k_1 = 1.
        let src = SeriesSource::altharmonic(Mode::Exact);
        let r = riemann_rearrange(
            &src,
            &TargetSpec::Const(Scalar::from_int(1, Mode::Exact)),
            1,
            &exact_opts(),
        )
        .unwrap();
        assert_eq!(r.checkpoints, vec![1]);
        assert_eq!(r.sigma.value(1), Some(1));
        assert_eq!(r.checkpoint_sums[0], Scalar::from_int(1, Mode::Exact));
    }

    #[test]
    fn riemann_altharmonic_tracks_half() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let target = TargetSpec::Const(Scalar::ratio(1, 2, Mode::Exact));
        let r = riemann_rearrange(&src, &target, 50, &exact_opts()).unwrap();
        for (n, (s, b)) in r.checkpoint_sums.iter().zip(&r.targets_used).enumerate() {
            let bound = Scalar::ratio(1, n as i64 + 1, Mode::Exact);
            assert!(s.sub(b).abs().le(&bound), "stage {}", n + 1);
        }
        // Greedy crossing bound: error at k_n is at most the last term placed.
        for (n, &k) in r.checkpoints.iter().enumerate() {
            let last = src.term(r.sigma.value(k).unwrap()).abs();
            let err = r.checkpoint_sums[n].sub(&r.targets_used[n]).abs();
            assert!(err.le(&last));
        }
    }

    #[test]
    fn riemann_requires_pcc() {
        let src = SeriesSource::altsign(Mode::Exact);
        let err = riemann_rearrange(
            &src,
            &TargetSpec::Const(Scalar::zero(Mode::Exact)),
            3,
            &exact_opts(),
        );
        assert!(matches!(err, Err(Error::NotPcc)));
    }

    #[test]
    fn riemann_plusinf_on_triples() {
        let src = SeriesSource::triples(Mode::Float);
        let r = riemann_rearrange(&src, &TargetSpec::PlusInf, 20, &exact_opts()).unwrap();
        for (n, s) in r.checkpoint_sums.iter().enumerate() {
            let b = (n + 1) as f64;
            assert!((s.to_f64() - b).abs() <= 1.0 / (n + 1) as f64 + 1e-9);
        }
    }

    #[test]
    fn convergentize_bounds_triples() {
        let src = SeriesSource::triples(Mode::Exact);
        let pi = convergentize(&src, &exact_opts()).unwrap();
        let prefix = pi.prefix(10_000).unwrap();
        // Valid permutation prefix.
        let mut seen = std::collections::HashSet::new();
        assert!(prefix.iter().all(|&i| seen.insert(i)));
        assert_eq!(prefix[0], 1);
        // Partial sums stay within [-1, 2].
        let mut s = BigRational::zero();
        for &idx in &prefix {
            if let Scalar::Exact(t) = src.term(idx) {
                s += t;
            }
            assert!(s <= BigRational::from_integer(2.into()));
            assert!(s >= BigRational::from_integer((-1).into()));
        }
    }

    #[test]
    fn convergentize_altharmonic_stays_bounded() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let pi = convergentize(&src, &exact_opts()).unwrap();
        let prefix = pi.prefix(2_000).unwrap();
        let mut s = BigRational::zero();
        let two = BigRational::from_integer(2.into());
        for &idx in &prefix {
            if let Scalar::Exact(t) = src.term(idx) {
                s += t;
            }
            assert!(s.abs() <= two);
        }
    }

    #[test]
    fn constrained_identity_off_a_and_bounds() {
        let src = SeriesSource::altpow4ceil(Mode::Exact);
        let a = IndexSet::residues(4, vec![1, 2]).unwrap();
        let target = TargetSpec::Sequence(TargetSeq::Alternating);
        let r = constrained_rearrange(&src, &a, &target, 12, &exact_opts()).unwrap();
        assert!(r.sigma.identity_off(&a));
        assert!(r.sigma.is_injective());
        for n in 1..=12usize {
            let err = r.checkpoint_sums[n - 1].sub(&r.targets_used[n - 1]).abs();
            let bound = Scalar::ratio(1, n as i64, Mode::Exact);
            assert!(err.le(&bound), "stage {n}");
        }
        // Strictly increasing checkpoints interleaved with the k' ledger.
        for (i, rec) in r.stage_log.iter().enumerate() {
            let k_prime = rec.k_prime.unwrap();
            let prev = if i == 0 { 0 } else { r.checkpoints[i - 1] };
            assert!(prev < k_prime && k_prime < rec.checkpoint);
        }
    }

    #[test]
    fn constrained_on_all_tracks_zero() {
        let src = SeriesSource::altharmonic(Mode::Exact);
        let target = TargetSpec::Sequence(TargetSeq::Zero);
        let r =
            constrained_rearrange(&src, &IndexSet::all(), &target, 50, &exact_opts()).unwrap();
        for n in 1..=50usize {
            let err = r.checkpoint_sums[n - 1].abs();
            let bound = Scalar::ratio(1, n as i64, Mode::Exact);
            assert!(err.le(&bound), "stage {n}");
        }
    }

    #[test]
    fn constrained_requires_certificate() {
        let src = SeriesSource::altsign(Mode::Exact);
        let err = constrained_rearrange(
            &src,
            &IndexSet::all(),
            &TargetSpec::Sequence(TargetSeq::Zero),
            3,
            &exact_opts(),
        );
        assert!(matches!(err, Err(Error::NotConditionallyConvergentOnA)));
    }

    #[test]
    fn constrained_missing_oracle() {
        // Triples restricted to odd trios: no alternation certificate for the
        // off part, so no oracle.
        let src = SeriesSource::triples(Mode::Exact);
        let a = IndexSet::residues(3, vec![1]).unwrap();
        let mut opts = exact_opts();
        opts.assume_cc = true;
        let err = constrained_rearrange(
            &src,
            &a,
            &TargetSpec::Sequence(TargetSeq::Zero),
            3,
            &opts,
        );
        assert!(matches!(err, Err(Error::MissingOracle)));
    }

    #[test]
    fn pcc_pipeline_small_run() {
        let src = SeriesSource::triples(Mode::Exact);
        let target = TargetSpec::Sequence(TargetSeq::Alternating);
        let r = rearrange_pcc(&src, &target, 8, &exact_opts()).unwrap();
        assert!(r.sigma.is_injective());
        for n in 1..=8usize {
            let err = r.checkpoint_sums[n - 1].sub(&r.targets_used[n - 1]).abs();
            let bound = Scalar::ratio(1, n as i64, Mode::Exact);
            assert!(err.le(&bound), "stage {n}");
        }
        // The recorded sums really are the sums of the composite permutation.
        for (i, &k) in r.checkpoints.iter().enumerate() {
            let mut s = BigRational::zero();
            for j in 1..=k {
                let idx = r.sigma.value(j).unwrap();
                if let Scalar::Exact(t) = src.term(idx) {
                    s += t;
                }
            }
            assert_eq!(Scalar::Exact(s), r.checkpoint_sums[i], "checkpoint {}", i + 1);
        }
    }

    #[test]
    fn stage_budget_surfaces_partial() {
        let src = SeriesSource::triples(Mode::Float);
        let target = TargetSpec::Sequence(TargetSeq::Alternating);
        let mut opts = EngineOptions::default();
        opts.budget = 2_000;
        match rearrange_pcc(&src, &target, 50, &opts) {
            Err(Error::StageBudgetExceeded { stage, partial, .. }) => {
                assert!(stage >= 1);
                assert_eq!(partial.engine, "pcc-rearrange");
                assert!(partial.stages() < 50);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn target_parsing() {
        assert!(matches!(
            TargetSpec::parse("const:1/2", Mode::Exact),
            Ok(TargetSpec::Const(_))
        ));
        assert!(matches!(
            TargetSpec::parse("plusinf", Mode::Exact),
            Ok(TargetSpec::PlusInf)
        ));
        assert!(matches!(
            TargetSpec::parse("seq:alternating", Mode::Exact),
            Ok(TargetSpec::Sequence(TargetSeq::Alternating))
        ));
        assert!(TargetSpec::parse("seq:bogus", Mode::Exact).is_err());
        let alt = TargetSpec::parse("seq:altsign01", Mode::Exact).unwrap();
        assert_eq!(alt.value(1, Mode::Exact), Scalar::from_int(1, Mode::Exact));
        assert_eq!(alt.value(2, Mode::Exact), Scalar::from_int(0, Mode::Exact));
    }
}
