//! Dual-mode arithmetic: arbitrary-precision rationals for exact runs and
//! binary64 with an explicit slack for float runs.
//!
//! A computation run fixes one mode up front. Values never migrate between
//! modes mid-run; constructors at the API boundary reject mixtures and the
//! arithmetic below treats a mix as a programming error.

use std::cmp::Ordering;
use std::fmt;

use num::bigint::{BigInt, BigUint, Sign};
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Arithmetic mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Float,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Exact => write!(f, "exact"),
            Mode::Float => write!(f, "float"),
        }
    }
}

/// Default numerical slack admitted by float-mode verification.
pub const DEFAULT_FLOAT_SLACK: f64 = 1e-9;

/// A real number in the arithmetic mode of the enclosing run.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    Exact(BigRational),
    Float(f64),
}

impl Scalar {
    pub fn zero(mode: Mode) -> Self {
        match mode {
            Mode::Exact => Scalar::Exact(BigRational::zero()),
            Mode::Float => Scalar::Float(0.0),
        }
    }

    pub fn from_int(n: i64, mode: Mode) -> Self {
        match mode {
            Mode::Exact => Scalar::Exact(BigRational::from_integer(BigInt::from(n))),
            Mode::Float => Scalar::Float(n as f64),
        }
    }

    /// p/q in the given mode. `q` must be nonzero.
    pub fn ratio(p: i64, q: i64, mode: Mode) -> Self {
        assert!(q != 0, "zero denominator");
        match mode {
            Mode::Exact => Scalar::Exact(BigRational::new(BigInt::from(p), BigInt::from(q))),
            Mode::Float => Scalar::Float(p as f64 / q as f64),
        }
    }

    pub fn from_rational(r: BigRational, mode: Mode) -> Self {
        match mode {
            Mode::Exact => Scalar::Exact(r),
            Mode::Float => Scalar::Float(rational_to_f64(&r)),
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Scalar::Exact(_) => Mode::Exact,
            Scalar::Float(_) => Mode::Float,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Scalar::Exact(r) => r.is_zero(),
            Scalar::Float(f) => *f == 0.0,
        }
    }

    pub fn is_positive(&self) -> bool {
        match self {
            Scalar::Exact(r) => r.is_positive(),
            Scalar::Float(f) => *f > 0.0,
        }
    }

    pub fn is_negative(&self) -> bool {
        match self {
            Scalar::Exact(r) => r.is_negative(),
            Scalar::Float(f) => *f < 0.0,
        }
    }

    pub fn add(&self, other: &Scalar) -> Scalar {
        match (self, other) {
            (Scalar::Exact(a), Scalar::Exact(b)) => Scalar::Exact(a + b),
            (Scalar::Float(a), Scalar::Float(b)) => Scalar::Float(a + b),
            _ => panic!("mixed arithmetic modes"),
        }
    }

    pub fn sub(&self, other: &Scalar) -> Scalar {
        match (self, other) {
            (Scalar::Exact(a), Scalar::Exact(b)) => Scalar::Exact(a - b),
            (Scalar::Float(a), Scalar::Float(b)) => Scalar::Float(a - b),
            _ => panic!("mixed arithmetic modes"),
        }
    }

    pub fn mul(&self, other: &Scalar) -> Scalar {
        match (self, other) {
            (Scalar::Exact(a), Scalar::Exact(b)) => Scalar::Exact(a * b),
            (Scalar::Float(a), Scalar::Float(b)) => Scalar::Float(a * b),
            _ => panic!("mixed arithmetic modes"),
        }
    }

    pub fn neg(&self) -> Scalar {
        match self {
            Scalar::Exact(r) => Scalar::Exact(-r),
            Scalar::Float(f) => Scalar::Float(-f),
        }
    }

    pub fn abs(&self) -> Scalar {
        match self {
            Scalar::Exact(r) => Scalar::Exact(r.abs()),
            Scalar::Float(f) => Scalar::Float(f.abs()),
        }
    }

    /// Total order; panics on mode mixture or NaN.
    pub fn cmp_val(&self, other: &Scalar) -> Ordering {
        match (self, other) {
            (Scalar::Exact(a), Scalar::Exact(b)) => a.cmp(b),
            (Scalar::Float(a), Scalar::Float(b)) => {
                a.partial_cmp(b).expect("NaN in scalar comparison")
            }
            _ => panic!("mixed arithmetic modes"),
        }
    }

    pub fn le(&self, other: &Scalar) -> bool {
        self.cmp_val(other) != Ordering::Greater
    }

    pub fn lt(&self, other: &Scalar) -> bool {
        self.cmp_val(other) == Ordering::Less
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Scalar::Exact(r) => rational_to_f64(r),
            Scalar::Float(f) => *f,
        }
    }

    pub fn as_rational(&self) -> Option<&BigRational> {
        match self {
            Scalar::Exact(r) => Some(r),
            Scalar::Float(_) => None,
        }
    }

    /// Parses integer, `p/q`, or decimal literals. Rational literals are kept
    /// exact in exact mode; in float mode everything lands on f64.
    pub fn parse(text: &str, mode: Mode) -> Result<Scalar> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::InvalidArgument("empty numeric literal".into()));
        }
        let rational = parse_rational(text)?;
        Ok(Scalar::from_rational(rational, mode))
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Exact(r) => {
                if r.denom().is_one() {
                    write!(f, "{}", r.numer())
                } else {
                    write!(f, "{}/{}", r.numer(), r.denom())
                }
            }
            Scalar::Float(x) => write!(f, "{x}"),
        }
    }
}

/// Parses `p/q`, integer, or plain decimal text into an exact rational.
pub fn parse_rational(text: &str) -> Result<BigRational> {
    let bad = || Error::InvalidArgument(format!("cannot parse number {text:?}"));
    if let Some((num, den)) = text.split_once('/') {
        let n: BigInt = num.trim().parse().map_err(|_| bad())?;
        let d: BigInt = den.trim().parse().map_err(|_| bad())?;
        if d.is_zero() {
            return Err(bad());
        }
        return Ok(BigRational::new(n, d));
    }
    if let Some((whole, frac)) = text.split_once('.') {
        if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let negative = whole.trim_start().starts_with('-');
        let w: BigInt = if whole.is_empty() || whole == "-" {
            BigInt::zero()
        } else {
            whole.parse().map_err(|_| bad())?
        };
        let digits: BigInt = frac.parse().map_err(|_| bad())?;
        let scale = BigInt::from(10u32).pow(frac.len() as u32);
        let frac_part = BigRational::new(digits, scale);
        let whole_part = BigRational::from_integer(w);
        return Ok(if negative {
            whole_part - frac_part
        } else {
            whole_part + frac_part
        });
    }
    let n: BigInt = text.parse().map_err(|_| bad())?;
    Ok(BigRational::from_integer(n))
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.numer().to_f64().unwrap_or(f64::NAN) / r.denom().to_f64().unwrap_or(f64::NAN)
}

/// Streaming sum of many small rationals.
///
/// Exact mode keeps two unsigned magnitude accumulators (one per sign) over a
/// running common denominator, so a term `p/q` with `q` dividing the current
/// denominator costs one multi-limb add. Readouts subtract the magnitudes.
/// Terms that do not fit the fast path fall back to a side rational.
///
/// Float mode is a Kahan compensated sum.
pub enum SumAccumulator {
    Exact(ExactSum),
    Float(KahanSum),
}

impl SumAccumulator {
    pub fn new(mode: Mode) -> Self {
        match mode {
            Mode::Exact => SumAccumulator::Exact(ExactSum::new()),
            Mode::Float => SumAccumulator::Float(KahanSum::default()),
        }
    }

    #[inline]
    pub fn add(&mut self, value: &Scalar) {
        match (self, value) {
            (SumAccumulator::Exact(acc), Scalar::Exact(r)) => acc.add_rational(r),
            (SumAccumulator::Float(acc), Scalar::Float(f)) => acc.add(*f),
            _ => panic!("mixed arithmetic modes"),
        }
    }

    /// Fast path for `sign * 1/den` terms.
    #[inline]
    pub fn add_unit_fraction(&mut self, negative: bool, den: u64) {
        match self {
            SumAccumulator::Exact(acc) => acc.add_small(if negative { -1 } else { 1 }, den),
            SumAccumulator::Float(acc) => {
                let v = 1.0 / den as f64;
                acc.add(if negative { -v } else { v });
            }
        }
    }

    pub fn value(&self, mode: Mode) -> Scalar {
        match self {
            SumAccumulator::Exact(acc) => Scalar::Exact(acc.value()),
            SumAccumulator::Float(acc) => {
                debug_assert_eq!(mode, Mode::Float);
                Scalar::Float(acc.value())
            }
        }
    }
}

/// Exact fixed-denominator accumulator. See [`SumAccumulator`].
pub struct ExactSum {
    /// Current common denominator.
    den: BigUint,
    pos: Vec<u64>,
    neg: Vec<u64>,
    /// weights[q] = limbs of den/q for denominators seen so far.
    weights: std::collections::HashMap<u64, Vec<u64>>,
    /// Terms outside the small fast path.
    side: BigRational,
}

impl ExactSum {
    pub fn new() -> Self {
        ExactSum {
            den: BigUint::one(),
            pos: Vec::new(),
            neg: Vec::new(),
            weights: std::collections::HashMap::new(),
            side: BigRational::zero(),
        }
    }

    /// Adds `num/den` where both components are machine-sized.
    #[inline]
    pub fn add_small(&mut self, num: i64, den: u64) {
        debug_assert!(den != 0);
        if num == 0 {
            return;
        }
        if !self.weights.contains_key(&den) {
            self.admit_denominator(den);
        }
        let weight = self.weights.get(&den).expect("weight just admitted");
        let mag = num.unsigned_abs();
        let acc = if num > 0 { &mut self.pos } else { &mut self.neg };
        add_scaled(acc, weight, mag);
    }

    pub fn add_rational(&mut self, r: &BigRational) {
        if r.is_zero() {
            return;
        }
        let num_small = r.numer().to_i64();
        let den_small = r.denom().to_u64();
        match (num_small, den_small) {
            (Some(n), Some(d)) => self.add_small(n, d),
            _ => self.side += r,
        }
    }

    fn admit_denominator(&mut self, q: u64) {
        // Grow den to lcm(den, q) and rescale everything already accumulated.
        let rem = (&self.den % q).to_u64().expect("mod of u64 fits u64");
        let g = gcd_u64(if rem == 0 { q } else { rem }, q);
        let factor = q / g;
        if factor > 1 {
            self.den *= factor;
            scale_in_place(&mut self.pos, factor);
            scale_in_place(&mut self.neg, factor);
            for w in self.weights.values_mut() {
                scale_in_place(w, factor);
            }
        }
        let w = biguint_to_limbs(&(&self.den / q));
        self.weights.insert(q, w);
    }

    pub fn value(&self) -> BigRational {
        let pos = BigInt::from_biguint(Sign::Plus, limbs_to_biguint(&self.pos));
        let neg = BigInt::from_biguint(Sign::Plus, limbs_to_biguint(&self.neg));
        let den = BigInt::from_biguint(Sign::Plus, self.den.clone());
        BigRational::new(pos - neg, den) + &self.side
    }
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

/// Compensated f64 summation.
#[derive(Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

#[inline]
fn add_scaled(acc: &mut Vec<u64>, weight: &[u64], scale: u64) {
    if acc.len() < weight.len() + 2 {
        acc.resize(weight.len() + 2, 0);
    }
    let mut carry: u128 = 0;
    for (i, &w) in weight.iter().enumerate() {
        let prod = w as u128 * scale as u128 + acc[i] as u128 + carry;
        acc[i] = prod as u64;
        carry = prod >> 64;
    }
    let mut i = weight.len();
    while carry != 0 {
        if i == acc.len() {
            acc.push(0);
        }
        let sum = acc[i] as u128 + carry;
        acc[i] = sum as u64;
        carry = sum >> 64;
        i += 1;
    }
}

fn scale_in_place(acc: &mut Vec<u64>, factor: u64) {
    let mut carry: u128 = 0;
    for limb in acc.iter_mut() {
        let prod = *limb as u128 * factor as u128 + carry;
        *limb = prod as u64;
        carry = prod >> 64;
    }
    while carry != 0 {
        acc.push(carry as u64);
        carry >>= 64;
    }
}

fn biguint_to_limbs(x: &BigUint) -> Vec<u64> {
    x.to_u64_digits()
}

fn limbs_to_biguint(limbs: &[u64]) -> BigUint {
    BigUint::new(
        limbs
            .iter()
            .flat_map(|&l| [l as u32, (l >> 32) as u32])
            .collect(),
    )
}

pub fn gcd_u64(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(p: i64, q: i64) -> BigRational {
        BigRational::new(BigInt::from(p), BigInt::from(q))
    }

    #[test]
    fn parse_forms() {
        assert_eq!(parse_rational("3").unwrap(), rat(3, 1));
        assert_eq!(parse_rational("-7/2").unwrap(), rat(-7, 2));
        assert_eq!(parse_rational("0.25").unwrap(), rat(1, 4));
        assert_eq!(parse_rational("-1.5").unwrap(), rat(-3, 2));
        assert!(parse_rational("x").is_err());
        assert!(parse_rational("1/0").is_err());
    }

    #[test]
    fn display_round_trip() {
        let s = Scalar::ratio(-7, 3, Mode::Exact);
        assert_eq!(s.to_string(), "-7/3");
        assert_eq!(Scalar::parse("-7/3", Mode::Exact).unwrap(), s);
    }

    #[test]
    fn exact_sum_matches_direct() {
        let mut acc = ExactSum::new();
        let mut direct = BigRational::zero();
        // Alternating harmonic prefix with a repeated-denominator pattern.
        for n in 1..=200i64 {
            let sign = if n % 2 == 1 { 1 } else { -1 };
            acc.add_small(sign, n as u64);
            direct += rat(sign, n);
        }
        assert_eq!(acc.value(), direct);
    }

    #[test]
    fn exact_sum_handles_big_fallback() {
        let mut acc = ExactSum::new();
        let huge = BigRational::new(BigInt::from(1), BigInt::from(u128::MAX));
        acc.add_rational(&huge);
        acc.add_small(1, 2);
        assert_eq!(acc.value(), &huge + rat(1, 2));
    }

    #[test]
    fn exact_sum_cancellation_is_exact() {
        let mut acc = ExactSum::new();
        for n in 1..=1000u64 {
            acc.add_small(1, n);
            acc.add_small(-1, n);
        }
        assert!(acc.value().is_zero());
    }

    #[test]
    fn kahan_sums_large_counts() {
        let mut acc = KahanSum::default();
        for _ in 0..1_000_000 {
            acc.add(0.1);
        }
        assert!((acc.value() - 100_000.0).abs() < 1e-7);
    }
}
