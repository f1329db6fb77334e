//! Bit-level float decomposition and the exponent-first statistical comparator
//! used to decide whether two hidden-state traces come from the same
//! computation.
//!
//! Every scalar pair is classified by whether the biased exponent fields agree.
//! Matched pairs are scored against `e_w`, mismatched pairs against `e_m`, and
//! the signed mean of all [`mantissa_diff`] values must stay inside a band.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commitments::HiddenState;

const SIGNIFICAND_BITS: u32 = 23;
const SIGNIFICAND_MASK: u32 = (1 << SIGNIFICAND_BITS) - 1;
const EXPONENT_MASK: u32 = 0xff;
const EXPONENT_BIAS: i32 = 127;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BitStatsError {
    #[error("non-finite scalar {value} at index {index}")]
    NonFiniteScalar { index: usize, value: f32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty trace")]
    EmptyTrace,
}

/// Sign / biased exponent / significand split of one binary32 value.
///
/// For normal values `significand` is `1.f` in `[1, 2)`. Subnormals (and zero)
/// keep the raw exponent field `0` and carry `0.f` in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarBits {
    pub sign: u8,
    pub exponent: u32,
    pub significand: f64,
}

impl ScalarBits {
    /// The exponent that actually scales the significand; subnormals share
    /// the minimum normal exponent.
    pub fn effective_exponent(&self) -> i32 {
        self.exponent.max(1) as i32
    }

    fn signed_significand(&self) -> f64 {
        if self.sign == 1 {
            -self.significand
        } else {
            self.significand
        }
    }

    /// Real value represented, `(-1)^s · significand · 2^(e - 127)`.
    pub fn value(&self) -> f64 {
        self.signed_significand() * 2f64.powi(self.effective_exponent() - EXPONENT_BIAS)
    }
}

pub fn decompose(x: f32) -> Result<ScalarBits, BitStatsError> {
    decompose_at(x, 0)
}

fn decompose_at(x: f32, index: usize) -> Result<ScalarBits, BitStatsError> {
    if !x.is_finite() {
        return Err(BitStatsError::NonFiniteScalar { index, value: x });
    }
    let bits = x.to_bits();
    let sign = (bits >> 31) as u8;
    let exponent = (bits >> SIGNIFICAND_BITS) & EXPONENT_MASK;
    let fraction = (bits & SIGNIFICAND_MASK) as f64 / (1u32 << SIGNIFICAND_BITS) as f64;
    let significand = if exponent == 0 { fraction } else { 1.0 + fraction };
    Ok(ScalarBits {
        sign,
        exponent,
        significand,
    })
}

/// Inverse of [`decompose`]; bit-exact for every finite input.
pub fn recompose(parts: &ScalarBits) -> f32 {
    let scale = (1u32 << SIGNIFICAND_BITS) as f64;
    let fraction = if parts.exponent == 0 {
        parts.significand * scale
    } else {
        (parts.significand - 1.0) * scale
    };
    let bits = ((parts.sign as u32) << 31)
        | ((parts.exponent & EXPONENT_MASK) << SIGNIFICAND_BITS)
        | (fraction as u32 & SIGNIFICAND_MASK);
    f32::from_bits(bits)
}

/// Signed difference of the two values measured in units of the smaller
/// exponent's binade: `s_a·sig_a·2^(e_a−e_ref) − s_b·sig_b·2^(e_b−e_ref)`.
///
/// With equal exponents this is just the signed significand difference.
pub fn mantissa_diff(a: &ScalarBits, b: &ScalarBits) -> f64 {
    let ea = a.effective_exponent();
    let eb = b.effective_exponent();
    let e_ref = ea.min(eb);
    a.signed_significand() * 2f64.powi(ea - e_ref) - b.signed_significand() * 2f64.powi(eb - e_ref)
}

/// Thresholds for [`accept`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Mantissa tolerance for exponent-matched pairs.
    pub e_w: f64,
    /// Mantissa tolerance for exponent-mismatched pairs.
    pub e_m: f64,
    pub p_e_max: f64,
    pub p_m_min: f64,
    pub p_w_min: f64,
    pub e_mean_lo: f64,
    pub e_mean_hi: f64,
}

impl Tolerances {
    /// Full-trace comparison performed by verifiers.
    pub const OFF_CHAIN: Tolerances = Tolerances {
        e_w: 0.2,
        e_m: 5.0,
        p_e_max: 0.05,
        p_m_min: 0.75,
        p_w_min: 0.80,
        e_mean_lo: -0.01,
        e_mean_hi: 0.01,
    };

    /// Sampled final-token comparison executed by the contract.
    pub const ON_CHAIN: Tolerances = Tolerances {
        e_w: 0.2,
        e_m: 5.0,
        p_e_max: 0.08,
        p_m_min: 0.70,
        p_w_min: 0.75,
        e_mean_lo: -0.02,
        e_mean_hi: 0.02,
    };

    pub fn is_valid(&self) -> bool {
        let frac = |p: f64| (0.0..=1.0).contains(&p);
        self.e_w > 0.0
            && self.e_m > 0.0
            && frac(self.p_e_max)
            && frac(self.p_m_min)
            && frac(self.p_w_min)
            && self.e_mean_lo < self.e_mean_hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonStats {
    /// Fraction of pairs whose exponent fields differ.
    pub p_e: f64,
    /// Among exponent-mismatched pairs, fraction with `|Δ| > e_m`.
    pub p_m: f64,
    /// Among exponent-matched pairs, fraction with `|Δ| ≤ e_w`.
    pub p_w: f64,
    /// Signed mean of `mantissa_diff(reference, candidate)` over all pairs.
    pub e_mean: f64,
    pub n_pairs: u64,
    pub n_exact: u64,
    pub n_mismatched: u64,
    pub n_mismatched_over: u64,
    pub n_matched_within: u64,
}

impl ComparisonStats {
    /// Builds statistics from subgroup counts, e.g. a published count table.
    /// Exact pairs are a subset of `matched_within`.
    pub fn from_counts(
        exact: u64,
        matched_over: u64,
        matched_within: u64,
        mismatched_over: u64,
        mismatched_within: u64,
        e_mean: f64,
    ) -> Self {
        let matched = matched_over + matched_within;
        let mismatched = mismatched_over + mismatched_within;
        let n_pairs = matched + mismatched;
        ComparisonStats {
            p_e: ratio_or_zero(mismatched, n_pairs),
            p_m: ratio_or_one(mismatched_over, mismatched),
            p_w: ratio_or_one(matched_within, matched),
            e_mean,
            n_pairs,
            n_exact: exact,
            n_mismatched: mismatched,
            n_mismatched_over: mismatched_over,
            n_matched_within: matched_within,
        }
    }

    pub fn n_matched(&self) -> u64 {
        self.n_pairs - self.n_mismatched
    }
}

fn ratio_or_zero(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

// An empty subgroup satisfies its predicate vacuously.
fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Elementwise comparison of two equally long scalar sequences.
pub fn compare_values(
    reference: &[f32],
    candidate: &[f32],
    tol: &Tolerances,
) -> Result<ComparisonStats, BitStatsError> {
    if reference.len() != candidate.len() {
        return Err(BitStatsError::ShapeMismatch(format!(
            "{} reference scalars vs {} candidate scalars",
            reference.len(),
            candidate.len()
        )));
    }
    if reference.is_empty() {
        return Err(BitStatsError::EmptyTrace);
    }
    let mut acc = Accumulator::default();
    for (i, (&r, &c)) in reference.iter().zip(candidate).enumerate() {
        acc.push(decompose_at(r, i)?, decompose_at(c, i)?, r.to_bits() == c.to_bits(), tol);
    }
    Ok(acc.finish())
}

/// Compares two traces token-state by token-state. Both must have the same
/// number of states and identical per-state shapes.
pub fn compare_traces(
    reference: &[HiddenState],
    candidate: &[HiddenState],
    tol: &Tolerances,
) -> Result<ComparisonStats, BitStatsError> {
    if reference.is_empty() || candidate.is_empty() {
        return Err(BitStatsError::EmptyTrace);
    }
    if reference.len() != candidate.len() {
        return Err(BitStatsError::ShapeMismatch(format!(
            "{} reference states vs {} candidate states",
            reference.len(),
            candidate.len()
        )));
    }
    let mut acc = Accumulator::default();
    let mut offset = 0;
    for (k, (r, c)) in reference.iter().zip(candidate).enumerate() {
        if r.shape() != c.shape() {
            return Err(BitStatsError::ShapeMismatch(format!(
                "state {k}: {:?} vs {:?}",
                r.shape(),
                c.shape()
            )));
        }
        for (i, (&a, &b)) in r.values().iter().zip(c.values()).enumerate() {
            acc.push(
                decompose_at(a, offset + i)?,
                decompose_at(b, offset + i)?,
                a.to_bits() == b.to_bits(),
                tol,
            );
        }
        offset += r.values().len();
    }
    if acc.n_pairs == 0 {
        return Err(BitStatsError::EmptyTrace);
    }
    Ok(acc.finish())
}

#[derive(Default)]
struct Accumulator {
    n_pairs: u64,
    n_exact: u64,
    n_mismatched: u64,
    n_mismatched_over: u64,
    n_matched_within: u64,
    diff_sum: f64,
}

impl Accumulator {
    fn push(&mut self, a: ScalarBits, b: ScalarBits, exact: bool, tol: &Tolerances) {
        let d = mantissa_diff(&a, &b);
        self.n_pairs += 1;
        self.diff_sum += d;
        if exact {
            self.n_exact += 1;
        }
        if a.exponent != b.exponent {
            self.n_mismatched += 1;
            if d.abs() > tol.e_m {
                self.n_mismatched_over += 1;
            }
        } else if d.abs() <= tol.e_w {
            self.n_matched_within += 1;
        }
    }

    fn finish(self) -> ComparisonStats {
        let matched = self.n_pairs - self.n_mismatched;
        ComparisonStats {
            p_e: ratio_or_zero(self.n_mismatched, self.n_pairs),
            p_m: ratio_or_one(self.n_mismatched_over, self.n_mismatched),
            p_w: ratio_or_one(self.n_matched_within, matched),
            e_mean: self.diff_sum / self.n_pairs as f64,
            n_pairs: self.n_pairs,
            n_exact: self.n_exact,
            n_mismatched: self.n_mismatched,
            n_mismatched_over: self.n_mismatched_over,
            n_matched_within: self.n_matched_within,
        }
    }
}

/// All four predicates must hold.
pub fn accept(stats: &ComparisonStats, tol: &Tolerances) -> bool {
    stats.p_e < tol.p_e_max
        && stats.p_m > tol.p_m_min
        && stats.p_w > tol.p_w_min
        && stats.e_mean >= tol.e_mean_lo
        && stats.e_mean <= tol.e_mean_hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(x: f32) -> ScalarBits {
        decompose(x).unwrap()
    }

    #[test]
    fn decompose_examples() {
        assert_eq!(
            bits(1.0),
            ScalarBits {
                sign: 0,
                exponent: 127,
                significand: 1.0
            }
        );
        assert_eq!(
            bits(-2.0),
            ScalarBits {
                sign: 1,
                exponent: 128,
                significand: 1.0
            }
        );
        // 0.15625 = 1.25 · 2^-3; reference bit pattern built by hand.
        let reference = f32::from_bits((124 << 23) | (1 << 21));
        assert_eq!(reference, 0.15625);
        assert_eq!(
            bits(0.15625),
            ScalarBits {
                sign: 0,
                exponent: 124,
                significand: 1.25
            }
        );
    }

    #[test]
    fn non_finite_rejected() {
        for x in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
            assert!(matches!(decompose(x), Err(BitStatsError::NonFiniteScalar { .. })));
        }
        assert!(compare_values(&[1.0, f32::NAN], &[1.0, 1.0], &Tolerances::OFF_CHAIN).is_err());
    }

    #[test]
    fn subnormals_keep_minimum_exponent() {
        let tiny = f32::from_bits(1);
        let b = bits(tiny);
        assert_eq!(b.exponent, 0);
        assert!(b.significand < 1.0 && b.significand > 0.0);
        assert_eq!(recompose(&b).to_bits(), 1);
        assert_eq!(b.value(), tiny as f64);
    }

    #[test]
    fn round_trip_on_boundaries() {
        let mut xs = vec![0.0f32, -0.0, f32::MIN_POSITIVE, f32::MAX, f32::MIN, f32::EPSILON];
        for e in 0..=254u32 {
            for frac in [0u32, 1, SIGNIFICAND_MASK] {
                xs.push(f32::from_bits((e << 23) | frac));
                xs.push(f32::from_bits((1 << 31) | (e << 23) | frac));
            }
        }
        for x in xs {
            assert_eq!(recompose(&bits(x)).to_bits(), x.to_bits(), "{x:e}");
        }
    }

    #[test]
    fn mantissa_diff_examples() {
        let a = bits(1.5);
        assert_eq!(mantissa_diff(&a, &a), 0.0);
        let d = mantissa_diff(&bits(1.5), &bits(1.3));
        assert!((d - 0.2).abs() < 1e-6, "{d}");
        // 6.0 = 1.5·2^2 against 1.5·2^0.
        assert_eq!(mantissa_diff(&bits(6.0), &bits(1.5)), 4.5);
        assert_eq!(mantissa_diff(&bits(1.5), &bits(6.0)), -4.5);
    }

    #[test]
    fn identical_traces_are_perfect() {
        let v: Vec<f32> = (1..100).map(|i| i as f32 * 0.37 - 11.0).collect();
        let s = compare_values(&v, &v, &Tolerances::OFF_CHAIN).unwrap();
        assert_eq!(s.p_e, 0.0);
        assert_eq!(s.p_m, 1.0);
        assert_eq!(s.p_w, 1.0);
        assert_eq!(s.e_mean, 0.0);
        assert_eq!(s.n_exact, s.n_pairs);
        assert!(accept(&s, &Tolerances::OFF_CHAIN));
    }

    #[test]
    fn last_bit_flip_stays_within_tolerance() {
        let v: Vec<f32> = (1..500).map(|i| (i as f32).sin() * 3.0 + 0.01).collect();
        let flipped: Vec<f32> = v.iter().map(|x| f32::from_bits(x.to_bits() ^ 1)).collect();
        let s = compare_values(&v, &flipped, &Tolerances::OFF_CHAIN).unwrap();
        // Brute-force recount.
        let mismatched = v
            .iter()
            .zip(&flipped)
            .filter(|(a, b)| bits(**a).exponent != bits(**b).exponent)
            .count();
        assert_eq!(mismatched, 0);
        assert_eq!(s.p_e, 0.0);
        assert_eq!(s.p_w, 1.0);
        assert_eq!(s.n_exact, 0);
    }

    #[test]
    fn table_one_count_fixture() {
        let s = ComparisonStats::from_counts(311, 669, 2801, 89, 25, -0.003);
        assert_eq!(s.n_pairs, 3584);
        assert!((s.p_e - 114.0 / 3584.0).abs() < 1e-15);
        assert!((s.p_e - 0.0318).abs() < 1e-4);
        assert!(accept(&s, &Tolerances::OFF_CHAIN));
    }

    #[test]
    fn preset_gaps() {
        let mk = |p_e, e_mean| ComparisonStats {
            p_e,
            p_m: 0.9,
            p_w: 0.9,
            e_mean,
            n_pairs: 100,
            n_exact: 0,
            n_mismatched: 0,
            n_mismatched_over: 0,
            n_matched_within: 0,
        };
        let s = mk(0.06, 0.0);
        assert!(!accept(&s, &Tolerances::OFF_CHAIN));
        assert!(accept(&s, &Tolerances::ON_CHAIN));
        let s = mk(0.01, 0.015);
        assert!(accept(&s, &Tolerances::ON_CHAIN));
        assert!(!accept(&s, &Tolerances::OFF_CHAIN));
    }

    #[test]
    fn shape_and_empty_errors() {
        let t = Tolerances::OFF_CHAIN;
        assert!(matches!(compare_values(&[1.0], &[1.0, 2.0], &t), Err(BitStatsError::ShapeMismatch(_))));
        assert_eq!(compare_values(&[], &[], &t), Err(BitStatsError::EmptyTrace));
    }

    #[test]
    fn presets_are_valid() {
        assert!(Tolerances::OFF_CHAIN.is_valid());
        assert!(Tolerances::ON_CHAIN.is_valid());
    }

    fn finite_f32() -> impl Strategy<Value = f32> {
        any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |x| x.is_finite())
    }

    proptest! {
        #[test]
        fn round_trip_any_finite(x in finite_f32()) {
            prop_assert_eq!(recompose(&bits(x)).to_bits(), x.to_bits());
            let b = bits(x);
            if b.exponent != 0 {
                prop_assert!((1.0..2.0).contains(&b.significand));
            }
        }

        #[test]
        fn swap_symmetry(pairs in prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3), 1..64)) {
            let (a, b): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            let t = Tolerances::OFF_CHAIN;
            let ab = compare_values(&a, &b, &t).unwrap();
            let ba = compare_values(&b, &a, &t).unwrap();
            prop_assert_eq!(ab.p_e, ba.p_e);
            prop_assert!((ab.e_mean + ba.e_mean).abs() <= 1e-9 * (1.0 + ab.e_mean.abs()));
        }

        #[test]
        fn adding_exact_pair_is_monotone(
            pairs in prop::collection::vec((-10f32..10.0, -10f32..10.0), 1..64),
            extra in -10f32..10.0,
        ) {
            let (mut a, mut b): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            let t = Tolerances::OFF_CHAIN;
            let before = compare_values(&a, &b, &t).unwrap();
            a.push(extra);
            b.push(extra);
            let after = compare_values(&a, &b, &t).unwrap();
            prop_assert!(after.p_e <= before.p_e);
            // The mean can only shrink in magnitude and the matched-pair
            // fraction can only grow, so acceptance is never lost.
            if accept(&before, &t) {
                prop_assert!(accept(&after, &t));
            }
        }
    }
}
