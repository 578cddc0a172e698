//! Affine coordinate mappings between network layers.
//!
//! A map (α, β) relates indices of two layers as i₁ = α·i₂ + β. With the
//! continuous coordinate u = i + 1/2 (cell centers at half-integers, a
//! W-cell axis covering [0, W]) the same map reads
//! u₁ = α·u₂ + β + (1−α)/2, and the two forms commute.
//!
//! Every tracker coordinate conversion — feature sampling, pyramid levels,
//! correlation offsets — goes through this module so the half-cell
//! bookkeeping lives in exactly one place.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_rational::Ratio;

/// Scalar for coordinate algebra: f64 in the hot path, `Ratio<i64>` in the
/// conformance tests.
pub trait MapScalar:
    Copy
    + Clone
    + PartialEq
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_int(v: i64) -> Self;
    fn ratio(num: i64, den: i64) -> Self;

    fn zero() -> Self {
        Self::from_int(0)
    }
    fn one() -> Self {
        Self::from_int(1)
    }
    fn half() -> Self {
        Self::ratio(1, 2)
    }
}

impl MapScalar for f64 {
    fn from_int(v: i64) -> Self {
        v as f64
    }
    fn ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
}

impl MapScalar for Ratio<i64> {
    fn from_int(v: i64) -> Self {
        Ratio::from_integer(v)
    }
    fn ratio(num: i64, den: i64) -> Self {
        Ratio::new(num, den)
    }
}

/// Sampling-layer coordinate convention for the query grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SampleConvention {
    /// Queries in [-1, 1] across the image.
    Normalized,
    /// Queries in input pixel units.
    Pixel,
}

/// Affine index mapping i₁ = α·i₂ + β between two layers; α > 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordMap<T: MapScalar> {
    pub alpha: T,
    pub beta: T,
}

impl<T: MapScalar> CoordMap<T> {
    pub fn new(alpha: T, beta: T) -> Self {
        CoordMap { alpha, beta }
    }

    pub fn identity() -> Self {
        CoordMap { alpha: T::one(), beta: T::zero() }
    }

    /// i₁ = α·i₂ + β.
    pub fn apply_index(&self, i2: T) -> T {
        self.alpha * i2 + self.beta
    }

    /// u₁ = α·u₂ + β + (1−α)/2.
    pub fn apply_continuous(&self, u2: T) -> T {
        self.alpha * u2 + self.beta + (T::one() - self.alpha) * T::half()
    }

    /// Composition along a chain: `outer` maps layer k−1 to the input side,
    /// `inner` maps layer k to layer k−1. Matches the boxed recurrence
    /// αₙ = αₙ₋₁·αₙ₋₁,ₙ and βₙ = βₙ₋₁ + αₙ₋₁·βₙ₋₁,ₙ.
    pub fn compose(outer: &Self, inner: &Self) -> Self {
        CoordMap {
            alpha: outer.alpha * inner.alpha,
            beta: outer.beta + outer.alpha * inner.beta,
        }
    }

    /// Inverse map (1/α, −β/α); the diagram inverts cleanly because the
    /// index form is plainly affine.
    pub fn invert(&self) -> Self {
        let inv = T::one() / self.alpha;
        CoordMap { alpha: inv, beta: -(self.beta * inv) }
    }

    /// Folds a chain ordered outermost (closest to the input) first.
    pub fn fold(chain: &[Self]) -> Self {
        let mut acc = Self::identity();
        for m in chain {
            acc = Self::compose(&acc, m);
        }
        acc
    }

    /// Map of a filter-like layer (conv / pool) with size F, stride S,
    /// padding P: α = S, β = (F−1)/2 − P.
    pub fn filter_map(f: usize, s: usize, p: usize) -> Self {
        assert!(f >= 1, "filter size must be >= 1");
        CoordMap {
            alpha: T::from_int(s as i64),
            beta: T::ratio(f as i64 - 1, 2) - T::from_int(p as i64),
        }
    }

    /// Map of an interpolation layer resizing W₂ cells to cover the same
    /// span as W₁ input cells.
    pub fn interp_map(w1: usize, w2: usize, align_corners: bool) -> Result<Self, CoordMapError> {
        if align_corners {
            if w1 < 2 || w2 < 2 {
                return Err(CoordMapError::DegenerateExtent { w1, w2 });
            }
            Ok(CoordMap {
                alpha: T::ratio(w1 as i64 - 1, w2 as i64 - 1),
                beta: T::zero(),
            })
        } else {
            if w2 == 0 {
                return Err(CoordMapError::DegenerateExtent { w1, w2 });
            }
            Ok(CoordMap {
                alpha: T::ratio(w1 as i64, w2 as i64),
                beta: T::ratio(w1 as i64 - w2 as i64, 2 * w2 as i64),
            })
        }
    }

    /// Map of a bilinear sampling layer reading a W₁-cell axis.
    ///
    /// Conventions, with q the query value:
    /// - normalized, not aligned: extremes ±1 hit the image edges; the map
    ///   applies as `apply_continuous(q)`. β here is the value the
    ///   derivation β = W₁/2 − (1−α)/2 actually evaluates to.
    /// - normalized, aligned: extremes ±1 hit the edge-cell centers; the
    ///   map applies as `apply_index(q)`.
    /// - pixel, not aligned: identity (u₁ = q).
    /// - pixel, aligned: q counts cell centers from zero, so u₁ = q + 1/2.
    pub fn sample_map(w1: usize, align_corners: bool, convention: SampleConvention) -> Self {
        match (convention, align_corners) {
            (SampleConvention::Normalized, false) => CoordMap {
                alpha: T::ratio(w1 as i64, 2),
                beta: T::ratio(3 * w1 as i64, 4) - T::half(),
            },
            (SampleConvention::Normalized, true) => CoordMap {
                alpha: T::ratio(w1 as i64 - 1, 2),
                beta: T::ratio(w1 as i64 - 1, 2),
            },
            (SampleConvention::Pixel, false) => Self::identity(),
            (SampleConvention::Pixel, true) => CoordMap { alpha: T::one(), beta: T::half() },
        }
    }
}

/// Refers layer-n coordinates back to the input image over a chain ordered
/// outermost first: returns (i₀, u₀) for index i_n with u_n = i_n + 1/2.
pub fn to_input_coords<T: MapScalar>(chain: &[CoordMap<T>], i_n: T) -> (T, T) {
    let folded = CoordMap::fold(chain);
    let i0 = folded.apply_index(i_n);
    let u0 = folded.apply_continuous(i_n + T::half());
    (i0, u0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoordMapError {
    DegenerateExtent { w1: usize, w2: usize },
}

impl fmt::Display for CoordMapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoordMapError::DegenerateExtent { w1, w2 } => {
                write!(f, "degenerate interpolation extents W1={w1}, W2={w2}")
            }
        }
    }
}

impl std::error::Error for CoordMapError {}

pub mod conformance {
    //! Exact-arithmetic verification of the mapping algebra, shared by the
    //! test suite and the `coordcheck` CLI subcommand.

    use super::*;
    use rand::Rng;

    #[derive(Clone, Debug, Default)]
    pub struct ConformanceReport {
        pub cases: usize,
        pub failures: Vec<String>,
    }

    impl ConformanceReport {
        pub fn ok(&self) -> bool {
            self.failures.is_empty()
        }

        fn check(&mut self, cond: bool, label: impl FnOnce() -> String) {
            self.cases += 1;
            if !cond {
                self.failures.push(label());
            }
        }
    }

    type Q = Ratio<i64>;

    fn rand_map(rng: &mut impl Rng) -> CoordMap<Q> {
        CoordMap::new(
            Q::new(rng.gen_range(1..20), rng.gen_range(1..10)),
            Q::new(rng.gen_range(-40..40), rng.gen_range(1..8)),
        )
    }

    /// Runs `n` random parameterizations of every formula with rational
    /// arithmetic.
    pub fn run(n: usize, seed: u64) -> ConformanceReport {
        let mut rng = crate::diffcore::init::seeded_rng(seed);
        let mut rep = ConformanceReport::default();

        for _ in 0..n {
            // filter-like layers: α = S, β = (F−1)/2 − P
            let f = rng.gen_range(1..12u32) as usize;
            let s = rng.gen_range(1..6u32) as usize;
            let p = rng.gen_range(0..7u32) as usize;
            let m = CoordMap::<Q>::filter_map(f, s, p);
            rep.check(
                m.alpha == Q::from_integer(s as i64)
                    && m.beta == Q::new(f as i64 - 1, 2) - Q::from_integer(p as i64),
                || format!("filter_map({f},{s},{p}) gave {m:?}"),
            );

            // composition recurrence against pointwise application
            let a = rand_map(&mut rng);
            let b = rand_map(&mut rng);
            let c = rand_map(&mut rng);
            let ab = CoordMap::compose(&a, &b);
            let x = Q::new(rng.gen_range(-50..50), rng.gen_range(1..5));
            rep.check(
                ab.apply_index(x) == a.apply_index(b.apply_index(x)),
                || format!("compose index mismatch for {a:?}∘{b:?} at {x}"),
            );
            rep.check(
                ab.apply_continuous(x) == a.apply_continuous(b.apply_continuous(x)),
                || format!("compose continuous mismatch for {a:?}∘{b:?} at {x}"),
            );
            rep.check(
                ab.alpha == a.alpha * b.alpha && ab.beta == a.beta + a.alpha * b.beta,
                || format!("boxed recurrence mismatch for {a:?}∘{b:?}"),
            );

            // associativity, exactly
            let left = CoordMap::compose(&a, &CoordMap::compose(&b, &c));
            let right = CoordMap::compose(&CoordMap::compose(&a, &b), &c);
            rep.check(left == right, || format!("associativity failed for {a:?},{b:?},{c:?}"));

            // the index and continuous diagrams commute: u(i₁) both ways
            let i2 = Q::from_integer(rng.gen_range(-30..30));
            let via_index = a.apply_index(i2) + Q::new(1, 2);
            let via_cont = a.apply_continuous(i2 + Q::new(1, 2));
            rep.check(via_index == via_cont, || format!("diagram mismatch for {a:?} at {i2}"));

            // inversion round-trips
            let inv = a.invert();
            rep.check(
                inv.apply_index(a.apply_index(x)) == x,
                || format!("inverse index round trip failed for {a:?}"),
            );
            rep.check(
                inv.apply_continuous(a.apply_continuous(x)) == x,
                || format!("inverse continuous round trip failed for {a:?}"),
            );

            // interpolation, both align modes
            let w1 = rng.gen_range(2..40u32) as usize;
            let w2 = rng.gen_range(2..40u32) as usize;
            let mi = CoordMap::<Q>::interp_map(w1, w2, true).unwrap();
            rep.check(
                mi.apply_index(Q::zero()) == Q::zero()
                    && mi.apply_index(Q::from_integer(w2 as i64 - 1)) == Q::from_integer(w1 as i64 - 1),
                || format!("aligned interp corners failed for W1={w1}, W2={w2}"),
            );
            let mn = CoordMap::<Q>::interp_map(w1, w2, false).unwrap();
            rep.check(
                mn.apply_continuous(Q::zero()) == Q::zero()
                    && mn.apply_continuous(Q::from_integer(w2 as i64)) == Q::from_integer(w1 as i64),
                || format!("unaligned interp edges failed for W1={w1}, W2={w2}"),
            );

            // sampling conventions
            let w = rng.gen_range(2..64u32) as usize;
            let sn = CoordMap::<Q>::sample_map(w, false, SampleConvention::Normalized);
            rep.check(
                sn.apply_continuous(Q::from_integer(-1)) == Q::zero()
                    && sn.apply_continuous(Q::one()) == Q::from_integer(w as i64),
                || format!("normalized/unaligned sampling edges failed for W={w}: {sn:?}"),
            );
            let sa = CoordMap::<Q>::sample_map(w, true, SampleConvention::Normalized);
            rep.check(
                sa.apply_index(Q::from_integer(-1)) == Q::zero()
                    && sa.apply_index(Q::one()) == Q::from_integer(w as i64 - 1),
                || format!("normalized/aligned sampling centers failed for W={w}: {sa:?}"),
            );
            let pn = CoordMap::<Q>::sample_map(w, false, SampleConvention::Pixel);
            rep.check(
                pn == CoordMap::identity(),
                || format!("pixel/unaligned sampling must be identity, got {pn:?}"),
            );
            let pa = CoordMap::<Q>::sample_map(w, true, SampleConvention::Pixel);
            rep.check(
                pa.apply_index(x) == x + Q::new(1, 2),
                || format!("pixel/aligned sampling must shift by 1/2, got {pa:?}"),
            );

            // chains of β-canceling filters fold to β = 0, α = ∏S
            let depth = rng.gen_range(1..6u32);
            let mut chain = Vec::new();
            let mut s_prod = 1i64;
            for _ in 0..depth {
                let f = 2 * rng.gen_range(0..4u32) as usize + 1;
                let s = rng.gen_range(1..4u32) as usize;
                s_prod *= s as i64;
                chain.push(CoordMap::<Q>::filter_map(f, s, (f - 1) / 2));
            }
            let folded = CoordMap::fold(&chain);
            rep.check(
                folded.alpha == Q::from_integer(s_prod) && folded.beta == Q::zero(),
                || format!("β-canceling chain folded to {folded:?}, expected α={s_prod}, β=0"),
            );
        }
        rep
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Q = Ratio<i64>;

    #[test]
    fn compose_identity_is_neutral() {
        let m = CoordMap::<f64>::new(2.0, 0.75);
        let id = CoordMap::identity();
        assert_eq!(CoordMap::compose(&id, &m), m);
        assert_eq!(CoordMap::compose(&m, &id), m);
    }

    #[test]
    fn compose_hand_example() {
        // (α=2,β=1) ∘ (α=3,β=2) = (α=6, β=1+2·2=5)
        let outer = CoordMap::<Q>::new(Q::from_integer(2), Q::from_integer(1));
        let inner = CoordMap::<Q>::new(Q::from_integer(3), Q::from_integer(2));
        let c = CoordMap::compose(&outer, &inner);
        assert_eq!(c.alpha, Q::from_integer(6));
        assert_eq!(c.beta, Q::from_integer(5));
    }

    #[test]
    fn two_stride_two_filters_fold_to_four() {
        let m = CoordMap::<Q>::filter_map(7, 2, 3);
        assert_eq!(m.alpha, Q::from_integer(2));
        assert_eq!(m.beta, Q::from_integer(0));
        let folded = CoordMap::fold(&[m, m]);
        assert_eq!(folded.alpha, Q::from_integer(4));
        assert_eq!(folded.beta, Q::from_integer(0));
    }

    #[test]
    fn filter_map_examples() {
        let m = CoordMap::<f64>::filter_map(3, 1, 1);
        assert_eq!(m, CoordMap::identity());
        let m = CoordMap::<f64>::filter_map(1, 1, 0);
        assert_eq!(m, CoordMap::identity());
        // 2x2 average pooling carries a +1/2 offset
        let m = CoordMap::<Q>::filter_map(2, 2, 0);
        assert_eq!(m.alpha, Q::from_integer(2));
        assert_eq!(m.beta, Q::new(1, 2));
    }

    #[test]
    fn interp_examples() {
        let m = CoordMap::<f64>::interp_map(5, 9, true).unwrap();
        assert_eq!(m.alpha, 0.5);
        assert_eq!(m.beta, 0.0);
        let m = CoordMap::<f64>::interp_map(6, 6, true).unwrap();
        assert_eq!(m, CoordMap::identity());
        let m = CoordMap::<f64>::interp_map(6, 6, false).unwrap();
        assert_eq!(m, CoordMap::identity());
        // W1=8, W2=4, not aligned: α=2, β=(8−4)/8=0.5
        let m = CoordMap::<f64>::interp_map(8, 4, false).unwrap();
        assert_eq!(m.alpha, 2.0);
        assert_eq!(m.beta, 0.5);
        assert!(CoordMap::<f64>::interp_map(5, 1, true).is_err());
    }

    #[test]
    fn sampling_examples_from_alt_conventions() {
        // pixel, not aligned: u1(3.25) = 3.25
        let m = CoordMap::<f64>::sample_map(16, false, SampleConvention::Pixel);
        assert_eq!(m.apply_continuous(3.25), 3.25);
        // pixel, aligned: i2=0 -> i1=0.5
        let m = CoordMap::<f64>::sample_map(16, true, SampleConvention::Pixel);
        assert_eq!(m.apply_index(0.0), 0.5);
        // normalized, aligned, W1=5: corners hit edge-pixel centers
        let m = CoordMap::<f64>::sample_map(5, true, SampleConvention::Normalized);
        assert_eq!(m.apply_index(-1.0), 0.0);
        assert_eq!(m.apply_index(1.0), 4.0);
    }

    #[test]
    fn to_input_coords_examples() {
        let id = CoordMap::<f64>::identity();
        let (i0, _) = to_input_coords(&[id, id, id], 7.0);
        assert_eq!(i0, 7.0);

        // encoder-like fold to (α=4, β=0): feature index 5 -> image index 20
        let stem = CoordMap::<f64>::filter_map(7, 2, 3);
        let down = CoordMap::<f64>::filter_map(3, 2, 1);
        let (i0, u0) = to_input_coords(&[stem, down], 5.0);
        assert_eq!(i0, 20.0);
        assert_eq!(u0, 20.5);

        // single filter map (α=2, β=0) at u_n = 1.5: u0 = 2·1.5 + (1−2)/2 = 2.5
        let m = CoordMap::<f64>::new(2.0, 0.0);
        let (i0, u0) = to_input_coords(&[m], 1.0);
        assert_eq!(i0, 2.0);
        assert_eq!(u0, 2.5);
    }

    #[test]
    fn conformance_suite_passes() {
        let rep = conformance::run(1000, 0xC0F_FEE);
        assert!(rep.ok(), "failures: {:?}", &rep.failures[..rep.failures.len().min(3)]);
        assert!(rep.cases >= 1000);
    }
}
