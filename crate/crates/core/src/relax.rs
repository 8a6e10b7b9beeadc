//! Closed-form linear relaxations.
//!
//! Unary functions get a lower and an upper line valid on the source interval
//! `[l, u]`. Products `x·y` get a lower and an upper plane valid on the box
//! `[lx, ux] × [ly, uy]`; quotients are bounded through the reciprocal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tangent point offset keeping the exp lower line positive at `l`.
pub const EXP_TANGENT_OFFSET: f64 = 1e-2;

/// Exp relaxations refuse upper bounds past this value.
pub const EXP_MAX_INPUT: f64 = 700.0;

const TANH_SEARCH_WIDTH: f64 = 1e-8;
const TANH_SEARCH_ITERS: usize = 100;

/// Unary nonlinearities appearing in the verified Transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryKind {
    Relu,
    Tanh,
    Exp,
    Reciprocal,
    Square,
    Sqrt,
}

impl UnaryKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Reciprocal => 1.0 / x,
            UnaryKind::Square => x * x,
            UnaryKind::Sqrt => x.sqrt(),
        }
    }

    /// Linear relaxation on `[l, u]`, with intercepts widened by the
    /// rounding error of evaluating `α·x + β` on the interval.
    pub fn relax(self, l: f64, u: f64) -> Result<UnaryRelaxation> {
        let r = match self {
            UnaryKind::Relu => relax_relu(l, u),
            UnaryKind::Tanh => relax_tanh(l, u),
            UnaryKind::Exp => relax_exp(l, u)?,
            UnaryKind::Reciprocal => relax_reciprocal(l, u)?,
            UnaryKind::Square => relax_square(l, u),
            UnaryKind::Sqrt => relax_sqrt(l, u)?,
        };
        // The square's tangent lower line is kept exact so it stays
        // nonnegative at the ends; its cancellation error is only relative
        // to the function value.
        Ok(r.widened(l.abs().max(u.abs()), self != UnaryKind::Square))
    }

    /// Range the output is known to stay in, used to tighten intervals.
    pub fn output_range(self) -> (f64, f64) {
        match self {
            UnaryKind::Relu | UnaryKind::Exp | UnaryKind::Square | UnaryKind::Sqrt => {
                (0.0, f64::INFINITY)
            }
            UnaryKind::Reciprocal => (0.0, f64::INFINITY),
            UnaryKind::Tanh => (-1.0, 1.0),
        }
    }
}

/// `alpha_l·x + beta_l ≤ σ(x) ≤ alpha_u·x + beta_u` on the source interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnaryRelaxation {
    pub alpha_l: f64,
    pub beta_l: f64,
    pub alpha_u: f64,
    pub beta_u: f64,
}

impl UnaryRelaxation {
    pub const IDENTITY: UnaryRelaxation = UnaryRelaxation {
        alpha_l: 1.0,
        beta_l: 0.0,
        alpha_u: 1.0,
        beta_u: 0.0,
    };

    fn from_lines(lower: Line, upper: Line) -> Self {
        Self {
            alpha_l: lower.slope,
            beta_l: lower.intercept,
            alpha_u: upper.slope,
            beta_u: upper.intercept,
        }
    }

    fn widened(mut self, reach: f64, lower: bool) -> Self {
        let pad = |a: f64, b: f64| 4.0 * f64::EPSILON * (a.abs() * reach + b.abs());
        if lower {
            self.beta_l -= pad(self.alpha_l, self.beta_l);
        }
        self.beta_u += pad(self.alpha_u, self.beta_u);
        self
    }

    pub fn lower(&self, x: f64) -> f64 {
        self.alpha_l * x + self.beta_l
    }

    pub fn upper(&self, x: f64) -> f64 {
        self.alpha_u * x + self.beta_u
    }
}

#[derive(Debug, Clone, Copy)]
struct Line {
    slope: f64,
    intercept: f64,
}

impl Line {
    fn through(x: f64, y: f64, slope: f64) -> Line {
        Line {
            slope,
            intercept: y - slope * x,
        }
    }

    /// Chord through `(l, f(l))`, `(u, f(u))` with a precomputed slope.
    fn chord(l: f64, fl: f64, slope: f64) -> Line {
        Line::through(l, fl, slope)
    }
}

pub fn relax_relu(l: f64, u: f64) -> UnaryRelaxation {
    if l >= 0.0 {
        UnaryRelaxation::IDENTITY
    } else if u <= 0.0 {
        UnaryRelaxation {
            alpha_l: 0.0,
            beta_l: 0.0,
            alpha_u: 0.0,
            beta_u: 0.0,
        }
    } else {
        let slope = u / (u - l);
        UnaryRelaxation {
            alpha_l: if u < -l { 0.0 } else { 1.0 },
            beta_l: 0.0,
            alpha_u: slope,
            beta_u: -slope * l,
        }
    }
}

fn tanh_tangent(d: f64) -> Line {
    let t = d.tanh();
    Line::through(d, t, 1.0 - t * t)
}

fn tanh_chord(l: f64, u: f64) -> Line {
    let (tl, tu) = (l.tanh(), u.tanh());
    Line::chord(l, tl, (tu - tl) / (u - l))
}

/// Lower line of tanh on `[l, u]` with `l < 0 < u`: the tangent at some
/// `d ≤ 0` passing through `(u, tanh u)`, or the chord when no such tangent
/// point lies inside `[l, 0]`.
fn tanh_crossing_lower(l: f64, u: f64) -> Line {
    let tu = u.tanh();
    // gap(d) > 0 when the tangent at d passes above (u, tanh u)
    let gap = |d: f64| {
        let line = tanh_tangent(d);
        line.slope * u + line.intercept - tu
    };
    if gap(l) > 0.0 {
        return tanh_chord(l, u);
    }
    // invariant: gap(lo) ≤ 0 < gap(hi)
    let (mut lo, mut hi) = (l, 0.0);
    for _ in 0..TANH_SEARCH_ITERS {
        if hi - lo < TANH_SEARCH_WIDTH {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    tanh_tangent(lo)
}

pub fn relax_tanh(l: f64, u: f64) -> UnaryRelaxation {
    if l == u {
        let t = tanh_tangent(l);
        return UnaryRelaxation::from_lines(t, t);
    }
    let mid = 0.5 * (l + u);
    if l >= 0.0 {
        UnaryRelaxation::from_lines(tanh_chord(l, u), tanh_tangent(mid))
    } else if u <= 0.0 {
        UnaryRelaxation::from_lines(tanh_tangent(mid), tanh_chord(l, u))
    } else {
        let lower = tanh_crossing_lower(l, u);
        // tanh is odd: an upper line on [l, u] mirrors a lower line on [-u, -l]
        let mirrored = tanh_crossing_lower(-u, -l);
        let upper = Line {
            slope: mirrored.slope,
            intercept: -mirrored.intercept,
        };
        UnaryRelaxation::from_lines(lower, upper)
    }
}

pub fn relax_exp(l: f64, u: f64) -> Result<UnaryRelaxation> {
    if u > EXP_MAX_INPUT {
        return Err(Error::RangeOverflow(u));
    }
    let d = (0.5 * (l + u)).min(l + 1.0 - EXP_TANGENT_OFFSET);
    let ed = d.exp();
    let lower = Line::through(d, ed, ed);
    if l == u {
        return Ok(UnaryRelaxation::from_lines(lower, lower));
    }
    let el = l.exp();
    let w = u - l;
    let upper = Line::chord(l, el, el * w.exp_m1() / w);
    Ok(UnaryRelaxation::from_lines(lower, upper))
}

pub fn relax_reciprocal(l: f64, u: f64) -> Result<UnaryRelaxation> {
    if l <= 0.0 {
        return Err(Error::DomainViolation {
            op: "reciprocal",
            detail: format!("lower bound {l} is not positive"),
        });
    }
    let m = 0.5 * (l + u);
    let lower = Line::through(m, 1.0 / m, -1.0 / (m * m));
    if l == u {
        return Ok(UnaryRelaxation::from_lines(lower, lower));
    }
    let upper = Line::chord(l, 1.0 / l, -1.0 / (l * u));
    Ok(UnaryRelaxation::from_lines(lower, upper))
}

/// Tangent point of the square's lower line; keeps the line nonnegative on
/// `[l, u]`.
pub fn square_tangent_point(l: f64, u: f64) -> f64 {
    let mid = 0.5 * (l + u);
    if u <= 0.0 {
        mid.max(2.0 * u)
    } else if l >= 0.0 {
        mid.min(2.0 * l)
    } else {
        0.0
    }
}

pub fn relax_square(l: f64, u: f64) -> UnaryRelaxation {
    let d = square_tangent_point(l, u);
    let lower = Line {
        slope: 2.0 * d,
        intercept: -d * d,
    };
    let upper = Line {
        slope: l + u,
        intercept: -l * u,
    };
    UnaryRelaxation::from_lines(lower, upper)
}

pub fn relax_sqrt(l: f64, u: f64) -> Result<UnaryRelaxation> {
    if l < 0.0 {
        return Err(Error::DomainViolation {
            op: "sqrt",
            detail: format!("lower bound {l} is negative"),
        });
    }
    if u == 0.0 {
        return Ok(UnaryRelaxation {
            alpha_l: 0.0,
            beta_l: 0.0,
            alpha_u: 0.0,
            beta_u: 0.0,
        });
    }
    let m = 0.5 * (l + u);
    let sm = m.sqrt();
    let upper = Line::through(m, sm, 0.5 / sm);
    if l == u {
        return Ok(UnaryRelaxation::from_lines(upper, upper));
    }
    let (sl, su) = (l.sqrt(), u.sqrt());
    let lower = Line::chord(l, sl, 1.0 / (sl + su));
    Ok(UnaryRelaxation::from_lines(lower, upper))
}

/// Planes `z = alpha·x + beta·y + gamma` bounding a bivariate function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearRelaxation {
    pub alpha_l: f64,
    pub beta_l: f64,
    pub gamma_l: f64,
    pub alpha_u: f64,
    pub beta_u: f64,
    pub gamma_u: f64,
}

impl BilinearRelaxation {
    pub fn lower(&self, x: f64, y: f64) -> f64 {
        self.alpha_l * x + self.beta_l * y + self.gamma_l
    }

    pub fn upper(&self, x: f64, y: f64) -> f64 {
        self.alpha_u * x + self.beta_u * y + self.gamma_u
    }

    /// Both planes multiplied by `s ≥ 0`.
    pub fn scaled(&self, s: f64) -> Self {
        debug_assert!(s >= 0.0);
        Self {
            alpha_l: self.alpha_l * s,
            beta_l: self.beta_l * s,
            gamma_l: self.gamma_l * s,
            alpha_u: self.alpha_u * s,
            beta_u: self.beta_u * s,
            gamma_u: self.gamma_u * s,
        }
    }
}

/// Area-optimal planes for `z = x·y` on `[lx, ux] × [ly, uy]`.
pub fn bound_multiply(lx: f64, ux: f64, ly: f64, uy: f64) -> BilinearRelaxation {
    debug_assert!(lx <= ux && ly <= uy);
    BilinearRelaxation {
        alpha_l: ly,
        beta_l: lx,
        gamma_l: -lx * ly,
        alpha_u: uy,
        beta_u: lx,
        gamma_u: -lx * uy,
    }
}

/// Planes for `z = x / y` (`y > 0`) obtained by bounding `1/y` with a unary
/// relaxation, bounding `x · (1/y)` with [`bound_multiply`], and substituting
/// the reciprocal's lines back in terms of `y`.
pub fn bound_divide(lx: f64, ux: f64, ly: f64, uy: f64) -> Result<BilinearRelaxation> {
    let recip = relax_reciprocal(ly, uy)?;
    let mul = bound_multiply(lx, ux, 1.0 / uy, 1.0 / ly);
    // z ≥ αL·x + βL·ȳ + γL, then ȳ is replaced by whichever of its lines keeps
    // the inequality valid given the sign of βL; likewise for the upper plane.
    let (sl, il) = if mul.beta_l >= 0.0 {
        (recip.alpha_l, recip.beta_l)
    } else {
        (recip.alpha_u, recip.beta_u)
    };
    let (su, iu) = if mul.beta_u >= 0.0 {
        (recip.alpha_u, recip.beta_u)
    } else {
        (recip.alpha_l, recip.beta_l)
    };
    Ok(BilinearRelaxation {
        alpha_l: mul.alpha_l,
        beta_l: mul.beta_l * sl,
        gamma_l: mul.beta_l * il + mul.gamma_l,
        alpha_u: mul.alpha_u,
        beta_u: mul.beta_u * su,
        gamma_u: mul.beta_u * iu + mul.gamma_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(l: f64, u: f64, n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |k| {
            if n == 1 {
                l
            } else {
                l + (u - l) * k as f64 / (n - 1) as f64
            }
        })
    }

    fn unwidened(kind: UnaryKind, l: f64, u: f64) -> UnaryRelaxation {
        match kind {
            UnaryKind::Relu => relax_relu(l, u),
            UnaryKind::Tanh => relax_tanh(l, u),
            UnaryKind::Exp => relax_exp(l, u).unwrap(),
            UnaryKind::Reciprocal => relax_reciprocal(l, u).unwrap(),
            UnaryKind::Square => relax_square(l, u),
            UnaryKind::Sqrt => relax_sqrt(l, u).unwrap(),
        }
    }

    /// Checks the widened relaxation on a grid and returns the exact lines.
    fn assert_envelope(kind: UnaryKind, l: f64, u: f64) -> UnaryRelaxation {
        let r = kind.relax(l, u).unwrap();
        for x in grid(l, u, 1000) {
            let y = kind.apply(x);
            assert!(r.lower(x) <= y + 1e-9, "{kind:?} lower at {x} on [{l},{u}]");
            assert!(r.upper(x) >= y - 1e-9, "{kind:?} upper at {x} on [{l},{u}]");
        }
        unwidened(kind, l, u)
    }

    #[test]
    fn widening_absorbs_cancellation_in_steep_chords() {
        let (l, u) = (7.175982416304536, 26.087582806491216);
        let r = UnaryKind::Exp.relax(l, u).unwrap();
        for x in grid(l, u, 1000) {
            assert!(r.upper(x) >= x.exp(), "{x}");
            assert!(r.lower(x) <= x.exp(), "{x}");
        }
        let exact = relax_exp(l, u).unwrap();
        assert!(r.beta_u - exact.beta_u < 1e-14 * exact.alpha_u * u);
    }

    #[test]
    fn relu_cases() {
        let r = relax_relu(1.0, 3.0);
        assert_eq!(r, UnaryRelaxation::IDENTITY);
        let r = relax_relu(-2.0, -1.0);
        assert_eq!((r.alpha_l, r.beta_l, r.alpha_u, r.beta_u), (0.0, 0.0, 0.0, 0.0));
        let r = assert_envelope(UnaryKind::Relu, -1.0, 2.0);
        assert_abs_diff_eq!(r.alpha_u, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.beta_u, 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!((r.alpha_l, r.beta_l), (1.0, 0.0));
        let r = relax_relu(-3.0, 1.0);
        assert_eq!(r.alpha_l, 0.0);
    }

    #[test]
    fn tanh_cases() {
        let r = relax_tanh(0.0, 0.0);
        assert_abs_diff_eq!(r.alpha_l, 1.0);
        assert_abs_diff_eq!(r.beta_l, 0.0);
        assert_eq!(r.alpha_l, r.alpha_u);

        let r = assert_envelope(UnaryKind::Tanh, 0.5, 1.5);
        let slope = (1.5f64.tanh() - 0.5f64.tanh()) / 1.0;
        assert_abs_diff_eq!(r.alpha_l, slope, epsilon = 1e-12);
        assert_abs_diff_eq!(r.lower(0.5), 0.5f64.tanh(), epsilon = 1e-12);

        let r = assert_envelope(UnaryKind::Tanh, -1.0, 1.0);
        assert_eq!(r.alpha_u, r.alpha_l);
        assert_eq!(r.beta_u, -r.beta_l);
        // lower line passes through the right endpoint
        assert_abs_diff_eq!(r.lower(1.0), 1.0f64.tanh(), epsilon = 1e-7);

        assert_envelope(UnaryKind::Tanh, -0.1, 5.0);
        assert_envelope(UnaryKind::Tanh, -5.0, 0.1);
        assert_envelope(UnaryKind::Tanh, -3.0, -1.0);
    }

    #[test]
    fn exp_cases() {
        let r = relax_exp(0.0, 0.0).unwrap();
        assert_eq!((r.alpha_l, r.beta_l, r.alpha_u, r.beta_u), (1.0, 1.0, 1.0, 1.0));
        // midpoint 0 exceeds l + 1 - 0.01, so the tangent sits at -0.01
        let r = assert_envelope(UnaryKind::Exp, -1.0, 1.0);
        let d: f64 = -0.01;
        assert_abs_diff_eq!(r.alpha_l, d.exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(r.beta_l, d.exp() * (1.0 - d), epsilon = 1e-15);
        assert!(r.lower(-1.0) > 0.0);
        // the midpoint would put the tangent's root above l; it is capped
        let r = relax_exp(-3.0, 5.0).unwrap();
        assert!(r.lower(-3.0) > 0.0);
        assert!(matches!(relax_exp(0.0, 701.0), Err(Error::RangeOverflow(_))));
    }

    #[test]
    fn reciprocal_cases() {
        let r = relax_reciprocal(1.0, 1.0).unwrap();
        assert_eq!((r.alpha_l, r.beta_l), (-1.0, 2.0));
        let r = assert_envelope(UnaryKind::Reciprocal, 1.0, 2.0);
        assert_abs_diff_eq!(r.alpha_u, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.beta_u, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.alpha_l, -4.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.beta_l, 4.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(
            relax_reciprocal(0.0, 1.0),
            Err(Error::DomainViolation { .. })
        ));
    }

    #[test]
    fn square_cases() {
        let r = assert_envelope(UnaryKind::Square, -1.0, 1.0);
        assert_eq!((r.alpha_l, r.beta_l), (0.0, 0.0));
        assert_abs_diff_eq!(r.alpha_u, 0.0);
        assert_abs_diff_eq!(r.beta_u, 1.0);

        let r = assert_envelope(UnaryKind::Square, 1.0, 3.0);
        assert_eq!((r.alpha_l, r.beta_l), (4.0, -4.0));
        assert_eq!((r.alpha_u, r.beta_u), (4.0, -3.0));
        assert!(r.lower(1.0) >= 0.0);

        let m = assert_envelope(UnaryKind::Square, -3.0, -1.0);
        assert_eq!((m.alpha_l, m.beta_l), (-4.0, -4.0));
        assert_eq!((m.alpha_u, m.beta_u), (-4.0, -3.0));
    }

    #[test]
    fn square_small_positive_interval_stays_nonnegative() {
        // midpoint 3 > 2l = 2, so the tangent point is capped at 2l
        let r = relax_square(1.0, 5.0);
        assert_abs_diff_eq!(r.alpha_l, 4.0);
        assert!(r.lower(1.0) >= 0.0);
    }

    #[test]
    fn sqrt_cases() {
        let r = relax_sqrt(4.0, 4.0).unwrap();
        assert_abs_diff_eq!(r.alpha_u, 0.25);
        assert_abs_diff_eq!(r.beta_u, 1.0);
        assert_eq!(r.alpha_l, r.alpha_u);
        let r = assert_envelope(UnaryKind::Sqrt, 1.0, 4.0);
        assert_abs_diff_eq!(r.alpha_l, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.beta_l, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.upper(2.5), 2.5f64.sqrt(), epsilon = 1e-15);
        assert!(relax_sqrt(-1.0, 4.0).is_err());
        assert_envelope(UnaryKind::Sqrt, 0.0, 2.0);
    }

    #[test]
    fn degenerate_intervals_are_exact() {
        for kind in [
            UnaryKind::Relu,
            UnaryKind::Tanh,
            UnaryKind::Exp,
            UnaryKind::Reciprocal,
            UnaryKind::Square,
            UnaryKind::Sqrt,
        ] {
            for x in [0.3, 1.7] {
                let r = kind.relax(x, x).unwrap();
                assert_abs_diff_eq!(r.lower(x), kind.apply(x), epsilon = 1e-12);
                assert_abs_diff_eq!(r.upper(x), kind.apply(x), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn multiply_constant_operand() {
        let r = bound_multiply(2.0, 2.0, -1.0, 3.0);
        for y in grid(-1.0, 3.0, 11) {
            assert_abs_diff_eq!(r.lower(2.0, y), 2.0 * y, epsilon = 1e-12);
            assert_abs_diff_eq!(r.upper(2.0, y), 2.0 * y, epsilon = 1e-12);
        }
    }

    #[test]
    fn multiply_unit_box() {
        let r = bound_multiply(-1.0, 1.0, -1.0, 1.0);
        assert_eq!((r.alpha_l, r.beta_l, r.gamma_l), (-1.0, -1.0, -1.0));
        assert_eq!((r.alpha_u, r.beta_u, r.gamma_u), (1.0, -1.0, 1.0));
        assert_eq!(-1.0 * -1.0 - r.lower(-1.0, -1.0), 0.0);
        assert_eq!(r.upper(-1.0, 1.0) - -1.0, 0.0);
        assert_eq!(r.upper(1.0, 1.0) - 1.0, 0.0);
        for x in grid(-1.0, 1.0, 100) {
            for y in grid(-1.0, 1.0, 100) {
                assert!(r.lower(x, y) <= x * y + 1e-12);
                assert!(r.upper(x, y) >= x * y - 1e-12);
            }
        }
    }

    #[test]
    fn divide_point_and_box() {
        let r = bound_divide(2.0, 2.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(r.lower(2.0, 1.0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.upper(2.0, 1.0), 2.0, epsilon = 1e-12);
        let r = bound_divide(1.0, 2.0, 1.0, 2.0).unwrap();
        for x in grid(1.0, 2.0, 100) {
            for y in grid(1.0, 2.0, 100) {
                assert!(r.lower(x, y) <= x / y + 1e-12);
                assert!(r.upper(x, y) >= x / y - 1e-12);
            }
        }
        let r = bound_divide(-2.0, 1.0, 0.5, 3.0).unwrap();
        for x in grid(-2.0, 1.0, 100) {
            for y in grid(0.5, 3.0, 100) {
                assert!(r.lower(x, y) <= x / y + 1e-12);
                assert!(r.upper(x, y) >= x / y - 1e-12);
            }
        }
        assert!(bound_divide(1.0, 2.0, 0.0, 1.0).is_err());
    }
}
