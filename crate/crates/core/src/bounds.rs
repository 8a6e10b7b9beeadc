//! Interval and linear bound value types.
//!
//! [`IntervalBounds`] carries concrete per-neuron ranges. [`LinearBounds`]
//! carries a pair of affine functions sandwiching a set of neurons, either in
//! terms of an earlier sub-layer or in terms of the concatenated perturbed
//! embeddings. [`concretize`] turns the latter into intervals with the dual
//! norm of the perturbation ball.
//!
//! All arithmetic is plain `f64` without directed rounding, so soundness holds
//! up to floating point error.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::relax::UnaryKind;

/// Order of an ℓp norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Linf,
}

impl Norm {
    /// The dual norm `q` with `1/p + 1/q = 1`.
    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::Linf,
            Norm::L2 => Norm::L2,
            Norm::Linf => Norm::L1,
        }
    }

    pub fn of(self, v: ArrayView1<f64>) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn of_slice(self, v: &[f64]) -> f64 {
        self.of(ArrayView1::from(v))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::Linf => "inf",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "infinity" => Ok(Norm::Linf),
            other => Err(format!("unknown norm `{other}` (expected 1, 2 or inf)")),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The perturbation set: an ℓp ball of radius `epsilon` around the clean
/// embedding of every position in `positions`, all other positions fixed.
///
/// Positions are 0-based and strictly increasing. Reports convert to 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    norm: Norm,
    epsilon: f64,
    positions: Vec<usize>,
}

impl PerturbationSpec {
    pub fn new(norm: Norm, epsilon: f64, positions: Vec<usize>, seq_len: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidPerturbation("no perturbed positions".into()));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidPerturbation(format!("epsilon {epsilon}")));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPerturbation(format!(
                "positions {positions:?} not strictly increasing"
            )));
        }
        if let Some(&last) = positions.last() {
            if last >= seq_len {
                return Err(Error::InvalidPerturbation(format!(
                    "position {} outside sequence of length {seq_len}",
                    last + 1
                )));
            }
        }
        Ok(Self {
            norm,
            epsilon,
            positions,
        })
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn dual(&self) -> Norm {
        self.norm.dual()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Number of perturbed positions `t`.
    pub fn t(&self) -> usize {
        self.positions.len()
    }

    /// Index of `pos` inside the perturbed block layout, if perturbed.
    pub fn block_of(&self, pos: usize) -> Option<usize> {
        self.positions.binary_search(&pos).ok()
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }
}

/// Concrete lower/upper bounds per neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBounds {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl IntervalBounds {
    pub fn new(lower: Array1<f64>, upper: Array1<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(shape_err("interval", lower.len(), upper.len()));
        }
        if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("interval bounds".into()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(Error::InvalidPerturbation(format!(
                "interval {i} has lower {} > upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Builds an interval, repairing floating point inversions (`lower > upper`
    /// by rounding) by swapping the pair.
    pub(crate) fn from_unordered(mut lower: Array1<f64>, mut upper: Array1<f64>) -> Self {
        for (l, u) in lower.iter_mut().zip(upper.iter_mut()) {
            if *l > *u {
                std::mem::swap(l, u);
            }
        }
        Self { lower, upper }
    }

    pub fn point(values: Array1<f64>) -> Self {
        Self {
            lower: values.clone(),
            upper: values,
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn width(&self) -> Array1<f64> {
        &self.upper - &self.lower
    }

    pub fn max_width(&self) -> f64 {
        self.width().iter().fold(0.0, |m, w| m.max(*w))
    }

    pub fn is_finite(&self) -> bool {
        self.lower.iter().chain(self.upper.iter()).all(|v| v.is_finite())
    }

    /// True when `x` lies inside every interval widened by `slack`.
    pub fn contains(&self, x: ArrayView1<f64>, slack: f64) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *v >= l - slack && *v <= u + slack)
    }

    pub fn slice(&self, start: usize, end: usize) -> IntervalBounds {
        IntervalBounds {
            lower: self.lower.slice(s![start..end]).to_owned(),
            upper: self.upper.slice(s![start..end]).to_owned(),
        }
    }

    pub fn concat(parts: &[IntervalBounds]) -> IntervalBounds {
        let lower: Vec<f64> = parts.iter().flat_map(|p| p.lower.iter().copied()).collect();
        let upper: Vec<f64> = parts.iter().flat_map(|p| p.upper.iter().copied()).collect();
        IntervalBounds {
            lower: Array1::from(lower),
            upper: Array1::from(upper),
        }
    }

    /// Intersects every neuron with the fixed range `[lo, hi]`.
    pub(crate) fn clamp_to(&mut self, lo: f64, hi: f64) {
        for (l, u) in self.lower.iter_mut().zip(self.upper.iter_mut()) {
            *l = l.max(lo).min(hi);
            *u = u.min(hi).max(lo);
            if *l > *u {
                *l = *u;
            }
        }
    }
}

/// Reference frame of a [`LinearBounds`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefFrame {
    /// Columns are the concatenation `x^(r_1) ⊕ … ⊕ x^(r_t)` of the perturbed
    /// embeddings: block `k` spans columns `k*dim .. (k+1)*dim`.
    InputPerturbed { blocks: usize, dim: usize },
    /// Columns are the neurons of sub-layer `node`, position-major.
    Layer {
        node: usize,
        positions: usize,
        width: usize,
    },
}

impl RefFrame {
    pub fn dims(&self) -> usize {
        match *self {
            RefFrame::InputPerturbed { blocks, dim } => blocks * dim,
            RefFrame::Layer {
                positions, width, ..
            } => positions * width,
        }
    }
}

/// Lower and upper affine bounds of `rows` neurons:
/// `lower_coeff·r + lower_bias ≤ neuron ≤ upper_coeff·r + upper_bias`
/// where `r` is the reference vector described by `frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBounds {
    pub lower_coeff: Array2<f64>,
    pub lower_bias: Array1<f64>,
    pub upper_coeff: Array2<f64>,
    pub upper_bias: Array1<f64>,
    pub frame: RefFrame,
}

impl LinearBounds {
    pub fn new(
        lower_coeff: Array2<f64>,
        lower_bias: Array1<f64>,
        upper_coeff: Array2<f64>,
        upper_bias: Array1<f64>,
        frame: RefFrame,
    ) -> Result<Self> {
        let rows = lower_coeff.nrows();
        let cols = frame.dims();
        if lower_coeff.dim() != (rows, cols) || upper_coeff.dim() != (rows, cols) {
            return Err(shape_err(
                "linear bounds coefficients",
                (rows, cols),
                (lower_coeff.dim(), upper_coeff.dim()),
            ));
        }
        if lower_bias.len() != rows || upper_bias.len() != rows {
            return Err(shape_err(
                "linear bounds bias",
                rows,
                (lower_bias.len(), upper_bias.len()),
            ));
        }
        Ok(Self {
            lower_coeff,
            lower_bias,
            upper_coeff,
            upper_bias,
            frame,
        })
    }

    /// Zero coefficients, biases set to `value` on both sides.
    pub fn constant(value: Array1<f64>, frame: RefFrame) -> Self {
        let rows = value.len();
        let cols = frame.dims();
        Self {
            lower_coeff: Array2::zeros((rows, cols)),
            lower_bias: value.clone(),
            upper_coeff: Array2::zeros((rows, cols)),
            upper_bias: value,
            frame,
        }
    }

    pub fn rows(&self) -> usize {
        self.lower_coeff.nrows()
    }

    pub fn eval_lower(&self, r: ArrayView1<f64>) -> Array1<f64> {
        self.lower_coeff.dot(&r) + &self.lower_bias
    }

    pub fn eval_upper(&self, r: ArrayView1<f64>) -> Array1<f64> {
        self.upper_coeff.dot(&r) + &self.upper_bias
    }

    /// Per-position coefficient blocks `(lower, upper)` of an `InputPerturbed`
    /// frame (the split of the concatenated layout into `t` blocks).
    pub fn blocks(&self) -> Result<Vec<(ArrayView2<'_, f64>, ArrayView2<'_, f64>)>> {
        let RefFrame::InputPerturbed { blocks, dim } = self.frame else {
            return Err(Error::FrameMismatch(
                "per-position blocks need the perturbed-input frame".into(),
            ));
        };
        Ok((0..blocks)
            .map(|k| {
                let cols = s![.., k * dim..(k + 1) * dim];
                (self.lower_coeff.slice(cols), self.upper_coeff.slice(cols))
            })
            .collect())
    }

    /// Rows `start..end` as a new bound.
    pub fn select_rows(&self, start: usize, end: usize) -> LinearBounds {
        LinearBounds {
            lower_coeff: self.lower_coeff.slice(s![start..end, ..]).to_owned(),
            lower_bias: self.lower_bias.slice(s![start..end]).to_owned(),
            upper_coeff: self.upper_coeff.slice(s![start..end, ..]).to_owned(),
            upper_bias: self.upper_bias.slice(s![start..end]).to_owned(),
            frame: self.frame,
        }
    }

    /// Stacks bounds sharing a frame vertically.
    pub fn stack(parts: &[LinearBounds]) -> Result<LinearBounds> {
        let frame = parts
            .first()
            .map(|p| p.frame)
            .ok_or_else(|| shape_err("stack", "at least one part", 0))?;
        if parts.iter().any(|p| p.frame != frame) {
            return Err(Error::FrameMismatch("stacking bounds of different frames".into()));
        }
        let views = |f: fn(&LinearBounds) -> ArrayView2<'_, f64>| -> Array2<f64> {
            let v: Vec<_> = parts.iter().map(f).collect();
            ndarray::concatenate(Axis(0), &v).expect("consistent column counts")
        };
        let biases = |f: fn(&LinearBounds) -> ArrayView1<'_, f64>| -> Array1<f64> {
            let v: Vec<_> = parts.iter().map(f).collect();
            ndarray::concatenate(Axis(0), &v).expect("1-d")
        };
        Ok(LinearBounds {
            lower_coeff: views(|p| p.lower_coeff.view()),
            lower_bias: biases(|p| p.lower_bias.view()),
            upper_coeff: views(|p| p.upper_coeff.view()),
            upper_bias: biases(|p| p.upper_bias.view()),
            frame,
        })
    }
}

/// Global interval bounds of `lb` over the perturbation ball.
///
/// `x_r0` is the clean concatenation of the perturbed embeddings. For row `j`:
/// `lower[j] = -ε Σ_k ‖lower_coeff[j, block k]‖_q + lower_coeff[j]·x_r0 + lower_bias[j]`
/// and symmetrically for the upper side with `+ε`.
pub fn concretize(
    lb: &LinearBounds,
    spec: &PerturbationSpec,
    x_r0: ArrayView1<f64>,
) -> Result<IntervalBounds> {
    let RefFrame::InputPerturbed { blocks, dim } = lb.frame else {
        return Err(Error::FrameMismatch(
            "concretize needs the perturbed-input frame".into(),
        ));
    };
    if blocks != spec.t() || x_r0.len() != blocks * dim {
        return Err(shape_err(
            "concretize",
            (spec.t(), blocks * dim),
            (blocks, x_r0.len()),
        ));
    }
    if x_r0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clean embeddings".into()));
    }
    let q = spec.dual();
    let eps = spec.epsilon();
    let rows = lb.rows();
    let mut lower = lb.eval_lower(x_r0);
    let mut upper = lb.eval_upper(x_r0);
    if eps > 0.0 {
        for j in 0..rows {
            let mut norm_l = 0.0;
            let mut norm_u = 0.0;
            for k in 0..blocks {
                let cols = s![j, k * dim..(k + 1) * dim];
                norm_l += q.of(lb.lower_coeff.slice(cols));
                norm_u += q.of(lb.upper_coeff.slice(cols));
            }
            lower[j] -= eps * norm_l;
            upper[j] += eps * norm_u;
        }
    }
    if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("concretized bounds".into()));
    }
    Ok(IntervalBounds::from_unordered(lower, upper))
}

/// Interval image of `W·x + b` for `x` in `iv`, in center/radius form.
pub fn ibp_affine(iv: &IntervalBounds, w: &Array2<f64>, b: &Array1<f64>) -> Result<IntervalBounds> {
    if w.ncols() != iv.len() || w.nrows() != b.len() {
        return Err(shape_err(
            "ibp_affine",
            (b.len(), iv.len()),
            w.dim(),
        ));
    }
    let center = (&iv.lower + &iv.upper) * 0.5;
    let radius = (&iv.upper - &iv.lower) * 0.5;
    let c = w.dot(&center) + b;
    let r = w.mapv(f64::abs).dot(&radius);
    Ok(IntervalBounds::from_unordered(&c - &r, &c + &r))
}

/// Exact interval image of an elementwise function.
pub fn ibp_elementwise(iv: &IntervalBounds, kind: UnaryKind) -> Result<IntervalBounds> {
    let n = iv.len();
    let mut lower = Array1::zeros(n);
    let mut upper = Array1::zeros(n);
    for i in 0..n {
        let (l, u) = (iv.lower[i], iv.upper[i]);
        let (lo, hi) = match kind {
            UnaryKind::Relu => (l.max(0.0), u.max(0.0)),
            UnaryKind::Tanh => (l.tanh(), u.tanh()),
            UnaryKind::Exp => {
                if u > 700.0 {
                    return Err(Error::RangeOverflow(u));
                }
                (l.exp(), u.exp())
            }
            UnaryKind::Reciprocal => {
                if l <= 0.0 {
                    return Err(Error::DomainViolation {
                        op: "reciprocal",
                        detail: format!("interval [{l}, {u}] reaches non-positive values"),
                    });
                }
                (1.0 / u, 1.0 / l)
            }
            UnaryKind::Square => {
                let (a, b) = (l * l, u * u);
                if l < 0.0 && u > 0.0 {
                    (0.0, a.max(b))
                } else {
                    (a.min(b), a.max(b))
                }
            }
            UnaryKind::Sqrt => {
                if l < 0.0 {
                    return Err(Error::DomainViolation {
                        op: "sqrt",
                        detail: format!("interval [{l}, {u}] reaches negative values"),
                    });
                }
                (l.sqrt(), u.sqrt())
            }
        };
        lower[i] = lo;
        upper[i] = hi;
    }
    Ok(IntervalBounds { lower, upper })
}
