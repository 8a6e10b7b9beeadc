//! Backward substitution of linear bounds.
//!
//! A [`BackwardState`] bounds the neurons of one node at one position by
//! linear functions of earlier nodes. Coefficient blocks `Λ` are kept per
//! `(node, position)` in a frontier; each step replaces the latest block by
//! blocks on that node's sources until only input embeddings (or
//! substituted forward bounds) remain.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, Zip};

use crate::bounds::{LinearBounds, RefFrame};
use crate::error::{shape_err, Result};
use crate::program::NodeId;
use crate::relax::{BilinearRelaxation, UnaryRelaxation};

/// Lower- and upper-bound coefficients on one `(node, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lambda {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
}

impl Lambda {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            lower: Array2::zeros((rows, cols)),
            upper: Array2::zeros((rows, cols)),
        }
    }

    pub fn rows(&self) -> usize {
        self.lower.nrows()
    }

    pub fn cols(&self) -> usize {
        self.lower.ncols()
    }

    fn add_assign(&mut self, other: &Lambda) {
        self.lower += &other.lower;
        self.upper += &other.upper;
    }
}

/// Bias contributions `(ΔL, ΔU)` produced by a step.
pub type BiasDelta = (Array1<f64>, Array1<f64>);

/// `Λ' = Λ W`, `Δ' = Λ b` for a source related by `y = W x + b`.
pub fn backprop_affine(lam: &Lambda, w: &Array2<f64>, b: &Array1<f64>) -> Result<(Lambda, BiasDelta)> {
    if w.nrows() != lam.cols() || b.len() != lam.cols() {
        return Err(shape_err("backprop affine", (lam.cols(), "·"), w.dim()));
    }
    Ok((
        Lambda {
            lower: lam.lower.dot(w),
            upper: lam.upper.dot(w),
        },
        (lam.lower.dot(b), lam.upper.dot(b)),
    ))
}

/// Sign-split substitution of per-neuron relaxations: for the lower bound,
/// positive coefficients take the lower line and negative ones the upper
/// line; mirrored for the upper bound.
pub fn backprop_unary(lam: &Lambda, relax: &[UnaryRelaxation]) -> Result<(Lambda, BiasDelta)> {
    if relax.len() != lam.cols() {
        return Err(shape_err("backprop unary", lam.cols(), relax.len()));
    }
    let rows = lam.rows();
    let mut out = Lambda::zeros(rows, lam.cols());
    let mut dl = Array1::zeros(rows);
    let mut du = Array1::zeros(rows);
    for r in 0..rows {
        for (j, rel) in relax.iter().enumerate() {
            let v = lam.lower[[r, j]];
            if v >= 0.0 {
                out.lower[[r, j]] = v * rel.alpha_l;
                dl[r] += v * rel.beta_l;
            } else {
                out.lower[[r, j]] = v * rel.alpha_u;
                dl[r] += v * rel.beta_u;
            }
            let v = lam.upper[[r, j]];
            if v >= 0.0 {
                out.upper[[r, j]] = v * rel.alpha_u;
                du[r] += v * rel.beta_u;
            } else {
                out.upper[[r, j]] = v * rel.alpha_l;
                du[r] += v * rel.beta_l;
            }
        }
    }
    Ok((out, (dl, du)))
}

/// Sign-split substitution of the bilinear term `x_a · y_b ≤/≥ plane`
/// for column `col` of `lam`, accumulating into `x_out[:, a]`,
/// `y_out[:, b]` and the bias.
#[allow(clippy::too_many_arguments)]
pub fn backprop_bilinear_term(
    lam: &Lambda,
    col: usize,
    r: &BilinearRelaxation,
    x_out: &mut Lambda,
    a: usize,
    y_out: &mut Lambda,
    b: usize,
    bias: &mut BiasDelta,
) {
    for row in 0..lam.rows() {
        let v = lam.lower[[row, col]];
        if v != 0.0 {
            let (al, be, ga) = if v > 0.0 {
                (r.alpha_l, r.beta_l, r.gamma_l)
            } else {
                (r.alpha_u, r.beta_u, r.gamma_u)
            };
            x_out.lower[[row, a]] += v * al;
            y_out.lower[[row, b]] += v * be;
            bias.0[row] += v * ga;
        }
        let v = lam.upper[[row, col]];
        if v != 0.0 {
            let (al, be, ga) = if v > 0.0 {
                (r.alpha_u, r.beta_u, r.gamma_u)
            } else {
                (r.alpha_l, r.beta_l, r.gamma_l)
            };
            x_out.upper[[row, a]] += v * al;
            y_out.upper[[row, b]] += v * be;
            bias.1[row] += v * ga;
        }
    }
}

/// Replaces the neurons `lam` refers to by their forward bounds `fwd`
/// (perturbed-input frame): positive coefficients take the matching side,
/// negative ones the opposite side. Returns bounds in `fwd`'s frame.
pub fn backprop_through_attention_output(lam: &Lambda, fwd: &LinearBounds) -> Result<LinearBounds> {
    if fwd.rows() != lam.cols() {
        return Err(shape_err("attention substitution", lam.cols(), fwd.rows()));
    }
    crate::forward::to_forward_frame(fwd.clone())?;
    let pos = |m: &Array2<f64>| m.mapv(|v| v.max(0.0));
    let neg = |m: &Array2<f64>| m.mapv(|v| v.min(0.0));
    let (lp, ln) = (pos(&lam.lower), neg(&lam.lower));
    let (up, un) = (pos(&lam.upper), neg(&lam.upper));
    Ok(LinearBounds {
        lower_coeff: lp.dot(&fwd.lower_coeff) + ln.dot(&fwd.upper_coeff),
        lower_bias: lp.dot(&fwd.lower_bias) + ln.dot(&fwd.upper_bias),
        upper_coeff: up.dot(&fwd.upper_coeff) + un.dot(&fwd.lower_coeff),
        upper_bias: up.dot(&fwd.upper_bias) + un.dot(&fwd.lower_bias),
        frame: fwd.frame,
    })
}

/// Linear bounds of one node's neurons at one position, mid-substitution.
#[derive(Debug, Clone)]
pub struct BackwardState {
    pub target: (NodeId, usize),
    frontier: BTreeMap<(NodeId, usize), Lambda>,
    result: LinearBounds,
    /// Number of `Λ` blocks created, including the initial identity.
    pub materialized: u64,
}

impl BackwardState {
    /// `Λ = I`, `Δ = 0` on `(node, pos)`; the result frame is `frame`.
    pub fn init_identity(node: NodeId, pos: usize, width: usize, frame: RefFrame) -> Self {
        let mut frontier = BTreeMap::new();
        frontier.insert(
            (node, pos),
            Lambda {
                lower: Array2::eye(width),
                upper: Array2::eye(width),
            },
        );
        Self {
            target: (node, pos),
            frontier,
            result: LinearBounds::constant(Array1::zeros(width), frame),
            materialized: 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.result.rows()
    }

    /// The block of the latest node still to be substituted. Sources always
    /// precede their consumers, so this respects topological order.
    pub fn pop(&mut self) -> Option<((NodeId, usize), Lambda)> {
        self.frontier.pop_last()
    }

    pub fn push(&mut self, node: NodeId, pos: usize, lam: Lambda) {
        match self.frontier.get_mut(&(node, pos)) {
            Some(existing) => existing.add_assign(&lam),
            None => {
                self.materialized += 1;
                self.frontier.insert((node, pos), lam);
            }
        }
    }

    pub fn add_bias(&mut self, delta: &BiasDelta) {
        self.result.lower_bias += &delta.0;
        self.result.upper_bias += &delta.1;
    }

    /// Terminates a block on an input position: perturbed positions add
    /// into their coefficient block, clean ones fold `Λ x_0` into the bias.
    pub fn absorb_input(&mut self, lam: &Lambda, block: Option<usize>, x0: ArrayView1<f64>) {
        match block {
            Some(k) => {
                let d = lam.cols();
                let cols = s![.., k * d..(k + 1) * d];
                Zip::from(self.result.lower_coeff.slice_mut(cols))
                    .and(&lam.lower)
                    .for_each(|a, &b| *a += b);
                Zip::from(self.result.upper_coeff.slice_mut(cols))
                    .and(&lam.upper)
                    .for_each(|a, &b| *a += b);
            }
            None => {
                self.result.lower_bias += &lam.lower.dot(&x0);
                self.result.upper_bias += &lam.upper.dot(&x0);
            }
        }
    }

    /// Terminates a block by substituting forward bounds of its node.
    pub fn absorb_forward(&mut self, lam: &Lambda, fwd: &LinearBounds) -> Result<()> {
        let sub = backprop_through_attention_output(lam, fwd)?;
        self.result.lower_coeff += &sub.lower_coeff;
        self.result.upper_coeff += &sub.upper_coeff;
        self.result.lower_bias += &sub.lower_bias;
        self.result.upper_bias += &sub.upper_bias;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.frontier.is_empty()
    }

    pub fn finish(self) -> LinearBounds {
        debug_assert!(self.frontier.is_empty());
        self.result
    }
}
