//! Forward propagation of linear bounds in the perturbed-input frame.
//!
//! Every bound here is a [`LinearBounds`] whose columns are the concatenated
//! perturbed embeddings `x^(r)`. Bilinear products are relaxed per term with
//! [`bound_multiply`] and the sign of each plane coefficient picks which side
//! of the operand's bounds is substituted.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewMut1, Zip};

use crate::bounds::{concretize, IntervalBounds, LinearBounds, PerturbationSpec, RefFrame};
use crate::error::{shape_err, Error, Result};
use crate::relax::{bound_multiply, BilinearRelaxation, UnaryKind, UnaryRelaxation};

fn frame_dims(frame: RefFrame) -> Result<(usize, usize)> {
    match frame {
        RefFrame::InputPerturbed { blocks, dim } => Ok((blocks, dim)),
        RefFrame::Layer { .. } => Err(Error::FrameMismatch(
            "forward bounds must be in the perturbed-input frame".into(),
        )),
    }
}

/// Forward bounds of one input position: identity on a perturbed block,
/// a constant otherwise.
pub fn input_bounds(x0: ArrayView1<f64>, block: Option<usize>, frame: RefFrame) -> Result<LinearBounds> {
    let (_, dim) = frame_dims(frame)?;
    if x0.len() != dim {
        return Err(shape_err("input bounds", dim, x0.len()));
    }
    match block {
        None => Ok(LinearBounds::constant(x0.to_owned(), frame)),
        Some(k) => {
            let mut coeff = Array2::zeros((dim, frame.dims()));
            coeff
                .slice_mut(s![.., k * dim..(k + 1) * dim])
                .assign(&Array2::eye(dim));
            Ok(LinearBounds {
                lower_coeff: coeff.clone(),
                lower_bias: Array1::zeros(dim),
                upper_coeff: coeff,
                upper_bias: Array1::zeros(dim),
                frame,
            })
        }
    }
}

/// Checks that `lb` lives in the perturbed-input frame and hands it over as
/// forward bounds. Backward results are already laid out as `x^(r_1) ⊕ …`.
pub fn to_forward_frame(lb: LinearBounds) -> Result<LinearBounds> {
    frame_dims(lb.frame)?;
    Ok(lb)
}

/// `W x + b` with the sign of each weight choosing the side of `x`.
pub fn forward_affine(x: &LinearBounds, w: &Array2<f64>, b: &Array1<f64>) -> Result<LinearBounds> {
    if w.ncols() != x.rows() || w.nrows() != b.len() {
        return Err(shape_err("forward affine", (b.len(), x.rows()), w.dim()));
    }
    let pos = w.mapv(|v| v.max(0.0));
    let neg = w.mapv(|v| v.min(0.0));
    Ok(LinearBounds {
        lower_coeff: pos.dot(&x.lower_coeff) + neg.dot(&x.upper_coeff),
        lower_bias: pos.dot(&x.lower_bias) + neg.dot(&x.upper_bias) + b,
        upper_coeff: pos.dot(&x.upper_coeff) + neg.dot(&x.lower_coeff),
        upper_bias: pos.dot(&x.upper_bias) + neg.dot(&x.lower_bias) + b,
        frame: x.frame,
    })
}

/// Applies per-neuron relaxations; a negative slope swaps the sides.
pub fn forward_unary(x: &LinearBounds, relax: &[UnaryRelaxation]) -> Result<LinearBounds> {
    if relax.len() != x.rows() {
        return Err(shape_err("forward unary", x.rows(), relax.len()));
    }
    let mut out = LinearBounds::constant(Array1::zeros(x.rows()), x.frame);
    for (j, r) in relax.iter().enumerate() {
        let (src, bias) = if r.alpha_l >= 0.0 {
            (x.lower_coeff.row(j), x.lower_bias[j])
        } else {
            (x.upper_coeff.row(j), x.upper_bias[j])
        };
        out.lower_coeff.row_mut(j).scaled_add(r.alpha_l, &src);
        out.lower_bias[j] = r.alpha_l * bias + r.beta_l;
        let (src, bias) = if r.alpha_u >= 0.0 {
            (x.upper_coeff.row(j), x.upper_bias[j])
        } else {
            (x.lower_coeff.row(j), x.lower_bias[j])
        };
        out.upper_coeff.row_mut(j).scaled_add(r.alpha_u, &src);
        out.upper_bias[j] = r.alpha_u * bias + r.beta_u;
    }
    Ok(out)
}

fn pick(lb: &LinearBounds, i: usize, upper: bool) -> (ArrayView1<'_, f64>, f64) {
    if upper {
        (lb.upper_coeff.row(i), lb.upper_bias[i])
    } else {
        (lb.lower_coeff.row(i), lb.lower_bias[i])
    }
}

/// Accumulates the bounds of `x·y` (neuron `a` of `x`, neuron `b` of `y`)
/// into row `row` of `out`.
pub fn forward_bilinear(
    out: &mut LinearBounds,
    row: usize,
    x: &LinearBounds,
    a: usize,
    y: &LinearBounds,
    b: usize,
    r: &BilinearRelaxation,
) {
    let add = |mut dst: ArrayViewMut1<f64>, coef: f64, src: ArrayView1<f64>| {
        if coef != 0.0 {
            dst.scaled_add(coef, &src);
        }
    };
    let (xa, xb) = pick(x, a, r.alpha_l < 0.0);
    let (ya, yb) = pick(y, b, r.beta_l < 0.0);
    add(out.lower_coeff.row_mut(row), r.alpha_l, xa);
    add(out.lower_coeff.row_mut(row), r.beta_l, ya);
    out.lower_bias[row] += r.alpha_l * xb + r.beta_l * yb + r.gamma_l;
    let (xa, xb) = pick(x, a, r.alpha_u >= 0.0);
    let (ya, yb) = pick(y, b, r.beta_u >= 0.0);
    add(out.upper_coeff.row_mut(row), r.alpha_u, xa);
    add(out.upper_coeff.row_mut(row), r.beta_u, ya);
    out.upper_bias[row] += r.alpha_u * xb + r.beta_u * yb + r.gamma_u;
}

/// Element-wise `z_j = x_j · y_{index[j]}`.
pub fn forward_mul(
    x: &LinearBounds,
    y: &LinearBounds,
    index: &[usize],
    relax: &[BilinearRelaxation],
) -> Result<LinearBounds> {
    if index.len() != x.rows() || relax.len() != x.rows() {
        return Err(shape_err("forward mul", x.rows(), (index.len(), relax.len())));
    }
    let mut out = LinearBounds::constant(Array1::zeros(x.rows()), x.frame);
    for (j, (&b, r)) in index.iter().zip(relax).enumerate() {
        forward_bilinear(&mut out, j, x, j, y, b, r);
    }
    Ok(out)
}

/// Scores of query position `i` against all keys. `relax[(h·n + j)·d_k + c]`
/// relaxes the product term `q_i[h·d_k + c] · k_j[h·d_k + c]` (already
/// scaled).
pub fn forward_scores(
    query: &LinearBounds,
    keys: &[&LinearBounds],
    heads: usize,
    relax: &[BilinearRelaxation],
) -> Result<LinearBounds> {
    let n = keys.len();
    let dk = query.rows() / heads;
    if relax.len() != heads * n * dk {
        return Err(shape_err("forward scores", heads * n * dk, relax.len()));
    }
    let mut out = LinearBounds::constant(Array1::zeros(heads * n), query.frame);
    for h in 0..heads {
        for (j, key) in keys.iter().enumerate() {
            let row = h * n + j;
            for c in 0..dk {
                let col = h * dk + c;
                forward_bilinear(&mut out, row, query, col, key, col, &relax[row * dk + c]);
            }
        }
    }
    Ok(out)
}

/// Probability-weighted values at one position. `relax[col·n + j]` relaxes
/// `p[h·n + j] · v_j[col]` with `h = col / d_k`.
pub fn forward_mix(
    probs: &LinearBounds,
    values: &[&LinearBounds],
    heads: usize,
    relax: &[BilinearRelaxation],
) -> Result<LinearBounds> {
    let n = values.len();
    let d = values.first().map(|v| v.rows()).ok_or(Error::EmptyInput)?;
    let dk = d / heads;
    if relax.len() != d * n {
        return Err(shape_err("forward mix", d * n, relax.len()));
    }
    let mut out = LinearBounds::constant(Array1::zeros(d), probs.frame);
    for col in 0..d {
        let h = col / dk;
        for (j, v) in values.iter().enumerate() {
            forward_bilinear(&mut out, col, probs, h * n + j, v, col, &relax[col * n + j]);
        }
    }
    Ok(out)
}

pub fn forward_sum(a: &LinearBounds, b: &LinearBounds) -> LinearBounds {
    LinearBounds {
        lower_coeff: &a.lower_coeff + &b.lower_coeff,
        lower_bias: &a.lower_bias + &b.lower_bias,
        upper_coeff: &a.upper_coeff + &b.upper_coeff,
        upper_bias: &a.upper_bias + &b.upper_bias,
        frame: a.frame,
    }
}

pub fn forward_mean(parts: &[&LinearBounds]) -> Result<LinearBounds> {
    let first = parts.first().ok_or(Error::EmptyInput)?;
    let mut acc = (*first).clone();
    for p in &parts[1..] {
        acc = forward_sum(&acc, p);
    }
    let k = 1.0 / parts.len() as f64;
    Zip::from(&mut acc.lower_coeff).for_each(|v| *v *= k);
    Zip::from(&mut acc.upper_coeff).for_each(|v| *v *= k);
    acc.lower_bias *= k;
    acc.upper_bias *= k;
    Ok(acc)
}

/// Relaxations of `kind` for every neuron of `iv`.
pub fn unary_relaxations(iv: &IntervalBounds, kind: UnaryKind) -> Result<Vec<UnaryRelaxation>> {
    iv.lower
        .iter()
        .zip(iv.upper.iter())
        .map(|(&l, &u)| kind.relax(l, u))
        .collect()
}

/// Softmax over the scores of one query position, built from the same
/// primitives the engine uses: exp, per-head sum, reciprocal, product.
/// Intermediate intervals are concretized with `spec` at `x_r0` and
/// intersected with the known ranges of each quantity. `scores` has
/// `heads · n` rows.
pub fn forward_softmax(
    scores: &LinearBounds,
    heads: usize,
    spec: &PerturbationSpec,
    x_r0: ArrayView1<f64>,
) -> Result<LinearBounds> {
    let width = scores.rows();
    let n = width / heads;
    let mut iv = concretize(scores, spec, x_r0)?;
    let exp = forward_unary(scores, &unary_relaxations(&iv, UnaryKind::Exp)?)?;
    let mut exp_iv = concretize(&exp, spec, x_r0)?;
    exp_iv.clamp_to(0.0, f64::INFINITY);
    let mut sum_w = Array2::zeros((heads, width));
    for h in 0..heads {
        sum_w.slice_mut(s![h, h * n..(h + 1) * n]).fill(1.0);
    }
    let sum = forward_affine(&exp, &sum_w, &Array1::zeros(heads))?;
    iv = concretize(&sum, spec, x_r0)?;
    if iv.lower.iter().any(|&l| l <= 0.0) {
        return Err(Error::DomainViolation {
            op: "softmax",
            detail: format!("sum of exponentials has lower bound {}", iv.lower.fold(f64::INFINITY, |a, b| a.min(*b))),
        });
    }
    let recip = forward_unary(&sum, &unary_relaxations(&iv, UnaryKind::Reciprocal)?)?;
    let recip_iv = concretize(&recip, spec, x_r0)?;
    let index: Vec<usize> = (0..width).map(|j| j / n).collect();
    let relax: Vec<_> = index
        .iter()
        .enumerate()
        .map(|(j, &h)| {
            bound_multiply(exp_iv.lower[j], exp_iv.upper[j], recip_iv.lower[h], recip_iv.upper[h])
        })
        .collect();
    forward_mul(&exp, &recip, &index, &relax)
}
