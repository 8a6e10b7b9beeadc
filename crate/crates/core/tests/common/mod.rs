//! Sampling oracles shared by the integration tests: uniform draws from
//! ℓp balls, boundary and extreme-point probes, and a finite-difference
//! attack on the classification margin.

#![allow(dead_code)]

use certiformer::model::margin;
use certiformer::{Norm, TransformerModel};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub const SLACK: f64 = 1e-6;

/// Uniform sample from the `norm` ball of radius `eps` in `dim` dimensions.
pub fn sample_ball(rng: &mut ChaCha8Rng, norm: Norm, dim: usize, eps: f64) -> Array1<f64> {
    match norm {
        Norm::Linf => Array1::from_shape_simple_fn(dim, || rng.random_range(-eps..=eps)),
        Norm::L2 => {
            let g: Array1<f64> = Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng));
            let r = eps * rng.random::<f64>().powf(1.0 / dim as f64);
            let n = g.dot(&g).sqrt();
            g * (r / n)
        }
        Norm::L1 => {
            // Normalised exponentials with one slack coordinate are uniform
            // on the simplex interior; random signs fill the cross-polytope.
            let e: Vec<f64> = (0..=dim).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = e.iter().sum();
            Array1::from_shape_fn(dim, |i| {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                s * eps * e[i] / total
            })
        }
    }
}

/// A point on the sphere of radius `eps`.
pub fn sample_sphere(rng: &mut ChaCha8Rng, norm: Norm, dim: usize, eps: f64) -> Array1<f64> {
    let mut v = sample_ball(rng, norm, dim, eps);
    while norm.of(v.view()) == 0.0 {
        v = sample_ball(rng, norm, dim, eps);
    }
    let s = eps / norm.of(v.view());
    v * s
}

/// Vertices of the ball (signed axis points for ℓ1 and ℓ2, random
/// corners for ℓ∞).
pub fn extreme_points(rng: &mut ChaCha8Rng, norm: Norm, dim: usize, eps: f64) -> Vec<Array1<f64>> {
    match norm {
        Norm::Linf => (0..2 * dim)
            .map(|_| Array1::from_shape_simple_fn(dim, || if rng.random::<bool>() { eps } else { -eps }))
            .collect(),
        Norm::L1 | Norm::L2 => (0..dim)
            .flat_map(|j| {
                [eps, -eps].map(|s| {
                    let mut v = Array1::zeros(dim);
                    v[j] = s;
                    v
                })
            })
            .collect(),
    }
}

/// Adds per-position perturbations (concatenated in `positions` order).
pub fn perturb(x0: &Array2<f64>, positions: &[usize], delta: &[Array1<f64>]) -> Array2<f64> {
    let mut x = x0.clone();
    for (&p, d) in positions.iter().zip(delta) {
        let mut row = x.row_mut(p);
        row += d;
    }
    x
}

pub fn margin_at(model: &TransformerModel, x: &Array2<f64>, label: usize) -> f64 {
    margin(model.logits_from_embeddings(x).view(), label)
}

/// Euclidean projection onto the ℓ1 ball of radius `eps`.
fn project_l1(v: &Array1<f64>, eps: f64) -> Array1<f64> {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= eps {
        return v.clone();
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let (mut cum, mut theta) = (0.0, 0.0);
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - eps) / (i + 1) as f64;
        if ui > t {
            theta = t;
        }
    }
    v.mapv(|x| x.signum() * (x.abs() - theta).max(0.0))
}

pub fn project(norm: Norm, v: &Array1<f64>, eps: f64) -> Array1<f64> {
    match norm {
        Norm::Linf => v.mapv(|x| x.clamp(-eps, eps)),
        Norm::L2 => {
            let n = v.dot(v).sqrt();
            if n > eps { v * (eps / n) } else { v.clone() }
        }
        Norm::L1 => project_l1(v, eps),
    }
}

/// Steepest-descent direction of unit `norm` for a gradient `g`.
fn descent(norm: Norm, g: &Array1<f64>) -> Array1<f64> {
    match norm {
        Norm::Linf => g.mapv(|x| -x.signum()),
        Norm::L2 => {
            let n = g.dot(g).sqrt().max(1e-300);
            g * (-1.0 / n)
        }
        Norm::L1 => {
            let j = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
            let mut d = Array1::zeros(g.len());
            d[j] = -g[j].signum();
            d
        }
    }
}

/// Projected finite-difference descent on the margin; returns the lowest
/// margin found inside the ball.
pub fn attack(
    model: &TransformerModel,
    x0: &Array2<f64>,
    label: usize,
    positions: &[usize],
    norm: Norm,
    eps: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let d = x0.ncols();
    let h = 1e-5;
    let mut delta: Vec<Array1<f64>> = positions.iter().map(|_| sample_ball(rng, norm, d, eps)).collect();
    let mut best = margin_at(model, &perturb(x0, positions, &delta), label);
    for step in 0..steps {
        let size = eps * 0.5 / (1.0 + step as f64).sqrt();
        for k in 0..positions.len() {
            let base = perturb(x0, positions, &delta);
            let mut g = Array1::zeros(d);
            for j in 0..d {
                let mut xp = base.clone();
                xp[[positions[k], j]] += h;
                let mut xm = base.clone();
                xm[[positions[k], j]] -= h;
                g[j] = (margin_at(model, &xp, label) - margin_at(model, &xm, label)) / (2.0 * h);
            }
            delta[k] = project(norm, &(&delta[k] + &(descent(norm, &g) * size)), eps);
        }
        best = best.min(margin_at(model, &perturb(x0, positions, &delta), label));
    }
    best
}

/// Checks `margin ≥ delta_lower − SLACK` on uniform samples, sphere
/// samples, extreme points and an attack. Returns the number of violations
/// and the worst margin seen.
pub fn probe_certificate(
    model: &TransformerModel,
    x0: &Array2<f64>,
    label: usize,
    positions: &[usize],
    norm: Norm,
    eps: f64,
    delta_lower: f64,
    samples: usize,
    attack_steps: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, f64) {
    let d = x0.ncols();
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut check = |m: f64| {
        worst = worst.min(m);
        if m < delta_lower - SLACK {
            violations += 1;
        }
    };
    for s in 0..samples {
        let delta: Vec<Array1<f64>> = positions
            .iter()
            .map(|_| {
                if s % 10 == 0 {
                    sample_sphere(rng, norm, d, eps)
                } else {
                    sample_ball(rng, norm, d, eps)
                }
            })
            .collect();
        check(margin_at(model, &perturb(x0, positions, &delta), label));
    }
    for (k, _) in positions.iter().enumerate() {
        for v in extreme_points(rng, norm, d, eps) {
            let mut delta: Vec<Array1<f64>> = positions.iter().map(|_| Array1::zeros(d)).collect();
            delta[k] = v;
            check(margin_at(model, &perturb(x0, positions, &delta), label));
        }
    }
    if attack_steps > 0 {
        check(attack(model, x0, label, positions, norm, eps, attack_steps, rng));
    }
    (violations, worst)
}

/// `k` evenly spaced points from `l` to `u`.
pub fn grid(l: f64, u: f64, k: usize) -> impl Iterator<Item = f64> + Clone {
    (0..k).map(move |i| if k == 1 { l } else { l + (u - l) * i as f64 / (k - 1) as f64 })
}

/// Grid points of `[l, u]` where the relaxation of `kind` fails to
/// sandwich the function by more than `slack`.
pub fn unary_violations(kind: certiformer::relax::UnaryKind, l: f64, u: f64, k: usize, slack: f64) -> usize {
    let r = kind.relax(l, u).expect("relaxation exists on the sampled interval");
    grid(l, u, k)
        .filter(|&x| {
            let f = kind.apply(x);
            let tol = slack * (1.0 + f.abs());
            r.lower(x) > f + tol || r.upper(x) < f - tol
        })
        .count()
}

/// Grid points of a box where `planes` fail to sandwich `f`.
pub fn plane_violations(
    planes: &certiformer::relax::BilinearRelaxation,
    f: impl Fn(f64, f64) -> f64,
    (lx, ux, ly, uy): (f64, f64, f64, f64),
    k: usize,
    slack: f64,
) -> usize {
    let mut bad = 0;
    for x in grid(lx, ux, k) {
        for y in grid(ly, uy, k) {
            let z = f(x, y);
            let tol = slack * (1.0 + z.abs());
            if planes.lower(x, y) > z + tol || planes.upper(x, y) < z - tol {
                bad += 1;
            }
        }
    }
    bad
}

/// Mean gap between `x·y` and a valid plane, per unit area. For a plane
/// `αx + βy + γ` the gap is affine in γ, so the tightest valid γ touches
/// the box at a corner.
pub fn product_gap(alpha: f64, beta: f64, (lx, ux, ly, uy): (f64, f64, f64, f64), lower: bool) -> f64 {
    let corners = [(lx, ly), (lx, uy), (ux, ly), (ux, uy)];
    let resid = corners.map(|(x, y)| x * y - alpha * x - beta * y);
    let (cx, cy) = (0.5 * (lx + ux), 0.5 * (ly + uy));
    let mean_xy = cx * cy;
    if lower {
        let gamma = resid.iter().copied().fold(f64::INFINITY, f64::min);
        mean_xy - alpha * cx - beta * cy - gamma
    } else {
        let gamma = resid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        alpha * cx + beta * cy + gamma - mean_xy
    }
}

/// Smallest gap of corner-anchored planes over a 0.05 grid of slopes
/// spanning the box's coordinate ranges with a margin of one unit.
pub fn brute_force_product_gap(b: (f64, f64, f64, f64), lower: bool) -> f64 {
    let (lx, ux, ly, uy) = b;
    let steps = |l: f64, u: f64| {
        let lo = (l - 1.0) / 0.05;
        let hi = (u + 1.0) / 0.05;
        (lo.floor() as i64..=hi.ceil() as i64).map(|k| k as f64 * 0.05).collect::<Vec<_>>()
    };
    let (alphas, betas) = (steps(ly, uy), steps(lx, ux));
    let mut best = f64::INFINITY;
    for &a in &alphas {
        for &c in &betas {
            best = best.min(product_gap(a, c, b, lower));
        }
    }
    best
}
