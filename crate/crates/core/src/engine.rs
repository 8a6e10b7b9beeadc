//! Bounding every node of a [`SublayerProgram`] under a perturbation.
//!
//! Nodes are processed in topological order. Each node's concrete interval
//! is computed once and feeds the relaxations of its consumers. Four
//! strategies are supported:
//!
//! * [`Method::BackwardForward`]: backward substitution for nodes outside
//!   self-attention, forward propagation inside it; backward passes stop at
//!   attention outputs and substitute their forward bounds.
//! * [`Method::FullyBackward`]: backward substitution everywhere, crossing
//!   positions through attention.
//! * [`Method::FullyForward`]: forward propagation everywhere.
//! * [`Method::Ibp`]: interval arithmetic.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::backward::{backprop_affine, backprop_bilinear_term, backprop_unary, BackwardState, Lambda};
use crate::bounds::{concretize, ibp_affine, ibp_elementwise, IntervalBounds, LinearBounds, PerturbationSpec, RefFrame};
use crate::error::{shape_err, Result};
use crate::forward::{
    forward_affine, forward_mean, forward_mix, forward_mul, forward_scores, forward_sum, forward_unary,
    input_bounds, unary_relaxations,
};
use crate::program::{Block, NodeId, Op, SublayerProgram};
use crate::relax::{bound_multiply, BilinearRelaxation, UnaryRelaxation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bf")]
    BackwardForward,
    #[serde(rename = "ff")]
    FullyForward,
    #[serde(rename = "fb")]
    FullyBackward,
    #[serde(rename = "ibp")]
    Ibp,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::BackwardForward,
        Method::FullyForward,
        Method::FullyBackward,
        Method::Ibp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::BackwardForward => "bf",
            Method::FullyForward => "ff",
            Method::FullyBackward => "fb",
            Method::Ibp => "ibp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bf" | "backward-forward" => Ok(Method::BackwardForward),
            "ff" | "fully-forward" => Ok(Method::FullyForward),
            "fb" | "fully-backward" => Ok(Method::FullyBackward),
            "ibp" => Ok(Method::Ibp),
            other => Err(format!("unknown method `{other}` (expected bf, ff, fb or ibp)")),
        }
    }
}

/// Work counters of a bounding run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// `Λ` blocks created by backward passes (one per `(node, position)`
    /// reached, plus the initial identity).
    pub lambda_blocks: u64,
    /// Forward bound matrices `Ω` computed (one per `(node, position)`).
    pub omega_blocks: u64,
    pub backward_passes: u64,
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, o: Self) {
        self.lambda_blocks += o.lambda_blocks;
        self.omega_blocks += o.omega_blocks;
        self.backward_passes += o.backward_passes;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BoundOptions {
    /// Concretize every node rather than only those whose intervals are
    /// needed by relaxations or the output.
    pub all_nodes: bool,
}

#[derive(Debug, Clone, Default)]
enum Relaxations {
    #[default]
    None,
    Unary(Vec<Vec<UnaryRelaxation>>),
    Bilinear(Vec<Vec<BilinearRelaxation>>),
}

/// State of bounding one program on one input and perturbation.
pub struct BoundRun<'a> {
    program: &'a SublayerProgram,
    spec: PerturbationSpec,
    x0: &'a Array2<f64>,
    x_r0: Array1<f64>,
    method: Method,
    frame: RefFrame,
    intervals: Vec<Option<Vec<IntervalBounds>>>,
    forward: Vec<Option<Vec<LinearBounds>>>,
    relax: Vec<Relaxations>,
    needs_interval: Vec<bool>,
    needs_forward: Vec<bool>,
    next: NodeId,
    pub counters: Counters,
}

impl<'a> BoundRun<'a> {
    pub fn new(
        program: &'a SublayerProgram,
        spec: &PerturbationSpec,
        x0: &'a Array2<f64>,
        method: Method,
        options: BoundOptions,
    ) -> Result<Self> {
        if x0.dim() != (program.seq_len, program.d_model) {
            return Err(shape_err("clean embeddings", (program.seq_len, program.d_model), x0.dim()));
        }
        if let Some(&p) = spec.positions().last() {
            if p >= program.seq_len {
                return Err(shape_err("perturbed position", program.seq_len, p));
            }
        }
        let d = program.d_model;
        let mut x_r0 = Array1::zeros(spec.t() * d);
        for (k, &p) in spec.positions().iter().enumerate() {
            x_r0.slice_mut(ndarray::s![k * d..(k + 1) * d]).assign(&x0.row(p));
        }
        let count = program.nodes.len();
        let consumers = program.consumers();
        let out = program.output();
        let mut needs_interval = vec![options.all_nodes; count];
        let mut needs_forward = vec![false; count];
        for (id, node) in program.nodes.iter().enumerate() {
            needs_interval[id] |= id == out
                || consumers[id]
                    .iter()
                    .any(|&c| program.nodes[c].op.is_nonlinear());
            needs_forward[id] = match method {
                Method::FullyForward => true,
                Method::BackwardForward => {
                    matches!(node.block, Block::Attention(_))
                        || consumers[id]
                            .iter()
                            .any(|&c| matches!(program.nodes[c].block, Block::Attention(_)))
                }
                _ => false,
            };
        }
        Ok(Self {
            program,
            spec: spec.clone(),
            x0,
            x_r0,
            method,
            frame: RefFrame::InputPerturbed {
                blocks: spec.t(),
                dim: d,
            },
            intervals: vec![None; count],
            forward: vec![None; count],
            relax: vec![Relaxations::None; count],
            needs_interval,
            needs_forward,
            next: 0,
            counters: Counters::default(),
        })
    }

    /// Bounds every node.
    pub fn run(&mut self) -> Result<()> {
        while self.next < self.program.nodes.len() {
            self.bound_sublayer(self.next)?;
        }
        Ok(())
    }

    /// Bounds node `l`; all earlier nodes must be bounded already.
    pub fn bound_sublayer(&mut self, l: NodeId) -> Result<()> {
        assert_eq!(l, self.next, "nodes are bounded in topological order");
        if self.method != Method::Ibp {
            self.build_relaxations(l)?;
        }
        let node = &self.program.nodes[l];
        let positions = node.positions;
        match self.method {
            Method::Ibp => {
                let iv = (0..positions).map(|p| self.ibp_node(l, p)).collect::<Result<Vec<_>>>()?;
                self.intervals[l] = Some(iv);
            }
            Method::FullyForward => self.forward_node(l)?,
            Method::BackwardForward if matches!(node.block, Block::Attention(_)) => self.forward_node(l)?,
            _ => {
                if self.needs_interval[l] || self.needs_forward[l] {
                    let mut fwd = Vec::with_capacity(positions);
                    let mut ivs = Vec::with_capacity(positions);
                    for p in 0..positions {
                        let lb = self.backward(l, p)?;
                        ivs.push(self.concretize_node(l, &lb)?);
                        if self.needs_forward[l] {
                            fwd.push(lb);
                        }
                    }
                    self.intervals[l] = Some(ivs);
                    if self.needs_forward[l] {
                        self.forward[l] = Some(fwd);
                    }
                }
            }
        }
        self.next += 1;
        Ok(())
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// Concrete bounds of node `l`, one interval per position.
    pub fn intervals(&self, l: NodeId) -> Option<&[IntervalBounds]> {
        self.intervals[l].as_deref()
    }

    /// Forward linear bounds of node `l` at `pos`, if kept.
    pub fn forward_bounds(&self, l: NodeId, pos: usize) -> Option<&LinearBounds> {
        self.forward[l].as_ref().map(|v| &v[pos])
    }

    /// Concrete bounds of the final node.
    pub fn output(&self) -> Option<&IntervalBounds> {
        self.intervals[self.program.output()].as_ref().map(|v| &v[0])
    }

    pub fn x_r0(&self) -> &Array1<f64> {
        &self.x_r0
    }

    fn concretize_node(&self, l: NodeId, lb: &LinearBounds) -> Result<IntervalBounds> {
        let mut iv = concretize(lb, &self.spec, self.x_r0.view())?;
        let (lo, hi) = self.program.nodes[l].range;
        iv.clamp_to(lo, hi);
        Ok(iv)
    }

    fn iv(&self, l: NodeId, pos: usize) -> &IntervalBounds {
        &self.intervals[l].as_ref().expect("source interval computed")[pos]
    }

    fn fwd(&self, l: NodeId, pos: usize) -> &LinearBounds {
        &self.forward[l].as_ref().expect("source forward bounds computed")[pos]
    }

    fn build_relaxations(&mut self, l: NodeId) -> Result<()> {
        let node = &self.program.nodes[l];
        let n = self.program.seq_len;
        self.relax[l] = match &node.op {
            Op::Unary { src, kind } => Relaxations::Unary(
                (0..node.positions)
                    .map(|p| unary_relaxations(self.iv(*src, p), *kind))
                    .collect::<Result<_>>()?,
            ),
            Op::Mul { lhs, rhs, index } => Relaxations::Bilinear(
                (0..node.positions)
                    .map(|p| {
                        let (a, b) = (self.iv(*lhs, p), self.iv(*rhs, p));
                        index
                            .iter()
                            .enumerate()
                            .map(|(j, &k)| bound_multiply(a.lower[j], a.upper[j], b.lower[k], b.upper[k]))
                            .collect()
                    })
                    .collect(),
            ),
            Op::AttnScore {
                query,
                key,
                heads,
                scale,
            } => {
                let dk = self.program.nodes[*query].width / heads;
                Relaxations::Bilinear(
                    (0..n)
                        .map(|i| {
                            let q = self.iv(*query, i);
                            let mut out = Vec::with_capacity(heads * n * dk);
                            for h in 0..*heads {
                                for j in 0..n {
                                    let k = self.iv(*key, j);
                                    for c in h * dk..(h + 1) * dk {
                                        out.push(
                                            bound_multiply(q.lower[c], q.upper[c], k.lower[c], k.upper[c])
                                                .scaled(*scale),
                                        );
                                    }
                                }
                            }
                            out
                        })
                        .collect(),
                )
            }
            Op::AttnMix { probs, value, heads } => {
                let d = self.program.nodes[*value].width;
                let dk = d / heads;
                Relaxations::Bilinear(
                    (0..n)
                        .map(|i| {
                            let pr = self.iv(*probs, i);
                            let mut out = Vec::with_capacity(d * n);
                            for col in 0..d {
                                let h = col / dk;
                                for j in 0..n {
                                    let v = self.iv(*value, j);
                                    let a = h * n + j;
                                    out.push(bound_multiply(pr.lower[a], pr.upper[a], v.lower[col], v.upper[col]));
                                }
                            }
                            out
                        })
                        .collect(),
                )
            }
            _ => Relaxations::None,
        };
        Ok(())
    }

    fn unary_relax(&self, l: NodeId, pos: usize) -> &[UnaryRelaxation] {
        match &self.relax[l] {
            Relaxations::Unary(r) => &r[pos],
            _ => unreachable!("unary relaxations built for node {l}"),
        }
    }

    fn bilinear_relax(&self, l: NodeId, pos: usize) -> &[BilinearRelaxation] {
        match &self.relax[l] {
            Relaxations::Bilinear(r) => &r[pos],
            _ => unreachable!("bilinear relaxations built for node {l}"),
        }
    }

    fn forward_node(&mut self, l: NodeId) -> Result<()> {
        let node = &self.program.nodes[l];
        let n = self.program.seq_len;
        let mut out = Vec::with_capacity(node.positions);
        for p in 0..node.positions {
            let lb = match &node.op {
                Op::Input => input_bounds(self.x0.row(p), self.spec.block_of(p), self.frame)?,
                Op::Affine { src, weight, bias } => forward_affine(self.fwd(*src, p), weight, bias)?,
                Op::Unary { src, .. } => forward_unary(self.fwd(*src, p), self.unary_relax(l, p))?,
                Op::Residual { lhs, rhs } => forward_sum(self.fwd(*lhs, p), self.fwd(*rhs, p)),
                Op::Mul { lhs, rhs, index } => {
                    forward_mul(self.fwd(*lhs, p), self.fwd(*rhs, p), index, self.bilinear_relax(l, p))?
                }
                Op::AttnScore { query, key, heads, .. } => {
                    let keys: Vec<_> = (0..n).map(|j| self.fwd(*key, j)).collect();
                    forward_scores(self.fwd(*query, p), &keys, *heads, self.bilinear_relax(l, p))?
                }
                Op::AttnMix { probs, value, heads } => {
                    let values: Vec<_> = (0..n).map(|j| self.fwd(*value, j)).collect();
                    forward_mix(self.fwd(*probs, p), &values, *heads, self.bilinear_relax(l, p))?
                }
                Op::MeanPool { src } => {
                    let parts: Vec<_> = (0..n).map(|j| self.fwd(*src, j)).collect();
                    forward_mean(&parts)?
                }
            };
            out.push(lb);
        }
        self.counters.omega_blocks += out.len() as u64;
        if self.needs_interval[l] || self.method == Method::FullyForward {
            let ivs = out
                .iter()
                .map(|lb| self.concretize_node(l, lb))
                .collect::<Result<Vec<_>>>()?;
            self.intervals[l] = Some(ivs);
        }
        self.forward[l] = Some(out);
        Ok(())
    }

    /// Backward substitution from `(l, pos)` down to the perturbed inputs.
    fn backward(&mut self, l: NodeId, pos: usize) -> Result<LinearBounds> {
        let prog = self.program;
        let n = prog.seq_len;
        let mut st = BackwardState::init_identity(l, pos, prog.nodes[l].width, self.frame);
        let rows = st.rows();
        while let Some(((id, p), lam)) = st.pop() {
            let node = &prog.nodes[id];
            if self.method == Method::BackwardForward && matches!(node.block, Block::Attention(_)) {
                st.absorb_forward(&lam, self.fwd(id, p))?;
                continue;
            }
            match &node.op {
                Op::Input => st.absorb_input(&lam, self.spec.block_of(p), self.x0.row(p)),
                Op::Affine { src, weight, bias } => {
                    let (next, db) = backprop_affine(&lam, weight, bias)?;
                    st.add_bias(&db);
                    st.push(*src, p, next);
                }
                Op::Unary { src, .. } => {
                    let (next, db) = backprop_unary(&lam, self.unary_relax(id, p))?;
                    st.add_bias(&db);
                    st.push(*src, p, next);
                }
                Op::Residual { lhs, rhs } => {
                    st.push(*lhs, p, lam.clone());
                    st.push(*rhs, p, lam);
                }
                Op::Mul { lhs, rhs, index } => {
                    let relax = self.bilinear_relax(id, p);
                    let mut a = Lambda::zeros(rows, prog.nodes[*lhs].width);
                    let mut b = Lambda::zeros(rows, prog.nodes[*rhs].width);
                    let mut bias = (Array1::zeros(rows), Array1::zeros(rows));
                    for (j, (&k, r)) in index.iter().zip(relax).enumerate() {
                        backprop_bilinear_term(&lam, j, r, &mut a, j, &mut b, k, &mut bias);
                    }
                    st.add_bias(&bias);
                    st.push(*lhs, p, a);
                    st.push(*rhs, p, b);
                }
                Op::AttnScore { query, key, heads, .. } => {
                    let relax = self.bilinear_relax(id, p);
                    let d = prog.nodes[*query].width;
                    let dk = d / heads;
                    let mut q = Lambda::zeros(rows, d);
                    let mut ks: Vec<Lambda> = (0..n).map(|_| Lambda::zeros(rows, d)).collect();
                    let mut bias = (Array1::zeros(rows), Array1::zeros(rows));
                    for h in 0..*heads {
                        for (j, kj) in ks.iter_mut().enumerate() {
                            let col = h * n + j;
                            for c in 0..dk {
                                let e = h * dk + c;
                                backprop_bilinear_term(&lam, col, &relax[col * dk + c], &mut q, e, kj, e, &mut bias);
                            }
                        }
                    }
                    st.add_bias(&bias);
                    st.push(*query, p, q);
                    for (j, kj) in ks.into_iter().enumerate() {
                        st.push(*key, j, kj);
                    }
                }
                Op::AttnMix { probs, value, heads } => {
                    let relax = self.bilinear_relax(id, p);
                    let d = prog.nodes[*value].width;
                    let dk = d / heads;
                    let mut pr = Lambda::zeros(rows, prog.nodes[*probs].width);
                    let mut vs: Vec<Lambda> = (0..n).map(|_| Lambda::zeros(rows, d)).collect();
                    let mut bias = (Array1::zeros(rows), Array1::zeros(rows));
                    for col in 0..d {
                        let h = col / dk;
                        for (j, vj) in vs.iter_mut().enumerate() {
                            backprop_bilinear_term(&lam, col, &relax[col * n + j], &mut pr, h * n + j, vj, col, &mut bias);
                        }
                    }
                    st.add_bias(&bias);
                    st.push(*probs, p, pr);
                    for (j, vj) in vs.into_iter().enumerate() {
                        st.push(*value, j, vj);
                    }
                }
                Op::MeanPool { src } => {
                    let k = 1.0 / n as f64;
                    for j in 0..n {
                        st.push(
                            *src,
                            j,
                            Lambda {
                                lower: &lam.lower * k,
                                upper: &lam.upper * k,
                            },
                        );
                    }
                }
            }
        }
        self.counters.lambda_blocks += st.materialized;
        self.counters.backward_passes += 1;
        Ok(st.finish())
    }

    fn ibp_node(&self, l: NodeId, p: usize) -> Result<IntervalBounds> {
        let node = &self.program.nodes[l];
        let n = self.program.seq_len;
        let mut iv = match &node.op {
            Op::Input => {
                let x = self.x0.row(p).to_owned();
                match self.spec.block_of(p) {
                    // every ℓp ball lies inside the ℓ∞ ball of the same radius
                    Some(_) => {
                        let e = self.spec.epsilon();
                        IntervalBounds::from_unordered(x.mapv(|v| v - e), x.mapv(|v| v + e))
                    }
                    None => IntervalBounds::point(x),
                }
            }
            Op::Affine { src, weight, bias } => ibp_affine(self.iv(*src, p), weight, bias)?,
            Op::Unary { src, kind } => ibp_elementwise(self.iv(*src, p), *kind)?,
            Op::Residual { lhs, rhs } => {
                let (a, b) = (self.iv(*lhs, p), self.iv(*rhs, p));
                IntervalBounds::from_unordered(&a.lower + &b.lower, &a.upper + &b.upper)
            }
            Op::Mul { lhs, rhs, index } => {
                let (a, b) = (self.iv(*lhs, p), self.iv(*rhs, p));
                let (lo, hi): (Vec<f64>, Vec<f64>) = index
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| interval_product(a.lower[j], a.upper[j], b.lower[k], b.upper[k]))
                    .unzip();
                IntervalBounds::from_unordered(Array1::from(lo), Array1::from(hi))
            }
            Op::AttnScore {
                query,
                key,
                heads,
                scale,
            } => {
                let q = self.iv(*query, p);
                let dk = q.len() / heads;
                let mut lo = Array1::zeros(heads * n);
                let mut hi = Array1::zeros(heads * n);
                for h in 0..*heads {
                    for j in 0..n {
                        let k = self.iv(*key, j);
                        for c in h * dk..(h + 1) * dk {
                            let (a, b) = interval_product(q.lower[c], q.upper[c], k.lower[c], k.upper[c]);
                            lo[h * n + j] += scale * a;
                            hi[h * n + j] += scale * b;
                        }
                    }
                }
                IntervalBounds::from_unordered(lo, hi)
            }
            Op::AttnMix { probs, value, heads } => {
                let pr = self.iv(*probs, p);
                let d = node.width;
                let dk = d / heads;
                let mut lo = Array1::zeros(d);
                let mut hi = Array1::zeros(d);
                for col in 0..d {
                    for j in 0..n {
                        let v = self.iv(*value, j);
                        let a = (col / dk) * n + j;
                        let (x, y) = interval_product(pr.lower[a], pr.upper[a], v.lower[col], v.upper[col]);
                        lo[col] += x;
                        hi[col] += y;
                    }
                }
                IntervalBounds::from_unordered(lo, hi)
            }
            Op::MeanPool { src } => {
                let mut lo = Array1::zeros(node.width);
                let mut hi = Array1::zeros(node.width);
                for j in 0..n {
                    lo += &self.iv(*src, j).lower;
                    hi += &self.iv(*src, j).upper;
                }
                IntervalBounds::from_unordered(lo / n as f64, hi / n as f64)
            }
        };
        if !iv.is_finite() {
            return Err(crate::error::Error::NonFinite(format!("interval of {}", node.label)));
        }
        iv.clamp_to(node.range.0, node.range.1);
        Ok(iv)
    }
}

fn interval_product(lx: f64, ux: f64, ly: f64, uy: f64) -> (f64, f64) {
    let c = [lx * ly, lx * uy, ux * ly, ux * uy];
    (
        c.iter().copied().fold(f64::INFINITY, f64::min),
        c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}

/// Bounds every node of `program` and returns the run.
pub fn bound_program<'a>(
    program: &'a SublayerProgram,
    spec: &PerturbationSpec,
    x0: &'a Array2<f64>,
    method: Method,
    options: BoundOptions,
) -> Result<BoundRun<'a>> {
    let mut run = BoundRun::new(program, spec, x0, method, options)?;
    run.run()?;
    Ok(run)
}
