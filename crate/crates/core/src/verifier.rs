//! Certification drivers: margin lower bounds, certified radii by binary
//! search, position-set enumeration, substitution upper bounds, word
//! importance and method comparisons.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{Norm, PerturbationSpec};
use crate::engine::{BoundOptions, BoundRun, Counters, Method};
use crate::error::{Error, Result};
use crate::model::{argmax, input_gradients, margin, TransformerModel, GRADIENT_STEP};
use crate::program::SublayerProgram;

/// Binary search settings for [`certify_epsilon`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub eps_max: f64,
    /// Stop once `(hi - lo) / hi` drops below this.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            eps_max: 10.0,
            rel_tol: 1e-3,
            max_iter: 30,
        }
    }
}

/// A clean input prepared for verification: its embeddings, predicted
/// class and the compiled margin program.
#[derive(Debug, Clone)]
pub struct Instance<'m> {
    pub model: &'m TransformerModel,
    pub ids: Vec<usize>,
    pub x0: Array2<f64>,
    pub label: usize,
    pub clean_margin: f64,
    program: SublayerProgram,
}

impl<'m> Instance<'m> {
    /// Fails with [`Error::Misclassified`] when `expected` is given and the
    /// model predicts another class.
    pub fn new(model: &'m TransformerModel, ids: &[usize], expected: Option<usize>) -> Result<Self> {
        let x0 = model.embed_tokens(ids)?;
        let logits = model.logits_from_embeddings(&x0);
        let predicted = argmax(logits.view());
        if let Some(e) = expected {
            if e != predicted {
                return Err(Error::Misclassified {
                    predicted,
                    expected: e,
                });
            }
        }
        let program = SublayerProgram::compile(model, ids.len())?.with_margin_head(predicted)?;
        Ok(Self {
            model,
            ids: ids.to_vec(),
            x0,
            label: predicted,
            clean_margin: margin(logits.view(), predicted),
            program,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    pub fn program(&self) -> &SublayerProgram {
        &self.program
    }

    /// Lower bound on `min_{y≠c} (y_c − y_y)` over the perturbation set.
    pub fn delta_lower(&self, spec: &PerturbationSpec, method: Method) -> Result<(f64, Counters)> {
        let mut run = BoundRun::new(&self.program, spec, &self.x0, method, BoundOptions::default())?;
        run.run()?;
        let out = run.output().expect("output is always bounded");
        let delta = out.lower.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((delta, run.counters))
    }

    /// Like [`Self::delta_lower`] but numerical breakdowns of the
    /// relaxations at large radii (overflowing exponentials, vanishing
    /// softmax denominators, infinite intervals) count as "not certified".
    fn delta_or_fail(&self, spec: &PerturbationSpec, method: Method, counters: &mut Counters) -> Result<f64> {
        match self.delta_lower(spec, method) {
            Ok((d, c)) => {
                *counters += c;
                Ok(d)
            }
            Err(Error::RangeOverflow(_) | Error::NonFinite(_) | Error::DomainViolation { .. }) => {
                log::debug!("bounds broke down at eps {}", spec.epsilon());
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        }
    }

    /// Largest radius in `[0, eps_max]` with a positive margin bound.
    pub fn certify(&self, positions: &[usize], norm: Norm, method: Method, cfg: &SearchConfig) -> Result<Certificate> {
        let start = Instant::now();
        if !(cfg.eps_max > 0.0) || !cfg.eps_max.is_finite() {
            return Err(Error::InvalidPerturbation(format!("eps_max {}", cfg.eps_max)));
        }
        let spec = PerturbationSpec::new(norm, cfg.eps_max, positions.to_vec(), self.seq_len())?;
        let mut counters = Counters::default();
        let mut evaluations = 0;
        let (mut lo, mut hi) = (0.0, cfg.eps_max);
        let mut delta_lo = self.clean_margin;
        if self.clean_margin > 0.0 {
            evaluations += 1;
            let d = self.delta_or_fail(&spec, method, &mut counters)?;
            if d > 0.0 {
                lo = cfg.eps_max;
                delta_lo = d;
            } else {
                for _ in 0..cfg.max_iter {
                    if lo > 0.0 && (hi - lo) / hi < cfg.rel_tol {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    evaluations += 1;
                    let d = self.delta_or_fail(&spec.with_epsilon(mid), method, &mut counters)?;
                    if d > 0.0 {
                        lo = mid;
                        delta_lo = d;
                    } else {
                        hi = mid;
                    }
                }
            }
        }
        Ok(Certificate {
            positions: positions.to_vec(),
            epsilon: lo,
            delta_lower: delta_lo,
            evaluations,
            counters,
            elapsed: start.elapsed(),
        })
    }
}

/// Result of a binary search for one position set.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// 0-based perturbed positions.
    pub positions: Vec<usize>,
    pub epsilon: f64,
    /// Margin bound at `epsilon` (the clean margin when `epsilon` is 0).
    pub delta_lower: f64,
    pub evaluations: usize,
    pub counters: Counters,
    pub elapsed: Duration,
}

/// `δ^L_ε` for `ids` under `spec`, for the class the model predicts.
pub fn delta_lower(model: &TransformerModel, ids: &[usize], spec: &PerturbationSpec, method: Method) -> Result<f64> {
    Ok(Instance::new(model, ids, None)?.delta_lower(spec, method)?.0)
}

pub fn certify_epsilon(
    model: &TransformerModel,
    ids: &[usize],
    positions: &[usize],
    norm: Norm,
    method: Method,
    cfg: &SearchConfig,
) -> Result<Certificate> {
    Instance::new(model, ids, None)?.certify(positions, norm, method, cfg)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionSets {
    /// 0-based, each strictly increasing, in lexicographic order.
    pub sets: Vec<Vec<usize>>,
    pub truncated: bool,
}

pub const DEFAULT_MAX_SETS: usize = 128;

/// The first `max_sets` of the `t`-subsets of `0..n` in lexicographic order.
pub fn enumerate_position_sets(n: usize, t: usize, max_sets: usize) -> PositionSets {
    let mut sets = Vec::new();
    if t == 0 || t > n {
        return PositionSets { sets, truncated: false };
    }
    let mut cur: Vec<usize> = (0..t).collect();
    loop {
        if sets.len() == max_sets {
            return PositionSets { sets, truncated: true };
        }
        sets.push(cur.clone());
        // advance the rightmost index that can still move
        let Some(i) = (0..t).rev().find(|&i| cur[i] < n - t + i) else {
            return PositionSets { sets, truncated: false };
        };
        cur[i] += 1;
        for j in i + 1..t {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Smallest `‖embed(w) − embed(ids[pos])‖_p` over vocabulary words `w`
/// whose substitution at `pos` changes the prediction; `∞` if none does.
pub fn upper_bound_substitution(model: &TransformerModel, ids: &[usize], pos: usize, norm: Norm) -> Result<f64> {
    let label = model.predict(ids)?;
    if pos >= ids.len() {
        return Err(Error::InvalidPerturbation(format!("position {} beyond length {}", pos + 1, ids.len())));
    }
    let orig = model.embed.row(ids[pos]);
    let mut x = model.embed_tokens(ids)?;
    let pe = model.pos_enc.row(pos).to_owned();
    let mut best = f64::INFINITY;
    for w in 0..model.hyper.vocab_size {
        if w == ids[pos] {
            continue;
        }
        let row = model.embed.row(w);
        let dist = norm.of((&row - &orig).view());
        if dist >= best {
            continue;
        }
        x.row_mut(pos).assign(&(&row + &pe));
        if argmax(model.logits_from_embeddings(&x).view()) != label {
            best = dist;
        }
    }
    Ok(best)
}

/// Per-position importance under three criteria. Orders list 0-based
/// positions from most to least important.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceRanking {
    /// Certified radius for perturbing only that position, divided by the
    /// ℓ2 norm of the word's embedding.
    pub scores: Vec<f64>,
    pub certified: Vec<f64>,
    pub upper_bounds: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    /// Ascending normalized certified radius.
    pub ours: Vec<usize>,
    /// Ascending substitution upper bound.
    pub upper: Vec<usize>,
    /// Descending gradient norm.
    pub gradient: Vec<usize>,
}

fn order_by(values: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = values[a].total_cmp(&values[b]);
        (if descending { ord.reverse() } else { ord }).then(a.cmp(&b))
    });
    idx
}

pub fn importance_ranking(
    model: &TransformerModel,
    ids: &[usize],
    norm: Norm,
    method: Method,
    cfg: &SearchConfig,
) -> Result<ImportanceRanking> {
    let inst = Instance::new(model, ids, None)?;
    let n = ids.len();
    let certified: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| inst.certify(&[i], norm, method, cfg).map(|c| c.epsilon))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = certified
        .iter()
        .zip(ids)
        .map(|(e, &id)| {
            let row = model.embed.row(id);
            let w = row.dot(&row).sqrt();
            if w > 0.0 { e / w } else { *e }
        })
        .collect();
    let upper_bounds: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| upper_bound_substitution(model, ids, i, norm))
        .collect::<Result<_>>()?;
    let logits = model.logits_from_embeddings(&inst.x0);
    let runner_up = (0..logits.len())
        .filter(|&y| y != inst.label)
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .expect("at least two classes");
    let gradient_norms = input_gradients(model, ids, inst.label, runner_up, GRADIENT_STEP)?;
    Ok(ImportanceRanking {
        ours: order_by(&scores, false),
        upper: order_by(&upper_bounds, false),
        gradient: order_by(&gradient_norms, true),
        scores,
        certified,
        upper_bounds,
        gradient_norms,
    })
}

/// Certificates of one method over several position sets.
#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: Method,
    pub certificates: Vec<Certificate>,
    pub min: f64,
    pub avg: f64,
    pub counters: Counters,
    pub elapsed: Duration,
}

/// Certifies every position set with `method`, in parallel across sets.
pub fn certify_sets(
    inst: &Instance<'_>,
    sets: &[Vec<usize>],
    norm: Norm,
    method: Method,
    cfg: &SearchConfig,
) -> Result<MethodSummary> {
    let start = Instant::now();
    let certificates: Vec<Certificate> = sets
        .par_iter()
        .map(|s| inst.certify(s, norm, method, cfg))
        .collect::<Result<_>>()?;
    let eps: Vec<f64> = certificates.iter().map(|c| c.epsilon).collect();
    let min = eps.iter().copied().fold(f64::INFINITY, f64::min);
    let avg = eps.iter().sum::<f64>() / eps.len().max(1) as f64;
    let mut counters = Counters::default();
    for c in &certificates {
        counters += c.counters;
    }
    Ok(MethodSummary {
        method,
        certificates,
        min: if eps.is_empty() { 0.0 } else { min },
        avg,
        counters,
        elapsed: start.elapsed(),
    })
}

/// Per instance and norm: the three propagation strategies side by side on
/// the same position sets.
#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub instance: usize,
    pub norm: Norm,
    pub methods: Vec<MethodSummary>,
}

pub const ABLATION_METHODS: [Method; 3] = [Method::FullyForward, Method::FullyBackward, Method::BackwardForward];

pub fn run_ablation(
    instances: &[Instance<'_>],
    norms: &[Norm],
    t: usize,
    max_sets: usize,
    cfg: &SearchConfig,
) -> Result<Vec<AblationEntry>> {
    let mut out = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let sets = enumerate_position_sets(inst.seq_len(), t, max_sets).sets;
        for &norm in norms {
            let methods = ABLATION_METHODS
                .iter()
                .map(|&m| certify_sets(inst, &sets, norm, m, cfg))
                .collect::<Result<_>>()?;
            out.push(AblationEntry {
                instance: i,
                norm,
                methods,
            });
        }
    }
    Ok(out)
}
