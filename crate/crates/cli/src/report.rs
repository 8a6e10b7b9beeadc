//! Report documents. JSON is canonical; tables are rendered from the same
//! structures. Positions are 1-based; non-finite numbers serialize as
//! `null`; times appear only when requested.

use std::fmt::Write;

use certiformer::{Counters, Method, Norm};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Settings {
    pub model_checksum: String,
    pub method: Option<Method>,
    pub norms: Vec<Norm>,
    pub t: usize,
    pub eps_max: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub max_sets: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct InputInfo {
    pub index: usize,
    pub text: String,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub predicted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected: Option<usize>,
    pub misclassified: bool,
    pub clean_margin: f64,
}

#[derive(Debug, Serialize)]
pub struct Probe {
    pub epsilon: f64,
    pub delta_lower: f64,
}

#[derive(Debug, Serialize)]
pub struct SetResult {
    pub positions: Vec<usize>,
    pub certified_epsilon: f64,
    pub delta_lower: f64,
    pub evaluations: usize,
    pub counters: Counters,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<Probe>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_s: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct CertifiedInput {
    #[serde(flatten)]
    pub input: InputInfo,
    pub truncated: bool,
    pub position_sets: Vec<SetResult>,
    pub min: Option<f64>,
    pub avg: Option<f64>,
}

/// Means over correctly classified inputs of the per-input Min and Avg.
#[derive(Debug, Serialize)]
pub struct Aggregate {
    pub inputs: usize,
    pub misclassified: usize,
    pub min: Option<f64>,
    pub avg: Option<f64>,
}

impl Aggregate {
    pub fn of(per_input: &[(Option<f64>, Option<f64>)], misclassified: usize) -> Self {
        let mins: Vec<f64> = per_input.iter().filter_map(|p| p.0).collect();
        let avgs: Vec<f64> = per_input.iter().filter_map(|p| p.1).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Self {
            inputs: per_input.len(),
            misclassified,
            min: mean(&mins),
            avg: mean(&avgs),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CertifyReport {
    pub command: &'static str,
    pub settings: Settings,
    pub inputs: Vec<CertifiedInput>,
    pub summary: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_s: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct WordScore {
    pub position: usize,
    pub token: String,
    pub score: f64,
    pub certified_epsilon: f64,
    pub upper_bound: f64,
    pub gradient_norm: f64,
}

/// Positions from most to least important under each criterion.
#[derive(Debug, Serialize)]
pub struct Rankings {
    pub ours: Vec<usize>,
    pub upper: Vec<usize>,
    pub gradient: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct RankedInput {
    #[serde(flatten)]
    pub input: InputInfo,
    pub words: Vec<WordScore>,
    pub rankings: Option<Rankings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_s: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ImportanceReport {
    pub command: &'static str,
    pub settings: Settings,
    pub inputs: Vec<RankedInput>,
}

#[derive(Debug, Serialize)]
pub struct MethodResult {
    pub method: Method,
    pub min: f64,
    pub avg: f64,
    pub counters: Counters,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_s: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct NormResult {
    pub norm: Norm,
    pub methods: Vec<MethodResult>,
}

#[derive(Debug, Serialize)]
pub struct AblatedInput {
    #[serde(flatten)]
    pub input: InputInfo,
    pub truncated: bool,
    pub norms: Vec<NormResult>,
}

#[derive(Debug, Serialize)]
pub struct AblateReport {
    pub command: &'static str,
    pub settings: Settings,
    pub inputs: Vec<AblatedInput>,
    /// Per norm and method: means over inputs, summed counters and times.
    pub summary: Vec<NormResult>,
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "-".into()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "-".into())
}

fn positions(p: &[usize]) -> String {
    p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Left-aligned text table with columns padded to their widest cell.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<String>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.iter().map(|h| h.to_string()).collect());
    for r in rows {
        line(r.clone());
    }
    out
}

fn text_cell(i: &InputInfo) -> String {
    if i.misclassified {
        format!("{} (misclassified)", i.text)
    } else {
        i.text.clone()
    }
}

impl CertifyReport {
    pub fn to_table(&self) -> String {
        let mut rows = Vec::new();
        for inp in &self.inputs {
            for s in &inp.position_sets {
                rows.push(vec![
                    inp.input.index.to_string(),
                    positions(&s.positions),
                    num(s.certified_epsilon),
                    num(s.delta_lower),
                ]);
            }
            rows.push(vec![
                inp.input.index.to_string(),
                "Min / Avg".into(),
                opt(inp.min),
                opt(inp.avg),
            ]);
        }
        let mut out = format!(
            "method {}  p {}  t {}\n",
            self.settings.method.map(|m| m.as_str()).unwrap_or("-"),
            norm_list(&self.settings.norms),
            self.settings.t
        );
        for inp in &self.inputs {
            let _ = writeln!(out, "[{}] {}", inp.input.index, text_cell(&inp.input));
        }
        out += &table(&["input", "positions", "certified_eps", "delta_lower"], &rows);
        let _ = writeln!(
            out,
            "overall  Min {}  Avg {}  ({} inputs, {} misclassified)",
            opt(self.summary.min),
            opt(self.summary.avg),
            self.summary.inputs,
            self.summary.misclassified
        );
        out
    }
}

fn norm_list(norms: &[Norm]) -> String {
    norms.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(",")
}

impl ImportanceReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for inp in &self.inputs {
            let _ = writeln!(out, "[{}] {}", inp.input.index, text_cell(&inp.input));
            let rows: Vec<Vec<String>> = inp
                .words
                .iter()
                .map(|w| {
                    vec![
                        w.position.to_string(),
                        w.token.clone(),
                        num(w.score),
                        num(w.certified_epsilon),
                        num(w.upper_bound),
                        num(w.gradient_norm),
                    ]
                })
                .collect();
            out += &table(&["pos", "token", "score", "certified_eps", "upper_bound", "gradient"], &rows);
            if let Some(r) = &inp.rankings {
                let words = |order: &[usize]| {
                    order
                        .iter()
                        .map(|&p| inp.words[p - 1].token.clone())
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                let _ = writeln!(out, "ours:     {}", words(&r.ours));
                let _ = writeln!(out, "upper:    {}", words(&r.upper));
                let _ = writeln!(out, "gradient: {}", words(&r.gradient));
            }
        }
        out
    }
}

impl AblateReport {
    pub fn to_table(&self) -> String {
        let mut rows = Vec::new();
        for nr in &self.summary {
            for m in &nr.methods {
                rows.push(vec![
                    nr.norm.as_str().to_string(),
                    m.method.as_str().to_string(),
                    num(m.min),
                    num(m.avg),
                    m.time_s.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into()),
                    m.counters.lambda_blocks.to_string(),
                    m.counters.omega_blocks.to_string(),
                ]);
            }
        }
        table(&["p", "method", "Min", "Avg", "Time(s)", "lambda", "omega"], &rows)
    }
}
