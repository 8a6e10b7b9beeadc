//! The Transformer classifier being verified and its reference inference.
//!
//! Architecture (post-LN): embedding + positional encoding → LN, then per
//! layer `x ← LN1(x + Attn(x))`, `x ← LN2(x + FFN(x))`, followed by mean
//! pooling over positions and an affine classifier head.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer normalization variant shared by every LN in a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LayerNormMode {
    /// `w (x - μ) / sqrt(var + eps) + b`
    Standard { eps: f64 },
    /// `w (x - μ) + b`
    Modified,
    /// Identity.
    None,
}

impl LayerNormMode {
    pub fn name(&self) -> &'static str {
        match self {
            LayerNormMode::Standard { .. } => "standard",
            LayerNormMode::Modified => "modified",
            LayerNormMode::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
    pub mode: LayerNormMode,
}

impl LayerNormParams {
    pub fn identity(d: usize, mode: LayerNormMode) -> Self {
        Self {
            weight: Array1::ones(d),
            bias: Array1::zeros(d),
            mode,
        }
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let d = x.len() as f64;
        match self.mode {
            LayerNormMode::None => x.to_owned(),
            LayerNormMode::Modified => {
                let mu = x.sum() / d;
                x.mapv(|v| v - mu) * &self.weight + &self.bias
            }
            LayerNormMode::Standard { eps } => {
                let mu = x.sum() / d;
                let centered = x.mapv(|v| v - mu);
                let var = centered.mapv(|v| v * v).sum() / d;
                let rstd = 1.0 / (var + eps).sqrt();
                centered.mapv(|v| v * rstd) * &self.weight + &self.bias
            }
        }
    }

    fn apply_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (mut row, src) in out.rows_mut().into_iter().zip(x.rows()) {
            row.assign(&self.apply(src));
        }
        out
    }
}

/// `y = weight · x + bias` with `weight` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Applies the map to every row of `x` (`[n, in] → [n, out]`).
    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub ln1: LayerNormParams,
    pub ffn_in: Affine,
    pub ffn_out: Affine,
    pub ln2: LayerNormParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub num_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub layernorm: LayerNormMode,
}

impl Hyper {
    pub fn d_qk(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    MeanOverPositions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub hyper: Hyper,
    /// `[vocab, d_model]`
    pub embed: Array2<f64>,
    /// `[max_len, d_model]`
    pub pos_enc: Array2<f64>,
    pub embed_ln: LayerNormParams,
    pub layers: Vec<TransformerLayer>,
    pub pooling: Pooling,
    /// `[num_classes, d_model]`
    pub head: Affine,
}

/// Intermediate activations of one forward pass, each `[n, width]` except
/// the pooled vector and logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub embedded: Array2<f64>,
    pub layers: Vec<LayerTrace>,
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Array2<f64>,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    /// Softmax probabilities per head, each `[n, n]`.
    pub attention: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub attention_out: Array2<f64>,
    pub after_attention: Array2<f64>,
    pub ffn_hidden: Array2<f64>,
    pub output: Array2<f64>,
}

impl TransformerModel {
    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        let d = h.d_model;
        if h.heads == 0 || d % h.heads != 0 {
            return Err(Error::UnsupportedShape(format!(
                "d_model {d} not divisible by {} heads",
                h.heads
            )));
        }
        if h.num_classes < 2 {
            return Err(Error::UnsupportedShape("need at least two classes".into()));
        }
        if let LayerNormMode::Standard { eps } = h.layernorm {
            if !(eps > 0.0) {
                return Err(Error::UnsupportedShape(format!("layer norm eps {eps}")));
            }
        }
        let check = |name: &str, actual: (usize, usize), expected: (usize, usize)| {
            if actual != expected {
                Err(Error::TensorShape {
                    tensor: name.to_string(),
                    expected: vec![expected.0, expected.1],
                    actual: vec![actual.0, actual.1],
                })
            } else {
                Ok(())
            }
        };
        check("embed", self.embed.dim(), (h.vocab_size, d))?;
        check("pos_enc", self.pos_enc.dim(), (h.max_len, d))?;
        check("head.weight", self.head.weight.dim(), (h.num_classes, d))?;
        if self.layers.len() != h.num_layers {
            return Err(Error::UnsupportedShape(format!(
                "{} layers, hyperparameters say {}",
                self.layers.len(),
                h.num_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, a, shape) in [
                ("query", &layer.query, (d, d)),
                ("key", &layer.key, (d, d)),
                ("value", &layer.value, (d, d)),
                ("output", &layer.output, (d, d)),
                ("ffn_in", &layer.ffn_in, (h.d_ff, d)),
                ("ffn_out", &layer.ffn_out, (d, h.d_ff)),
            ] {
                check(&format!("layers.{i}.{name}.weight"), a.weight.dim(), shape)?;
                check(&format!("layers.{i}.{name}.bias"), (a.bias.len(), 1), (shape.0, 1))?;
            }
        }
        let finite = |a: &[f64]| a.iter().all(|v| v.is_finite());
        let mut all_finite = finite(self.embed.as_slice().unwrap_or(&[]))
            && self.embed.iter().all(|v| v.is_finite())
            && self.pos_enc.iter().all(|v| v.is_finite())
            && self.head.weight.iter().chain(self.head.bias.iter()).all(|v| v.is_finite());
        for layer in &self.layers {
            for a in [
                &layer.query,
                &layer.key,
                &layer.value,
                &layer.output,
                &layer.ffn_in,
                &layer.ffn_out,
            ] {
                all_finite &= a.weight.iter().chain(a.bias.iter()).all(|v| v.is_finite());
            }
        }
        if !all_finite {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(())
    }

    pub fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if ids.len() > self.hyper.max_len {
            return Err(Error::UnsupportedShape(format!(
                "sequence of {} tokens exceeds max_len {}",
                ids.len(),
                self.hyper.max_len
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.hyper.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab: self.hyper.vocab_size,
            });
        }
        Ok(())
    }

    /// Word embeddings plus positional encodings, `[n, d_model]`. These are
    /// the clean inputs `x_0` that perturbations are centred on.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Array2<f64>> {
        self.check_tokens(ids)?;
        let d = self.hyper.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            let row = &self.embed.row(id) + &self.pos_enc.row(i);
            x.row_mut(i).assign(&row);
        }
        Ok(x)
    }

    pub fn forward_eval(&self, ids: &[usize]) -> Result<Array1<f64>> {
        let x = self.embed_tokens(ids)?;
        Ok(self.logits_from_embeddings(&x))
    }

    pub fn logits_from_embeddings(&self, x: &Array2<f64>) -> Array1<f64> {
        self.trace_from_embeddings(x).logits
    }

    pub fn trace(&self, ids: &[usize]) -> Result<ForwardTrace> {
        let x = self.embed_tokens(ids)?;
        Ok(self.trace_from_embeddings(&x))
    }

    pub fn trace_from_embeddings(&self, x: &Array2<f64>) -> ForwardTrace {
        let h = &self.hyper;
        let (n, dqk) = (x.nrows(), h.d_qk());
        let scale = 1.0 / (dqk as f64).sqrt();
        let mut cur = self.embed_ln.apply_rows(x);
        let embedded = cur.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = layer.query.apply_rows(cur.view());
            let k = layer.key.apply_rows(cur.view());
            let v = layer.value.apply_rows(cur.view());
            let mut attention = Vec::with_capacity(h.heads);
            let mut mixed = Array2::zeros((n, h.d_model));
            for head in 0..h.heads {
                let cols = s![.., head * dqk..(head + 1) * dqk];
                let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                let probs = softmax_rows(&scores);
                mixed.slice_mut(cols).assign(&probs.dot(&v.slice(cols)));
                attention.push(probs);
            }
            let projected = layer.output.apply_rows(mixed.view());
            let after_attention = layer.ln1.apply_rows(&(&cur + &projected));
            let hidden = layer
                .ffn_in
                .apply_rows(after_attention.view())
                .mapv(|v| v.max(0.0));
            let ffn = layer.ffn_out.apply_rows(hidden.view());
            let output = layer.ln2.apply_rows(&(&after_attention + &ffn));
            traces.push(LayerTrace {
                input: cur,
                query: q,
                key: k,
                value: v,
                attention,
                attention_out: mixed,
                after_attention,
                ffn_hidden: hidden,
                output: output.clone(),
            });
            cur = output;
        }
        let pooled = cur.mean_axis(Axis(0)).expect("non-empty sequence");
        let logits = self.head.weight.dot(&pooled) + &self.head.bias;
        ForwardTrace {
            embedded,
            layers: traces,
            pooled,
            logits,
        }
    }

    pub fn predict(&self, ids: &[usize]) -> Result<usize> {
        Ok(argmax(self.forward_eval(ids)?.view()))
    }
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `y_c - max_{y≠c} y_y`.
pub fn margin(logits: ArrayView1<f64>, class: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != class)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[class] - other
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Central finite-difference step used by [`input_gradients`].
pub const GRADIENT_STEP: f64 = 1e-4;

/// ℓ2 norm, per position, of the gradient of `y_c - y_other` with respect to
/// that position's input embedding, by central differences with step `h`.
pub fn input_gradients(
    model: &TransformerModel,
    ids: &[usize],
    class: usize,
    other: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let x0 = model.embed_tokens(ids)?;
    let diff = |x: &Array2<f64>| {
        let logits = model.logits_from_embeddings(x);
        logits[class] - logits[other]
    };
    let (n, d) = x0.dim();
    let mut norms = Vec::with_capacity(n);
    let mut x = x0.clone();
    for i in 0..n {
        let mut sq = 0.0;
        for j in 0..d {
            let orig = x0[[i, j]];
            x[[i, j]] = orig + h;
            let plus = diff(&x);
            x[[i, j]] = orig - h;
            let minus = diff(&x);
            x[[i, j]] = orig;
            let g = (plus - minus) / (2.0 * h);
            sq += g * g;
        }
        norms.push(sq.sqrt());
    }
    Ok(norms)
}
