//! A Transformer lowered to a DAG of position-wise primitives.
//!
//! Every node holds one activation vector per position. Nodes fall into
//! three groups: affine maps (including layer-norm mean subtraction,
//! residual additions and pooling), element-wise unary nonlinearities, and
//! bilinear products (softmax normalization and the two attention
//! contractions).

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{shape_err, Error, Result};
use crate::model::{Affine, LayerNormMode, LayerNormParams, TransformerModel};
use crate::relax::UnaryKind;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Word embedding plus positional encoding.
    Input,
    /// Position-wise `W x + b`, `W` of shape `[width, src width]`.
    Affine {
        src: NodeId,
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    Unary {
        src: NodeId,
        kind: UnaryKind,
    },
    /// Element-wise sum of two nodes of equal shape.
    Residual { lhs: NodeId, rhs: NodeId },
    /// `z_j = lhs_j · rhs_{index[j]}` at the same position.
    Mul {
        lhs: NodeId,
        rhs: NodeId,
        index: Vec<usize>,
    },
    /// Scaled dot products. Output at query position `i`, index `h·n + j`,
    /// is `scale · Σ_c q_i[h·d_k + c] · k_j[h·d_k + c]`.
    AttnScore {
        query: NodeId,
        key: NodeId,
        heads: usize,
        scale: f64,
    },
    /// Probability-weighted values. Output at position `i`, index
    /// `h·d_k + c`, is `Σ_j p_i[h·n + j] · v_j[h·d_k + c]`.
    AttnMix {
        probs: NodeId,
        value: NodeId,
        heads: usize,
    },
    /// Average over positions; the output has a single position.
    MeanPool { src: NodeId },
}

impl Op {
    pub fn sources(&self) -> Vec<NodeId> {
        match self {
            Op::Input => vec![],
            Op::Affine { src, .. } | Op::Unary { src, .. } | Op::MeanPool { src } => vec![*src],
            Op::Residual { lhs, rhs } | Op::Mul { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::AttnScore { query, key, .. } => vec![*query, *key],
            Op::AttnMix { probs, value, .. } => vec![*probs, *value],
        }
    }

    /// Whether bounding this op needs concrete intervals of its sources.
    pub fn is_nonlinear(&self) -> bool {
        matches!(
            self,
            Op::Unary { .. } | Op::Mul { .. } | Op::AttnScore { .. } | Op::AttnMix { .. }
        )
    }
}

/// Which part of the network a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Plain,
    /// Internals of the self-attention of the given layer, from scores up
    /// to the probability-weighted values.
    Attention(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub positions: usize,
    pub width: usize,
    pub block: Block,
    /// Known range of every neuron, used to tighten bounds.
    pub range: (f64, f64),
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublayerProgram {
    pub nodes: Vec<Node>,
    pub seq_len: usize,
    pub d_model: usize,
}

struct Builder {
    nodes: Vec<Node>,
    n: usize,
    block: Block,
}

impl Builder {
    fn push(&mut self, op: Op, positions: usize, width: usize, range: (f64, f64), label: &str) -> NodeId {
        self.nodes.push(Node {
            op,
            positions,
            width,
            block: self.block,
            range,
            label: label.to_string(),
        });
        self.nodes.len() - 1
    }

    fn width(&self, id: NodeId) -> usize {
        self.nodes[id].width
    }

    fn affine(&mut self, src: NodeId, weight: Array2<f64>, bias: Array1<f64>, label: &str) -> NodeId {
        let width = weight.nrows();
        let positions = self.nodes[src].positions;
        self.push(
            Op::Affine { src, weight, bias },
            positions,
            width,
            (f64::NEG_INFINITY, f64::INFINITY),
            label,
        )
    }

    fn linear(&mut self, src: NodeId, a: &Affine, label: &str) -> NodeId {
        self.affine(src, a.weight.clone(), a.bias.clone(), label)
    }

    fn unary(&mut self, src: NodeId, kind: UnaryKind, label: &str) -> NodeId {
        let (w, p) = (self.width(src), self.nodes[src].positions);
        self.push(Op::Unary { src, kind }, p, w, kind.output_range(), label)
    }

    fn residual(&mut self, lhs: NodeId, rhs: NodeId, label: &str) -> NodeId {
        let (w, p) = (self.width(lhs), self.nodes[lhs].positions);
        self.push(Op::Residual { lhs, rhs }, p, w, (f64::NEG_INFINITY, f64::INFINITY), label)
    }

    fn layer_norm(&mut self, src: NodeId, ln: &LayerNormParams, prefix: &str) -> NodeId {
        let d = self.width(src);
        let centering = Array2::eye(d) - Array2::from_elem((d, d), 1.0 / d as f64);
        match ln.mode {
            LayerNormMode::None => src,
            LayerNormMode::Modified => {
                let w = Array2::from_diag(&ln.weight).dot(&centering);
                self.affine(src, w, ln.bias.clone(), &format!("{prefix}.mean_subtract"))
            }
            LayerNormMode::Standard { eps } => {
                let centered = self.affine(src, centering, Array1::zeros(d), &format!("{prefix}.center"));
                let sq = self.unary(centered, UnaryKind::Square, &format!("{prefix}.square"));
                let var = self.affine(
                    sq,
                    Array2::from_elem((1, d), 1.0 / d as f64),
                    Array1::from_elem(1, eps),
                    &format!("{prefix}.variance"),
                );
                self.nodes[var].range = (eps, f64::INFINITY);
                let std = self.unary(var, UnaryKind::Sqrt, &format!("{prefix}.sqrt"));
                let rstd = self.unary(std, UnaryKind::Reciprocal, &format!("{prefix}.reciprocal"));
                let p = self.nodes[src].positions;
                let normed = self.push(
                    Op::Mul {
                        lhs: centered,
                        rhs: rstd,
                        index: vec![0; d],
                    },
                    p,
                    d,
                    (f64::NEG_INFINITY, f64::INFINITY),
                    &format!("{prefix}.normalize"),
                );
                self.affine(normed, Array2::from_diag(&ln.weight), ln.bias.clone(), &format!("{prefix}.gain"))
            }
        }
    }
}

impl SublayerProgram {
    /// Lowers `model` for inputs of `seq_len` tokens. The final node is the
    /// logit vector (one position, `num_classes` wide).
    pub fn compile(model: &TransformerModel, seq_len: usize) -> Result<Self> {
        model.validate()?;
        let h = model.hyper;
        if seq_len == 0 {
            return Err(Error::EmptyInput);
        }
        if seq_len > h.max_len {
            return Err(Error::UnsupportedShape(format!(
                "sequence length {seq_len} exceeds max_len {}",
                h.max_len
            )));
        }
        let (n, d, heads, dk) = (seq_len, h.d_model, h.heads, h.d_qk());
        let mut b = Builder {
            nodes: Vec::new(),
            n,
            block: Block::Plain,
        };
        let input = b.push(Op::Input, n, d, (f64::NEG_INFINITY, f64::INFINITY), "input");
        let mut x = b.layer_norm(input, &model.embed_ln, "embed_ln");
        for (li, layer) in model.layers.iter().enumerate() {
            let q = b.linear(x, &layer.query, &format!("layer{li}.query"));
            let k = b.linear(x, &layer.key, &format!("layer{li}.key"));
            let v = b.linear(x, &layer.value, &format!("layer{li}.value"));
            b.block = Block::Attention(li);
            let scores = b.push(
                Op::AttnScore {
                    query: q,
                    key: k,
                    heads,
                    scale: 1.0 / (dk as f64).sqrt(),
                },
                n,
                heads * n,
                (f64::NEG_INFINITY, f64::INFINITY),
                &format!("layer{li}.scores"),
            );
            let exp = b.unary(scores, UnaryKind::Exp, &format!("layer{li}.exp"));
            let mut sum_w = Array2::zeros((heads, heads * n));
            for hh in 0..heads {
                sum_w.slice_mut(s![hh, hh * b.n..(hh + 1) * b.n]).fill(1.0);
            }
            let sum = b.affine(exp, sum_w, Array1::zeros(heads), &format!("layer{li}.exp_sum"));
            b.nodes[sum].range = (0.0, f64::INFINITY);
            let recip = b.unary(sum, UnaryKind::Reciprocal, &format!("layer{li}.exp_sum_reciprocal"));
            let probs = b.push(
                Op::Mul {
                    lhs: exp,
                    rhs: recip,
                    index: (0..heads * n).map(|j| j / n).collect(),
                },
                n,
                heads * n,
                (0.0, 1.0),
                &format!("layer{li}.probs"),
            );
            let mix = b.push(
                Op::AttnMix {
                    probs,
                    value: v,
                    heads,
                },
                n,
                d,
                (f64::NEG_INFINITY, f64::INFINITY),
                &format!("layer{li}.mix"),
            );
            b.block = Block::Plain;
            let out = b.linear(mix, &layer.output, &format!("layer{li}.attn_out"));
            let res = b.residual(x, out, &format!("layer{li}.attn_residual"));
            x = b.layer_norm(res, &layer.ln1, &format!("layer{li}.ln1"));
            let hid = b.linear(x, &layer.ffn_in, &format!("layer{li}.ffn_in"));
            let act = b.unary(hid, UnaryKind::Relu, &format!("layer{li}.relu"));
            let ffn = b.linear(act, &layer.ffn_out, &format!("layer{li}.ffn_out"));
            let res = b.residual(x, ffn, &format!("layer{li}.ffn_residual"));
            x = b.layer_norm(res, &layer.ln2, &format!("layer{li}.ln2"));
        }
        let pooled = b.push(Op::MeanPool { src: x }, 1, d, (f64::NEG_INFINITY, f64::INFINITY), "pool");
        b.linear(pooled, &model.head, "head");
        Ok(Self {
            nodes: b.nodes,
            seq_len: n,
            d_model: d,
        })
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    /// Replaces the logit head by the margins `y_c − y_y` for every `y ≠ c`
    /// (rows in increasing `y`). Exact: the specification matrix is folded
    /// into the head weights.
    pub fn with_margin_head(&self, class: usize) -> Result<Self> {
        let out = self.output();
        let mut prog = self.clone();
        let Op::Affine { weight, bias, .. } = &mut prog.nodes[out].op else {
            return Err(Error::UnsupportedShape("program does not end in an affine head".into()));
        };
        let k = weight.nrows();
        if class >= k {
            return Err(shape_err("margin class", format!("< {k}"), class));
        }
        let mut spec = Array2::zeros((k - 1, k));
        for (row, y) in (0..k).filter(|&y| y != class).enumerate() {
            spec[[row, class]] = 1.0;
            spec[[row, y]] = -1.0;
        }
        *weight = spec.dot(weight);
        *bias = spec.dot(bias);
        prog.nodes[out].width = k - 1;
        prog.nodes[out].label = "margin".into();
        Ok(prog)
    }

    pub fn attention_blocks(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::AttnMix { .. }))
            .count()
    }

    pub fn contains_unary(&self, kind: UnaryKind) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.op, Op::Unary { kind: k, .. } if k == kind))
    }

    /// Nodes that read from each node.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for src in node.op.sources() {
                if !out[src].contains(&id) {
                    out[src].push(id);
                }
            }
        }
        out
    }

    /// Exact evaluation on input embeddings `[seq_len, d_model]`; returns
    /// every node's activations as `[positions, width]`.
    pub fn eval(&self, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if x.dim() != (self.seq_len, self.d_model) {
            return Err(shape_err("program input", (self.seq_len, self.d_model), x.dim()));
        }
        let n = self.seq_len;
        let mut vals: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input => x.clone(),
                Op::Affine { src, weight, bias } => vals[*src].dot(&weight.t()) + bias,
                Op::Unary { src, kind } => vals[*src].mapv(|v| kind.apply(v)),
                Op::Residual { lhs, rhs } => &vals[*lhs] + &vals[*rhs],
                Op::Mul { lhs, rhs, index } => {
                    let (a, b) = (&vals[*lhs], &vals[*rhs]);
                    Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] * b[[i, index[j]]])
                }
                Op::AttnScore {
                    query,
                    key,
                    heads,
                    scale,
                } => {
                    let (q, k) = (&vals[*query], &vals[*key]);
                    let dk = q.ncols() / heads;
                    Array2::from_shape_fn((n, heads * n), |(i, col)| {
                        let (h, j) = (col / n, col % n);
                        let qs = q.slice(s![i, h * dk..(h + 1) * dk]);
                        let ks = k.slice(s![j, h * dk..(h + 1) * dk]);
                        scale * qs.dot(&ks)
                    })
                }
                Op::AttnMix { probs, value, heads } => {
                    let (p, v) = (&vals[*probs], &vals[*value]);
                    let dk = v.ncols() / heads;
                    Array2::from_shape_fn((n, v.ncols()), |(i, col)| {
                        let h = col / dk;
                        (0..n).map(|j| p[[i, h * n + j]] * v[[j, col]]).sum()
                    })
                }
                Op::MeanPool { src } => vals[*src]
                    .mean_axis(Axis(0))
                    .expect("non-empty")
                    .insert_axis(Axis(0)),
            };
            vals.push(v);
        }
        Ok(vals)
    }
}
