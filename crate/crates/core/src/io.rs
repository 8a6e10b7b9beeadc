//! Model files, vocabularies, tokenization and seeded fixture models.
//!
//! A model is stored as a JSON manifest (`model.json`) describing the
//! hyperparameters and a directory of tensors, plus a single blob of
//! little-endian `f32` values (`model.bin`). The vocabulary is a UTF-8 TSV
//! file of `token<TAB>row` lines.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    Affine, Hyper, LayerNormMode, LayerNormParams, Pooling, TransformerLayer, TransformerModel,
};

pub const FORMAT_VERSION: u32 = 1;
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub hyper: Hyper,
    pub pooling: Pooling,
    /// Always `"post_ln"`: `x ← LN(x + sublayer(x))`.
    pub residual: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Tensors of `model` in storage order, each as `(name, shape, values)`.
fn tensors(model: &TransformerModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let mut mat = |name: String, a: &Array2<f64>| {
        out.push((name, vec![a.nrows(), a.ncols()], a.iter().copied().collect()));
    };
    mat("embed".into(), &model.embed);
    mat("pos_enc".into(), &model.pos_enc);
    let mut vecs: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut vec1 = |name: String, a: &Array1<f64>| {
        vecs.push((name, vec![a.len()], a.to_vec()));
    };
    vec1("embed_ln.weight".into(), &model.embed_ln.weight);
    vec1("embed_ln.bias".into(), &model.embed_ln.bias);
    out.append(&mut vecs);
    for (i, layer) in model.layers.iter().enumerate() {
        for (name, a) in affines(layer) {
            out.push((
                format!("layers.{i}.{name}.weight"),
                vec![a.weight.nrows(), a.weight.ncols()],
                a.weight.iter().copied().collect(),
            ));
            out.push((format!("layers.{i}.{name}.bias"), vec![a.bias.len()], a.bias.to_vec()));
        }
        for (name, ln) in [("ln1", &layer.ln1), ("ln2", &layer.ln2)] {
            out.push((format!("layers.{i}.{name}.weight"), vec![ln.weight.len()], ln.weight.to_vec()));
            out.push((format!("layers.{i}.{name}.bias"), vec![ln.bias.len()], ln.bias.to_vec()));
        }
    }
    out.push((
        "head.weight".into(),
        vec![model.head.weight.nrows(), model.head.weight.ncols()],
        model.head.weight.iter().copied().collect(),
    ));
    out.push(("head.bias".into(), vec![model.head.bias.len()], model.head.bias.to_vec()));
    out
}

fn affines(layer: &TransformerLayer) -> [(&'static str, &Affine); 6] {
    [
        ("query", &layer.query),
        ("key", &layer.key),
        ("value", &layer.value),
        ("output", &layer.output),
        ("ffn_in", &layer.ffn_in),
        ("ffn_out", &layer.ffn_out),
    ]
}

/// Serializes `model` into its manifest and weights blob. Values are
/// narrowed to `f32`.
pub fn encode_model(model: &TransformerModel) -> (ModelManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, values) in tensors(model) {
        entries.push(TensorEntry {
            name,
            shape,
            offset: blob.len(),
        });
        for v in values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        hyper: model.hyper,
        pooling: model.pooling,
        residual: "post_ln".into(),
        dtype: "f32le".into(),
        tensors: entries,
    };
    (manifest, blob)
}

pub fn save_model(model: &TransformerModel, manifest_path: &Path, weights_path: &Path) -> Result<()> {
    let (manifest, blob) = encode_model(model);
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(weights_path, blob)?;
    Ok(())
}

/// Hex SHA-256 of the weights blob of `model`.
pub fn weights_checksum(model: &TransformerModel) -> String {
    let (_, blob) = encode_model(model);
    hex(&Sha256::digest(&blob))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    dir: HashMap<&'a str, &'a TensorEntry>,
    blob: &'a [u8],
}

impl Reader<'_> {
    fn read(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let entry = self
            .dir
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if entry.shape != shape {
            return Err(Error::TensorShape {
                tensor: name.to_string(),
                expected: shape.to_vec(),
                actual: entry.shape.clone(),
            });
        }
        let count: usize = shape.iter().product();
        let end = entry
            .offset
            .checked_add(count * 4)
            .filter(|&e| e <= self.blob.len())
            .ok_or_else(|| Error::Format(format!("tensor `{name}` extends past the end of the weights")))?;
        let values: Vec<f64> = self.blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("tensor `{name}` contains a non-finite value")));
        }
        Ok(values)
    }

    fn mat(&self, name: &str, r: usize, c: usize) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_vec((r, c), self.read(name, &[r, c])?).expect("shape checked"))
    }

    fn vec(&self, name: &str, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.read(name, &[n])?))
    }

    fn affine(&self, prefix: &str, out: usize, inp: usize) -> Result<Affine> {
        Ok(Affine {
            weight: self.mat(&format!("{prefix}.weight"), out, inp)?,
            bias: self.vec(&format!("{prefix}.bias"), out)?,
        })
    }

    fn ln(&self, prefix: &str, d: usize, mode: LayerNormMode) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            weight: self.vec(&format!("{prefix}.weight"), d)?,
            bias: self.vec(&format!("{prefix}.bias"), d)?,
            mode,
        })
    }
}

/// Rebuilds a model from a manifest and weights blob, validating every
/// tensor.
pub fn decode_model(manifest: &ModelManifest, blob: &[u8]) -> Result<TransformerModel> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version(manifest.format_version));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    if manifest.residual != "post_ln" {
        return Err(Error::Format(format!("unsupported residual order `{}`", manifest.residual)));
    }
    let h = manifest.hyper;
    if h.heads == 0 || h.d_model % h.heads != 0 {
        return Err(Error::UnsupportedShape(format!(
            "d_model {} not divisible by {} heads",
            h.d_model, h.heads
        )));
    }
    let r = Reader {
        dir: manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect(),
        blob,
    };
    let (d, f, mode) = (h.d_model, h.d_ff, h.layernorm);
    let mut layers = Vec::with_capacity(h.num_layers);
    for i in 0..h.num_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        layers.push(TransformerLayer {
            query: r.affine(&p("query"), d, d)?,
            key: r.affine(&p("key"), d, d)?,
            value: r.affine(&p("value"), d, d)?,
            output: r.affine(&p("output"), d, d)?,
            ln1: r.ln(&p("ln1"), d, mode)?,
            ffn_in: r.affine(&p("ffn_in"), f, d)?,
            ffn_out: r.affine(&p("ffn_out"), d, f)?,
            ln2: r.ln(&p("ln2"), d, mode)?,
        });
    }
    let model = TransformerModel {
        hyper: h,
        embed: r.mat("embed", h.vocab_size, d)?,
        pos_enc: r.mat("pos_enc", h.max_len, d)?,
        embed_ln: r.ln("embed_ln", d, mode)?,
        layers,
        pooling: manifest.pooling,
        head: r.affine("head", h.num_classes, d)?,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_model(manifest_path: &Path, weights_path: &Path) -> Result<TransformerModel> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: ModelManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let blob = fs::read(weights_path)?;
    decode_model(&manifest, &blob)
}

/// Token strings and their embedding rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
}

impl VocabTable {
    /// `tokens[i]` names row `i`; must contain [`UNK`] and no duplicates.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let unk = *index
            .get(UNK)
            .ok_or_else(|| Error::Format(format!("vocabulary lacks `{UNK}`")))?;
        Ok(Self { tokens, index, unk })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, row) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line {}: expected token<TAB>row", n + 1)))?;
            let row = row
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("vocab line {}: bad row `{row}`", n + 1)))?;
            rows.push((row, tok.to_string()));
        }
        rows.sort();
        if rows.iter().enumerate().any(|(i, (r, _))| *r != i) {
            return Err(Error::Format("vocabulary rows are not dense from 0".into()));
        }
        Self::new(rows.into_iter().map(|(_, t)| t).collect())
    }
}

pub fn load_vocab(path: &Path) -> Result<VocabTable> {
    VocabTable::from_tsv(&fs::read_to_string(path)?)
}

pub fn save_vocab(vocab: &VocabTable, path: &Path) -> Result<()> {
    fs::write(path, vocab.to_tsv())?;
    Ok(())
}

/// Lowercases, splits on whitespace and maps unknown words to [`UNK`].
/// Inputs longer than `max_len` are clipped with a warning.
pub fn tokenize(text: &str, vocab: &VocabTable, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(vocab.unk()))
        .collect();
    if ids.len() > max_len {
        log::warn!("input of {} tokens clipped to {max_len}", ids.len());
        ids.truncate(max_len);
    }
    ids
}

const WORDS: &[&str] = &[
    "good", "bad", "food", "great", "terrible", "the", "service", "was", "not", "very", "a", "and",
    "i", "it", "place", "love", "hate", ".", "!", "delicious", "awful", "friendly", "rude", "slow",
    "fast", "cheap", "expensive", "nice", "bland", "fresh", "stale", "best", "worst", "would",
    "never", "again", "always", "staff", "menu", "dinner",
];

/// Shape and calibration of a generated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub num_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub layernorm: LayerNormMode,
    /// Median clean margin the classifier head is scaled to.
    pub target_margin: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            num_layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 32,
            vocab_size: 64,
            num_classes: 2,
            layernorm: LayerNormMode::Modified,
            target_margin: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: TransformerModel,
    pub vocab: VocabTable,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || normal(rng, std))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || normal(rng, std))
}

fn random_affine(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Affine {
    Affine {
        weight: gaussian(rng, out, inp, 1.0 / (inp as f64).sqrt()),
        bias: gaussian_vec(rng, out, 0.1),
    }
}

fn random_ln(rng: &mut ChaCha8Rng, d: usize, mode: LayerNormMode) -> LayerNormParams {
    LayerNormParams {
        weight: gaussian_vec(rng, d, 0.1) + 1.0,
        bias: gaussian_vec(rng, d, 0.1),
        mode,
    }
}

/// Fixed sinusoidal positional encodings scaled by `1/√d`.
pub fn sinusoidal_encoding(max_len: usize, d: usize) -> Array2<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Vocabulary of `size` tokens: [`UNK`], a fixed word list, then `tok{i}`.
pub fn fixture_vocab(size: usize) -> VocabTable {
    let mut tokens = vec![UNK.to_string()];
    tokens.extend(WORDS.iter().take(size.saturating_sub(1)).map(|w| w.to_string()));
    let mut i = tokens.len();
    while tokens.len() < size {
        tokens.push(format!("tok{i}"));
        i += 1;
    }
    VocabTable::new(tokens).expect("generated vocabulary is valid")
}

/// Number of random inputs used to calibrate the classifier head.
const CALIBRATION_INPUTS: usize = 64;
const CALIBRATION_LEN: usize = 6;

/// Deterministic random model for `seed`. Weights are `f32`-representable,
/// so saving and loading is exact.
pub fn generate_fixture(seed: u64, cfg: &FixtureConfig) -> Result<Fixture> {
    if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
        return Err(Error::UnsupportedShape(format!(
            "d_model {} not divisible by {} heads",
            cfg.d_model, cfg.heads
        )));
    }
    if cfg.vocab_size < 2 || cfg.num_classes < 2 || cfg.max_len == 0 {
        return Err(Error::UnsupportedShape("fixture needs vocab ≥ 2, classes ≥ 2, max_len ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut embed = gaussian(&mut rng, cfg.vocab_size, d, 1.0);
    for mut row in embed.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    let mode = cfg.layernorm;
    let embed_ln = random_ln(&mut rng, d, mode);
    let layers = (0..cfg.num_layers)
        .map(|_| TransformerLayer {
            query: random_affine(&mut rng, d, d),
            key: random_affine(&mut rng, d, d),
            value: random_affine(&mut rng, d, d),
            output: random_affine(&mut rng, d, d),
            ln1: random_ln(&mut rng, d, mode),
            ffn_in: random_affine(&mut rng, cfg.d_ff, d),
            ffn_out: random_affine(&mut rng, d, cfg.d_ff),
            ln2: random_ln(&mut rng, d, mode),
        })
        .collect();
    let mut model = TransformerModel {
        hyper: Hyper {
            num_layers: cfg.num_layers,
            heads: cfg.heads,
            d_model: d,
            d_ff: cfg.d_ff,
            max_len: cfg.max_len,
            vocab_size: cfg.vocab_size,
            num_classes: cfg.num_classes,
            layernorm: mode,
        },
        embed,
        pos_enc: sinusoidal_encoding(cfg.max_len, d),
        embed_ln,
        layers,
        pooling: Pooling::MeanOverPositions,
        head: Affine {
            weight: gaussian(&mut rng, cfg.num_classes, d, 1.0 / (d as f64).sqrt()),
            bias: Array1::zeros(cfg.num_classes),
        },
    };
    calibrate_head(&mut model, &mut rng, cfg.target_margin);
    round_to_f32(&mut model);
    model.validate()?;
    Ok(Fixture {
        model,
        vocab: fixture_vocab(cfg.vocab_size),
    })
}

/// Centres the logits over random inputs and scales the head so the median
/// clean margin is `target`.
fn calibrate_head(model: &mut TransformerModel, rng: &mut ChaCha8Rng, target: f64) {
    let len = CALIBRATION_LEN.min(model.hyper.max_len);
    let pooled: Vec<Array1<f64>> = (0..CALIBRATION_INPUTS)
        .map(|_| {
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..model.hyper.vocab_size)).collect();
            model.trace(&ids).expect("valid ids").pooled
        })
        .collect();
    let k = model.hyper.num_classes;
    let mut mean = Array1::zeros(k);
    for p in &pooled {
        mean += &model.head.weight.dot(p);
    }
    mean /= pooled.len() as f64;
    model.head.bias = -mean;
    let mut margins: Vec<f64> = pooled
        .iter()
        .map(|p| {
            let logits = model.head.weight.dot(p) + &model.head.bias;
            let c = crate::model::argmax(logits.view());
            crate::model::margin(logits.view(), c)
        })
        .collect();
    margins.sort_by(f64::total_cmp);
    let median = margins[margins.len() / 2];
    if median > 1e-12 {
        let s = target / median;
        model.head.weight *= s;
        model.head.bias *= s;
    }
}

pub(crate) fn round_to_f32(model: &mut TransformerModel) {
    let r = |a: &mut Array2<f64>| a.mapv_inplace(|v| v as f32 as f64);
    let rv = |a: &mut Array1<f64>| a.mapv_inplace(|v| v as f32 as f64);
    r(&mut model.embed);
    r(&mut model.pos_enc);
    rv(&mut model.embed_ln.weight);
    rv(&mut model.embed_ln.bias);
    for layer in &mut model.layers {
        for a in [
            &mut layer.query,
            &mut layer.key,
            &mut layer.value,
            &mut layer.output,
            &mut layer.ffn_in,
            &mut layer.ffn_out,
        ] {
            r(&mut a.weight);
            rv(&mut a.bias);
        }
        for ln in [&mut layer.ln1, &mut layer.ln2] {
            rv(&mut ln.weight);
            rv(&mut ln.bias);
        }
    }
    r(&mut model.head.weight);
    rv(&mut model.head.bias);
}

/// Writes `model.json`, `model.bin` and `vocab.tsv` into `dir`.
pub fn save_fixture(fixture: &Fixture, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_model(&fixture.model, &dir.join("model.json"), &dir.join("model.bin"))?;
    save_vocab(&fixture.vocab, &dir.join("vocab.tsv"))
}
