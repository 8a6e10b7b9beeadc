//! Run configuration: command-line flags layered over an optional JSON
//! file, validated before any model is touched.

use std::path::{Path, PathBuf};

use certiformer::io::FixtureConfig;
use certiformer::verifier::DEFAULT_MAX_SETS;
use certiformer::{LayerNormMode, Method, Norm, SearchConfig};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Table,
}

/// Options shared by `certify`, `importance` and `ablate`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Model directory, or a `model.json` manifest next to its `.bin`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Vocabulary TSV; defaults to `vocab.tsv` beside the manifest.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Input sentence; repeat for several.
    #[arg(long)]
    pub text: Vec<String>,
    /// One sentence per line, optionally prefixed by `label<TAB>`.
    #[arg(long)]
    pub input_file: Option<PathBuf>,
    /// Expected class of every `--text` input.
    #[arg(long)]
    pub label: Option<usize>,
    /// Norm of the perturbation ball: 1, 2 or inf. `ablate` accepts several.
    #[arg(long = "p", value_delimiter = ',')]
    pub p: Vec<Norm>,
    /// Number of simultaneously perturbed positions.
    #[arg(long)]
    pub t: Option<usize>,
    /// Explicit 1-based position set, e.g. `1,3`.
    #[arg(long, value_delimiter = ',')]
    pub positions: Option<Vec<usize>>,
    /// bf, ff, fb or ibp.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub eps_max: Option<f64>,
    /// Radii at which to also report the margin bound.
    #[arg(long, value_delimiter = ',')]
    pub probe_eps: Option<Vec<f64>>,
    /// Cap on enumerated position sets per input.
    #[arg(long)]
    pub max_sets: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is the reproducibility reference.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Include wall-clock times in the report.
    #[arg(long)]
    pub timings: bool,
    /// JSON file with any of the options above (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// The JSON form of [`RunArgs`]; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<PathBuf>,
    vocab: Option<PathBuf>,
    text: Vec<String>,
    input_file: Option<PathBuf>,
    label: Option<usize>,
    p: Option<NormList>,
    t: Option<usize>,
    positions: Option<Vec<usize>>,
    method: Option<Method>,
    eps_max: Option<f64>,
    rel_tol: Option<f64>,
    max_iter: Option<usize>,
    probe_eps: Option<Vec<f64>>,
    max_sets: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    format: Option<Format>,
    timings: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NormList {
    One(Norm),
    Many(Vec<Norm>),
}

/// One input sentence and its optional expected class.
#[derive(Debug, Clone, PartialEq)]
pub struct InputText {
    pub text: String,
    pub expected: Option<usize>,
}

/// Fully validated settings of a run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: PathBuf,
    pub vocab: PathBuf,
    pub inputs: Vec<InputText>,
    pub norms: Vec<Norm>,
    pub t: usize,
    /// 0-based.
    pub positions: Option<Vec<usize>>,
    pub method: Method,
    pub search: SearchConfig,
    pub probe_eps: Vec<f64>,
    pub max_sets: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub timings: bool,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn read_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Splits `model` into manifest and weight paths.
pub fn model_paths(model: &Path) -> (PathBuf, PathBuf) {
    if model.is_dir() {
        (model.join("model.json"), model.join("model.bin"))
    } else {
        (model.to_path_buf(), model.with_extension("bin"))
    }
}

fn read_inputs(path: &Path) -> Result<Vec<InputText>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut inputs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let input = match line.split_once('\t') {
            Some((label, sentence)) => InputText {
                text: sentence.to_string(),
                expected: Some(label.trim().parse().map_err(|_| {
                    config_err(format!("{}:{}: label `{label}` is not a class index", path.display(), i + 1))
                })?),
            },
            None => InputText {
                text: line.to_string(),
                expected: None,
            },
        };
        inputs.push(input);
    }
    Ok(inputs)
}

impl RunConfig {
    /// Layers flags over the config file. `multi_norm` allows several
    /// norms and defaults to all three.
    pub fn resolve(args: &RunArgs, multi_norm: bool) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => read_config(p)?,
            None => FileConfig::default(),
        };
        let model = args
            .model
            .clone()
            .or(file.model)
            .ok_or_else(|| config_err("--model is required"))?;
        let (manifest, _) = model_paths(&model);
        let vocab = args
            .vocab
            .clone()
            .or(file.vocab)
            .unwrap_or_else(|| manifest.with_file_name("vocab.tsv"));

        let label = args.label.or(file.label);
        let texts = if args.text.is_empty() { file.text } else { args.text.clone() };
        let mut inputs: Vec<InputText> = texts
            .into_iter()
            .map(|text| InputText { text, expected: label })
            .collect();
        if let Some(path) = args.input_file.clone().or(file.input_file) {
            inputs.extend(read_inputs(&path)?);
        }
        if inputs.is_empty() {
            return Err(config_err("no input: pass --text or --input-file"));
        }

        let norms = if !args.p.is_empty() {
            args.p.clone()
        } else {
            match file.p {
                Some(NormList::One(n)) => vec![n],
                Some(NormList::Many(v)) => v,
                None if multi_norm => vec![Norm::L1, Norm::L2, Norm::Linf],
                None => vec![Norm::L2],
            }
        };
        if norms.is_empty() || (!multi_norm && norms.len() > 1) {
            return Err(config_err("exactly one --p value is expected"));
        }

        let positions = args.positions.clone().or(file.positions);
        let positions = match positions {
            Some(mut ps) => {
                if ps.is_empty() || ps.contains(&0) {
                    return Err(config_err("--positions are 1-based and non-empty"));
                }
                ps.sort_unstable();
                ps.dedup();
                Some(ps.into_iter().map(|p| p - 1).collect::<Vec<_>>())
            }
            None => None,
        };
        let t = match (&positions, args.t.or(file.t)) {
            (Some(ps), Some(t)) if t != ps.len() => {
                return Err(config_err(format!("--t {t} disagrees with {} --positions", ps.len())));
            }
            (Some(ps), _) => ps.len(),
            (None, Some(0)) => return Err(config_err("--t must be at least 1")),
            (None, t) => t.unwrap_or(1),
        };

        let defaults = SearchConfig::default();
        let search = SearchConfig {
            eps_max: args.eps_max.or(file.eps_max).unwrap_or(defaults.eps_max),
            rel_tol: file.rel_tol.unwrap_or(defaults.rel_tol),
            max_iter: file.max_iter.unwrap_or(defaults.max_iter),
        };
        if !(search.eps_max > 0.0 && search.eps_max.is_finite()) {
            return Err(config_err(format!("--eps-max must be positive, got {}", search.eps_max)));
        }
        if !(search.rel_tol > 0.0) || search.max_iter == 0 {
            return Err(config_err("rel_tol must be positive and max_iter at least 1"));
        }
        let probe_eps = args.probe_eps.clone().or(file.probe_eps).unwrap_or_default();
        if probe_eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(config_err("--probe-eps values must be finite and nonnegative"));
        }
        let max_sets = args.max_sets.or(file.max_sets).unwrap_or(DEFAULT_MAX_SETS);
        if max_sets == 0 {
            return Err(config_err("--max-sets must be at least 1"));
        }
        let threads = args.threads.or(file.threads);
        if threads == Some(0) {
            return Err(config_err("--threads must be at least 1"));
        }
        Ok(Self {
            model,
            vocab,
            inputs,
            norms,
            t,
            positions,
            method: args.method.or(file.method).unwrap_or(Method::BackwardForward),
            search,
            probe_eps,
            max_sets,
            seed: args.seed.or(file.seed).unwrap_or(0),
            threads,
            out: args.out.clone().or(file.out),
            format: args.format.or(file.format).unwrap_or(Format::Json),
            timings: args.timings || file.timings.unwrap_or(false),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    /// Seeded random weights.
    Random,
    /// One word dominates the prediction, one barely matters.
    PlantedImportance,
    /// One substitution flips the prediction at a known distance.
    PlantedSynonym,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayerNormArg {
    Standard,
    Modified,
    None,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Output directory for model.json, model.bin and vocab.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FixtureKind::Random)]
    pub kind: FixtureKind,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_enum)]
    pub layernorm: Option<LayerNormArg>,
    /// Variance offset of standard layer normalization.
    #[arg(long, default_value_t = 1e-5)]
    pub ln_eps: f64,
    /// JSON fixture configuration: num_layers, heads, d_model, d_ff,
    /// max_len, vocab_size, num_classes, layernorm, target_margin.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl GenArgs {
    pub fn fixture_config(&self) -> Result<FixtureConfig, CliError> {
        let mut cfg: FixtureConfig = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => FixtureConfig::default(),
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.num_layers, self.layers);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.d_model, self.d_model);
        set(&mut cfg.d_ff, self.d_ff);
        set(&mut cfg.max_len, self.max_len);
        set(&mut cfg.vocab_size, self.vocab_size);
        set(&mut cfg.num_classes, self.classes);
        if let Some(ln) = self.layernorm {
            cfg.layernorm = match ln {
                LayerNormArg::Standard => LayerNormMode::Standard { eps: self.ln_eps },
                LayerNormArg::Modified => LayerNormMode::Modified,
                LayerNormArg::None => LayerNormMode::None,
            };
        }
        Ok(cfg)
    }
}
