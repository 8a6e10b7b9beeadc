//! Subcommand implementations.

use std::time::Instant;

use certiformer::io::{
    generate_fixture, load_model, load_vocab, save_fixture, tokenize, weights_checksum, Fixture, VocabTable,
};
use certiformer::planted::{planted_importance, planted_synonym};
use certiformer::verifier::{certify_sets, enumerate_position_sets, run_ablation, ABLATION_METHODS};
use certiformer::{importance_ranking, Error, Instance, TransformerModel};
use serde::Serialize;

use crate::config::{model_paths, FixtureKind, GenArgs, RunConfig};
use crate::report::*;
use crate::CliError;

pub struct Loaded {
    pub model: TransformerModel,
    pub vocab: VocabTable,
    pub checksum: String,
}

pub fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let (manifest, weights) = model_paths(&cfg.model);
    let model = load_model(&manifest, &weights).map_err(|e| CliError::Model(format!("{}: {e}", manifest.display())))?;
    let vocab = load_vocab(&cfg.vocab).map_err(|e| CliError::Model(format!("{}: {e}", cfg.vocab.display())))?;
    if vocab.len() != model.hyper.vocab_size {
        return Err(CliError::Model(format!(
            "vocabulary has {} tokens but the model embeds {}",
            vocab.len(),
            model.hyper.vocab_size
        )));
    }
    let checksum = weights_checksum(&model);
    Ok(Loaded { model, vocab, checksum })
}

fn settings(cfg: &RunConfig, loaded: &Loaded, method: bool) -> Settings {
    Settings {
        model_checksum: loaded.checksum.clone(),
        method: method.then_some(cfg.method),
        norms: cfg.norms.clone(),
        t: cfg.t,
        eps_max: cfg.search.eps_max,
        rel_tol: cfg.search.rel_tol,
        max_iter: cfg.search.max_iter,
        max_sets: cfg.max_sets,
        seed: cfg.seed,
    }
}

/// Tokenizes input `index` and prepares it; `None` for the instance when the
/// model misclassifies it.
fn prepare<'m>(
    cfg: &RunConfig,
    loaded: &'m Loaded,
    index: usize,
) -> Result<(InputInfo, Option<Instance<'m>>), CliError> {
    let input = &cfg.inputs[index];
    let ids = tokenize(&input.text, &loaded.vocab, loaded.model.hyper.max_len);
    if ids.is_empty() {
        return Err(CliError::Config(format!("input {} is empty", index + 1)));
    }
    if let Some(e) = input.expected {
        if e >= loaded.model.hyper.num_classes {
            return Err(CliError::Config(format!(
                "label {e} of input {} exceeds {} classes",
                index + 1,
                loaded.model.hyper.num_classes
            )));
        }
    }
    if let Some(ps) = &cfg.positions {
        if ps.iter().any(|&p| p >= ids.len()) {
            return Err(CliError::Config(format!(
                "--positions exceed the {} tokens of input {}",
                ids.len(),
                index + 1
            )));
        }
    }
    let tokens = ids.iter().map(|&i| loaded.vocab.token(i).to_string()).collect();
    let (inst, predicted, margin) = match Instance::new(&loaded.model, &ids, input.expected) {
        Ok(inst) => {
            let (p, m) = (inst.label, inst.clean_margin);
            (Some(inst), p, m)
        }
        Err(Error::Misclassified { predicted, .. }) => {
            let logits = loaded.model.forward_eval(&ids)?;
            (None, predicted, certiformer::model::margin(logits.view(), predicted))
        }
        Err(e) => return Err(e.into()),
    };
    let info = InputInfo {
        index: index + 1,
        text: input.text.clone(),
        tokens,
        ids,
        predicted,
        expected: input.expected,
        misclassified: inst.is_none(),
        clean_margin: margin,
    };
    Ok((info, inst))
}

fn elapsed(cfg: &RunConfig, start: Instant) -> Option<f64> {
    cfg.timings.then(|| start.elapsed().as_secs_f64())
}

fn one_based(ps: &[usize]) -> Vec<usize> {
    ps.iter().map(|p| p + 1).collect()
}

pub fn certify(cfg: &RunConfig) -> Result<CertifyReport, CliError> {
    let start = Instant::now();
    let loaded = load(cfg)?;
    let norm = cfg.norms[0];
    let mut inputs = Vec::new();
    for i in 0..cfg.inputs.len() {
        let (info, inst) = prepare(cfg, &loaded, i)?;
        let Some(inst) = inst else {
            inputs.push(CertifiedInput {
                input: info,
                truncated: false,
                position_sets: vec![],
                min: None,
                avg: None,
            });
            continue;
        };
        let (sets, truncated) = match &cfg.positions {
            Some(ps) => (vec![ps.clone()], false),
            None => {
                let s = enumerate_position_sets(inst.seq_len(), cfg.t, cfg.max_sets);
                (s.sets, s.truncated)
            }
        };
        if sets.is_empty() {
            return Err(CliError::Config(format!(
                "--t {} exceeds the {} tokens of input {}",
                cfg.t,
                inst.seq_len(),
                i + 1
            )));
        }
        let summary = certify_sets(&inst, &sets, norm, cfg.method, &cfg.search)?;
        let mut position_sets = Vec::new();
        for c in &summary.certificates {
            let probes = cfg
                .probe_eps
                .iter()
                .map(|&e| {
                    let spec = certiformer::PerturbationSpec::new(norm, e, c.positions.clone(), inst.seq_len())?;
                    let d = match inst.delta_lower(&spec, cfg.method) {
                        Ok((d, _)) => d,
                        Err(Error::RangeOverflow(_) | Error::NonFinite(_) | Error::DomainViolation { .. }) => {
                            f64::NEG_INFINITY
                        }
                        Err(e) => return Err(e),
                    };
                    Ok(Probe {
                        epsilon: e,
                        delta_lower: d,
                    })
                })
                .collect::<certiformer::Result<Vec<_>>>()?;
            position_sets.push(SetResult {
                positions: one_based(&c.positions),
                certified_epsilon: c.epsilon,
                delta_lower: c.delta_lower,
                evaluations: c.evaluations,
                counters: c.counters,
                probes,
                time_s: cfg.timings.then(|| c.elapsed.as_secs_f64()),
            });
        }
        inputs.push(CertifiedInput {
            input: info,
            truncated,
            position_sets,
            min: Some(summary.min),
            avg: Some(summary.avg),
        });
    }
    let per_input: Vec<_> = inputs.iter().map(|i| (i.min, i.avg)).collect();
    let misclassified = inputs.iter().filter(|i| i.input.misclassified).count();
    Ok(CertifyReport {
        command: "certify",
        settings: settings(cfg, &loaded, true),
        inputs,
        summary: Aggregate::of(&per_input, misclassified),
        time_s: elapsed(cfg, start),
    })
}

pub fn importance(cfg: &RunConfig) -> Result<ImportanceReport, CliError> {
    let loaded = load(cfg)?;
    let mut inputs = Vec::new();
    for i in 0..cfg.inputs.len() {
        let start = Instant::now();
        let (info, inst) = prepare(cfg, &loaded, i)?;
        if inst.is_none() {
            inputs.push(RankedInput {
                input: info,
                words: vec![],
                rankings: None,
                time_s: None,
            });
            continue;
        }
        let r = importance_ranking(&loaded.model, &info.ids, cfg.norms[0], cfg.method, &cfg.search)?;
        let words = (0..info.ids.len())
            .map(|p| WordScore {
                position: p + 1,
                token: info.tokens[p].clone(),
                score: r.scores[p],
                certified_epsilon: r.certified[p],
                upper_bound: r.upper_bounds[p],
                gradient_norm: r.gradient_norms[p],
            })
            .collect();
        inputs.push(RankedInput {
            input: info,
            words,
            rankings: Some(Rankings {
                ours: one_based(&r.ours),
                upper: one_based(&r.upper),
                gradient: one_based(&r.gradient),
            }),
            time_s: elapsed(cfg, start),
        });
    }
    Ok(ImportanceReport {
        command: "importance",
        settings: settings(cfg, &loaded, true),
        inputs,
    })
}

pub fn ablate(cfg: &RunConfig) -> Result<AblateReport, CliError> {
    let loaded = load(cfg)?;
    let mut infos = Vec::new();
    let mut instances = Vec::new();
    for i in 0..cfg.inputs.len() {
        let (info, inst) = prepare(cfg, &loaded, i)?;
        if let Some(inst) = inst {
            if cfg.t > inst.seq_len() {
                return Err(CliError::Config(format!(
                    "--t {} exceeds the {} tokens of input {}",
                    cfg.t,
                    inst.seq_len(),
                    i + 1
                )));
            }
            instances.push(inst);
        }
        infos.push(info);
    }
    let entries = run_ablation(&instances, &cfg.norms, cfg.t, cfg.max_sets, &cfg.search)?;
    let method_result = |m: &certiformer::verifier::MethodSummary| MethodResult {
        method: m.method,
        min: m.min,
        avg: m.avg,
        counters: m.counters,
        time_s: cfg.timings.then(|| m.elapsed.as_secs_f64()),
    };
    let mut inputs = Vec::new();
    let mut k = 0;
    for info in infos {
        if info.misclassified {
            inputs.push(AblatedInput {
                input: info,
                truncated: false,
                norms: vec![],
            });
            continue;
        }
        let n = instances[k].seq_len();
        let norms = entries
            .iter()
            .filter(|e| e.instance == k)
            .map(|e| NormResult {
                norm: e.norm,
                methods: e.methods.iter().map(method_result).collect(),
            })
            .collect();
        inputs.push(AblatedInput {
            input: info,
            truncated: enumerate_position_sets(n, cfg.t, cfg.max_sets).truncated,
            norms,
        });
        k += 1;
    }
    let summary = cfg
        .norms
        .iter()
        .map(|&norm| {
            let methods = ABLATION_METHODS
                .iter()
                .enumerate()
                .map(|(j, &method)| {
                    let runs: Vec<_> = entries.iter().filter(|e| e.norm == norm).map(|e| &e.methods[j]).collect();
                    let count = runs.len().max(1) as f64;
                    let mut counters = certiformer::Counters::default();
                    for r in &runs {
                        counters += r.counters;
                    }
                    MethodResult {
                        method,
                        min: runs.iter().map(|r| r.min).sum::<f64>() / count,
                        avg: runs.iter().map(|r| r.avg).sum::<f64>() / count,
                        counters,
                        time_s: cfg.timings.then(|| runs.iter().map(|r| r.elapsed.as_secs_f64()).sum()),
                    }
                })
                .collect();
            NormResult { norm, methods }
        })
        .collect();
    Ok(AblateReport {
        command: "ablate",
        settings: settings(cfg, &loaded, false),
        inputs,
        summary,
    })
}

/// What `gen-fixture` wrote, with the planted answers when applicable.
#[derive(Debug, Serialize)]
pub struct GenSummary {
    pub dir: String,
    pub kind: &'static str,
    pub seed: u64,
    pub checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// 1-based.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dominant_position: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeroed_position: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synonym_position: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synonym_distance: Option<f64>,
}

fn sentence(f: &Fixture, ids: &[usize]) -> String {
    ids.iter().map(|&i| f.vocab.token(i)).collect::<Vec<_>>().join(" ")
}

pub fn gen_fixture(args: &GenArgs) -> Result<GenSummary, CliError> {
    let cfg = args.fixture_config()?;
    let mut summary = GenSummary {
        dir: args.out.display().to_string(),
        kind: "random",
        seed: args.seed,
        checksum: String::new(),
        text: None,
        dominant_position: None,
        zeroed_position: None,
        synonym_position: None,
        synonym_distance: None,
    };
    let fixture = match args.kind {
        FixtureKind::Random => generate_fixture(args.seed, &cfg).map_err(|e| CliError::Config(e.to_string()))?,
        FixtureKind::PlantedImportance => {
            let p = planted_importance(args.seed)?;
            summary.kind = "planted-importance";
            summary.text = Some(sentence(&p.fixture, &p.ids));
            summary.dominant_position = Some(p.dominant + 1);
            summary.zeroed_position = Some(p.zeroed + 1);
            p.fixture
        }
        FixtureKind::PlantedSynonym => {
            let s = planted_synonym()?;
            summary.kind = "planted-synonym";
            summary.text = Some(sentence(&s.fixture, &s.ids));
            summary.synonym_position = Some(s.position + 1);
            summary.synonym_distance = Some(s.distance);
            s.fixture
        }
    };
    save_fixture(&fixture, &args.out)?;
    summary.checksum = weights_checksum(&fixture.model);
    Ok(summary)
}
