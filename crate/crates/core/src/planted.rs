//! Constructed models whose importance ranking and substitution upper
//! bound are known in closed form.
//!
//! Both models share one wiring (no layer normalization, d = 8, d_ff = 4):
//! attention values are zero, so positions never interact; hidden unit 0
//! is a detector `relu(4·x₀ − 2)`; hidden unit 1 is `relu(x₇ + 100)`, which
//! stays active for any perturbation below 100 and cancels the residual
//! path of dimension 7; the head reads dimension 7, which therefore equals
//! minus the detector output. The class-0 margin is `bias − mean(detector)`.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::{fixture_vocab, round_to_f32, Fixture};
use crate::model::{Affine, Hyper, LayerNormMode, LayerNormParams, Pooling, TransformerLayer, TransformerModel};

const D: usize = 8;
const D_FF: usize = 4;
const MAX_LEN: usize = 32;
const VOCAB: usize = 16;
const DETECTOR_GAIN: f64 = 4.0;
const DETECTOR_THRESHOLD: f64 = 2.0;
const CANCEL_SHIFT: f64 = 100.0;
const READOUT: usize = D - 1;

/// Row of the word that fires the detector.
pub const DOMINANT_WORD: usize = 1;
/// Row of the word furthest from firing the detector.
pub const ZEROED_WORD: usize = 2;
/// Row of the word one substitution away from the dominant word.
pub const SYNONYM_WORD: usize = 3;
const FIRST_FILLER: usize = 4;

/// Input whose most and least important positions are known.
#[derive(Debug, Clone)]
pub struct PlantedImportance {
    pub fixture: Fixture,
    pub ids: Vec<usize>,
    pub dominant: usize,
    pub zeroed: usize,
}

/// Input whose substitution upper bound at `position` is `distance`.
#[derive(Debug, Clone)]
pub struct PlantedSynonym {
    pub fixture: Fixture,
    pub ids: Vec<usize>,
    pub position: usize,
    pub distance: f64,
}

fn unit(i: usize) -> Array1<f64> {
    let mut v = Array1::zeros(D);
    v[i] = 1.0;
    v
}

/// Unit-norm rows: the dominant word is `e₀`, the zeroed word `−e₀`;
/// fillers have `x₀ ∈ [−0.6, −0.2]` and random mass on dimensions 1..6.
fn embeddings(rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut embed = Array2::zeros((VOCAB, D));
    embed.row_mut(0).assign(&(unit(0) * -0.5));
    embed.row_mut(DOMINANT_WORD).assign(&unit(0));
    embed.row_mut(ZEROED_WORD).assign(&(unit(0) * -1.0));
    embed.row_mut(SYNONYM_WORD).assign(&(unit(0) * 0.3));
    for w in FIRST_FILLER..VOCAB {
        let x0: f64 = -rng.random_range(0.2..0.6);
        let rest: Vec<f64> = (1..READOUT).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = rest.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = (1.0 - x0 * x0).sqrt() / norm;
        embed[[w, 0]] = x0;
        for (i, v) in rest.iter().enumerate() {
            embed[[w, i + 1]] = v * scale;
        }
    }
    embed
}

fn model(rng: &mut ChaCha8Rng, embed: Array2<f64>, head_bias: f64) -> Result<TransformerModel> {
    let mode = LayerNormMode::None;
    let small = |rng: &mut ChaCha8Rng| Affine {
        weight: Array2::from_shape_simple_fn((D, D), || rng.random_range(-0.1..0.1)),
        bias: Array1::zeros(D),
    };
    let mut ffn_in = Affine::zeros(D_FF, D);
    ffn_in.weight[[0, 0]] = DETECTOR_GAIN;
    ffn_in.bias[0] = -DETECTOR_THRESHOLD;
    ffn_in.weight[[1, READOUT]] = 1.0;
    ffn_in.bias[1] = CANCEL_SHIFT;
    ffn_in.bias[2] = -1.0;
    ffn_in.bias[3] = -1.0;
    let mut ffn_out = Affine::zeros(D, D_FF);
    ffn_out.weight[[READOUT, 0]] = -1.0;
    ffn_out.weight[[READOUT, 1]] = -1.0;
    ffn_out.bias[READOUT] = CANCEL_SHIFT;
    let mut head = Affine::zeros(2, D);
    head.weight[[0, READOUT]] = 1.0;
    head.bias[0] = head_bias;
    let layer = TransformerLayer {
        query: small(rng),
        key: small(rng),
        value: Affine::zeros(D, D),
        output: Affine::zeros(D, D),
        ln1: LayerNormParams::identity(D, mode),
        ffn_in,
        ffn_out,
        ln2: LayerNormParams::identity(D, mode),
    };
    let mut model = TransformerModel {
        hyper: Hyper {
            num_layers: 1,
            heads: 2,
            d_model: D,
            d_ff: D_FF,
            max_len: MAX_LEN,
            vocab_size: VOCAB,
            num_classes: 2,
            layernorm: mode,
        },
        embed,
        pos_enc: Array2::zeros((MAX_LEN, D)),
        embed_ln: LayerNormParams::identity(D, mode),
        layers: vec![layer],
        pooling: Pooling::MeanOverPositions,
        head,
    };
    round_to_f32(&mut model);
    model.validate()?;
    Ok(model)
}

/// A sentence of 4 to 10 words holding the dominant word once, the zeroed
/// word once and fillers elsewhere. The clean margin is 0.1, so the
/// dominant position certifies to `n·0.1/4 ≤ 0.25`, fillers to at least
/// 0.7 and the zeroed position to at least 1.5 in every norm.
pub fn planted_importance(seed: u64) -> Result<PlantedImportance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = embeddings(&mut rng);
    let n = rng.random_range(4..=10);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    let (dominant, zeroed) = (positions[0], positions[1]);
    let mut ids: Vec<usize> = (0..n).map(|_| rng.random_range(FIRST_FILLER..VOCAB)).collect();
    ids[dominant] = DOMINANT_WORD;
    ids[zeroed] = ZEROED_WORD;
    let fired = DETECTOR_GAIN - DETECTOR_THRESHOLD;
    let model = model(&mut rng, embed, fired / n as f64 + 0.1)?;
    Ok(PlantedImportance {
        fixture: Fixture {
            model,
            vocab: fixture_vocab(VOCAB),
        },
        ids,
        dominant,
        zeroed,
    })
}

/// Five fillers with the synonym word at position 2. Only the dominant
/// word fires the detector and flips the prediction; it lies at distance
/// 0.7 from the synonym in every norm.
pub fn planted_synonym() -> Result<PlantedSynonym> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let embed = embeddings(&mut rng);
    let mut ids: Vec<usize> = (0..5).map(|i| FIRST_FILLER + i).collect();
    let position = 2;
    ids[position] = SYNONYM_WORD;
    let model = model(&mut rng, embed, 0.1)?;
    Ok(PlantedSynonym {
        fixture: Fixture {
            model,
            vocab: fixture_vocab(VOCAB),
        },
        ids,
        position,
        distance: 0.7,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::Norm;
    use crate::engine::Method;
    use crate::verifier::{importance_ranking, upper_bound_substitution, SearchConfig};

    #[test]
    fn margin_matches_closed_form() {
        let p = planted_importance(3).unwrap();
        let logits = p.fixture.model.forward_eval(&p.ids).unwrap();
        assert!((logits[0] - logits[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn dominant_first_and_zeroed_last() {
        let p = planted_importance(11).unwrap();
        let r = importance_ranking(&p.fixture.model, &p.ids, Norm::L2, Method::BackwardForward, &SearchConfig::default())
            .unwrap();
        assert_eq!(r.ours[0], p.dominant);
        assert_eq!(*r.ours.last().unwrap(), p.zeroed);
        let expected = p.ids.len() as f64 * 0.1 / DETECTOR_GAIN;
        assert!((r.certified[p.dominant] - expected).abs() < 2e-3 * expected, "{}", r.certified[p.dominant]);
    }

    #[test]
    fn synonym_upper_bound_is_exact() {
        let s = planted_synonym().unwrap();
        for norm in [Norm::L1, Norm::L2, Norm::Linf] {
            let ub = upper_bound_substitution(&s.fixture.model, &s.ids, s.position, norm).unwrap();
            assert!((ub - s.distance).abs() < 1e-6, "{norm}: {ub}");
        }
    }
}
