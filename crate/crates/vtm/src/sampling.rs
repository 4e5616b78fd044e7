//! Generation-time decoding: latent-sampled generation with greedy,
//! temperature or beam token selection.
//!
//! The default generation recipe draws a fresh template latent `z` from the
//! standard-normal prior per output, pins the content latent to the encoded
//! input table, and decodes tokens greedily: diversity comes from the latent,
//! fluency from the argmax. Temperature sampling shapes the per-token
//! distribution for the quality-diversity sweep; beam search serves the
//! encoder-decoder baseline.

use rand::Rng;
use thiserror::Error;

use crate::corpus::{Table, Vocabulary, BOS, EOS};
use crate::generator::{decode_step_graph, decoder_init, AttnInput, DecoderState};
use crate::model::{ModelParams, Registry};
use crate::rng::{derive_seed, stream};
use crate::table_encoder::encode_tables;
use crate::tensor::{Graph, Tx};
use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("beam width must be >= 1")]
    BadBeamWidth,
    #[error("max length must be >= 1")]
    BadMaxLength,
}

/// Token-selection strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Temperature(f64),
    /// Length-normalized beam search with the given width. When [`generate`]
    /// produces `n` outputs under this strategy, the k-th output uses width
    /// `k`, mirroring the baseline protocol of decoding with beam sizes one
    /// through five.
    Beam(usize),
}

/// Decoding specification shared by the generation entry points.
#[derive(Debug, Clone, Copy)]
pub struct DecodeSpec {
    pub strategy: Strategy,
    pub max_len: usize,
    pub n: usize,
    pub seed: u64,
}

impl Default for DecodeSpec {
    fn default() -> Self {
        Self { strategy: Strategy::Greedy, max_len: 60, n: 1, seed: 0 }
    }
}

impl DecodeSpec {
    pub fn validate(&self) -> Result<(), SamplingError> {
        match self.strategy {
            Strategy::Temperature(tau) if !(tau > 0.0) => {
                return Err(SamplingError::BadTemperature(tau))
            }
            Strategy::Beam(0) => return Err(SamplingError::BadBeamWidth),
            _ => {}
        }
        if self.max_len == 0 {
            return Err(SamplingError::BadMaxLength);
        }
        Ok(())
    }
}

/// `softmax(u / tau)`: a proper distribution over the vocabulary. `tau = 1`
/// is the plain softmax; `tau -> 0` concentrates on the argmax.
pub fn temperature_distribution(logits: &[f64], tau: f64) -> Result<Vec<f64>, SamplingError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SamplingError::BadTemperature(tau));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&u| ((u - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let draw: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Everything a decode needs after the table has been encoded once.
struct TableContext {
    records: Tx,
    segs: crate::tensor::Segments,
    content: Tx,
}

fn encode_context(
    g: &mut Graph,
    model: &ModelParams,
    vocab: &Vocabulary,
    table: &Table,
) -> (crate::generator::GeneratorTx, TableContext) {
    let mut reg = Registry::default();
    let table_tx = model.table_encoder.bind(g, &mut reg);
    let gen_tx = model.generator.bind(g, &mut reg);
    let enc = encode_tables(g, &table_tx, &[table], vocab);
    (
        gen_tx,
        TableContext { records: enc.records, segs: enc.segs, content: enc.content },
    )
}

fn step_logits(
    g: &mut Graph,
    gen: &crate::generator::GeneratorTx,
    ctx: &TableContext,
    prev: usize,
    z: Tx,
    state: DecoderState,
) -> (Vec<f64>, DecoderState) {
    let prev_emb = g.gather(gen.embed, &[prev]);
    let attn = Some(AttnInput { records: ctx.records, segs: &ctx.segs });
    let (logits, _, next) = decode_step_graph(g, gen, prev_emb, z, ctx.content, state, attn);
    (g.value(logits).row(0).to_vec(), next)
}

fn greedy_or_sampled(
    g: &mut Graph,
    gen: &crate::generator::GeneratorTx,
    ctx: &TableContext,
    z: Tx,
    max_len: usize,
    mut pick: impl FnMut(&[f64]) -> Result<usize, SamplingError>,
) -> Result<Vec<usize>, SamplingError> {
    let mut state = decoder_init(g, gen, z, ctx.content);
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (logits, next) = step_logits(g, gen, ctx, prev, z, state);
        state = next;
        let token = pick(&logits)?;
        if token == EOS {
            break;
        }
        out.push(token);
        prev = token;
    }
    Ok(out)
}

struct BeamHyp {
    tokens: Vec<usize>,
    state: DecoderState,
    log_prob: f64,
    finished: bool,
}

impl BeamHyp {
    fn normalized(&self) -> f64 {
        // Count the terminating EOS so the empty sequence scores finitely.
        self.log_prob / (self.tokens.len() + 1) as f64
    }
}

fn beam_decode(
    g: &mut Graph,
    gen: &crate::generator::GeneratorTx,
    ctx: &TableContext,
    z: Tx,
    width: usize,
    max_len: usize,
) -> Result<Vec<usize>, SamplingError> {
    if width == 0 {
        return Err(SamplingError::BadBeamWidth);
    }
    let init = decoder_init(g, gen, z, ctx.content);
    let mut beams =
        vec![BeamHyp { tokens: Vec::new(), state: init, log_prob: 0.0, finished: false }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<BeamHyp> = Vec::new();
        for hyp in beams {
            if hyp.finished {
                candidates.push(hyp);
                continue;
            }
            let prev = *hyp.tokens.last().unwrap_or(&BOS);
            let (logits, next) = step_logits(g, gen, ctx, prev, z, hyp.state);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            // Expanding with every token is fine at vocabulary scale; the
            // sort below keeps the top `width`.
            for (tok, &u) in logits.iter().enumerate() {
                let lp = hyp.log_prob + (u - lse);
                let mut tokens = hyp.tokens.clone();
                let finished = tok == EOS;
                if !finished {
                    tokens.push(tok);
                }
                candidates.push(BeamHyp { tokens, state: next, log_prob: lp, finished });
            }
        }
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        candidates.truncate(width);
        beams = candidates;
    }
    let best = beams
        .into_iter()
        .max_by(|a, b| a.normalized().total_cmp(&b.normalized()))
        .expect("beam never empty");
    Ok(best.tokens)
}

fn latent_for_sample(ckpt: &Checkpoint, spec: &DecodeSpec, sample_idx: usize) -> Vec<f64> {
    if ckpt.config.mode.is_table2seq() {
        return vec![0.0; ckpt.config.d_z];
    }
    let mut rng = stream(spec.seed, &format!("latent-{sample_idx}"));
    (0..ckpt.config.d_z)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect()
}

/// Like [`generate`], but returns token ids (no detokenization).
pub fn generate_ids(
    table: &Table,
    n: usize,
    spec: &DecodeSpec,
    ckpt: &Checkpoint,
) -> Result<Vec<Vec<usize>>, SamplingError> {
    spec.validate()?;
    let mut g = Graph::new();
    let (gen, ctx) = encode_context(&mut g, &ckpt.model, &ckpt.vocab, table);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let z_vals = latent_for_sample(ckpt, spec, i);
        let z = g.constant(crate::generator::row_mat(&z_vals));
        let tokens = match spec.strategy {
            Strategy::Greedy => greedy_or_sampled(&mut g, &gen, &ctx, z, spec.max_len, |logits| {
                Ok(argmax(logits))
            })?,
            Strategy::Temperature(tau) => {
                let mut rng = stream(derive_seed(spec.seed, "tokens"), &format!("sample-{i}"));
                greedy_or_sampled(&mut g, &gen, &ctx, z, spec.max_len, |logits| {
                    let probs = temperature_distribution(logits, tau)?;
                    Ok(sample_index(&probs, &mut rng))
                })?
            }
            Strategy::Beam(_) => beam_decode(&mut g, &gen, &ctx, z, i + 1, spec.max_len)?,
        };
        out.push(tokens);
    }
    Ok(out)
}

/// Draws `n` outputs for one table: per output, sample `z` from the prior
/// (zero for the table2seq baseline), set `c` to the encoded table, decode
/// with the chosen strategy until EOS or `max_len`. Fully reproducible given
/// `spec.seed`; callers generating for many tables derive a distinct seed per
/// table.
pub fn generate(
    table: &Table,
    n: usize,
    spec: &DecodeSpec,
    ckpt: &Checkpoint,
) -> Result<Vec<String>, SamplingError> {
    Ok(generate_ids(table, n, spec, ckpt)?
        .into_iter()
        .map(|tokens| ckpt.vocab.decode(&tokens).join(" "))
        .collect())
}

/// Length-normalized beam search from the prior-mean latent. Width 1 equals
/// greedy decoding token for token.
pub fn beam_search(
    table: &Table,
    width: usize,
    ckpt: &Checkpoint,
) -> Result<String, SamplingError> {
    Ok(ckpt.vocab.decode(&beam_search_ids(table, width, ckpt)?).join(" "))
}

/// Id-level variant of [`beam_search`].
pub fn beam_search_ids(
    table: &Table,
    width: usize,
    ckpt: &Checkpoint,
) -> Result<Vec<usize>, SamplingError> {
    if width == 0 {
        return Err(SamplingError::BadBeamWidth);
    }
    let mut g = Graph::new();
    let (gen, ctx) = encode_context(&mut g, &ckpt.model, &ckpt.vocab, table);
    let z_vals = vec![0.0; ckpt.config.d_z];
    let z = g.constant(crate::generator::row_mat(&z_vals));
    beam_decode(&mut g, &gen, &ctx, z, width, 60)
}

/// Greedy decode from an explicit latent; used by evaluation code that wants
/// one sentence per sampled `z`.
pub fn greedy_with_latent(
    table: &Table,
    z_vals: &[f64],
    max_len: usize,
    ckpt: &Checkpoint,
) -> Result<String, SamplingError> {
    let mut g = Graph::new();
    let (gen, ctx) = encode_context(&mut g, &ckpt.model, &ckpt.vocab, table);
    let z = g.constant(crate::generator::row_mat(z_vals));
    let tokens = greedy_or_sampled(&mut g, &gen, &ctx, z, max_len, |logits| Ok(argmax(logits)))?;
    Ok(ckpt.vocab.decode(&tokens).join(" "))
}

/// Token-level sequence log-probability of `tokens ++ [EOS]` under the
/// model, for a fixed latent. Used by the beam-search oracle tests.
pub fn sequence_score(table: &Table, tokens: &[usize], z_vals: &[f64], ckpt: &Checkpoint) -> f64 {
    let mut g = Graph::new();
    let (gen, ctx) = encode_context(&mut g, &ckpt.model, &ckpt.vocab, table);
    let z = g.constant(crate::generator::row_mat(z_vals));
    let mut seq = tokens.to_vec();
    seq.push(EOS);
    let mask = vec![vec![1.0; seq.len()]];
    let seqs = vec![seq];
    let lp = crate::generator::sequence_log_prob_graph(
        &mut g,
        &gen,
        &seqs,
        &mask,
        z,
        ctx.content,
        Some(AttnInput { records: ctx.records, segs: &ctx.segs }),
    );
    g.value(lp)[[0, 0]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, parse_table, tokenize};
    use crate::trainer::{AdamState, TrainConfig, TrainMode};

    fn tiny_checkpoint(
        vocab_sentences: &[&str],
        tables: &[Table],
        seed: u64,
        mode: TrainMode,
    ) -> Checkpoint {
        let sentences: Vec<Vec<String>> = vocab_sentences.iter().map(|s| tokenize(s)).collect();
        let vocab = build_vocab(&sentences, tables, 1).unwrap();
        let config = TrainConfig {
            mode,
            seed,
            embed_dim: 4,
            hidden_dim: 5,
            table_dim: 4,
            d_z: 2,
            d_c: 3,
            min_count: 1,
            ..TrainConfig::default()
        };
        let dims = config.dims(vocab.word_count(), vocab.field_count());
        let mut rng = crate::rng::stream(seed, "init");
        let model = ModelParams::init(dims, &mut rng);
        let adam = AdamState::new(&model);
        Checkpoint { config, vocab, model, adam, best_val: 0.0, best_epoch: 0, rng: (seed, 0) }
    }

    fn fixture() -> (Checkpoint, Table) {
        let table = parse_table("name_1:john\tfood_1:french").unwrap();
        let ckpt = tiny_checkpoint(
            &["john serves french food", "anna cooks thai dinner"],
            &[table.clone()],
            3,
            TrainMode::Vtm,
        );
        (ckpt, table)
    }

    #[test]
    fn temperature_one_is_plain_softmax() {
        let logits = [2.0, 1.0, 0.0, -1.5];
        let p = temperature_distribution(&logits, 1.0).unwrap();
        let exps: Vec<f64> = logits.iter().map(|u| (u - 2.0).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in p.iter().zip(&exps) {
            assert!((got - e / total).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_zero_temperature_approaches_greedy() {
        let p = temperature_distribution(&[2.0, 1.0, 0.0], 0.01).unwrap();
        assert!(p[0] > 1.0 - 1e-10);
    }

    #[test]
    fn uniform_logits_stay_uniform_at_any_temperature() {
        for tau in [0.1, 0.5, 1.0, 3.0] {
            let p = temperature_distribution(&[0.7; 5], tau).unwrap();
            for v in &p {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_rejects_nonpositive_tau() {
        assert!(matches!(
            temperature_distribution(&[0.0, 1.0], 0.0),
            Err(SamplingError::BadTemperature(_))
        ));
        assert!(matches!(
            temperature_distribution(&[0.0, 1.0], -2.0),
            Err(SamplingError::BadTemperature(_))
        ));
    }

    #[test]
    fn temperature_is_shift_invariant_exactly() {
        // Logits and shift chosen so the additions are exact in binary
        // floating point, making bitwise equality meaningful.
        let base: Vec<f64> = vec![1.5, -2.25, 0.75, 3.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 8.0).collect();
        for tau in [0.25, 1.0, 2.0] {
            let a = temperature_distribution(&base, tau).unwrap();
            let b = temperature_distribution(&shifted, tau).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn temperature_never_reorders_the_argmax() {
        let mut rng = crate::rng::stream(5, "logits");
        for _ in 0..100 {
            let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-4.0..4.0)).collect();
            let am = argmax(&logits);
            for tau in [0.05, 0.3, 1.0, 5.0] {
                let p = temperature_distribution(&logits, tau).unwrap();
                assert_eq!(argmax(&p), am);
            }
        }
    }

    #[test]
    fn generate_is_deterministic_under_fixed_seed() {
        let (ckpt, table) = fixture();
        let spec = DecodeSpec { strategy: Strategy::Greedy, max_len: 10, n: 5, seed: 9 };
        let a = generate(&table, 5, &spec, &ckpt).unwrap();
        let b = generate(&table, 5, &spec, &ckpt).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn beam_width_one_equals_greedy_token_for_token() {
        let (mut ckpt, table) = fixture();
        ckpt.config.mode = TrainMode::Table2Seq; // zero latent on both paths
        let spec = DecodeSpec { strategy: Strategy::Greedy, max_len: 60, n: 1, seed: 1 };
        let greedy = generate(&table, 1, &spec, &ckpt).unwrap().remove(0);
        let beam = beam_search(&table, 1, &ckpt).unwrap();
        assert_eq!(greedy, beam);
    }

    #[test]
    fn beam_strategy_in_generate_varies_width_one_to_n() {
        let (mut ckpt, table) = fixture();
        ckpt.config.mode = TrainMode::Table2Seq;
        let spec = DecodeSpec { strategy: Strategy::Beam(1), max_len: 60, n: 5, seed: 2 };
        let outs = generate(&table, 5, &spec, &ckpt).unwrap();
        assert_eq!(outs.len(), 5);
        assert_eq!(outs[0], beam_search(&table, 1, &ckpt).unwrap());
        assert_eq!(outs[2], beam_search(&table, 3, &ckpt).unwrap());
    }

    #[test]
    fn beam_matches_exhaustive_search_on_tiny_model() {
        // Vocabulary of 5 real tokens; sequences up to length 3. Beam width
        // 3 must find the sequence maximizing length-normalized log-prob
        // among every non-EOS token sequence of length <= 3.
        let table = parse_table("f_1:tok0").unwrap();
        let ckpt = tiny_checkpoint(
            &["tok0 tok1 tok2 tok3 tok4"],
            &[table.clone()],
            11,
            TrainMode::Table2Seq,
        );
        let candidate_ids: Vec<usize> =
            (0..ckpt.vocab.word_count()).filter(|&i| i != EOS).collect();
        let z = vec![0.0; ckpt.config.d_z];

        let mut best_score = f64::NEG_INFINITY;
        let mut best_tokens = Vec::new();
        let mut consider = |tokens: &[usize]| {
            let lp = sequence_score(&table, tokens, &z, &ckpt);
            let norm = lp / (tokens.len() + 1) as f64;
            if norm > best_score {
                best_score = norm;
                best_tokens = tokens.to_vec();
            }
        };
        consider(&[]);
        for &a in &candidate_ids {
            consider(&[a]);
            for &b in &candidate_ids {
                consider(&[a, b]);
                for &c in &candidate_ids {
                    consider(&[a, b, c]);
                }
            }
        }

        let mut g = Graph::new();
        let (gen, ctx) = encode_context(&mut g, &ckpt.model, &ckpt.vocab, &table);
        let z_tx = g.constant(crate::generator::row_mat(&z));
        // Max length 3 bounds the search to the enumerated space.
        let beam = beam_decode(&mut g, &gen, &ctx, z_tx, 3, 3).unwrap();
        assert_eq!(beam, best_tokens, "beam must find the exhaustive optimum");
    }

    #[test]
    fn beam_normalized_score_never_loses_to_greedy() {
        let (mut ckpt, table) = fixture();
        ckpt.config.mode = TrainMode::Table2Seq;
        let z = vec![0.0; ckpt.config.d_z];
        let spec = DecodeSpec { strategy: Strategy::Greedy, max_len: 60, n: 1, seed: 1 };
        let greedy_ids = generate_ids(&table, 1, &spec, &ckpt).unwrap().remove(0);
        let greedy_norm =
            sequence_score(&table, &greedy_ids, &z, &ckpt) / (greedy_ids.len() + 1) as f64;
        for width in 1..=5 {
            let ids = beam_search_ids(&table, width, &ckpt).unwrap();
            let norm = sequence_score(&table, &ids, &z, &ckpt) / (ids.len() + 1) as f64;
            assert!(
                norm >= greedy_norm - 1e-12,
                "width {width}: {norm} < greedy {greedy_norm}"
            );
        }
    }
}
