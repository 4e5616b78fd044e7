//! Evaluation: corpus BLEU-4, self-BLEU for diversity, ROUGE-L F-measure,
//! and the temperature quality-diversity sweep.
//!
//! BLEU uses clipped n-gram counts against multi-reference groups, the
//! closest-reference-length brevity penalty, and add-epsilon smoothing on
//! both numerator and denominator so that a zero count (or an order with no
//! n-grams at all) degrades smoothly instead of zeroing the geometric mean.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::Table;
use crate::rng::derive_seed;
use crate::sampling::{generate, DecodeSpec, Strategy};
use crate::trainer::Checkpoint;

const MAX_NGRAM: usize = 4;
const SMOOTH_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("candidate and reference counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("self-BLEU needs at least 2 sentences, got {0}")]
    TooFewSentences(usize),
    #[error("generation failed: {0}")]
    Sampling(#[from] crate::sampling::SamplingError),
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 on a 0-100 scale. `references[i]` is the reference
/// group for `candidates[i]`; clipping uses the per-n-gram maximum across the
/// group and the brevity penalty uses the closest reference length.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::CountMismatch(candidates.len(), references.len()));
    }
    let mut correct = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        let closest = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| {
                let diff = r.abs_diff(cand.len());
                (diff, r)
            })
            .unwrap_or(0);
        ref_len += closest;
        for n in 1..=MAX_NGRAM {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, count) in cand_counts {
                total[n - 1] += count;
                correct[n - 1] += count.min(max_ref.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let mut log_precision = 0.0;
    for n in 0..MAX_NGRAM {
        let p = (correct[n] as f64 + SMOOTH_EPS) / (total[n] as f64 + SMOOTH_EPS);
        log_precision += p.ln();
    }
    let brevity = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision / MAX_NGRAM as f64).exp())
}

/// Mean BLEU of each sentence against all its siblings: lower means more
/// diverse. Needs at least two sentences.
pub fn self_bleu(sentences: &[Vec<String>]) -> Result<f64, MetricsError> {
    if sentences.len() < 2 {
        return Err(MetricsError::TooFewSentences(sentences.len()));
    }
    let mut acc = 0.0;
    for (i, sentence) in sentences.iter().enumerate() {
        let refs: Vec<Vec<String>> = sentences
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s.clone())
            .collect();
        acc += bleu4(&[sentence.clone()], &[refs])?;
    }
    Ok(acc / sentences.len() as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-averaged ROUGE-L F-measure (0-100): per candidate, the best
/// harmonic mean of LCS precision and recall across its reference group.
pub fn rouge_l_f(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::CountMismatch(candidates.len(), references.len()));
    }
    let mut acc = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let mut best = 0.0f64;
        for r in refs {
            if cand.is_empty() || r.is_empty() {
                continue;
            }
            let lcs = lcs_len(cand, r) as f64;
            if lcs == 0.0 {
                continue;
            }
            let precision = lcs / cand.len() as f64;
            let recall = lcs / r.len() as f64;
            let f = 2.0 * precision * recall / (precision + recall);
            best = best.max(f);
        }
        acc += best;
    }
    Ok(100.0 * acc / candidates.len() as f64)
}

/// One row of an evaluation report. `tau` is `None` for non-temperature
/// decoding; `self_bleu` is `None` when only one sample per table exists.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tau: Option<f64>,
    pub bleu4: f64,
    pub self_bleu: Option<f64>,
    pub rouge_l: f64,
    pub n_tables: usize,
    pub n_per_table: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "tau,bleu4,self_bleu,rouge_l,n_tables,n_per_table";

    pub fn csv_row(&self) -> String {
        let tau = self.tau.map_or("na".to_string(), |t| format!("{t}"));
        let sb = self.self_bleu.map_or("na".to_string(), |s| format!("{s:.4}"));
        format!(
            "{tau},{:.4},{sb},{:.4},{},{}",
            self.bleu4, self.rouge_l, self.n_tables, self.n_per_table
        )
    }
}

/// A test table with its reference sentences (already tokenized).
pub struct EvalInstance {
    pub table: Table,
    pub references: Vec<Vec<String>>,
}

fn split_tokens(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_string).collect()
}

/// Generates `n_per_table` outputs per table with the given strategy and
/// scores them: corpus BLEU-4 and ROUGE-L of each table's first sample
/// against the references, and the mean per-table self-BLEU of the sample
/// sets (absent when `n_per_table` is 1).
pub fn evaluate_generation(
    ckpt: &Checkpoint,
    instances: &[EvalInstance],
    strategy: Strategy,
    n_per_table: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    if instances.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    let mut firsts = Vec::with_capacity(instances.len());
    let mut refs = Vec::with_capacity(instances.len());
    let mut self_bleus = Vec::new();
    for (t, inst) in instances.iter().enumerate() {
        let spec = DecodeSpec {
            strategy,
            max_len: 60,
            n: n_per_table,
            seed: derive_seed(seed, &format!("table-{t}")),
        };
        let outputs = generate(&inst.table, n_per_table, &spec, ckpt)?;
        let tokenized: Vec<Vec<String>> = outputs.iter().map(|s| split_tokens(s)).collect();
        if n_per_table >= 2 {
            self_bleus.push(self_bleu(&tokenized)?);
        }
        firsts.push(tokenized.into_iter().next().unwrap_or_default());
        refs.push(inst.references.clone());
    }
    let tau = match strategy {
        Strategy::Temperature(t) => Some(t),
        _ => None,
    };
    Ok(EvalReport {
        tau,
        bleu4: bleu4(&firsts, &refs)?,
        self_bleu: (!self_bleus.is_empty())
            .then(|| self_bleus.iter().sum::<f64>() / self_bleus.len() as f64),
        rouge_l: rouge_l_f(&firsts, &refs)?,
        n_tables: instances.len(),
        n_per_table,
    })
}

/// Groups (table, sentence) pairs into multi-reference instances keyed by
/// the serialized table, preserving first-occurrence order. Test sets that
/// realize one table under several sentences become one instance with all of
/// them as references.
pub fn group_by_table(pairs: &[(Table, Vec<String>)]) -> Vec<EvalInstance> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, EvalInstance> = HashMap::new();
    for (table, sentence) in pairs {
        let key = crate::corpus::serialize_table(table);
        grouped
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                EvalInstance { table: table.clone(), references: Vec::new() }
            })
            .references
            .push(sentence.clone());
    }
    order
        .into_iter()
        .map(|k| grouped.remove(&k).expect("grouped by construction"))
        .collect()
}

/// Fraction of generated sentences whose content is faithful to their input
/// table: every token drawn from the closed value vocabulary must be covered
/// by a span matching the table's own values, and at least one slot must be
/// realized. Validated by delexicalizing the output against the table.
pub fn content_accuracy(
    outputs: &[(Table, Vec<String>)],
    value_tokens: &std::collections::HashSet<String>,
) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let accurate = outputs
        .iter()
        .filter(|(table, tokens)| {
            let (template, alignment) = crate::corpus::delexicalize(table, tokens);
            if alignment.is_empty() {
                return false;
            }
            tokens
                .iter()
                .zip(&template)
                .all(|(tok, tpl)| !value_tokens.contains(tok) || tpl == crate::corpus::ENT_TOKEN)
        })
        .count();
    accurate as f64 / outputs.len() as f64
}

/// Default temperature ladder for the quality-diversity sweep.
pub const SWEEP_TAUS: [f64; 7] = [0.1, 0.2, 0.3, 0.5, 0.6, 0.9, 1.0];

/// Temperature sweep: one [`EvalReport`] row per temperature.
pub fn tradeoff_sweep(
    ckpt: &Checkpoint,
    instances: &[EvalInstance],
    taus: &[f64],
    n_per_table: usize,
    seed: u64,
) -> Result<Vec<EvalReport>, MetricsError> {
    taus.iter()
        .map(|&tau| {
            evaluate_generation(ckpt, instances, Strategy::Temperature(tau), n_per_table, seed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identical_candidate_and_reference_scores_100() {
        let c = vec![toks("the cat sat on the mat")];
        let r = vec![vec![toks("the cat sat on the mat")]];
        let b = bleu4(&c, &r).unwrap();
        assert_eq!(b, 100.0);
        assert_eq!(rouge_l_f(&c, &r).unwrap(), 100.0);
    }

    #[test]
    fn disjoint_candidate_scores_near_zero() {
        let c = vec![toks("alpha beta gamma delta")];
        let r = vec![vec![toks("one two three four")]];
        let b = bleu4(&c, &r).unwrap();
        assert!(b < 0.1, "smoothed BLEU should be near zero, got {b}");
        assert_eq!(rouge_l_f(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_hand_counted_example() {
        // candidate "the cat sat" vs reference "the cat sat down":
        // precisions 3/3, 2/2, 1/1 and a smoothed 4-gram (no 4-grams in a
        // 3-token candidate: eps/eps = 1); brevity penalty exp(1 - 4/3).
        let c = vec![toks("the cat sat")];
        let r = vec![vec![toks("the cat sat down")]];
        let got = bleu4(&c, &r).unwrap();
        let p = [3.0 / 3.0, 2.0 / 2.0, 1.0 / 1.0, SMOOTH_EPS / SMOOTH_EPS];
        let log_mean = p.iter().map(|v: &f64| v.ln()).sum::<f64>() / 4.0;
        let expect = 100.0 * (1.0f64 - 4.0 / 3.0).exp() * log_mean.exp();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn bleu_is_invariant_to_pair_order() {
        let c1 = toks("a b c d e");
        let c2 = toks("x y z w q");
        let r1 = vec![toks("a b c d f")];
        let r2 = vec![toks("x y z v u")];
        let fwd = bleu4(&[c1.clone(), c2.clone()], &[r1.clone(), r2.clone()]).unwrap();
        let rev = bleu4(&[c2, c1], &[r2, r1]).unwrap();
        assert!((fwd - rev).abs() < 1e-12);
    }

    #[test]
    fn bleu_rejects_empty_and_mismatched_inputs() {
        assert!(matches!(bleu4(&[], &[]), Err(MetricsError::EmptyCandidates)));
        assert!(matches!(
            bleu4(&[toks("a")], &[]),
            Err(MetricsError::CountMismatch(1, 0))
        ));
    }

    #[test]
    fn self_bleu_of_identical_sentences_is_100() {
        let s = toks("every sentence looks the same here");
        let set = vec![s.clone(), s.clone(), s.clone(), s];
        assert_eq!(self_bleu(&set).unwrap(), 100.0);
    }

    #[test]
    fn self_bleu_of_disjoint_sentences_is_near_zero() {
        let set = vec![
            toks("alpha beta gamma delta"),
            toks("one two three four"),
            toks("red green blue yellow"),
        ];
        assert!(self_bleu(&set).unwrap() < 0.1);
    }

    #[test]
    fn self_bleu_rejects_single_sentence() {
        assert!(matches!(
            self_bleu(&[toks("alone")]),
            Err(MetricsError::TooFewSentences(1))
        ));
    }

    #[test]
    fn self_bleu_matches_manual_composition_and_permutation_invariance() {
        let a = toks("the quick brown fox jumps high");
        let b = toks("the quick brown dog runs fast");
        let c = toks("a slow green turtle walks far");
        let set = vec![a.clone(), b.clone(), c.clone()];
        let got = self_bleu(&set).unwrap();
        let manual = (bleu4(&[a.clone()], &[vec![b.clone(), c.clone()]]).unwrap()
            + bleu4(&[b.clone()], &[vec![a.clone(), c.clone()]]).unwrap()
            + bleu4(&[c.clone()], &[vec![a.clone(), b.clone()]]).unwrap())
            / 3.0;
        assert!((got - manual).abs() < 1e-12);

        let permuted = vec![c, a, b];
        assert!((self_bleu(&permuted).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn rouge_matches_hand_computed_lcs_example() {
        // candidate "a b c d", reference "a c d": LCS 3, P=3/4, R=1,
        // F = 2 * 0.75 / 1.75.
        let got = rouge_l_f(&[toks("a b c d")], &[vec![toks("a c d")]]).unwrap();
        let expect = 100.0 * 2.0 * 0.75 / 1.75;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn scores_stay_in_range() {
        let mut rng = crate::rng::stream(3, "bleu");
        let words = ["a", "b", "c", "d", "e", "f"];
        for _ in 0..30 {
            let sample = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
                (0..rand::Rng::random_range(rng, 4..9))
                    .map(|_| words[rand::Rng::random_range(rng, 0..words.len())].to_string())
                    .collect()
            };
            let c = vec![sample(&mut rng), sample(&mut rng)];
            let r = vec![vec![sample(&mut rng)], vec![sample(&mut rng)]];
            let b = bleu4(&c, &r).unwrap();
            assert!((0.0..=100.0).contains(&b));
            let rl = rouge_l_f(&c, &r).unwrap();
            assert!((0.0..=100.0).contains(&rl));
        }
    }

    #[test]
    fn report_csv_marks_missing_fields() {
        let report = EvalReport {
            tau: None,
            bleu4: 61.5,
            self_bleu: None,
            rouge_l: 70.25,
            n_tables: 10,
            n_per_table: 1,
        };
        assert_eq!(report.csv_row(), "na,61.5000,na,70.2500,10,1");
    }
}
