//! Corpus ingestion: tables, tokenization, delexicalization, vocabulary and
//! batching, plus a synthetic toy corpus with a known template oracle.

mod delex;
mod toy;

pub use delex::{delexicalize, relexicalize, template_signature, SpanAlignment};
pub use toy::{generate_toy_corpus, toy_value_tokens, ToyCorpus, ToyExample, ToyOptions, TemplateOverlap};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed table entry `{0}`: expected `field_pos:value`")]
    MalformedEntry(String),
    #[error("table entry `{0}`: position must be a positive integer")]
    BadPosition(String),
    #[error("empty table")]
    EmptyTable,
    #[error("field `{0}` has non-contiguous positions")]
    NonContiguousField(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("alignment references field `{0}` absent from table")]
    UnknownField(String),
    #[error("{0}")]
    Invalid(String),
}

/// One field-position-value triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub field: String,
    pub position: usize,
    pub value: String,
}

/// A table: an ordered set of records. For every distinct field the positions
/// form a contiguous `1..=n` range, so each field carries an ordered
/// multi-token value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    records: Vec<Record>,
}

impl Table {
    pub fn new(records: Vec<Record>) -> Result<Self, CorpusError> {
        if records.is_empty() {
            return Err(CorpusError::EmptyTable);
        }
        for r in &records {
            if r.position == 0 {
                return Err(CorpusError::BadPosition(format!(
                    "{}_{}:{}",
                    r.field, r.position, r.value
                )));
            }
            if r.field.is_empty() || r.value.is_empty() {
                return Err(CorpusError::Invalid(
                    "record field and value must be non-empty".into(),
                ));
            }
        }
        let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
        for r in &records {
            positions.entry(r.field.as_str()).or_default().push(r.position);
        }
        for (field, mut ps) in positions {
            ps.sort_unstable();
            ps.dedup();
            if ps[0] != 1 || ps[ps.len() - 1] != ps.len() {
                return Err(CorpusError::NonContiguousField(field.to_string()));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Field names in first-occurrence order.
    pub fn field_order(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.field.as_str()) {
                seen.push(r.field.as_str());
            }
        }
        seen
    }

    /// Value tokens of `field` ordered by position, or `None` if absent.
    pub fn field_value(&self, field: &str) -> Option<Vec<&str>> {
        let mut with_pos: Vec<(usize, &str)> = self
            .records
            .iter()
            .filter(|r| r.field == field)
            .map(|r| (r.position, r.value.as_str()))
            .collect();
        if with_pos.is_empty() {
            return None;
        }
        with_pos.sort_unstable_by_key(|&(p, _)| p);
        Some(with_pos.into_iter().map(|(_, v)| v).collect())
    }
}

/// Parses a WikiBio-style serialized table: tab-separated `field_pos:value`
/// entries, where `pos` is the 1-based index of the value token within the
/// field.
pub fn parse_table(line: &str) -> Result<Table, CorpusError> {
    let mut records = Vec::new();
    for entry in line.split('\t') {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let (head, value) = entry
            .split_once(':')
            .ok_or_else(|| CorpusError::MalformedEntry(entry.to_string()))?;
        let (field, pos) = head
            .rsplit_once('_')
            .ok_or_else(|| CorpusError::MalformedEntry(entry.to_string()))?;
        let position: usize = pos
            .parse()
            .map_err(|_| CorpusError::BadPosition(entry.to_string()))?;
        if position == 0 {
            return Err(CorpusError::BadPosition(entry.to_string()));
        }
        if field.is_empty() || value.is_empty() {
            return Err(CorpusError::MalformedEntry(entry.to_string()));
        }
        records.push(Record {
            field: field.to_string(),
            position,
            value: value.to_string(),
        });
    }
    Table::new(records)
}

/// Inverse of [`parse_table`].
pub fn serialize_table(table: &Table) -> String {
    table
        .records()
        .iter()
        .map(|r| format!("{}_{}:{}", r.field, r.position, r.value))
        .collect::<Vec<_>>()
        .join("\t")
}

/// Lowercases, detaches leading/trailing punctuation, splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        let mut lead = Vec::new();
        while start < end && chars[start].is_ascii_punctuation() {
            lead.push(chars[start].to_string());
            start += 1;
        }
        let mut trail = Vec::new();
        while end > start && chars[end - 1].is_ascii_punctuation() {
            trail.push(chars[end - 1].to_string());
            end -= 1;
        }
        tokens.extend(lead);
        if start < end {
            tokens.push(chars[start..end].iter().collect());
        }
        tokens.extend(trail.into_iter().rev());
    }
    tokens
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const ENT: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
pub const ENT_TOKEN: &str = "<ent>";

const RESERVED: [&str; 5] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, ENT_TOKEN];

/// Reserved id 0 in the field vocabulary for unseen field names.
pub const UNK_FIELD: usize = 0;
const UNK_FIELD_TOKEN: &str = "<unk_field>";

/// Word and field-name vocabularies with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
    fields: Vec<String>,
    #[serde(skip)]
    field_index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_lists(words: Vec<String>, fields: Vec<String>) -> Self {
        let word_index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let field_index = fields
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        Self { words, word_index, fields, field_index }
    }

    /// Rebuild the lookup maps after deserialization.
    pub fn rebuild_index(&mut self) {
        self.word_index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        self.field_index = self
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.word_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn field_id(&self, field: &str) -> usize {
        self.field_index.get(field).copied().unwrap_or(UNK_FIELD)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.word_id(t)).collect()
    }

    /// Decodes ids to tokens, skipping padding and sequence markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.words[id].clone())
            .collect()
    }
}

/// Builds a vocabulary from tokenized sentences and the tables whose field
/// names it must cover. Tokens with corpus count below `min_count` map to
/// `<unk>`. Ids are assigned frequency-descending, ties broken
/// lexicographically, so construction is deterministic.
pub fn build_vocab(
    sentences: &[Vec<String>],
    tables: &[Table],
    min_count: usize,
) -> Result<Vocabulary, CorpusError> {
    if sentences.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    // Table value tokens participate so the value-embedding table can resolve
    // them; they obey the same min_count rule.
    for table in tables {
        for r in table.records() {
            *counts.entry(r.value.as_str()).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, c)| c >= min_count && !RESERVED.contains(&w))
        .collect();
    kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    words.extend(kept.into_iter().map(|(w, _)| w.to_string()));

    let mut fields = vec![UNK_FIELD_TOKEN.to_string()];
    let mut seen: Vec<&str> = Vec::new();
    for table in tables {
        for r in table.records() {
            if !seen.contains(&r.field.as_str()) {
                seen.push(r.field.as_str());
            }
        }
    }
    seen.sort_unstable();
    fields.extend(seen.into_iter().map(|s| s.to_string()));

    Ok(Vocabulary::from_lists(words, fields))
}

/// A table-sentence pair after encoding. `sentence` and `template` end with
/// `EOS` and have identical length (delexicalization is token-for-token).
#[derive(Debug, Clone)]
pub struct PairedExample {
    pub table: Table,
    pub sentence: Vec<usize>,
    pub template: Vec<usize>,
}

/// A sentence with no aligned table, ending with `EOS`.
#[derive(Debug, Clone)]
pub struct RawExample {
    pub sentence: Vec<usize>,
}

/// Truncation bound applied during encoding.
pub const MAX_SENTENCE_LEN: usize = 60;

/// Encodes a tokenized pair into ids: truncates to [`MAX_SENTENCE_LEN`],
/// delexicalizes against the table, appends `EOS` to both sequences.
pub fn encode_paired(
    table: Table,
    tokens: &[String],
    vocab: &Vocabulary,
) -> PairedExample {
    let tokens = &tokens[..tokens.len().min(MAX_SENTENCE_LEN)];
    let (template_tokens, _) = delexicalize(&table, tokens);
    let mut sentence = vocab.encode(tokens);
    sentence.push(EOS);
    let mut template = vocab.encode(&template_tokens);
    template.push(EOS);
    PairedExample { table, sentence, template }
}

pub fn encode_raw(tokens: &[String], vocab: &Vocabulary) -> RawExample {
    let tokens = &tokens[..tokens.len().min(MAX_SENTENCE_LEN)];
    let mut sentence = vocab.encode(tokens);
    sentence.push(EOS);
    RawExample { sentence }
}

/// One padded minibatch. `tokens[i]` is padded with `PAD` to the batch max
/// length; `mask[i][t]` is 1.0 for real positions and 0.0 for padding.
/// `example_indices` point back into the dataset the batch was drawn from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub example_indices: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.example_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_indices.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }
}

/// Shuffles example indices with a seeded RNG, groups them into batches of
/// `batch_size`, and pads each batch to its own max length.
pub fn make_batches<S: AsRef<[usize]>>(
    examples: &[S],
    batch_size: usize,
    seed: u64,
) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng::stream(seed, "batch-order");
    order.shuffle(&mut rng);

    order
        .chunks(batch_size)
        .map(|chunk| {
            let max_len = chunk
                .iter()
                .map(|&i| examples[i].as_ref().len())
                .max()
                .unwrap_or(0);
            let mut tokens = Vec::with_capacity(chunk.len());
            let mut mask = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let seq = examples[i].as_ref();
                let mut row = seq.to_vec();
                row.resize(max_len, PAD);
                let mut m = vec![1.0; seq.len()];
                m.resize(max_len, 0.0);
                tokens.push(row);
                mask.push(m);
            }
            Batch {
                example_indices: chunk.to_vec(),
                tokens,
                mask,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_table_two_records() {
        let t = parse_table("name_1:John\tname_2:Lennon").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.records()[0], Record {
            field: "name".into(),
            position: 1,
            value: "John".into()
        });
        assert_eq!(t.records()[1].value, "Lennon");
    }

    #[test]
    fn parse_table_single_record() {
        let t = parse_table("food_1:French").unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn parse_table_rejects_position_zero() {
        let err = parse_table("name_0:x").unwrap_err();
        assert!(matches!(err, CorpusError::BadPosition(e) if e.contains("name_0:x")));
    }

    #[test]
    fn parse_table_rejects_missing_colon_and_bad_position() {
        assert!(matches!(
            parse_table("name_1 John"),
            Err(CorpusError::MalformedEntry(_))
        ));
        assert!(matches!(
            parse_table("name_x:John"),
            Err(CorpusError::BadPosition(_))
        ));
    }

    #[test]
    fn parse_table_handles_underscored_fields() {
        let t = parse_table("birth_date_1:1889").unwrap();
        assert_eq!(t.records()[0].field, "birth_date");
        assert_eq!(t.records()[0].position, 1);
    }

    #[test]
    fn table_rejects_non_contiguous_positions() {
        assert!(matches!(
            parse_table("name_1:a\tname_3:b"),
            Err(CorpusError::NonContiguousField(_))
        ));
    }

    #[test]
    fn tokenize_lowercases_and_detaches_punctuation() {
        assert_eq!(
            tokenize("It serves French food."),
            vec!["it", "serves", "french", "food", "."]
        );
        assert_eq!(tokenize("(riverside)"), vec!["(", "riverside", ")"]);
    }

    #[test]
    fn build_vocab_applies_min_count_and_unk() {
        let sentences = vec![tokenize("a a b")];
        let v = build_vocab(&sentences, &[], 2).unwrap();
        assert_ne!(v.word_id("a"), UNK);
        assert_eq!(v.word_id("b"), UNK);
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let sentences = vec![tokenize("c a b b a"), tokenize("a d d")];
        let v1 = build_vocab(&sentences, &[], 1).unwrap();
        let v2 = build_vocab(&sentences, &[], 1).unwrap();
        assert_eq!(v1, v2);
        // frequency-descending, lexicographic ties: a(3), b(2), d(2), c(1)
        assert_eq!(v1.word(5), "a");
        assert_eq!(v1.word(6), "b");
        assert_eq!(v1.word(7), "d");
        assert_eq!(v1.word(8), "c");
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        assert!(matches!(
            build_vocab(&[], &[], 1),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn vocab_size_matches_independent_frequency_scan() {
        let corpus = toy::generate_toy_corpus(&ToyOptions {
            n_paired: 50,
            n_raw: 100,
            n_templates: 4,
            seed: 11,
            raw_templates: TemplateOverlap::Shared,
        })
        .unwrap();
        let sentences: Vec<Vec<String>> = corpus
            .paired
            .iter()
            .chain(corpus.raw.iter())
            .map(|e| e.sentence.clone())
            .collect();
        let tables: Vec<Table> = corpus
            .paired
            .iter()
            .filter_map(|e| e.table.clone())
            .collect();
        let min_count = 2;
        let v = build_vocab(&sentences, &tables, min_count).unwrap();

        // Independent frequency oracle over the same streams.
        let mut freq: HashMap<String, usize> = HashMap::new();
        for s in &sentences {
            for t in s {
                *freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        for t in &tables {
            for r in t.records() {
                *freq.entry(r.value.clone()).or_insert(0) += 1;
            }
        }
        let expected = freq.values().filter(|&&c| c >= min_count).count() + RESERVED.len();
        assert_eq!(v.word_count(), expected);
        assert!(v.word_count() <= 200, "toy vocabulary stays small");
    }

    #[test]
    fn make_batches_sizes_and_determinism() {
        let examples: Vec<Vec<usize>> = (0..10).map(|i| vec![5; i % 4 + 1]).collect();
        let b1 = make_batches(&examples, 4, 9);
        assert_eq!(b1.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b2 = make_batches(&examples, 4, 9);
        for (x, y) in b1.iter().zip(&b2) {
            assert_eq!(x.example_indices, y.example_indices);
            assert_eq!(x.tokens, y.tokens);
        }
    }

    #[test]
    fn mask_sum_equals_unpadded_token_count() {
        let examples: Vec<Vec<usize>> = (0..23).map(|i| vec![6; i % 7 + 1]).collect();
        let total: usize = examples.iter().map(Vec::len).sum();
        let batches = make_batches(&examples, 5, 3);
        let mask_sum: f64 = batches
            .iter()
            .flat_map(|b| b.mask.iter())
            .flatten()
            .sum();
        assert_eq!(mask_sum as usize, total);
    }

    #[test]
    fn batching_partitions_the_dataset() {
        let examples: Vec<Vec<usize>> = (0..17).map(|i| vec![i]).collect();
        let batches = make_batches(&examples, 4, 1);
        let mut seen: Vec<usize> = batches
            .iter()
            .flat_map(|b| b.example_indices.iter().copied())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..17).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(
            fields in proptest::collection::vec("[a-z]{1,6}", 1..4),
            lens in proptest::collection::vec(1usize..4, 1..4),
        ) {
            let mut records = Vec::new();
            for (fi, field) in fields.iter().enumerate() {
                let len = lens[fi % lens.len()];
                for p in 1..=len {
                    records.push(Record {
                        field: format!("{field}{fi}"),
                        position: p,
                        value: format!("v{fi}p{p}"),
                    });
                }
            }
            let table = Table::new(records).unwrap();
            let round = parse_table(&serialize_table(&table)).unwrap();
            prop_assert_eq!(table, round);
        }
    }
}
