//! Synthetic restaurant-description corpus with a known template oracle.
//!
//! Sentences are produced by slot-filling fixed frames with field values
//! drawn from small closed sets, so the true template id of every example is
//! known and delexicalization can be validated exactly. The value vocabulary
//! is disjoint from the frame words, which makes "does this generated token
//! come from the input table?" a well-defined question.

use rand::Rng;

use super::{CorpusError, Record, Table};
use crate::rng;

/// Field names, in table order.
const FIELDS: [&str; 5] = ["name", "food", "area", "price", "rating"];

const NAMES: [&str; 8] = [
    "alimento",
    "bluebird",
    "caprice",
    "dorado",
    "eastgate",
    "firefly",
    "golden fork",
    "harbor light",
];
const FOODS: [&str; 6] = ["french", "italian", "japanese", "mexican", "thai", "indian"];
const AREAS: [&str; 4] = ["riverside", "downtown", "city centre", "old town"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const RATINGS: [&str; 3] = ["low", "average", "high"];

/// Sentence frames. `{field}` slots are filled with the table's value tokens.
const FRAMES: [&str; 8] = [
    "{name} serves {food} food in the {area} area .",
    "located in the {area} area , {name} serves {food} food .",
    "{name} is a {food} restaurant with {price} prices and a {rating} rating .",
    "the {food} restaurant {name} has {price} prices .",
    "{name} offers {food} dishes at {price} prices in the {area} area .",
    "with a {rating} rating , {name} is a {food} spot in the {area} area .",
    "{name} has a {rating} rating and {price} prices .",
    "for {food} food try {name} near the {area} area .",
];

/// Whether raw sentences reuse the paired template pool or a disjoint half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateOverlap {
    Shared,
    Disjoint,
}

#[derive(Debug, Clone)]
pub struct ToyOptions {
    pub n_paired: usize,
    pub n_raw: usize,
    pub n_templates: usize,
    pub seed: u64,
    pub raw_templates: TemplateOverlap,
}

/// One generated example. `table` is `None` for raw sentences (the table was
/// sampled and dropped). `sentence` is already tokenized.
#[derive(Debug, Clone)]
pub struct ToyExample {
    pub table: Option<Table>,
    pub sentence: Vec<String>,
    pub template_id: usize,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub paired: Vec<ToyExample>,
    pub raw: Vec<ToyExample>,
    /// Held-out tables, each realized under every available template so the
    /// evaluation can group them into multi-reference sets.
    pub held_out: Vec<ToyExample>,
}

fn value_set(field: &str) -> &'static [&'static str] {
    match field {
        "name" => &NAMES,
        "food" => &FOODS,
        "area" => &AREAS,
        "price" => &PRICES,
        "rating" => &RATINGS,
        _ => unreachable!("unknown toy field"),
    }
}

fn sample_table(rng: &mut impl Rng) -> Table {
    let mut records = Vec::new();
    for field in FIELDS {
        let values = value_set(field);
        let value = values[rng.random_range(0..values.len())];
        for (i, tok) in value.split_whitespace().enumerate() {
            records.push(Record {
                field: field.to_string(),
                position: i + 1,
                value: tok.to_string(),
            });
        }
    }
    Table::new(records).expect("toy tables are well-formed")
}

fn fill_frame(frame: &str, table: &Table) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in frame.split_whitespace() {
        if let Some(field) = piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            for tok in table.field_value(field).expect("frame field present") {
                tokens.push(tok.to_string());
            }
        } else {
            tokens.push(piece.to_string());
        }
    }
    tokens
}

fn make_example(rng: &mut impl Rng, template_pool: &[usize], keep_table: bool) -> ToyExample {
    let template_id = template_pool[rng.random_range(0..template_pool.len())];
    let table = sample_table(rng);
    let sentence = fill_frame(FRAMES[template_id], &table);
    ToyExample {
        table: keep_table.then_some(table),
        sentence,
        template_id,
    }
}

/// Generates paired, raw and held-out sets. Held-out size is one twentieth of
/// the paired size (at least 10 tables), with every template realized per
/// table.
pub fn generate_toy_corpus(opts: &ToyOptions) -> Result<ToyCorpus, CorpusError> {
    if opts.n_templates < 1 || opts.n_templates > FRAMES.len() {
        return Err(CorpusError::Invalid(format!(
            "n_templates must be in 1..={}, got {}",
            FRAMES.len(),
            opts.n_templates
        )));
    }
    let paired_pool: Vec<usize> = (0..opts.n_templates).collect();
    let raw_pool: Vec<usize> = match opts.raw_templates {
        TemplateOverlap::Shared => paired_pool.clone(),
        TemplateOverlap::Disjoint => {
            if opts.n_templates < 2 {
                return Err(CorpusError::Invalid(
                    "disjoint raw templates need n_templates >= 2".into(),
                ));
            }
            (opts.n_templates / 2..opts.n_templates).collect()
        }
    };
    let paired_pool: Vec<usize> = match opts.raw_templates {
        TemplateOverlap::Shared => paired_pool,
        TemplateOverlap::Disjoint => (0..opts.n_templates / 2).collect(),
    };

    let mut rng = rng::stream(opts.seed, "toy-corpus");
    let paired: Vec<ToyExample> = (0..opts.n_paired)
        .map(|_| make_example(&mut rng, &paired_pool, true))
        .collect();
    let raw: Vec<ToyExample> = (0..opts.n_raw)
        .map(|_| make_example(&mut rng, &raw_pool, false))
        .collect();

    let n_held = (opts.n_paired / 20).max(10);
    let mut held_out = Vec::new();
    for _ in 0..n_held {
        let table = sample_table(&mut rng);
        for &tid in &paired_pool {
            held_out.push(ToyExample {
                table: Some(table.clone()),
                sentence: fill_frame(FRAMES[tid], &table),
                template_id: tid,
            });
        }
    }

    Ok(ToyCorpus { paired, raw, held_out })
}

/// All value tokens the toy generator can emit, for content-accuracy checks.
pub fn toy_value_tokens() -> Vec<String> {
    let mut out = Vec::new();
    for field in FIELDS {
        for v in value_set(field) {
            for tok in v.split_whitespace() {
                if !out.contains(&tok.to_string()) {
                    out.push(tok.to_string());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::delexicalize;
    use std::collections::HashSet;

    fn opts(n_paired: usize, n_raw: usize, n_templates: usize, seed: u64) -> ToyOptions {
        ToyOptions {
            n_paired,
            n_raw,
            n_templates,
            seed,
            raw_templates: TemplateOverlap::Shared,
        }
    }

    #[test]
    fn single_template_gives_identical_delexicalized_outputs() {
        let corpus = generate_toy_corpus(&opts(30, 0, 1, 5)).unwrap();
        let mut templates = HashSet::new();
        for ex in &corpus.paired {
            let (tpl, _) = delexicalize(ex.table.as_ref().unwrap(), &ex.sentence);
            templates.insert(crate::corpus::template_signature(&tpl));
        }
        assert_eq!(templates.len(), 1);
    }

    #[test]
    fn paired_raw_ratio_is_one_to_ten() {
        let corpus = generate_toy_corpus(&opts(1000, 10000, 8, 7)).unwrap();
        assert_eq!(corpus.paired.len() * 10, corpus.raw.len());
    }

    #[test]
    fn template_distribution_is_uniform_by_chi_square() {
        let k = 8;
        let corpus = generate_toy_corpus(&opts(4000, 0, k, 13)).unwrap();
        let mut counts = vec![0f64; k];
        for ex in &corpus.paired {
            counts[ex.template_id] += 1.0;
        }
        let expected = corpus.paired.len() as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // chi-square with k-1 df has mean k-1 and variance 2(k-1)
        let df = (k - 1) as f64;
        let bound = df + 3.0 * (2.0 * df).sqrt();
        assert!(chi2 <= bound, "chi2 {chi2} exceeds 3-sigma bound {bound}");
    }

    #[test]
    fn round_trip_succeeds_on_every_paired_example() {
        let corpus = generate_toy_corpus(&opts(200, 0, 8, 21)).unwrap();
        for ex in &corpus.paired {
            let table = ex.table.as_ref().unwrap();
            let (tpl, align) = delexicalize(table, &ex.sentence);
            assert_eq!(tpl.len(), ex.sentence.len());
            let restored = crate::corpus::relexicalize(&tpl, table, &align).unwrap();
            assert_eq!(restored, ex.sentence, "round trip must be exact");
        }
    }

    #[test]
    fn disjoint_raw_templates_do_not_overlap_paired() {
        let corpus = generate_toy_corpus(&ToyOptions {
            n_paired: 100,
            n_raw: 100,
            n_templates: 8,
            seed: 3,
            raw_templates: TemplateOverlap::Disjoint,
        })
        .unwrap();
        let paired_ids: HashSet<usize> = corpus.paired.iter().map(|e| e.template_id).collect();
        let raw_ids: HashSet<usize> = corpus.raw.iter().map(|e| e.template_id).collect();
        assert!(paired_ids.is_disjoint(&raw_ids));
    }

    #[test]
    fn held_out_realizes_every_template_per_table() {
        let corpus = generate_toy_corpus(&opts(100, 0, 4, 9)).unwrap();
        assert_eq!(corpus.held_out.len() % 4, 0);
        let per_table = &corpus.held_out[0..4];
        let ids: HashSet<usize> = per_table.iter().map(|e| e.template_id).collect();
        assert_eq!(ids.len(), 4);
        let tables: HashSet<String> = per_table
            .iter()
            .map(|e| crate::corpus::serialize_table(e.table.as_ref().unwrap()))
            .collect();
        assert_eq!(tables.len(), 1, "one table realized under each template");
    }

    #[test]
    fn frame_words_and_value_tokens_are_disjoint() {
        let values: HashSet<String> = toy_value_tokens().into_iter().collect();
        for frame in FRAMES {
            for piece in frame.split_whitespace() {
                if !piece.starts_with('{') {
                    assert!(
                        !values.contains(piece),
                        "frame word `{piece}` collides with a value token"
                    );
                }
            }
        }
    }
}
