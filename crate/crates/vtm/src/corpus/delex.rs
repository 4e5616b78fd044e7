//! Delexicalization: replace sentence tokens that realize table values with
//! the `<ent>` placeholder, producing the sentence's template.

use super::{CorpusError, Table, ENT_TOKEN};

/// One replaced span: `len` tokens starting at `start` came from `field`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanAlignment {
    pub start: usize,
    pub len: usize,
    pub field: String,
}

/// Replaces each maximal contiguous token span that exactly matches the
/// ordered value tokens of some field with `<ent>` (token-for-token, so the
/// output length equals the input length). Longer spans win over shorter
/// ones; among equal lengths the field that appears earlier in the table
/// wins. A sentence sharing no tokens with the table is returned unchanged.
pub fn delexicalize(table: &Table, tokens: &[String]) -> (Vec<String>, Vec<SpanAlignment>) {
    let fields = table.field_order();
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new(); // (len, field_idx, start)
    for (fi, field) in fields.iter().enumerate() {
        let value = table.field_value(field).expect("field from field_order");
        let len = value.len();
        if len == 0 || len > tokens.len() {
            continue;
        }
        for start in 0..=tokens.len() - len {
            if tokens[start..start + len]
                .iter()
                .zip(&value)
                .all(|(t, v)| t == v)
            {
                candidates.push((len, fi, start));
            }
        }
    }
    // Longest span first, then leftmost field, then leftmost position.
    candidates.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut claimed = vec![false; tokens.len()];
    let mut alignment = Vec::new();
    for (len, fi, start) in candidates {
        if claimed[start..start + len].iter().any(|&c| c) {
            continue;
        }
        for c in &mut claimed[start..start + len] {
            *c = true;
        }
        alignment.push(SpanAlignment {
            start,
            len,
            field: fields[fi].to_string(),
        });
    }
    alignment.sort_unstable_by_key(|a| a.start);

    let template = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if claimed[i] {
                ENT_TOKEN.to_string()
            } else {
                t.clone()
            }
        })
        .collect();
    (template, alignment)
}

/// Collapses each run of consecutive `<ent>` tokens to a single `<ent>`,
/// giving a slot-level template signature that is invariant to the token
/// length of the values filling the slots.
pub fn template_signature(template: &[String]) -> String {
    let mut out: Vec<&str> = Vec::with_capacity(template.len());
    for tok in template {
        if tok == ENT_TOKEN && out.last() == Some(&ENT_TOKEN) {
            continue;
        }
        out.push(tok);
    }
    out.join(" ")
}

/// Restores the original sentence from a template and the alignment produced
/// by [`delexicalize`].
pub fn relexicalize(
    template: &[String],
    table: &Table,
    alignment: &[SpanAlignment],
) -> Result<Vec<String>, CorpusError> {
    let mut out: Vec<String> = template.to_vec();
    for span in alignment {
        let value = table
            .field_value(&span.field)
            .ok_or_else(|| CorpusError::UnknownField(span.field.clone()))?;
        if value.len() != span.len || span.start + span.len > out.len() {
            return Err(CorpusError::Invalid(format!(
                "alignment span at {} (len {}) does not fit field `{}`",
                span.start, span.len, span.field
            )));
        }
        for (i, v) in value.iter().enumerate() {
            out[span.start + i] = v.to_string();
        }
    }
    Ok(out)
}
