//! Table encoder: embeds each field-position-value record, applies a shared
//! tanh projection, and max-pools over records into one vector per table. A
//! learned linear projection maps the pooled vector to the content-latent
//! dimension.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{Table, Vocabulary};
use crate::model::{embedding_uniform, fan_in_uniform, ModelDims, ParamGroup, Registry};
use crate::tensor::{Graph, Mat, Segments, Tx};

/// Positions beyond this are clipped to the last embedding row.
pub const MAX_POSITION: usize = 30;

#[derive(Debug, Clone)]
pub struct TableEncoderParams {
    pub field_emb: Mat, // [fields, d]
    pub pos_emb: Mat,   // [MAX_POSITION, d]
    pub value_emb: Mat, // [vocab, d]
    pub w: Mat,         // [3d, d_t]
    pub b: Mat,         // [1, d_t]
    pub proj_w: Mat,    // [d_t, d_c]
    pub proj_b: Mat,    // [1, d_c]
}

#[derive(Clone, Copy)]
pub struct TableEncoderTx {
    pub field_emb: Tx,
    pub pos_emb: Tx,
    pub value_emb: Tx,
    pub w: Tx,
    pub b: Tx,
    pub proj_w: Tx,
    pub proj_b: Tx,
}

impl TableEncoderParams {
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            field_emb: embedding_uniform(dims.fields, dims.embed, rng),
            pos_emb: embedding_uniform(MAX_POSITION, dims.embed, rng),
            value_emb: embedding_uniform(dims.vocab, dims.embed, rng),
            w: fan_in_uniform(3 * dims.embed, dims.table, rng),
            b: Mat::zeros((1, dims.table)),
            proj_w: fan_in_uniform(dims.table, dims.content_latent, rng),
            proj_b: Mat::zeros((1, dims.content_latent)),
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Registry) -> TableEncoderTx {
        let gr = ParamGroup::TableEncoder;
        TableEncoderTx {
            field_emb: reg.bind(g, gr, "table.field_emb", &self.field_emb),
            pos_emb: reg.bind(g, gr, "table.pos_emb", &self.pos_emb),
            value_emb: reg.bind(g, gr, "table.value_emb", &self.value_emb),
            w: reg.bind(g, gr, "table.w", &self.w),
            b: reg.bind(g, gr, "table.b", &self.b),
            proj_w: reg.bind(g, gr, "table.proj_w", &self.proj_w),
            proj_b: reg.bind(g, gr, "table.proj_b", &self.proj_b),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(ParamGroup, &'static str, &Mat)) {
        let gr = ParamGroup::TableEncoder;
        f(gr, "table.field_emb", &self.field_emb);
        f(gr, "table.pos_emb", &self.pos_emb);
        f(gr, "table.value_emb", &self.value_emb);
        f(gr, "table.w", &self.w);
        f(gr, "table.b", &self.b);
        f(gr, "table.proj_w", &self.proj_w);
        f(gr, "table.proj_b", &self.proj_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(ParamGroup, &'static str, &mut Mat)) {
        let gr = ParamGroup::TableEncoder;
        f(gr, "table.field_emb", &mut self.field_emb);
        f(gr, "table.pos_emb", &mut self.pos_emb);
        f(gr, "table.value_emb", &mut self.value_emb);
        f(gr, "table.w", &mut self.w);
        f(gr, "table.b", &mut self.b);
        f(gr, "table.proj_w", &mut self.proj_w);
        f(gr, "table.proj_b", &mut self.proj_b);
    }
}

/// Encoded batch of tables: per-record vectors (for attention), the pooled
/// per-table vector, and its projection to the content dimension.
pub struct TableBatchEnc {
    pub records: Tx,  // [sum K, d_t]
    pub segs: Segments,
    pub pooled: Tx,   // [B, d_t]
    pub content: Tx,  // [B, d_c]
}

/// Builds the record ids for a batch of tables.
fn record_ids(tables: &[&Table], vocab: &Vocabulary) -> (Vec<usize>, Vec<usize>, Vec<usize>, Segments) {
    let mut field_ids = Vec::new();
    let mut pos_ids = Vec::new();
    let mut value_ids = Vec::new();
    let mut segs = Vec::new();
    for table in tables {
        let start = field_ids.len();
        for r in table.records() {
            field_ids.push(vocab.field_id(&r.field));
            pos_ids.push(r.position.min(MAX_POSITION) - 1);
            value_ids.push(vocab.word_id(&r.value));
        }
        segs.push((start, table.len()));
    }
    (field_ids, pos_ids, value_ids, segs)
}

/// Encodes a batch of tables on the tape:
/// `tanh(W [e_f, e_p, e_v] + b)` per record, columnwise max over each
/// table's records, then the linear projection to the content dimension.
pub fn encode_tables(
    g: &mut Graph,
    p: &TableEncoderTx,
    tables: &[&Table],
    vocab: &Vocabulary,
) -> TableBatchEnc {
    let (field_ids, pos_ids, value_ids, segs) = record_ids(tables, vocab);
    let ef = g.gather(p.field_emb, &field_ids);
    let ep = g.gather(p.pos_emb, &pos_ids);
    let ev = g.gather(p.value_emb, &value_ids);
    let concat = g.concat_cols(&[ef, ep, ev]);
    let lin = g.matmul(concat, p.w);
    let lin = g.add_row(lin, p.b);
    let records = g.tanh(lin);
    let pooled = g.segment_max(records, &segs);
    let proj = g.matmul(pooled, p.proj_w);
    let content = g.add_row(proj, p.proj_b);
    TableBatchEnc { records, segs, pooled, content }
}

/// Encodes one record to its `d_t`-dim vector (positions clipped, OOV values
/// fall back to the unknown embedding).
pub fn encode_record(
    record: &crate::corpus::Record,
    params: &TableEncoderParams,
    vocab: &Vocabulary,
) -> Vec<f64> {
    assert!(record.position >= 1, "record positions are 1-based");
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let p = params.bind(&mut g, &mut reg);
    let ef = g.gather(p.field_emb, &[vocab.field_id(&record.field)]);
    let ep = g.gather(p.pos_emb, &[record.position.min(MAX_POSITION) - 1]);
    let ev = g.gather(p.value_emb, &[vocab.word_id(&record.value)]);
    let concat = g.concat_cols(&[ef, ep, ev]);
    let lin = g.matmul(concat, p.w);
    let lin = g.add_row(lin, p.b);
    let enc = g.tanh(lin);
    g.value(enc).row(0).to_vec()
}

/// Encodes a table: elementwise max over its record encodings. Tables are
/// non-empty by construction, so this cannot fail.
pub fn encode_table(table: &Table, params: &TableEncoderParams, vocab: &Vocabulary) -> Vec<f64> {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let p = params.bind(&mut g, &mut reg);
    let enc = encode_tables(&mut g, &p, &[table], vocab);
    g.value(enc.pooled).row(0).to_vec()
}

/// The pooled table vector projected to the content dimension.
pub fn encode_table_content(
    table: &Table,
    params: &TableEncoderParams,
    vocab: &Vocabulary,
) -> Vec<f64> {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let p = params.bind(&mut g, &mut reg);
    let enc = encode_tables(&mut g, &p, &[table], vocab);
    g.value(enc.content).row(0).to_vec()
}
