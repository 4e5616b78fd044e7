//! Decoders: the sentence generator `p(y | z, c, x)` — an LSTM with bilinear
//! attention over record encodings — and the auxiliary template generator
//! `p(ỹ | z)` that conditions on the template latent alone.

use rand_chacha::ChaCha8Rng;

use crate::corpus::BOS;
use crate::model::{
    embedding_uniform, fan_in_uniform, lstm_step, LstmParams, LstmTx, ModelDims,
    ParamGroup, Registry,
};
use crate::tensor::{Graph, Mat, Segments, Tx};

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    /// Word embedding, shared with the inference encoder.
    pub embed: Mat, // [V, E]
    pub cell: LstmParams, // input = E + d_z + d_c
    pub init_h_w: Mat,    // [d_z + d_c, H]
    pub init_h_b: Mat,
    pub init_c_w: Mat,
    pub init_c_b: Mat,
    pub attn_w: Mat, // [H, d_t]
    pub out_w: Mat,  // [H + d_t, V]
    pub out_b: Mat,  // [1, V]
}

#[derive(Clone, Copy)]
pub struct GeneratorTx {
    pub embed: Tx,
    pub cell: LstmTx,
    pub init_h_w: Tx,
    pub init_h_b: Tx,
    pub init_c_w: Tx,
    pub init_c_b: Tx,
    pub attn_w: Tx,
    pub out_w: Tx,
    pub out_b: Tx,
    pub table_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TemplateGeneratorParams {
    pub embed: Mat,       // [V, E], separate from the shared embedding
    pub cell: LstmParams, // input = E + d_z
    pub init_h_w: Mat,    // [d_z, H]
    pub init_h_b: Mat,
    pub init_c_w: Mat,
    pub init_c_b: Mat,
    pub out_w: Mat, // [H, V]
    pub out_b: Mat,
}

#[derive(Clone, Copy)]
pub struct TemplateGeneratorTx {
    pub embed: Tx,
    pub cell: LstmTx,
    pub init_h_w: Tx,
    pub init_h_b: Tx,
    pub init_c_w: Tx,
    pub init_c_b: Tx,
    pub out_w: Tx,
    pub out_b: Tx,
}

impl GeneratorParams {
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let latent = dims.template_latent + dims.content_latent;
        Self {
            embed: embedding_uniform(dims.vocab, dims.embed, rng),
            cell: LstmParams::init(dims.embed + latent, dims.hidden, rng),
            init_h_w: fan_in_uniform(latent, dims.hidden, rng),
            init_h_b: Mat::zeros((1, dims.hidden)),
            init_c_w: fan_in_uniform(latent, dims.hidden, rng),
            init_c_b: Mat::zeros((1, dims.hidden)),
            attn_w: fan_in_uniform(dims.hidden, dims.table, rng),
            out_w: fan_in_uniform(dims.hidden + dims.table, dims.vocab, rng),
            out_b: Mat::zeros((1, dims.vocab)),
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Registry) -> GeneratorTx {
        let gr = ParamGroup::Generator;
        GeneratorTx {
            embed: reg.bind(g, gr, "generator.embed", &self.embed),
            cell: LstmTx {
                wx: reg.bind(g, gr, "generator.cell.wx", &self.cell.wx),
                wh: reg.bind(g, gr, "generator.cell.wh", &self.cell.wh),
                b: reg.bind(g, gr, "generator.cell.b", &self.cell.b),
                hidden: self.cell.hidden(),
            },
            init_h_w: reg.bind(g, gr, "generator.init_h_w", &self.init_h_w),
            init_h_b: reg.bind(g, gr, "generator.init_h_b", &self.init_h_b),
            init_c_w: reg.bind(g, gr, "generator.init_c_w", &self.init_c_w),
            init_c_b: reg.bind(g, gr, "generator.init_c_b", &self.init_c_b),
            attn_w: reg.bind(g, gr, "generator.attn_w", &self.attn_w),
            out_w: reg.bind(g, gr, "generator.out_w", &self.out_w),
            out_b: reg.bind(g, gr, "generator.out_b", &self.out_b),
            table_dim: self.attn_w.ncols(),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(ParamGroup, &'static str, &Mat)) {
        let gr = ParamGroup::Generator;
        f(gr, "generator.embed", &self.embed);
        f(gr, "generator.cell.wx", &self.cell.wx);
        f(gr, "generator.cell.wh", &self.cell.wh);
        f(gr, "generator.cell.b", &self.cell.b);
        f(gr, "generator.init_h_w", &self.init_h_w);
        f(gr, "generator.init_h_b", &self.init_h_b);
        f(gr, "generator.init_c_w", &self.init_c_w);
        f(gr, "generator.init_c_b", &self.init_c_b);
        f(gr, "generator.attn_w", &self.attn_w);
        f(gr, "generator.out_w", &self.out_w);
        f(gr, "generator.out_b", &self.out_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(ParamGroup, &'static str, &mut Mat)) {
        let gr = ParamGroup::Generator;
        f(gr, "generator.embed", &mut self.embed);
        f(gr, "generator.cell.wx", &mut self.cell.wx);
        f(gr, "generator.cell.wh", &mut self.cell.wh);
        f(gr, "generator.cell.b", &mut self.cell.b);
        f(gr, "generator.init_h_w", &mut self.init_h_w);
        f(gr, "generator.init_h_b", &mut self.init_h_b);
        f(gr, "generator.init_c_w", &mut self.init_c_w);
        f(gr, "generator.init_c_b", &mut self.init_c_b);
        f(gr, "generator.attn_w", &mut self.attn_w);
        f(gr, "generator.out_w", &mut self.out_w);
        f(gr, "generator.out_b", &mut self.out_b);
    }
}

impl TemplateGeneratorParams {
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            embed: embedding_uniform(dims.vocab, dims.embed, rng),
            cell: LstmParams::init(dims.embed + dims.template_latent, dims.hidden, rng),
            init_h_w: fan_in_uniform(dims.template_latent, dims.hidden, rng),
            init_h_b: Mat::zeros((1, dims.hidden)),
            init_c_w: fan_in_uniform(dims.template_latent, dims.hidden, rng),
            init_c_b: Mat::zeros((1, dims.hidden)),
            out_w: fan_in_uniform(dims.hidden, dims.vocab, rng),
            out_b: Mat::zeros((1, dims.vocab)),
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Registry) -> TemplateGeneratorTx {
        let gr = ParamGroup::TemplateGenerator;
        TemplateGeneratorTx {
            embed: reg.bind(g, gr, "template.embed", &self.embed),
            cell: LstmTx {
                wx: reg.bind(g, gr, "template.cell.wx", &self.cell.wx),
                wh: reg.bind(g, gr, "template.cell.wh", &self.cell.wh),
                b: reg.bind(g, gr, "template.cell.b", &self.cell.b),
                hidden: self.cell.hidden(),
            },
            init_h_w: reg.bind(g, gr, "template.init_h_w", &self.init_h_w),
            init_h_b: reg.bind(g, gr, "template.init_h_b", &self.init_h_b),
            init_c_w: reg.bind(g, gr, "template.init_c_w", &self.init_c_w),
            init_c_b: reg.bind(g, gr, "template.init_c_b", &self.init_c_b),
            out_w: reg.bind(g, gr, "template.out_w", &self.out_w),
            out_b: reg.bind(g, gr, "template.out_b", &self.out_b),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(ParamGroup, &'static str, &Mat)) {
        let gr = ParamGroup::TemplateGenerator;
        f(gr, "template.embed", &self.embed);
        f(gr, "template.cell.wx", &self.cell.wx);
        f(gr, "template.cell.wh", &self.cell.wh);
        f(gr, "template.cell.b", &self.cell.b);
        f(gr, "template.init_h_w", &self.init_h_w);
        f(gr, "template.init_h_b", &self.init_h_b);
        f(gr, "template.init_c_w", &self.init_c_w);
        f(gr, "template.init_c_b", &self.init_c_b);
        f(gr, "template.out_w", &self.out_w);
        f(gr, "template.out_b", &self.out_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(ParamGroup, &'static str, &mut Mat)) {
        let gr = ParamGroup::TemplateGenerator;
        f(gr, "template.embed", &mut self.embed);
        f(gr, "template.cell.wx", &mut self.cell.wx);
        f(gr, "template.cell.wh", &mut self.cell.wh);
        f(gr, "template.cell.b", &mut self.cell.b);
        f(gr, "template.init_h_w", &mut self.init_h_w);
        f(gr, "template.init_h_b", &mut self.init_h_b);
        f(gr, "template.init_c_w", &mut self.init_c_w);
        f(gr, "template.init_c_b", &mut self.init_c_b);
        f(gr, "template.out_w", &mut self.out_w);
        f(gr, "template.out_b", &mut self.out_b);
    }
}

/// Record encodings available for attention: `None` means raw decoding mode
/// (zero attention context; conditioning flows through `c` alone).
#[derive(Clone, Copy)]
pub struct AttnInput<'a> {
    pub records: Tx,
    pub segs: &'a Segments,
}

/// Decoder recurrent state on the tape.
#[derive(Clone, Copy)]
pub struct DecoderState {
    pub h: Tx,
    pub c: Tx,
}

/// Initial decoder state: `tanh(W [z; c] + b)` for hidden and cell.
pub fn decoder_init(g: &mut Graph, p: &GeneratorTx, z: Tx, c: Tx) -> DecoderState {
    let latent = g.concat_cols(&[z, c]);
    let h_lin = g.matmul(latent, p.init_h_w);
    let h_lin = g.add_row(h_lin, p.init_h_b);
    let h = g.tanh(h_lin);
    let c_lin = g.matmul(latent, p.init_c_w);
    let c_lin = g.add_row(c_lin, p.init_c_b);
    let cell = g.tanh(c_lin);
    DecoderState { h, c: cell }
}

/// One decoder step. `prev_emb` is the embedded previous token; the latents
/// are concatenated to the input at every step. Returns vocabulary logits and
/// the advanced state.
pub fn decode_step_graph(
    g: &mut Graph,
    p: &GeneratorTx,
    prev_emb: Tx,
    z: Tx,
    c: Tx,
    state: DecoderState,
    attn: Option<AttnInput>,
) -> (Tx, Tx, DecoderState) {
    let x = g.concat_cols(&[prev_emb, z, c]);
    let (h, cell) = lstm_step(g, &p.cell, x, state.h, state.c);
    let (ctx, weights) = match attn {
        Some(a) => {
            let query = g.matmul(h, p.attn_w);
            let scores = g.attn_scores(query, a.records, a.segs);
            let lens: Vec<usize> = a.segs.iter().map(|&(_, l)| l).collect();
            let weights = g.masked_softmax(scores, &lens);
            let ctx = g.attn_context(weights, a.records, a.segs);
            (ctx, weights)
        }
        None => {
            let batch = g.value(h).nrows();
            let zeros = g.constant(Mat::zeros((batch, p.table_dim)));
            (zeros, zeros)
        }
    };
    let feat = g.concat_cols(&[h, ctx]);
    let logits = g.matmul(feat, p.out_w);
    let logits = g.add_row(logits, p.out_b);
    (logits, weights, DecoderState { h, c: cell })
}

/// Teacher-forced per-example sequence log-probability `[B, 1]`:
/// `sum_t mask[t] * log p(y_t | y_<t, z, c, x)`. Padding positions
/// contribute nothing.
pub fn sequence_log_prob_graph(
    g: &mut Graph,
    p: &GeneratorTx,
    tokens: &[Vec<usize>],
    mask: &[Vec<f64>],
    z: Tx,
    c: Tx,
    attn: Option<AttnInput>,
) -> Tx {
    let batch = tokens.len();
    let steps = tokens.first().map_or(0, Vec::len);
    let mut state = decoder_init(g, p, z, c);
    let mut total = g.constant(Mat::zeros((batch, 1)));
    for t in 0..steps {
        let prev: Vec<usize> = tokens
            .iter()
            .map(|row| if t == 0 { BOS } else { row[t - 1] })
            .collect();
        let prev_emb = g.gather(p.embed, &prev);
        let (logits, _, next) = decode_step_graph(g, p, prev_emb, z, c, state, attn);
        state = next;
        let logp = g.log_softmax(logits);
        let targets: Vec<usize> = tokens.iter().map(|row| row[t]).collect();
        let picked = g.pick_per_row(logp, &targets);
        let mask_col = Mat::from_shape_fn((batch, 1), |(i, _)| mask[i][t]);
        let masked = g.mul_const(picked, mask_col);
        total = g.add(total, masked);
    }
    total
}

/// Template-decoder initial state from `z` alone.
pub fn template_init(g: &mut Graph, p: &TemplateGeneratorTx, z: Tx) -> DecoderState {
    let h_lin = g.matmul(z, p.init_h_w);
    let h_lin = g.add_row(h_lin, p.init_h_b);
    let h = g.tanh(h_lin);
    let c_lin = g.matmul(z, p.init_c_w);
    let c_lin = g.add_row(c_lin, p.init_c_b);
    let cell = g.tanh(c_lin);
    DecoderState { h, c: cell }
}

pub fn template_step_graph(
    g: &mut Graph,
    p: &TemplateGeneratorTx,
    prev_emb: Tx,
    z: Tx,
    state: DecoderState,
) -> (Tx, DecoderState) {
    let x = g.concat_cols(&[prev_emb, z]);
    let (h, cell) = lstm_step(g, &p.cell, x, state.h, state.c);
    let logits = g.matmul(h, p.out_w);
    let logits = g.add_row(logits, p.out_b);
    (logits, DecoderState { h, c: cell })
}

/// Teacher-forced template log-probability `[B, 1]` under the template
/// generator (no attention, no content latent).
pub fn template_log_prob_graph(
    g: &mut Graph,
    p: &TemplateGeneratorTx,
    tokens: &[Vec<usize>],
    mask: &[Vec<f64>],
    z: Tx,
) -> Tx {
    let batch = tokens.len();
    let steps = tokens.first().map_or(0, Vec::len);
    let mut state = template_init(g, p, z);
    let mut total = g.constant(Mat::zeros((batch, 1)));
    for t in 0..steps {
        let prev: Vec<usize> = tokens
            .iter()
            .map(|row| if t == 0 { BOS } else { row[t - 1] })
            .collect();
        let prev_emb = g.gather(p.embed, &prev);
        let (logits, next) = template_step_graph(g, p, prev_emb, z, state);
        state = next;
        let logp = g.log_softmax(logits);
        let targets: Vec<usize> = tokens.iter().map(|row| row[t]).collect();
        let picked = g.pick_per_row(logp, &targets);
        let mask_col = Mat::from_shape_fn((batch, 1), |(i, _)| mask[i][t]);
        let masked = g.mul_const(picked, mask_col);
        total = g.add(total, masked);
    }
    total
}

/// One-shot numeric decode step for a single example. `record_vectors`, when
/// present, are precomputed `d_t`-dim record encodings (paired mode); `None`
/// is raw mode. Returns `(logits, attention weights, (h, cell))`.
#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    prev_token: usize,
    state: Option<(Vec<f64>, Vec<f64>)>,
    z: &[f64],
    c: &[f64],
    record_vectors: Option<&Mat>,
    params: &GeneratorParams,
) -> (Vec<f64>, Vec<f64>, (Vec<f64>, Vec<f64>)) {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let p = params.bind(&mut g, &mut reg);
    let z_tx = g.constant(row_mat(z));
    let c_tx = g.constant(row_mat(c));
    let st = match state {
        Some((h, cell)) => DecoderState {
            h: g.constant(row_mat(&h)),
            c: g.constant(row_mat(&cell)),
        },
        None => decoder_init(&mut g, &p, z_tx, c_tx),
    };
    let prev_emb = g.gather(p.embed, &[prev_token]);
    let segs: Segments = record_vectors.map(|r| vec![(0usize, r.nrows())]).unwrap_or_default();
    let attn_records = record_vectors.map(|r| g.constant(r.clone()));
    let attn = attn_records.map(|records| AttnInput { records, segs: &segs });
    let (logits, weights, next) = decode_step_graph(&mut g, &p, prev_emb, z_tx, c_tx, st, attn);
    (
        g.value(logits).row(0).to_vec(),
        g.value(weights).row(0).to_vec(),
        (g.value(next.h).row(0).to_vec(), g.value(next.c).row(0).to_vec()),
    )
}

/// Teacher-forced log-probability of one sequence (must end with EOS).
pub fn sequence_log_prob(
    tokens: &[usize],
    z: &[f64],
    c: &[f64],
    record_vectors: Option<&Mat>,
    params: &GeneratorParams,
) -> f64 {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let p = params.bind(&mut g, &mut reg);
    let z_tx = g.constant(row_mat(z));
    let c_tx = g.constant(row_mat(c));
    let segs: Segments = record_vectors.map(|r| vec![(0usize, r.nrows())]).unwrap_or_default();
    let attn_records = record_vectors.map(|r| g.constant(r.clone()));
    let attn = attn_records.map(|records| AttnInput { records, segs: &segs });
    let seqs = vec![tokens.to_vec()];
    let mask = vec![vec![1.0; tokens.len()]];
    let lp = sequence_log_prob_graph(&mut g, &p, &seqs, &mask, z_tx, c_tx, attn);
    g.value(lp)[[0, 0]]
}

/// Teacher-forced log-probability of a template sequence under `p(ỹ | z)`.
pub fn template_log_prob(tokens: &[usize], z: &[f64], params: &TemplateGeneratorParams) -> f64 {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let p = params.bind(&mut g, &mut reg);
    let z_tx = g.constant(row_mat(z));
    let seqs = vec![tokens.to_vec()];
    let mask = vec![vec![1.0; tokens.len()]];
    let lp = template_log_prob_graph(&mut g, &p, &seqs, &mask, z_tx);
    g.value(lp)[[0, 0]]
}

pub(crate) fn row_mat(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}
