//! Parameter bookkeeping shared by all model components: named parameter
//! groups, tape binding, the LSTM cell, and the aggregate [`ModelParams`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::generator::{GeneratorParams, TemplateGeneratorParams};
use crate::inference::InferenceParams;
use crate::table_encoder::TableEncoderParams;
use crate::tensor::{Graph, Mat, Tx};

/// The four trainable groups. Training phases update different subsets, so
/// every parameter carries its group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TableEncoder,
    Inference,
    Generator,
    TemplateGenerator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::TableEncoder,
        ParamGroup::Inference,
        ParamGroup::Generator,
        ParamGroup::TemplateGenerator,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::TableEncoder => "table_encoder",
            ParamGroup::Inference => "inference",
            ParamGroup::Generator => "generator",
            ParamGroup::TemplateGenerator => "template_generator",
        }
    }
}

/// Records which tape leaf each named parameter was bound to, so gradients
/// can be read back after `backward`.
#[derive(Default)]
pub struct Registry {
    pub entries: Vec<(ParamGroup, &'static str, Tx)>,
}

impl Registry {
    pub fn bind(&mut self, g: &mut Graph, group: ParamGroup, name: &'static str, value: &Mat) -> Tx {
        let tx = g.param(value.clone());
        self.entries.push((group, name, tx));
        tx
    }
}

/// LSTM cell parameters; gate order along columns is `[input, forget, cell,
/// output]`.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub wx: Mat, // [in, 4H]
    pub wh: Mat, // [H, 4H]
    pub b: Mat,  // [1, 4H]
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.wh.nrows()
    }

    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self {
            wx: fan_in_uniform(input, 4 * hidden, rng),
            wh: fan_in_uniform(hidden, 4 * hidden, rng),
            b: Mat::zeros((1, 4 * hidden)),
        };
        // forget-gate bias starts at 1
        for j in hidden..2 * hidden {
            p.b[[0, j]] = 1.0;
        }
        p
    }
}

/// Bound tape handles for one LSTM cell.
#[derive(Clone, Copy)]
pub struct LstmTx {
    pub wx: Tx,
    pub wh: Tx,
    pub b: Tx,
    pub hidden: usize,
}

/// One LSTM step: returns the next `(hidden, cell)` state.
pub fn lstm_step(g: &mut Graph, p: &LstmTx, x: Tx, h: Tx, c: Tx) -> (Tx, Tx) {
    let hx = g.matmul(x, p.wx);
    let hh = g.matmul(h, p.wh);
    let pre = g.add(hx, hh);
    let pre = g.add_row(pre, p.b);
    let n = p.hidden;
    let i_pre = g.slice_cols(pre, 0, n);
    let f_pre = g.slice_cols(pre, n, 2 * n);
    let g_pre = g.slice_cols(pre, 2 * n, 3 * n);
    let o_pre = g.slice_cols(pre, 3 * n, 4 * n);
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o = g.sigmoid(o_pre);
    let fc = g.mul(f, c);
    let ig = g.mul(i, cand);
    let c_next = g.add(fc, ig);
    let c_act = g.tanh(c_next);
    let h_next = g.mul(o, c_act);
    (h_next, c_next)
}

/// Keeps a state frozen where `mask` is 0: `m*new + (1-m)*prev`. `mask_col`
/// holds one value per batch row.
pub fn masked_update(g: &mut Graph, new: Tx, prev: Tx, mask_col: &[f64]) -> Tx {
    let cols = g.value(new).ncols();
    let m = Mat::from_shape_fn((mask_col.len(), cols), |(i, _)| mask_col[i]);
    let inv = m.mapv(|v| 1.0 - v);
    let keep_new = g.mul_const(new, m);
    let keep_prev = g.mul_const(prev, inv);
    g.add(keep_new, keep_prev)
}

/// Uniform init scaled by fan-in: `U(-1/sqrt(in), 1/sqrt(in))`.
pub fn fan_in_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Embedding init: `U(-0.1, 0.1)`.
pub fn embedding_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-0.1..0.1))
}

/// Model dimensions resolved from the training configuration and vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub fields: usize,
    pub embed: usize,
    pub hidden: usize,
    pub table: usize,
    pub template_latent: usize,
    pub content_latent: usize,
}

/// All trainable parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub table_encoder: TableEncoderParams,
    pub inference: InferenceParams,
    pub generator: GeneratorParams,
    pub template: TemplateGeneratorParams,
}

/// Tape handles for every group, produced by [`ModelParams::bind`].
pub struct BoundModel {
    pub table_encoder: crate::table_encoder::TableEncoderTx,
    pub inference: crate::inference::InferenceTx,
    pub generator: crate::generator::GeneratorTx,
    pub template: crate::generator::TemplateGeneratorTx,
    pub dims: ModelDims,
}

impl ModelParams {
    pub fn init(dims: ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dims,
            table_encoder: TableEncoderParams::init(&dims, rng),
            inference: InferenceParams::init(&dims, rng),
            generator: GeneratorParams::init(&dims, rng),
            template: TemplateGeneratorParams::init(&dims, rng),
        }
    }

    /// Binds every parameter onto the tape and returns the handles.
    pub fn bind(&self, g: &mut Graph, reg: &mut Registry) -> BoundModel {
        BoundModel {
            table_encoder: self.table_encoder.bind(g, reg),
            inference: self.inference.bind(g, reg),
            generator: self.generator.bind(g, reg),
            template: self.template.bind(g, reg),
            dims: self.dims,
        }
    }

    /// Visits every parameter in a fixed order (the same order `bind` uses).
    pub fn visit(&self, f: &mut impl FnMut(ParamGroup, &'static str, &Mat)) {
        self.table_encoder.visit(f);
        self.inference.visit(f);
        self.generator.visit(f);
        self.template.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(ParamGroup, &'static str, &mut Mat)) {
        self.table_encoder.visit_mut(f);
        self.inference.visit_mut(f);
        self.generator.visit_mut(f);
        self.template.visit_mut(f);
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, m| n += m.len());
        n
    }
}

/// Embeds one time-step column of a padded token batch.
pub fn embed_column(g: &mut Graph, embed: Tx, tokens: &[Vec<usize>], t: usize) -> Tx {
    let ids: Vec<usize> = tokens.iter().map(|row| row[t]).collect();
    g.gather(embed, &ids)
}
