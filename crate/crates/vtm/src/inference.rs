//! Variational posteriors over the template latent `z` and the content
//! latent `c`: a shared masked bidirectional LSTM over the sentence feeds
//! four linear heads producing diagonal-Gaussian parameters. Reparameterized
//! sampling and the closed-form KL to the standard-normal prior live here
//! too.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{Batch, Vocabulary, EOS};
use crate::model::{
    embed_column, fan_in_uniform, lstm_step, masked_update, LstmParams, LstmTx, ModelDims,
    ParamGroup, Registry,
};
use crate::tensor::{Graph, Mat, Tx};

/// Clamp bounds for posterior log-variances.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Parameters of a diagonal Gaussian: mean and log-variance per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_variance.len());
        let log_variance = log_variance
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Self { mean, log_variance }
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_variance: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + exp(log_variance / 2) * eps`, the reparameterized sample.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        assert_eq!(eps.len(), self.dim());
        self.mean
            .iter()
            .zip(&self.log_variance)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    /// `KL(N(mean, diag(var)) || N(0, I))`, in closed form:
    /// `0.5 * sum(var + mean^2 - 1 - log var)`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_variance)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>()
    }

    /// Log density of `x` under this Gaussian.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim());
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        -0.5 * self
            .mean
            .iter()
            .zip(&self.log_variance)
            .zip(x)
            .map(|((m, lv), xi)| {
                let diff = xi - m;
                ln2pi + lv + diff * diff * (-lv).exp()
            })
            .sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct InferenceParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub mean_z_w: Mat,
    pub mean_z_b: Mat,
    pub log_var_z_w: Mat,
    pub log_var_z_b: Mat,
    pub mean_c_w: Mat,
    pub mean_c_b: Mat,
    pub log_var_c_w: Mat,
    pub log_var_c_b: Mat,
}

#[derive(Clone, Copy)]
pub struct InferenceTx {
    pub fwd: LstmTx,
    pub bwd: LstmTx,
    pub mean_z_w: Tx,
    pub mean_z_b: Tx,
    pub log_var_z_w: Tx,
    pub log_var_z_b: Tx,
    pub mean_c_w: Tx,
    pub mean_c_b: Tx,
    pub log_var_c_w: Tx,
    pub log_var_c_b: Tx,
}

impl InferenceParams {
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let feat = 2 * dims.hidden;
        Self {
            fwd: LstmParams::init(dims.embed, dims.hidden, rng),
            bwd: LstmParams::init(dims.embed, dims.hidden, rng),
            mean_z_w: fan_in_uniform(feat, dims.template_latent, rng),
            mean_z_b: Mat::zeros((1, dims.template_latent)),
            log_var_z_w: fan_in_uniform(feat, dims.template_latent, rng),
            log_var_z_b: Mat::zeros((1, dims.template_latent)),
            mean_c_w: fan_in_uniform(feat, dims.content_latent, rng),
            mean_c_b: Mat::zeros((1, dims.content_latent)),
            log_var_c_w: fan_in_uniform(feat, dims.content_latent, rng),
            log_var_c_b: Mat::zeros((1, dims.content_latent)),
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Registry) -> InferenceTx {
        let gr = ParamGroup::Inference;
        InferenceTx {
            fwd: LstmTx {
                wx: reg.bind(g, gr, "inference.fwd.wx", &self.fwd.wx),
                wh: reg.bind(g, gr, "inference.fwd.wh", &self.fwd.wh),
                b: reg.bind(g, gr, "inference.fwd.b", &self.fwd.b),
                hidden: self.fwd.hidden(),
            },
            bwd: LstmTx {
                wx: reg.bind(g, gr, "inference.bwd.wx", &self.bwd.wx),
                wh: reg.bind(g, gr, "inference.bwd.wh", &self.bwd.wh),
                b: reg.bind(g, gr, "inference.bwd.b", &self.bwd.b),
                hidden: self.bwd.hidden(),
            },
            mean_z_w: reg.bind(g, gr, "inference.mean_z_w", &self.mean_z_w),
            mean_z_b: reg.bind(g, gr, "inference.mean_z_b", &self.mean_z_b),
            log_var_z_w: reg.bind(g, gr, "inference.log_var_z_w", &self.log_var_z_w),
            log_var_z_b: reg.bind(g, gr, "inference.log_var_z_b", &self.log_var_z_b),
            mean_c_w: reg.bind(g, gr, "inference.mean_c_w", &self.mean_c_w),
            mean_c_b: reg.bind(g, gr, "inference.mean_c_b", &self.mean_c_b),
            log_var_c_w: reg.bind(g, gr, "inference.log_var_c_w", &self.log_var_c_w),
            log_var_c_b: reg.bind(g, gr, "inference.log_var_c_b", &self.log_var_c_b),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(ParamGroup, &'static str, &Mat)) {
        let gr = ParamGroup::Inference;
        f(gr, "inference.fwd.wx", &self.fwd.wx);
        f(gr, "inference.fwd.wh", &self.fwd.wh);
        f(gr, "inference.fwd.b", &self.fwd.b);
        f(gr, "inference.bwd.wx", &self.bwd.wx);
        f(gr, "inference.bwd.wh", &self.bwd.wh);
        f(gr, "inference.bwd.b", &self.bwd.b);
        f(gr, "inference.mean_z_w", &self.mean_z_w);
        f(gr, "inference.mean_z_b", &self.mean_z_b);
        f(gr, "inference.log_var_z_w", &self.log_var_z_w);
        f(gr, "inference.log_var_z_b", &self.log_var_z_b);
        f(gr, "inference.mean_c_w", &self.mean_c_w);
        f(gr, "inference.mean_c_b", &self.mean_c_b);
        f(gr, "inference.log_var_c_w", &self.log_var_c_w);
        f(gr, "inference.log_var_c_b", &self.log_var_c_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(ParamGroup, &'static str, &mut Mat)) {
        let gr = ParamGroup::Inference;
        f(gr, "inference.fwd.wx", &mut self.fwd.wx);
        f(gr, "inference.fwd.wh", &mut self.fwd.wh);
        f(gr, "inference.fwd.b", &mut self.fwd.b);
        f(gr, "inference.bwd.wx", &mut self.bwd.wx);
        f(gr, "inference.bwd.wh", &mut self.bwd.wh);
        f(gr, "inference.bwd.b", &mut self.bwd.b);
        f(gr, "inference.mean_z_w", &mut self.mean_z_w);
        f(gr, "inference.mean_z_b", &mut self.mean_z_b);
        f(gr, "inference.log_var_z_w", &mut self.log_var_z_w);
        f(gr, "inference.log_var_z_b", &mut self.log_var_z_b);
        f(gr, "inference.mean_c_w", &mut self.mean_c_w);
        f(gr, "inference.mean_c_b", &mut self.mean_c_b);
        f(gr, "inference.log_var_c_w", &mut self.log_var_c_w);
        f(gr, "inference.log_var_c_b", &mut self.log_var_c_b);
    }
}

/// Posterior parameters for a batch of sentences, on the tape.
pub struct PosteriorTx {
    pub mean_z: Tx,
    pub log_var_z: Tx,
    pub mean_c: Tx,
    pub log_var_c: Tx,
}

/// Runs the shared masked BiLSTM over the embedded sentence batch and applies
/// the four heads. Padding positions freeze the recurrent state, so they
/// cannot affect the posterior.
pub fn posterior(
    g: &mut Graph,
    p: &InferenceTx,
    embed: Tx,
    tokens: &[Vec<usize>],
    mask: &[Vec<f64>],
) -> PosteriorTx {
    let batch = tokens.len();
    let steps = tokens.first().map_or(0, Vec::len);
    let hidden = p.fwd.hidden;

    let mut h_fwd = g.constant(Mat::zeros((batch, hidden)));
    let mut c_fwd = g.constant(Mat::zeros((batch, hidden)));
    for t in 0..steps {
        let x = embed_column(g, embed, tokens, t);
        let (h_new, c_new) = lstm_step(g, &p.fwd, x, h_fwd, c_fwd);
        let mask_col: Vec<f64> = mask.iter().map(|row| row[t]).collect();
        h_fwd = masked_update(g, h_new, h_fwd, &mask_col);
        c_fwd = masked_update(g, c_new, c_fwd, &mask_col);
    }

    let mut h_bwd = g.constant(Mat::zeros((batch, hidden)));
    let mut c_bwd = g.constant(Mat::zeros((batch, hidden)));
    for t in (0..steps).rev() {
        let x = embed_column(g, embed, tokens, t);
        let (h_new, c_new) = lstm_step(g, &p.bwd, x, h_bwd, c_bwd);
        let mask_col: Vec<f64> = mask.iter().map(|row| row[t]).collect();
        h_bwd = masked_update(g, h_new, h_bwd, &mask_col);
        c_bwd = masked_update(g, c_new, c_bwd, &mask_col);
    }

    let feat = g.concat_cols(&[h_fwd, h_bwd]);
    let head = |g: &mut Graph, w: Tx, b: Tx| {
        let lin = g.matmul(feat, w);
        g.add_row(lin, b)
    };
    let mean_z = head(g, p.mean_z_w, p.mean_z_b);
    let lv_z = head(g, p.log_var_z_w, p.log_var_z_b);
    let log_var_z = g.clamp(lv_z, LOG_VAR_MIN, LOG_VAR_MAX);
    let mean_c = head(g, p.mean_c_w, p.mean_c_b);
    let lv_c = head(g, p.log_var_c_w, p.log_var_c_b);
    let log_var_c = g.clamp(lv_c, LOG_VAR_MIN, LOG_VAR_MAX);
    PosteriorTx { mean_z, log_var_z, mean_c, log_var_c }
}

/// Per-example `KL(q || N(0, I))` on the tape: `[B, d] -> [B, 1]`.
pub fn kl_to_standard_normal_graph(g: &mut Graph, mean: Tx, log_var: Tx) -> Tx {
    let var = g.exp(log_var);
    let mean_sq = g.square(mean);
    let sum = g.add(var, mean_sq);
    let sum = g.sub(sum, log_var);
    let shifted = g.affine(sum, 1.0, -1.0);
    let per_dim = g.scale(shifted, 0.5);
    g.sum_cols(per_dim)
}

/// Reparameterized sample on the tape: `mean + exp(log_var/2) * eps`.
pub fn reparameterize_graph(g: &mut Graph, mean: Tx, log_var: Tx, eps: Mat) -> Tx {
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let scaled = g.mul_const(std, eps);
    g.add(mean, scaled)
}

fn gaussians_from(g: &Graph, mean: Tx, log_var: Tx) -> Vec<DiagonalGaussian> {
    let m = g.value(mean);
    let lv = g.value(log_var);
    (0..m.nrows())
        .map(|i| DiagonalGaussian::new(m.row(i).to_vec(), lv.row(i).to_vec()))
        .collect()
}

fn single_sentence_posterior(
    params: &InferenceParams,
    embed: &Mat,
    sentence: &[usize],
) -> (DiagonalGaussian, DiagonalGaussian) {
    assert!(!sentence.is_empty(), "posterior of an empty sentence");
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let p = params.bind(&mut g, &mut reg);
    let embed_tx = g.constant(embed.clone());
    let tokens = vec![sentence.to_vec()];
    let mask = vec![vec![1.0; sentence.len()]];
    let post = posterior(&mut g, &p, embed_tx, &tokens, &mask);
    let z = gaussians_from(&g, post.mean_z, post.log_var_z).remove(0);
    let c = gaussians_from(&g, post.mean_c, post.log_var_c).remove(0);
    (z, c)
}

/// `q(z | y)` for one encoded sentence. Deterministic in `y`.
pub fn posterior_z(sentence: &[usize], params: &InferenceParams, embed: &Mat) -> DiagonalGaussian {
    single_sentence_posterior(params, embed, sentence).0
}

/// `q(c | y)` for one encoded sentence.
pub fn posterior_c(sentence: &[usize], params: &InferenceParams, embed: &Mat) -> DiagonalGaussian {
    single_sentence_posterior(params, embed, sentence).1
}

/// Convenience wrapper building the padded token/mask views of a batch.
pub fn batch_views(batch: &Batch) -> (&[Vec<usize>], &[Vec<f64>]) {
    (&batch.tokens, &batch.mask)
}

/// Encodes a plain token-id sentence for use outside batches (appends EOS if
/// missing).
pub fn ensure_eos(mut sentence: Vec<usize>) -> Vec<usize> {
    if sentence.last() != Some(&EOS) {
        sentence.push(EOS);
    }
    sentence
}

/// Embedding matrix lookup shared with the generator: the word embedding is
/// owned by [`crate::generator::GeneratorParams`].
pub fn shared_embedding(params: &crate::generator::GeneratorParams) -> &Mat {
    &params.embed
}

/// Vocabulary-sized sanity check used when wiring models to corpora.
pub fn check_vocab(dims: &ModelDims, vocab: &Vocabulary) {
    assert_eq!(dims.vocab, vocab.word_count(), "vocab size mismatch");
    assert_eq!(dims.fields, vocab.field_count(), "field vocab size mismatch");
}
