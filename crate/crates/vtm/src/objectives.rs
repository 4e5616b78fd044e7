//! Training losses: the paired and raw ELBOs, the preserving-template and
//! preserving-content losses, the minibatch mutual-information loss, and
//! their weighted total.
//!
//! Conventions: losses are means over the batch and sums over time steps and
//! latent dimensions. The preserving-content expectation is computed in
//! closed form (`|mu - h|^2 + tr(Sigma)`), never by sampling. The
//! mutual-information estimator scores each example's latent sample against
//! the batch mixture of posteriors with a stable log-sum-exp.

use thiserror::Error;

use crate::corpus::{Batch, PairedExample, RawExample, Table, Vocabulary};
use crate::generator::{sequence_log_prob_graph, template_log_prob_graph, AttnInput};
use crate::inference::{
    kl_to_standard_normal_graph, posterior, reparameterize_graph, DiagonalGaussian,
};
use crate::model::{BoundModel, ModelParams, Registry};
use crate::rng::NoiseSource;
use crate::table_encoder::encode_tables;
use crate::tensor::{Graph, Mat, Tx};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("mutual-information estimator needs batch size >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("mode requires a raw batch but none was provided")]
    MissingRawBatch,
}

/// Loss weights from the training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub mi: f64,
    pub pt: f64,
    pub pc: f64,
}

/// Per-batch scalar values of every loss term. `total` satisfies
/// `total = elbo_p + elbo_r + mi * (l_mi_z + l_mi_c) + pt * l_pt + pc * l_pc`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub elbo_p: f64,
    pub recon_p: f64,
    pub kl_z: f64,
    pub elbo_r: f64,
    pub recon_r: f64,
    pub kl_z_raw: f64,
    pub kl_c_raw: f64,
    pub l_pt: f64,
    pub l_pc: f64,
    pub l_mi_z: f64,
    pub l_mi_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "elbo_p,recon_p,kl_z,elbo_r,recon_r,kl_z_raw,kl_c_raw,l_pt,l_pc,l_mi_z,l_mi_c,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.elbo_p,
            self.recon_p,
            self.kl_z,
            self.elbo_r,
            self.recon_r,
            self.kl_z_raw,
            self.kl_c_raw,
            self.l_pt,
            self.l_pc,
            self.l_mi_z,
            self.l_mi_c,
            self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.elbo_p, self.recon_p, self.kl_z, self.elbo_r, self.recon_r, self.kl_z_raw,
            self.kl_c_raw, self.l_pt, self.l_pc, self.l_mi_z, self.l_mi_c, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A paired batch laid out for the tape: tables plus padded sentence and
/// template token matrices sharing one mask (delexicalization preserves
/// length).
pub struct PairedBatchView<'a> {
    pub tables: Vec<&'a Table>,
    pub sent_tokens: Vec<Vec<usize>>,
    pub tpl_tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<f64>>,
}

impl<'a> PairedBatchView<'a> {
    pub fn from_batch(examples: &'a [PairedExample], batch: &Batch) -> Self {
        let max_len = batch.max_len();
        let mut tables = Vec::with_capacity(batch.len());
        let mut tpl_tokens = Vec::with_capacity(batch.len());
        for &i in &batch.example_indices {
            tables.push(&examples[i].table);
            let mut row = examples[i].template.clone();
            row.resize(max_len, crate::corpus::PAD);
            tpl_tokens.push(row);
        }
        Self {
            tables,
            sent_tokens: batch.tokens.clone(),
            tpl_tokens,
            mask: batch.mask.clone(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.tables.len()
    }
}

/// A raw batch: padded sentences and mask.
pub struct RawBatchView {
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<f64>>,
}

impl RawBatchView {
    pub fn from_batch(_examples: &[RawExample], batch: &Batch) -> Self {
        Self { tokens: batch.tokens.clone(), mask: batch.mask.clone() }
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }
}

/// Which auxiliary terms to build.
#[derive(Debug, Clone, Copy)]
pub struct TermFlags {
    pub pt: bool,
    pub pc: bool,
    pub mi: bool,
}

/// Tape handles of the paired-batch terms (all `[1,1]`).
pub struct PairedTerms {
    pub recon: Tx,
    pub kl_z: Tx,
    pub l_pt: Option<Tx>,
    pub l_pc: Option<Tx>,
    pub mi_z: Option<Tx>,
    pub mi_c: Option<Tx>,
}

/// Tape handles of the raw-batch terms.
pub struct RawTerms {
    pub recon: Tx,
    pub kl_z: Tx,
    pub kl_c: Tx,
    pub mi_z: Option<Tx>,
    pub mi_c: Option<Tx>,
}

/// Negative mutual-information estimate for one latent:
/// `-(1/B) sum_i [log q(v_i|y_i) - log((1/B) sum_j q(v_i|y_j))]`.
fn neg_mi_term(g: &mut Graph, sample: Tx, mean: Tx, log_var: Tx) -> Tx {
    let b = g.value(sample).nrows() as f64;
    let m = g.pair_gauss_log_prob(sample, mean, log_var);
    let own = g.diag_col(m);
    let lse = g.log_sum_exp_cols(m);
    let mixture = g.affine(lse, 1.0, -b.ln());
    let gap = g.sub(own, mixture);
    let mi = g.mean_all(gap);
    g.neg(mi)
}

/// Builds all requested paired-batch terms, sharing one posterior pass, one
/// table encoding and one latent sample. The noise draw order is always
/// `eps_z` then `eps_c`, independent of which terms are requested, so the
/// same noise source replays identically across term subsets.
pub fn paired_terms(
    g: &mut Graph,
    bound: &BoundModel,
    vocab: &Vocabulary,
    view: &PairedBatchView,
    noise: &mut dyn NoiseSource,
    flags: TermFlags,
) -> PairedTerms {
    let b = view.batch_size();
    let dims = bound.dims;
    let enc = encode_tables(g, &bound.table_encoder, &view.tables, vocab);
    let post = posterior(
        g,
        &bound.inference,
        bound.generator.embed,
        &view.sent_tokens,
        &view.mask,
    );

    let eps_z = noise.standard_normal(b, dims.template_latent);
    let z = reparameterize_graph(g, post.mean_z, post.log_var_z, eps_z);

    // Delta prior on the content latent: c is the projected table encoding.
    let attn = Some(AttnInput { records: enc.records, segs: &enc.segs });
    let log_prob = sequence_log_prob_graph(
        g,
        &bound.generator,
        &view.sent_tokens,
        &view.mask,
        z,
        enc.content,
        attn,
    );
    let neg = g.neg(log_prob);
    let recon = g.mean_all(neg);

    let kl_per = kl_to_standard_normal_graph(g, post.mean_z, post.log_var_z);
    let kl_z = g.mean_all(kl_per);

    let l_pt = flags.pt.then(|| {
        let tpl_lp = template_log_prob_graph(
            g,
            &bound.template,
            &view.tpl_tokens,
            &view.mask,
            z,
        );
        let neg = g.neg(tpl_lp);
        g.mean_all(neg)
    });

    let l_pc = flags.pc.then(|| {
        let diff = g.sub(post.mean_c, enc.content);
        let sq = g.square(diff);
        let dist = g.sum_cols(sq);
        let var = g.exp(post.log_var_c);
        let trace = g.sum_cols(var);
        let expect = g.add(dist, trace);
        let kl_c_per = kl_to_standard_normal_graph(g, post.mean_c, post.log_var_c);
        let per_example = g.add(expect, kl_c_per);
        g.mean_all(per_example)
    });

    let eps_c = noise.standard_normal(b, dims.content_latent);
    let (mi_z, mi_c) = if flags.mi {
        assert!(b >= 2, "MI estimator needs batch size >= 2");
        let c_sample = reparameterize_graph(g, post.mean_c, post.log_var_c, eps_c);
        (
            Some(neg_mi_term(g, z, post.mean_z, post.log_var_z)),
            Some(neg_mi_term(g, c_sample, post.mean_c, post.log_var_c)),
        )
    } else {
        (None, None)
    };

    PairedTerms { recon, kl_z, l_pt, l_pc, mi_z, mi_c }
}

/// Builds the raw-batch terms: reconstruction with both latents sampled from
/// their posteriors and no attention, the two KLs, and optionally the MI
/// terms (which reuse the same samples). Draw order: `eps_z`, `eps_c`.
pub fn raw_terms(
    g: &mut Graph,
    bound: &BoundModel,
    view: &RawBatchView,
    noise: &mut dyn NoiseSource,
    with_mi: bool,
) -> RawTerms {
    let b = view.batch_size();
    let dims = bound.dims;
    let post = posterior(
        g,
        &bound.inference,
        bound.generator.embed,
        &view.tokens,
        &view.mask,
    );
    let eps_z = noise.standard_normal(b, dims.template_latent);
    let z = reparameterize_graph(g, post.mean_z, post.log_var_z, eps_z);
    let eps_c = noise.standard_normal(b, dims.content_latent);
    let c = reparameterize_graph(g, post.mean_c, post.log_var_c, eps_c);

    let log_prob = sequence_log_prob_graph(
        g,
        &bound.generator,
        &view.tokens,
        &view.mask,
        z,
        c,
        None,
    );
    let neg = g.neg(log_prob);
    let recon = g.mean_all(neg);
    let kl_z_per = kl_to_standard_normal_graph(g, post.mean_z, post.log_var_z);
    let kl_z = g.mean_all(kl_z_per);
    let kl_c_per = kl_to_standard_normal_graph(g, post.mean_c, post.log_var_c);
    let kl_c = g.mean_all(kl_c_per);

    let (mi_z, mi_c) = if with_mi {
        assert!(b >= 2, "MI estimator needs batch size >= 2");
        (
            Some(neg_mi_term(g, z, post.mean_z, post.log_var_z)),
            Some(neg_mi_term(g, c, post.mean_c, post.log_var_c)),
        )
    } else {
        (None, None)
    };

    RawTerms { recon, kl_z, kl_c, mi_z, mi_c }
}

/// The total-loss tape plus the scalar breakdown.
pub struct TotalLoss {
    pub tx: Tx,
    pub breakdown: LossBreakdown,
}

/// Builds `L_tot` over an optional paired batch and an optional raw batch.
/// Auxiliary terms with zero weight are skipped entirely, matching the
/// ablation modes.
pub fn total_loss_graph(
    g: &mut Graph,
    bound: &BoundModel,
    vocab: &Vocabulary,
    paired: Option<&PairedBatchView>,
    raw: Option<&RawBatchView>,
    weights: Weights,
    noise: &mut dyn NoiseSource,
) -> TotalLoss {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Tx> = None;
    let add_term = |g: &mut Graph, total: &mut Option<Tx>, tx: Tx, w: f64| -> f64 {
        let value = g.scalar_value(tx);
        if w != 0.0 {
            let scaled = if w == 1.0 { tx } else { g.scale(tx, w) };
            *total = Some(match *total {
                Some(t) => g.add(t, scaled),
                None => scaled,
            });
        }
        value
    };

    if let Some(view) = paired {
        let flags = TermFlags {
            pt: weights.pt != 0.0,
            pc: weights.pc != 0.0,
            mi: weights.mi != 0.0 && view.batch_size() >= 2,
        };
        let terms = paired_terms(g, bound, vocab, view, noise, flags);
        breakdown.recon_p = add_term(g, &mut total, terms.recon, 1.0);
        breakdown.kl_z = add_term(g, &mut total, terms.kl_z, 1.0);
        breakdown.elbo_p = breakdown.recon_p + breakdown.kl_z;
        if let Some(tx) = terms.l_pt {
            breakdown.l_pt = add_term(g, &mut total, tx, weights.pt);
        }
        if let Some(tx) = terms.l_pc {
            breakdown.l_pc = add_term(g, &mut total, tx, weights.pc);
        }
        if let Some(tx) = terms.mi_z {
            breakdown.l_mi_z += add_term(g, &mut total, tx, weights.mi);
        }
        if let Some(tx) = terms.mi_c {
            breakdown.l_mi_c += add_term(g, &mut total, tx, weights.mi);
        }
    }

    if let Some(view) = raw {
        let with_mi = weights.mi != 0.0 && view.batch_size() >= 2;
        let terms = raw_terms(g, bound, view, noise, with_mi);
        breakdown.recon_r = add_term(g, &mut total, terms.recon, 1.0);
        breakdown.kl_z_raw = add_term(g, &mut total, terms.kl_z, 1.0);
        breakdown.kl_c_raw = add_term(g, &mut total, terms.kl_c, 1.0);
        breakdown.elbo_r = breakdown.recon_r + breakdown.kl_z_raw + breakdown.kl_c_raw;
        if let Some(tx) = terms.mi_z {
            breakdown.l_mi_z += add_term(g, &mut total, tx, weights.mi);
        }
        if let Some(tx) = terms.mi_c {
            breakdown.l_mi_c += add_term(g, &mut total, tx, weights.mi);
        }
    }

    let tx = total.expect("total_loss_graph needs at least one batch");
    breakdown.total = g.scalar_value(tx);
    TotalLoss { tx, breakdown }
}

/// Plain maximum-likelihood loss for the table-to-sequence baseline: the
/// decoder attends over the table records with the content vector as its
/// only conditioning (`z = 0`), and no variational terms exist.
pub fn table2seq_loss_graph(
    g: &mut Graph,
    bound: &BoundModel,
    vocab: &Vocabulary,
    view: &PairedBatchView,
) -> TotalLoss {
    let b = view.batch_size();
    let enc = encode_tables(g, &bound.table_encoder, &view.tables, vocab);
    let z = g.constant(Mat::zeros((b, bound.dims.template_latent)));
    let attn = Some(AttnInput { records: enc.records, segs: &enc.segs });
    let log_prob = sequence_log_prob_graph(
        g,
        &bound.generator,
        &view.sent_tokens,
        &view.mask,
        z,
        enc.content,
        attn,
    );
    let neg = g.neg(log_prob);
    let recon = g.mean_all(neg);
    let breakdown = LossBreakdown {
        recon_p: g.scalar_value(recon),
        elbo_p: g.scalar_value(recon),
        total: g.scalar_value(recon),
        ..Default::default()
    };
    TotalLoss { tx: recon, breakdown }
}

fn with_bound<R>(model: &ModelParams, f: impl FnOnce(&mut Graph, &BoundModel) -> R) -> R {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let bound = model.bind(&mut g, &mut reg);
    f(&mut g, &bound)
}

/// `-E_q(z|y)[log p(y|z, c=f_enc(x), x)] + KL(q(z|y) || p(z))`, batch mean.
pub fn elbo_paired(
    model: &ModelParams,
    vocab: &Vocabulary,
    view: &PairedBatchView,
    noise: &mut dyn NoiseSource,
) -> f64 {
    with_bound(model, |g, bound| {
        let flags = TermFlags { pt: false, pc: false, mi: false };
        let t = paired_terms(g, bound, vocab, view, noise, flags);
        g.scalar_value(t.recon) + g.scalar_value(t.kl_z)
    })
}

/// Raw-text ELBO with both latents sampled and no attention.
pub fn elbo_raw(model: &ModelParams, view: &RawBatchView, noise: &mut dyn NoiseSource) -> f64 {
    with_bound(model, |g, bound| {
        let t = raw_terms(g, bound, view, noise, false);
        g.scalar_value(t.recon) + g.scalar_value(t.kl_z) + g.scalar_value(t.kl_c)
    })
}

/// `-E_q(z|y)[log p_eta(ỹ | z)]`, batch mean.
pub fn preserving_template_loss(
    model: &ModelParams,
    vocab: &Vocabulary,
    view: &PairedBatchView,
    noise: &mut dyn NoiseSource,
) -> f64 {
    with_bound(model, |g, bound| {
        let flags = TermFlags { pt: true, pc: false, mi: false };
        let t = paired_terms(g, bound, vocab, view, noise, flags);
        g.scalar_value(t.l_pt.expect("pt requested"))
    })
}

/// Closed-form preserving-content loss:
/// `|mu_c - h|^2 + tr(Sigma_c) + KL(q(c|y) || p(c))`, batch mean.
pub fn preserving_content_loss(
    model: &ModelParams,
    vocab: &Vocabulary,
    view: &PairedBatchView,
    noise: &mut dyn NoiseSource,
) -> f64 {
    with_bound(model, |g, bound| {
        let flags = TermFlags { pt: false, pc: true, mi: false };
        let t = paired_terms(g, bound, vocab, view, noise, flags);
        g.scalar_value(t.l_pc.expect("pc requested"))
    })
}

/// The closed form of `E_q |c - h|^2` for one posterior.
pub fn expected_squared_distance(q: &DiagonalGaussian, h: &[f64]) -> f64 {
    assert_eq!(q.dim(), h.len());
    let dist: f64 = q.mean.iter().zip(h).map(|(m, t)| (m - t) * (m - t)).sum();
    let trace: f64 = q.log_variance.iter().map(|lv| lv.exp()).sum();
    dist + trace
}

/// `-I(z, y) - I(c, y)` on a sentence batch, with samples drawn from both
/// posteriors. Errors when the batch has fewer than two examples.
pub fn mutual_information_loss(
    model: &ModelParams,
    view: &RawBatchView,
    noise: &mut dyn NoiseSource,
) -> Result<f64, ObjectiveError> {
    if view.batch_size() < 2 {
        return Err(ObjectiveError::BatchTooSmall(view.batch_size()));
    }
    Ok(with_bound(model, |g, bound| {
        let t = raw_terms(g, bound, view, noise, true);
        g.scalar_value(t.mi_z.expect("mi built")) + g.scalar_value(t.mi_c.expect("mi built"))
    }))
}

/// Scalar minibatch mutual-information estimate from explicit posteriors and
/// samples (the same estimator the tape computes).
pub fn mi_estimate(posteriors: &[DiagonalGaussian], samples: &[Vec<f64>]) -> f64 {
    assert_eq!(posteriors.len(), samples.len());
    let b = posteriors.len();
    assert!(b >= 2);
    let mut acc = 0.0;
    for i in 0..b {
        let own = posteriors[i].log_density(&samples[i]);
        let logs: Vec<f64> = (0..b).map(|j| posteriors[j].log_density(&samples[i])).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        acc += own - (lse - (b as f64).ln());
    }
    acc / b as f64
}

/// Full weighted loss over one paired and (in raw modes) one raw batch.
pub fn total_loss(
    model: &ModelParams,
    vocab: &Vocabulary,
    paired: &PairedBatchView,
    raw: Option<&RawBatchView>,
    weights: Weights,
    use_raw: bool,
    noise: &mut dyn NoiseSource,
) -> Result<LossBreakdown, ObjectiveError> {
    if use_raw && raw.is_none() {
        return Err(ObjectiveError::MissingRawBatch);
    }
    let raw = if use_raw { raw } else { None };
    Ok(with_bound(model, |g, bound| {
        total_loss_graph(g, bound, vocab, Some(paired), raw, weights, noise).breakdown
    }))
}
