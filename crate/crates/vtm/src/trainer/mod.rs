//! Three-phase training loop: per iteration, one gradient step on the paired
//! loss, one on the raw loss, one on the joint total, each with fresh
//! batches. Validation ELBO selects the best epoch; early stopping kicks in
//! after `patience` epochs without improvement.

mod checkpoint;
mod config;

pub use checkpoint::Checkpoint;
pub use config::{TrainConfig, TrainMode};

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{make_batches, Batch, PairedExample, RawExample, Vocabulary};
use crate::model::{ModelParams, ParamGroup, Registry};
use crate::objectives::{
    table2seq_loss_graph, total_loss_graph, LossBreakdown, PairedBatchView, RawBatchView, Weights,
};
use crate::rng::{derive_seed, stream, NoiseSource};
use crate::tensor::{Graph, Mat};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("non-finite loss; term breakdown: {0}")]
    Diverged(String),
    #[error("empty training data")]
    EmptyTrainingData,
    #[error("validation split is missing or empty")]
    MissingValidation,
    #[error("mode {0} requires raw training data")]
    MissingRawData(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Adam with per-parameter moments and step counts, aligned with the model's
/// visit order. Only the parameter groups named by the active training phase
/// are touched; everything else stays bitwise identical.
#[derive(Debug, Clone)]
pub struct AdamState {
    groups: Vec<ParamGroup>,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> Self {
        let mut groups = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        model.visit(&mut |g, _, mat| {
            groups.push(g);
            m.push(Mat::zeros(mat.dim()));
            v.push(Mat::zeros(mat.dim()));
        });
        let t = vec![0; groups.len()];
        Self { groups, m, v, t, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn step_count(&self, i: usize) -> u64 {
        self.t[i]
    }

    pub fn first_moment(&self, i: usize) -> &Mat {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Mat {
        &self.v[i]
    }

    pub fn restore(&mut self, i: usize, t: u64, m: Mat, v: Mat) {
        self.t[i] = t;
        self.m[i] = m;
        self.v[i] = v;
    }

    /// One Adam update over the parameters whose group is in `groups`.
    /// `grads` is aligned with the visit order; `None` means no gradient
    /// reached that parameter (treated as zero). Gradients are jointly
    /// rescaled when their global norm exceeds `clip`.
    pub fn update(
        &mut self,
        model: &mut ModelParams,
        grads: &[Option<Mat>],
        groups: &[ParamGroup],
        lr: f64,
        clip: f64,
    ) {
        assert_eq!(grads.len(), self.len());
        let mut norm_sq = 0.0;
        for (i, grad) in grads.iter().enumerate() {
            if !groups.contains(&self.groups[i]) {
                continue;
            }
            if let Some(g) = grad {
                norm_sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = norm_sq.sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };

        let zero = Mat::zeros((0, 0));
        let mut idx = 0;
        model.visit_mut(&mut |group, _, param| {
            let i = idx;
            idx += 1;
            if !groups.contains(&group) {
                return;
            }
            let g = match &grads[i] {
                Some(g) => g,
                None => &zero,
            };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let b1 = self.beta1;
            let b2 = self.beta2;
            let bias1 = 1.0 - b1.powi(t);
            let bias2 = 1.0 - b2.powi(t);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for r in 0..param.nrows() {
                for c in 0..param.ncols() {
                    let ge = if g.is_empty() { 0.0 } else { g[[r, c]] * scale };
                    m[[r, c]] = b1 * m[[r, c]] + (1.0 - b1) * ge;
                    v[[r, c]] = b2 * v[[r, c]] + (1.0 - b2) * ge * ge;
                    let m_hat = m[[r, c]] / bias1;
                    let v_hat = v[[r, c]] / bias2;
                    param[[r, c]] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        });
    }
}

/// Loaded training data plus the vocabulary everything was encoded with.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub paired_train: Vec<PairedExample>,
    pub paired_valid: Vec<PairedExample>,
    pub raw_train: Vec<RawExample>,
    pub raw_valid: Vec<RawExample>,
}

/// Per-epoch validation record.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub val_elbo_p: f64,
    pub val_elbo_r: f64,
    pub val_selection: f64,
    pub improved: bool,
}

pub struct FitReport {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn check_finite(b: &LossBreakdown) -> Result<LossBreakdown, TrainerError> {
    if b.is_finite() {
        Ok(*b)
    } else {
        Err(TrainerError::Diverged(format!("{b:?}")))
    }
}

fn collect_grads(g: &Graph, reg: &Registry) -> Vec<Option<Mat>> {
    reg.entries
        .iter()
        .map(|&(_, _, tx)| g.grad(tx).cloned())
        .collect()
}

/// Phase 1: one Adam update of all parameter groups on
/// `ELBO_p + MI + pt + pc` (plain maximum likelihood in table2seq mode,
/// which owns only the table encoder and generator).
pub fn train_step_paired(
    model: &mut ModelParams,
    adam: &mut AdamState,
    vocab: &Vocabulary,
    view: &PairedBatchView,
    config: &TrainConfig,
    noise: &mut dyn NoiseSource,
) -> Result<LossBreakdown, TrainerError> {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let bound = model.bind(&mut g, &mut reg);
    let (loss, groups): (_, &[ParamGroup]) = if config.mode.is_table2seq() {
        (
            table2seq_loss_graph(&mut g, &bound, vocab, view),
            &[ParamGroup::TableEncoder, ParamGroup::Generator],
        )
    } else {
        (
            total_loss_graph(&mut g, &bound, vocab, Some(view), None, config.weights(), noise),
            &ParamGroup::ALL,
        )
    };
    let breakdown = check_finite(&loss.breakdown)?;
    g.backward(loss.tx);
    let grads = collect_grads(&g, &reg);
    adam.update(model, &grads, groups, config.learning_rate, config.grad_clip);
    Ok(breakdown)
}

/// Phase 2: one Adam update of the inference and generator groups on
/// `ELBO_r + MI`. The template generator and table encoder stay untouched.
pub fn train_step_raw(
    model: &mut ModelParams,
    adam: &mut AdamState,
    vocab: &Vocabulary,
    view: &RawBatchView,
    config: &TrainConfig,
    noise: &mut dyn NoiseSource,
) -> Result<LossBreakdown, TrainerError> {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let bound = model.bind(&mut g, &mut reg);
    let loss = total_loss_graph(&mut g, &bound, vocab, None, Some(view), config.weights(), noise);
    let breakdown = check_finite(&loss.breakdown)?;
    g.backward(loss.tx);
    let grads = collect_grads(&g, &reg);
    adam.update(
        model,
        &grads,
        &[ParamGroup::Inference, ParamGroup::Generator],
        config.learning_rate,
        config.grad_clip,
    );
    Ok(breakdown)
}

/// Phase 3: one Adam update of all groups on the full `L_tot`. In modes
/// without raw data this degenerates to phase-1 semantics on fresh batches.
pub fn train_step_joint(
    model: &mut ModelParams,
    adam: &mut AdamState,
    vocab: &Vocabulary,
    paired: &PairedBatchView,
    raw: Option<&RawBatchView>,
    config: &TrainConfig,
    noise: &mut dyn NoiseSource,
) -> Result<LossBreakdown, TrainerError> {
    let mut g = Graph::new();
    let mut reg = Registry::default();
    let bound = model.bind(&mut g, &mut reg);
    let raw = if config.mode.uses_raw() { raw } else { None };
    let loss = total_loss_graph(&mut g, &bound, vocab, Some(paired), raw, config.weights(), noise);
    let breakdown = check_finite(&loss.breakdown)?;
    g.backward(loss.tx);
    let grads = collect_grads(&g, &reg);
    adam.update(
        model,
        &grads,
        &ParamGroup::ALL,
        config.learning_rate,
        config.grad_clip,
    );
    Ok(breakdown)
}

/// Endless seeded re-batching over the raw set; the raw corpus is much
/// larger than the paired one, so it cycles independently of epochs.
struct RawCycle<'a> {
    examples: &'a [RawExample],
    seqs: Vec<&'a [usize]>,
    batch_size: usize,
    seed: u64,
    round: u64,
    queue: Vec<Batch>,
}

impl<'a> RawCycle<'a> {
    fn new(examples: &'a [RawExample], batch_size: usize, seed: u64) -> Self {
        let seqs = examples.iter().map(|e| e.sentence.as_slice()).collect();
        Self { examples, seqs, batch_size, seed, round: 0, queue: Vec::new() }
    }

    fn next_view(&mut self) -> RawBatchView {
        if self.queue.is_empty() {
            let seed = derive_seed(self.seed, &format!("raw-round-{}", self.round));
            self.round += 1;
            self.queue = make_batches(&self.seqs, self.batch_size, seed);
            self.queue.reverse();
        }
        let batch = self.queue.pop().expect("raw corpus is non-empty");
        RawBatchView::from_batch(self.examples, &batch)
    }
}

/// Validation ELBO with a fixed per-epoch noise stream, so epochs are
/// comparable and reruns identical. Returns `(elbo_p, elbo_r)` averaged per
/// example; `elbo_r` is zero for modes without raw data.
fn validation_scores(
    model: &ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
) -> (f64, f64) {
    let mut noise: ChaCha8Rng = stream(config.seed, "valid-noise");
    let seqs: Vec<&[usize]> = dataset
        .paired_valid
        .iter()
        .map(|e| e.sentence.as_slice())
        .collect();
    let batches = make_batches(&seqs, config.batch_size_paired, derive_seed(config.seed, "valid"));
    let mut total_p = 0.0;
    let mut n_p = 0usize;
    for batch in &batches {
        let view = PairedBatchView::from_batch(&dataset.paired_valid, &batch);
        let mut g = Graph::new();
        let mut reg = Registry::default();
        let bound = model.bind(&mut g, &mut reg);
        let value = if config.mode.is_table2seq() {
            table2seq_loss_graph(&mut g, &bound, &dataset.vocab, &view).breakdown.elbo_p
        } else {
            let loss = total_loss_graph(
                &mut g,
                &bound,
                &dataset.vocab,
                Some(&view),
                None,
                Weights { mi: 0.0, pt: 0.0, pc: 0.0 },
                &mut noise,
            );
            loss.breakdown.elbo_p
        };
        total_p += value * view.batch_size() as f64;
        n_p += view.batch_size();
    }
    let elbo_p = total_p / n_p.max(1) as f64;

    let mut elbo_r = 0.0;
    if config.mode.uses_raw() && !dataset.raw_valid.is_empty() {
        let seqs: Vec<&[usize]> = dataset
            .raw_valid
            .iter()
            .map(|e| e.sentence.as_slice())
            .collect();
        let batches =
            make_batches(&seqs, config.batch_size_raw, derive_seed(config.seed, "valid-raw"));
        let mut total_r = 0.0;
        let mut n_r = 0usize;
        for batch in &batches {
            let view = RawBatchView::from_batch(&dataset.raw_valid, &batch);
            let mut g = Graph::new();
            let mut reg = Registry::default();
            let bound = model.bind(&mut g, &mut reg);
            let loss = total_loss_graph(
                &mut g,
                &bound,
                &dataset.vocab,
                None,
                Some(&view),
                Weights { mi: 0.0, pt: 0.0, pc: 0.0 },
                &mut noise,
            );
            total_r += loss.breakdown.elbo_r * view.batch_size() as f64;
            n_r += view.batch_size();
        }
        elbo_r = total_r / n_r.max(1) as f64;
    }
    (elbo_p, elbo_r)
}

/// Optional CSV writers for per-step and per-epoch logs.
pub struct TrainLogs {
    step: Option<std::io::BufWriter<std::fs::File>>,
    epoch: Option<std::io::BufWriter<std::fs::File>>,
}

impl TrainLogs {
    pub fn none() -> Self {
        Self { step: None, epoch: None }
    }

    pub fn in_dir(dir: &Path) -> Result<Self, TrainerError> {
        std::fs::create_dir_all(dir)?;
        let mut step = std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.csv"))?);
        writeln!(step, "step,phase,{}", LossBreakdown::CSV_HEADER)?;
        let mut epoch = std::io::BufWriter::new(std::fs::File::create(dir.join("epochs.csv"))?);
        writeln!(epoch, "epoch,val_elbo_p,val_elbo_r,val_selection,improved")?;
        Ok(Self { step: Some(step), epoch: Some(epoch) })
    }

    fn log_step(&mut self, step: usize, phase: &str, b: &LossBreakdown) -> Result<(), TrainerError> {
        if let Some(w) = &mut self.step {
            writeln!(w, "{step},{phase},{}", b.csv_row())?;
        }
        Ok(())
    }

    fn log_epoch(&mut self, s: &EpochStats) -> Result<(), TrainerError> {
        if let Some(w) = &mut self.epoch {
            writeln!(
                w,
                "{},{},{},{},{}",
                s.epoch, s.val_elbo_p, s.val_elbo_r, s.val_selection, s.improved
            )?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TrainerError> {
        if let Some(w) = &mut self.step {
            w.flush()?;
        }
        if let Some(w) = &mut self.epoch {
            w.flush()?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the checkpoint of the best-validation
/// epoch. Fully deterministic under a fixed config seed.
pub fn fit(dataset: &Dataset, config: &TrainConfig, logs: &mut TrainLogs) -> Result<FitReport, TrainerError> {
    if dataset.paired_train.is_empty() {
        return Err(TrainerError::EmptyTrainingData);
    }
    if dataset.paired_valid.is_empty() {
        return Err(TrainerError::MissingValidation);
    }
    if config.mode.uses_raw() && dataset.raw_train.is_empty() {
        return Err(TrainerError::MissingRawData(config.mode.name()));
    }

    let dims = config.dims(dataset.vocab.word_count(), dataset.vocab.field_count());
    let mut init_rng = stream(config.seed, "init");
    let mut model = ModelParams::init(dims, &mut init_rng);
    let mut adam = AdamState::new(&model);
    let mut noise = stream(config.seed, "train-noise");

    let paired_seqs: Vec<&[usize]> = dataset
        .paired_train
        .iter()
        .map(|e| e.sentence.as_slice())
        .collect();
    let mut raw_cycle = (!dataset.raw_train.is_empty())
        .then(|| RawCycle::new(&dataset.raw_train, config.batch_size_raw, config.seed));

    let mut best: Option<(f64, usize, ModelParams, AdamState, u128)> = None;
    let mut history = Vec::new();
    let mut stale = 0usize;
    let mut step_no = 0usize;

    for epoch in 0..config.max_epochs {
        let seed = derive_seed(config.seed, &format!("paired-epoch-{epoch}"));
        let batches = make_batches(&paired_seqs, config.batch_size_paired, seed);
        let mut queue: std::collections::VecDeque<Batch> = batches.into();
        while let Some(first) = queue.pop_front() {
            let view = PairedBatchView::from_batch(&dataset.paired_train, &first);
            let b = train_step_paired(&mut model, &mut adam, &dataset.vocab, &view, config, &mut noise)?;
            logs.log_step(step_no, "paired", &b)?;
            step_no += 1;

            if config.mode.is_table2seq() {
                continue;
            }
            if config.mode.uses_raw() {
                let raw_view = raw_cycle.as_mut().expect("raw data checked").next_view();
                let b = train_step_raw(&mut model, &mut adam, &dataset.vocab, &raw_view, config, &mut noise)?;
                logs.log_step(step_no, "raw", &b)?;
                step_no += 1;
            }
            if let Some(second) = queue.pop_front() {
                let view = PairedBatchView::from_batch(&dataset.paired_train, &second);
                let raw_view = config
                    .mode
                    .uses_raw()
                    .then(|| raw_cycle.as_mut().expect("raw data checked").next_view());
                let b = train_step_joint(
                    &mut model,
                    &mut adam,
                    &dataset.vocab,
                    &view,
                    raw_view.as_ref(),
                    config,
                    &mut noise,
                )?;
                logs.log_step(step_no, "joint", &b)?;
                step_no += 1;
            }
        }

        let (val_p, val_r) = validation_scores(&model, dataset, config);
        let selection = if config.mode.uses_raw() { val_p + val_r } else { val_p };
        let improved = best.as_ref().is_none_or(|(b, ..)| selection < *b);
        let stats = EpochStats {
            epoch,
            val_elbo_p: val_p,
            val_elbo_r: val_r,
            val_selection: selection,
            improved,
        };
        logs.log_epoch(&stats)?;
        history.push(stats);
        if improved {
            best = Some((
                selection,
                epoch,
                model.clone(),
                adam.clone(),
                noise.get_word_pos(),
            ));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    logs.flush()?;

    let (best_val, best_epoch, best_model, best_adam, word_pos) =
        best.expect("at least one epoch ran");
    Ok(FitReport {
        checkpoint: Checkpoint {
            config: config.clone(),
            vocab: dataset.vocab.clone(),
            model: best_model,
            adam: best_adam,
            best_val,
            best_epoch,
            rng: (derive_seed(config.seed, "train-noise"), word_pos),
        },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_vocab, encode_paired, encode_raw, generate_toy_corpus, TemplateOverlap, ToyOptions,
    };
    use crate::objectives::total_loss;
    use crate::rng::FixedNoise;

    fn toy_dataset(n_paired: usize, n_raw: usize, seed: u64) -> Dataset {
        let corpus = generate_toy_corpus(&ToyOptions {
            n_paired,
            n_raw,
            n_templates: 3,
            seed,
            raw_templates: TemplateOverlap::Shared,
        })
        .unwrap();
        let sentences: Vec<Vec<String>> = corpus
            .paired
            .iter()
            .chain(corpus.raw.iter())
            .map(|e| e.sentence.clone())
            .collect();
        let tables: Vec<_> = corpus
            .paired
            .iter()
            .filter_map(|e| e.table.clone())
            .collect();
        let vocab = build_vocab(&sentences, &tables, 1).unwrap();
        let n_valid = (n_paired / 5).max(2);
        let paired: Vec<PairedExample> = corpus
            .paired
            .iter()
            .map(|e| encode_paired(e.table.clone().unwrap(), &e.sentence, &vocab))
            .collect();
        let raw: Vec<RawExample> = corpus
            .raw
            .iter()
            .map(|e| encode_raw(&e.sentence, &vocab))
            .collect();
        let split = paired.len() - n_valid;
        let raw_split = raw.len().saturating_sub((n_raw / 5).max(2)).max(1);
        Dataset {
            vocab,
            paired_train: paired[..split].to_vec(),
            paired_valid: paired[split..].to_vec(),
            raw_train: raw.get(..raw_split).unwrap_or(&[]).to_vec(),
            raw_valid: raw.get(raw_split..).unwrap_or(&[]).to_vec(),
        }
    }

    fn small_config(mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            seed,
            embed_dim: 6,
            hidden_dim: 8,
            table_dim: 6,
            d_z: 3,
            d_c: 4,
            lambda_mi: 1.0,
            lambda_pt: 1.0,
            lambda_pc: 1.0,
            batch_size_paired: 4,
            batch_size_raw: 4,
            max_epochs: 2,
            patience: 2,
            min_count: 1,
            ..TrainConfig::default()
        }
    }

    fn first_paired_view(dataset: &Dataset, n: usize) -> PairedBatchView<'_> {
        let seqs: Vec<&[usize]> = dataset
            .paired_train
            .iter()
            .map(|e| e.sentence.as_slice())
            .collect();
        let batch = make_batches(&seqs[..n], n, 5).remove(0);
        PairedBatchView::from_batch(&dataset.paired_train, &batch)
    }

    fn first_raw_view(dataset: &Dataset, n: usize) -> RawBatchView {
        let seqs: Vec<&[usize]> = dataset
            .raw_train
            .iter()
            .map(|e| e.sentence.as_slice())
            .collect();
        let batch = make_batches(&seqs[..n], n, 6).remove(0);
        RawBatchView::from_batch(&dataset.raw_train, &batch)
    }

    fn snapshot_group(model: &ModelParams, group: ParamGroup) -> Vec<Mat> {
        let mut out = Vec::new();
        model.visit(&mut |g, _, m| {
            if g == group {
                out.push(m.clone());
            }
        });
        out
    }

    #[test]
    fn raw_step_leaves_template_and_table_encoder_bitwise_unchanged() {
        let dataset = toy_dataset(20, 20, 1);
        let config = small_config(TrainMode::Vtm, 2);
        let dims = config.dims(dataset.vocab.word_count(), dataset.vocab.field_count());
        let mut rng = stream(3, "init");
        let mut model = ModelParams::init(dims, &mut rng);
        let mut adam = AdamState::new(&model);

        // A paired step first, so optimizer momentum is non-zero everywhere.
        let view = first_paired_view(&dataset, 4);
        let mut noise = stream(4, "noise");
        train_step_paired(&mut model, &mut adam, &dataset.vocab, &view, &config, &mut noise)
            .unwrap();

        let template_before = snapshot_group(&model, ParamGroup::TemplateGenerator);
        let table_before = snapshot_group(&model, ParamGroup::TableEncoder);
        let raw_view = first_raw_view(&dataset, 4);
        train_step_raw(&mut model, &mut adam, &dataset.vocab, &raw_view, &config, &mut noise)
            .unwrap();
        assert_eq!(template_before, snapshot_group(&model, ParamGroup::TemplateGenerator));
        assert_eq!(table_before, snapshot_group(&model, ParamGroup::TableEncoder));

        // The inference and generator groups did move.
        let inf_after = snapshot_group(&model, ParamGroup::Inference);
        let mut rng = stream(3, "init");
        let fresh = ModelParams::init(dims, &mut rng);
        assert_ne!(snapshot_group(&fresh, ParamGroup::Inference), inf_after);
    }

    #[test]
    fn paired_step_reaches_every_parameter_group() {
        let dataset = toy_dataset(20, 0, 7);
        let config = small_config(TrainMode::VtmNoRaw, 8);
        let dims = config.dims(dataset.vocab.word_count(), dataset.vocab.field_count());
        let mut rng = stream(9, "init");
        let model = ModelParams::init(dims, &mut rng);
        let view = first_paired_view(&dataset, 4);

        let mut g = Graph::new();
        let mut reg = Registry::default();
        let bound = model.bind(&mut g, &mut reg);
        let mut noise = stream(10, "noise");
        let loss = total_loss_graph(
            &mut g,
            &bound,
            &dataset.vocab,
            Some(&view),
            None,
            config.weights(),
            &mut noise,
        );
        g.backward(loss.tx);
        let mut group_norms = std::collections::HashMap::new();
        for (group, _, tx) in &reg.entries {
            let n = g
                .grad(*tx)
                .map(|m| m.iter().map(|v| v * v).sum::<f64>())
                .unwrap_or(0.0);
            *group_norms.entry(*group).or_insert(0.0) += n;
        }
        for group in ParamGroup::ALL {
            assert!(
                group_norms[&group] > 0.0,
                "group {} received no gradient",
                group.label()
            );
        }
    }

    #[test]
    fn repeated_steps_on_frozen_batch_decrease_smoothed_loss() {
        let dataset = toy_dataset(12, 0, 11);
        let mut config = small_config(TrainMode::VtmNoRaw, 12);
        config.learning_rate = 0.003;
        let dims = config.dims(dataset.vocab.word_count(), dataset.vocab.field_count());
        let mut rng = stream(13, "init");
        let mut model = ModelParams::init(dims, &mut rng);
        let mut adam = AdamState::new(&model);
        let view = first_paired_view(&dataset, 4);

        let mut noise = stream(14, "noise");
        let mut losses = Vec::new();
        for _ in 0..50 {
            let b = train_step_paired(&mut model, &mut adam, &dataset.vocab, &view, &config, &mut noise)
                .unwrap();
            losses.push(b.total);
        }
        let ma: Vec<f64> = losses
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        for pair in ma.windows(2) {
            assert!(
                pair[1] < pair[0],
                "5-step moving average must strictly decrease: {pair:?}"
            );
        }
    }

    #[test]
    fn table2seq_step_reduces_to_plain_likelihood() {
        let dataset = toy_dataset(16, 0, 15);
        let config = small_config(TrainMode::Table2Seq, 16);
        let dims = config.dims(dataset.vocab.word_count(), dataset.vocab.field_count());
        let mut rng = stream(17, "init");
        let mut model = ModelParams::init(dims, &mut rng);
        let mut adam = AdamState::new(&model);
        let view = first_paired_view(&dataset, 4);
        let mut noise = stream(18, "noise");
        let b = train_step_paired(&mut model, &mut adam, &dataset.vocab, &view, &config, &mut noise)
            .unwrap();
        assert_eq!(b.kl_z, 0.0);
        assert_eq!(b.l_pt, 0.0);
        assert_eq!(b.l_mi_z, 0.0);
        assert_eq!(b.total, b.recon_p);
        // Latent-side groups are untouched in this mode.
        let mut rng = stream(17, "init");
        let fresh = ModelParams::init(dims, &mut rng);
        assert_eq!(
            snapshot_group(&fresh, ParamGroup::Inference),
            snapshot_group(&model, ParamGroup::Inference)
        );
    }

    #[test]
    fn joint_step_breakdown_sums_and_gradient_composes() {
        let dataset = toy_dataset(20, 20, 19);
        let config = small_config(TrainMode::Vtm, 20);
        let dims = config.dims(dataset.vocab.word_count(), dataset.vocab.field_count());
        let mut rng = stream(21, "init");
        let model = ModelParams::init(dims, &mut rng);
        let paired = first_paired_view(&dataset, 3);
        let raw = first_raw_view(&dataset, 3);

        let shapes = [(3, 3), (3, 4), (3, 3), (3, 4)];
        let mut src = stream(22, "noise");
        let noise = FixedNoise::new(
            shapes
                .iter()
                .map(|&(r, c)| src.standard_normal(r, c))
                .collect(),
        );

        let mut n1 = noise.clone();
        let b = total_loss(
            &model,
            &dataset.vocab,
            &paired,
            Some(&raw),
            config.weights(),
            true,
            &mut n1,
        )
        .unwrap();
        let expect = b.elbo_p
            + b.elbo_r
            + config.lambda_mi * (b.l_mi_z + b.l_mi_c)
            + config.lambda_pt * b.l_pt
            + config.lambda_pc * b.l_pc;
        assert!((b.total - expect).abs() < 1e-6);

        // Gradient of the total equals the weighted sum of per-term
        // gradients, evaluated with identical noise draws.
        let grad_of = |weights: Weights, use_raw: bool| -> Vec<Option<Mat>> {
            let mut g = Graph::new();
            let mut reg = Registry::default();
            let bound = model.bind(&mut g, &mut reg);
            let mut n = noise.clone();
            // Keep the draw order identical across evaluations: always
            // consume the paired draws, then the raw draws.
            let loss = total_loss_graph(
                &mut g,
                &bound,
                &dataset.vocab,
                Some(&paired),
                use_raw.then_some(&raw),
                weights,
                &mut n,
            );
            g.backward(loss.tx);
            collect_grads(&g, &reg)
        };
        let full = grad_of(config.weights(), true);
        let elbo_only = grad_of(Weights { mi: 0.0, pt: 0.0, pc: 0.0 }, true);
        let with_pt = grad_of(Weights { mi: 0.0, pt: config.lambda_pt, pc: 0.0 }, true);
        let with_pc = grad_of(Weights { mi: 0.0, pt: 0.0, pc: config.lambda_pc }, true);
        let with_mi = grad_of(Weights { mi: config.lambda_mi, pt: 0.0, pc: 0.0 }, true);
        for i in 0..full.len() {
            let f = full[i].clone().unwrap_or_default();
            if f.is_empty() {
                continue;
            }
            let mut sum = Mat::zeros(f.dim());
            let mut base_counted = 0;
            for part in [&elbo_only, &with_pt, &with_pc, &with_mi] {
                if let Some(p) = &part[i] {
                    sum += p;
                    base_counted += 1;
                }
            }
            // The ELBO contribution appears in all four partials.
            if base_counted > 0 {
                if let Some(e) = &elbo_only[i] {
                    sum -= &(e * (base_counted as f64 - 1.0));
                }
            }
            for (a, b) in f.iter().zip(sum.iter()) {
                assert!(
                    (a - b).abs() < 1e-8 * (1.0 + a.abs()),
                    "param {i}: total grad {a} vs composed {b}"
                );
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_improves_validation() {
        let dataset = toy_dataset(30, 30, 23);
        let mut config = small_config(TrainMode::Vtm, 24);
        config.max_epochs = 3;
        let r1 = fit(&dataset, &config, &mut TrainLogs::none()).unwrap();
        let r2 = fit(&dataset, &config, &mut TrainLogs::none()).unwrap();
        assert_eq!(r1.checkpoint.best_epoch, r2.checkpoint.best_epoch);
        let mut a = Vec::new();
        r1.checkpoint.model.visit(&mut |_, _, m| a.push(m.clone()));
        let mut b = Vec::new();
        r2.checkpoint.model.visit(&mut |_, _, m| b.push(m.clone()));
        assert_eq!(a, b, "two fits with the same seed are bitwise identical");

        let first = r1.history.first().unwrap().val_selection;
        let best = r1.checkpoint.best_val;
        assert!(best <= first, "best validation never exceeds epoch 0");
    }

    #[test]
    fn fit_rejects_empty_data() {
        let dataset = toy_dataset(10, 10, 25);
        let empty = Dataset {
            vocab: dataset.vocab.clone(),
            paired_train: vec![],
            paired_valid: dataset.paired_valid.clone(),
            raw_train: vec![],
            raw_valid: vec![],
        };
        let config = small_config(TrainMode::Vtm, 26);
        assert!(matches!(
            fit(&empty, &config, &mut TrainLogs::none()),
            Err(TrainerError::EmptyTrainingData)
        ));

        let no_raw = Dataset { raw_train: vec![], ..dataset.clone() };
        assert!(matches!(
            fit(&no_raw, &config, &mut TrainLogs::none()),
            Err(TrainerError::MissingRawData(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_identical() {
        let dataset = toy_dataset(12, 12, 27);
        let mut config = small_config(TrainMode::Vtm, 28);
        config.max_epochs = 1;
        let report = fit(&dataset, &config, &mut TrainLogs::none()).unwrap();
        let dir = std::env::temp_dir().join(format!("vtm-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.vtm");
        report.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        std::fs::remove_dir_all(&dir).ok();

        let mut a = Vec::new();
        report.checkpoint.model.visit(&mut |_, _, m| a.push(m.clone()));
        let mut b = Vec::new();
        loaded.model.visit(&mut |_, _, m| b.push(m.clone()));
        assert_eq!(a, b);
        assert_eq!(report.checkpoint.best_val.to_bits(), loaded.best_val.to_bits());
        assert_eq!(report.checkpoint.rng, loaded.rng);

        // Identical forward pass on a fixed batch with fixed noise.
        let view = first_paired_view(&dataset, 3);
        let shapes = [(3, 3), (3, 4)];
        let mut src = stream(29, "noise");
        let fixed = FixedNoise::new(
            shapes
                .iter()
                .map(|&(r, c)| src.standard_normal(r, c))
                .collect(),
        );
        let eval = |m: &ModelParams| -> f64 {
            let mut n = fixed.clone();
            crate::objectives::elbo_paired(m, &dataset.vocab, &view, &mut n)
        };
        let x = eval(&report.checkpoint.model);
        let y = eval(&loaded.model);
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
