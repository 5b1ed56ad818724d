//! Joint loss assembly, the optimizer loop, evaluation and checkpointing.

pub mod checkpoint;
pub mod gradcheck;
mod optim;

pub use optim::Optimizer;

use crate::config::{BaselineKind, TrainConfig};
use crate::encoding::Interaction;
use crate::error::{Error, Result};
use crate::generation::{
    class_cross_entropy, decode_tape, kl_tape, reparameterize_tape, vae_loss, CandidateItem,
    GeneratedOutput,
};
use crate::model::{
    example_from_sequence, examples_per_step, forward_tape, infer, ModelNodes, ModelParams,
    PipelineTape, TrainExample,
};
use crate::numerics::{kl_diag_gaussian, Matrix, NodeId, Rng, Tape};
use crate::providers::ModalityKind;

/// The reported loss, with total reassembled from the parts so the
/// decomposition total = vae + lambda1 * score + lambda2 * class is exact.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub total: f64,
    pub vae: f64,
    pub score: f64,
    pub class: f64,
}

impl LossComponents {
    pub fn assemble(vae: f64, score: f64, class: f64, cfg: &TrainConfig) -> Self {
        Self {
            total: vae + cfg.lambda1 * score + cfg.lambda2 * class,
            vae,
            score,
            class,
        }
    }
}

/// Pure joint loss for one generated output against its target.
pub fn joint_loss(
    output: &GeneratedOutput,
    target: &CandidateItem,
    mu: &[f64],
    sigma: &[f64],
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    let vae = vae_loss(output, &target.features, mu, sigma)?;
    let err = output.score - target.score_label;
    let class = class_cross_entropy(&output.class_probs, target.class_label)?;
    Ok(LossComponents::assemble(vae, err * err, class, cfg))
}

/// Component nodes for one example's loss on the tape.
pub struct LossNodes {
    pub total: NodeId,
    pub vae: NodeId,
    pub score: NodeId,
    pub class: NodeId,
}

fn mean_of(tape: &mut Tape, parts: &[NodeId]) -> NodeId {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p);
    }
    tape.scale(acc, 1.0 / parts.len() as f64)
}

/// Build one example's loss. `eps_draws` holds one reparameterization draw
/// per VAE sample; the expectation term averages over them.
pub fn example_loss_tape(
    tape: &mut Tape,
    nodes: &ModelNodes,
    cfg: &TrainConfig,
    example: &TrainExample,
    eps_draws: &[Vec<f64>],
) -> Result<(LossNodes, PipelineTape)> {
    assert!(!eps_draws.is_empty(), "at least one VAE sample");
    let pipe = forward_tape(
        tape,
        nodes,
        cfg,
        &example.prefix,
        &example.candidate,
        &eps_draws[0],
    )?;
    let target = tape.input(Matrix::row_vector(&example.candidate.features));
    let score_label = tape.input(Matrix::scalar(example.candidate.score_label));

    let mut recons = Vec::with_capacity(eps_draws.len());
    let mut score_errs = Vec::with_capacity(eps_draws.len());
    let mut class_ces = Vec::with_capacity(eps_draws.len());
    let mut heads = vec![(pipe.content, pipe.score, pipe.class_probs)];
    for eps in &eps_draws[1..] {
        let eps_node = tape.input(Matrix::row_vector(eps));
        let latent = reparameterize_tape(tape, pipe.mu, pipe.sigma, eps_node);
        let cand = tape.input(Matrix::row_vector(&example.candidate.features));
        let (content, score, _logits, probs) = decode_tape(tape, latent, cand, &nodes.vae);
        heads.push((content, score, probs));
    }
    for (content, score, probs) in heads {
        let diff = tape.sub(content, target);
        let sq = tape.mul(diff, diff);
        recons.push(tape.sum_all(sq));

        let err = tape.sub(score, score_label);
        score_errs.push(tape.mul(err, err));

        let lp = tape.ln_clamped(probs, 1e-12);
        let pick = tape.slice_cols(lp, example.candidate.class_label, 1);
        class_ces.push(tape.scale(pick, -1.0));
    }

    let recon = mean_of(tape, &recons);
    let kl = kl_tape(tape, pipe.mu, pipe.sigma);
    let vae = tape.add(recon, kl);
    let score = mean_of(tape, &score_errs);
    let class = mean_of(tape, &class_ces);

    let weighted_score = tape.scale(score, cfg.lambda1);
    let partial = tape.add(vae, weighted_score);
    let weighted_class = tape.scale(class, cfg.lambda2);
    let total = tape.add(partial, weighted_class);

    Ok((
        LossNodes {
            total,
            vae,
            score,
            class,
        },
        pipe,
    ))
}

fn draw_eps(rng: &mut Rng, cfg: &TrainConfig) -> Vec<Vec<f64>> {
    (0..cfg.vae_samples)
        .map(|_| (0..cfg.d_latent).map(|_| rng.next_normal()).collect())
        .collect()
}

/// Forward the batch, backpropagate the mean loss and apply one optimizer
/// update. Aborts with a diagnostic naming the offending sequence if any
/// example's loss is non-finite.
pub fn train_step(
    batch: &[TrainExample],
    params: &mut ModelParams,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut Rng,
) -> Result<LossComponents> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let nodes = ModelNodes::register(params, &mut tape);
    let mut totals = Vec::with_capacity(batch.len());
    let mut sums = (0.0, 0.0, 0.0);
    for example in batch {
        let eps = draw_eps(rng, cfg);
        let (loss, _) = example_loss_tape(&mut tape, &nodes, cfg, example, &eps)?;
        let value = tape.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss for user '{}' at step {} is {value}",
                example.user_id, example.step
            )));
        }
        sums.0 += tape.value(loss.vae).item();
        sums.1 += tape.value(loss.score).item();
        sums.2 += tape.value(loss.class).item();
        totals.push(loss.total);
    }
    let batch_loss = mean_of(&mut tape, &totals);
    let grads = tape.backward(batch_loss);
    let mut grad_mats: Vec<Matrix> = nodes.ids().iter().map(|&id| grads.get(id).clone()).collect();
    opt.step(params, &mut grad_mats);

    let n = batch.len() as f64;
    Ok(LossComponents::assemble(
        sums.0 / n,
        sums.1 / n,
        sums.2 / n,
        cfg,
    ))
}

/// One epoch's mean loss.
#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossComponents,
}

fn shuffle(indices: &mut [usize], rng: &mut Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.next_index(i + 1);
        indices.swap(i, j);
    }
}

/// Full training loop over per-user sequences, one target example per
/// sequence. Epoch order is reshuffled deterministically from the seed.
pub fn train(
    sequences: &[(String, Vec<Interaction>)],
    params: &mut ModelParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if sequences.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    let examples: Vec<TrainExample> = sequences
        .iter()
        .map(|(_, seq)| example_from_sequence(seq, cfg))
        .collect::<Result<_>>()?;
    let mut opt = Optimizer::new(cfg);
    let mut rng = Rng::new(cfg.seed).derive(0x7261696e); // training stream
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let loss = train_step(&batch, params, cfg, &mut opt, &mut rng)?;
            let w = batch.len() as f64;
            sums.0 += loss.vae * w;
            sums.1 += loss.score * w;
            sums.2 += loss.class * w;
        }
        let n = examples.len() as f64;
        let log = EpochLog {
            epoch,
            loss: LossComponents::assemble(sums.0 / n, sums.1 / n, sums.2 / n, cfg),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Deterministic (eps = 0) metrics over per-user sequences.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub examples: usize,
    pub score_mse: f64,
    pub class_accuracy: f64,
    pub class_cross_entropy: f64,
    pub mean_kl: f64,
    pub mean_reconstruction: f64,
    /// Mean fusion weight per modality over all evaluated examples
    /// (absent modalities contribute an exact zero).
    pub alpha: [f64; 4],
}

impl EvalReport {
    /// Line-delimited `name<TAB>value` records in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("examples\t{}\n", self.examples));
        s.push_str(&format!("score_mse\t{}\n", self.score_mse));
        s.push_str(&format!("class_accuracy\t{}\n", self.class_accuracy));
        s.push_str(&format!("class_cross_entropy\t{}\n", self.class_cross_entropy));
        s.push_str(&format!("mean_kl\t{}\n", self.mean_kl));
        s.push_str(&format!("mean_reconstruction\t{}\n", self.mean_reconstruction));
        for kind in ModalityKind::ALL {
            s.push_str(&format!(
                "alpha_{}\t{}\n",
                kind.as_str(),
                self.alpha[kind.index()]
            ));
        }
        s
    }
}

pub fn evaluate(
    sequences: &[(String, Vec<Interaction>)],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if sequences.is_empty() {
        return Err(Error::invalid("empty evaluation dataset"));
    }
    let mut n = 0usize;
    let mut score_se = 0.0;
    let mut correct = 0usize;
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut recon = 0.0;
    let mut alpha = [0.0; 4];
    for (_, seq) in sequences {
        let ex = example_from_sequence(seq, cfg)?;
        let (out, detail) = infer(params, cfg, &ex.prefix, &ex.candidate)?;
        let err = out.score - ex.candidate.score_label;
        score_se += err * err;
        if out.predicted_class() == ex.candidate.class_label {
            correct += 1;
        }
        ce += class_cross_entropy(&out.class_probs, ex.candidate.class_label)?;
        kl += kl_diag_gaussian(&detail.mu, &detail.sigma)?;
        recon += out
            .content
            .iter()
            .zip(&ex.candidate.features)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        for i in 0..4 {
            alpha[i] += detail.alpha[i];
        }
        n += 1;
    }
    let nf = n as f64;
    Ok(EvalReport {
        examples: n,
        score_mse: score_se / nf,
        class_accuracy: correct as f64 / nf,
        class_cross_entropy: ce / nf,
        mean_kl: kl / nf,
        mean_reconstruction: recon / nf,
        alpha: alpha.map(|a| a / nf),
    })
}

/// The ablation contrast: identical pipeline with the temporal layer
/// replaced by order-invariant mean pooling.
pub fn static_baseline(
    prefix: &[Interaction],
    candidate: &CandidateItem,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<GeneratedOutput> {
    let mut baseline_cfg = cfg.clone();
    baseline_cfg.baseline = BaselineKind::Static;
    Ok(infer(params, &baseline_cfg, prefix, candidate)?.0)
}

/// One per-step class prediction, aligned with ground truth by (user, step).
#[derive(Clone, Debug)]
pub struct StepPrediction {
    pub user_id: String,
    pub step: usize,
    pub predicted_class: usize,
    pub alpha: [f64; 4],
}

/// Predict the class of every step t >= 2 from its prefix (eps = 0).
pub fn predict_per_step(
    sequences: &[(String, Vec<Interaction>)],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<Vec<StepPrediction>> {
    let mut out = Vec::new();
    for (user, seq) in sequences {
        for ex in examples_per_step(seq, cfg)? {
            let (output, detail) = infer(params, cfg, &ex.prefix, &ex.candidate)?;
            out.push(StepPrediction {
                user_id: user.clone(),
                step: ex.step,
                predicted_class: output.predicted_class(),
                alpha: detail.alpha,
            });
        }
    }
    Ok(out)
}

/// 80/10/10 split by user, seeded.
pub struct Split {
    pub train: Vec<(String, Vec<Interaction>)>,
    pub validation: Vec<(String, Vec<Interaction>)>,
    pub test: Vec<(String, Vec<Interaction>)>,
}

pub fn split_sequences(mut sequences: Vec<(String, Vec<Interaction>)>, seed: u64) -> Split {
    let mut rng = Rng::new(seed).derive(0x73706c69); // split stream
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    shuffle(&mut order, &mut rng);
    let n = sequences.len();
    let n_val = n / 10;
    let n_test = n / 10;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    // drain in shuffled order without cloning sequences
    let mut slots: Vec<Option<(String, Vec<Interaction>)>> =
        sequences.drain(..).map(Some).collect();
    for (pos, &idx) in order.iter().enumerate() {
        let item = slots[idx].take().expect("each index visited once");
        if pos < n_val {
            validation.push(item);
        } else if pos < n_val + n_test {
            test.push(item);
        } else {
            train.push(item);
        }
    }
    Split {
        train,
        validation,
        test,
    }
}
