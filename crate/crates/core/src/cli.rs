//! Command implementations behind the `timgen` binary: data generation,
//! training, evaluation, gradient checking and single-shot generation.
//!
//! Exit codes are a stable contract: 0 ok, 1 check failure, 2 validation
//! or load error, 3 numerical abort.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{resolve_seed, BaselineKind, TrainConfig};
use crate::dataset::{find_item, item_catalog, read_dataset, write_dataset};
use crate::encoding::{EncoderConfig, Interaction};
use crate::error::{Error, Result};
use crate::generation::CandidateItem;
use crate::model::{example_from_sequence, infer, infer_sampled, ModelParams};
use crate::numerics::Rng;
use crate::providers::ModalityKind;
use crate::synthetic::{drift_recovery_score, generate, GroundTruth, ScenarioSpec};
use crate::training::checkpoint::{load_checkpoint, save_checkpoint};
use crate::training::gradcheck::end_to_end_gradcheck;
use crate::training::{evaluate, predict_per_step, split_sequences, train, StepPrediction};

#[derive(Parser, Debug)]
#[command(name = "timgen", version, about = "Temporal interest modeling with multimodal fusion and VAE generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset plus its ground-truth file.
    GenData {
        /// Scenario spec file (flat key = value).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for dataset.tsv and truth.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec file seed (falls back to TIMGEN_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// `static` replaces the temporal layer with mean pooling.
        #[arg(long)]
        baseline: Option<BaselineKind>,
    },
    /// Print a metrics report for a dataset under a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Ground-truth file; adds drift recovery and per-class alphas.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Which seeded user split of the data file to evaluate.
        #[arg(long, default_value = "all")]
        split: String,
        /// Write the per-user per-step fusion-weight table here.
        #[arg(long)]
        alpha_dump: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Generate a score / class distribution / content embedding for one
    /// user history against a candidate item.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset-format file holding a single user's records.
        #[arg(long)]
        history: PathBuf,
        /// Candidate item id; must appear in the history file.
        #[arg(long)]
        candidate: String,
        /// Draw the latent noise instead of using eps = 0.
        #[arg(long)]
        sample: bool,
        /// Seed for --sample (falls back to TIMGEN_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { spec, out, seed } => cmd_gen_data(&spec, &out, seed),
        Command::Train {
            data,
            config,
            out,
            baseline,
        } => cmd_train(&data, config.as_deref(), &out, baseline),
        Command::Eval {
            data,
            ckpt,
            truth,
            split,
            alpha_dump,
        } => cmd_eval(&data, &ckpt, truth.as_deref(), &split, alpha_dump.as_deref()),
        Command::Gradcheck {
            seed,
            tolerance,
            seeds,
        } => cmd_gradcheck(seed, tolerance, seeds),
        Command::Generate {
            ckpt,
            history,
            candidate,
            sample,
            seed,
        } => cmd_generate(&ckpt, &history, &candidate, sample, seed),
    }
}

fn cmd_gen_data(spec_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<i32> {
    let mut spec = ScenarioSpec::from_file(spec_path)?;
    spec.seed = resolve_seed(seed, Some(spec.seed), spec.seed);
    let (sequences, truth) = generate(&spec)?;
    std::fs::create_dir_all(out_dir)?;
    write_dataset(&out_dir.join("dataset.tsv"), &sequences)?;
    truth.save(&out_dir.join("truth.tsv"))?;

    let n_interactions: usize = sequences.iter().map(|(_, s)| s.len()).sum();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, seq) in &sequences {
        for x in seq {
            *histogram.entry(x.class_label).or_insert(0) += 1;
        }
    }
    println!("users\t{}", sequences.len());
    println!("interactions\t{n_interactions}");
    for (class, count) in histogram {
        println!("class_{class}\t{count}");
    }
    Ok(0)
}

fn print_config(cfg: &TrainConfig) {
    println!("# effective config");
    for line in cfg.snapshot().lines() {
        println!("{line}");
    }
    println!("# end config");
}

/// Order-invariance self-test for the static baseline on real data.
fn baseline_self_test(
    params: &ModelParams,
    cfg: &TrainConfig,
    sequences: &[(String, Vec<Interaction>)],
) -> Result<()> {
    let ex = sequences
        .iter()
        .find_map(|(_, seq)| example_from_sequence(seq, cfg).ok().filter(|e| e.prefix.len() >= 2))
        .ok_or_else(|| Error::validation("no sequence long enough for the baseline self-test"))?;
    let mut permuted = ex.prefix.clone();
    let ts: Vec<i64> = permuted.iter().map(|x| x.timestamp).collect();
    permuted.reverse();
    for (x, t) in permuted.iter_mut().zip(&ts) {
        x.timestamp = *t;
    }
    let (_, a) = infer(params, cfg, &ex.prefix, &ex.candidate)?;
    let (_, b) = infer(params, cfg, &permuted, &ex.candidate)?;
    for (x, y) in a.z_t.iter().zip(&b.z_t) {
        if (x - y).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "baseline state changed under permutation: {x} vs {y}"
            )));
        }
    }
    println!("baseline self-test\tok");
    Ok(())
}

fn cmd_train(
    data_path: &Path,
    config_path: Option<&Path>,
    out_path: &Path,
    baseline: Option<BaselineKind>,
) -> Result<i32> {
    let mut cfg = match config_path {
        Some(p) => TrainConfig::from_file(p)?,
        None => {
            let d = TrainConfig::default();
            TrainConfig {
                seed: resolve_seed(None, None, d.seed),
                ..d
            }
        }
    };
    if let Some(b) = baseline {
        cfg.baseline = b;
    }
    print_config(&cfg);

    let sequences = read_dataset(data_path)?;
    let split = split_sequences(sequences, cfg.seed);
    println!(
        "split\ttrain {} validation {} test {}",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    let mut params = ModelParams::init(&cfg, &mut Rng::new(cfg.seed))?;
    if cfg.baseline == BaselineKind::Static {
        baseline_self_test(&params, &cfg, &split.train)?;
    }
    train(&split.train, &mut params, &cfg, |log| {
        println!(
            "epoch {}\ttotal {}\tvae {}\tscore {}\tclass {}",
            log.epoch, log.loss.total, log.loss.vae, log.loss.score, log.loss.class
        );
    })?;
    save_checkpoint(&params, &cfg, out_path)?;
    println!("checkpoint\t{}", out_path.display());
    Ok(0)
}

fn select_split(
    sequences: Vec<(String, Vec<Interaction>)>,
    which: &str,
    seed: u64,
) -> Result<Vec<(String, Vec<Interaction>)>> {
    match which {
        "all" => Ok(sequences),
        "train" => Ok(split_sequences(sequences, seed).train),
        "validation" => Ok(split_sequences(sequences, seed).validation),
        "test" => Ok(split_sequences(sequences, seed).test),
        other => Err(Error::validation(format!(
            "split must be all|train|validation|test, got '{other}'"
        ))),
    }
}

fn cmd_eval(
    data_path: &Path,
    ckpt_path: &Path,
    truth_path: Option<&Path>,
    split: &str,
    alpha_dump: Option<&Path>,
) -> Result<i32> {
    let (params, cfg) = load_checkpoint(ckpt_path)?;
    let sequences = select_split(read_dataset(data_path)?, split, cfg.seed)?;
    if sequences.is_empty() {
        return Err(Error::validation(format!("split '{split}' selected no users")));
    }
    let report = evaluate(&sequences, &params, &cfg)?;
    print!("{}", report.to_text());

    if truth_path.is_some() || alpha_dump.is_some() {
        let predictions = predict_per_step(&sequences, &params, &cfg)?;
        if let Some(path) = alpha_dump {
            let mut text = String::new();
            for p in &predictions {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    p.user_id, p.step, p.alpha[0], p.alpha[1], p.alpha[2], p.alpha[3]
                ));
            }
            std::fs::write(path, text)?;
        }
        if let Some(path) = truth_path {
            let truth = GroundTruth::load(path)?;
            let recovery = drift_recovery_score(&predictions, &truth)?;
            println!("drift_recovery\t{recovery}");
            print_per_class_alphas(&predictions, &truth, cfg.classes)?;
        }
    }
    Ok(0)
}

/// Mean fusion weight per modality over the evaluation steps of each true
/// class.
fn print_per_class_alphas(
    predictions: &[StepPrediction],
    truth: &GroundTruth,
    classes: usize,
) -> Result<()> {
    let mut sums = vec![[0.0f64; 4]; classes];
    let mut counts = vec![0usize; classes];
    for p in predictions {
        let entry = truth.lookup(&p.user_id, p.step).ok_or_else(|| {
            Error::validation(format!(
                "no ground truth for user '{}' step {}",
                p.user_id, p.step
            ))
        })?;
        for i in 0..4 {
            sums[entry.class][i] += p.alpha[i];
        }
        counts[entry.class] += 1;
    }
    for c in 0..classes {
        for kind in ModalityKind::ALL {
            let mean = if counts[c] == 0 {
                0.0
            } else {
                sums[c][kind.index()] / counts[c] as f64
            };
            println!("alpha_class{c}_{}\t{mean}", kind.as_str());
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>, tolerance: f64, seeds: u64) -> Result<i32> {
    let start = Instant::now();
    let base = resolve_seed(seed, None, 1);
    let mut all_ok = true;
    let mut offenders: Vec<(u64, String, f64)> = Vec::new();
    for s in base..base + seeds.max(1) {
        let reports = end_to_end_gradcheck(s, 1e-5)?;
        let worst = reports
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("at least one parameter group");
        println!("seed {s}\tworst_group {}\tmax_rel_err {}", worst.name, worst.max_rel_err);
        for r in &reports {
            println!("group {}\tmax_rel_err {}", r.name, r.max_rel_err);
            if r.max_rel_err >= tolerance {
                all_ok = false;
                offenders.push((s, r.name.clone(), r.max_rel_err));
            }
        }
    }
    println!("elapsed_seconds\t{}", start.elapsed().as_secs_f64());
    if all_ok {
        println!("gradcheck\tpass");
        Ok(0)
    } else {
        offenders.sort_by(|a, b| b.2.total_cmp(&a.2));
        for (s, name, err) in offenders.iter().take(10) {
            eprintln!("tolerance violation: seed {s} group {name} max_rel_err {err}");
        }
        println!("gradcheck\tfail");
        Ok(1)
    }
}

fn features_from_embeddings(
    embeddings: &[Option<Vec<f64>>; 4],
    enc: &EncoderConfig,
) -> Result<Vec<f64>> {
    let mut features = Vec::with_capacity(enc.candidate_dim());
    for kind in ModalityKind::ALL {
        let want = enc.modality_dim(kind);
        match &embeddings[kind.index()] {
            Some(v) if v.len() == want => features.extend_from_slice(v),
            Some(v) => {
                return Err(Error::validation(format!(
                    "{} embedding has dimension {}, expected {want}",
                    kind.as_str(),
                    v.len()
                )))
            }
            None => features.extend(std::iter::repeat(0.0).take(want)),
        }
    }
    Ok(features)
}

fn cmd_generate(
    ckpt_path: &Path,
    history_path: &Path,
    candidate_id: &str,
    sample: bool,
    seed: Option<u64>,
) -> Result<i32> {
    let (params, cfg) = load_checkpoint(ckpt_path)?;
    let sequences = read_dataset(history_path)?;
    if sequences.len() != 1 {
        return Err(Error::validation(format!(
            "history file must hold a single user's records, found {} users",
            sequences.len()
        )));
    }
    let embeddings = find_item(&sequences, candidate_id)
        .ok_or_else(|| Error::validation(format!("unknown candidate '{candidate_id}'")))?;
    let candidate = CandidateItem {
        item_id: candidate_id.to_string(),
        features: features_from_embeddings(&embeddings, &cfg.encoder)?,
        score_label: 0.0,
        class_label: 0,
    };
    let history = &sequences[0].1;

    let (output, detail) = if sample {
        let mut rng = Rng::new(resolve_seed(seed, None, cfg.seed)).derive(0x67656e);
        infer_sampled(&params, &cfg, history, &candidate, &mut rng)?
    } else {
        infer(&params, &cfg, history, &candidate)?
    };

    println!("score\t{}", output.score);
    let probs: Vec<String> = output.class_probs.iter().map(|p| p.to_string()).collect();
    println!("class_probs\t{}", probs.join(","));
    println!("predicted_class\t{}", output.predicted_class());

    // nearest candidate item to the generated content embedding
    let mut best: Option<(f64, String)> = None;
    for (item_id, emb) in item_catalog(&sequences) {
        let features = features_from_embeddings(&emb, &cfg.encoder)?;
        let dist: f64 = features
            .iter()
            .zip(&output.content)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, item_id));
        }
    }
    let (_, nearest) = best.expect("history is nonempty");
    println!("nearest_item\t{nearest}");
    for kind in ModalityKind::ALL {
        println!("alpha_{}\t{}", kind.as_str(), detail.alpha[kind.index()]);
    }
    Ok(0)
}
