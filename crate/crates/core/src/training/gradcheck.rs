//! End-to-end gradient verification: the analytic gradient of the joint
//! loss for every trainable tensor against central finite differences.

use crate::config::TrainConfig;
use crate::encoding::{ActionType, Context, Device, Interaction, Platform};
use crate::error::Result;
use crate::model::{example_from_sequence, ModelNodes, ModelParams, TrainExample};
use crate::numerics::{gradient_relative_error, Matrix, Rng, Tape};
use crate::training::example_loss_tape;

/// Worst relative error observed in one tensor group.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
}

/// The tiny reference configuration: d_model 8, prefix length 4, K 3,
/// two modalities present, one layer, one head, d_latent 4.
pub fn reference_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.encoder.d_action = 3;
    cfg.encoder.d_dev = 2;
    cfg.encoder.d_plat = 2;
    cfg.encoder.d_geo = 2;
    cfg.encoder.geo_vocab = 8;
    cfg.encoder.d_abs = 4;
    cfg.encoder.d_gap = 3;
    cfg.encoder.gap_buckets = 8;
    cfg.encoder.d_text = 4;
    cfg.encoder.d_img = 4;
    cfg.encoder.d_video = 4;
    cfg.encoder.d_audio = 4;
    cfg.encoder.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_ff = 16;
    cfg.d_latent = 4;
    cfg.d_hidden = 8;
    cfg.classes = 3;
    cfg.t_max = 8;
    cfg
}

/// A deterministic random example with two present modalities (text and
/// audio) and a prefix of length 4.
fn reference_example(cfg: &TrainConfig, rng: &mut Rng) -> Result<TrainExample> {
    let mut seq = Vec::new();
    let mut ts = 1_000;
    for i in 0..5 {
        let emb = |rng: &mut Rng, d: usize| -> Option<Vec<f64>> {
            Some((0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
        };
        let text = emb(rng, cfg.encoder.d_text);
        let audio = emb(rng, cfg.encoder.d_audio);
        seq.push(Interaction {
            user_id: "gradcheck".into(),
            item_id: format!("item-{i}"),
            action: ActionType::ALL[rng.next_index(5)],
            context: Context {
                device: Device::ALL[rng.next_index(3)],
                platform: Platform::ALL[rng.next_index(4)],
                geo: rng.next_index(cfg.encoder.geo_vocab),
            },
            timestamp: ts,
            modality_embeddings: [text, None, None, audio],
            score_label: rng.uniform_range(0.0, 4.0),
            class_label: rng.next_index(cfg.classes),
        });
        ts += 1 + rng.next_index(200_000) as i64;
    }
    example_from_sequence(&seq, cfg)
}

/// Run the end-to-end check for one seed. Every parameter entry is
/// perturbed by +-h; the loss keeps eps fixed so it is deterministic.
pub fn end_to_end_gradcheck(seed: u64, h: f64) -> Result<Vec<GroupReport>> {
    let cfg = reference_config();
    let mut rng = Rng::new(seed);
    let params = ModelParams::init(&cfg, &mut rng)?;
    let example = reference_example(&cfg, &mut rng)?;
    let eps: Vec<Vec<f64>> = (0..cfg.vae_samples)
        .map(|_| (0..cfg.d_latent).map(|_| rng.next_normal()).collect())
        .collect();

    let loss_value = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = ModelNodes::register(p, &mut tape);
        let (loss, _) = example_loss_tape(&mut tape, &nodes, &cfg, &example, &eps)?;
        Ok(tape.value(loss.total).item())
    };

    let mut tape = Tape::new();
    let nodes = ModelNodes::register(&params, &mut tape);
    let (loss, _) = example_loss_tape(&mut tape, &nodes, &cfg, &example, &eps)?;
    let grads = tape.backward(loss.total);
    let analytic: Vec<Matrix> = nodes.ids().iter().map(|&id| grads.get(id).clone()).collect();

    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut probe = params.clone();
    let mut reports = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut max_rel = 0.0_f64;
        for k in 0..len {
            let orig = {
                let mut tensors = probe.tensors_mut();
                let slot = &mut tensors[ti].1.as_mut_slice()[k];
                let orig = *slot;
                *slot = orig + h;
                orig
            };
            let up = loss_value(&probe)?;
            {
                let mut tensors = probe.tensors_mut();
                tensors[ti].1.as_mut_slice()[k] = orig - h;
            }
            let down = loss_value(&probe)?;
            {
                let mut tensors = probe.tensors_mut();
                tensors[ti].1.as_mut_slice()[k] = orig;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].as_slice()[k];
            max_rel = max_rel.max(gradient_relative_error(a, numeric));
        }
        reports.push(GroupReport {
            name: name.clone(),
            max_rel_err: max_rel,
        });
    }
    Ok(reports)
}
