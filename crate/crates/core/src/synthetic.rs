//! Synthetic interaction datasets with regime-switching interest drift,
//! class-conditioned item embeddings and day/week timestamp structure,
//! plus the ground-truth files that make drift recovery measurable.

use std::collections::HashMap;
use std::path::Path;

use crate::config::ConfigFile;
use crate::encoding::{day_of_week, ActionType, Context, Device, Interaction, Platform};
use crate::error::{Error, Result};
use crate::labels::{ecommerce_score, video_score, EngagementSignals, LabelWeights};
use crate::numerics::Rng;
use crate::providers::{unit_normalize, EmbeddingProvider, MockProvider, ModalityDims, ModalityKind};
use crate::training::StepPrediction;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelFormula {
    Ecommerce,
    Video,
}

/// Controls for one synthetic dataset.
#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub n_users: usize,
    /// Per-user sequence length range (inclusive).
    pub t_min: usize,
    pub t_max: usize,
    /// Number of latent interest classes K.
    pub classes: usize,
    /// Regime-switch probability per step. A switch always moves to a
    /// different class, so rho = 1 changes class every step.
    pub rho: f64,
    /// Gaussian noise added to score labels.
    pub label_noise: f64,
    pub items_per_class: usize,
    /// Class-signal weight in an item's preferred modality, in [0, 1].
    pub signal_strength: f64,
    /// Fraction of the class signal carried by non-preferred modalities;
    /// 0 makes each class separable only through its preferred modality.
    pub off_modality_signal: f64,
    /// Per-(item, non-preferred modality) drop probability.
    pub modality_dropout: f64,
    /// Probability that a step's device/platform follow the regime class's
    /// habitual pattern instead of the uniform background. Regime switches
    /// then show up in context features, not only in item embeddings.
    pub context_class_affinity: f64,
    pub geo_vocab: usize,
    pub dims: ModalityDims,
    pub label_formula: LabelFormula,
    pub label_weights: LabelWeights,
    pub seed: u64,
    pub start_time: i64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            t_min: 32,
            t_max: 32,
            classes: 4,
            rho: 0.1,
            label_noise: 0.3,
            items_per_class: 40,
            signal_strength: 0.75,
            off_modality_signal: 0.25,
            modality_dropout: 0.0,
            context_class_affinity: 0.0,
            geo_vocab: 16,
            dims: ModalityDims {
                text: 16,
                img: 16,
                video: 16,
                audio: 16,
            },
            label_formula: LabelFormula::Ecommerce,
            label_weights: LabelWeights::default(),
            seed: 42,
            start_time: 1_700_000_000,
        }
    }
}

impl ScenarioSpec {
    pub fn from_config(mut file: ConfigFile) -> Result<Self> {
        let d = ScenarioSpec::default();
        let formula = match file
            .take_raw("label_formula")
            .unwrap_or_else(|| "ecommerce".into())
            .as_str()
        {
            "ecommerce" => LabelFormula::Ecommerce,
            "video" => LabelFormula::Video,
            other => {
                return Err(Error::validation(format!(
                    "label_formula must be 'ecommerce' or 'video', got '{other}'"
                )))
            }
        };
        let spec = Self {
            n_users: file.take("n_users", d.n_users)?,
            t_min: file.take("t_min", d.t_min)?,
            t_max: file.take("t_max", d.t_max)?,
            classes: file.take("classes", d.classes)?,
            rho: file.take("rho", d.rho)?,
            label_noise: file.take("label_noise", d.label_noise)?,
            items_per_class: file.take("items_per_class", d.items_per_class)?,
            signal_strength: file.take("signal_strength", d.signal_strength)?,
            off_modality_signal: file.take("off_modality_signal", d.off_modality_signal)?,
            modality_dropout: file.take("modality_dropout", d.modality_dropout)?,
            context_class_affinity: file.take("context_class_affinity", d.context_class_affinity)?,
            geo_vocab: file.take("geo_vocab", d.geo_vocab)?,
            dims: ModalityDims {
                text: file.take("d_text", d.dims.text)?,
                img: file.take("d_img", d.dims.img)?,
                video: file.take("d_video", d.dims.video)?,
                audio: file.take("d_audio", d.dims.audio)?,
            },
            label_formula: formula,
            label_weights: LabelWeights {
                ecommerce: [
                    file.take("label_w_click", d.label_weights.ecommerce[0])?,
                    file.take("label_w_cart", d.label_weights.ecommerce[1])?,
                    file.take("label_w_purchase", d.label_weights.ecommerce[2])?,
                    file.take("label_w_comment", d.label_weights.ecommerce[3])?,
                ],
                video: [
                    file.take("label_v_ratio", d.label_weights.video[0])?,
                    file.take("label_v_like", d.label_weights.video[1])?,
                    file.take("label_v_comment", d.label_weights.video[2])?,
                    file.take("label_v_share", d.label_weights.video[3])?,
                ],
            },
            seed: file.take("seed", d.seed)?,
            start_time: file.take("start_time", d.start_time)?,
        };
        file.ensure_empty()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_config(ConfigFile::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::validation(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.classes < 2 {
            return Err(Error::validation("classes must be >= 2"));
        }
        if self.t_min < 2 || self.t_max < self.t_min {
            return Err(Error::validation(format!(
                "sequence length range [{}, {}] invalid (t_min >= 2 required)",
                self.t_min, self.t_max
            )));
        }
        if self.n_users == 0 || self.items_per_class == 0 || self.geo_vocab == 0 {
            return Err(Error::validation(
                "n_users, items_per_class and geo_vocab must be >= 1",
            ));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("off_modality_signal", self.off_modality_signal),
            ("modality_dropout", self.modality_dropout),
            ("context_class_affinity", self.context_class_affinity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.label_noise < 0.0 {
            return Err(Error::validation("label_noise must be >= 0"));
        }
        self.label_weights.validate()
    }

    /// Each class's preferred modality, round robin over the four kinds.
    pub fn salient_modality(&self, class: usize) -> ModalityKind {
        ModalityKind::ALL[class % 4]
    }
}

/// True latent state per (user, one-based step).
#[derive(Clone, Debug, PartialEq)]
pub struct TruthEntry {
    pub user_id: String,
    pub step: usize,
    pub class: usize,
    pub intensity: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub entries: Vec<TruthEntry>,
    index: HashMap<(String, usize), usize>,
}

impl GroundTruth {
    pub fn push(&mut self, entry: TruthEntry) {
        self.index
            .insert((entry.user_id.clone(), entry.step), self.entries.len());
        self.entries.push(entry);
    }

    pub fn lookup(&self, user_id: &str, step: usize) -> Option<&TruthEntry> {
        self.index
            .get(&(user_id.to_string(), step))
            .map(|&i| &self.entries[i])
    }

    /// Line-delimited `user_id<TAB>step<TAB>true_class<TAB>true_intensity`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.user_id, e.step, e.class, e.intensity
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut truth = GroundTruth::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let step: usize = fields[1].parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad step '{}'", fields[1]),
            })?;
            let class: usize = fields[2].parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad class '{}'", fields[2]),
            })?;
            let intensity: f64 = fields[3].parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad intensity '{}'", fields[3]),
            })?;
            truth.push(TruthEntry {
                user_id: fields[0].to_string(),
                step,
                class,
                intensity,
            });
        }
        Ok(truth)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Class centroid for one modality: a fixed unit vector per (class, kind).
fn class_centroid(spec: &ScenarioSpec, class: usize, kind: ModalityKind) -> Vec<f64> {
    let stream = 0xC147 ^ ((class as u64) << 8) ^ kind.index() as u64;
    let mut rng = Rng::new(spec.seed).derive(stream);
    let mut v: Vec<f64> = (0..spec.dims.get(kind)).map(|_| rng.next_normal()).collect();
    unit_normalize(&mut v);
    v
}

/// Item embedding: the mock-provider vector pulled toward the class
/// centroid, strongly in the preferred modality and by
/// `off_modality_signal` elsewhere.
fn item_embedding(
    spec: &ScenarioSpec,
    mock: &MockProvider,
    item_id: &str,
    class: usize,
    kind: ModalityKind,
) -> Vec<f64> {
    let noise = mock
        .embedding(item_id, kind)
        .expect("mock provider is total");
    let mut w = spec.signal_strength;
    if kind != spec.salient_modality(class) {
        w *= spec.off_modality_signal;
    }
    let centroid = class_centroid(spec, class, kind);
    let mut v: Vec<f64> = centroid
        .iter()
        .zip(&noise)
        .map(|(c, n)| w * c + (1.0 - w) * n)
        .collect();
    unit_normalize(&mut v);
    v
}

fn item_modalities(
    spec: &ScenarioSpec,
    mock: &MockProvider,
    item_id: &str,
    class: usize,
) -> [Option<Vec<f64>>; 4] {
    let salient = spec.salient_modality(class);
    ModalityKind::ALL.map(|kind| {
        if kind != salient && spec.modality_dropout > 0.0 {
            let mut rng = Rng::new(spec.seed).derive(
                0xD807 ^ crate::providers::hash_str(0, item_id) ^ ((kind.index() as u64) << 32),
            );
            if rng.next_f64() < spec.modality_dropout {
                return None;
            }
        }
        Some(item_embedding(spec, mock, item_id, class, kind))
    })
}

struct RegimeState {
    class: usize,
    intensity: f64,
}

fn switch_regime(spec: &ScenarioSpec, rng: &mut Rng, current: Option<&RegimeState>) -> RegimeState {
    let class = match current {
        None => rng.next_index(spec.classes),
        Some(state) => {
            // always move to a different class so a switch is observable
            let offset = 1 + rng.next_index(spec.classes - 1);
            (state.class + offset) % spec.classes
        }
    };
    RegimeState {
        class,
        intensity: rng.uniform_range(0.55, 0.95),
    }
}

fn engagement(spec: &ScenarioSpec, rng: &mut Rng, intensity: f64) -> EngagementSignals {
    let video_length = rng.uniform_range(30.0, 600.0);
    let completion = (intensity + 0.25 * rng.next_normal()).clamp(0.0, 1.0);
    EngagementSignals {
        clicked: rng.next_bool(0.95),
        carted: rng.next_bool(0.60 * intensity),
        purchased: rng.next_bool(0.45 * intensity),
        commented: rng.next_bool(0.35 * intensity),
        liked: rng.next_bool(0.50 * intensity),
        shared: rng.next_bool(0.20 * intensity),
        watch_time: completion * video_length,
        video_length,
    }
    .clamp_watch(spec)
}

impl EngagementSignals {
    fn clamp_watch(mut self, _spec: &ScenarioSpec) -> Self {
        self.watch_time = self.watch_time.min(self.video_length);
        self
    }
}

fn action_from(signals: &EngagementSignals) -> ActionType {
    if signals.purchased {
        ActionType::Purchase
    } else if signals.commented {
        ActionType::Comment
    } else if signals.liked {
        ActionType::Like
    } else if signals.clicked {
        ActionType::Click
    } else {
        ActionType::View
    }
}

/// Saturday and Sunday under the epoch-Thursday day-of-week anchor.
fn is_weekend(timestamp: i64) -> bool {
    matches!(day_of_week(timestamp), 0 | 6)
}

/// Generate per-user sequences plus the ground truth. Deterministic in the
/// spec's seed. Asserts at generation time that regime switches shift the
/// score-label means (for rho > 0 with enough observable switches).
pub fn generate(spec: &ScenarioSpec) -> Result<(Vec<(String, Vec<Interaction>)>, GroundTruth)> {
    spec.validate()?;
    let mock = MockProvider::new(spec.seed ^ 0x11EE, spec.dims);
    let root = Rng::new(spec.seed);
    let mut sequences = Vec::with_capacity(spec.n_users);
    let mut truth = GroundTruth::default();
    // (pre-switch segment scores, post-switch segment scores)
    let mut switch_pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut all_scores: Vec<f64> = Vec::new();

    for u in 0..spec.n_users {
        let user_id = format!("u{u:04}");
        let mut rng = root.derive(1 + u as u64);
        let t_len = spec.t_min + rng.next_index(spec.t_max - spec.t_min + 1);
        let mut regime = switch_regime(spec, &mut rng, None);
        let mut ts = spec.start_time + rng.next_index(7 * 86_400) as i64;
        let mut seq = Vec::with_capacity(t_len);
        let mut segments: Vec<Vec<f64>> = vec![Vec::new()];
        for step in 1..=t_len {
            if step > 1 && rng.next_bool(spec.rho) {
                regime = switch_regime(spec, &mut rng, Some(&regime));
                segments.push(Vec::new());
            }
            let item_idx = rng.next_index(spec.items_per_class);
            let item_id = format!("item-c{}-n{:03}", regime.class, item_idx);
            let signals = engagement(spec, &mut rng, regime.intensity);
            let base_score = match spec.label_formula {
                LabelFormula::Ecommerce => ecommerce_score(&signals, &spec.label_weights),
                LabelFormula::Video => video_score(&signals, &spec.label_weights)?,
            };
            let score = base_score + spec.label_noise * rng.next_normal();
            segments.last_mut().expect("nonempty").push(score);
            all_scores.push(score);

            let device = if rng.next_bool(spec.context_class_affinity) {
                Device::ALL[regime.class % 3]
            } else {
                Device::ALL[rng.next_index(3)]
            };
            let platform = if rng.next_bool(spec.context_class_affinity) {
                Platform::ALL[regime.class % 4]
            } else {
                Platform::ALL[rng.next_index(4)]
            };
            seq.push(Interaction {
                user_id: user_id.clone(),
                item_id: item_id.clone(),
                action: action_from(&signals),
                context: Context {
                    device,
                    platform,
                    geo: rng.next_index(spec.geo_vocab),
                },
                timestamp: ts,
                modality_embeddings: item_modalities(spec, &mock, &item_id, regime.class),
                score_label: score,
                class_label: regime.class,
            });
            truth.push(TruthEntry {
                user_id: user_id.clone(),
                step,
                class: regime.class,
                intensity: regime.intensity,
            });

            // log-normal inter-arrival (median ~6h), doubled activity on weekends
            let mut gap = (21_600.0_f64.ln() + 1.25 * rng.next_normal()).exp();
            if is_weekend(ts) {
                gap /= 2.0;
            }
            ts += (gap as i64).max(1);
        }
        for pair in segments.windows(2) {
            if pair[0].len() >= 2 && pair[1].len() >= 2 {
                switch_pairs.push((pair[0].clone(), pair[1].clone()));
            }
        }
        sequences.push((user_id, seq));
    }

    if spec.rho > 0.0 && switch_pairs.len() >= 5 {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mean_abs_diff = switch_pairs
            .iter()
            .map(|(pre, post)| (mean(pre) - mean(post)).abs())
            .sum::<f64>()
            / switch_pairs.len() as f64;
        let scale = 1.0_f64.max(all_scores.iter().map(|s| s.abs()).sum::<f64>() / all_scores.len() as f64);
        if mean_abs_diff <= 0.02 * scale {
            return Err(Error::validation(format!(
                "regime switches do not shift score means: mean |delta| {mean_abs_diff} vs scale {scale}"
            )));
        }
    }

    Ok((sequences, truth))
}

/// Fraction of predictions matching the true class at the same (user, step).
pub fn drift_recovery_score(
    predictions: &[StepPrediction],
    truth: &GroundTruth,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::validation("empty evaluation set"));
    }
    let mut hits = 0usize;
    for p in predictions {
        let entry = truth.lookup(&p.user_id, p.step).ok_or_else(|| {
            Error::validation(format!(
                "no ground truth for user '{}' step {}",
                p.user_id, p.step
            ))
        })?;
        if entry.class == p.predicted_class {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}
