//! Per-interaction feature encoding: action/context embeddings, the three
//! time features (absolute, gap, weekly cycle) and the modality block,
//! concatenated into one row per interaction.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, Rng, Tape};
use crate::providers::ModalityKind;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// The five interaction categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionType {
    Click,
    View,
    Purchase,
    Like,
    Comment,
}

impl ActionType {
    pub const ALL: [ActionType; 5] = [
        ActionType::Click,
        ActionType::View,
        ActionType::Purchase,
        ActionType::Like,
        ActionType::Comment,
    ];

    pub fn index(self) -> usize {
        match self {
            ActionType::Click => 0,
            ActionType::View => 1,
            ActionType::Purchase => 2,
            ActionType::Like => 3,
            ActionType::Comment => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::Click => "click",
            ActionType::View => "view",
            ActionType::Purchase => "purchase",
            ActionType::Like => "like",
            ActionType::Comment => "comment",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown action '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Device {
    Pc,
    Mobile,
    Tablet,
}

impl Device {
    pub const ALL: [Device; 3] = [Device::Pc, Device::Mobile, Device::Tablet];

    pub fn index(self) -> usize {
        match self {
            Device::Pc => 0,
            Device::Mobile => 1,
            Device::Tablet => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Device::Pc => "pc",
            Device::Mobile => "mobile",
            Device::Tablet => "tablet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown device '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Platform {
    Web,
    Ios,
    Android,
    MiniApp,
}

impl Platform {
    pub const ALL: [Platform; 4] = [
        Platform::Web,
        Platform::Ios,
        Platform::Android,
        Platform::MiniApp,
    ];

    pub fn index(self) -> usize {
        match self {
            Platform::Web => 0,
            Platform::Ios => 1,
            Platform::Android => 2,
            Platform::MiniApp => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Web => "web",
            Platform::Ios => "ios",
            Platform::Android => "android",
            Platform::MiniApp => "miniapp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown platform '{s}'")))
    }
}

/// Interaction context: device, platform and a discrete geo id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Context {
    pub device: Device,
    pub platform: Platform,
    pub geo: usize,
}

/// One timestamped user-item event with optional per-modality embeddings
/// and its supervision labels.
#[derive(Clone, Debug)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub action: ActionType,
    pub context: Context,
    pub timestamp: i64,
    pub modality_embeddings: [Option<Vec<f64>>; 4],
    pub score_label: f64,
    pub class_label: usize,
}

impl Interaction {
    pub fn embedding(&self, kind: ModalityKind) -> Option<&[f64]> {
        self.modality_embeddings[kind.index()].as_deref()
    }

    pub fn presence(&self) -> [bool; 4] {
        [0, 1, 2, 3].map(|i| self.modality_embeddings[i].is_some())
    }

    /// Timestamp, modality dimensions and at-least-one-modality checks.
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.timestamp < 0 {
            return Err(Error::validation(format!(
                "negative timestamp {} for user {}",
                self.timestamp, self.user_id
            )));
        }
        let mut any = false;
        for kind in ModalityKind::ALL {
            if let Some(v) = self.embedding(kind) {
                any = true;
                let want = cfg.modality_dim(kind);
                if v.len() != want {
                    return Err(Error::validation(format!(
                        "{} embedding for item {} has dimension {}, expected {}",
                        kind.as_str(),
                        self.item_id,
                        v.len(),
                        want
                    )));
                }
            }
        }
        if !any {
            return Err(Error::validation(format!(
                "interaction on item {} has no modality embeddings",
                self.item_id
            )));
        }
        Ok(())
    }
}

/// Dimensions of every encoding block plus the unified model width.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_action: usize,
    pub d_dev: usize,
    pub d_plat: usize,
    pub d_geo: usize,
    /// Geo vocabulary size G; ids must be < G.
    pub geo_vocab: usize,
    /// Absolute-time sin/cos width, must be even.
    pub d_abs: usize,
    pub d_gap: usize,
    /// Number of log-gap buckets B.
    pub gap_buckets: usize,
    pub d_text: usize,
    pub d_img: usize,
    pub d_video: usize,
    pub d_audio: usize,
    /// Unified embedding width shared by the temporal and fusion layers.
    pub d_model: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_action: 8,
            d_dev: 4,
            d_plat: 4,
            d_geo: 8,
            geo_vocab: 64,
            d_abs: 8,
            d_gap: 8,
            gap_buckets: 32,
            d_text: 16,
            d_img: 16,
            d_video: 16,
            d_audio: 16,
            d_model: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_action,
            self.d_dev,
            self.d_plat,
            self.d_geo,
            self.geo_vocab,
            self.d_abs,
            self.d_gap,
            self.gap_buckets,
            self.d_text,
            self.d_img,
            self.d_video,
            self.d_audio,
            self.d_model,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation("all encoder dimensions must be >= 1"));
        }
        if self.d_abs % 2 != 0 {
            return Err(Error::validation(format!("d_abs = {} must be even", self.d_abs)));
        }
        Ok(())
    }

    pub fn modality_dim(&self, kind: ModalityKind) -> usize {
        match kind {
            ModalityKind::Text => self.d_text,
            ModalityKind::Image => self.d_img,
            ModalityKind::Video => self.d_video,
            ModalityKind::Audio => self.d_audio,
        }
    }

    /// d_text + d_img + d_video + d_audio, the candidate-feature width.
    pub fn candidate_dim(&self) -> usize {
        self.d_text + self.d_img + self.d_video + self.d_audio
    }

    /// Full encoded row width D.
    pub fn total_dim(&self) -> usize {
        self.d_action + self.d_dev + self.d_plat + self.d_geo + self.d_abs + self.d_gap + 2
            + self.candidate_dim()
    }

    /// Sinusoid frequencies, the standard geometric schedule base 10000.
    pub fn abs_frequencies(&self) -> Vec<f64> {
        (0..self.d_abs / 2)
            .map(|k| 10_000.0_f64.powf(-2.0 * k as f64 / self.d_abs as f64))
            .collect()
    }
}

/// Trainable embedding tables for actions, context fields and time gaps.
#[derive(Clone, Debug)]
pub struct EncodingParams {
    pub e_action: Matrix,
    pub e_dev: Matrix,
    pub e_plat: Matrix,
    pub e_geo: Matrix,
    pub e_gap: Matrix,
}

fn init_table(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

impl EncodingParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        Self {
            e_action: init_table(rng, 5, cfg.d_action),
            e_dev: init_table(rng, 3, cfg.d_dev),
            e_plat: init_table(rng, 4, cfg.d_plat),
            e_geo: init_table(rng, cfg.geo_vocab, cfg.d_geo),
            e_gap: init_table(rng, cfg.gap_buckets, cfg.d_gap),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("encoding.e_action".into(), &self.e_action),
            ("encoding.e_dev".into(), &self.e_dev),
            ("encoding.e_plat".into(), &self.e_plat),
            ("encoding.e_geo".into(), &self.e_geo),
            ("encoding.e_gap".into(), &self.e_gap),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("encoding.e_action".into(), &mut self.e_action),
            ("encoding.e_dev".into(), &mut self.e_dev),
            ("encoding.e_plat".into(), &mut self.e_plat),
            ("encoding.e_geo".into(), &mut self.e_geo),
            ("encoding.e_gap".into(), &mut self.e_gap),
        ]
    }
}

/// Tape handles for [`EncodingParams`], in the same field order.
#[derive(Clone, Copy, Debug)]
pub struct EncodingNodes {
    pub e_action: NodeId,
    pub e_dev: NodeId,
    pub e_plat: NodeId,
    pub e_geo: NodeId,
    pub e_gap: NodeId,
}

impl EncodingNodes {
    pub fn register(params: &EncodingParams, tape: &mut Tape) -> Self {
        Self {
            e_action: tape.input(params.e_action.clone()),
            e_dev: tape.input(params.e_dev.clone()),
            e_plat: tape.input(params.e_plat.clone()),
            e_geo: tape.input(params.e_geo.clone()),
            e_gap: tape.input(params.e_gap.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Elementary encoders
// ---------------------------------------------------------------------------

pub fn embed_action(action: ActionType, params: &EncodingParams) -> Vec<f64> {
    params.e_action.row(action.index()).to_vec()
}

pub fn encode_context(c: &Context, params: &EncodingParams, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    if c.geo >= cfg.geo_vocab {
        return Err(Error::OutOfVocabulary {
            id: c.geo,
            vocab: cfg.geo_vocab,
        });
    }
    let mut out = Vec::with_capacity(cfg.d_dev + cfg.d_plat + cfg.d_geo);
    out.extend_from_slice(params.e_dev.row(c.device.index()));
    out.extend_from_slice(params.e_plat.row(c.platform.index()));
    out.extend_from_slice(params.e_geo.row(c.geo));
    Ok(out)
}

/// Sin/cos pairs over day-scaled time: raw seconds saturate the high
/// frequencies, so the schedule is applied to timestamp / 86400.
pub fn encode_abs_time(timestamp_seconds: f64, cfg: &EncoderConfig) -> Vec<f64> {
    let t_days = timestamp_seconds / SECONDS_PER_DAY;
    let mut out = Vec::with_capacity(cfg.d_abs);
    for omega in cfg.abs_frequencies() {
        out.push((omega * t_days).sin());
        out.push((omega * t_days).cos());
    }
    out
}

/// Log-gap bucket index: min(floor(ln(1 + gap_seconds)), B - 1).
pub fn gap_bucket(t_now: i64, t_prev: i64, buckets: usize) -> Result<usize> {
    if t_now < t_prev {
        return Err(Error::Ordering {
            now: t_now,
            prev: t_prev,
        });
    }
    let delta = (1.0 + (t_now - t_prev) as f64).ln();
    Ok((delta.floor() as usize).min(buckets - 1))
}

pub fn encode_time_gap(
    t_now: i64,
    t_prev: i64,
    params: &EncodingParams,
    cfg: &EncoderConfig,
) -> Result<Vec<f64>> {
    let bucket = gap_bucket(t_now, t_prev, cfg.gap_buckets)?;
    Ok(params.e_gap.row(bucket).to_vec())
}

/// Day of week for a nonnegative unix timestamp; epoch day 0 is a Thursday.
pub fn day_of_week(timestamp: i64) -> usize {
    debug_assert!(timestamp >= 0);
    ((timestamp / 86_400 + 4) % 7) as usize
}

pub fn encode_cycle(timestamp: i64) -> [f64; 2] {
    let angle = 2.0 * std::f64::consts::PI * day_of_week(timestamp) as f64 / 7.0;
    [angle.sin(), angle.cos()]
}

// ---------------------------------------------------------------------------
// Step plans: everything about one interaction that does not depend on
// trainable tables. The pure and tape assembly paths both consume plans,
// so the concatenation layout exists in exactly one place each.
// ---------------------------------------------------------------------------

/// Table indices and fixed feature blocks for one interaction.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub action_row: usize,
    pub dev_row: usize,
    pub plat_row: usize,
    pub geo_row: usize,
    pub gap_row: usize,
    pub e_abs: Vec<f64>,
    pub e_cycle: [f64; 2],
    /// Concatenated modality embeddings, zero-filled where missing.
    pub modality_block: Vec<f64>,
    pub presence: [bool; 4],
}

/// Concatenated modality embeddings in block order, zero-filled where
/// missing; also the candidate-feature layout x*.
pub fn modality_block(x: &Interaction, cfg: &EncoderConfig) -> Vec<f64> {
    let mut block = Vec::with_capacity(cfg.candidate_dim());
    for kind in ModalityKind::ALL {
        match x.embedding(kind) {
            Some(v) => block.extend_from_slice(v),
            None => block.extend(std::iter::repeat(0.0).take(cfg.modality_dim(kind))),
        }
    }
    block
}

pub fn plan_step(x: &Interaction, prev_timestamp: i64, cfg: &EncoderConfig) -> Result<StepPlan> {
    x.validate(cfg)?;
    if x.context.geo >= cfg.geo_vocab {
        return Err(Error::OutOfVocabulary {
            id: x.context.geo,
            vocab: cfg.geo_vocab,
        });
    }
    let gap_row = gap_bucket(x.timestamp, prev_timestamp, cfg.gap_buckets)?;
    let modality_block = modality_block(x, cfg);
    Ok(StepPlan {
        action_row: x.action.index(),
        dev_row: x.context.device.index(),
        plat_row: x.context.platform.index(),
        geo_row: x.context.geo,
        gap_row,
        e_abs: encode_abs_time(x.timestamp as f64, cfg),
        e_cycle: encode_cycle(x.timestamp),
        modality_block,
        presence: x.presence(),
    })
}

/// Plans for a whole sequence; row t uses the gap to the previous
/// interaction and the first row uses gap zero.
pub fn plan_sequence(
    history: &[Interaction],
    cfg: &EncoderConfig,
    t_max: usize,
) -> Result<Vec<StepPlan>> {
    if history.is_empty() {
        return Err(Error::invalid("empty interaction sequence"));
    }
    if history.len() > t_max {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds T_max {}",
            history.len(),
            t_max
        )));
    }
    let mut plans = Vec::with_capacity(history.len());
    let mut prev = history[0].timestamp;
    for x in history {
        if x.timestamp < prev {
            return Err(Error::Ordering {
                now: x.timestamp,
                prev,
            });
        }
        plans.push(plan_step(x, prev, cfg)?);
        prev = x.timestamp;
    }
    Ok(plans)
}

/// Pure assembly of one encoded row from a plan.
pub fn assemble_step(plan: &StepPlan, params: &EncodingParams) -> Vec<f64> {
    let mut row = Vec::new();
    row.extend_from_slice(params.e_action.row(plan.action_row));
    row.extend_from_slice(params.e_dev.row(plan.dev_row));
    row.extend_from_slice(params.e_plat.row(plan.plat_row));
    row.extend_from_slice(params.e_geo.row(plan.geo_row));
    row.extend_from_slice(&plan.e_abs);
    row.extend_from_slice(params.e_gap.row(plan.gap_row));
    row.extend_from_slice(&plan.e_cycle);
    row.extend_from_slice(&plan.modality_block);
    row
}

/// Tape assembly of one encoded row; mirrors [`assemble_step`] exactly.
pub fn assemble_step_tape(tape: &mut Tape, plan: &StepPlan, nodes: &EncodingNodes) -> NodeId {
    let action = tape.select_row(nodes.e_action, plan.action_row);
    let dev = tape.select_row(nodes.e_dev, plan.dev_row);
    let plat = tape.select_row(nodes.e_plat, plan.plat_row);
    let geo = tape.select_row(nodes.e_geo, plan.geo_row);
    let abs = tape.input(Matrix::row_vector(&plan.e_abs));
    let gap = tape.select_row(nodes.e_gap, plan.gap_row);
    let cycle = tape.input(Matrix::row_vector(&plan.e_cycle));
    let modality = tape.input(Matrix::row_vector(&plan.modality_block));
    tape.concat_cols(&[action, dev, plat, geo, abs, gap, cycle, modality])
}

// ---------------------------------------------------------------------------
// Whole-interaction / whole-sequence encoders
// ---------------------------------------------------------------------------

pub fn encode_interaction(
    x: &Interaction,
    prev_timestamp: i64,
    params: &EncodingParams,
    cfg: &EncoderConfig,
) -> Result<(Vec<f64>, [bool; 4])> {
    let plan = plan_step(x, prev_timestamp, cfg)?;
    let row = assemble_step(&plan, params);
    debug_assert_eq!(row.len(), cfg.total_dim());
    Ok((row, plan.presence))
}

/// Encode a sorted sequence into a T x D matrix plus per-step presence masks.
pub fn encode_sequence(
    history: &[Interaction],
    params: &EncodingParams,
    cfg: &EncoderConfig,
    t_max: usize,
) -> Result<(Matrix, Vec<[bool; 4]>)> {
    let plans = plan_sequence(history, cfg, t_max)?;
    let d = cfg.total_dim();
    let mut data = Vec::with_capacity(plans.len() * d);
    let mut masks = Vec::with_capacity(plans.len());
    for plan in &plans {
        let row = assemble_step(plan, params);
        debug_assert_eq!(row.len(), d);
        data.extend_from_slice(&row);
        masks.push(plan.presence);
    }
    Ok((Matrix::from_vec(plans.len(), d, data)?, masks))
}

/// Tape version of [`encode_sequence`] over precomputed plans.
pub fn encode_sequence_tape(
    tape: &mut Tape,
    plans: &[StepPlan],
    nodes: &EncodingNodes,
) -> NodeId {
    let rows: Vec<NodeId> = plans
        .iter()
        .map(|p| assemble_step_tape(tape, p, nodes))
        .collect();
    tape.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg() -> EncoderConfig {
        EncoderConfig {
            d_action: 3,
            d_dev: 2,
            d_plat: 2,
            d_geo: 2,
            geo_vocab: 4,
            d_abs: 4,
            d_gap: 3,
            gap_buckets: 16,
            d_text: 2,
            d_img: 2,
            d_video: 2,
            d_audio: 2,
            d_model: 8,
        }
    }

    fn test_params(cfg: &EncoderConfig) -> EncodingParams {
        EncodingParams::init(cfg, &mut Rng::new(77))
    }

    fn interaction(ts: i64) -> Interaction {
        Interaction {
            user_id: "u1".into(),
            item_id: "i1".into(),
            action: ActionType::Click,
            context: Context {
                device: Device::Pc,
                platform: Platform::Web,
                geo: 0,
            },
            timestamp: ts,
            modality_embeddings: [
                Some(vec![0.1, 0.2]),
                None,
                Some(vec![0.5, -0.5]),
                None,
            ],
            score_label: 1.0,
            class_label: 0,
        }
    }

    #[test]
    fn action_lookup_rows() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        assert_eq!(embed_action(ActionType::Click, &params), params.e_action.row(0));
        assert_eq!(embed_action(ActionType::Comment, &params), params.e_action.row(4));
        assert_eq!(
            embed_action(ActionType::Like, &params),
            embed_action(ActionType::Like, &params)
        );
    }

    #[test]
    fn context_concat_order_and_locality() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        let base = Context {
            device: Device::Pc,
            platform: Platform::Web,
            geo: 0,
        };
        let v = encode_context(&base, &params, &cfg).unwrap();
        assert_eq!(v.len(), cfg.d_dev + cfg.d_plat + cfg.d_geo);
        assert_eq!(&v[..cfg.d_dev], params.e_dev.row(0));
        assert_eq!(&v[cfg.d_dev..cfg.d_dev + cfg.d_plat], params.e_plat.row(0));
        assert_eq!(&v[cfg.d_dev + cfg.d_plat..], params.e_geo.row(0));

        let changed = Context {
            device: Device::Tablet,
            ..base
        };
        let w = encode_context(&changed, &params, &cfg).unwrap();
        assert_ne!(&w[..cfg.d_dev], &v[..cfg.d_dev]);
        assert_eq!(&w[cfg.d_dev..], &v[cfg.d_dev..]);
    }

    #[test]
    fn context_rejects_out_of_vocab_geo() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        let c = Context {
            device: Device::Pc,
            platform: Platform::Web,
            geo: cfg.geo_vocab,
        };
        assert!(matches!(
            encode_context(&c, &params, &cfg),
            Err(Error::OutOfVocabulary { .. })
        ));
    }

    #[test]
    fn abs_time_zero_alternates() {
        let cfg = test_cfg();
        let v = encode_abs_time(0.0, &cfg);
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn abs_time_bounded_for_large_timestamps() {
        let cfg = test_cfg();
        for x in encode_abs_time(1e9, &cfg) {
            assert!((-1.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn abs_time_pi_days_hits_minus_one() {
        let cfg = test_cfg();
        // omega_0 = 1, so t_days = pi puts the first pair at (sin pi, cos pi).
        let v = encode_abs_time(std::f64::consts::PI * SECONDS_PER_DAY, &cfg);
        assert!(v[0].abs() < 1e-9, "sin pi = {}", v[0]);
        assert!((v[1] + 1.0).abs() < 1e-9, "cos pi = {}", v[1]);
    }

    #[test]
    fn gap_buckets_follow_log_rule() {
        assert_eq!(gap_bucket(100, 100, 16).unwrap(), 0);
        // ln(86401) = 11.3667..., independently evaluated.
        assert_eq!(gap_bucket(86_400, 0, 16).unwrap(), 11);
        assert_eq!(gap_bucket(1_000_000_000_000, 0, 16).unwrap(), 15);
        assert!(matches!(
            gap_bucket(5, 10, 16),
            Err(Error::Ordering { .. })
        ));
    }

    #[test]
    fn cycle_is_on_unit_circle() {
        assert_eq!(encode_cycle(3 * 86_400), [0.0, 1.0]); // (3 + 4) % 7 = 0, angle 0
        for ts in [0_i64, 123, 86_400 * 3 + 7, 1_700_000_000] {
            let [s, c] = encode_cycle(ts);
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cycle_day_three() {
        // Day-of-week 3: (sin, cos) of 6 pi / 7, independently evaluated.
        let ts = (3 + 3) * 86_400; // epoch day 3 is a Sunday + 3 => weekday 3
        assert_eq!(day_of_week(ts), 3);
        let [s, c] = encode_cycle(ts);
        assert!((s - 0.4338837391175581).abs() < 1e-12);
        assert!((c - -0.9009688679024191).abs() < 1e-12);
    }

    #[test]
    fn interaction_row_has_total_dim_and_zero_fills_missing() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        let x = interaction(1000);
        let (row, presence) = encode_interaction(&x, 1000, &params, &cfg).unwrap();
        assert_eq!(row.len(), cfg.total_dim());
        assert_eq!(presence, [true, false, true, false]);
        // img block (second modality slot) is zero-filled
        let img_start = cfg.total_dim() - cfg.candidate_dim() + cfg.d_text;
        assert_eq!(&row[img_start..img_start + cfg.d_img], &[0.0, 0.0]);
    }

    #[test]
    fn all_modalities_missing_rejected() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        let mut x = interaction(0);
        x.modality_embeddings = [None, None, None, None];
        assert!(encode_interaction(&x, 0, &params, &cfg).is_err());
    }

    #[test]
    fn timestamps_touch_only_time_blocks() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        let a = encode_interaction(&interaction(1000), 0, &params, &cfg).unwrap().0;
        let b = encode_interaction(&interaction(2_000_000), 0, &params, &cfg).unwrap().0;
        let t_start = cfg.d_action + cfg.d_dev + cfg.d_plat + cfg.d_geo;
        let t_end = t_start + cfg.d_abs + cfg.d_gap + 2;
        assert_eq!(&a[..t_start], &b[..t_start]);
        assert_eq!(&a[t_end..], &b[t_end..]);
        assert_ne!(&a[t_start..t_end], &b[t_start..t_end]);
    }

    #[test]
    fn sequence_prefix_rows_are_stable() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        let history: Vec<Interaction> = [0, 3600, 90_000, 90_100]
            .iter()
            .map(|&ts| interaction(ts))
            .collect();
        let (full, _) = encode_sequence(&history, &params, &cfg, 32).unwrap();
        let (prefix, _) = encode_sequence(&history[..2], &params, &cfg, 32).unwrap();
        for t in 0..2 {
            assert_eq!(full.row(t), prefix.row(t));
        }
    }

    #[test]
    fn sequence_rejects_unsorted_empty_and_overlong() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        let sorted: Vec<Interaction> = [100, 50].iter().map(|&ts| interaction(ts)).collect();
        assert!(matches!(
            encode_sequence(&sorted, &params, &cfg, 32),
            Err(Error::Ordering { .. })
        ));
        assert!(encode_sequence(&[], &params, &cfg, 32).is_err());
        let three: Vec<Interaction> = [1, 2, 3].iter().map(|&ts| interaction(ts)).collect();
        assert!(encode_sequence(&three, &params, &cfg, 2).is_err());
    }

    #[test]
    fn tape_assembly_matches_pure_assembly_bitwise() {
        let cfg = test_cfg();
        let params = test_params(&cfg);
        let history: Vec<Interaction> = [0, 3600, 7200].iter().map(|&ts| interaction(ts)).collect();
        let (pure, _) = encode_sequence(&history, &params, &cfg, 32).unwrap();

        let mut tape = Tape::new();
        let nodes = EncodingNodes::register(&params, &mut tape);
        let plans = plan_sequence(&history, &cfg, 32).unwrap();
        let id = encode_sequence_tape(&mut tape, &plans, &nodes);
        assert_eq!(tape.value(id), &pure);
    }
}
