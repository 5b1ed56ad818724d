//! Score and class labels built from behavioral signals.

use crate::error::{Error, Result};

/// Behavioral indicators plus watch statistics for one interaction.
#[derive(Clone, Copy, Debug, Default)]
pub struct EngagementSignals {
    pub clicked: bool,
    pub carted: bool,
    pub purchased: bool,
    pub commented: bool,
    pub liked: bool,
    pub shared: bool,
    /// Watch time in seconds.
    pub watch_time: f64,
    /// Video length in seconds; must be positive when a video score is taken.
    pub video_length: f64,
}

/// Scenario weights. The e-commerce and video sets are independent;
/// video weights are named v1..v4 to avoid clashing with the loss weights.
#[derive(Clone, Copy, Debug)]
pub struct LabelWeights {
    pub ecommerce: [f64; 4],
    pub video: [f64; 4],
}

impl Default for LabelWeights {
    fn default() -> Self {
        Self {
            ecommerce: [1.0, 2.0, 3.0, 2.0],
            video: [3.0, 1.0, 1.0, 1.0],
        }
    }
}

impl LabelWeights {
    pub fn validate(&self) -> Result<()> {
        if self.ecommerce.iter().chain(&self.video).any(|&w| w <= 0.0) {
            return Err(Error::validation("label weights must be positive"));
        }
        Ok(())
    }
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// alpha*I_click + beta*I_cart + gamma*I_purchase + delta*I_comment.
pub fn ecommerce_score(s: &EngagementSignals, w: &LabelWeights) -> f64 {
    let [alpha, beta, gamma, delta] = w.ecommerce;
    alpha * ind(s.clicked) + beta * ind(s.carted) + gamma * ind(s.purchased) + delta * ind(s.commented)
}

/// v1*(watch/length clamped to [0,1]) + v2*I_like + v3*I_comment + v4*I_share.
pub fn video_score(s: &EngagementSignals, w: &LabelWeights) -> Result<f64> {
    if s.video_length <= 0.0 {
        return Err(Error::invalid(format!(
            "video length {} must be positive",
            s.video_length
        )));
    }
    let ratio = (s.watch_time / s.video_length).clamp(0.0, 1.0);
    let [v1, v2, v3, v4] = w.video;
    Ok(v1 * ratio + v2 * ind(s.liked) + v3 * ind(s.commented) + v4 * ind(s.shared))
}

/// Movie ratings are integers 1..=10.
pub fn movie_score_validate(rating: i64) -> Result<f64> {
    if (1..=10).contains(&rating) {
        Ok(rating as f64)
    } else {
        Err(Error::validation(format!("movie rating {rating} outside 1..=10")))
    }
}

/// Unit basis vector e_c of length K.
pub fn one_hot_class(class: usize, k: usize) -> Result<Vec<f64>> {
    if class >= k {
        return Err(Error::validation(format!("class {class} outside 0..{k}")));
    }
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    Ok(v)
}
