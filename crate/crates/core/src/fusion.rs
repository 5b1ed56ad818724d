//! Per-modality attention contexts, learnable modality weighting and the
//! final fusion of temporal and multimodal interest vectors.

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, NodeId, Rng, Tape};
use crate::providers::ModalityKind;
use crate::temporal::attention_tape;

/// Per-modality projection, attention weights and scorer.
#[derive(Clone, Debug)]
pub struct ModalityParams {
    /// d_m x d_model projection into the unified space.
    pub proj: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// d_model x 1 scoring vector; the modality score is h_m . scorer.
    pub scorer: Matrix,
}

/// One parameter set per modality plus the (2 d_model) x d_model final fusion.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub modalities: [ModalityParams; 4],
    pub w_final: Matrix,
}

fn init_weight(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

impl FusionParams {
    pub fn init(modality_dims: [usize; 4], d_model: usize, rng: &mut Rng) -> Self {
        let modalities = modality_dims.map(|d_m| ModalityParams {
            proj: init_weight(rng, d_m, d_model),
            w_q: init_weight(rng, d_model, d_model),
            w_k: init_weight(rng, d_model, d_model),
            w_v: init_weight(rng, d_model, d_model),
            scorer: init_weight(rng, d_model, 1),
        });
        Self {
            modalities,
            w_final: init_weight(rng, 2 * d_model, d_model),
        }
    }

    pub fn modality(&self, kind: ModalityKind) -> &ModalityParams {
        &self.modalities[kind.index()]
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for kind in ModalityKind::ALL {
            let m = &self.modalities[kind.index()];
            let p = format!("fusion.{}", kind.as_str());
            out.push((format!("{p}.proj"), &m.proj));
            out.push((format!("{p}.w_q"), &m.w_q));
            out.push((format!("{p}.w_k"), &m.w_k));
            out.push((format!("{p}.w_v"), &m.w_v));
            out.push((format!("{p}.scorer"), &m.scorer));
        }
        out.push(("fusion.w_final".into(), &self.w_final));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, m) in self.modalities.iter_mut().enumerate() {
            let p = format!("fusion.{}", ModalityKind::ALL[i].as_str());
            out.push((format!("{p}.proj"), &mut m.proj));
            out.push((format!("{p}.w_q"), &mut m.w_q));
            out.push((format!("{p}.w_k"), &mut m.w_k));
            out.push((format!("{p}.w_v"), &mut m.w_v));
            out.push((format!("{p}.scorer"), &mut m.scorer));
        }
        out.push(("fusion.w_final".into(), &mut self.w_final));
        out
    }
}

/// Tape handles for [`FusionParams`].
#[derive(Clone, Debug)]
pub struct FusionNodes {
    pub modalities: [ModalityNodes; 4],
    pub w_final: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct ModalityNodes {
    pub proj: NodeId,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub scorer: NodeId,
}

impl FusionNodes {
    pub fn register(params: &FusionParams, tape: &mut Tape) -> Self {
        let modalities = [0, 1, 2, 3].map(|i| {
            let m = &params.modalities[i];
            ModalityNodes {
                proj: tape.input(m.proj.clone()),
                w_q: tape.input(m.w_q.clone()),
                w_k: tape.input(m.w_k.clone()),
                w_v: tape.input(m.w_v.clone()),
                scorer: tape.input(m.scorer.clone()),
            }
        });
        Self {
            modalities,
            w_final: tape.input(params.w_final.clone()),
        }
    }
}

/// Causal self-attention over one modality's projected series; the context
/// is the last output row (the modality's state at the current cutoff).
pub fn modality_context_tape(tape: &mut Tape, series: NodeId, nodes: &ModalityNodes) -> NodeId {
    let q = tape.matmul(series, nodes.w_q);
    let k = tape.matmul(series, nodes.w_k);
    let v = tape.matmul(series, nodes.w_v);
    let attended = attention_tape(tape, q, k, v, true);
    let last = tape.value(attended).rows() - 1;
    tape.select_row(attended, last)
}

/// Pure modality context over an already-projected t x d_model series.
pub fn modality_context(series: &Matrix, params: &ModalityParams) -> Result<Vec<f64>> {
    if series.rows() == 0 {
        return Err(Error::invalid("modality context over zero present steps"));
    }
    if series.cols() != params.w_q.rows() {
        return Err(Error::invalid(format!(
            "modality series width {} does not match attention weights {}",
            series.cols(),
            params.w_q.rows()
        )));
    }
    let mut tape = Tape::new();
    let s = tape.input(series.clone());
    let nodes = ModalityNodes {
        proj: tape.input(params.proj.clone()),
        w_q: tape.input(params.w_q.clone()),
        w_k: tape.input(params.w_k.clone()),
        w_v: tape.input(params.w_v.clone()),
        scorer: tape.input(params.scorer.clone()),
    };
    let h = modality_context_tape(&mut tape, s, &nodes);
    Ok(tape.value(h).row(0).to_vec())
}

/// Raw modality scores w_m . h_m for the present modalities.
pub fn modality_scores(
    contexts: &[Option<Vec<f64>>; 4],
    params: &FusionParams,
) -> [Option<f64>; 4] {
    let mut scores = [None; 4];
    for kind in ModalityKind::ALL {
        if let Some(h) = &contexts[kind.index()] {
            let w = &params.modality(kind).scorer;
            let s: f64 = h.iter().enumerate().map(|(i, x)| x * w.get(i, 0)).sum();
            scores[kind.index()] = Some(s);
        }
    }
    scores
}

/// Softmax over present scores; absent modalities get exactly zero weight.
pub fn weights_from_scores(scores: &[Option<f64>; 4]) -> Result<[f64; 4]> {
    let present: Vec<usize> = (0..4).filter(|&i| scores[i].is_some()).collect();
    if present.is_empty() {
        return Err(Error::invalid("no present modality to weight"));
    }
    let raw: Vec<f64> = present.iter().map(|&i| scores[i].unwrap()).collect();
    let soft = softmax(&raw)?;
    let mut alpha = [0.0; 4];
    for (slot, &i) in present.iter().enumerate() {
        alpha[i] = soft[slot];
    }
    Ok(alpha)
}

/// alpha_m = exp(w_m . h_m) / sum_j exp(w_j . h_j) over present modalities.
pub fn modality_weights(
    contexts: &[Option<Vec<f64>>; 4],
    params: &FusionParams,
) -> Result<[f64; 4]> {
    weights_from_scores(&modality_scores(contexts, params))
}

/// z_multi = sum_m alpha_m h_m.
pub fn fuse_multi(contexts: &[Option<Vec<f64>>; 4], alpha: &[f64; 4]) -> Result<Vec<f64>> {
    let mut out: Option<Vec<f64>> = None;
    for i in 0..4 {
        if let Some(h) = &contexts[i] {
            let acc = out.get_or_insert_with(|| vec![0.0; h.len()]);
            if acc.len() != h.len() {
                return Err(Error::invalid("modality context widths differ"));
            }
            for (a, &x) in acc.iter_mut().zip(h) {
                *a += alpha[i] * x;
            }
        } else if alpha[i] != 0.0 {
            return Err(Error::invalid("nonzero weight on an absent modality"));
        }
    }
    out.ok_or_else(|| Error::invalid("no present modality to fuse"))
}

/// z_final = [z_t (+) z_multi] W.
pub fn fuse_final(z_t: &[f64], z_multi: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    if z_t.len() != z_multi.len() || z_t.len() + z_multi.len() != params.w_final.rows() {
        return Err(Error::invalid(format!(
            "fuse_final dims: z {} multi {} vs W rows {}",
            z_t.len(),
            z_multi.len(),
            params.w_final.rows()
        )));
    }
    let mut concat = Vec::with_capacity(z_t.len() * 2);
    concat.extend_from_slice(z_t);
    concat.extend_from_slice(z_multi);
    Ok(Matrix::row_vector(&concat)
        .matmul(&params.w_final)
        .row(0)
        .to_vec())
}

/// Fusion output on the tape.
pub struct FusedTape {
    pub z_multi: NodeId,
    /// 1 x P weights over present modalities, in `present` order.
    pub alpha: NodeId,
    pub present: Vec<ModalityKind>,
}

/// Full fusion pass over raw (unprojected) per-modality series.
/// `series[m]` holds the t_m x d_m rows of modality m at the steps where it
/// is present; absent modalities are None.
pub fn fusion_forward_tape(
    tape: &mut Tape,
    series: &[Option<NodeId>; 4],
    nodes: &FusionNodes,
) -> Result<FusedTape> {
    let mut present = Vec::new();
    let mut contexts = Vec::new();
    let mut scores = Vec::new();
    for kind in ModalityKind::ALL {
        if let Some(raw) = series[kind.index()] {
            let m = &nodes.modalities[kind.index()];
            let projected = tape.matmul(raw, m.proj);
            let h = modality_context_tape(tape, projected, m);
            let score = tape.matmul(h, m.scorer);
            present.push(kind);
            contexts.push(h);
            scores.push(score);
        }
    }
    if present.is_empty() {
        return Err(Error::invalid("no present modality in fusion input"));
    }
    let score_row = if scores.len() == 1 {
        scores[0]
    } else {
        tape.concat_cols(&scores)
    };
    let alpha = tape.softmax_rows(score_row, false);
    let mut z_multi: Option<NodeId> = None;
    for (slot, &h) in contexts.iter().enumerate() {
        let a = tape.slice_cols(alpha, slot, 1);
        let scaled = tape.scale_by(a, h);
        z_multi = Some(match z_multi {
            None => scaled,
            Some(acc) => tape.add(acc, scaled),
        });
    }
    Ok(FusedTape {
        z_multi: z_multi.expect("at least one present modality"),
        alpha,
        present,
    })
}

/// z_final on the tape: concatenate and apply the final fusion map.
pub fn fuse_final_tape(tape: &mut Tape, z_t: NodeId, z_multi: NodeId, nodes: &FusionNodes) -> NodeId {
    let concat = tape.concat_cols(&[z_t, z_multi]);
    tape.matmul(concat, nodes.w_final)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, gradient_relative_error};

    fn params(rng: &mut Rng) -> FusionParams {
        FusionParams::init([3, 3, 3, 3], 4, rng)
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn context_single_row_is_value_projection() {
        let mut rng = Rng::new(21);
        let p = params(&mut rng);
        let row = random_matrix(&mut rng, 1, 4);
        let h = modality_context(&row, &p.modality(ModalityKind::Text)).unwrap();
        let expect = row.matmul(&p.modality(ModalityKind::Text).w_v);
        assert_eq!(h, expect.row(0));
    }

    #[test]
    fn context_identical_rows_reduce_to_value_projection() {
        let mut rng = Rng::new(22);
        let p = params(&mut rng);
        let one = random_matrix(&mut rng, 1, 4);
        let repeated = Matrix::from_fn(5, 4, |_, j| one.get(0, j));
        let h = modality_context(&repeated, &p.modality(ModalityKind::Image)).unwrap();
        let expect = one.matmul(&p.modality(ModalityKind::Image).w_v);
        for (a, b) in h.iter().zip(expect.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_is_causal_at_earlier_cutoffs() {
        let mut rng = Rng::new(23);
        let p = params(&mut rng);
        let m = p.modality(ModalityKind::Video);
        let series = random_matrix(&mut rng, 4, 4);
        let shorter = Matrix::from_fn(3, 4, |i, j| series.get(i, j));
        let h3 = modality_context(&shorter, m).unwrap();
        // Same rows plus a future one: row 2 of the attention output is unchanged,
        // which is what the cutoff-3 context reads.
        let mut tape = Tape::new();
        let s = tape.input(series.clone());
        let nodes = ModalityNodes {
            proj: tape.input(m.proj.clone()),
            w_q: tape.input(m.w_q.clone()),
            w_k: tape.input(m.w_k.clone()),
            w_v: tape.input(m.w_v.clone()),
            scorer: tape.input(m.scorer.clone()),
        };
        let q = tape.matmul(s, nodes.w_q);
        let k = tape.matmul(s, nodes.w_k);
        let v = tape.matmul(s, nodes.w_v);
        let attended = attention_tape(&mut tape, q, k, v, true);
        assert_eq!(tape.value(attended).row(2), h3.as_slice());
    }

    #[test]
    fn context_rejects_empty_series() {
        let mut rng = Rng::new(24);
        let p = params(&mut rng);
        let empty = Matrix::zeros(0, 4);
        assert!(modality_context(&empty, p.modality(ModalityKind::Text)).is_err());
    }

    #[test]
    fn weights_single_and_symmetric() {
        let single: [Option<f64>; 4] = [None, Some(0.7), None, None];
        assert_eq!(weights_from_scores(&single).unwrap(), [0.0, 1.0, 0.0, 0.0]);

        let equal: [Option<f64>; 4] = [Some(0.3), Some(0.3), None, None];
        let alpha = weights_from_scores(&equal).unwrap();
        assert!((alpha[0] - 0.5).abs() < 1e-15);
        assert!((alpha[1] - 0.5).abs() < 1e-15);
        assert_eq!(alpha[2], 0.0);
        assert_eq!(alpha[3], 0.0);
    }

    #[test]
    fn weights_ln2_zero() {
        let scores: [Option<f64>; 4] = [Some(2.0_f64.ln()), None, Some(0.0), None];
        let alpha = weights_from_scores(&scores).unwrap();
        assert!((alpha[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((alpha[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_require_a_present_modality() {
        assert!(weights_from_scores(&[None, None, None, None]).is_err());
    }

    #[test]
    fn weights_shift_invariant_and_mask_renormalizes() {
        let scores: [Option<f64>; 4] = [Some(0.2), Some(-1.1), Some(0.9), None];
        let alpha = weights_from_scores(&scores).unwrap();
        let shifted: [Option<f64>; 4] =
            [Some(0.2 + 55.5), Some(-1.1 + 55.5), Some(0.9 + 55.5), None];
        let alpha_shifted = weights_from_scores(&shifted).unwrap();
        for i in 0..4 {
            assert!((alpha[i] - alpha_shifted[i]).abs() < 1e-12);
        }
        // masking the third modality = softmax of the remaining two scores
        let masked: [Option<f64>; 4] = [Some(0.2), Some(-1.1), None, None];
        let alpha_masked = weights_from_scores(&masked).unwrap();
        let expect = softmax(&[0.2, -1.1]).unwrap();
        assert_eq!(alpha_masked[0], expect[0]);
        assert_eq!(alpha_masked[1], expect[1]);
        assert_eq!(alpha_masked[2], 0.0);
    }

    #[test]
    fn fuse_multi_cases() {
        let h: [Option<Vec<f64>>; 4] = [Some(vec![1.0, 2.0]), None, None, None];
        assert_eq!(fuse_multi(&h, &[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![1.0, 2.0]);

        let same: [Option<Vec<f64>>; 4] =
            [Some(vec![3.0, -1.0]), Some(vec![3.0, -1.0]), None, None];
        let z = fuse_multi(&same, &[0.25, 0.75, 0.0, 0.0]).unwrap();
        for (a, b) in z.iter().zip(&[3.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }

        let two: [Option<Vec<f64>>; 4] =
            [Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0]), None, None];
        assert_eq!(fuse_multi(&two, &[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn fuse_multi_stays_in_convex_hull() {
        let mut rng = Rng::new(25);
        for _ in 0..50 {
            let h: [Option<Vec<f64>>; 4] = [
                Some((0..3).map(|_| rng.uniform_range(-2.0, 2.0)).collect()),
                Some((0..3).map(|_| rng.uniform_range(-2.0, 2.0)).collect()),
                Some((0..3).map(|_| rng.uniform_range(-2.0, 2.0)).collect()),
                None,
            ];
            let scores: [Option<f64>; 4] = [
                Some(rng.uniform_range(-1.0, 1.0)),
                Some(rng.uniform_range(-1.0, 1.0)),
                Some(rng.uniform_range(-1.0, 1.0)),
                None,
            ];
            let alpha = weights_from_scores(&scores).unwrap();
            let z = fuse_multi(&h, &alpha).unwrap();
            for j in 0..3 {
                let vals: Vec<f64> = h.iter().flatten().map(|v| v[j]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(z[j] >= lo - 1e-12 && z[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn fuse_final_identity_blocks_and_linearity() {
        let mut rng = Rng::new(26);
        let mut p = params(&mut rng);
        let d = 4;
        // W = [I; 0] selects z_t
        p.w_final = Matrix::from_fn(2 * d, d, |i, j| if i == j { 1.0 } else { 0.0 });
        let z = vec![1.0, -2.0, 3.0, 0.5];
        let m = vec![9.0, 9.0, 9.0, 9.0];
        assert_eq!(fuse_final(&z, &m, &p).unwrap(), z);
        // W = [0; I] selects z_multi
        p.w_final = Matrix::from_fn(2 * d, d, |i, j| if i == j + d { 1.0 } else { 0.0 });
        assert_eq!(fuse_final(&z, &m, &p).unwrap(), m);

        p.w_final = random_matrix(&mut rng, 2 * d, d);
        let base = fuse_final(&z, &m, &p).unwrap();
        let scaled_in: Vec<f64> = z.iter().map(|x| 2.0 * x).collect();
        let scaled_multi: Vec<f64> = m.iter().map(|x| 2.0 * x).collect();
        let scaled = fuse_final(&scaled_in, &scaled_multi, &p).unwrap();
        for (a, b) in scaled.iter().zip(&base) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        assert!(fuse_final(&z[..3], &m, &p).is_err());
    }

    #[test]
    fn forward_alpha_is_on_the_simplex() {
        let mut rng = Rng::new(27);
        let p = params(&mut rng);
        let mut tape = Tape::new();
        let nodes = FusionNodes::register(&p, &mut tape);
        let t1 = tape.input(random_matrix(&mut rng, 3, 3));
        let t3 = tape.input(random_matrix(&mut rng, 2, 3));
        let series = [Some(t1), None, Some(t3), None];
        let fused = fusion_forward_tape(&mut tape, &series, &nodes).unwrap();
        assert_eq!(fused.present, vec![ModalityKind::Text, ModalityKind::Video]);
        let alpha = tape.value(fused.alpha);
        assert_eq!(alpha.shape(), (1, 2));
        assert!((alpha.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(alpha.row(0).iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(28);
        let p = params(&mut rng);
        let text = random_matrix(&mut rng, 3, 3);
        let audio = random_matrix(&mut rng, 2, 3);
        let z_t = random_matrix(&mut rng, 1, 4);

        let loss_of = |p: &FusionParams| -> (Tape, FusionNodes, NodeId) {
            let mut tape = Tape::new();
            let nodes = FusionNodes::register(p, &mut tape);
            let t = tape.input(text.clone());
            let a = tape.input(audio.clone());
            let series = [Some(t), None, None, Some(a)];
            let fused = fusion_forward_tape(&mut tape, &series, &nodes).unwrap();
            let z = tape.input(z_t.clone());
            let z_final = fuse_final_tape(&mut tape, z, fused.z_multi, &nodes);
            let sq = tape.mul(z_final, z_final);
            let loss = tape.sum_all(sq);
            (tape, nodes, loss)
        };

        let (tape, nodes, loss) = loss_of(&p);
        let grads = tape.backward(loss);
        let mut analytic = Vec::new();
        for m in &nodes.modalities {
            for id in [m.proj, m.w_q, m.w_k, m.w_v, m.scorer] {
                analytic.extend(grads.get(id).as_slice());
            }
        }
        analytic.extend(grads.get(nodes.w_final).as_slice());

        let flat: Vec<f64> = p
            .tensors()
            .iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect();
        let numeric = finite_diff_gradient(
            |vals| {
                let mut probe = p.clone();
                let mut off = 0;
                for (_, m) in probe.tensors_mut() {
                    let n = m.len();
                    m.as_mut_slice().copy_from_slice(&vals[off..off + n]);
                    off += n;
                }
                let (tape, _, loss) = loss_of(&probe);
                Ok(tape.value(loss).item())
            },
            &flat,
            1e-5,
        )
        .unwrap();

        let mut worst = 0.0_f64;
        for (&a, &n) in analytic.iter().zip(&numeric) {
            worst = worst.max(gradient_relative_error(a, n));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
        // absent modalities got exact zero gradients
        for kind in [ModalityKind::Image, ModalityKind::Video] {
            let m = &nodes.modalities[kind.index()];
            assert!(grads.get(m.w_q).as_slice().iter().all(|&g| g == 0.0));
        }
    }
}
