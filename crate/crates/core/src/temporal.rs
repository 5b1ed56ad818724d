//! Causal transformer over encoded interaction sequences: per-step interest
//! states z_1..z_T where row t only sees rows 1..t.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, Rng, Tape};

/// Attention(Q, K, V) = softmax(Q K^T / sqrt(d_k)) V, shared by the
/// temporal layers and per-modality fusion attention.
pub fn attention_tape(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId, causal: bool) -> NodeId {
    let d_k = tape.value(q).cols();
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt);
    let scores = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scores, causal);
    tape.matmul(weights, v)
}

/// Pure attention over plain matrices, with shape validation.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Result<Matrix> {
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(Error::invalid(format!(
            "query/key width mismatch: {} vs {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() || q.rows() != k.rows() {
        return Err(Error::invalid(format!(
            "attention row mismatch: Q {} K {} V {}",
            q.rows(),
            k.rows(),
            v.rows()
        )));
    }
    let mut tape = Tape::new();
    let qn = tape.input(q.clone());
    let kn = tape.input(k.clone());
    let vn = tape.input(v.clone());
    let out = attention_tape(&mut tape, qn, kn, vn, causal);
    Ok(tape.value(out).clone())
}

/// Weights for one transformer layer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    /// Per-head Q/K/V projections, d_model x d_k each.
    pub heads: Vec<HeadParams>,
    pub w_out: Matrix,
    pub b_out: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_ff1: Matrix,
    pub b_ff1: Matrix,
    pub w_ff2: Matrix,
    pub b_ff2: Matrix,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// Input projection plus the layer stack.
#[derive(Clone, Debug)]
pub struct TransformerParams {
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub layers: Vec<LayerParams>,
}

fn init_weight(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

impl TransformerParams {
    /// `d_model` must be divisible by `n_heads`.
    pub fn init(
        d_input: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let d_k = d_model / n_heads;
        let layers = (0..n_layers)
            .map(|_| LayerParams {
                ln1_gain: Matrix::from_fn(1, d_model, |_, _| 1.0),
                ln1_bias: Matrix::zeros(1, d_model),
                heads: (0..n_heads)
                    .map(|_| HeadParams {
                        w_q: init_weight(rng, d_model, d_k),
                        w_k: init_weight(rng, d_model, d_k),
                        w_v: init_weight(rng, d_model, d_k),
                    })
                    .collect(),
                w_out: init_weight(rng, d_model, d_model),
                b_out: Matrix::zeros(1, d_model),
                ln2_gain: Matrix::from_fn(1, d_model, |_, _| 1.0),
                ln2_bias: Matrix::zeros(1, d_model),
                w_ff1: init_weight(rng, d_model, d_ff),
                b_ff1: Matrix::zeros(1, d_ff),
                w_ff2: init_weight(rng, d_ff, d_model),
                b_ff2: Matrix::zeros(1, d_model),
            })
            .collect();
        Ok(Self {
            w_in: init_weight(rng, d_input, d_model),
            b_in: Matrix::zeros(1, d_model),
            layers,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("temporal.w_in".into(), &self.w_in),
            ("temporal.b_in".into(), &self.b_in),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("temporal.layer{i}");
            out.push((format!("{p}.ln1_gain"), &layer.ln1_gain));
            out.push((format!("{p}.ln1_bias"), &layer.ln1_bias));
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("{p}.head{h}.w_q"), &head.w_q));
                out.push((format!("{p}.head{h}.w_k"), &head.w_k));
                out.push((format!("{p}.head{h}.w_v"), &head.w_v));
            }
            out.push((format!("{p}.w_out"), &layer.w_out));
            out.push((format!("{p}.b_out"), &layer.b_out));
            out.push((format!("{p}.ln2_gain"), &layer.ln2_gain));
            out.push((format!("{p}.ln2_bias"), &layer.ln2_bias));
            out.push((format!("{p}.w_ff1"), &layer.w_ff1));
            out.push((format!("{p}.b_ff1"), &layer.b_ff1));
            out.push((format!("{p}.w_ff2"), &layer.w_ff2));
            out.push((format!("{p}.b_ff2"), &layer.b_ff2));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("temporal.w_in".into(), &mut self.w_in),
            ("temporal.b_in".into(), &mut self.b_in),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("temporal.layer{i}");
            out.push((format!("{p}.ln1_gain"), &mut layer.ln1_gain));
            out.push((format!("{p}.ln1_bias"), &mut layer.ln1_bias));
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("{p}.head{h}.w_q"), &mut head.w_q));
                out.push((format!("{p}.head{h}.w_k"), &mut head.w_k));
                out.push((format!("{p}.head{h}.w_v"), &mut head.w_v));
            }
            out.push((format!("{p}.w_out"), &mut layer.w_out));
            out.push((format!("{p}.b_out"), &mut layer.b_out));
            out.push((format!("{p}.ln2_gain"), &mut layer.ln2_gain));
            out.push((format!("{p}.ln2_bias"), &mut layer.ln2_bias));
            out.push((format!("{p}.w_ff1"), &mut layer.w_ff1));
            out.push((format!("{p}.b_ff1"), &mut layer.b_ff1));
            out.push((format!("{p}.w_ff2"), &mut layer.w_ff2));
            out.push((format!("{p}.b_ff2"), &mut layer.b_ff2));
        }
        out
    }
}

/// Tape handles for [`TransformerParams`].
#[derive(Clone, Debug)]
pub struct TransformerNodes {
    pub w_in: NodeId,
    pub b_in: NodeId,
    pub layers: Vec<LayerNodes>,
}

#[derive(Clone, Debug)]
pub struct LayerNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub heads: Vec<(NodeId, NodeId, NodeId)>,
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w_ff1: NodeId,
    pub b_ff1: NodeId,
    pub w_ff2: NodeId,
    pub b_ff2: NodeId,
}

impl TransformerNodes {
    pub fn register(params: &TransformerParams, tape: &mut Tape) -> Self {
        Self {
            w_in: tape.input(params.w_in.clone()),
            b_in: tape.input(params.b_in.clone()),
            layers: params
                .layers
                .iter()
                .map(|l| LayerNodes {
                    ln1_gain: tape.input(l.ln1_gain.clone()),
                    ln1_bias: tape.input(l.ln1_bias.clone()),
                    heads: l
                        .heads
                        .iter()
                        .map(|h| {
                            (
                                tape.input(h.w_q.clone()),
                                tape.input(h.w_k.clone()),
                                tape.input(h.w_v.clone()),
                            )
                        })
                        .collect(),
                    w_out: tape.input(l.w_out.clone()),
                    b_out: tape.input(l.b_out.clone()),
                    ln2_gain: tape.input(l.ln2_gain.clone()),
                    ln2_bias: tape.input(l.ln2_bias.clone()),
                    w_ff1: tape.input(l.w_ff1.clone()),
                    b_ff1: tape.input(l.b_ff1.clone()),
                    w_ff2: tape.input(l.w_ff2.clone()),
                    b_ff2: tape.input(l.b_ff2.clone()),
                })
                .collect(),
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard index-based sinusoidal encodings, used only when the `extra`
/// positional ablation is enabled (time features already carry position).
pub fn positional_encoding(len: usize, d_model: usize) -> Matrix {
    Matrix::from_fn(len, d_model, |t, j| {
        let k = j / 2;
        let omega = 10_000.0_f64.powf(-2.0 * k as f64 / d_model as f64);
        let angle = omega * t as f64;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Project the encoded sequence and run the pre-norm causal layer stack.
/// Returns the T x d_model matrix of interest states on the tape.
pub fn transformer_forward_tape(
    tape: &mut Tape,
    input: NodeId,
    nodes: &TransformerNodes,
    extra_positional: bool,
) -> NodeId {
    let projected = tape.matmul(input, nodes.w_in);
    let mut x = tape.add_bias(projected, nodes.b_in);
    if extra_positional {
        let (t_len, d_model) = tape.value(x).shape();
        let pe = tape.input(positional_encoding(t_len, d_model));
        x = tape.add(x, pe);
    }
    for layer in &nodes.layers {
        // Pre-norm multi-head causal self-attention with residual.
        let normed = tape.layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS);
        let mut head_outs = Vec::with_capacity(layer.heads.len());
        for &(w_q, w_k, w_v) in &layer.heads {
            let q = tape.matmul(normed, w_q);
            let k = tape.matmul(normed, w_k);
            let v = tape.matmul(normed, w_v);
            head_outs.push(attention_tape(tape, q, k, v, true));
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)
        };
        let proj = tape.matmul(merged, layer.w_out);
        let mha = tape.add_bias(proj, layer.b_out);
        x = tape.add(x, mha);

        // Pre-norm position-wise feed-forward with residual.
        let normed2 = tape.layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS);
        let h1 = tape.matmul(normed2, layer.w_ff1);
        let h1b = tape.add_bias(h1, layer.b_ff1);
        let act = tape.tanh(h1b);
        let h2 = tape.matmul(act, layer.w_ff2);
        let ff = tape.add_bias(h2, layer.b_ff2);
        x = tape.add(x, ff);
    }
    x
}

/// Per-step interest states; row t is z_t.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestStates(pub Matrix);

impl InterestStates {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    /// z_t for one-based step t.
    pub fn state(&self, t: usize) -> &[f64] {
        self.0.row(t - 1)
    }

    /// The most recent state z_T.
    pub fn last_state(&self) -> &[f64] {
        self.0.row(self.0.rows() - 1)
    }
}

/// Pure forward over plain matrices.
pub fn transformer_forward(
    input: &Matrix,
    params: &TransformerParams,
    extra_positional: bool,
) -> Result<InterestStates> {
    if input.rows() == 0 {
        return Err(Error::invalid("transformer input has no rows"));
    }
    if input.cols() != params.w_in.rows() {
        return Err(Error::invalid(format!(
            "transformer input width {} does not match projection {}",
            input.cols(),
            params.w_in.rows()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let nodes = TransformerNodes::register(params, &mut tape);
    let out = transformer_forward_tape(&mut tape, x, &nodes, extra_positional);
    Ok(InterestStates(tape.value(out).clone()))
}
