//! VAE generation head: latent encoding with reparameterized sampling and a
//! decoder with content, score and class outputs.

use crate::error::{Error, Result};
use crate::labels::one_hot_class;
use crate::numerics::{kl_diag_gaussian, Matrix, NodeId, Rng, Tape};

/// Lower bound on sigma after softplus, keeps the KL term finite.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Candidate item: feature vector in the modality-block layout plus labels.
#[derive(Clone, Debug)]
pub struct CandidateItem {
    pub item_id: String,
    /// Concatenated present-modality embeddings, zero-filled, width d_cand.
    pub features: Vec<f64>,
    pub score_label: f64,
    pub class_label: usize,
}

/// Decoder output: content embedding, scalar score and class distribution.
#[derive(Clone, Debug)]
pub struct GeneratedOutput {
    pub content: Vec<f64>,
    pub score: f64,
    pub class_logits: Vec<f64>,
    pub class_probs: Vec<f64>,
}

impl GeneratedOutput {
    pub fn predicted_class(&self) -> usize {
        self.class_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Latent heads plus the decoder stack.
#[derive(Clone, Debug)]
pub struct VaeParams {
    pub w_mu: Matrix,
    pub b_mu: Matrix,
    pub w_sigma: Matrix,
    pub b_sigma: Matrix,
    pub w_hidden: Matrix,
    pub b_hidden: Matrix,
    pub w_content: Matrix,
    pub b_content: Matrix,
    pub w_score: Matrix,
    pub b_score: Matrix,
    pub w_class: Matrix,
    pub b_class: Matrix,
}

fn init_weight(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

impl VaeParams {
    pub fn init(
        d_model: usize,
        d_latent: usize,
        d_cand: usize,
        d_hidden: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            w_mu: init_weight(rng, d_model, d_latent),
            b_mu: Matrix::zeros(1, d_latent),
            w_sigma: init_weight(rng, d_model, d_latent),
            b_sigma: Matrix::zeros(1, d_latent),
            w_hidden: init_weight(rng, d_latent + d_cand, d_hidden),
            b_hidden: Matrix::zeros(1, d_hidden),
            w_content: init_weight(rng, d_hidden, d_cand),
            b_content: Matrix::zeros(1, d_cand),
            w_score: init_weight(rng, d_hidden, 1),
            b_score: Matrix::zeros(1, 1),
            w_class: init_weight(rng, d_hidden, classes),
            b_class: Matrix::zeros(1, classes),
        }
    }

    pub fn d_latent(&self) -> usize {
        self.w_mu.cols()
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("vae.w_mu".into(), &self.w_mu),
            ("vae.b_mu".into(), &self.b_mu),
            ("vae.w_sigma".into(), &self.w_sigma),
            ("vae.b_sigma".into(), &self.b_sigma),
            ("vae.w_hidden".into(), &self.w_hidden),
            ("vae.b_hidden".into(), &self.b_hidden),
            ("vae.w_content".into(), &self.w_content),
            ("vae.b_content".into(), &self.b_content),
            ("vae.w_score".into(), &self.w_score),
            ("vae.b_score".into(), &self.b_score),
            ("vae.w_class".into(), &self.w_class),
            ("vae.b_class".into(), &self.b_class),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("vae.w_mu".into(), &mut self.w_mu),
            ("vae.b_mu".into(), &mut self.b_mu),
            ("vae.w_sigma".into(), &mut self.w_sigma),
            ("vae.b_sigma".into(), &mut self.b_sigma),
            ("vae.w_hidden".into(), &mut self.w_hidden),
            ("vae.b_hidden".into(), &mut self.b_hidden),
            ("vae.w_content".into(), &mut self.w_content),
            ("vae.b_content".into(), &mut self.b_content),
            ("vae.w_score".into(), &mut self.w_score),
            ("vae.b_score".into(), &mut self.b_score),
            ("vae.w_class".into(), &mut self.w_class),
            ("vae.b_class".into(), &mut self.b_class),
        ]
    }
}

/// Tape handles for [`VaeParams`].
#[derive(Clone, Copy, Debug)]
pub struct VaeNodes {
    pub w_mu: NodeId,
    pub b_mu: NodeId,
    pub w_sigma: NodeId,
    pub b_sigma: NodeId,
    pub w_hidden: NodeId,
    pub b_hidden: NodeId,
    pub w_content: NodeId,
    pub b_content: NodeId,
    pub w_score: NodeId,
    pub b_score: NodeId,
    pub w_class: NodeId,
    pub b_class: NodeId,
}

impl VaeNodes {
    pub fn register(params: &VaeParams, tape: &mut Tape) -> Self {
        Self {
            w_mu: tape.input(params.w_mu.clone()),
            b_mu: tape.input(params.b_mu.clone()),
            w_sigma: tape.input(params.w_sigma.clone()),
            b_sigma: tape.input(params.b_sigma.clone()),
            w_hidden: tape.input(params.w_hidden.clone()),
            b_hidden: tape.input(params.b_hidden.clone()),
            w_content: tape.input(params.w_content.clone()),
            b_content: tape.input(params.b_content.clone()),
            w_score: tape.input(params.w_score.clone()),
            b_score: tape.input(params.b_score.clone()),
            w_class: tape.input(params.w_class.clone()),
            b_class: tape.input(params.b_class.clone()),
        }
    }
}

/// mu = W_mu z + b_mu, sigma = max(softplus(W_sigma z + b_sigma), floor).
pub fn encode_latent_tape(tape: &mut Tape, z_final: NodeId, nodes: &VaeNodes) -> (NodeId, NodeId) {
    let mu_lin = tape.matmul(z_final, nodes.w_mu);
    let mu = tape.add_bias(mu_lin, nodes.b_mu);
    let sig_lin = tape.matmul(z_final, nodes.w_sigma);
    let sig_aff = tape.add_bias(sig_lin, nodes.b_sigma);
    let sig_sp = tape.softplus(sig_aff);
    let sigma = tape.clamp_min(sig_sp, SIGMA_FLOOR);
    (mu, sigma)
}

pub fn encode_latent(z_final: &[f64], params: &VaeParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if z_final.len() != params.w_mu.rows() {
        return Err(Error::invalid(format!(
            "latent input width {} does not match W_mu rows {}",
            z_final.len(),
            params.w_mu.rows()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.input(Matrix::row_vector(z_final));
    let nodes = VaeNodes::register(params, &mut tape);
    let (mu, sigma) = encode_latent_tape(&mut tape, z, &nodes);
    Ok((
        tape.value(mu).row(0).to_vec(),
        tape.value(sigma).row(0).to_vec(),
    ))
}

/// l = mu + sigma (.) eps on the tape; eps enters as a constant input.
pub fn reparameterize_tape(tape: &mut Tape, mu: NodeId, sigma: NodeId, eps: NodeId) -> NodeId {
    let noise = tape.mul(sigma, eps);
    tape.add(mu, noise)
}

/// Sampled latent; with the same generator state the draw is reproducible.
pub fn reparameterize(mu: &[f64], sigma: &[f64], rng: &mut Rng) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| m + s * rng.next_normal())
        .collect()
}

/// Deterministic inference latent (eps = 0): exactly mu.
pub fn reparameterize_deterministic(mu: &[f64]) -> Vec<f64> {
    mu.to_vec()
}

/// Decoder on the tape: tanh hidden layer over [latent (+) candidate], then
/// content / score / class-logit heads. Returns (content, score, logits, probs).
pub fn decode_tape(
    tape: &mut Tape,
    latent: NodeId,
    candidate: NodeId,
    nodes: &VaeNodes,
) -> (NodeId, NodeId, NodeId, NodeId) {
    let joined = tape.concat_cols(&[latent, candidate]);
    let lin = tape.matmul(joined, nodes.w_hidden);
    let pre = tape.add_bias(lin, nodes.b_hidden);
    let hidden = tape.tanh(pre);

    let content_lin = tape.matmul(hidden, nodes.w_content);
    let content = tape.add_bias(content_lin, nodes.b_content);
    let score_lin = tape.matmul(hidden, nodes.w_score);
    let score = tape.add_bias(score_lin, nodes.b_score);
    let class_lin = tape.matmul(hidden, nodes.w_class);
    let logits = tape.add_bias(class_lin, nodes.b_class);
    let probs = tape.softmax_rows(logits, false);
    (content, score, logits, probs)
}

pub fn decode(latent: &[f64], candidate: &[f64], params: &VaeParams) -> Result<GeneratedOutput> {
    if latent.len() + candidate.len() != params.w_hidden.rows() {
        return Err(Error::invalid(format!(
            "decoder input {} + {} does not match W_hidden rows {}",
            latent.len(),
            candidate.len(),
            params.w_hidden.rows()
        )));
    }
    let mut tape = Tape::new();
    let l = tape.input(Matrix::row_vector(latent));
    let c = tape.input(Matrix::row_vector(candidate));
    let nodes = VaeNodes::register(params, &mut tape);
    let (content, score, logits, probs) = decode_tape(&mut tape, l, c, &nodes);
    Ok(GeneratedOutput {
        content: tape.value(content).row(0).to_vec(),
        score: tape.value(score).item(),
        class_logits: tape.value(logits).row(0).to_vec(),
        class_probs: tape.value(probs).row(0).to_vec(),
    })
}

/// KL(N(mu, diag sigma^2) || N(0, I)) on the tape:
/// 1/2 sum(sigma^2 + mu^2 - 1 - 2 ln sigma).
pub fn kl_tape(tape: &mut Tape, mu: NodeId, sigma: NodeId) -> NodeId {
    let s2 = tape.mul(sigma, sigma);
    let m2 = tape.mul(mu, mu);
    let ln_s = tape.ln(sigma);
    let quad = tape.add(s2, m2);
    let log_term = tape.affine(ln_s, -2.0, -1.0);
    let summed_terms = tape.add(quad, log_term);
    let total = tape.sum_all(summed_terms);
    tape.scale(total, 0.5)
}

/// Squared-error reconstruction plus KL, the minimized negative ELBO.
pub fn vae_loss_tape(
    tape: &mut Tape,
    content: NodeId,
    target: NodeId,
    mu: NodeId,
    sigma: NodeId,
) -> NodeId {
    let diff = tape.sub(content, target);
    let sq = tape.mul(diff, diff);
    let recon = tape.sum_all(sq);
    let kl = kl_tape(tape, mu, sigma);
    tape.add(recon, kl)
}

/// L_VAE = ||content - target||^2 + KL(N(mu, sigma^2) || N(0, I)).
pub fn vae_loss(
    output: &GeneratedOutput,
    target_content: &[f64],
    mu: &[f64],
    sigma: &[f64],
) -> Result<f64> {
    if output.content.len() != target_content.len() {
        return Err(Error::invalid(format!(
            "reconstruction target width {} does not match content {}",
            target_content.len(),
            output.content.len()
        )));
    }
    let recon: f64 = output
        .content
        .iter()
        .zip(target_content)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(recon + kl_diag_gaussian(mu, sigma)?)
}

/// Cross-entropy of the one-hot class target against softmax class probs,
/// with the log clamped at 1e-12.
pub fn class_cross_entropy(probs: &[f64], class: usize) -> Result<f64> {
    let target = one_hot_class(class, probs.len())?;
    Ok(-target
        .iter()
        .zip(probs)
        .map(|(y, p)| y * p.max(1e-12).ln())
        .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, gradient_relative_error};

    fn tiny(rng: &mut Rng) -> VaeParams {
        VaeParams::init(4, 3, 5, 6, 3, rng)
    }

    #[test]
    fn zero_weights_give_zero_mu_and_ln2_sigma() {
        let mut p = tiny(&mut Rng::new(31));
        for (_, m) in p.tensors_mut() {
            for v in m.as_mut_slice() {
                *v = 0.0;
            }
        }
        let (mu, sigma) = encode_latent(&[1.0, -2.0, 3.0, 0.5], &p).unwrap();
        assert_eq!(mu, vec![0.0, 0.0, 0.0]);
        for s in sigma {
            assert!((s - 0.6931471805599453).abs() < 1e-15);
        }
    }

    #[test]
    fn sigma_positive_and_mu_linear() {
        let mut rng = Rng::new(32);
        let p = tiny(&mut rng);
        for _ in 0..20 {
            let z: Vec<f64> = (0..4).map(|_| rng.uniform_range(-30.0, 30.0)).collect();
            let (_, sigma) = encode_latent(&z, &p).unwrap();
            assert!(sigma.iter().all(|&s| s > 0.0));
        }
        // biases are zero after init, so mu is linear in z
        let z = vec![0.5, 1.0, -1.0, 2.0];
        let (mu, _) = encode_latent(&z, &p).unwrap();
        let doubled: Vec<f64> = z.iter().map(|x| 2.0 * x).collect();
        let (mu2, _) = encode_latent(&doubled, &p).unwrap();
        for (a, b) in mu2.iter().zip(&mu) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterize_modes() {
        let mu = vec![1.0, -2.0];
        let sigma = vec![0.5, 0.1];
        assert_eq!(reparameterize_deterministic(&mu), mu);
        let a = reparameterize(&mu, &sigma, &mut Rng::new(5));
        let b = reparameterize(&mu, &sigma, &mut Rng::new(5));
        assert_eq!(a, b);
        assert_ne!(a, mu);
        // degenerate scale collapses to mu
        let tiny_sigma = vec![1e-300, 1e-300];
        let c = reparameterize(&mu, &tiny_sigma, &mut Rng::new(5));
        for (x, m) in c.iter().zip(&mu) {
            assert!((x - m).abs() < 1e-290);
        }
    }

    #[test]
    fn decode_is_pure_and_probs_normalized() {
        let mut rng = Rng::new(33);
        let p = tiny(&mut rng);
        let latent = vec![0.1, 0.2, -0.3];
        let cand = vec![0.5; 5];
        let a = decode(&latent, &cand, &p).unwrap();
        let b = decode(&latent, &cand, &p).unwrap();
        assert_eq!(a.content, b.content);
        assert_eq!(a.score, b.score);
        assert!((a.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(decode(&latent[..2], &cand, &p).is_err());
    }

    #[test]
    fn vae_loss_cases() {
        let out = GeneratedOutput {
            content: vec![1.0, 2.0],
            score: 0.0,
            class_logits: vec![0.0; 3],
            class_probs: vec![1.0 / 3.0; 3],
        };
        // perfect reconstruction at the prior
        assert_eq!(
            vae_loss(&out, &[1.0, 2.0], &[0.0], &[1.0]).unwrap(),
            0.0
        );
        // error of 2 in one coordinate
        assert_eq!(
            vae_loss(&out, &[3.0, 2.0], &[0.0], &[1.0]).unwrap(),
            4.0
        );
        let l = vae_loss(&out, &[0.9, 2.2], &[0.3], &[1.4]).unwrap();
        assert!(l >= 0.0);
    }

    #[test]
    fn class_cross_entropy_uniform() {
        let probs = vec![0.25; 4];
        let ce = class_cross_entropy(&probs, 2).unwrap();
        assert!((ce - 1.3862943611198906).abs() < 1e-12);
        assert!(class_cross_entropy(&probs, 4).is_err());
    }

    #[test]
    fn full_head_gradients_match_finite_differences() {
        let mut rng = Rng::new(34);
        let p = tiny(&mut rng);
        let z_final = Matrix::row_vector(&[0.4, -0.2, 0.7, 0.1]);
        let cand = Matrix::row_vector(&[0.3, -0.5, 0.2, 0.9, -0.1]);
        let eps = Matrix::row_vector(&[0.37, -1.2, 0.05]);

        let loss_of = |p: &VaeParams| -> (Tape, VaeNodes, NodeId) {
            let mut tape = Tape::new();
            let nodes = VaeNodes::register(p, &mut tape);
            let z = tape.input(z_final.clone());
            let c = tape.input(cand.clone());
            let e = tape.input(eps.clone());
            let (mu, sigma) = encode_latent_tape(&mut tape, z, &nodes);
            let latent = reparameterize_tape(&mut tape, mu, sigma, e);
            let (content, score, _logits, probs) = decode_tape(&mut tape, latent, c, &nodes);
            let l_vae = vae_loss_tape(&mut tape, content, c, mu, sigma);
            let sq = tape.mul(score, score);
            let lp = tape.ln_clamped(probs, 1e-12);
            let pick = tape.slice_cols(lp, 1, 1);
            let ce = tape.scale(pick, -1.0);
            let partial = tape.add(l_vae, ce);
            let s = tape.sum_all(sq);
            let loss = tape.add(partial, s);
            (tape, nodes, loss)
        };

        let (tape, nodes, loss) = loss_of(&p);
        let grads = tape.backward(loss);
        let ids = [
            nodes.w_mu,
            nodes.b_mu,
            nodes.w_sigma,
            nodes.b_sigma,
            nodes.w_hidden,
            nodes.b_hidden,
            nodes.w_content,
            nodes.b_content,
            nodes.w_score,
            nodes.b_score,
            nodes.w_class,
            nodes.b_class,
        ];
        let mut analytic = Vec::new();
        for id in ids {
            analytic.extend(grads.get(id).as_slice());
        }

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
    }
}
