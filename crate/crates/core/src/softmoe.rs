//! Soft mixture-of-experts fusion.
//!
//! Every token is processed by every expert and the results are mixed with
//! softmax gate weights: `q~_i = sum_m w_i^m E_m(q_i)`. The fusion block
//! wraps that in pre-normalisation and a residual connection,
//! `q + moe(norm(q))`, and a load-balancing regulariser
//! `M * sum_m mean_i(w_i^m) * (n_m / N)` discourages gate collapse. The hard
//! counts `n_m` are argmax assignments (lowest index wins ties) and are
//! excluded from the gradient; only the soft factor is differentiable.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Expert activation; each choice has an exact derivative so gradient
/// verification stays tight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Smooth ramp ln(1 + e^x); the default.
    Softplus,
    Tanh,
}

impl Activation {
    fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        match self {
            // tanh = 1 - 2 sigmoid(-2x) is not a primitive op; compose it
            // from exp/div so the adjoint falls out of the tape.
            Activation::Softplus => tape.softplus(x),
            Activation::Tanh => {
                let e = tape.exp(&tape.scale(x, -2.0)?)?;
                let num = tape.sub(&Tensor::scalar(1.0)?, &e)?;
                let den = tape.add(&Tensor::scalar(1.0)?, &e)?;
                tape.div(&num, &den)
            }
        }
    }
}

/// One feed-forward expert: linear(d -> h), activation, linear(h -> d).
#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Gate, experts and pre-MoE normalisation parameters.
#[derive(Clone, Debug)]
pub struct MoEParams {
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    pub experts: Vec<ExpertParams>,
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
    pub activation: Activation,
}

impl MoEParams {
    /// Hidden width is 4x the token dimension.
    pub fn hidden_dim(dim: usize) -> usize {
        4 * dim
    }

    pub fn init<R: Rng>(dim: usize, experts: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("expert count must be >= 1".into()));
        }
        let h = Self::hidden_dim(dim);
        let gate_std = 1.0 / (dim as f64).sqrt();
        let w1_std = 1.0 / (dim as f64).sqrt();
        // Small output-layer init keeps the residual stream encoder-dominated
        // at the start of training.
        let w2_std = 0.1 / (h as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut sample = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| normal.sample(rng) * std).collect()
        };
        let gate_w = Tensor::matrix(dim, experts, sample(dim * experts, gate_std))?;
        let gate_b = Tensor::zeros(&[experts]);
        let expert_params = (0..experts)
            .map(|_| {
                Ok(ExpertParams {
                    w1: Tensor::matrix(dim, h, sample(dim * h, w1_std))?,
                    b1: Tensor::zeros(&[h]),
                    w2: Tensor::matrix(h, dim, sample(h * dim, w2_std))?,
                    b2: Tensor::zeros(&[dim]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoEParams {
            gate_w,
            gate_b,
            experts: expert_params,
            norm_scale: Tensor::new(vec![dim], vec![1.0; dim])?,
            norm_shift: Tensor::zeros(&[dim]),
            activation,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn token_dim(&self) -> usize {
        self.gate_w.shape()[0]
    }

    /// Copy with every tensor registered as a tracked leaf on `tape`.
    pub fn tracked(&self, tape: &Tape) -> MoEParams {
        MoEParams {
            gate_w: tape.var(&self.gate_w),
            gate_b: tape.var(&self.gate_b),
            experts: self
                .experts
                .iter()
                .map(|e| ExpertParams {
                    w1: tape.var(&e.w1),
                    b1: tape.var(&e.b1),
                    w2: tape.var(&e.w2),
                    b2: tape.var(&e.b2),
                })
                .collect(),
            norm_scale: tape.var(&self.norm_scale),
            norm_shift: tape.var(&self.norm_shift),
            activation: self.activation,
        }
    }
}

/// A batch of fused query tokens, `[N, d]`.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Tensor,
}

impl TokenBatch {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "token batch must be [N, d], got {:?}",
                tokens.shape()
            )));
        }
        Ok(TokenBatch { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Mixed tokens plus the gate state the regulariser needs.
#[derive(Clone, Debug)]
pub struct MoEOutput {
    /// Updated tokens `q~`, `[N, d]`.
    pub tokens: Tensor,
    /// Soft gate weights, `[N, M]`, rows summing to 1.
    pub weights: Tensor,
    /// Hard argmax counts per expert (lowest index wins ties); sum to N.
    pub counts: Vec<usize>,
}

/// Softmax gate weights for every token, `[N, M]`.
pub fn gate_weights(tape: &Tape, q: &TokenBatch, p: &MoEParams) -> Result<Tensor> {
    if q.dim() != p.token_dim() {
        return Err(Error::Shape(format!(
            "token dim {} does not match gate input dim {}",
            q.dim(),
            p.token_dim()
        )));
    }
    let logits = tape.add(&tape.matmul(&q.tokens, &p.gate_w)?, &p.gate_b)?;
    tape.softmax(&logits)
}

fn argmax_counts(weights: &Tensor) -> Vec<usize> {
    let m = weights.shape()[1];
    let mut counts = vec![0usize; m];
    for row in weights.data().chunks(m) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        counts[best] += 1;
    }
    counts
}

/// Soft expert mixing: every token runs through every expert and the results
/// are combined with the gate weights.
pub fn moe_forward(tape: &Tape, q: &TokenBatch, p: &MoEParams) -> Result<MoEOutput> {
    let weights = gate_weights(tape, q, p)?;
    let m = p.expert_count();

    let mut mixed: Option<Tensor> = None;
    for (idx, expert) in p.experts.iter().enumerate() {
        let hidden = tape.add(&tape.matmul(&q.tokens, &expert.w1)?, &expert.b1)?;
        let act = p.activation.apply(tape, &hidden)?;
        let out = tape.add(&tape.matmul(&act, &expert.w2)?, &expert.b2)?;
        // Column idx of the gate as an [N, 1] factor.
        let mut select = vec![0.0; m];
        select[idx] = 1.0;
        let col = tape.matmul(&weights, &Tensor::matrix(m, 1, select)?)?;
        let contrib = tape.mul(&out, &col)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(&acc, &contrib)?,
            None => contrib,
        });
    }
    let tokens = mixed.expect("at least one expert");
    let counts = argmax_counts(&weights);
    Ok(MoEOutput { tokens, weights, counts })
}

/// Load-balancing regulariser `M * sum_m mean_i(w_i^m) * (n_m / N)`. The
/// counts enter as constants; gradient flows through the soft factor only.
pub fn load_balance_loss(tape: &Tape, out: &MoEOutput) -> Result<Tensor> {
    let m = out.weights.shape()[1];
    let n: usize = out.counts.iter().sum();
    let col_means = tape.mean_last(&tape.transpose(&out.weights)?)?; // [M]
    let fracs: Vec<f64> = out.counts.iter().map(|&c| c as f64 / n as f64).collect();
    let fracs = Tensor::vector(&fracs)?;
    let dot = tape.sum_all(&tape.mul(&col_means, &fracs)?)?;
    tape.scale(&dot, m as f64)
}

/// Per-token zero-mean unit-variance normalisation with learned scale/shift.
pub fn layer_norm(tape: &Tape, tokens: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let n = tokens.shape()[0];
    let mu = tape.reshape(&tape.mean_last(tokens)?, &[n, 1])?;
    let centered = tape.sub(tokens, &mu)?;
    let var = tape.reshape(&tape.mean_last(&tape.square(&centered)?)?, &[n, 1])?;
    let std = tape.sqrt(&tape.add_scalar(&var, 1e-8)?)?;
    let normed = tape.div(&centered, &std)?;
    tape.add(&tape.mul(&normed, scale)?, shift)
}

/// Residual fusion block: `q + moe(norm(q))`.
pub fn fusion_block(tape: &Tape, q: &TokenBatch, p: &MoEParams) -> Result<(TokenBatch, MoEOutput)> {
    let normed = layer_norm(tape, &q.tokens, &p.norm_scale, &p.norm_shift)?;
    let moe = moe_forward(tape, &TokenBatch::new(normed)?, p)?;
    let fused = tape.add(&q.tokens, &moe.tokens)?;
    Ok((TokenBatch::new(fused)?, moe))
}

/// Total objective `L_task + beta * L_balance`.
pub fn total_loss(tape: &Tape, task: &Tensor, balance: &Tensor, beta: f64) -> Result<Tensor> {
    if task.len() != 1 || balance.len() != 1 {
        return Err(Error::Shape("total_loss expects scalar terms".into()));
    }
    if beta == 0.0 {
        return Ok(task.clone());
    }
    tape.add(task, &tape.scale(balance, beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn params(dim: usize, experts: usize, seed: u64) -> MoEParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        MoEParams::init(dim, experts, Activation::Softplus, &mut rng).unwrap()
    }

    fn tokens(n: usize, d: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        TokenBatch::new(Tensor::matrix(n, d, data).unwrap()).unwrap()
    }

    use rand::Rng;

    #[test]
    fn zero_gate_gives_uniform_rows() {
        let mut p = params(4, 3, 1);
        p.gate_w = Tensor::zeros(&[4, 3]);
        p.gate_b = Tensor::zeros(&[3]);
        let tape = Tape::new();
        let w = gate_weights(&tape, &tokens(5, 4, 2), &p).unwrap();
        for v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_logit_saturates_row() {
        let mut p = params(2, 3, 3);
        p.gate_w = Tensor::zeros(&[2, 3]);
        p.gate_b = Tensor::vector(&[1000.0, 0.0, 0.0]).unwrap();
        let tape = Tape::new();
        let w = gate_weights(&tape, &tokens(2, 2, 4), &p).unwrap();
        for row in w.data().chunks(3) {
            assert!((row[0] - 1.0).abs() < 1e-12);
            assert!(row[1] < 1e-12 && row[2] < 1e-12);
        }
    }

    #[test]
    fn gate_rows_sum_to_one() {
        let p = params(6, 4, 5);
        let tape = Tape::new();
        let w = gate_weights(&tape, &tokens(9, 6, 6), &p).unwrap();
        for row in w.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_expert_weight_is_forced_to_one() {
        let p = params(4, 1, 7);
        let q = tokens(6, 4, 8);
        let tape = Tape::new();
        let out = moe_forward(&tape, &q, &p).unwrap();
        for &w in out.weights.data() {
            assert_eq!(w, 1.0);
        }
        // q~ must equal E_1(q) exactly.
        let hidden = tape
            .add(&tape.matmul(&q.tokens, &p.experts[0].w1).unwrap(), &p.experts[0].b1)
            .unwrap();
        let act = tape.softplus(&hidden).unwrap();
        let expect = tape
            .add(&tape.matmul(&act, &p.experts[0].w2).unwrap(), &p.experts[0].b2)
            .unwrap();
        for (a, b) in out.tokens.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(out.counts, vec![6]);
    }

    #[test]
    fn one_hot_gate_selects_single_expert() {
        let mut p = params(3, 4, 9);
        p.gate_w = Tensor::zeros(&[3, 4]);
        p.gate_b = Tensor::vector(&[0.0, 0.0, 2000.0, 0.0]).unwrap();
        let q = tokens(5, 3, 10);
        let tape = Tape::new();
        let out = moe_forward(&tape, &q, &p).unwrap();
        let hidden = tape
            .add(&tape.matmul(&q.tokens, &p.experts[2].w1).unwrap(), &p.experts[2].b1)
            .unwrap();
        let act = tape.softplus(&hidden).unwrap();
        let expect = tape
            .add(&tape.matmul(&act, &p.experts[2].w2).unwrap(), &p.experts[2].b2)
            .unwrap();
        for (a, b) in out.tokens.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.counts, vec![0, 0, 5, 0]);
    }

    #[test]
    fn matches_double_loop_oracle() {
        // Naive per-token, per-expert reference implementation.
        let p = params(4, 3, 11);
        let q = tokens(5, 4, 12);
        let tape = Tape::new();
        let out = moe_forward(&tape, &q, &p).unwrap();

        let (n, d) = (5, 4);
        let h = MoEParams::hidden_dim(d);
        for i in 0..n {
            let tok = &q.tokens.data()[i * d..(i + 1) * d];
            // Gate logits and softmax for this token.
            let mut logits = vec![0.0; 3];
            for mm in 0..3 {
                let mut acc = p.gate_b.data()[mm];
                for k in 0..d {
                    acc += tok[k] * p.gate_w.data()[k * 3 + mm];
                }
                logits[mm] = acc;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let es: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let es_sum: f64 = es.iter().sum();
            let mut expect = vec![0.0; d];
            for (mm, expert) in p.experts.iter().enumerate() {
                let w = es[mm] / es_sum;
                let mut hid = vec![0.0; h];
                for j in 0..h {
                    let mut acc = expert.b1.data()[j];
                    for k in 0..d {
                        acc += tok[k] * expert.w1.data()[k * h + j];
                    }
                    hid[j] = if acc > 30.0 { acc } else { acc.exp().ln_1p() };
                }
                for j in 0..d {
                    let mut acc = expert.b2.data()[j];
                    for k in 0..h {
                        acc += hid[k] * expert.w2.data()[k * d + j];
                    }
                    expect[j] += w * acc;
                }
            }
            for (a, b) in out.tokens.data()[i * d..(i + 1) * d].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn balance_loss_uniform_is_one() {
        for m in [2usize, 6, 8] {
            let n = 2 * m;
            let weights = Tensor::matrix(n, m, vec![1.0 / m as f64; n * m]).unwrap();
            // Uniform hard counts to match.
            let counts = vec![2usize; m];
            let out = MoEOutput { tokens: Tensor::zeros(&[n, 1]), weights, counts };
            let tape = Tape::new();
            let loss = load_balance_loss(&tape, &out).unwrap();
            assert!((loss.scalar_value().unwrap() - 1.0).abs() < 1e-9, "M={m}");
        }
    }

    #[test]
    fn balance_loss_collapsed_is_m() {
        let (n, m) = (12usize, 6usize);
        let mut w = vec![0.0; n * m];
        for i in 0..n {
            w[i * m] = 1.0;
        }
        let mut counts = vec![0usize; m];
        counts[0] = n;
        let out = MoEOutput {
            tokens: Tensor::zeros(&[n, 1]),
            weights: Tensor::matrix(n, m, w).unwrap(),
            counts,
        };
        let tape = Tape::new();
        let loss = load_balance_loss(&tape, &out).unwrap();
        assert!((loss.scalar_value().unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn balance_loss_at_least_one_when_means_equal_fracs() {
        // When the column means equal the count fractions the loss is
        // M * sum f_m^2 >= 1 by Cauchy-Schwarz, with equality at uniform.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..200 {
            let m = rng.gen_range(2..=8);
            let mut f: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = f.iter().sum();
            for v in &mut f {
                *v /= s;
            }
            let loss: f64 = m as f64 * f.iter().map(|v| v * v).sum::<f64>();
            assert!(loss >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn zero_output_experts_make_fusion_identity() {
        let mut p = params(4, 3, 14);
        for e in &mut p.experts {
            e.w2 = Tensor::zeros(&[16, 4]);
            e.b2 = Tensor::zeros(&[4]);
        }
        let q = tokens(5, 4, 15);
        let tape = Tape::new();
        let (fused, _) = fusion_block(&tape, &q, &p).unwrap();
        assert_eq!(fused.tokens.data(), q.tokens.data());
    }

    #[test]
    fn fusion_preserves_shape() {
        for (n, d) in [(1usize, 2usize), (7, 5), (16, 8)] {
            let p = params(d, 3, 16);
            let q = tokens(n, d, 17);
            let tape = Tape::new();
            let (fused, _) = fusion_block(&tape, &q, &p).unwrap();
            assert_eq!(fused.tokens.shape(), &[n, d]);
        }
    }

    #[test]
    fn token_permutation_equivariance() {
        let p = params(4, 3, 18);
        let q = tokens(6, 4, 19);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pdata = vec![0.0; 24];
        for (new_i, &old_i) in perm.iter().enumerate() {
            pdata[new_i * 4..(new_i + 1) * 4]
                .copy_from_slice(&q.tokens.data()[old_i * 4..(old_i + 1) * 4]);
        }
        let qp = TokenBatch::new(Tensor::matrix(6, 4, pdata).unwrap()).unwrap();

        let tape = Tape::new();
        let (fused, moe) = fusion_block(&tape, &q, &p).unwrap();
        let (fused_p, moe_p) = fusion_block(&tape, &qp, &p).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for k in 0..4 {
                let a = fused_p.tokens.data()[new_i * 4 + k];
                let b = fused.tokens.data()[old_i * 4 + k];
                assert!((a - b).abs() < 1e-12);
            }
        }
        let tape2 = Tape::new();
        let bal = load_balance_loss(&tape2, &moe).unwrap().scalar_value().unwrap();
        let tape3 = Tape::new();
        let bal_p = load_balance_loss(&tape3, &moe_p).unwrap().scalar_value().unwrap();
        assert!((bal - bal_p).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let tape = Tape::new();
        let task = Tensor::scalar(0.5).unwrap();
        let balance = Tensor::scalar(1.0).unwrap();
        let t0 = total_loss(&tape, &task, &balance, 0.0).unwrap();
        assert_eq!(t0.scalar_value().unwrap(), 0.5);
        let t = total_loss(&tape, &task, &balance, 0.01).unwrap();
        assert!((t.scalar_value().unwrap() - 0.51).abs() < 1e-15);
    }

    #[test]
    fn counts_tie_break_to_lowest_index() {
        let weights = Tensor::matrix(2, 3, vec![0.4, 0.4, 0.2, 0.2, 0.4, 0.4]).unwrap();
        assert_eq!(argmax_counts(&weights), vec![1, 1, 0]);
    }
}
