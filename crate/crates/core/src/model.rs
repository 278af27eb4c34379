//! The end-to-end model: linear encoders into tangent space, the soft-MoE
//! fusion block over the stacked text+image tokens, hyperbolic projection,
//! and the combined objective.
//!
//! Pipeline per batch of B raw pairs:
//! features -> encoders -> [2B, n] token stack -> fusion block ->
//! split back into text/image tangents -> exponential map -> alignment
//! losses, plus the load-balancing term from the fusion gate.
//!
//! In the Euclidean ablation the exponential map is the identity and the
//! contrastive similarity is cosine; the entailment term is zero because the
//! cone construction is hyperbolic.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::entailment::{
    contrastive_loss, entailment_loss, temperature, AlignmentBatch, ConeConfig,
};
use crate::error::{Error, Result};
use crate::lorentz::{exp_map_space, Curvature};
use crate::softmoe::{fusion_block, load_balance_loss, total_loss, Activation, MoEParams, TokenBatch};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Encoder weights initialise at this multiple of 1/sqrt(feature_dim).
const ENCODER_INIT_SCALE: f64 = 0.5;

/// Full trainable state plus the fixed objective hyperparameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub text_w: Tensor,
    pub text_b: Tensor,
    pub image_w: Tensor,
    pub image_b: Tensor,
    pub moe: MoEParams,
    /// Log-parameterised contrastive temperature.
    pub log_tau: Tensor,
    pub cone: ConeConfig,
    pub beta: f64,
    pub euclidean: bool,
}

/// Loss components and gate diagnostics of one forward pass.
pub struct ForwardOutput {
    pub total: Tensor,
    pub contrastive: Tensor,
    pub entailment: Tensor,
    pub balance: Tensor,
    /// Mean over tokens of the gate-weight entropy, in [0, ln M].
    pub gate_entropy: f64,
}

/// Text/image embeddings of a record batch. In hyperbolic mode these are
/// spatial components of on-manifold points; in Euclidean mode, raw fused
/// tangent vectors.
pub struct Embeddings {
    pub text: Tensor,
    pub image: Tensor,
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        feature_dim: usize,
        embed_dim: usize,
        experts: usize,
        activation: Activation,
        cone: ConeConfig,
        beta: f64,
        euclidean: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if feature_dim == 0 || embed_dim == 0 {
            return Err(Error::Config("feature_dim and embed_dim must be >= 1".into()));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        let std = ENCODER_INIT_SCALE / (feature_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("normal");
        let mut mat = |r: usize, c: usize, rng: &mut R| -> Result<Tensor> {
            Tensor::matrix(r, c, (0..r * c).map(|_| normal.sample(rng)).collect())
        };
        let text_w = mat(feature_dim, embed_dim, rng)?;
        let image_w = mat(feature_dim, embed_dim, rng)?;
        let moe = MoEParams::init(embed_dim, experts, activation, rng)?;
        Ok(Model {
            text_w,
            text_b: Tensor::zeros(&[embed_dim]),
            image_w,
            image_b: Tensor::zeros(&[embed_dim]),
            moe,
            log_tau: Tensor::scalar(cone.tau_init.ln())?,
            cone,
            beta,
            euclidean,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.text_w.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.text_w.shape()[1]
    }

    pub fn curvature(&self) -> Curvature {
        self.cone.curvature
    }

    /// Canonical parameter names, fixed order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "text_encoder.weight".to_string(),
            "text_encoder.bias".to_string(),
            "image_encoder.weight".to_string(),
            "image_encoder.bias".to_string(),
            "moe.gate.weight".to_string(),
            "moe.gate.bias".to_string(),
        ];
        for m in 0..self.moe.expert_count() {
            names.push(format!("moe.expert{m}.w1"));
            names.push(format!("moe.expert{m}.b1"));
            names.push(format!("moe.expert{m}.w2"));
            names.push(format!("moe.expert{m}.b2"));
        }
        names.push("moe.norm.scale".to_string());
        names.push("moe.norm.shift".to_string());
        names.push("log_tau".to_string());
        names
    }

    /// Parameters in canonical order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.text_w,
            &self.text_b,
            &self.image_w,
            &self.image_b,
            &self.moe.gate_w,
            &self.moe.gate_b,
        ];
        for e in &self.moe.experts {
            out.push(&e.w1);
            out.push(&e.b1);
            out.push(&e.w2);
            out.push(&e.b2);
        }
        out.push(&self.moe.norm_scale);
        out.push(&self.moe.norm_shift);
        out.push(&self.log_tau);
        out
    }

    /// Mutable parameters in canonical order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.text_w,
            &mut self.text_b,
            &mut self.image_w,
            &mut self.image_b,
            &mut self.moe.gate_w,
            &mut self.moe.gate_b,
        ];
        for e in &mut self.moe.experts {
            out.push(&mut e.w1);
            out.push(&mut e.b1);
            out.push(&mut e.w2);
            out.push(&mut e.b2);
        }
        out.push(&mut self.moe.norm_scale);
        out.push(&mut self.moe.norm_shift);
        out.push(&mut self.log_tau);
        out
    }

    /// Copy with every parameter registered as a tracked leaf on `tape`, in
    /// canonical order (leaf ids align with `param_names`).
    pub fn tracked(&self, tape: &Tape) -> Model {
        Model {
            text_w: tape.var(&self.text_w),
            text_b: tape.var(&self.text_b),
            image_w: tape.var(&self.image_w),
            image_b: tape.var(&self.image_b),
            moe: self.moe.tracked(tape),
            log_tau: tape.var(&self.log_tau),
            cone: self.cone,
            beta: self.beta,
            euclidean: self.euclidean,
        }
    }

    /// Encode, fuse and project one batch of raw features into aligned
    /// embeddings. `text_feats` and `image_feats` are `[B, feature_dim]`.
    pub fn embed(
        &self,
        tape: &Tape,
        text_feats: &Tensor,
        image_feats: &Tensor,
    ) -> Result<(Embeddings, crate::softmoe::MoEOutput)> {
        if text_feats.shape().len() != 2
            || text_feats.shape() != image_feats.shape()
            || text_feats.shape()[1] != self.feature_dim()
        {
            return Err(Error::Shape(format!(
                "expected matching [B, {}] feature batches, got {:?} and {:?}",
                self.feature_dim(),
                text_feats.shape(),
                image_feats.shape()
            )));
        }
        let b = text_feats.shape()[0];
        let l_enc = tape.add(&tape.matmul(text_feats, &self.text_w)?, &self.text_b)?;
        let v_enc = tape.add(&tape.matmul(image_feats, &self.image_w)?, &self.image_b)?;
        let tokens = tape.concat_rows(&l_enc, &v_enc)?;
        let (fused, moe_out) = fusion_block(tape, &TokenBatch::new(tokens)?, &self.moe)?;
        let text_tan = tape.slice_rows(&fused.tokens, 0, b)?;
        let image_tan = tape.slice_rows(&fused.tokens, b, 2 * b)?;
        let emb = if self.euclidean {
            Embeddings { text: text_tan, image: image_tan }
        } else {
            Embeddings {
                text: exp_map_space(tape, &text_tan, self.curvature())?,
                image: exp_map_space(tape, &image_tan, self.curvature())?,
            }
        };
        Ok((emb, moe_out))
    }

    /// Full objective on one batch of raw pairs.
    pub fn forward(
        &self,
        tape: &Tape,
        text_feats: &Tensor,
        image_feats: &Tensor,
    ) -> Result<ForwardOutput> {
        let b = text_feats.shape().first().copied().unwrap_or(0);
        if b < 2 {
            return Err(Error::BatchTooSmall(format!(
                "forward needs a batch of >= 2 pairs, got {b}"
            )));
        }
        let (emb, moe_out) = self.embed(tape, text_feats, image_feats)?;
        let (cont, ent) = if self.euclidean {
            let logits = cosine_logits(tape, &emb.text, &emb.image, &self.log_tau)?;
            (
                crate::entailment::infonce_from_logits(tape, &logits)?,
                Tensor::scalar(0.0)?,
            )
        } else {
            let batch = AlignmentBatch::new(emb.text, emb.image, self.curvature())?;
            (
                contrastive_loss(tape, &batch, &self.log_tau)?,
                entailment_loss(tape, &batch, &self.cone)?,
            )
        };
        let task = if self.cone.lambda == 0.0 || self.euclidean {
            cont.clone()
        } else {
            tape.add(&cont, &tape.scale(&ent, self.cone.lambda)?)?
        };
        let balance = load_balance_loss(tape, &moe_out)?;
        let total = total_loss(tape, &task, &balance, self.beta)?;
        Ok(ForwardOutput {
            total,
            contrastive: cont,
            entailment: ent,
            balance,
            gate_entropy: gate_entropy(&moe_out.weights),
        })
    }
}

/// Cosine-similarity logits `cos(x_i, y_j) / tau` for the Euclidean ablation.
pub fn cosine_logits(
    tape: &Tape,
    x: &Tensor,
    y: &Tensor,
    log_tau: &Tensor,
) -> Result<Tensor> {
    let n = x.shape()[0];
    let m = y.shape()[0];
    let norm = |t: &Tensor, rows: usize| -> Result<Tensor> {
        let q = tape.reshape(&tape.sum_last(&tape.square(t)?)?, &[rows, 1])?;
        tape.sqrt(&tape.add_scalar(&q, 1e-12)?)
    };
    let xn = tape.div(x, &norm(x, n)?)?;
    let yn = tape.div(y, &norm(y, m)?)?;
    let sims = tape.matmul(&xn, &tape.transpose(&yn)?)?;
    let tau = temperature(tape, log_tau)?;
    tape.div(&sims, &tau)
}

/// Mean gate entropy over tokens, computed on plain values.
pub fn gate_entropy(weights: &Tensor) -> f64 {
    let m = weights.shape()[1];
    let mut total = 0.0;
    for row in weights.data().chunks(m) {
        let h: f64 = row
            .iter()
            .map(|&w| if w > 0.0 { -w * w.ln() } else { 0.0 })
            .sum();
        total += h;
    }
    total / (weights.len() / m) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_model(euclidean: bool, seed: u64) -> Model {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let cone = ConeConfig::with_defaults(Curvature::new(0.1).unwrap());
        Model::init(12, 8, 3, Activation::Softplus, cone, 0.01, euclidean, &mut rng).unwrap()
    }

    fn feature_batch(b: usize, f: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        (
            Tensor::matrix(b, f, draw(b * f)).unwrap(),
            Tensor::matrix(b, f, draw(b * f)).unwrap(),
        )
    }

    use rand::Rng;

    #[test]
    fn forward_is_deterministic_bitwise() {
        let model = small_model(false, 3);
        let (t, i) = feature_batch(4, 12, 5);
        let a = model.forward(&Tape::new(), &t, &i).unwrap();
        let b = model.forward(&Tape::new(), &t, &i).unwrap();
        assert_eq!(
            a.total.scalar_value().unwrap().to_bits(),
            b.total.scalar_value().unwrap().to_bits()
        );
    }

    #[test]
    fn forward_rejects_tiny_batches() {
        let model = small_model(false, 3);
        let (t, i) = feature_batch(1, 12, 5);
        assert!(matches!(
            model.forward(&Tape::new(), &t, &i),
            Err(Error::BatchTooSmall(_))
        ));
    }

    #[test]
    fn euclidean_mode_has_zero_entailment() {
        let model = small_model(true, 7);
        let (t, i) = feature_batch(4, 12, 9);
        let out = model.forward(&Tape::new(), &t, &i).unwrap();
        assert_eq!(out.entailment.scalar_value().unwrap(), 0.0);
        assert!(out.total.scalar_value().unwrap().is_finite());
    }

    #[test]
    fn gate_entropy_bounds() {
        let model = small_model(false, 11);
        let (t, i) = feature_batch(6, 12, 13);
        let out = model.forward(&Tape::new(), &t, &i).unwrap();
        let ln_m = (model.moe.expert_count() as f64).ln();
        assert!(out.gate_entropy >= 0.0 && out.gate_entropy <= ln_m + 1e-12);
    }

    #[test]
    fn full_gradient_passes_fd_check_at_init() {
        use crate::gradcheck::finite_difference_check;
        let model = small_model(false, 17);
        let (t, i) = feature_batch(4, 12, 19);
        let shapes: Vec<Vec<usize>> = model
            .param_tensors()
            .iter()
            .map(|p| p.shape().to_vec())
            .collect();
        let unflatten = |theta: &[f64]| -> Model {
            let mut m = model.clone();
            let mut off = 0;
            for (p, shape) in m.param_tensors_mut().into_iter().zip(&shapes) {
                let n: usize = shape.iter().product();
                *p = Tensor::new(shape.clone(), theta[off..off + n].to_vec()).unwrap();
                off += n;
            }
            m
        };
        let theta0: Vec<f64> = model
            .param_tensors()
            .iter()
            .flat_map(|p| p.data().to_vec())
            .collect();
        let eval = |theta: &[f64], grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let m = unflatten(theta);
            let tape = Tape::new();
            let tracked = m.tracked(&tape);
            let out = tracked.forward(&tape, &t, &i)?;
            let v = out.total.scalar_value()?;
            if grad {
                let grads = tape.backward(&out.total)?;
                let flat: Vec<f64> = tracked
                    .param_tensors()
                    .iter()
                    .flat_map(|p| grads.wrt_or_zeros(p).data().to_vec())
                    .collect();
                Ok((v, Some(flat)))
            } else {
                Ok((v, None))
            }
        };
        let report = finite_difference_check(
            |th| eval(th, false).map(|(f, _)| f),
            |th| eval(th, true).map(|(_, g)| g.unwrap()),
            &theta0,
            1e-6,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel err {} at {} (analytic {}, central {})",
            report.max_rel_error,
            report.worst_index,
            report.analytic_at_worst,
            report.central_at_worst
        );
    }
}
