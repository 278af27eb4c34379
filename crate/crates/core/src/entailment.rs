//! Entailment-cone alignment objectives.
//!
//! A text embedding `x` owns a cone of half-aperture
//! `aper(x) = arcsin(2K / (sqrt(c) ||x_space||))`; its paired image embedding
//! `y` should fall inside that cone. How far it falls outside is measured by
//! the exterior angle
//! `ext(x, y) = arccos((y_time + x_time c<x,y>_L) / (||x_space|| sqrt((c<x,y>_L)^2 - 1)))`,
//! penalised through the hinge `max(0, ext - aper)`. The contrastive term is
//! a symmetric InfoNCE over negative geodesic distances with a learnable
//! temperature, and the combined objective is `L_cont + lambda * L_ent`.
//!
//! All arcsin/arccos arguments are clamped to `[-1 + 1e-9, 1 - 1e-9]` before
//! the transcendental; gradients flow only through the pass-through region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lorentz::{
    Curvature, HyperboloidPoint, paired_inner, pairwise_distance, time_from_space_col,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Clamp band for inverse-trigonometric arguments.
pub const TRIG_CLAMP: f64 = 1e-9;
/// Learnable temperature is confined to this range.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;
/// Rows closer than this (squared spatial distance) count as a degenerate pair.
const DEGENERATE_TOL_SQ: f64 = 1e-24;

/// Cone and objective hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConeConfig {
    /// Boundary constant of the cone aperture near the origin.
    pub k: f64,
    /// Manifold curvature magnitude.
    pub curvature: Curvature,
    /// Weight of the entailment term in the combined objective.
    pub lambda: f64,
    /// Initial contrastive temperature (learned jointly, log-parameterised).
    pub tau_init: f64,
}

impl ConeConfig {
    pub fn new(k: f64, curvature: Curvature, lambda: f64, tau_init: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::Config(format!("cone constant K must be positive, got {k}")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(tau_init.is_finite() && tau_init > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {tau_init}")));
        }
        Ok(ConeConfig { k, curvature, lambda, tau_init })
    }

    pub fn with_defaults(curvature: Curvature) -> Self {
        ConeConfig { k: 0.1, curvature, lambda: 0.1, tau_init: 0.07 }
    }
}

/// A batch of aligned (text, image) points, stored as `[B, n]` spatial
/// components; row i of each side forms the positive pair. Points built from
/// spatial components are on-manifold by construction.
#[derive(Clone, Debug)]
pub struct AlignmentBatch {
    text_space: Tensor,
    image_space: Tensor,
    curvature: Curvature,
}

impl AlignmentBatch {
    pub fn new(text_space: Tensor, image_space: Tensor, curvature: Curvature) -> Result<Self> {
        if text_space.shape().len() != 2 || text_space.shape() != image_space.shape() {
            return Err(Error::Shape(format!(
                "alignment batch needs matching [B, n] sides, got {:?} and {:?}",
                text_space.shape(),
                image_space.shape()
            )));
        }
        Ok(AlignmentBatch { text_space, image_space, curvature })
    }

    pub fn from_points(text: &[HyperboloidPoint], image: &[HyperboloidPoint]) -> Result<Self> {
        if text.is_empty() || text.len() != image.len() {
            return Err(Error::Shape(format!(
                "batch sides must be equal and non-empty: {} vs {}",
                text.len(),
                image.len()
            )));
        }
        let curvature = text[0].curvature();
        let dim = text[0].dim();
        let mut tdata = Vec::with_capacity(text.len() * dim);
        let mut idata = Vec::with_capacity(text.len() * dim);
        for (t, i) in text.iter().zip(image) {
            if t.curvature() != curvature || i.curvature() != curvature {
                return Err(Error::Config("mixed curvatures in one batch".into()));
            }
            if t.dim() != dim || i.dim() != dim {
                return Err(Error::Shape("mixed dimensions in one batch".into()));
            }
            tdata.extend_from_slice(t.space().data());
            idata.extend_from_slice(i.space().data());
        }
        Ok(AlignmentBatch {
            text_space: Tensor::new(vec![text.len(), dim], tdata)?,
            image_space: Tensor::new(vec![image.len(), dim], idata)?,
            curvature,
        })
    }

    pub fn len(&self) -> usize {
        self.text_space.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_space(&self) -> &Tensor {
        &self.text_space
    }

    pub fn image_space(&self) -> &Tensor {
        &self.image_space
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }
}

fn check_not_origin(space: &Tensor, what: &str) -> Result<()> {
    let n = space.shape()[1];
    for (row, chunk) in space.data().chunks(n).enumerate() {
        if chunk.iter().all(|&v| v == 0.0) {
            return Err(Error::OriginCone(format!(
                "{what} row {row} sits at the origin where the cone is undefined"
            )));
        }
    }
    Ok(())
}

/// Half-apertures of the cones owned by each row of `x_space`, as `[B, 1]`
/// radians in (0, pi/2].
pub fn half_aperture_col(tape: &Tape, x_space: &Tensor, cfg: &ConeConfig) -> Result<Tensor> {
    check_not_origin(x_space, "half_aperture")?;
    let b = x_space.shape()[0];
    let sq = tape.square(x_space)?;
    let q = tape.reshape(&tape.sum_last(&sq)?, &[b, 1])?;
    let norm = tape.sqrt(&q)?;
    let scaled = tape.scale(&norm, cfg.curvature.sqrt() / (2.0 * cfg.k))?;
    let ratio = tape.div(&Tensor::scalar(1.0)?, &scaled)?;
    let clamped = tape.clamp(&ratio, -1.0 + TRIG_CLAMP, 1.0 - TRIG_CLAMP)?;
    tape.arcsin(&clamped)
}

/// Exterior angles `ext(x_i, y_i)` for the positive pairs, as `[B, 1]`
/// radians in [0, pi].
pub fn exterior_angle_col(
    tape: &Tape,
    x_space: &Tensor,
    y_space: &Tensor,
    cfg: &ConeConfig,
) -> Result<Tensor> {
    if x_space.shape() != y_space.shape() || x_space.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "exterior_angle needs matching [B, n] sides, got {:?} and {:?}",
            x_space.shape(),
            y_space.shape()
        )));
    }
    check_not_origin(x_space, "exterior_angle")?;
    let n = x_space.shape()[1];
    for (row, (xc, yc)) in x_space
        .data()
        .chunks(n)
        .zip(y_space.data().chunks(n))
        .enumerate()
    {
        let dist_sq: f64 = xc.iter().zip(yc).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist_sq < DEGENERATE_TOL_SQ {
            return Err(Error::DegeneratePair(format!(
                "pair {row} is coincident; the exterior angle is undefined"
            )));
        }
    }
    let b = x_space.shape()[0];
    let c = cfg.curvature;

    let inner = paired_inner(tape, x_space, y_space, c)?; // [B, 1]
    let ci = tape.scale(&inner, c.value())?;
    let x_time = time_from_space_col(tape, x_space, c)?;
    let y_time = time_from_space_col(tape, y_space, c)?;
    let numer = tape.add(&y_time, &tape.mul(&x_time, &ci)?)?;

    let xsq = tape.square(x_space)?;
    let xq = tape.reshape(&tape.sum_last(&xsq)?, &[b, 1])?;
    let x_norm = tape.sqrt(&xq)?;
    // (c<x,y>)^2 - 1, floored away from zero so near-coincident pairs cannot
    // produce a negative argument through rounding.
    let wsq = tape.add_scalar(&tape.square(&ci)?, -1.0)?;
    let wsq = tape.clamp(&wsq, 1e-18, f64::MAX / 4.0)?;
    let denom = tape.mul(&x_norm, &tape.sqrt(&wsq)?)?;

    let ratio = tape.div(&numer, &denom)?;
    let clamped = tape.clamp(&ratio, -1.0 + TRIG_CLAMP, 1.0 - TRIG_CLAMP)?;
    tape.arccos(&clamped)
}

/// Mean hinge `max(0, ext(x_i, y_i) - aper(x_i))` over the positive pairs.
pub fn entailment_loss(tape: &Tape, batch: &AlignmentBatch, cfg: &ConeConfig) -> Result<Tensor> {
    let ext = exterior_angle_col(tape, &batch.text_space, &batch.image_space, cfg)?;
    let aper = half_aperture_col(tape, &batch.text_space, cfg)?;
    let gap = tape.sub(&ext, &aper)?;
    let hinge = tape.max0(&gap)?;
    tape.mean_all(&hinge)
}

/// Temperature from its log-parameterisation, clamped to [TAU_MIN, TAU_MAX].
pub fn temperature(tape: &Tape, log_tau: &Tensor) -> Result<Tensor> {
    let tau = tape.exp(log_tau)?;
    tape.clamp(&tau, TAU_MIN, TAU_MAX)
}

/// Symmetric InfoNCE from a square logits matrix whose diagonal holds the
/// positive pairs: half row-wise plus half column-wise cross-entropy.
pub fn infonce_from_logits(tape: &Tape, logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!(
            "infonce needs square logits, got {shape:?}"
        )));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(format!(
            "contrastive loss needs at least 2 pairs, got {b}"
        )));
    }
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = Tensor::new(vec![b, b], eye)?;

    let rows = tape.log_softmax(logits)?;
    let row_ce = tape.scale(&tape.sum_all(&tape.mul(&rows, &eye)?)?, -1.0 / b as f64)?;
    let cols = tape.log_softmax(&tape.transpose(logits)?)?;
    let col_ce = tape.scale(&tape.sum_all(&tape.mul(&cols, &eye)?)?, -1.0 / b as f64)?;

    tape.scale(&tape.add(&row_ce, &col_ce)?, 0.5)
}

/// Symmetric InfoNCE over negative geodesic distances:
/// `s_ij = -d(x_i, y_j) / tau`, averaging cross-entropy over rows (text to
/// image) and columns (image to text).
pub fn contrastive_loss(
    tape: &Tape,
    batch: &AlignmentBatch,
    log_tau: &Tensor,
) -> Result<Tensor> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(format!(
            "contrastive loss needs at least 2 pairs, got {}",
            batch.len()
        )));
    }
    let dist = pairwise_distance(tape, &batch.text_space, &batch.image_space, batch.curvature)?;
    let tau = temperature(tape, log_tau)?;
    let logits = tape.div(&tape.neg(&dist)?, &tau)?;
    infonce_from_logits(tape, &logits)
}

/// Combined objective `L_cont + lambda * L_ent`.
pub fn total_alignment_loss(
    tape: &Tape,
    batch: &AlignmentBatch,
    cfg: &ConeConfig,
    log_tau: &Tensor,
) -> Result<Tensor> {
    let cont = contrastive_loss(tape, batch, log_tau)?;
    if cfg.lambda == 0.0 {
        return Ok(cont);
    }
    let ent = entailment_loss(tape, batch, cfg)?;
    tape.add(&cont, &tape.scale(&ent, cfg.lambda)?)
}

// ---------------------------------------------------------------------------
// Point-level wrappers.
// ---------------------------------------------------------------------------

fn single_row(p: &HyperboloidPoint) -> Result<Tensor> {
    Tensor::new(vec![1, p.dim()], p.space().data().to_vec())
}

/// Half-aperture of one point's cone, in radians.
pub fn half_aperture(x: &HyperboloidPoint, cfg: &ConeConfig) -> Result<f64> {
    let tape = Tape::new();
    Ok(half_aperture_col(&tape, &single_row(x)?, cfg)?.data()[0])
}

/// Exterior angle of one pair, in radians.
pub fn exterior_angle(
    x: &HyperboloidPoint,
    y: &HyperboloidPoint,
    cfg: &ConeConfig,
) -> Result<f64> {
    let tape = Tape::new();
    Ok(exterior_angle_col(&tape, &single_row(x)?, &single_row(y)?, cfg)?.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorentz::{exp_map_origin, log_map_origin, TangentVector};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

    fn cfg(c: f64) -> ConeConfig {
        ConeConfig::with_defaults(Curvature::new(c).unwrap())
    }

    fn point(space: &[f64], c: f64) -> HyperboloidPoint {
        HyperboloidPoint::from_space(Tensor::vector(space).unwrap(), Curvature::new(c).unwrap())
    }

    fn ray_point(x: &HyperboloidPoint, t: f64) -> HyperboloidPoint {
        // exp(t * log(x)): along the geodesic ray from the origin through x.
        let v = log_map_origin(x).unwrap();
        let scaled: Vec<f64> = v.space.data().iter().map(|s| s * t).collect();
        exp_map_origin(&TangentVector::from_slice(&scaled).unwrap(), x.curvature()).unwrap()
    }

    #[test]
    fn aperture_argument_saturates_near_origin() {
        let x = point(&[0.2, 0.0], 1.0);
        let aper = half_aperture(&x, &cfg(1.0)).unwrap();
        assert!((aper - FRAC_PI_2).abs() < 1e-3, "aper {aper}");
    }

    #[test]
    fn aperture_closed_form() {
        // 2K / (sqrt(c) ||x||) = 0.2 / 0.4 = 0.5 -> pi/6.
        let x = point(&[0.4, 0.0], 1.0);
        let aper = half_aperture(&x, &cfg(1.0)).unwrap();
        assert!((aper - FRAC_PI_6).abs() < 1e-12, "aper {aper}");
    }

    #[test]
    fn aperture_decreases_with_radius() {
        let config = cfg(0.1);
        let mut last = f64::INFINITY;
        for i in 1..40 {
            let r = 0.3 + 0.25 * i as f64;
            let aper = half_aperture(&point(&[r, 0.0], 0.1), &config).unwrap();
            assert!(aper <= last + 1e-15, "aperture increased at r={r}");
            last = aper;
        }
    }

    #[test]
    fn aperture_rejects_origin() {
        let x = point(&[0.0, 0.0], 1.0);
        assert!(matches!(
            half_aperture(&x, &cfg(1.0)),
            Err(Error::OriginCone(_))
        ));
    }

    #[test]
    fn exterior_angle_along_ray_is_zero() {
        let config = cfg(1.0);
        let x = point(&[0.8, 0.3], 1.0);
        let y = ray_point(&x, 2.5);
        let ext = exterior_angle(&x, &y, &config).unwrap();
        assert!(ext < 1e-4, "along-ray ext {ext}");
    }

    #[test]
    fn exterior_angle_opposite_ray_is_pi() {
        let config = cfg(1.0);
        let x = point(&[0.8, 0.3], 1.0);
        let y = ray_point(&x, -1.0);
        let ext = exterior_angle(&x, &y, &config).unwrap();
        assert!(ext > PI - 1e-3, "opposite-ray ext {ext}");
    }

    #[test]
    fn exterior_angle_rejects_coincident_pair() {
        let config = cfg(1.0);
        let x = point(&[0.8, 0.3], 1.0);
        assert!(matches!(
            exterior_angle(&x, &x, &config),
            Err(Error::DegeneratePair(_))
        ));
    }

    #[test]
    fn clamped_extremes_keep_gradients_finite() {
        // An along-ray pair saturates the arccos argument at the clamp; the
        // backward pass must still produce finite leaf gradients.
        let config = cfg(1.0);
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(vec![1, 2], vec![0.8, 0.3]).unwrap());
        let x_pt = point(&[0.8, 0.3], 1.0);
        let y_pt = ray_point(&x_pt, 2.0);
        let y = Tensor::new(vec![1, 2], y_pt.space().data().to_vec()).unwrap();
        let ext = exterior_angle_col(&tape, &x, &y, &config).unwrap();
        let loss = tape.sum_all(&ext).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&x).unwrap();
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hinge_is_zero_inside_cone_and_on_boundary() {
        let config = cfg(0.1);
        // Wide cone: small radius; image deeper along the same ray is inside.
        let x = point(&[0.5, 0.1], 0.1);
        let y = ray_point(&x, 3.0);
        let ext = exterior_angle(&x, &y, &config).unwrap();
        let aper = half_aperture(&x, &config).unwrap();
        assert!(ext < aper, "construction should be inside the cone");
        let batch = AlignmentBatch::from_points(&[x.clone()], &[y]).unwrap();
        let tape = Tape::new();
        let loss = entailment_loss(&tape, &batch, &config).unwrap();
        assert_eq!(loss.scalar_value().unwrap(), 0.0);

        // Exactly at the boundary the hinge is still zero.
        let gap: f64 = 0.0;
        assert_eq!(gap.max(0.0), 0.0);
    }

    #[test]
    fn constructed_gap_equals_loss() {
        let config = cfg(1.0);
        let x = point(&[1.1, 0.0], 1.0);
        let aper = half_aperture(&x, &config).unwrap();
        let target = aper + 0.3;

        // Rotate the image direction away from the ray until the exterior
        // angle exceeds the aperture by exactly 0.3 rad (bisection on the
        // rotation angle; ext grows continuously with it).
        let make_y = |theta: f64| {
            let s = 1.8;
            exp_map_origin(
                &TangentVector::from_slice(&[s * theta.cos(), s * theta.sin()]).unwrap(),
                x.curvature(),
            )
            .unwrap()
        };
        let (mut lo, mut hi) = (0.0_f64, PI);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let ext = exterior_angle(&x, &make_y(mid), &config).unwrap();
            if ext < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let y = make_y(0.5 * (lo + hi));
        let ext = exterior_angle(&x, &y, &config).unwrap();
        assert!((ext - target).abs() < 1e-9);

        let batch = AlignmentBatch::from_points(&[x], &[y]).unwrap();
        let tape = Tape::new();
        let loss = entailment_loss(&tape, &batch, &config).unwrap();
        assert!((loss.scalar_value().unwrap() - 0.3).abs() < 1e-9);
    }

    #[test]
    fn contrastive_hand_evaluated_two_pair_batch() {
        // d(x1,y1) = d(x2,y2) = 0, d(x1,y2) = d(x2,y1) = 10, tau = 1:
        // loss = log(1 + e^{-10}).
        let c = Curvature::new(1.0).unwrap();
        let o = HyperboloidPoint::origin(1, c);
        let far = exp_map_origin(&TangentVector::from_slice(&[10.0]).unwrap(), c).unwrap();
        let batch =
            AlignmentBatch::from_points(&[o.clone(), far.clone()], &[o, far]).unwrap();
        let tape = Tape::new();
        let log_tau = Tensor::scalar(0.0).unwrap();
        let loss = contrastive_loss(&tape, &batch, &log_tau).unwrap();
        let expect = (-10.0_f64).exp().ln_1p();
        assert!(
            (loss.scalar_value().unwrap() - expect).abs() < 1e-9,
            "{} vs {expect}",
            loss.scalar_value().unwrap()
        );
    }

    #[test]
    fn contrastive_uniform_distances_give_log_b() {
        // All four points coincide: every pairwise distance is ~0, the
        // softmax is uniform, and the loss is log B.
        let c = Curvature::new(1.0).unwrap();
        let p = exp_map_origin(&TangentVector::from_slice(&[0.7, -0.2]).unwrap(), c).unwrap();
        let pts = vec![p.clone(), p.clone(), p.clone(), p.clone()];
        let batch = AlignmentBatch::from_points(&pts, &pts).unwrap();
        let tape = Tape::new();
        let log_tau = Tensor::scalar(0.0).unwrap();
        let loss = contrastive_loss(&tape, &batch, &log_tau).unwrap();
        assert!((loss.scalar_value().unwrap() - 4.0_f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn contrastive_rejects_single_pair() {
        let c = Curvature::new(1.0).unwrap();
        let p = exp_map_origin(&TangentVector::from_slice(&[0.5]).unwrap(), c).unwrap();
        let batch = AlignmentBatch::from_points(&[p.clone()], &[p]).unwrap();
        let tape = Tape::new();
        let log_tau = Tensor::scalar(0.0).unwrap();
        assert!(matches!(
            contrastive_loss(&tape, &batch, &log_tau),
            Err(Error::BatchTooSmall(_))
        ));
    }

    #[test]
    fn contrastive_invariant_under_pair_permutation() {
        let c = Curvature::new(0.1).unwrap();
        let mk = |v: &[f64]| exp_map_origin(&TangentVector::from_slice(v).unwrap(), c).unwrap();
        let text = vec![mk(&[0.3, 1.0]), mk(&[-0.8, 0.2]), mk(&[1.4, -0.5]), mk(&[0.1, 0.9])];
        let image = vec![mk(&[0.4, 0.8]), mk(&[-0.6, 0.1]), mk(&[1.2, -0.3]), mk(&[0.0, 1.1])];
        let perm = [2usize, 0, 3, 1];

        let tape = Tape::new();
        let log_tau = Tensor::scalar(-1.0).unwrap();
        let base = contrastive_loss(
            &tape,
            &AlignmentBatch::from_points(&text, &image).unwrap(),
            &log_tau,
        )
        .unwrap();
        let tp: Vec<_> = perm.iter().map(|&i| text[i].clone()).collect();
        let ip: Vec<_> = perm.iter().map(|&i| image[i].clone()).collect();
        let permuted = contrastive_loss(
            &tape,
            &AlignmentBatch::from_points(&tp, &ip).unwrap(),
            &log_tau,
        )
        .unwrap();
        assert!(
            (base.scalar_value().unwrap() - permuted.scalar_value().unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn total_loss_composition() {
        let c = Curvature::new(0.1).unwrap();
        let mk = |v: &[f64]| exp_map_origin(&TangentVector::from_slice(v).unwrap(), c).unwrap();
        let text = vec![mk(&[0.9, 0.4]), mk(&[-1.1, 0.6])];
        let image = vec![mk(&[-0.2, 1.3]), mk(&[0.7, -0.9])];
        let batch = AlignmentBatch::from_points(&text, &image).unwrap();
        let log_tau = Tensor::scalar(0.0).unwrap();

        // lambda = 0 reduces exactly to the contrastive term.
        let mut config = cfg(0.1);
        config.lambda = 0.0;
        let tape = Tape::new();
        let total = total_alignment_loss(&tape, &batch, &config, &log_tau).unwrap();
        let cont = contrastive_loss(&tape, &batch, &log_tau).unwrap();
        assert_eq!(
            total.scalar_value().unwrap(),
            cont.scalar_value().unwrap()
        );

        // lambda = 0.1 adds exactly 0.1 * L_ent.
        config.lambda = 0.1;
        let total = total_alignment_loss(&tape, &batch, &config, &log_tau).unwrap();
        let ent = entailment_loss(&tape, &batch, &config).unwrap();
        let expect = cont.scalar_value().unwrap() + 0.1 * ent.scalar_value().unwrap();
        assert!((total.scalar_value().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn combined_objective_arithmetic() {
        // L = L_cont + lambda L_ent with frozen constituents.
        let expect = 0.693147_f64 + 0.1 * 0.3;
        assert!((expect - 0.723147).abs() < 1e-12);
    }
}
