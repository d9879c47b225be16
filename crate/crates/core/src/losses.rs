//! Training losses with analytic gradients with respect to the prediction.
//!
//! * boundary cross-entropy between the predicted boundary map and the
//!   static edge volume,
//! * partial cross-entropy restricted to confident pseudo-labelled voxels,
//! * the active boundary loss: a 3D Chan–Vese functional with a total
//!   variation surface term and inside/outside intensity variance terms.
//!
//! All computations are in `f64`. Cross-entropy terms are averaged (per
//! voxel, per confident voxel); the active boundary loss is a physical
//! integral, i.e. a sum scaled by the voxel volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::PseudoLabels;
use crate::volume::{BinaryVolume, ChannelVolume, Geometry, ProbVolume, Volume};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

const MEAN_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbParams {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Smoothing inside `sqrt(|grad u|² + epsilon)`.
    pub epsilon: f64,
}

impl Default for AbParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            epsilon: 1e-6,
        }
    }
}

impl AbParams {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.lambda1) && ok(self.lambda2) && ok(self.epsilon) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "lambda1, lambda2 and epsilon must be finite and >= 0: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalLossWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TotalLossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.3,
            beta2: 0.3,
        }
    }
}

/// Form of the boundary cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryLossKind {
    /// `-(B log b + (1 - B) log(1 - b))`, averaged over voxels.
    #[default]
    TwoSided,
    /// Positive term only, `-B log b`; minimised by `b = 1` everywhere.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad: ChannelVolume,
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

pub fn boundary_loss(b: &ProbVolume, edges: &BinaryVolume) -> Result<LossReport> {
    boundary_loss_with(b, edges, BoundaryLossKind::TwoSided)
}

/// Boundary cross-entropy of a single-channel map against binary edges.
/// The gradient is zero where clamping is active.
pub fn boundary_loss_with(
    b: &ProbVolume,
    edges: &BinaryVolume,
    kind: BoundaryLossKind,
) -> Result<LossReport> {
    if b.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "boundary map must have 1 channel, got {}",
            b.channels()
        )));
    }
    b.geometry().check_same_shape(edges.geometry(), "boundary map vs edges")?;
    let n = b.geometry().len() as f64;
    let mut value = 0.0;
    let mut grad = ChannelVolume::zeros(*b.geometry(), 1);
    for ((g, &p), &target) in grad.data_mut().iter_mut().zip(b.data()).zip(edges.data()) {
        let (p, active) = clamp_prob(p);
        let t = if target { 1.0 } else { 0.0 };
        let (term, d) = match kind {
            BoundaryLossKind::TwoSided => (
                t * p.ln() + (1.0 - t) * (1.0 - p).ln(),
                t / p - (1.0 - t) / (1.0 - p),
            ),
            BoundaryLossKind::Literal => (t * p.ln(), t / p),
        };
        value -= term;
        if active {
            *g = -d / n;
        }
    }
    Ok(LossReport {
        value: value / n,
        grad,
    })
}

/// Mean negative log-likelihood of the pseudo label over confident voxels.
pub fn partial_ce(probs: &ProbVolume, pl: &PseudoLabels) -> Result<LossReport> {
    let geom = *probs.geometry();
    geom.check_same_shape(pl.mask.geometry(), "prediction vs pseudo mask")?;
    geom.check_same_shape(pl.confident.geometry(), "prediction vs confidence mask")?;
    if probs.channels() != pl.mask.num_classes() as usize {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction channels for {} classes",
            probs.channels(),
            pl.mask.num_classes()
        )));
    }
    let confident = pl.confident_count();
    if confident == 0 {
        return Err(Error::NoConfidentVoxels);
    }
    let scale = 1.0 / confident as f64;
    let len = geom.len();
    let mut grad = ChannelVolume::zeros(geom, probs.channels());
    let mut value = 0.0;
    for (i, (&on, &class)) in pl.confident.data().iter().zip(pl.mask.data()).enumerate() {
        if !on {
            continue;
        }
        let k = class as usize * len + i;
        let p = probs.data()[k];
        let pc = p.max(PROB_CLAMP);
        value -= pc.ln();
        if p >= PROB_CLAMP {
            grad.data_mut()[k] = -scale / p;
        }
    }
    Ok(LossReport {
        value: value * scale,
        grad,
    })
}

/// Inside / outside soft intensity means of `v` under membership `u`.
pub fn region_means(u: &[f64], v: &[f64]) -> (f64, f64) {
    let (mut su, mut suv, mut sv, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        su += a;
        suv += a * b;
        s1 += 1.0 - a;
        sv += (1.0 - a) * b;
    }
    (suv / su.max(MEAN_FLOOR), sv / s1.max(MEAN_FLOOR))
}

/// Terms of the active boundary loss for one foreground class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbClassTerms {
    pub class: usize,
    pub surface: f64,
    pub volume_in: f64,
    pub volume_out: f64,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbReport {
    pub value: f64,
    pub grad: ChannelVolume,
    pub classes: Vec<AbClassTerms>,
}

/// Surface, inside and outside terms for one membership channel with fixed
/// region means; accumulates the gradient into `grad` scaled by `weight`.
fn ab_channel(
    u: &[f64],
    v: &[f64],
    geom: &Geometry,
    means: (f64, f64),
    params: &AbParams,
    grad: &mut [f64],
) -> (f64, f64, f64) {
    let [nx, ny, nz] = geom.shape;
    let s = geom.spacing;
    let omega = geom.voxel_volume();
    let strides = [1, nx, nx * ny];
    let (c1, c2) = means;

    // q[a][p] = D_a u(p) / |grad u|_eps(p)
    let mut q = [vec![0.0; u.len()], vec![0.0; u.len()], vec![0.0; u.len()]];
    let mut surface = 0.0;
    let (mut vin, mut vout) = (0.0, 0.0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = geom.index(x, y, z);
                let pos = [x, y, z];
                let mut d = [0.0; 3];
                for a in 0..3 {
                    if pos[a] + 1 < geom.shape[a] {
                        d[a] = (u[i + strides[a]] - u[i]) / s[a];
                    }
                }
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + params.epsilon).sqrt();
                surface += norm * omega;
                if norm > 0.0 {
                    for a in 0..3 {
                        q[a][i] = d[a] / norm;
                    }
                }
                let ri = (c1 - v[i]).powi(2);
                let ro = (c2 - v[i]).powi(2);
                vin += ri * u[i] * omega;
                vout += ro * (1.0 - u[i]) * omega;
                grad[i] += (params.lambda1 * ri - params.lambda2 * ro) * omega;
            }
        }
    }
    // Adjoint of the forward differences: -div q.
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = geom.index(x, y, z);
                let pos = [x, y, z];
                let mut acc = 0.0;
                for a in 0..3 {
                    acc -= q[a][i] / s[a];
                    if pos[a] > 0 {
                        acc += q[a][i - strides[a]] / s[a];
                    }
                }
                grad[i] += acc * omega;
            }
        }
    }
    (surface, vin, vout)
}

/// Active boundary loss summed over foreground classes `1..N`.
///
/// The gradient treats the region means as constants; the background
/// channel's gradient is zero.
pub fn active_boundary_loss(probs: &ProbVolume, image: &Volume, params: &AbParams) -> Result<LossReport> {
    let r = active_boundary_breakdown(probs, image, params)?;
    Ok(LossReport {
        value: r.value,
        grad: r.grad,
    })
}

pub fn active_boundary_breakdown(probs: &ProbVolume, image: &Volume, params: &AbParams) -> Result<AbReport> {
    let v = image.normalized();
    active_boundary_with_means(probs, image, params, |u| region_means(u, &v))
}

/// Active boundary loss with caller-supplied region means per class, e.g.
/// means frozen from an earlier iterate.
pub fn active_boundary_with_means(
    probs: &ProbVolume,
    image: &Volume,
    params: &AbParams,
    mut means: impl FnMut(&[f64]) -> (f64, f64),
) -> Result<AbReport> {
    params.validate()?;
    let geom = *probs.geometry();
    geom.check_same_shape(image.geometry(), "prediction vs image")?;
    if probs.channels() < 2 {
        return Err(Error::ShapeMismatch(
            "active boundary loss needs background plus at least one class".into(),
        ));
    }
    let v = image.normalized();
    let mut grad = ChannelVolume::zeros(geom, probs.channels());
    let mut classes = Vec::with_capacity(probs.channels() - 1);
    let mut value = 0.0;
    for c in 1..probs.channels() {
        let u = probs.channel(c);
        let (c1, c2) = means(u);
        let (surface, volume_in, volume_out) = ab_channel(u, &v, &geom, (c1, c2), params, grad.channel_mut(c));
        value += surface + params.lambda1 * volume_in + params.lambda2 * volume_out;
        classes.push(AbClassTerms {
            class: c,
            surface,
            volume_in,
            volume_out,
            c1,
            c2,
        });
    }
    Ok(AbReport { value, grad, classes })
}

/// Network outputs and supervision consumed by [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub boundary: &'a ProbVolume,
    pub edges: &'a BinaryVolume,
    pub mask_init: &'a ProbVolume,
    pub mask_final: &'a ProbVolume,
    pub pseudo: &'a PseudoLabels,
    pub image: &'a Volume,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ab: AbParams,
    pub weights: TotalLossWeights,
    pub boundary_kind: BoundaryLossKind,
}

/// Unweighted term values plus the weights they were combined with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bry: f64,
    pub l_seg_init: f64,
    pub l_seg_final: f64,
    pub l_ab: f64,
    pub total: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub boundary_kind: BoundaryLossKind,
    pub ab_classes: Vec<AbClassTerms>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub grad_boundary: ChannelVolume,
    pub grad_init: ChannelVolume,
    pub grad_final: ChannelVolume,
}

impl TotalLoss {
    pub fn value(&self) -> f64 {
        self.breakdown.total
    }
}

/// `beta1 * L_bry + L_seg(init) + L_seg(final) + beta2 * L_AB(final)`.
pub fn total_loss(inputs: &LossInputs<'_>, config: &LossConfig) -> Result<TotalLoss> {
    let w = config.weights;
    if !(w.beta1.is_finite() && w.beta1 >= 0.0 && w.beta2.is_finite() && w.beta2 >= 0.0) {
        return Err(Error::InvalidParameter(format!("loss weights must be >= 0: {w:?}")));
    }
    let bry = boundary_loss_with(inputs.boundary, inputs.edges, config.boundary_kind)?;
    let seg_init = partial_ce(inputs.mask_init, inputs.pseudo)?;
    let seg_final = partial_ce(inputs.mask_final, inputs.pseudo)?;
    let ab = active_boundary_breakdown(inputs.mask_final, inputs.image, &config.ab)?;

    let total = w.beta1 * bry.value + seg_init.value + seg_final.value + w.beta2 * ab.value;
    let mut grad_final = seg_final.grad;
    for (g, a) in grad_final.data_mut().iter_mut().zip(ab.grad.data()) {
        *g += w.beta2 * a;
    }
    Ok(TotalLoss {
        breakdown: LossBreakdown {
            l_bry: bry.value,
            l_seg_init: seg_init.value,
            l_seg_final: seg_final.value,
            l_ab: ab.value,
            total,
            beta1: w.beta1,
            beta2: w.beta2,
            lambda1: config.ab.lambda1,
            lambda2: config.ab.lambda2,
            epsilon: config.ab.epsilon,
            boundary_kind: config.boundary_kind,
            ab_classes: ab.classes,
        },
        grad_boundary: bry.grad.scaled(w.beta1),
        grad_init: seg_init.grad,
        grad_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Grid, LabelVolume};

    fn geom(shape: [usize; 3]) -> Geometry {
        Geometry::isotropic(shape)
    }

    #[test]
    fn boundary_loss_perfect_and_half() {
        let g = geom([3, 2, 2]);
        let edges = BinaryVolume::from_fn(g, |x, y, _| (x + y) % 2 == 0);
        let b = ProbVolume::new(g, 1, edges.data().iter().map(|&e| if e { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!(boundary_loss(&b, &edges).unwrap().value <= 1e-5);
        let half = ProbVolume::new(g, 1, vec![0.5; g.len()]).unwrap();
        let r = boundary_loss(&half, &edges).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-12);
        // literal form ignores negatives and prefers b = 1
        let ones = ProbVolume::new(g, 1, vec![1.0; g.len()]).unwrap();
        let lit = boundary_loss_with(&ones, &edges, BoundaryLossKind::Literal).unwrap();
        assert!(lit.value < 1e-6);
    }

    #[test]
    fn partial_ce_requires_confident_voxels() {
        let g = geom([2, 2, 1]);
        let pl = PseudoLabels {
            mask: LabelVolume::from_vec(g, vec![0; 4], 2).unwrap(),
            confident: Grid::filled(g, false),
        };
        let p = ProbVolume::new(g, 2, vec![0.5; 8]).unwrap();
        assert!(matches!(partial_ce(&p, &pl), Err(Error::NoConfidentVoxels)));
    }

    #[test]
    fn partial_ce_perfect_prediction() {
        let g = geom([2, 2, 1]);
        let mask = LabelVolume::from_vec(g, vec![0, 1, 1, 0], 2).unwrap();
        let pl = PseudoLabels {
            confident: Grid::new(g, vec![true, true, false, false]).unwrap(),
            mask: mask.clone(),
        };
        let p = ProbVolume::one_hot(&mask);
        let r = partial_ce(&p, &pl).unwrap();
        assert!(r.value.abs() < 1e-12);
        for c in 0..2 {
            assert_eq!(r.grad.channel(c)[2], 0.0);
            assert_eq!(r.grad.channel(c)[3], 0.0);
        }
    }

    #[test]
    fn constant_membership_has_epsilon_surface_floor() {
        let g = Geometry::new([4, 3, 2], [1.0, 2.0, 3.0]).unwrap();
        let image = Volume::from_fn(g, |x, y, z| (x + 2 * y + 3 * z) as f32);
        let p = ProbVolume::new(g, 2, [vec![0.7; g.len()], vec![0.3; g.len()]].concat()).unwrap();
        let params = AbParams::default();
        let r = active_boundary_breakdown(&p, &image, &params).unwrap();
        let floor = g.len() as f64 * params.epsilon.sqrt() * g.voxel_volume();
        assert!((r.classes[0].surface - floor).abs() < 1e-12);
        // background channel carries no gradient
        assert!(r.grad.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indicator_of_bright_region_is_a_fixed_point() {
        let g = Geometry::new([6, 5, 4], [1.0, 1.0, 4.0]).unwrap();
        let image = Volume::from_fn(g, |x, _, _| if x >= 3 { 10.0 } else { -2.0 });
        let u: Vec<f64> = image.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let bg: Vec<f64> = u.iter().map(|v| 1.0 - v).collect();
        let p = ProbVolume::new(g, 2, [bg, u].concat()).unwrap();
        let r = active_boundary_breakdown(&p, &image, &AbParams::default()).unwrap();
        assert!(r.classes[0].volume_in.abs() < 1e-10);
        assert!(r.classes[0].volume_out.abs() < 1e-10);
        assert_eq!((r.classes[0].c1, r.classes[0].c2), (1.0, 0.0));
    }

    #[test]
    fn surface_is_symmetric_under_complement() {
        let g = Geometry::new([5, 4, 3], [0.5, 1.0, 2.0]).unwrap();
        let image = Volume::filled(g, 1.0);
        let u: Vec<f64> = (0..g.len()).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let w: Vec<f64> = u.iter().map(|v| 1.0 - v).collect();
        let a = ProbVolume::new(g, 2, [w.clone(), u.clone()].concat()).unwrap();
        let b = ProbVolume::new(g, 2, [u, w].concat()).unwrap();
        let sa = active_boundary_breakdown(&a, &image, &AbParams::default()).unwrap().classes[0].surface;
        let sb = active_boundary_breakdown(&b, &image, &AbParams::default()).unwrap().classes[0].surface;
        assert!((sa - sb).abs() < 1e-9 * sa.abs());
    }
}
