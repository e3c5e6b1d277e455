//! Margin-softmax losses on the unit sphere and their analytic gradients.
//!
//! All losses take *raw* feature rows and raw class-center rows and measure
//! angles after normalizing them, so the gradients returned are with respect
//! to the pre-normalization vectors. At unit-norm inputs they are the tangent
//! projections of the usual cosine gradients.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dp::ClientId;
use crate::dplc::SanitizedCluster;
use crate::error::{domain, Error, Result};
use crate::exec::Exec;
use crate::geometry::{Angle, UnitVector};
use crate::linalg::{self, Matrix};

/// Below this `sin θ` the angular derivative direction is undefined; we use 0.
const SIN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CosFace,
    ArcFace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub scale: f64,
    pub margin: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind, scale: f64, margin: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(domain(format!("scale must be > 0 (got {scale})")));
        }
        if !(margin >= 0.0 && margin < PI) {
            return Err(domain(format!("margin must be in [0, pi) (got {margin})")));
        }
        Ok(Self { kind, scale, margin })
    }

    /// s = 64, m = 0.35.
    pub fn cosface() -> Self {
        Self { kind: LossKind::CosFace, scale: 64.0, margin: 0.35 }
    }

    /// s = 64, m = 0.5.
    pub fn arcface() -> Self {
        Self { kind: LossKind::ArcFace, scale: 64.0, margin: 0.5 }
    }

    pub fn default_margin(kind: LossKind) -> f64 {
        match kind {
            LossKind::CosFace => 0.35,
            LossKind::ArcFace => 0.5,
        }
    }

    /// Target logit `u` and `du/dcos θ`.
    fn positive(&self, c: f64) -> (f64, f64) {
        let s = self.scale;
        match self.kind {
            LossKind::CosFace => (s * (c - self.margin), s),
            LossKind::ArcFace if self.margin == 0.0 => (s * c, s),
            LossKind::ArcFace => {
                let theta = c.acos();
                let limit = PI - self.margin;
                if theta >= limit {
                    // cos(θ + m) is held at cos π beyond the wrap point.
                    return (-s, 0.0);
                }
                let sin = theta.sin();
                let slope = if sin < SIN_FLOOR { 0.0 } else { s * (theta + self.margin).sin() / sin };
                (s * (theta + self.margin).cos(), slope)
            }
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::arcface()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Positive,
    Negative,
}

/// `u` (target) or `v` (non-target) logit for angle `θ`.
pub fn margin_similarity(config: &LossConfig, theta: Angle, role: Role) -> f64 {
    let c = theta.cos();
    match role {
        Role::Negative => config.scale * c,
        Role::Positive => match config.kind {
            LossKind::CosFace => config.scale * (c - config.margin),
            LossKind::ArcFace => {
                let t = theta.radians().min(PI - config.margin);
                config.scale * (t + config.margin).cos()
            }
        },
    }
}

/// `μ = s·cos(max(θ − ρ, 0))`, and `dμ/dcos θ` (0 on and inside the cap).
fn mu_and_slope(c: f64, rho: f64, s: f64) -> (f64, f64) {
    let theta = c.clamp(-1.0, 1.0).acos();
    if theta <= rho {
        return (s, 0.0);
    }
    let sin = theta.sin();
    let slope = if sin < SIN_FLOOR { 0.0 } else { s * (theta - rho).sin() / sin };
    (s * (theta - rho).cos(), slope)
}

/// Similarity between a feature and a cap of half-angle `ρ` around `p̂`.
pub fn cluster_similarity_mu(p_hat: &UnitVector, f: &UnitVector, rho: Angle, s: f64) -> Result<f64> {
    if p_hat.dim() != f.dim() {
        return Err(Error::DimensionMismatch { expected: p_hat.dim(), actual: f.dim() });
    }
    Ok(mu_and_slope(p_hat.dot(f), rho.radians(), s).0)
}

/// Foreign clusters seen by one client: everything except its own releases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsensusContext {
    own: ClientId,
    centers: Vec<UnitVector>,
}

impl ConsensusContext {
    pub fn empty(own: ClientId) -> Self {
        Self { own, centers: Vec::new() }
    }

    pub fn new<'a>(own: ClientId, clusters: impl IntoIterator<Item = &'a SanitizedCluster>) -> Self {
        let centers = clusters.into_iter().filter(|c| c.client != own).map(|c| c.center.clone()).collect();
        Self { own, centers }
    }

    /// Build directly from foreign centers (tests, tooling).
    pub fn from_centers(own: ClientId, centers: Vec<UnitVector>) -> Self {
        Self { own, centers }
    }

    pub fn own(&self) -> ClientId {
        self.own
    }

    pub fn centers(&self) -> &[UnitVector] {
        &self.centers
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    /// ∂L/∂f for each raw feature row.
    pub d_features: Matrix,
    /// ∂L/∂w for each raw class-center row.
    pub d_centers: Matrix,
}

struct SampleTerms {
    loss: f64,
    /// dL_i / d cos(w_j, f_i)
    center_slopes: Vec<f64>,
    /// dL_i / d cos(p̂_l, f_i)
    cluster_slopes: Vec<f64>,
}

struct Normalized {
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn normalized_rows(m: &Matrix, what: &str) -> Result<Normalized> {
    let mut rows = Vec::with_capacity(m.rows());
    let mut norms = Vec::with_capacity(m.rows());
    for r in m.iter_rows() {
        let n = linalg::norm(r);
        if !(n > crate::geometry::MIN_NORM) || !n.is_finite() {
            return Err(Error::ZeroVector { norm: n });
        }
        rows.push(r.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    if rows.is_empty() {
        return Err(domain(format!("{what} is empty")));
    }
    Ok(Normalized { rows, norms })
}

fn check_inputs(features: &Matrix, labels: &[usize], centers: &Matrix, ctx: &ConsensusContext) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if features.cols() != centers.cols() {
        return Err(Error::DimensionMismatch { expected: centers.cols(), actual: features.cols() });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= centers.rows()) {
        return Err(Error::LabelOutOfRange { label, classes: centers.rows() });
    }
    if let Some(p) = ctx.centers.iter().find(|p| p.dim() != centers.cols()) {
        return Err(Error::DimensionMismatch { expected: centers.cols(), actual: p.dim() });
    }
    Ok(())
}

fn sample_terms(
    f: &[f64],
    label: usize,
    w: &Normalized,
    clusters: &[UnitVector],
    rho: f64,
    config: &LossConfig,
) -> SampleTerms {
    let n = w.rows.len();
    let mut logits = Vec::with_capacity(n + clusters.len());
    let mut slopes = Vec::with_capacity(n + clusters.len());
    for (j, wj) in w.rows.iter().enumerate() {
        let c = linalg::dot(wj, f).clamp(-1.0, 1.0);
        let (z, dz) = if j == label { config.positive(c) } else { (config.scale * c, config.scale) };
        logits.push(z);
        slopes.push(dz);
    }
    for p in clusters {
        let (z, dz) = mu_and_slope(linalg::dot(p.as_slice(), f), rho, config.scale);
        logits.push(z);
        slopes.push(dz);
    }

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];

    let mut center_slopes = Vec::with_capacity(n);
    let mut cluster_slopes = Vec::with_capacity(clusters.len());
    for (k, (z, dz)) in logits.iter().zip(&slopes).enumerate() {
        let mut g = (z - lse).exp();
        if k == label {
            g -= 1.0;
        }
        if k < n {
            center_slopes.push(g * dz);
        } else {
            cluster_slopes.push(g * dz);
        }
    }
    SampleTerms { loss, center_slopes, cluster_slopes }
}

fn evaluate(
    features: &Matrix,
    labels: &[usize],
    centers: &Matrix,
    ctx: &ConsensusContext,
    rho: f64,
    config: &LossConfig,
    exec: Exec,
) -> Result<(Normalized, Normalized, Vec<SampleTerms>)> {
    check_inputs(features, labels, centers, ctx)?;
    let f = normalized_rows(features, "feature batch")?;
    let w = normalized_rows(centers, "class-center matrix")?;
    let terms = exec.map_range(labels.len(), |i| {
        sample_terms(&f.rows[i], labels[i], &w, &ctx.centers, rho, config)
    });
    Ok((f, w, terms))
}

fn mean_loss(terms: &[SampleTerms]) -> f64 {
    terms.iter().map(|t| t.loss).sum::<f64>() / terms.len() as f64
}

/// Mean over the batch of `−log softmax` with `u` on the target logit and `v`
/// on every other class.
pub fn classification_loss(features: &Matrix, labels: &[usize], centers: &Matrix, config: &LossConfig) -> Result<f64> {
    consensus_loss(features, labels, centers, &ConsensusContext::empty(0), Angle::ZERO, config)
}

/// Classification loss with `Σ_l e^{μ(p̂_l, f, ρ)}` over foreign clusters added
/// to every denominator.
pub fn consensus_loss(
    features: &Matrix,
    labels: &[usize],
    centers: &Matrix,
    ctx: &ConsensusContext,
    rho: Angle,
    config: &LossConfig,
) -> Result<f64> {
    let (_, _, terms) = evaluate(features, labels, centers, ctx, rho.radians(), config, Exec::default())?;
    Ok(mean_loss(&terms))
}

/// Loss value with analytic gradients for raw features and raw centers.
pub fn loss_gradients(
    features: &Matrix,
    labels: &[usize],
    centers: &Matrix,
    ctx: &ConsensusContext,
    rho: Angle,
    config: &LossConfig,
    exec: Exec,
) -> Result<GradientBundle> {
    let (f, w, terms) = evaluate(features, labels, centers, ctx, rho.radians(), config, exec)?;
    let batch = terms.len() as f64;
    let d = centers.cols();

    // ∂cos(a, f)/∂f = (â − cos·f̂)/‖f‖
    let d_features = exec.map_range(terms.len(), |i| {
        let fi = &f.rows[i];
        let mut g = vec![0.0; d];
        let targets = w.rows.iter().map(Vec::as_slice).zip(&terms[i].center_slopes);
        let foreign = ctx.centers.iter().map(UnitVector::as_slice).zip(&terms[i].cluster_slopes);
        for (a, &slope) in targets.chain(foreign) {
            if slope == 0.0 {
                continue;
            }
            let c = linalg::dot(a, fi).clamp(-1.0, 1.0);
            for k in 0..d {
                g[k] += slope * (a[k] - c * fi[k]);
            }
        }
        let scale = 1.0 / (batch * f.norms[i]);
        g.iter_mut().for_each(|x| *x *= scale);
        g
    });

    let d_centers = exec.map_range(w.rows.len(), |j| {
        let wj = &w.rows[j];
        let mut g = vec![0.0; d];
        for (i, t) in terms.iter().enumerate() {
            let slope = t.center_slopes[j];
            if slope == 0.0 {
                continue;
            }
            let fi = &f.rows[i];
            let c = linalg::dot(wj, fi).clamp(-1.0, 1.0);
            for k in 0..d {
                g[k] += slope * (fi[k] - c * wj[k]);
            }
        }
        let scale = 1.0 / (batch * w.norms[j]);
        g.iter_mut().for_each(|x| *x *= scale);
        g
    });

    Ok(GradientBundle {
        loss: mean_loss(&terms),
        d_features: Matrix::from_vec(terms.len(), d, d_features.concat())?,
        d_centers: Matrix::from_vec(w.rows.len(), d, d_centers.concat())?,
    })
}

/// Largest relative disagreement between `analytic` and central differences
/// of `f` at `point`. Denominators are floored at `1e-3`: below that, central
/// differences of an O(s) loss at double precision are roundoff.
pub fn finite_diff_check<F>(f: F, analytic: &[f64], point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(domain(format!("step must be > 0 (got {h})")));
    }
    if analytic.len() != point.len() {
        return Err(Error::DimensionMismatch { expected: point.len(), actual: analytic.len() });
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let up = f(&x);
        x[k] = orig - h;
        let down = f(&x);
        x[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalize, sample_uniform_direction};
    use crate::rng::{self, Stream};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn angle(r: f64) -> Angle {
        Angle::new(r).unwrap()
    }

    fn unit_rows(n: usize, d: usize, r: &mut Stream) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| sample_uniform_direction(d, r).unwrap().into_inner()).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn margin_similarity_examples() {
        let cos = LossConfig::new(LossKind::CosFace, 64.0, 0.35).unwrap();
        assert!((margin_similarity(&cos, Angle::ZERO, Role::Positive) - 41.6).abs() < 1e-12);
        let arc = LossConfig::new(LossKind::ArcFace, 64.0, 0.5).unwrap();
        assert!((margin_similarity(&arc, Angle::ZERO, Role::Positive) - 56.165_283_960_983_86).abs() < 1e-9);
        for cfg in [cos, arc] {
            assert!(margin_similarity(&cfg, Angle::RIGHT, Role::Negative).abs() < 1e-12);
            let t = angle(1.1);
            assert_eq!(margin_similarity(&cfg, t, Role::Negative), 64.0 * 1.1f64.cos());
        }
    }

    #[test]
    fn arcface_is_monotone_through_the_wrap_point() {
        let arc = LossConfig::arcface();
        let mut prev = f64::INFINITY;
        for k in 0..=1000 {
            let u = margin_similarity(&arc, angle(PI * k as f64 / 1000.0), Role::Positive);
            assert!(u <= prev + 1e-12);
            prev = u;
        }
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::new(LossKind::CosFace, 0.0, 0.3).is_err());
        assert!(LossConfig::new(LossKind::ArcFace, 1.0, -0.1).is_err());
        assert!(LossConfig::new(LossKind::ArcFace, 1.0, PI).is_err());
    }

    #[test]
    fn mu_examples() {
        let p = UnitVector::basis(3, 0).unwrap();
        let rho = 0.8;
        let at = |t: f64| normalize(&[t.cos(), t.sin(), 0.0]).unwrap();
        assert_eq!(cluster_similarity_mu(&p, &at(rho / 2.0), angle(rho), 10.0).unwrap(), 10.0);
        assert_eq!(cluster_similarity_mu(&p, &at(rho), angle(rho), 10.0).unwrap(), 10.0);
        assert!(cluster_similarity_mu(&p, &at(rho + FRAC_PI_2), angle(rho), 10.0).unwrap().abs() < 1e-12);
        // Continuous across the hinge, decreasing beyond it.
        let inside = cluster_similarity_mu(&p, &at(rho - 1e-9), angle(rho), 10.0).unwrap();
        let outside = cluster_similarity_mu(&p, &at(rho + 1e-6), angle(rho), 10.0).unwrap();
        assert!((inside - outside).abs() < 1e-9 && outside < 10.0);
    }

    #[test]
    fn single_class_loss_is_zero_with_zero_gradient() {
        let mut r = rng::stream(1);
        let f = unit_rows(3, 5, &mut r);
        let w = unit_rows(1, 5, &mut r);
        for cfg in [LossConfig::cosface(), LossConfig::arcface()] {
            assert_eq!(classification_loss(&f, &[0, 0, 0], &w, &cfg).unwrap(), 0.0);
            let g = loss_gradients(&f, &[0, 0, 0], &w, &ConsensusContext::empty(0), angle(1.0), &cfg, Exec::Sequential)
                .unwrap();
            assert!(g.d_features.as_slice().iter().all(|&x| x == 0.0));
            assert!(g.d_centers.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn two_class_scalar_evaluation() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let cfg = LossConfig::new(LossKind::CosFace, 1.0, 0.0).unwrap();
        let l = classification_loss(&f, &[0], &w, &cfg).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-15);
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn zero_margin_kinds_coincide() {
        let mut r = rng::stream(2);
        let f = unit_rows(6, 8, &mut r);
        let w = unit_rows(5, 8, &mut r);
        let labels = [0, 1, 2, 3, 4, 0];
        let a = classification_loss(&f, &labels, &w, &LossConfig::new(LossKind::CosFace, 30.0, 0.0).unwrap()).unwrap();
        let b = classification_loss(&f, &labels, &w, &LossConfig::new(LossKind::ArcFace, 30.0, 0.0).unwrap()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_context_is_bitwise_classification_loss() {
        let mut r = rng::stream(3);
        let f = unit_rows(4, 6, &mut r);
        let w = unit_rows(7, 6, &mut r);
        let labels = [6, 0, 3, 3];
        let cfg = LossConfig::cosface();
        let a = classification_loss(&f, &labels, &w, &cfg).unwrap();
        let b = consensus_loss(&f, &labels, &w, &ConsensusContext::empty(2), angle(1.3), &cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn foreign_cluster_inside_margin_adds_exp_s() {
        // One sample, one class: classification loss 0, so the consensus loss is ln(1 + e^{s − u}).
        let cfg = LossConfig::new(LossKind::CosFace, 4.0, 0.2).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let f = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let ctx = ConsensusContext::from_centers(0, vec![normalize(&[0.9, 0.3, 0.0]).unwrap()]);
        let l = consensus_loss(&f, &[0], &w, &ctx, angle(0.5), &cfg).unwrap();
        let u = 4.0 * (1.0 - 0.2);
        let want = ((u as f64).exp() + 4f64.exp()).ln() - u;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn own_clusters_are_excluded() {
        let c = |client| SanitizedCluster {
            center: UnitVector::basis(3, client).unwrap(),
            margin: angle(1.0),
            covered_count: 1,
            query_index: 0,
            client,
            round: 0,
        };
        let all = [c(0), c(1), c(2)];
        let ctx = ConsensusContext::new(1, &all);
        assert_eq!(ctx.centers().len(), 2);
        assert!(ctx.centers().iter().all(|p| p.as_slice()[1] == 0.0));
    }

    #[test]
    fn label_out_of_range() {
        let mut r = rng::stream(4);
        let f = unit_rows(2, 4, &mut r);
        let w = unit_rows(3, 4, &mut r);
        assert!(matches!(
            classification_loss(&f, &[0, 3], &w, &LossConfig::cosface()),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    /// Moving f along the geodesic away from a foreign cluster (everything else
    /// fixed) strictly lowers the loss while f stays outside the cap.
    #[test]
    fn retreating_from_foreign_cluster_lowers_loss() {
        let cfg = LossConfig::new(LossKind::ArcFace, 16.0, 0.3).unwrap();
        let rho = 0.6;
        let ctx = ConsensusContext::from_centers(0, vec![UnitVector::basis(3, 0).unwrap()]);
        // f turns in the e1-e3 plane, so its cosines to both classes (±e2) stay 0.
        let at = |t: f64| Matrix::from_rows(&[vec![t.cos(), 0.0, t.sin()]]).unwrap();
        let w_fixed = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, -1.0, 0.0]]).unwrap();
        let losses: Vec<f64> = (0..=50)
            .map(|k| rho + 0.01 + k as f64 * 0.02)
            .map(|t| consensus_loss(&at(t), &[0], &w_fixed, &ctx, angle(rho), &cfg).unwrap())
            .collect();
        for pair in losses.windows(2) {
            assert!(pair[1] < pair[0], "{pair:?}");
        }
    }

    fn random_instance(seed: u64, n: usize, d: usize, batch: usize, clusters: usize) -> (Matrix, Vec<usize>, Matrix, ConsensusContext) {
        let mut r = rng::stream(seed);
        use rand::Rng;
        // Off-sphere raw rows exercise the normalization Jacobian too.
        let scale = |m: Matrix, r: &mut Stream| {
            let mut m = m;
            for i in 0..m.rows() {
                let k: f64 = r.random_range(0.5..2.0);
                m.row_mut(i).iter_mut().for_each(|x| *x *= k);
            }
            m
        };
        let f = unit_rows(batch, d, &mut r);
        let f = scale(f, &mut r);
        let w = unit_rows(n, d, &mut r);
        let w = scale(w, &mut r);
        let labels = (0..batch).map(|_| r.random_range(0..n)).collect();
        let ctx = ConsensusContext::from_centers(
            0,
            (0..clusters).map(|_| sample_uniform_direction(d, &mut r).unwrap()).collect(),
        );
        (f, labels, w, ctx)
    }

    fn gradcheck(seed: u64, cfg: &LossConfig, rho: f64) -> f64 {
        let (f, labels, w, ctx) = random_instance(seed, 8, 16, 4, 2);
        let g = loss_gradients(&f, &labels, &w, &ctx, angle(rho), cfg, Exec::Sequential).unwrap();
        let ef = finite_diff_check(
            |x| {
                let fm = Matrix::from_vec(f.rows(), f.cols(), x.to_vec()).unwrap();
                consensus_loss(&fm, &labels, &w, &ctx, angle(rho), cfg).unwrap()
            },
            g.d_features.as_slice(),
            f.as_slice(),
            1e-5,
        )
        .unwrap();
        let ew = finite_diff_check(
            |x| {
                let wm = Matrix::from_vec(w.rows(), w.cols(), x.to_vec()).unwrap();
                consensus_loss(&f, &labels, &wm, &ctx, angle(rho), cfg).unwrap()
            },
            g.d_centers.as_slice(),
            w.as_slice(),
            1e-5,
        )
        .unwrap();
        ef.max(ew)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..50 {
            for cfg in [LossConfig::cosface(), LossConfig::arcface()] {
                let e = gradcheck(seed, &cfg, 0.3);
                assert!(e < 1e-5, "seed {seed} {:?}: {e}", cfg.kind);
            }
        }
    }

    #[test]
    fn finite_diff_check_on_quadratic() {
        let a = [3.0, -1.0, 0.5];
        let f = |x: &[f64]| x.iter().zip(&a).map(|(xi, ai)| ai * xi * xi).sum::<f64>();
        let p = [0.7, 2.0, -1.3];
        let grad: Vec<f64> = p.iter().zip(&a).map(|(x, ai)| 2.0 * ai * x).collect();
        assert!(finite_diff_check(f, &grad, &p, 1e-4).unwrap() < 1e-9);
        assert!(finite_diff_check(f, &grad, &p, 0.0).is_err());
    }

    #[test]
    fn gradients_are_tangent_to_the_sphere() {
        let (f, labels, w, ctx) = random_instance(11, 8, 16, 4, 2);
        let g = loss_gradients(&f, &labels, &w, &ctx, angle(0.4), &LossConfig::arcface(), Exec::Parallel).unwrap();
        for i in 0..f.rows() {
            let radial = linalg::dot(f.row(i), g.d_features.row(i));
            assert!(radial.abs() < 1e-12 * (1.0 + linalg::norm(g.d_features.row(i))));
        }
        for j in 0..w.rows() {
            let radial = linalg::dot(w.row(j), g.d_centers.row(j));
            assert!(radial.abs() < 1e-12 * (1.0 + linalg::norm(g.d_centers.row(j))));
        }
    }

    #[test]
    fn exec_policies_agree_bitwise() {
        let (f, labels, w, ctx) = random_instance(12, 8, 16, 4, 2);
        let cfg = LossConfig::cosface();
        let a = loss_gradients(&f, &labels, &w, &ctx, angle(0.4), &cfg, Exec::Sequential).unwrap();
        let b = loss_gradients(&f, &labels, &w, &ctx, angle(0.4), &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn consensus_dominates_and_is_monotone_in_clusters(seed in any::<u64>(), k in 0usize..4, rho in 0.1f64..1.5) {
            let (f, labels, w, ctx) = random_instance(seed, 6, 8, 3, k);
            let cfg = LossConfig::cosface();
            let base = classification_loss(&f, &labels, &w, &cfg).unwrap();
            let with = consensus_loss(&f, &labels, &w, &ctx, angle(rho), &cfg).unwrap();
            if k == 0 {
                prop_assert_eq!(base, with);
            } else {
                prop_assert!(with > base);
            }
            let mut more = ctx.centers().to_vec();
            more.push(UnitVector::basis(8, 0).unwrap());
            let bigger = consensus_loss(&f, &labels, &w, &ConsensusContext::from_centers(0, more), angle(rho), &cfg).unwrap();
            prop_assert!(bigger >= with);
        }

        #[test]
        fn loss_invariant_to_cluster_and_negative_order(seed in any::<u64>()) {
            let (f, labels, w, ctx) = random_instance(seed, 5, 6, 3, 3);
            let cfg = LossConfig::arcface();
            let a = consensus_loss(&f, &labels, &w, &ctx, angle(0.7), &cfg).unwrap();
            let mut rev = ctx.centers().to_vec();
            rev.reverse();
            let b = consensus_loss(&f, &labels, &w, &ConsensusContext::from_centers(0, rev), angle(0.7), &cfg).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            // Swap two class rows and relabel accordingly.
            let mut rows: Vec<Vec<f64>> = w.iter_rows().map(<[f64]>::to_vec).collect();
            rows.swap(0, 4);
            let relabeled: Vec<usize> = labels.iter().map(|&y| match y { 0 => 4, 4 => 0, y => y }).collect();
            let ws = Matrix::from_rows(&rows).unwrap();
            let c = consensus_loss(&f, &relabeled, &ws, &ctx, angle(0.7), &cfg).unwrap();
            prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
