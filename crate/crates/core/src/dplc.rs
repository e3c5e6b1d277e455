//! Differentially private local clustering (DPLC).
//!
//! Greedy spherical-cap covering of a client's class centers: each query picks
//! the center with the most neighbors within `ρ`, releases the mean of that
//! neighborhood through the Gaussian mechanism, then drops every remaining
//! center within `ρ` of the (noise-free) mean direction. Stops after `Q`
//! queries or once the densest cap holds fewer than `T` centers.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{self, ClientId, MechanismCalibration, PrivacyBudget, Spent};
use crate::error::{domain, Error, Result};
use crate::exec::Exec;
use crate::geometry::{normalize, Angle, CenterMatrix, UnitVector};
use crate::linalg::{self, mean_of_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DplcMode {
    /// Release `normalize(p + v)` with σ from the tight bound.
    Sanitized,
    /// Release `normalize(p)`; no noise, no privacy charge.
    NoiseFree,
    /// Skip clustering; release every `w_i + v` at the naive σ.
    NaivePerCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DplcParams {
    pub rho: Angle,
    pub min_cluster_size: usize,
    pub max_queries: usize,
    pub budget: PrivacyBudget,
    pub mode: DplcMode,
}

impl DplcParams {
    pub fn new(
        rho: Angle,
        min_cluster_size: usize,
        max_queries: usize,
        budget: PrivacyBudget,
        mode: DplcMode,
    ) -> Result<Self> {
        let p = Self { rho, min_cluster_size, max_queries, budget, mode };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rho.radians();
        if !(r > 0.0 && r <= FRAC_PI_2) {
            return Err(domain(format!("rho must be in (0, pi/2] (got {r})")));
        }
        if self.min_cluster_size == 0 {
            return Err(domain("minimum cluster size must be >= 1"));
        }
        if self.max_queries == 0 {
            return Err(domain("maximum query count must be >= 1"));
        }
        Ok(())
    }
}

impl Default for DplcParams {
    /// T = 512, Q = 1, ρ = 1.3, ε = 1, δ = 5e-5.
    fn default() -> Self {
        Self {
            rho: Angle::new(1.3).expect("valid angle"),
            min_cluster_size: 512,
            max_queries: 1,
            budget: PrivacyBudget::new(1.0, dp::DEFAULT_DELTA).expect("valid budget"),
            mode: DplcMode::Sanitized,
        }
    }
}

/// One released cluster. This is the only clustering artifact that leaves a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizedCluster {
    pub center: UnitVector,
    pub margin: Angle,
    pub covered_count: usize,
    pub query_index: usize,
    pub client: ClientId,
    pub round: usize,
}

/// Client-local result of a DPLC run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DplcReport {
    pub clusters: Vec<SanitizedCluster>,
    /// Noise-free means `p`; populated only in [`DplcMode::NoiseFree`].
    pub raw_centers: Option<Vec<Vec<f64>>>,
    /// Un-normalized `w_i + v`; populated only in [`DplcMode::NaivePerCenter`].
    pub naive_release: Option<Vec<Vec<f64>>>,
    pub queries_used: usize,
    pub ledger_delta: Spent,
    /// Center indexes removed by each query, in query order.
    pub removed: Vec<Vec<usize>>,
    /// `cos(p̂, p/‖p‖)` per emitted cluster. Local diagnostic only.
    pub fidelity: Vec<f64>,
}

/// `θ_ij = arccos(w_iᵀ w_j)` for all pairs, computed once per run.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMatrix {
    n: usize,
    data: Vec<f64>,
}

impl AngleMatrix {
    pub fn compute(w: &CenterMatrix, exec: Exec) -> Self {
        let n = w.n();
        let rows = exec.map_range(n, |i| {
            let wi = w.row(i);
            (0..n)
                .map(|j| if i == j { 0.0 } else { Angle::from_cos(linalg::dot(wi, w.row(j))).radians() })
                .collect::<Vec<f64>>()
        });
        Self { n, data: rows.concat() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn pairwise_angles(w: &CenterMatrix, exec: Exec) -> AngleMatrix {
    AngleMatrix::compute(w, exec)
}

/// Densest neighborhood among the active centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Cap {
    pub seed: usize,
    pub members: Vec<usize>,
    /// Arithmetic mean of the member rows, not normalized.
    pub mean: Vec<f64>,
}

/// Seed maximizing `|{j active : θ_ij ≤ ρ}|` (seed included); ties go to the
/// lowest index.
pub fn densest_cap(
    w: &CenterMatrix,
    angles: &AngleMatrix,
    active: &[bool],
    rho: Angle,
    exec: Exec,
) -> Result<Cap> {
    if active.len() != w.n() || angles.n() != w.n() {
        return Err(Error::DimensionMismatch { expected: w.n(), actual: active.len() });
    }
    let r = rho.radians();
    let counts = exec.map_range(w.n(), |i| {
        if !active[i] {
            return 0usize;
        }
        angles.row(i).iter().zip(active).filter(|&(&t, &a)| a && t <= r).count()
    });
    let (seed, &best) = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| active[i])
        .fold(None, |acc: Option<(usize, &usize)>, (i, c)| match acc {
            Some((_, b)) if b >= c => acc,
            _ => Some((i, c)),
        })
        .ok_or(Error::EmptyInput("no active centers"))?;
    let members: Vec<usize> = angles
        .row(seed)
        .iter()
        .enumerate()
        .filter(|&(j, &t)| active[j] && t <= r)
        .map(|(j, _)| j)
        .collect();
    debug_assert_eq!(members.len(), best);
    let mean = mean_of_rows(w.matrix(), &members);
    Ok(Cap { seed, members, mean })
}

/// `normalize(p + v)` with `v ~ N(0, σ²I)`, σ from the tight bound for `|S|`.
pub fn sanitize_center<R: Rng + ?Sized>(
    p: &[f64],
    cluster_size: usize,
    rho: Angle,
    budget: PrivacyBudget,
    rng: &mut R,
) -> Result<(UnitVector, MechanismCalibration)> {
    let cal = dp::sigma_tight(cluster_size, rho, budget)?;
    let noisy = dp::gaussian_perturb(p, cal.sigma, rng)?;
    Ok((normalize(&noisy)?, cal))
}

pub fn dplc_run<R: Rng + ?Sized>(
    w: &CenterMatrix,
    params: &DplcParams,
    rng: &mut R,
    client: ClientId,
    round: usize,
    exec: Exec,
) -> Result<DplcReport> {
    params.validate()?;
    if params.mode == DplcMode::NaivePerCenter {
        return naive_release(w, params, rng, client, round);
    }

    let n = w.n();
    let angles = AngleMatrix::compute(w, exec);
    let mut active = vec![true; n];
    let mut clusters = Vec::new();
    let mut raw = Vec::new();
    let mut removed = Vec::new();
    let mut fidelity = Vec::new();
    let r = params.rho.radians();

    for q in 0..params.max_queries {
        if !active.iter().any(|&a| a) {
            break;
        }
        let cap = densest_cap(w, &angles, &active, params.rho, exec)?;
        if cap.members.len() < params.min_cluster_size {
            break;
        }
        let direction = normalize(&cap.mean)?;
        let center = match params.mode {
            DplcMode::Sanitized => {
                sanitize_center(&cap.mean, cap.members.len(), params.rho, params.budget, rng)?.0
            }
            _ => direction.clone(),
        };
        fidelity.push(center.dot(&direction));

        let gone: Vec<usize> = (0..n)
            .filter(|&i| active[i] && Angle::from_cos(linalg::dot(w.row(i), direction.as_slice())).radians() <= r)
            .collect();
        for &i in &gone {
            active[i] = false;
        }
        removed.push(gone);
        raw.push(cap.mean);
        clusters.push(SanitizedCluster {
            center,
            margin: params.rho,
            covered_count: cap.members.len(),
            query_index: q,
            client,
            round,
        });
    }

    let queries_used = clusters.len();
    let ledger_delta = match params.mode {
        DplcMode::Sanitized => Spent {
            epsilon: queries_used as f64 * params.budget.epsilon(),
            delta: queries_used as f64 * params.budget.delta(),
        },
        _ => Spent::default(),
    };
    Ok(DplcReport {
        clusters,
        raw_centers: (params.mode == DplcMode::NoiseFree).then_some(raw),
        naive_release: None,
        queries_used,
        ledger_delta,
        removed,
        fidelity,
    })
}

fn naive_release<R: Rng + ?Sized>(
    w: &CenterMatrix,
    params: &DplcParams,
    rng: &mut R,
    client: ClientId,
    round: usize,
) -> Result<DplcReport> {
    let cal = dp::naive_sigma(params.budget);
    let mut release = Vec::with_capacity(w.n());
    let mut clusters = Vec::with_capacity(w.n());
    for i in 0..w.n() {
        let noisy = dp::gaussian_perturb(w.row(i), cal.sigma, rng)?;
        clusters.push(SanitizedCluster {
            center: normalize(&noisy)?,
            margin: params.rho,
            covered_count: 1,
            query_index: i,
            client,
            round,
        });
        release.push(noisy);
    }
    let n = w.n() as f64;
    Ok(DplcReport {
        clusters,
        raw_centers: None,
        naive_release: Some(release),
        queries_used: w.n(),
        ledger_delta: Spent { epsilon: n * params.budget.epsilon(), delta: n * params.budget.delta() },
        removed: Vec::new(),
        fidelity: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_uniform_direction;
    use crate::linalg::Matrix;
    use crate::rng;
    use std::f64::consts::PI;

    fn centers(rows: &[Vec<f64>]) -> CenterMatrix {
        CenterMatrix::from_rows_normalized(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn params(rho: f64, t: usize, q: usize, mode: DplcMode) -> DplcParams {
        DplcParams::new(Angle::new(rho).unwrap(), t, q, PrivacyBudget::new(1.0, 5e-5).unwrap(), mode)
            .unwrap()
    }

    #[test]
    fn params_validation() {
        let b = PrivacyBudget::new(1.0, 5e-5).unwrap();
        let m = DplcMode::Sanitized;
        assert!(DplcParams::new(Angle::new(0.0).unwrap(), 1, 1, b, m).is_err());
        assert!(DplcParams::new(Angle::new(1.6).unwrap(), 1, 1, b, m).is_err());
        assert!(DplcParams::new(Angle::new(1.0).unwrap(), 0, 1, b, m).is_err());
        assert!(DplcParams::new(Angle::new(1.0).unwrap(), 1, 0, b, m).is_err());
        let d = DplcParams::default();
        assert_eq!((d.min_cluster_size, d.max_queries, d.rho.radians()), (512, 1, 1.3));
    }

    #[test]
    fn pairwise_angle_examples() {
        let same = centers(&vec![vec![1.0, 2.0, 0.5]; 4]);
        let a = pairwise_angles(&same, Exec::Sequential);
        assert!(a.data.iter().all(|&t| t.abs() < 1e-7));

        let ortho = centers(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let a = pairwise_angles(&ortho, Exec::Parallel);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { FRAC_PI_2 };
                assert!((a.get(i, j) - want).abs() < 1e-15);
            }
        }

        let deg = |h: f64| vec![h.to_radians().cos(), h.to_radians().sin()];
        let planar = centers(&[deg(0.0), deg(30.0), deg(90.0)]);
        let a = pairwise_angles(&planar, Exec::Sequential);
        assert!((a.get(0, 1) - PI / 6.0).abs() < 1e-12);
        assert!((a.get(0, 2) - PI / 2.0).abs() < 1e-12);
        assert!((a.get(1, 2) - PI / 3.0).abs() < 1e-12);
        assert_eq!(a.get(2, 1), a.get(1, 2));
    }

    #[test]
    fn densest_cap_takes_everything_when_tight() {
        let mut r = rng::stream(3);
        let base = sample_uniform_direction(6, &mut r).unwrap();
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|k| base.as_slice().iter().enumerate().map(|(j, x)| x + 0.01 * ((k * 7 + j) % 5) as f64).collect())
            .collect();
        let w = centers(&rows);
        let angles = pairwise_angles(&w, Exec::Sequential);
        let cap = densest_cap(&w, &angles, &vec![true; 20], Angle::new(1.0).unwrap(), Exec::Sequential).unwrap();
        assert_eq!(cap.members, (0..20).collect::<Vec<_>>());
        let all: Vec<usize> = (0..20).collect();
        assert_eq!(cap.mean, mean_of_rows(w.matrix(), &all));
    }

    #[test]
    fn densest_cap_tie_goes_to_lowest_index() {
        // Two identical-size pairs far apart.
        let w = centers(&[vec![1.0, 0.0], vec![0.99, 0.1], vec![-1.0, 0.0], vec![-0.99, -0.1]]);
        let angles = pairwise_angles(&w, Exec::Sequential);
        let cap = densest_cap(&w, &angles, &[true; 4], Angle::new(0.5).unwrap(), Exec::Sequential).unwrap();
        assert_eq!(cap.seed, 0);
        assert_eq!(cap.members, vec![0, 1]);
        let cap = densest_cap(&w, &angles, &[false, true, true, true], Angle::new(0.5).unwrap(), Exec::Sequential)
            .unwrap();
        assert_eq!(cap.seed, 2);
    }

    #[test]
    fn densest_cap_needs_active_center() {
        let w = centers(&[vec![1.0, 0.0]]);
        let angles = pairwise_angles(&w, Exec::Sequential);
        assert!(densest_cap(&w, &angles, &[false], Angle::new(0.5).unwrap(), Exec::Sequential).is_err());
    }

    #[test]
    fn below_threshold_emits_nothing() {
        let mut r = rng::stream(9);
        let rows: Vec<Vec<f64>> =
            (0..100).map(|_| sample_uniform_direction(16, &mut r).unwrap().into_inner()).collect();
        let w = centers(&rows);
        let rep = dplc_run(&w, &DplcParams::default(), &mut r, 0, 1, Exec::Parallel).unwrap();
        assert!(rep.clusters.is_empty());
        assert_eq!(rep.queries_used, 0);
        assert_eq!(rep.ledger_delta, Spent::default());
    }

    #[test]
    fn noise_free_mode_leaves_stream_untouched() {
        use rand::RngCore;
        let mut r = rng::stream(10);
        let rows: Vec<Vec<f64>> =
            (0..60).map(|_| sample_uniform_direction(3, &mut r).unwrap().into_inner()).collect();
        let w = centers(&rows);
        let p = params(1.0, 5, 3, DplcMode::NoiseFree);
        let mut a = rng::stream(77);
        let rep = dplc_run(&w, &p, &mut a, 0, 1, Exec::Sequential).unwrap();
        assert!(rep.queries_used > 0);
        assert_eq!(a.next_u64(), rng::stream(77).next_u64());
        assert_eq!(rep.ledger_delta, Spent::default());
        assert_eq!(rep.raw_centers.as_ref().map(Vec::len), Some(rep.queries_used));
        let again = dplc_run(&w, &p, &mut rng::stream(1), 0, 1, Exec::Parallel).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn removed_sets_are_disjoint_and_clusters_large_enough() {
        let mut r = rng::stream(21);
        let rows: Vec<Vec<f64>> =
            (0..300).map(|_| sample_uniform_direction(4, &mut r).unwrap().into_inner()).collect();
        let w = centers(&rows);
        let p = params(1.2, 10, 6, DplcMode::Sanitized);
        let rep = dplc_run(&w, &p, &mut r, 3, 7, Exec::Parallel).unwrap();
        assert!(rep.queries_used >= 2);
        let mut seen = vec![false; 300];
        for set in &rep.removed {
            assert!(!set.is_empty());
            for &i in set {
                assert!(!seen[i], "center {i} removed twice");
                seen[i] = true;
            }
        }
        for c in &rep.clusters {
            assert!(c.covered_count >= 10);
            assert_eq!((c.client, c.round), (3, 7));
            assert!((linalg::norm(c.center.as_slice()) - 1.0).abs() < 1e-12);
        }
        assert_eq!(rep.ledger_delta.epsilon, rep.queries_used as f64);
        assert!(rep.raw_centers.is_none());
    }

    #[test]
    fn naive_mode_charges_every_center() {
        let mut r = rng::stream(5);
        let rows: Vec<Vec<f64>> =
            (0..12).map(|_| sample_uniform_direction(8, &mut r).unwrap().into_inner()).collect();
        let w = centers(&rows);
        let p = params(1.3, 512, 1, DplcMode::NaivePerCenter);
        let rep = dplc_run(&w, &p, &mut r, 0, 1, Exec::Sequential).unwrap();
        assert_eq!(rep.queries_used, 12);
        assert_eq!(rep.ledger_delta.epsilon, 12.0);
        let rel = rep.naive_release.unwrap();
        assert_eq!(rel.len(), 12);
        // σ ≈ 9: released vectors are nowhere near unit length.
        assert!(rel.iter().all(|v| linalg::norm(v) > 2.0));
    }

    #[test]
    fn raw_mean_norm_within_property_bounds() {
        let mut r = rng::stream(31);
        let rows: Vec<Vec<f64>> =
            (0..400).map(|_| sample_uniform_direction(5, &mut r).unwrap().into_inner()).collect();
        let w = centers(&rows);
        let p = params(0.9, 3, 10, DplcMode::NoiseFree);
        let rep = dplc_run(&w, &p, &mut r, 0, 0, Exec::Parallel).unwrap();
        for c in rep.raw_centers.unwrap() {
            let n = linalg::norm(&c);
            assert!(n > 0.9f64.cos() && n <= 1.0 + 1e-12, "{n}");
        }
    }
}
