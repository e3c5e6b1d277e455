//! Gaussian-mechanism calibration, noise, and sequential-composition accounting.
//!
//! A DPLC query releases the mean `p` of `|S|` unit class centers that all lie
//! within `ρ` of a common seed. Swapping one member moves `p` by at most
//! `(1/|S|)·‖w − w'‖`, and any two members are at most `2ρ` apart, which gives
//! the tight sensitivity `(2/|S|)·sin ρ`. Bounding each member against the seed
//! instead gives the weak sensitivity `(4/|S|)·sin(ρ/2)`. The two differ by the
//! factor `cos(ρ/2)`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::Angle;
use crate::special::normal_cdf;

pub const DEFAULT_DELTA: f64 = 5e-5;

pub type ClientId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(domain(format!("epsilon must be > 0 (got {epsilon})")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(domain(format!("delta must be in (0, 1) (got {delta})")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `√(2 ln(1.25/δ)) / ε`, the Gaussian-mechanism multiplier on sensitivity.
    fn noise_multiplier(&self) -> f64 {
        (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Tight,
    Weak,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismCalibration {
    pub sigma: f64,
    pub sensitivity: f64,
    pub budget: PrivacyBudget,
    pub bound: BoundKind,
}

impl MechanismCalibration {
    /// Minimal σ for a given l2-sensitivity.
    pub fn for_sensitivity(sensitivity: f64, budget: PrivacyBudget, bound: BoundKind) -> Self {
        Self { sigma: sensitivity * budget.noise_multiplier(), sensitivity, budget, bound }
    }
}

fn check_cap(cluster_size: usize, rho: Angle) -> Result<()> {
    if cluster_size == 0 {
        return Err(domain("cluster size must be >= 1"));
    }
    if rho.radians() > FRAC_PI_2 {
        return Err(domain(format!("rho {} exceeds pi/2", rho.radians())));
    }
    Ok(())
}

/// σ ≥ (2/(|S|ε))·√((1−cos 2ρ)·ln(1.25/δ)).
pub fn sigma_tight(cluster_size: usize, rho: Angle, budget: PrivacyBudget) -> Result<MechanismCalibration> {
    check_cap(cluster_size, rho)?;
    // √(2 − 2cos 2ρ) = 2 sin ρ on [0, π/2]
    let sensitivity = 2.0 * rho.radians().sin() / cluster_size as f64;
    Ok(MechanismCalibration::for_sensitivity(sensitivity, budget, BoundKind::Tight))
}

/// σ ≥ (4/(|S|ε))·√((1−cos ρ)·ln(1.25/δ)).
pub fn sigma_weak(cluster_size: usize, rho: Angle, budget: PrivacyBudget) -> Result<MechanismCalibration> {
    check_cap(cluster_size, rho)?;
    // 2·√(2 − 2cos ρ) = 4 sin(ρ/2)
    let sensitivity = 4.0 * (0.5 * rho.radians()).sin() / cluster_size as f64;
    Ok(MechanismCalibration::for_sensitivity(sensitivity, budget, BoundKind::Weak))
}

/// Per-center release of a raw class center: sensitivity 2 (sphere diameter).
pub fn naive_sigma(budget: PrivacyBudget) -> MechanismCalibration {
    MechanismCalibration::for_sensitivity(2.0, budget, BoundKind::Naive)
}

/// `p + v`, `v ~ N(0, σ² I)`. σ = 0 returns `p` without touching the stream.
pub fn gaussian_perturb<R: Rng + ?Sized>(p: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(domain(format!("sigma must be >= 0 (got {sigma})")));
    }
    if sigma == 0.0 {
        return Ok(p.to_vec());
    }
    Ok(p.iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            x + sigma * z
        })
        .collect())
}

/// Normal approximation of `P(‖v‖₂ ≤ r)` for `v ~ N(0, σ² I_d)`, `d ≥ 50`.
pub fn norm_tail_probability(r: f64, sigma: f64, d: usize) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(domain(format!("radius must be >= 0 (got {r})")));
    }
    if !(sigma > 0.0) {
        return Err(domain(format!("sigma must be > 0 (got {sigma})")));
    }
    if d < 50 {
        return Err(domain(format!("normal approximation needs d >= 50 (got {d})")));
    }
    let k = d as f64 - 1.0;
    let z = r * r / (sigma * sigma * (2.0 * k).sqrt()) - (k / 2.0).sqrt();
    Ok(normal_cdf(z))
}

/// Lower bound on `cos(p, p + v)` when `‖v‖ ≤ ‖p‖`.
pub fn cosine_floor(p_norm: f64, v_norm: f64) -> Result<f64> {
    if !(p_norm > 0.0) || !(v_norm >= 0.0) {
        return Err(domain(format!("need p_norm > 0, v_norm >= 0 (got {p_norm}, {v_norm})")));
    }
    if v_norm > p_norm {
        return Err(Error::FloorUndefined { p_norm, v_norm });
    }
    let a = v_norm / p_norm;
    Ok((1.0 - a * a).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub client: ClientId,
    pub queries: usize,
    pub budget: PrivacyBudget,
}

impl LedgerEntry {
    pub fn cost(&self) -> (f64, f64) {
        let q = self.queries as f64;
        (q * self.budget.epsilon, q * self.budget.delta)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spent {
    pub epsilon: f64,
    pub delta: f64,
}

/// Per-client sequential composition of per-query budgets.
///
/// Totals are summed over entries in a canonical order, so they do not
/// depend on the order in which entries were recorded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Charges `queries` releases at `budget` to `client`. Zero queries is a no-op.
    pub fn compose(&mut self, client: ClientId, round: usize, budget: PrivacyBudget, queries: usize) {
        if queries == 0 {
            return;
        }
        self.entries.push(LedgerEntry { round, client, queries, budget });
    }

    pub fn merge(&mut self, other: &PrivacyLedger) {
        self.entries.extend_from_slice(&other.entries);
    }

    fn canonical(&self) -> Vec<LedgerEntry> {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| {
            (a.client, a.round, a.queries)
                .cmp(&(b.client, b.round, b.queries))
                .then(a.budget.epsilon.total_cmp(&b.budget.epsilon))
                .then(a.budget.delta.total_cmp(&b.budget.delta))
        });
        e
    }

    pub fn totals(&self) -> BTreeMap<ClientId, Spent> {
        let mut out: BTreeMap<ClientId, Spent> = BTreeMap::new();
        for e in self.canonical() {
            let (de, dd) = e.cost();
            let s = out.entry(e.client).or_default();
            s.epsilon += de;
            s.delta += dd;
        }
        out
    }

    pub fn total(&self, client: ClientId) -> Spent {
        self.totals().get(&client).copied().unwrap_or_default()
    }
}
