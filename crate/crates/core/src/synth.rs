//! Synthetic federations, verification scoring and the nearest-neighbor attack.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::exec::Exec;
use crate::geometry::{normalize, sample_uniform_direction, Angle, UnitVector};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub clients: usize,
    pub identities_per_client: usize,
    pub train_per_identity: usize,
    pub eval_per_identity: usize,
    /// Within-class concentration; per-coordinate noise variance is `1/κ`.
    /// `f64::INFINITY` gives noise-free samples.
    pub kappa: f64,
    /// Dimension identity directions are drawn in.
    pub latent_dim: usize,
    /// Dimension of the raw inputs (`≥ latent_dim`).
    pub input_dim: usize,
    /// Norm of a constant vector added to every input.
    pub domain_offset: f64,
    /// Norm of a per-client constant vector added to that client's inputs.
    pub client_offset: f64,
    /// Identities in the optional shared shard (0 disables it).
    pub public_identities: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            clients: 4,
            identities_per_client: 64,
            train_per_identity: 8,
            eval_per_identity: 4,
            kappa: 64.0,
            latent_dim: 32,
            input_dim: 64,
            domain_offset: 0.0,
            client_offset: 0.0,
            public_identities: 0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(domain("clients must be >= 1"));
        }
        if self.identities_per_client == 0 {
            return Err(domain("identities_per_client must be >= 1"));
        }
        if self.train_per_identity == 0 {
            return Err(domain("train_per_identity must be >= 1"));
        }
        if !(self.kappa > 0.0) {
            return Err(domain(format!("kappa must be > 0 (got {})", self.kappa)));
        }
        if self.latent_dim < 2 {
            return Err(domain("latent_dim must be >= 2"));
        }
        if self.input_dim < self.latent_dim {
            return Err(domain(format!(
                "input_dim {} is smaller than latent_dim {}",
                self.input_dim, self.latent_dim
            )));
        }
        for (name, v) in [("domain_offset", self.domain_offset), ("client_offset", self.client_offset)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(domain(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn identities(&self) -> usize {
        self.clients * self.identities_per_client
    }
}

/// Raw inputs with dense local labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub client: usize,
    /// Global identity id of each local label.
    pub identities: Vec<usize>,
    /// Latent identity directions, indexed by local label.
    pub directions: Vec<UnitVector>,
    pub train: Split,
    pub eval: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFederation {
    pub params: SyntheticParams,
    /// `input_dim × latent_dim`, orthonormal columns.
    pub lift: Matrix,
    pub offset: Vec<f64>,
    /// Per-client offsets, already including `offset`.
    pub client_offsets: Vec<Vec<f64>>,
    pub clients: Vec<ClientData>,
    pub public: Option<ClientData>,
}

impl SyntheticFederation {
    /// Map a latent vector of `client` to input space.
    pub fn lift_vector(&self, client: usize, v: &[f64]) -> Vec<f64> {
        let mut x = self.lift.mul_vec(v);
        x.iter_mut().zip(&self.client_offsets[client]).for_each(|(a, b)| *a += b);
        x
    }

    pub fn identity_directions(&self) -> Vec<(usize, UnitVector)> {
        self.clients
            .iter()
            .flat_map(|c| c.identities.iter().copied().zip(c.directions.iter().cloned()))
            .collect()
    }
}

/// Random `rows × cols` matrix with orthonormal columns (Gram-Schmidt on Gaussians).
pub fn random_isometry<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    if cols > rows {
        return Err(domain(format!("cannot embed {cols} dimensions isometrically in {rows}")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let c = linalg::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        if let Ok(u) = normalize(&v) {
            basis.push(u.into_inner());
        }
    }
    let mut m = Matrix::zeros(rows, cols);
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            m.set(i, j, x);
        }
    }
    Ok(m)
}

fn draw_sample<R: Rng + ?Sized>(dir: &UnitVector, std: f64, rng: &mut R) -> Result<Vec<f64>> {
    if std == 0.0 {
        return Ok(dir.as_slice().to_vec());
    }
    loop {
        let v: Vec<f64> = dir.as_slice().iter().map(|&x| x + std * rng.sample::<f64, _>(StandardNormal)).collect();
        if let Ok(u) = normalize(&v) {
            return Ok(u.into_inner());
        }
    }
}

fn draw_split<R: Rng + ?Sized>(
    dirs: &[UnitVector],
    per_identity: usize,
    std: f64,
    lift: &Matrix,
    offset: &[f64],
    rng: &mut R,
) -> Result<Split> {
    let mut data = Vec::with_capacity(dirs.len() * per_identity * lift.rows());
    let mut labels = Vec::with_capacity(dirs.len() * per_identity);
    for (label, dir) in dirs.iter().enumerate() {
        for _ in 0..per_identity {
            let z = draw_sample(dir, std, rng)?;
            let mut x = lift.mul_vec(&z);
            x.iter_mut().zip(offset).for_each(|(a, b)| *a += b);
            data.extend(x);
            labels.push(label);
        }
    }
    Ok(Split { inputs: Matrix::from_vec(labels.len(), lift.rows(), data)?, labels })
}

/// Identity directions are drawn uniformly, then dealt round-robin so that
/// neighbors on the sphere usually belong to different clients.
pub fn generate_federation<R: Rng + ?Sized>(params: &SyntheticParams, rng: &mut R) -> Result<SyntheticFederation> {
    params.validate()?;
    let c = params.clients;
    let total = params.identities();
    let lift = random_isometry(params.input_dim, params.latent_dim, rng)?;
    let scaled = |norm: f64, rng: &mut R| -> Result<Vec<f64>> {
        Ok(sample_uniform_direction(params.input_dim, rng)?.as_slice().iter().map(|x| x * norm).collect())
    };
    let offset = scaled(params.domain_offset, rng)?;
    let client_offsets: Vec<Vec<f64>> = (0..c)
        .map(|_| Ok(scaled(params.client_offset, rng)?.iter().zip(&offset).map(|(a, b)| a + b).collect()))
        .collect::<Result<_>>()?;
    let std = if params.kappa.is_infinite() { 0.0 } else { params.kappa.recip().sqrt() };

    let dirs: Vec<UnitVector> =
        (0..total).map(|_| sample_uniform_direction(params.latent_dim, rng)).collect::<Result<_>>()?;

    let mut clients = Vec::with_capacity(c);
    for client in 0..c {
        let identities: Vec<usize> = (client..total).step_by(c).collect();
        let directions: Vec<UnitVector> = identities.iter().map(|&g| dirs[g].clone()).collect();
        let train = draw_split(&directions, params.train_per_identity, std, &lift, &client_offsets[client], rng)?;
        let eval = draw_split(&directions, params.eval_per_identity, std, &lift, &client_offsets[client], rng)?;
        clients.push(ClientData { client, identities, directions, train, eval });
    }

    let public = if params.public_identities > 0 {
        let directions: Vec<UnitVector> = (0..params.public_identities)
            .map(|_| sample_uniform_direction(params.latent_dim, rng))
            .collect::<Result<_>>()?;
        let train = draw_split(&directions, params.train_per_identity, std, &lift, &offset, rng)?;
        let eval = draw_split(&directions, 0, std, &lift, &offset, rng)?;
        Some(ClientData { client: c, identities: (total..total + directions.len()).collect(), directions, train, eval })
    } else {
        None
    };

    Ok(SyntheticFederation { params: params.clone(), lift, offset, client_offsets, clients, public })
}

/// Every evaluation sample of the federation, tagged with its owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPool {
    pub inputs: Matrix,
    pub identity: Vec<usize>,
    pub client: Vec<usize>,
}

impl EvalPool {
    pub fn from_federation(fed: &SyntheticFederation) -> Result<Self> {
        let d = fed.params.input_dim;
        let mut data = Vec::new();
        let mut identity = Vec::new();
        let mut client = Vec::new();
        for c in &fed.clients {
            data.extend_from_slice(c.eval.inputs.as_slice());
            identity.extend(c.eval.labels.iter().map(|&l| c.identities[l]));
            client.extend(std::iter::repeat_n(c.client, c.eval.len()));
        }
        Ok(Self { inputs: Matrix::from_vec(identity.len(), d, data)?, identity, client })
    }

    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationPairs {
    pub pairs: Vec<Pair>,
}

/// Which sample pairs count as candidate negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeScope {
    /// Different owners.
    CrossClient,
    /// Same owner, different identity.
    WithinClient,
}

impl VerificationPairs {
    /// All same-identity pairs, plus `negatives` distinct pairs drawn
    /// uniformly among samples owned by different clients.
    pub fn cross_client<R: Rng + ?Sized>(pool: &EvalPool, negatives: usize, rng: &mut R) -> Result<Self> {
        Self::sample(pool, negatives, NegativeScope::CrossClient, rng)
    }

    pub fn sample<R: Rng + ?Sized>(pool: &EvalPool, negatives: usize, scope: NegativeScope, rng: &mut R) -> Result<Self> {
        let n = pool.len();
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if pool.identity[a] == pool.identity[b] {
                    pairs.push(Pair { a, b, same: true });
                }
            }
        }
        let eligible = |a: usize, b: usize| match scope {
            NegativeScope::CrossClient => pool.client[a] != pool.client[b],
            NegativeScope::WithinClient => pool.client[a] == pool.client[b] && pool.identity[a] != pool.identity[b],
        };
        let possible = (0..n).map(|a| (a + 1..n).filter(|&b| eligible(a, b)).count()).sum::<usize>();
        if negatives > possible {
            return Err(domain(format!("{negatives} negative pairs requested, only {possible} exist")));
        }
        let mut seen = BTreeSet::new();
        while seen.len() < negatives {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b || !eligible(a, b) {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                pairs.push(Pair { a: key.0, b: key.1, same: false });
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far_target: f64,
    pub threshold: f64,
    pub tar: f64,
    pub far: f64,
}

/// Fractions of positive and negative scores strictly above `threshold`.
pub fn rates_at_threshold(scored: &[(f64, bool)], threshold: f64) -> (f64, f64) {
    let (mut tp, mut p, mut fp, mut n) = (0usize, 0usize, 0usize, 0usize);
    for &(s, same) in scored {
        if same {
            p += 1;
            tp += (s > threshold) as usize;
        } else {
            n += 1;
            fp += (s > threshold) as usize;
        }
    }
    (tp as f64 / p.max(1) as f64, fp as f64 / n.max(1) as f64)
}

/// Accept iff score > τ, with τ the lowest negative score that keeps the
/// false-accept fraction at or below each target.
pub fn tar_at_far(scored: &[(f64, bool)], far_targets: &[f64]) -> Result<Vec<TarAtFar>> {
    let mut neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let positives = scored.len() - neg.len();
    if neg.is_empty() || positives == 0 {
        return Err(Error::DegenerateInput("verification needs both positive and negative pairs".into()));
    }
    if let Some(t) = far_targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(domain(format!("FAR target {t} outside [0, 1]")));
    }
    neg.sort_by(|a, b| b.total_cmp(a));
    far_targets
        .iter()
        .map(|&target| {
            let k = (target * neg.len() as f64).floor() as usize;
            let threshold = if k >= neg.len() { f64::NEG_INFINITY } else { neg[k] };
            let (tar, far) = rates_at_threshold(scored, threshold);
            Ok(TarAtFar { far_target: target, threshold, tar, far })
        })
        .collect()
}

/// Cosine score of each pair given unit-norm embedding rows.
pub fn score_pairs(embeddings: &Matrix, pairs: &VerificationPairs, exec: Exec) -> Result<Vec<(f64, bool)>> {
    if let Some(p) = pairs.pairs.iter().find(|p| p.a.max(p.b) >= embeddings.rows()) {
        return Err(Error::ShapeMismatch(format!(
            "pair ({}, {}) indexes past {} embeddings",
            p.a,
            p.b,
            embeddings.rows()
        )));
    }
    Ok(exec.map_slice(&pairs.pairs, |p| (linalg::dot(embeddings.row(p.a), embeddings.row(p.b)), p.same)))
}

pub fn verification_eval(
    embeddings: &Matrix,
    pairs: &VerificationPairs,
    far_targets: &[f64],
    exec: Exec,
) -> Result<Vec<TarAtFar>> {
    tar_at_far(&score_pairs(embeddings, pairs, exec)?, far_targets)
}

/// Smallest angle between class centers owned by different clients.
pub fn cross_client_margin(centers: &[Vec<UnitVector>]) -> Result<Angle> {
    if centers.len() < 2 {
        return Err(domain("cross-client margin needs at least two clients"));
    }
    let mut best = f64::NEG_INFINITY;
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            for u in a {
                for v in b {
                    if u.dim() != v.dim() {
                        return Err(Error::DimensionMismatch { expected: u.dim(), actual: v.dim() });
                    }
                    best = best.max(u.dot(v));
                }
            }
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::EmptyInput("client center sets"));
    }
    Ok(Angle::from_cos(best))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    /// One entry per identity.
    Centroid,
    /// Exactly this many entries per identity.
    Samples(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub identity: usize,
    pub vector: UnitVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGallery {
    entries: Vec<GalleryEntry>,
    mode: GalleryMode,
}

impl AttackGallery {
    pub fn new(entries: Vec<GalleryEntry>, mode: GalleryMode) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyInput("attack gallery"))?;
        let d = first.vector.dim();
        if let Some(e) = entries.iter().find(|e| e.vector.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, actual: e.vector.dim() });
        }
        let per = match mode {
            GalleryMode::Centroid => 1,
            GalleryMode::Samples(k) if k > 0 => k,
            GalleryMode::Samples(_) => return Err(domain("samples per identity must be >= 1")),
        };
        let mut counts = std::collections::BTreeMap::new();
        for e in &entries {
            *counts.entry(e.identity).or_insert(0usize) += 1;
        }
        if let Some((id, k)) = counts.iter().find(|(_, &k)| k != per) {
            return Err(domain(format!("identity {id} has {k} gallery entries, expected {per}")));
        }
        Ok(Self { entries, mode })
    }

    /// Centroid gallery over `known` plus `distractors` uniformly random
    /// identities numbered after the largest known id.
    pub fn with_distractors<R: Rng + ?Sized>(
        known: &[(usize, UnitVector)],
        distractors: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = known.first().ok_or(Error::EmptyInput("attack gallery"))?;
        let d = first.1.dim();
        let next = known.iter().map(|k| k.0).max().unwrap_or(0) + 1;
        let mut entries: Vec<GalleryEntry> =
            known.iter().map(|(identity, v)| GalleryEntry { identity: *identity, vector: v.clone() }).collect();
        for i in 0..distractors {
            entries.push(GalleryEntry { identity: next + i, vector: sample_uniform_direction(d, rng)? });
        }
        Self::new(entries, GalleryMode::Centroid)
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn mode(&self) -> GalleryMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.entries[0].vector.dim()
    }

    pub fn identity_count(&self) -> usize {
        self.entries.len()
            / match self.mode {
                GalleryMode::Centroid => 1,
                GalleryMode::Samples(k) => k,
            }
    }

    /// Distinct identities of the `k` most cosine-similar entries, best first
    /// (ties broken by entry order).
    pub fn top_identities(&self, query: &[f64], k: usize) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> =
            self.entries.iter().enumerate().map(|(i, e)| (linalg::dot(e.vector.as_slice(), query), i)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut out = Vec::with_capacity(k);
        for (_, i) in scored {
            let id = self.entries[i].identity;
            if !out.contains(&id) {
                out.push(id);
                if out.len() == k {
                    break;
                }
            }
        }
        out
    }
}

/// A released vector and the identities it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub vector: Vec<f64>,
    pub identities: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub k: usize,
    pub gallery_identities: usize,
    /// Fraction of each exposure's identities found in its top-k.
    pub per_exposure: Vec<f64>,
    pub success_rate: f64,
}

pub fn knn_attack(exposed: &[Exposure], gallery: &AttackGallery, k: usize, exec: Exec) -> Result<AttackReport> {
    if k == 0 {
        return Err(domain("k must be >= 1"));
    }
    if exposed.is_empty() {
        return Err(Error::EmptyInput("exposed vectors"));
    }
    if let Some(e) = exposed.iter().find(|e| e.vector.len() != gallery.dim()) {
        return Err(Error::DimensionMismatch { expected: gallery.dim(), actual: e.vector.len() });
    }
    if exposed.iter().any(|e| e.identities.is_empty()) {
        return Err(Error::EmptyInput("exposure identities"));
    }
    let per_exposure = exec.map_slice(exposed, |e| {
        let top = gallery.top_identities(&e.vector, k);
        let hits = e.identities.iter().filter(|id| top.contains(id)).count();
        hits as f64 / e.identities.len() as f64
    });
    let success_rate = per_exposure.iter().sum::<f64>() / per_exposure.len() as f64;
    Ok(AttackReport { k, gallery_identities: gallery.identity_count(), per_exposure, success_rate })
}

/// Shuffled copy of `0..n` (minibatch order).
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
