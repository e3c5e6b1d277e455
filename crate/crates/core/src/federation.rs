//! Simulated federated training with consensus-aware local objectives.
//!
//! Each round: online clients synchronize to the global embedder, release
//! clusters of their class centers, receive everyone else's clusters, train
//! locally, and the server averages what comes back. Clients never hand
//! their class centers to the server; [`Upload`] has no variant that could
//! carry them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dp::{ClientId, PrivacyLedger, Spent};
use crate::dplc::{dplc_run, DplcMode, DplcParams, SanitizedCluster};
use crate::error::{domain, Error, Result};
use crate::exec::Exec;
use crate::geometry::{normalize, Angle, CenterMatrix, UnitVector};
use crate::linalg::Matrix;
use crate::losses::{loss_gradients, ConsensusContext, LossConfig};
use crate::rng::{self, Domain};
use crate::synth::{
    self, cross_client_margin, EvalPool, NegativeScope, Split, SyntheticFederation, TarAtFar, VerificationPairs,
};

/// Which clusters clients share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// No clusters: conventional federated averaging.
    Phi,
    /// Noise-free cluster directions (non-private reference).
    PhiP,
    /// Sanitized cluster directions.
    PhiHat,
    /// Every class center released with per-center Gaussian noise.
    Naive,
}

impl Mode {
    fn dplc_mode(self) -> Option<DplcMode> {
        match self {
            Mode::Phi => None,
            Mode::PhiP => Some(DplcMode::NoiseFree),
            Mode::PhiHat => Some(DplcMode::Sanitized),
            Mode::Naive => Some(DplcMode::NaivePerCenter),
        }
    }

    fn charges_budget(self) -> bool {
        matches!(self, Mode::PhiHat | Mode::Naive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    FedAvg,
    FedSgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub mode: Mode,
    pub dplc: DplcParams,
    pub loss: LossConfig,
    /// Cap half-angle used by the cluster term of the local loss.
    pub rho: Angle,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub aggregation: Aggregation,
    pub offline_probability: f64,
    pub shared_public_shard: bool,
    pub embedding_dim: usize,
    /// Standard deviation of initial embedder entries, times `sqrt(input_dim)`.
    pub init_scale: f64,
    pub far_targets: Vec<f64>,
    pub negative_pairs: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        let dplc = DplcParams::default();
        Self {
            clients: 4,
            rounds: 10,
            mode: Mode::PhiHat,
            rho: dplc.rho,
            dplc,
            loss: LossConfig::default(),
            learning_rate: 0.1,
            weight_decay: 5e-4,
            batch_size: 32,
            local_epochs: 1,
            aggregation: Aggregation::FedAvg,
            offline_probability: 0.0,
            shared_public_shard: false,
            embedding_dim: 32,
            init_scale: 1.0,
            far_targets: vec![1e-3, 1e-2, 1e-1],
            negative_pairs: 20_000,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(domain("clients must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(domain("rounds must be >= 1"));
        }
        self.dplc.validate()?;
        let r = self.rho.radians();
        if !(r > 0.0 && r <= std::f64::consts::FRAC_PI_2) {
            return Err(domain(format!("rho must be in (0, pi/2] (got {r})")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(domain("learning_rate must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(domain("weight_decay must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.offline_probability) {
            return Err(domain("offline_probability must be in [0, 1]"));
        }
        if self.embedding_dim < 2 {
            return Err(domain("embedding_dim must be >= 2"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(domain("init_scale must be > 0"));
        }
        if self.far_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(domain("FAR targets must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Linear map `d_in → d` followed by normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    weights: Matrix,
}

impl Embedder {
    pub fn new(weights: Matrix) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::EmptyInput("embedder weights"));
        }
        if !weights.is_finite() {
            return Err(domain("embedder weights must be finite"));
        }
        Ok(Self { weights })
    }

    /// Entries `N(0, scale² / d_in)`.
    pub fn random<R: Rng + ?Sized>(output_dim: usize, input_dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let std = scale / (input_dim as f64).sqrt();
        let data = (0..output_dim * input_dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(Matrix::from_vec(output_dim, input_dim, data)?)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Pre-normalization outputs `A x` for each input row.
    pub fn forward(&self, inputs: &Matrix, exec: Exec) -> Result<Matrix> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: inputs.cols() });
        }
        let rows = exec.map_range(inputs.rows(), |i| self.weights.mul_vec(inputs.row(i)));
        Matrix::from_vec(inputs.rows(), self.output_dim(), rows.concat())
    }

    /// Unit-norm embeddings.
    pub fn embed(&self, inputs: &Matrix, exec: Exec) -> Result<Matrix> {
        let mut out = self.forward(inputs, exec)?;
        for i in 0..out.rows() {
            let u = normalize(out.row(i))?;
            out.row_mut(i).copy_from_slice(u.as_slice());
        }
        Ok(out)
    }

    /// `Σ_i g_i x_iᵀ` for output gradients `g_i`.
    pub fn weight_gradient(&self, inputs: &Matrix, d_outputs: &Matrix, exec: Exec) -> Result<Matrix> {
        if inputs.rows() != d_outputs.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} output gradients",
                inputs.rows(),
                d_outputs.rows()
            )));
        }
        let (d, d_in) = (self.output_dim(), self.input_dim());
        let rows = exec.map_range(d, |r| {
            let mut g = vec![0.0; d_in];
            for i in 0..inputs.rows() {
                let s = d_outputs.get(i, r);
                g.iter_mut().zip(inputs.row(i)).for_each(|(a, x)| *a += s * x);
            }
            g
        });
        Matrix::from_vec(d, d_in, rows.concat())
    }

    /// `A ← A − lr·(grad + wd·A)`.
    pub fn sgd_step(&mut self, grad: &Matrix, lr: f64, weight_decay: f64) -> Result<()> {
        let mut step = grad.clone();
        if weight_decay != 0.0 {
            step.as_mut_slice().iter_mut().zip(self.weights.as_slice()).for_each(|(g, a)| *g += weight_decay * a);
        }
        self.weights.axpy(lr, &step)
    }
}

/// Coordinate-wise mean with each coordinate's values sorted before summing,
/// so the result does not depend on the order of the inputs.
pub fn mean_matrix(items: &[&Matrix]) -> Result<Matrix> {
    let first = items.first().ok_or(Error::EmptyInput("models to aggregate"))?;
    let shape = first.shape();
    if let Some(m) = items.iter().find(|m| m.shape() != shape) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", m.shape(), shape)));
    }
    let n = items.len() as f64;
    let mut buf = Vec::with_capacity(items.len());
    let data = (0..shape.0 * shape.1)
        .map(|k| {
            buf.clear();
            buf.extend(items.iter().map(|m| m.as_slice()[k]));
            buf.sort_by(f64::total_cmp);
            if buf[0] == buf[buf.len() - 1] {
                buf[0]
            } else {
                buf.iter().sum::<f64>() / n
            }
        })
        .collect();
    Matrix::from_vec(shape.0, shape.1, data)
}

pub fn server_aggregate_fedavg(models: &[Embedder]) -> Result<Embedder> {
    let weights: Vec<&Matrix> = models.iter().map(Embedder::weights).collect();
    Embedder::new(mean_matrix(&weights)?)
}

/// Client-local state. Deliberately not serializable: the class centers
/// stay on the client.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: ClientId,
    embedder: Embedder,
    centers: Matrix,
    data: Split,
    seed: u64,
}

impl ClientState {
    /// Class centers start at the normalized class means under `embedder`.
    pub fn new(id: ClientId, data: Split, classes: usize, embedder: Embedder, seed: u64, exec: Exec) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyShard(id));
        }
        if let Some(&label) = data.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let emb = embedder.embed(&data.inputs, exec)?;
        let d = embedder.output_dim();
        let mut sums = vec![vec![0.0; d]; classes];
        for (row, &y) in emb.iter_rows().zip(&data.labels) {
            sums[y].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let rows: Vec<Vec<f64>> = sums
            .iter()
            .map(|s| normalize(s).map(UnitVector::into_inner))
            .collect::<Result<_>>()
            .map_err(|_| Error::DegenerateInput(format!("client {id} has a class without usable samples")))?;
        Ok(Self { id, embedder, centers: Matrix::from_rows(&rows)?, data, seed })
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn data(&self) -> &Split {
        &self.data
    }

    fn center_matrix(&self) -> Result<CenterMatrix> {
        CenterMatrix::new(self.centers.clone())
    }

    fn renormalize_centers(&mut self) -> Result<()> {
        for i in 0..self.centers.rows() {
            let u = normalize(self.centers.row(i))?;
            self.centers.row_mut(i).copy_from_slice(u.as_slice());
        }
        Ok(())
    }

    fn gather(&self, idx: &[usize]) -> Result<(Matrix, Vec<usize>)> {
        let d_in = self.data.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d_in);
        for &i in idx {
            data.extend_from_slice(self.data.inputs.row(i));
        }
        Ok((Matrix::from_vec(idx.len(), d_in, data)?, idx.iter().map(|&i| self.data.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalOutcome {
    /// Mean minibatch loss; `None` when no step ran.
    pub loss: Option<f64>,
    pub steps: usize,
}

/// Synchronize to `global`, then run the configured local epochs of minibatch
/// SGD on the consensus loss.
pub fn client_local_round(
    state: &mut ClientState,
    global: &Embedder,
    foreign: &ConsensusContext,
    config: &FederationConfig,
    round: usize,
    exec: Exec,
) -> Result<LocalOutcome> {
    if !foreign.is_empty() && foreign.own() != state.id {
        return Err(domain(format!("cluster context built for client {}, not {}", foreign.own(), state.id)));
    }
    state.embedder = global.clone();
    if state.data.is_empty() {
        return Err(Error::EmptyShard(state.id));
    }
    let mut rng = rng::derive(state.seed, Domain::Training, state.id as u64, round as u64);
    let mut losses = Vec::new();
    for _ in 0..config.local_epochs {
        let order = synth::permutation(state.data.len(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let (x, y) = state.gather(batch)?;
            let f = state.embedder.forward(&x, exec)?;
            let g = loss_gradients(&f, &y, &state.centers, foreign, config.rho, &config.loss, exec)?;
            losses.push(g.loss);
            if config.learning_rate == 0.0 {
                continue;
            }
            let da = state.embedder.weight_gradient(&x, &g.d_features, exec)?;
            state.embedder.sgd_step(&da, config.learning_rate, config.weight_decay)?;
            state.centers.axpy(config.learning_rate, &g.d_centers)?;
            state.renormalize_centers()?;
        }
    }
    let loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    Ok(LocalOutcome { loss, steps: losses.len() })
}

/// Full-shard gradient of the local loss at the frozen broadcast embedder.
/// The client's own class centers take a local step; only the embedder
/// gradient is returned for upload.
pub fn client_gradient(
    state: &mut ClientState,
    global: &Embedder,
    foreign: &ConsensusContext,
    config: &FederationConfig,
    exec: Exec,
) -> Result<(Matrix, f64)> {
    state.embedder = global.clone();
    if state.data.is_empty() {
        return Err(Error::EmptyShard(state.id));
    }
    let f = state.embedder.forward(&state.data.inputs, exec)?;
    let g = loss_gradients(&f, &state.data.labels, &state.centers, foreign, config.rho, &config.loss, exec)?;
    let da = state.embedder.weight_gradient(&state.data.inputs, &g.d_features, exec)?;
    if config.learning_rate != 0.0 {
        state.centers.axpy(config.learning_rate, &g.d_centers)?;
        state.renormalize_centers()?;
    }
    Ok((da, g.loss))
}

/// Everything a client may send to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Upload {
    Clusters { client: ClientId, round: usize, clusters: Vec<SanitizedCluster> },
    Model { client: ClientId, round: usize, embedder: Embedder },
    Gradient { client: ClientId, round: usize, gradient: Matrix },
}

#[derive(Debug, Clone)]
pub struct ServerState {
    global: Embedder,
    clusters: Vec<SanitizedCluster>,
    ledger: PrivacyLedger,
    round: usize,
    transcript: Vec<Upload>,
}

impl ServerState {
    pub fn new(global: Embedder) -> Self {
        Self { global, clusters: Vec::new(), ledger: PrivacyLedger::new(), round: 0, transcript: Vec::new() }
    }

    pub fn global(&self) -> &Embedder {
        &self.global
    }

    pub fn clusters(&self) -> &[SanitizedCluster] {
        &self.clusters
    }

    pub fn ledger(&self) -> &PrivacyLedger {
        &self.ledger
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn transcript(&self) -> &[Upload] {
        &self.transcript
    }

    fn receive(&mut self, upload: Upload) {
        if let Upload::Clusters { clusters, .. } = &upload {
            self.clusters.extend(clusters.iter().cloned());
        }
        self.transcript.push(upload);
    }

    fn models(&self, round: usize) -> Vec<Embedder> {
        self.transcript
            .iter()
            .filter_map(|u| match u {
                Upload::Model { round: r, embedder, .. } if *r == round => Some(embedder.clone()),
                _ => None,
            })
            .collect()
    }

    fn gradients(&self, round: usize) -> Vec<&Matrix> {
        self.transcript
            .iter()
            .filter_map(|u| match u {
                Upload::Gradient { round: r, gradient, .. } if *r == round => Some(gradient),
                _ => None,
            })
            .collect()
    }
}

/// One FedSGD round over the given online clients.
pub fn fedsgd_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    contexts: &[ConsensusContext],
    config: &FederationConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    if clients.len() != contexts.len() {
        return Err(Error::ShapeMismatch(format!("{} clients but {} contexts", clients.len(), contexts.len())));
    }
    if clients.is_empty() {
        return Err(Error::EmptyInput("online clients"));
    }
    let round = server.round;
    let global = server.global.clone();
    let mut slots: Vec<(&mut ClientState, Option<Result<(Matrix, f64)>>)> =
        clients.iter_mut().map(|c| (c, None)).collect();
    exec.for_each_mut(&mut slots, |i, (c, out)| {
        *out = Some(client_gradient(c, &global, &contexts[i], config, exec));
    });
    let mut losses = Vec::with_capacity(slots.len());
    for (c, out) in slots {
        let (gradient, loss) = out.expect("every slot visited")?;
        losses.push(loss);
        server.receive(Upload::Gradient { client: c.id, round, gradient });
    }
    let mean = mean_matrix(&server.gradients(round))?;
    server.global.sgd_step(&mean, config.learning_rate, config.weight_decay)?;
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Negatives drawn across clients.
    pub tar_at_far: Vec<TarAtFar>,
    /// Negatives drawn within clients.
    pub within_client_tar_at_far: Vec<TarAtFar>,
    /// Smallest angle between identity means of different clients.
    pub cross_client_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub online: Vec<ClientId>,
    /// Mean local loss per client; `None` when offline.
    pub client_loss: Vec<Option<f64>>,
    pub clusters_released: Vec<usize>,
    /// `cos(p̂, normalize(p))` for each released cluster.
    pub cluster_fidelity: Vec<f64>,
    pub ledger: Vec<Spent>,
    pub eval: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub mode: Mode,
    pub rounds: Vec<RoundRecord>,
    pub final_embedder: Embedder,
    pub ledger: BTreeMap<ClientId, Spent>,
}

impl RunReport {
    pub fn final_eval(&self) -> &EvalMetrics {
        &self.rounds.last().expect("at least one round").eval
    }

    /// TAR at the given FAR target after the last round.
    pub fn final_tar(&self, far_target: f64) -> Option<f64> {
        self.final_eval().tar_at_far.iter().find(|t| t.far_target == far_target).map(|t| t.tar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPairs {
    pub cross: VerificationPairs,
    pub within: VerificationPairs,
}

impl EvalPairs {
    pub fn new<R: Rng + ?Sized>(pool: &EvalPool, negatives: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            cross: VerificationPairs::sample(pool, negatives, NegativeScope::CrossClient, rng)?,
            within: VerificationPairs::sample(pool, negatives, NegativeScope::WithinClient, rng)?,
        })
    }
}

/// Evaluation of an embedder on the federation's held-out samples.
pub fn evaluate(
    embedder: &Embedder,
    pool: &EvalPool,
    pairs: &EvalPairs,
    far_targets: &[f64],
    exec: Exec,
) -> Result<EvalMetrics> {
    let emb = embedder.embed(&pool.inputs, exec)?;
    let tar_at_far = synth::verification_eval(&emb, &pairs.cross, far_targets, exec)?;
    let within_client_tar_at_far = synth::verification_eval(&emb, &pairs.within, far_targets, exec)?;

    let mut sums: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (i, row) in emb.iter_rows().enumerate() {
        let e = sums.entry(pool.identity[i]).or_insert_with(|| (pool.client[i], vec![0.0; row.len()]));
        e.1.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let mut per_client: BTreeMap<usize, Vec<UnitVector>> = BTreeMap::new();
    for (client, sum) in sums.into_values() {
        per_client.entry(client).or_default().push(normalize(&sum)?);
    }
    let groups: Vec<Vec<UnitVector>> = per_client.into_values().collect();
    let cross_client_margin =
        if groups.len() >= 2 { cross_client_margin(&groups)?.radians() } else { std::f64::consts::PI };
    Ok(EvalMetrics { tar_at_far, within_client_tar_at_far, cross_client_margin })
}

/// Exactly one uniformly chosen client drops out with probability `p`
/// (never the last remaining one).
pub fn select_online<R: Rng + ?Sized>(clients: usize, p: f64, rng: &mut R) -> Vec<ClientId> {
    let drop = rng.random_bool(p);
    let victim = rng.random_range(0..clients.max(1));
    (0..clients).filter(|&c| !(drop && clients > 1 && c == victim)).collect()
}

/// Step-wise driver for a full training run.
pub struct Simulation<'a> {
    config: FederationConfig,
    seed: u64,
    exec: Exec,
    clients: Vec<ClientState>,
    server: ServerState,
    pool: EvalPool,
    pairs: EvalPairs,
    records: Vec<RoundRecord>,
    _fed: std::marker::PhantomData<&'a SyntheticFederation>,
}

impl<'a> Simulation<'a> {
    pub fn new(config: &FederationConfig, fed: &'a SyntheticFederation, seed: u64, exec: Exec) -> Result<Self> {
        config.validate()?;
        if config.clients != fed.clients.len() {
            return Err(domain(format!(
                "config has {} clients, federation has {}",
                config.clients,
                fed.clients.len()
            )));
        }
        let public = match (config.shared_public_shard, &fed.public) {
            (true, Some(p)) => Some(p),
            (true, None) => return Err(domain("shared public shard requested but the federation has none")),
            (false, _) => None,
        };
        let phi0 = Embedder::random(
            config.embedding_dim,
            fed.params.input_dim,
            config.init_scale,
            &mut rng::derive(seed, Domain::Init, 0, 0),
        )?;
        let clients = fed
            .clients
            .iter()
            .map(|c| {
                let own = c.identities.len();
                let mut data = c.train.clone();
                let mut classes = own;
                if let Some(p) = public {
                    let mut rows: Vec<f64> = data.inputs.as_slice().to_vec();
                    rows.extend_from_slice(p.train.inputs.as_slice());
                    data.labels.extend(p.train.labels.iter().map(|&l| own + l));
                    data.inputs = Matrix::from_vec(data.labels.len(), data.inputs.cols(), rows)?;
                    classes += p.identities.len();
                }
                ClientState::new(c.client, data, classes, phi0.clone(), seed, exec)
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = EvalPool::from_federation(fed)?;
        let pairs = EvalPairs::new(&pool, config.negative_pairs, &mut rng::derive(seed, Domain::Eval, 0, 0))?;
        Ok(Self {
            config: config.clone(),
            seed,
            exec,
            clients,
            server: ServerState::new(phi0),
            pool,
            pairs,
            records: Vec::new(),
            _fed: std::marker::PhantomData,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn pool(&self) -> &EvalPool {
        &self.pool
    }

    pub fn pairs(&self) -> &EvalPairs {
        &self.pairs
    }

    pub fn is_finished(&self) -> bool {
        self.records.len() >= self.config.rounds
    }

    pub fn step(&mut self) -> Result<&RoundRecord> {
        let t = self.server.round;
        let cfg = &self.config;
        let exec = self.exec;
        let c_count = self.clients.len();
        let online =
            select_online(c_count, cfg.offline_probability, &mut rng::derive(self.seed, Domain::Server, 0, t as u64));
        let is_online = |c: usize| online.binary_search(&c).is_ok();

        // Cluster release on the current local class centers.
        self.server.clusters.clear();
        let mut released = vec![0usize; c_count];
        let mut fidelity = Vec::new();
        if let Some(dplc_mode) = cfg.mode.dplc_mode() {
            let params = DplcParams { mode: dplc_mode, ..cfg.dplc };
            let seed = self.seed;
            let reports = exec.map_slice(&self.clients, |c| {
                if !is_online(c.id) {
                    return Ok(None);
                }
                let mut r = rng::derive(seed, Domain::Dplc, c.id as u64, t as u64);
                dplc_run(&c.center_matrix()?, &params, &mut r, c.id, t, exec).map(Some)
            });
            for (c, report) in reports.into_iter().enumerate() {
                let Some(report) = report? else { continue };
                released[c] = report.clusters.len();
                fidelity.extend(report.fidelity.iter().copied());
                if cfg.mode.charges_budget() {
                    self.server.ledger.compose(c, t, params.budget, report.queries_used);
                }
                self.server.receive(Upload::Clusters { client: c, round: t, clusters: report.clusters });
            }
        }

        let contexts: Vec<ConsensusContext> =
            (0..c_count).map(|c| ConsensusContext::new(c, self.server.clusters())).collect();
        let mut client_loss = vec![None; c_count];

        match cfg.aggregation {
            Aggregation::FedAvg => {
                let global = self.server.global.clone();
                let mut slots: Vec<(&mut ClientState, Option<Result<LocalOutcome>>)> =
                    self.clients.iter_mut().map(|c| (c, None)).collect();
                exec.for_each_mut(&mut slots, |i, (c, out)| {
                    if is_online(i) {
                        *out = Some(client_local_round(c, &global, &contexts[i], cfg, t, exec));
                    }
                });
                let mut uploads = Vec::new();
                for (c, out) in slots {
                    if let Some(outcome) = out {
                        client_loss[c.id] = outcome?.loss;
                        uploads.push(Upload::Model { client: c.id, round: t, embedder: c.embedder.clone() });
                    }
                }
                for u in uploads {
                    self.server.receive(u);
                }
                self.server.global = server_aggregate_fedavg(&self.server.models(t))?;
            }
            Aggregation::FedSgd => {
                let mut active: Vec<ClientState> = Vec::new();
                let mut ctx = Vec::new();
                let mut rest: Vec<ClientState> = Vec::new();
                for (c, context) in self.clients.drain(..).zip(contexts) {
                    if is_online(c.id) {
                        active.push(c);
                        ctx.push(context);
                    } else {
                        rest.push(c);
                    }
                }
                let losses = fedsgd_round(&mut active, &mut self.server, &ctx, cfg, exec);
                self.clients = active.into_iter().chain(rest).collect();
                self.clients.sort_by_key(|c| c.id);
                for (&c, l) in online.iter().zip(losses?) {
                    client_loss[c] = Some(l);
                }
            }
        }

        let totals = self.server.ledger.totals();
        let ledger = (0..c_count).map(|c| totals.get(&c).copied().unwrap_or_default()).collect();
        let eval = evaluate(&self.server.global, &self.pool, &self.pairs, &cfg.far_targets, exec)?;
        self.server.round += 1;
        self.records.push(RoundRecord {
            round: t,
            online,
            client_loss,
            clusters_released: released,
            cluster_fidelity: fidelity,
            ledger,
            eval,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn finish(self) -> RunReport {
        RunReport {
            seed: self.seed,
            mode: self.config.mode,
            rounds: self.records,
            final_embedder: self.server.global,
            ledger: self.server.ledger.totals(),
        }
    }
}

/// Run every configured round.
pub fn run_privacyface(config: &FederationConfig, fed: &SyntheticFederation, seed: u64, exec: Exec) -> Result<RunReport> {
    let mut sim = Simulation::new(config, fed, seed, exec)?;
    while !sim.is_finished() {
        sim.step()?;
    }
    Ok(sim.finish())
}
