use std::path::PathBuf;

use privacyface::dp::{self, MechanismCalibration};
use privacyface::dplc::{dplc_run, DplcParams, SanitizedCluster};
use privacyface::federation::{EvalMetrics, Mode, RunReport, Simulation};
use privacyface::geometry::{normalize, occupancy_ratio, sample_uniform_direction, Angle, CenterMatrix};
use privacyface::linalg::Matrix;
use privacyface::losses::{consensus_loss, finite_diff_check, loss_gradients, ConsensusContext, LossConfig, LossKind};
use privacyface::rng::{self, Domain};
use privacyface::synth::{generate_federation, knn_attack, AttackGallery, Exposure, GalleryEntry, GalleryMode};
use privacyface::Exec;
use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::embeddings::{self, Format};
use crate::output::{self, Header};
use crate::CliError;

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf, CliError> {
    output::write_atomic(&path, bytes).map_err(|e| CliError::Io(path.display().to_string(), e))?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError::Invalid(message.into())
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateParams {
    pub size: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub size: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub tight: MechanismCalibration,
    pub weak: MechanismCalibration,
    pub naive: MechanismCalibration,
}

pub fn calibrate(cfg: &RunConfig, params: &CalibrateParams) -> Result<(Vec<PathBuf>, Calibration), CliError> {
    if params.size == 0 {
        return Err(invalid("--size must be >= 1"));
    }
    let d = &cfg.federation.dplc;
    let result = Calibration {
        size: params.size,
        rho: d.rho.radians(),
        epsilon: d.budget.epsilon(),
        delta: d.budget.delta(),
        tight: dp::sigma_tight(params.size, d.rho, d.budget)?,
        weak: dp::sigma_weak(params.size, d.rho, d.budget)?,
        naive: dp::naive_sigma(d.budget),
    };
    let header = Header::new("calibrate", params, cfg);
    let path = write(output::path_in(&cfg.output, "calibrate.json"), &output::json_document(&header, &result))?;
    Ok((vec![path], result))
}

#[derive(Debug, Clone, Serialize)]
pub struct OccupancyParams {
    pub dims: Vec<usize>,
    pub rho_min: f64,
    pub rho_max: f64,
    pub steps: usize,
}

pub fn occupancy(cfg: &RunConfig, params: &OccupancyParams) -> Result<Vec<PathBuf>, CliError> {
    if params.steps < 2 {
        return Err(invalid("--steps must be >= 2"));
    }
    if !(params.rho_min >= 0.0 && params.rho_min < params.rho_max && params.rho_max <= std::f64::consts::PI) {
        return Err(invalid("need 0 <= --rho-min < --rho-max <= pi"));
    }
    if params.dims.is_empty() || params.dims.iter().any(|&d| d < 2) {
        return Err(invalid("every --d must be >= 2"));
    }
    let mut rows = Vec::new();
    for &d in &params.dims {
        for i in 0..params.steps {
            let rho = params.rho_min + (params.rho_max - params.rho_min) * i as f64 / (params.steps - 1) as f64;
            let ratio = occupancy_ratio(Angle::new(rho)?, d)?;
            rows.push(vec![d.to_string(), rho.to_string(), ratio.to_string()]);
        }
    }
    let header = Header::new("occupancy", params, cfg);
    let bytes = output::csv_with_header(&header, &["d", "rho", "ratio"], &rows);
    Ok(vec![write(output::path_in(&cfg.output, "occupancy.csv"), &bytes)?])
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterParams {
    pub input: PathBuf,
    pub client: usize,
    pub round: usize,
}

#[derive(Debug, Clone, Serialize)]
struct ClusterOut {
    center: Vec<f64>,
    margin: f64,
    size: usize,
    query_index: usize,
}

#[derive(Debug, Clone, Serialize)]
struct ClusterResult {
    centers: usize,
    dim: usize,
    renormalized_rows: usize,
    queries_used: usize,
    ledger_delta: dp::Spent,
    clusters: Vec<ClusterOut>,
    /// Un-normalized `w_i + v`, naive per-center mode only.
    naive_release: Option<Vec<Vec<f64>>>,
}

pub fn cluster(cfg: &RunConfig, params: &ClusterParams, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let emb = embeddings::read(&params.input)?;
    let w = CenterMatrix::new(emb.rows)?;
    let dplc = DplcParams { mode: cfg.cluster_mode, ..cfg.federation.dplc };
    let mut stream = rng::derive(cfg.seed, Domain::Dplc, params.client as u64, params.round as u64);
    let report = dplc_run(&w, &dplc, &mut stream, params.client, params.round, exec)?;
    log::info!("{} clusters from {} centers", report.clusters.len(), w.n());
    let cluster_out = |c: &SanitizedCluster| ClusterOut {
        center: c.center.as_slice().to_vec(),
        margin: c.margin.radians(),
        size: c.covered_count,
        query_index: c.query_index,
    };
    let result = ClusterResult {
        centers: w.n(),
        dim: w.dim(),
        renormalized_rows: emb.renormalized,
        queries_used: report.queries_used,
        ledger_delta: report.ledger_delta,
        clusters: report.clusters.iter().map(cluster_out).collect(),
        naive_release: report.naive_release,
    };
    let header = Header::new("cluster", params, cfg);
    Ok(vec![write(output::path_in(&cfg.output, "clusters.json"), &output::json_document(&header, &result))?])
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateParams {
    pub export_embeddings: bool,
}

#[derive(Debug, Clone, Serialize)]
struct RoundLine<'a> {
    round: usize,
    mode: Mode,
    online: &'a [usize],
    client_loss: &'a [Option<f64>],
    clusters_released: &'a [usize],
    cluster_fidelity: &'a [f64],
    ledger: &'a [dp::Spent],
    eval: &'a EvalMetrics,
}

#[derive(Debug, Clone, Serialize)]
struct FidelityHistogram {
    /// `cos(p̂, normalize(p))` of every released cluster, in release order.
    samples: Vec<f64>,
    bin_lo: f64,
    bin_hi: f64,
    counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    mode: Mode,
    rounds: usize,
    final_eval: &'a EvalMetrics,
    ledger: &'a std::collections::BTreeMap<usize, dp::Spent>,
    clusters_released: usize,
    fidelity: FidelityHistogram,
}

pub fn simulate(cfg: &RunConfig, params: &SimulateParams, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let fed = generate_federation(&cfg.synth, &mut rng::derive(cfg.seed, Domain::Synth, 0, 0))?;
    let mut sim = Simulation::new(&cfg.federation, &fed, cfg.seed, exec)?;
    while !sim.is_finished() {
        let r = sim.step()?;
        let tar: Vec<String> = r.eval.tar_at_far.iter().map(|t| format!("{:.4}@{}", t.tar, t.far_target)).collect();
        log::info!(
            "round {}: {} online, {} clusters, TAR {}",
            r.round,
            r.online.len(),
            r.clusters_released.iter().sum::<usize>(),
            tar.join(" ")
        );
    }
    let exports = params.export_embeddings.then(|| export_matrices(&sim, &fed, exec)).transpose()?;
    let report: RunReport = sim.finish();

    let mode = cfg.federation.mode;
    let tag = serde_json::to_value(mode).expect("serializable");
    let tag = tag.as_str().expect("mode is a string");
    let header = Header::new("simulate", params, cfg);
    let lines: Vec<RoundLine> = report
        .rounds
        .iter()
        .map(|r| RoundLine {
            round: r.round,
            mode,
            online: &r.online,
            client_loss: &r.client_loss,
            clusters_released: &r.clusters_released,
            cluster_fidelity: &r.cluster_fidelity,
            ledger: &r.ledger,
            eval: &r.eval,
        })
        .collect();
    let samples: Vec<f64> = report.rounds.iter().flat_map(|r| r.cluster_fidelity.iter().copied()).collect();
    let summary = Summary {
        mode,
        rounds: report.rounds.len(),
        final_eval: report.final_eval(),
        ledger: &report.ledger,
        clusters_released: report.rounds.iter().flat_map(|r| &r.clusters_released).sum(),
        fidelity: FidelityHistogram {
            counts: output::histogram(&samples, -1.0, 1.0, 100),
            samples,
            bin_lo: -1.0,
            bin_hi: 1.0,
        },
    };
    let mut paths = vec![
        write(output::path_in(&cfg.output, &format!("rounds-{tag}.jsonl")), &output::json_lines(&header, &lines))?,
        write(output::path_in(&cfg.output, &format!("summary-{tag}.json")), &output::json_document(&header, &summary))?,
    ];
    if let Some((centers, gallery)) = exports {
        paths.push(write(output::path_in(&cfg.output, &format!("centers-{tag}.csv")), &embeddings::encode(&centers, Format::Csv))?);
        paths.push(write(output::path_in(&cfg.output, &format!("gallery-{tag}.csv")), &embeddings::encode(&gallery, Format::Csv))?);
    }
    Ok(paths)
}

/// Client class centers and the centroids of each identity's training
/// embeddings under the final global model, both in global identity order.
fn export_matrices(
    sim: &Simulation,
    fed: &privacyface::synth::SyntheticFederation,
    exec: Exec,
) -> Result<(Matrix, Matrix), CliError> {
    let total = fed.params.identities();
    let d = sim.server().global().output_dim();
    let mut centers = Matrix::zeros(total, d);
    let mut gallery = Matrix::zeros(total, d);
    for (state, data) in sim.clients().iter().zip(&fed.clients) {
        let emb = sim.server().global().embed(&data.train.inputs, exec)?;
        for (local, &id) in data.identities.iter().enumerate() {
            centers.row_mut(id).copy_from_slice(state.centers().row(local));
            let mut sum = vec![0.0; d];
            for (row, _) in emb.iter_rows().zip(&data.train.labels).filter(|(_, &y)| y == local) {
                sum.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            gallery.row_mut(id).copy_from_slice(normalize(&sum)?.as_slice());
        }
    }
    Ok((centers, gallery))
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackParams {
    pub exposed: PathBuf,
    pub gallery: PathBuf,
    pub k: Vec<usize>,
    pub samples_per_identity: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackRate {
    pub k: usize,
    pub success_rate: f64,
    pub chance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackResult {
    pub exposures: usize,
    pub gallery_identities: usize,
    pub rates: Vec<AttackRate>,
}

/// Exposed row `i` belongs to identity `i`; gallery row `j` to identity `j / samples_per_identity`.
pub fn attack(cfg: &RunConfig, params: &AttackParams, exec: Exec) -> Result<(Vec<PathBuf>, AttackResult), CliError> {
    if params.samples_per_identity == 0 {
        return Err(invalid("--samples-per-identity must be >= 1"));
    }
    if params.k.is_empty() || params.k.contains(&0) {
        return Err(invalid("every --k must be >= 1"));
    }
    let exposed = embeddings::read(&params.exposed)?.rows;
    let gallery_rows = embeddings::read(&params.gallery)?.rows;
    if exposed.cols() != gallery_rows.cols() {
        return Err(invalid(format!("exposed vectors have dimension {}, gallery has {}", exposed.cols(), gallery_rows.cols())));
    }
    let per = params.samples_per_identity;
    if gallery_rows.rows() % per != 0 {
        return Err(invalid(format!("gallery has {} rows, not a multiple of {per}", gallery_rows.rows())));
    }
    let entries = gallery_rows
        .iter_rows()
        .enumerate()
        .map(|(j, row)| Ok(GalleryEntry { identity: j / per, vector: normalize(row)? }))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mode = if per == 1 { GalleryMode::Centroid } else { GalleryMode::Samples(per) };
    let gallery = AttackGallery::new(entries, mode)?;
    let g = gallery.identity_count();
    if exposed.rows() > g {
        return Err(invalid(format!("{} exposed vectors but only {g} gallery identities", exposed.rows())));
    }
    let exposures: Vec<Exposure> =
        exposed.iter_rows().enumerate().map(|(i, v)| Exposure { vector: v.to_vec(), identities: vec![i] }).collect();
    let rates = params
        .k
        .iter()
        .map(|&k| {
            let r = knn_attack(&exposures, &gallery, k, exec)?;
            Ok(AttackRate { k, success_rate: r.success_rate, chance: (k as f64 / g as f64).min(1.0) })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let result = AttackResult { exposures: exposures.len(), gallery_identities: g, rates };
    let header = Header::new("attack", params, cfg);
    let path = write(output::path_in(&cfg.output, "attack.json"), &output::json_document(&header, &result))?;
    Ok((vec![path], result))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckParams {
    pub instances: usize,
    pub classes: usize,
    pub dim: usize,
    pub batch: usize,
    pub clusters: usize,
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckResult {
    pub cos_face: f64,
    pub arc_face: f64,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Central-difference check of the consensus loss on random instances.
/// Both loss kinds use `loss.scale`; the configured kind also uses `loss.margin`.
pub fn gradcheck(cfg: &RunConfig, params: &GradcheckParams) -> Result<(Vec<PathBuf>, GradcheckResult), CliError> {
    if params.instances == 0 || params.classes == 0 || params.batch == 0 || params.dim < 2 {
        return Err(invalid("need instances, classes, batch >= 1 and dim >= 2"));
    }
    if !(params.step > 0.0) {
        return Err(invalid("--step must be > 0"));
    }
    let (n, d, b) = (params.classes, params.dim, params.batch);
    let loss = cfg.federation.loss;
    let configs: Vec<LossConfig> = [LossKind::CosFace, LossKind::ArcFace]
        .into_iter()
        .map(|kind| {
            let margin = if kind == loss.kind { loss.margin } else { LossConfig::default_margin(kind) };
            LossConfig::new(kind, loss.scale, margin)
        })
        .collect::<Result<_, _>>()?;
    let mut worst = [0.0f64; 2];
    for i in 0..params.instances {
        let mut r = rng::derive(cfg.seed, Domain::Generic, 0, i as u64);
        let raw = |rows: usize, r: &mut rng::Stream| -> Result<Matrix, CliError> {
            let mut data = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                let k: f64 = r.random_range(0.5..2.0);
                data.extend(sample_uniform_direction(d, r)?.as_slice().iter().map(|x| x * k));
            }
            Ok(Matrix::from_vec(rows, d, data)?)
        };
        let f = raw(b, &mut r)?;
        let w = raw(n, &mut r)?;
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
        let centers = (0..params.clusters).map(|_| sample_uniform_direction(d, &mut r)).collect::<Result<_, _>>()?;
        let ctx = ConsensusContext::from_centers(0, centers);
        let rho = Angle::new(r.random_range(0.2..1.0))?;
        for (slot, lc) in configs.iter().enumerate() {
            let g = loss_gradients(&f, &labels, &w, &ctx, rho, lc, Exec::Sequential)?;
            let ef = finite_diff_check(
                |x| {
                    Matrix::from_vec(b, d, x.to_vec())
                        .and_then(|m| consensus_loss(&m, &labels, &w, &ctx, rho, lc))
                        .unwrap_or(f64::NAN)
                },
                g.d_features.as_slice(),
                f.as_slice(),
                params.step,
            )?;
            let ew = finite_diff_check(
                |x| {
                    Matrix::from_vec(n, d, x.to_vec())
                        .and_then(|m| consensus_loss(&f, &labels, &m, &ctx, rho, lc))
                        .unwrap_or(f64::NAN)
                },
                g.d_centers.as_slice(),
                w.as_slice(),
                params.step,
            )?;
            worst[slot] = worst[slot].max(ef).max(ew);
        }
    }
    let max = worst[0].max(worst[1]);
    let result = GradcheckResult { cos_face: worst[0], arc_face: worst[1], max_relative_error: max, passed: max < params.tolerance };
    let header = Header::new("gradcheck", params, cfg);
    let path = write(output::path_in(&cfg.output, "gradcheck.json"), &output::json_document(&header, &result))?;
    Ok((vec![path], result))
}

pub fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

