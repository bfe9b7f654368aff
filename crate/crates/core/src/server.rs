//! Round orchestration and server-side aggregation.
//!
//! Each round samples devices, runs their local updates in parallel from the
//! round-start state, then performs assignment, aggregation and metrics as a
//! sequential step. Device updates only read round-start state and their own
//! RNG stream, so results do not depend on the thread schedule.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{
    adjusted_rand_index, farthest_point_seeds, fit_projector, ifca_assign, project, similarity_matrix,
    update_assignments, AssignmentMatrix, RankProjector, SimilarityKind,
};
use crate::cost::{comm_bytes, similarity_flops};
use crate::data::DeviceShard;
use crate::error::{Error, Result};
use crate::model::{evaluate, init_model, mean_loss, ModelArch, ParamVec};
use crate::par;
use crate::strategy::StrategyKind;
use crate::trainer::{local_update, TrainHyper};
use crate::vecops::{argmax, mean, sq_dist};

const DEVICE_STREAM_SALT: u64 = 0x6c63_6665_645f_6476;
const WARMUP_STREAM_SALT: u64 = 0x6c63_6665_645f_776d;
const SERVER_STREAM_SALT: u64 = 0x6c63_6665_645f_7376;

/// Per-strategy knobs and shared simulation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Number of clusters `K`; forced to 1 for unclustered strategies.
    pub clusters: usize,
    pub hyper: TrainHyper,
    /// Requested low-rank dimension `D`.
    pub low_rank_dim: usize,
    /// Devices sampled for the projector fit. `None` picks
    /// `max(ceil(m / 5), D)`, capped at `m`.
    pub projector_devices: Option<usize>,
    /// Round at which the one-shot clustering strategy clusters.
    pub offline_round: usize,
    /// Fraction of devices selected per round.
    pub sample_fraction: f64,
    pub bytes_per_scalar: u64,
    pub seed: u64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            clusters: 10,
            hyper: TrainHyper::default(),
            low_rank_dim: 50,
            projector_devices: None,
            offline_round: 1,
            sample_fraction: 1.0,
            bytes_per_scalar: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.clusters == 0 {
            return Err(Error::config("cluster.k", "must be at least 1"));
        }
        if self.low_rank_dim == 0 {
            return Err(Error::config("cluster.d", "must be at least 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::config("sample_fraction", "must lie in (0, 1]"));
        }
        if self.bytes_per_scalar == 0 {
            return Err(Error::config("bytes_per_scalar", "must be positive"));
        }
        Ok(())
    }

    fn effective_clusters(&self) -> usize {
        if self.kind.is_clustered() {
            self.clusters
        } else {
            1
        }
    }

    /// Hyperparameters actually used by the strategy's local update.
    pub fn effective_hyper(&self) -> TrainHyper {
        match self.kind {
            StrategyKind::LcFed => self.hyper,
            StrategyKind::FeSem | StrategyKind::Cgpfl => TrainHyper {
                lambda: 0.0,
                ..self.hyper
            },
            _ => self.hyper.plain(),
        }
    }

    fn similarity(&self) -> Option<SimilarityKind> {
        match self.kind {
            StrategyKind::FeSem => Some(SimilarityKind::NegL2),
            StrategyKind::FedGroup | StrategyKind::Cgpfl => Some(SimilarityKind::FullCosine),
            StrategyKind::LcFed => Some(SimilarityKind::LowRankCosine),
            StrategyKind::Ifca => Some(SimilarityKind::EmpiricalRisk),
            StrategyKind::FedAvg | StrategyKind::FedPer => None,
        }
    }
}

/// RNG stream owned by one device for its local updates.
pub fn device_rng(seed: u64, device_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DEVICE_STREAM_SALT);
    rng.set_stream(device_id as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub model: ParamVec,
    /// Last low-rank upload (low-rank strategy only).
    pub low_rank: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Per-round summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Agreement of the assignment with ground truth, when known.
    pub ari: Option<f64>,
    pub cluster_sizes: Vec<usize>,
    pub sim_flops: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Full simulator state between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub devices: Vec<DeviceState>,
    pub assignment: AssignmentMatrix,
    pub centers: Vec<ParamVec>,
    pub global_phi: Vec<f64>,
    pub projector: Option<RankProjector>,
    /// Low-rank images of the centers, formed by averaging uploads.
    pub low_rank_centers: Vec<Vec<f64>>,
    /// Whether cluster centers have been seeded from device models.
    pub seeded: bool,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct Simulation {
    config: StrategyConfig,
    arch: Arc<ModelArch>,
    shards: Vec<DeviceShard>,
    state: ServerState,
    truth: Option<Vec<usize>>,
}

/// What a device sends back after its local update.
struct Upload {
    model: ParamVec,
    low_rank: Option<Vec<f64>>,
    ifca_choice: Option<usize>,
}

impl Simulation {
    /// Initializes every device from one shared model and, for the low-rank
    /// strategy, fits the projector on warm-started models from a device
    /// sample.
    pub fn new(config: StrategyConfig, arch: Arc<ModelArch>, shards: Vec<DeviceShard>) -> Result<Self> {
        config.validate()?;
        if shards.is_empty() {
            return Err(Error::input("simulation needs at least one device"));
        }
        for s in &shards {
            if s.train.input_dim() != arch.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "device data vs model input",
                    expected: arch.input_dim(),
                    found: s.train.input_dim(),
                });
            }
            if s.train.is_empty() || s.test.is_empty() {
                return Err(Error::input(format!("device {} has an empty split", s.device_id)));
            }
        }
        let m = shards.len();
        let k = config.effective_clusters();
        let common = init_model(&arch, config.seed);

        let centers = if config.kind == StrategyKind::Ifca {
            (0..k)
                .map(|j| init_model(&arch, config.seed.wrapping_add(1 + j as u64)))
                .collect()
        } else {
            vec![common.clone(); k]
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SERVER_STREAM_SALT);
        let projector = if config.kind == StrategyKind::LcFed {
            Some(fit_warm_projector(&config, &common, &shards, &mut rng)?)
        } else {
            None
        };
        let low_rank_common = match &projector {
            Some(p) => project(p, common.values())?,
            None => Vec::new(),
        };

        let devices = (0..m)
            .map(|id| DeviceState {
                id,
                model: common.clone(),
                low_rank: low_rank_common.clone(),
                rng: device_rng(config.seed, id),
            })
            .collect();

        let truth = shards.iter().map(|s| s.true_cluster).collect::<Option<Vec<_>>>();
        let state = ServerState {
            round: 0,
            devices,
            assignment: AssignmentMatrix::single(m, k),
            global_phi: common.phi().to_vec(),
            centers,
            low_rank_centers: vec![low_rank_common; k],
            projector,
            seeded: false,
            rng,
        };
        Ok(Self {
            config,
            arch,
            shards,
            state,
            truth,
        })
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn shards(&self) -> &[DeviceShard] {
        &self.shards
    }

    /// Runs `rounds` rounds and returns their metrics.
    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundMetrics>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }

    fn select_devices(&mut self) -> Vec<usize> {
        let m = self.shards.len();
        if self.config.sample_fraction >= 1.0 {
            return (0..m).collect();
        }
        let n = ((self.config.sample_fraction * m as f64).round() as usize).clamp(1, m);
        let mut chosen = index::sample(&mut self.state.rng, m, n).into_vec();
        chosen.sort_unstable();
        chosen
    }

    /// One round: sample, update locally, assign, aggregate, measure.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.state.round;
        let selected = self.select_devices();
        let mut is_selected = vec![false; self.shards.len()];
        selected.iter().for_each(|&i| is_selected[i] = true);

        let uploads = self.local_phase(&is_selected, round)?;
        let mut assigned = 0u64;
        for (i, upload) in uploads.into_iter().enumerate() {
            let Some(upload) = upload else { continue };
            let dev = &mut self.state.devices[i];
            dev.model = upload.model;
            if let Some(z) = upload.low_rank {
                dev.low_rank = z;
            }
            if let Some(k) = upload.ifca_choice {
                self.state.assignment.set(i, k);
            }
        }

        assigned += self.assignment_phase(&selected, round)?;
        self.aggregate();

        let metrics = self.measure(round, selected.len() as u64, assigned)?;
        self.state.round += 1;
        Ok(metrics)
    }

    fn local_phase(&mut self, is_selected: &[bool], round: usize) -> Result<Vec<Option<Upload>>> {
        let cfg = &self.config;
        let hyper = cfg.effective_hyper();
        let shards = &self.shards;
        let ServerState {
            devices,
            assignment,
            centers,
            global_phi,
            projector,
            ..
        } = &mut self.state;
        let (assignment, centers, global_phi, projector) = (&*assignment, &*centers, &*global_phi, &*projector);

        let results = par::map_mut(devices, |i, dev| -> Result<Option<Upload>> {
            if !is_selected[i] {
                return Ok(None);
            }
            let train = &shards[i].train;
            let mut ifca_choice = None;
            let (start, center) = match cfg.kind {
                StrategyKind::FedAvg => (centers[0].clone(), &centers[0]),
                StrategyKind::FedPer => {
                    let start = ParamVec::from_parts(Arc::clone(dev.model.arch()), global_phi, dev.model.h())?;
                    (start, &centers[0])
                }
                StrategyKind::FedGroup => {
                    let c = &centers[assignment.cluster_of(i)];
                    (c.clone(), c)
                }
                StrategyKind::Ifca => {
                    let k = ifca_assign(train, centers)?;
                    ifca_choice = Some(k);
                    (centers[k].clone(), &centers[k])
                }
                StrategyKind::FeSem | StrategyKind::Cgpfl | StrategyKind::LcFed => {
                    (dev.model.clone(), &centers[assignment.cluster_of(i)])
                }
            };
            let model = local_update(&start, center, global_phi, train, &hyper, &mut dev.rng)
                .map_err(|e| e.at_device(i, round))?;
            let low_rank = match projector {
                Some(p) => Some(project(p, model.values())?),
                None => None,
            };
            Ok(Some(Upload {
                model,
                low_rank,
                ifca_choice,
            }))
        });
        results.into_iter().collect()
    }

    /// Vectors the strategy compares for device `i`.
    fn device_vector(&self, kind: SimilarityKind, i: usize) -> &[f64] {
        match kind {
            SimilarityKind::LowRankCosine => &self.state.devices[i].low_rank,
            _ => self.state.devices[i].model.values(),
        }
    }

    /// Updates the assignment and returns how many devices were scored.
    fn assignment_phase(&mut self, selected: &[usize], round: usize) -> Result<u64> {
        let Some(kind) = self.config.similarity() else {
            return Ok(0);
        };
        if kind == SimilarityKind::EmpiricalRisk {
            return Ok(0);
        }
        if self.config.kind == StrategyKind::FedGroup {
            if round != self.config.offline_round {
                return Ok(0);
            }
            self.seed_clusters(kind);
            return Ok(self.shards.len() as u64);
        }
        if !self.state.seeded {
            self.seed_clusters(kind);
            return Ok(self.shards.len() as u64);
        }

        let centers: Vec<&[f64]> = match kind {
            SimilarityKind::LowRankCosine => self.state.low_rank_centers.iter().map(Vec::as_slice).collect(),
            _ => self.state.centers.iter().map(ParamVec::values).collect(),
        };
        let rows: Vec<&[f64]> = selected.iter().map(|&i| self.device_vector(kind, i)).collect();
        let sim = similarity_matrix(kind, &rows, &centers);
        let fresh = update_assignments(&sim)?;
        for (pos, &i) in selected.iter().enumerate() {
            self.state.assignment.set(i, fresh.cluster_of(pos));
        }
        Ok(selected.len() as u64)
    }

    /// Seeds centers at mutually distant devices and assigns every device to
    /// its most similar seed.
    fn seed_clusters(&mut self, kind: SimilarityKind) {
        let m = self.shards.len();
        let k = self.config.effective_clusters();
        let first = self.state.rng.gen_range(0..m);
        let vectors: Vec<&[f64]> = (0..m).map(|i| self.device_vector(kind, i)).collect();
        let seeds = farthest_point_seeds(kind, &vectors, k, first);
        let seed_vectors: Vec<&[f64]> = seeds.iter().map(|&s| vectors[s]).collect();
        let labels: Vec<usize> = similarity_matrix(kind, &vectors, &seed_vectors)
            .iter()
            .map(|row| argmax(row))
            .collect();
        self.state.assignment = AssignmentMatrix::new(labels, k).expect("labels below k");
        self.state.seeded = true;
    }

    /// Recomputes the global embedding and cluster centers from every
    /// device's latest model. Empty clusters keep their previous center.
    fn aggregate(&mut self) {
        let st = &mut self.state;
        let dim = self.arch.total_dim();
        let phi_dim = self.arch.phi_dim();
        st.global_phi = mean(st.devices.iter().map(|d| d.model.phi()), phi_dim).expect("m >= 1");

        match self.config.kind {
            StrategyKind::FedAvg | StrategyKind::FedPer => {
                let values = mean(st.devices.iter().map(|d| d.model.values()), dim).expect("m >= 1");
                st.centers[0] = ParamVec::from_values(Arc::clone(&self.arch), values).expect("dims agree");
            }
            _ => {
                for k in 0..st.centers.len() {
                    let members: Vec<usize> = st.assignment.members(k).collect();
                    if let Some(values) = mean(members.iter().map(|&i| st.devices[i].model.values()), dim) {
                        st.centers[k] = ParamVec::from_values(Arc::clone(&self.arch), values).expect("dims agree");
                    }
                    if st.projector.is_some() {
                        let d = st.low_rank_centers[k].len();
                        if let Some(z) = mean(members.iter().map(|&i| st.devices[i].low_rank.as_slice()), d) {
                            st.low_rank_centers[k] = z;
                        }
                    }
                }
            }
        }
    }

    /// The model device `i` would deploy under the current state.
    pub fn deployed_model(&self, i: usize) -> ParamVec {
        let st = &self.state;
        match self.config.kind {
            StrategyKind::FedAvg => st.centers[0].clone(),
            StrategyKind::FedPer => {
                ParamVec::from_parts(Arc::clone(&self.arch), &st.global_phi, st.devices[i].model.h())
                    .expect("dims agree")
            }
            StrategyKind::FedGroup | StrategyKind::Ifca => st.centers[st.assignment.cluster_of(i)].clone(),
            StrategyKind::FeSem | StrategyKind::Cgpfl | StrategyKind::LcFed => st.devices[i].model.clone(),
        }
    }

    /// Test accuracy of every device's deployed model.
    pub fn device_accuracies(&self) -> Result<Vec<f64>> {
        par::map_range(self.shards.len(), |i| {
            evaluate(&self.deployed_model(i), &self.shards[i].test).map(|(acc, _)| acc)
        })
        .into_iter()
        .collect()
    }

    fn measure(&self, round: usize, m_selected: u64, assigned: u64) -> Result<RoundMetrics> {
        let accs = self.device_accuracies()?;
        let n = accs.len() as f64;
        let mean_acc = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / n;

        let cfg = &self.config;
        let k = cfg.effective_clusters() as u64;
        let dim = self.arch.total_dim() as u64;
        let d = self.state.projector.as_ref().map_or(0, |p| p.rank()) as u64;
        let sim_flops = if assigned > 0 {
            similarity_flops(cfg.kind, assigned, k, dim, d)
        } else {
            0
        };
        let (bytes_up, bytes_down) = comm_bytes(
            cfg.kind,
            m_selected,
            k,
            dim,
            self.arch.phi_dim() as u64,
            d,
            cfg.bytes_per_scalar,
        );
        let ari = match &self.truth {
            Some(t) => Some(adjusted_rand_index(self.state.assignment.labels(), t)?),
            None => None,
        };
        Ok(RoundMetrics {
            round,
            mean_acc,
            std_acc: var.sqrt(),
            ari,
            cluster_sizes: self.state.assignment.sizes(),
            sim_flops,
            bytes_up,
            bytes_down,
        })
    }

    /// Mean over devices of training loss plus `(mu/2)|w_i - center|^2`
    /// under the current assignment.
    pub fn global_objective(&self) -> Result<f64> {
        let mu = self.config.effective_hyper().mu;
        let st = &self.state;
        let terms = par::map_range(self.shards.len(), |i| -> Result<f64> {
            let w = &st.devices[i].model;
            let train = &self.shards[i].train;
            let center = &st.centers[st.assignment.cluster_of(i)];
            Ok(mean_loss(w, train, &train.all_rows())? + 0.5 * mu * sq_dist(w.values(), center.values()))
        });
        let terms = terms.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(terms.iter().sum::<f64>() / terms.len() as f64)
    }
}

/// Warm-starts a device sample from the shared model with one plain local
/// update each, stacks the results, and fits the projector.
fn fit_warm_projector(
    config: &StrategyConfig,
    common: &ParamVec,
    shards: &[DeviceShard],
    rng: &mut ChaCha8Rng,
) -> Result<RankProjector> {
    let m = shards.len();
    let dim = common.len();
    let sample = config
        .projector_devices
        .unwrap_or_else(|| m.div_ceil(5).max(config.low_rank_dim))
        .clamp(1, m);
    if sample < 2 {
        return Err(Error::config(
            "cluster.projector_devices",
            "the projector fit needs at least 2 devices",
        ));
    }
    let mut chosen = index::sample(rng, m, sample).into_vec();
    chosen.sort_unstable();

    let plain = config.hyper.plain();
    let warm = par::map(&chosen, |&i| {
        let mut wrng = ChaCha8Rng::seed_from_u64(config.seed ^ WARMUP_STREAM_SALT);
        wrng.set_stream(i as u64);
        local_update(common, common, common.phi(), &shards[i].train, &plain, &mut wrng).map_err(|e| e.at_device(i, 0))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let d = config.low_rank_dim.min(sample).min(dim);
    if d < config.low_rank_dim {
        log::info!("low-rank dimension clamped from {} to {d}", config.low_rank_dim);
    }
    let rows: Vec<&[f64]> = warm.iter().map(ParamVec::values).collect();
    fit_projector(&rows, chosen, d)
}

/// Convenience wrapper: build and run a simulation for `rounds` rounds.
pub fn run_simulation(
    config: StrategyConfig,
    arch: Arc<ModelArch>,
    shards: Vec<DeviceShard>,
    rounds: usize,
) -> Result<(Vec<RoundMetrics>, Simulation)> {
    let mut sim = Simulation::new(config, arch, shards)?;
    let metrics = sim.run(rounds)?;
    Ok((metrics, sim))
}

/// Mean of the embedding blocks.
pub fn aggregate_global_embedding(models: &[ParamVec]) -> Result<Vec<f64>> {
    let first = models.first().ok_or_else(|| Error::input("no models to aggregate"))?;
    Ok(mean(models.iter().map(ParamVec::phi), first.arch().phi_dim()).expect("non-empty"))
}

/// Unweighted per-cluster mean of member models; clusters without members
/// keep `previous[k]`.
pub fn aggregate_cluster_centers(
    models: &[ParamVec],
    assignment: &AssignmentMatrix,
    previous: &[ParamVec],
) -> Result<Vec<ParamVec>> {
    if assignment.devices() != models.len() {
        return Err(Error::DimensionMismatch {
            context: "assignment rows vs models",
            expected: models.len(),
            found: assignment.devices(),
        });
    }
    if previous.len() != assignment.clusters() {
        return Err(Error::DimensionMismatch {
            context: "previous centers vs clusters",
            expected: assignment.clusters(),
            found: previous.len(),
        });
    }
    (0..assignment.clusters())
        .map(|k| {
            let dim = previous[k].len();
            match mean(assignment.members(k).map(|i| models[i].values()), dim) {
                Some(values) => ParamVec::from_values(Arc::clone(previous[k].arch()), values),
                None => Ok(previous[k].clone()),
            }
        })
        .collect()
}
