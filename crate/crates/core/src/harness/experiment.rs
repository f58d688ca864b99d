use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use super::config::{DataSource, ExperimentConfig};
use super::metrics::MetricsRecord;
use crate::compression::{codec, compress, CompressionStrategy};
use crate::environment::{
    build_area, build_topology, deploy_devices, lattice, load_idx, sample_local_dataset, BlobSpec, DistributionKind,
    DistributionSpec, IdxSpec, Topology,
};
use crate::error::{Error, Result};
use crate::neuralnet::{init_parameters, Architecture, LabeledDataset, TrainingConfig};
use crate::protocol::{
    calibrate_tau, evaluate_objective, run_round, Arm, Calibration, DeviceState, ProtocolConfig, RoundReport,
};
use crate::seed;

/// Test sets use salts far from any device uid.
const TEST_SALT: u64 = 0xFFFF_FFFF_0000_0000;

/// Everything a run starts from. Identical for every arm under one config.
#[derive(Debug, Clone)]
pub struct World {
    pub topology: Topology,
    pub devices: Vec<DeviceState>,
    /// One held-out set per subregion.
    pub test_sets: Vec<LabeledDataset>,
    pub architecture: Architecture,
}

fn distribution(cfg: &ExperimentConfig, pool: Option<Arc<LabeledDataset>>) -> Result<(DistributionSpec, usize)> {
    let k = cfg.subregion_count();
    let d = &cfg.data;
    let (kind, classes) = match d.distribution {
        DataSource::SyntheticBlobs => {
            let spec = BlobSpec::disjoint(k, d.classes_per_region, d.features, d.blob_std, cfg.environment.seed)?;
            let classes = spec.class_means.len();
            (DistributionKind::SyntheticBlobs(spec), classes)
        }
        DataSource::IdxLabelSkew => {
            let pool = pool.expect("idx pool loaded by caller");
            let classes = if d.idx_classes > 0 {
                d.idx_classes
            } else {
                pool.labels().iter().max().map_or(0, |m| m + 1)
            };
            (
                DistributionKind::IdxLabelSkew(IdxSpec::contiguous(pool, k, classes)?),
                classes,
            )
        }
    };
    let spec = DistributionSpec {
        kind,
        epsilon: d.epsilon,
    };
    spec.validate()?;
    Ok((spec, classes))
}

fn load_pool(images: &Option<PathBuf>, labels: &Option<PathBuf>) -> Result<Option<Arc<LabeledDataset>>> {
    match (images, labels) {
        (Some(i), Some(l)) => Ok(Some(Arc::new(load_idx(i, l)?))),
        _ => Ok(None),
    }
}

/// Place devices, connect them, draw their data and give them all the same
/// initial model.
pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let env = &cfg.environment;
    let area = build_area(env.width, env.height, env.rows, env.cols)?;
    let sites = deploy_devices(&area, env.devices, env.placement, env.seed)?;
    let radius = env.radius.unwrap_or_else(|| {
        let (_, px, py) = lattice(&area, env.devices);
        1.5 * px.max(py)
    });
    let topology = build_topology(sites, radius)?;

    let (train_pool, test_pool) = if cfg.data.distribution == DataSource::IdxLabelSkew {
        let train = load_pool(&cfg.data.idx_images, &cfg.data.idx_labels)?;
        let test = load_pool(&cfg.data.idx_test_images, &cfg.data.idx_test_labels)?.or_else(|| train.clone());
        (train, test)
    } else {
        (None, None)
    };
    let (spec, classes) = distribution(cfg, train_pool)?;
    let test_spec = match test_pool {
        Some(pool) => distribution(cfg, Some(pool))?.0,
        None => spec.clone(),
    };

    let mut layers = vec![spec.dim()];
    layers.extend(&cfg.model.hidden);
    layers.push(classes);
    let architecture = Architecture::new(layers)?;
    let initial = init_parameters(&architecture, seed::mix(env.seed, &[0x1A17]));

    let devices = topology
        .sites
        .iter()
        .map(|s| {
            let data = sample_local_dataset(&spec, s.subregion_id, cfg.data.samples, env.seed, s.uid)?;
            DeviceState::new(s.uid, initial.clone(), &data, cfg.data.validation_fraction)
        })
        .collect::<Result<_>>()?;
    let test_sets = (0..cfg.subregion_count())
        .map(|j| sample_local_dataset(&test_spec, j, cfg.data.test_samples, env.seed, TEST_SALT + j as u64))
        .collect::<Result<_>>()?;

    Ok(World {
        topology,
        devices,
        test_sets,
        architecture,
    })
}

/// Protocol settings for the run; `tau` falls back to 1 when the config
/// leaves it to calibration.
pub fn protocol_config(cfg: &ExperimentConfig) -> Result<ProtocolConfig> {
    let p = &cfg.protocol;
    let pc = ProtocolConfig {
        tau: p.tau.unwrap_or(1.0),
        strategy: CompressionStrategy::new(p.kind, p.psi)?,
        similarity_uses_compressed: p.similarity_uses_compressed,
        training: TrainingConfig {
            local_epochs: p.local_epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            rng_seed: seed::mix(cfg.environment.seed, &[0x7EA1]),
        },
        rounds: p.rounds,
        validation_fraction: cfg.data.validation_fraction,
    };
    pc.validate()?;
    Ok(pc)
}

/// Run the threshold calibration the config would run.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<Calibration> {
    let world = build_world(cfg)?;
    let pc = protocol_config(cfg)?;
    calibrate_tau(&world.devices, &world.topology, &pc, cfg.protocol.calibration_rounds)
}

/// A run in progress, advanced one round at a time.
#[derive(Debug)]
pub struct Experiment {
    world: World,
    protocol: ProtocolConfig,
    arm: Arm,
    round: u64,
    bytes_total: u64,
    timed: bool,
    calibration: Option<Calibration>,
    last: Option<RoundReport>,
}

impl Experiment {
    /// Build the world and, for the self-federated arm with no fixed
    /// threshold, calibrate it.
    pub fn new(cfg: &ExperimentConfig, arm: Arm) -> Result<Self> {
        let world = build_world(cfg)?;
        let mut protocol = protocol_config(cfg)?;
        let mut calibration = None;
        if arm == Arm::SelfFederated && cfg.protocol.tau.is_none() {
            let c = calibrate_tau(
                &world.devices,
                &world.topology,
                &protocol,
                cfg.protocol.calibration_rounds,
            )?;
            protocol.tau = c.tau;
            calibration = Some(c);
        }
        Ok(Self {
            world,
            protocol,
            arm,
            round: 0,
            bytes_total: 0,
            timed: false,
            calibration,
            last: None,
        })
    }

    /// Record wall-clock time per round. Off by default so traces stay
    /// byte-identical.
    pub fn timed(mut self, on: bool) -> Self {
        self.timed = on;
        self
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn protocol(&self) -> &ProtocolConfig {
        &self.protocol
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round as usize >= self.protocol.rounds
    }

    pub fn last_report(&self) -> Option<&RoundReport> {
        self.last.as_ref()
    }

    /// Run the next round and score it. Stepping past the configured round
    /// count is allowed.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let t = self.round + 1;
        let report = run_round(
            &mut self.world.devices,
            &self.world.topology,
            &self.protocol,
            self.arm,
            t,
        )?;
        let objective = evaluate_objective(
            &report.partition,
            &report.federation_models,
            &self.world.topology.sites,
            &self.world.test_sets,
        )?;
        let bytes_round = report.traffic.total();
        self.bytes_total += bytes_round;
        self.round = t;
        let record = MetricsRecord {
            round: t,
            federation_count: report.partition.len(),
            region_accuracy: objective.region_accuracy,
            region_loss: objective.region_loss,
            objective: objective.total,
            bytes_round,
            bytes_total: self.bytes_total,
            macs: report.representative_macs,
            wall_ms: if self.timed {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        self.last = Some(report);
        Ok(record)
    }

    /// Step until the configured round count is reached.
    pub fn run_to_end(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.step()?);
        }
        Ok(out)
    }

    /// Save every current federation model, compressed with the run's
    /// strategy, as `federation_<leader>.spfl` under `dir`. Returns the
    /// written paths in leader order.
    pub fn write_checkpoints(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let Some(report) = &self.last else {
            return Ok(Vec::new());
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (leader, model) in &report.federation_models {
            let path = dir.join(format!("federation_{leader}.spfl"));
            codec::save(&path, &compress(model, &self.protocol.strategy)?)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Run `cfg` under `arm` from round 1 to the configured round count.
pub fn run_experiment(cfg: &ExperimentConfig, arm: Arm) -> Result<Vec<MetricsRecord>> {
    Experiment::new(cfg, arm)?.run_to_end()
}
