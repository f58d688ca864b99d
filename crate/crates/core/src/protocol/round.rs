use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{cross_similarity, fed_avg, form_federations, DissimilarityMatrix, FederationPartition, ProtocolConfig};
use crate::compression::{compress, nonzero_macs_compressed, serialized_size, CompressedModel};
use crate::environment::Topology;
use crate::error::{Error, Result};
use crate::fields::{broadcast_block, c_block, c_block_subtrees};
use crate::neuralnet::{local_training, LabeledDataset, ParameterSet, TrainingConfig};
use crate::seed;

/// How devices are grouped after local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Similarity-gated self-federation.
    SelfFederated,
    /// One federation containing every device; models go straight to an
    /// aggregator and back.
    GlobalFedAvg,
    /// Local training only.
    Isolated,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::SelfFederated, Arm::GlobalFedAvg, Arm::Isolated];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::SelfFederated => "sparsefuel",
            Arm::GlobalFedAvg => "global-fedavg",
            Arm::Isolated => "isolated",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown arm '{s}' (expected sparsefuel, global-fedavg or isolated)"))
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub uid: u64,
    /// The model the device enters the next round with.
    pub model: ParameterSet,
    pub train: LabeledDataset,
    /// Held-out split used to score neighbours.
    pub validation: LabeledDataset,
}

impl DeviceState {
    /// Hold out the last `round(fraction * len)` samples (at least one, and
    /// at least one left for training).
    pub fn new(uid: u64, model: ParameterSet, data: &LabeledDataset, validation_fraction: f64) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "device {uid} needs at least two samples to hold out a validation split"
            )));
        }
        let k = ((validation_fraction * data.len() as f64).round() as usize).clamp(1, data.len() - 1);
        let (train, validation) = data.split_tail(k);
        Ok(Self {
            uid,
            model,
            train,
            validation,
        })
    }
}

/// Bytes moved during one round, by phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Traffic {
    /// Every device sends its shared model to each neighbour.
    pub broadcast: u64,
    /// Models forwarded hop by hop towards leaders.
    pub collection: u64,
    /// Aggregated models sent back to members.
    pub dissemination: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.broadcast + self.collection + self.dissemination
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub partition: FederationPartition,
    /// Model adopted by each federation, keyed by leader uid.
    pub federation_models: BTreeMap<u64, ParameterSet>,
    pub traffic: Traffic,
    /// Nonzero weights of the lowest-uid device's shared model.
    pub representative_macs: u64,
    /// Only computed by the self-federated arm.
    pub dissimilarity: Option<DissimilarityMatrix>,
}

fn device_training_config(base: &TrainingConfig, uid: u64) -> TrainingConfig {
    TrainingConfig {
        rng_seed: seed::mix(base.rng_seed, &[0x7241, uid]),
        ..base.clone()
    }
}

struct LocalOutcome {
    trained: ParameterSet,
    shared: CompressedModel,
}

/// Compress, train under the compression mask, and compress again for
/// sending. The mask carries over from the first compression, so the shared
/// model prunes exactly the positions that were frozen at zero.
fn local_step(device: &DeviceState, cfg: &ProtocolConfig, round: u64) -> Result<LocalOutcome> {
    let compressed = compress(&device.model, &cfg.strategy)?;
    let start = compressed.to_params();
    let training = device_training_config(&cfg.training, device.uid);
    let trained = local_training(&start, &device.train, &training, compressed.mask(), round)?;
    let shared = compress(&trained, &cfg.strategy)?;
    Ok(LocalOutcome { trained, shared })
}

/// One global round for every device.
///
/// Steps: compress, masked local training, neighbour broadcast, edge
/// dissimilarities, federation formation, collection and averaging at the
/// leaders, dissemination, adoption. The arm decides which of the later
/// steps run.
pub fn run_round(
    devices: &mut [DeviceState],
    topology: &Topology,
    cfg: &ProtocolConfig,
    arm: Arm,
    round: u64,
) -> Result<RoundReport> {
    if round == 0 {
        return Err(Error::InvalidArgument("rounds are numbered from 1".into()));
    }
    if devices.len() != topology.len() || devices.iter().enumerate().any(|(i, d)| d.uid != i as u64) {
        return Err(Error::InvalidArgument(
            "devices must be ordered by uid and match the topology".into(),
        ));
    }
    cfg.validate()?;

    // steps 1-2 are independent per device; collect() keeps uid order
    let outcomes: Vec<LocalOutcome> = devices
        .par_iter()
        .map(|d| local_step(d, cfg, round))
        .collect::<Result<_>>()?;
    let shared_params: Vec<ParameterSet> = outcomes.par_iter().map(|o| o.shared.to_params()).collect();
    let shared_bytes: Vec<u64> = outcomes.iter().map(|o| serialized_size(&o.shared)).collect();
    let representative_macs = outcomes.first().map_or(0, |o| nonzero_macs_compressed(&o.shared));
    let n = devices.len();

    let report = match arm {
        Arm::Isolated => {
            let federation_models = outcomes
                .iter()
                .enumerate()
                .map(|(i, o)| (i as u64, o.trained.clone()))
                .collect();
            for (d, o) in devices.iter_mut().zip(outcomes) {
                d.model = o.trained;
            }
            RoundReport {
                round,
                partition: FederationPartition::singletons(n, round),
                federation_models,
                traffic: Traffic::default(),
                representative_macs,
                dissimilarity: None,
            }
        }
        Arm::GlobalFedAvg => {
            let models: Vec<&ParameterSet> = shared_params.iter().collect();
            let weights: Vec<f64> = devices.iter().map(|d| d.train.len() as f64).collect();
            let global = fed_avg(&models, Some(&weights))?;
            let down = serialized_size(&CompressedModel::Dense(global.clone()));
            let traffic = Traffic {
                broadcast: 0,
                collection: shared_bytes.iter().sum(),
                dissemination: down * n as u64,
            };
            for d in devices.iter_mut() {
                d.model = global.clone();
            }
            RoundReport {
                round,
                partition: FederationPartition::single(n, round),
                federation_models: BTreeMap::from([(0, global)]),
                traffic,
                representative_macs,
                dissimilarity: None,
            }
        }
        Arm::SelfFederated => {
            // step 3: what each device puts on the air for its neighbours
            let (similarity_models, broadcast_bytes): (Vec<&ParameterSet>, Vec<u64>) = if cfg.similarity_uses_compressed
            {
                (shared_params.iter().collect(), shared_bytes.clone())
            } else {
                (
                    outcomes.iter().map(|o| &o.trained).collect(),
                    outcomes
                        .iter()
                        .map(|o| serialized_size(&CompressedModel::Dense(o.trained.clone())))
                        .collect(),
                )
            };
            let broadcast: u64 = (0..n)
                .map(|i| broadcast_bytes[i] * topology.neighbors(i as u64).len() as u64)
                .sum();

            // step 4
            let edges = topology.edges();
            let scores: Vec<f64> = edges
                .par_iter()
                .map(|&(i, j)| {
                    let (i, j) = (i as usize, j as usize);
                    cross_similarity(
                        similarity_models[i],
                        similarity_models[j],
                        &devices[i].validation,
                        &devices[j].validation,
                    )
                })
                .collect::<Result<_>>()?;
            let mut ds = DissimilarityMatrix::default();
            for (&(i, j), &d) in edges.iter().zip(&scores) {
                ds.insert(i, j, d);
            }

            // step 5
            let (partition, coordination) = form_federations(topology, &ds, cfg.tau, round)?;
            let field = &coordination.field;

            // step 6: model lists flow up the tree; every non-leader forwards
            // its whole subtree to its parent
            let sizes: BTreeMap<u64, u64> = (0..n as u64).map(|u| (u, shared_bytes[u as usize])).collect();
            let subtree_bytes = c_block_subtrees(field, &sizes, &0, |a, b| a + b);
            let collection: u64 = subtree_bytes
                .iter()
                .filter(|(u, _)| field.get(**u).is_some_and(|g| g.parent.is_some()))
                .map(|(_, b)| b)
                .sum();

            let lists: BTreeMap<u64, Vec<u64>> = (0..n as u64).map(|u| (u, vec![u])).collect();
            let collected = c_block(field, &lists, &Vec::new(), |a, b| merge_sorted(a, b));
            let mut federation_models = BTreeMap::new();
            for (&leader, members) in &collected {
                let models: Vec<&ParameterSet> = members.iter().map(|&u| &shared_params[u as usize]).collect();
                let weights: Vec<f64> = members
                    .iter()
                    .map(|&u| devices[u as usize].train.len() as f64)
                    .collect();
                federation_models.insert(leader, fed_avg(&models, Some(&weights))?);
            }

            let adopted = broadcast_block(field, &federation_models)?;
            let dissemination: u64 = field
                .nodes
                .iter()
                .filter(|(_, g)| g.parent.is_some())
                .map(|(u, _)| serialized_size(&CompressedModel::Dense(adopted[u].clone())))
                .sum();

            // step 7
            for d in devices.iter_mut() {
                d.model = adopted[&d.uid].clone();
            }
            RoundReport {
                round,
                partition,
                federation_models,
                traffic: Traffic {
                    broadcast,
                    collection,
                    dissemination,
                },
                representative_macs,
                dissimilarity: Some(ds),
            }
        }
    };
    Ok(report)
}

fn merge_sorted(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_unstable();
    out
}
