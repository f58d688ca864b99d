//! The self-federation loop.
//!
//! Each global round every device compresses its model, trains it locally,
//! ships it to its neighbours, and scores each neighbour with a
//! cross-validation dissimilarity. Edges whose dissimilarity stays within the
//! threshold form a graph; every connected component becomes a federation led
//! by its minimum uid. Leaders collect member models up a gradient tree,
//! average them and send the result back down.

mod calibrate;
mod objective;
mod round;

use std::collections::BTreeMap;

use crate::compression::CompressionStrategy;
use crate::environment::Topology;
use crate::error::{Error, Result};
use crate::fields::{self, Coordination, FieldGraph};
use crate::neuralnet::{loss_and_accuracy, LabeledDataset, ParameterSet, TrainingConfig};

pub use calibrate::{calibrate_tau, edge_dissimilarities, Calibration};
pub use objective::{evaluate_objective, Objective};
pub use round::{run_round, Arm, DeviceState, RoundReport, Traffic};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Federation {
    pub leader: u64,
    /// Sorted, includes the leader.
    pub members: Vec<u64>,
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederationPartition {
    /// Ordered by leader uid.
    pub federations: Vec<Federation>,
    pub round: u64,
}

impl FederationPartition {
    pub fn len(&self) -> usize {
        self.federations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.federations.is_empty()
    }

    /// Leader of every device.
    pub fn leader_of(&self) -> BTreeMap<u64, u64> {
        self.federations
            .iter()
            .flat_map(|f| f.members.iter().map(move |&m| (m, f.leader)))
            .collect()
    }

    /// Every device in `0..n` sits in exactly one federation and every leader
    /// belongs to its own federation.
    pub fn is_valid_for(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for f in &self.federations {
            if !f.members.contains(&f.leader) {
                return false;
            }
            for &m in &f.members {
                match seen.get_mut(m as usize) {
                    Some(s) if !*s => *s = true,
                    _ => return false,
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn from_coordination(c: &Coordination, round: u64) -> Self {
        let mut groups: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (&u, &l) in &c.election.leader_of {
            groups.entry(l).or_default().push(u);
        }
        Self {
            federations: groups
                .into_iter()
                .map(|(leader, members)| Federation { leader, members, round })
                .collect(),
            round,
        }
    }

    pub fn singletons(n: usize, round: u64) -> Self {
        Self {
            federations: (0..n as u64)
                .map(|u| Federation {
                    leader: u,
                    members: vec![u],
                    round,
                })
                .collect(),
            round,
        }
    }

    pub fn single(n: usize, round: u64) -> Self {
        Self {
            federations: vec![Federation {
                leader: 0,
                members: (0..n as u64).collect(),
                round,
            }],
            round,
        }
    }
}

/// Symmetric dissimilarity on topology edges.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DissimilarityMatrix {
    entries: BTreeMap<(u64, u64), f64>,
}

impl DissimilarityMatrix {
    fn key(i: u64, j: u64) -> (u64, u64) {
        (i.min(j), i.max(j))
    }

    pub fn insert(&mut self, i: u64, j: u64, ds: f64) {
        self.entries.insert(Self::key(i, j), ds);
    }

    pub fn get(&self, i: u64, j: u64) -> Option<f64> {
        self.entries.get(&Self::key(i, j)).copied()
    }

    /// `((i, j), ds)` with `i < j`.
    pub fn iter(&self) -> impl Iterator<Item = ((u64, u64), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub tau: f64,
    pub strategy: CompressionStrategy,
    /// Score neighbours with the compressed model they shipped rather than
    /// their full-precision one.
    pub similarity_uses_compressed: bool,
    pub training: TrainingConfig,
    pub rounds: usize,
    pub validation_fraction: f64,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("need at least one round".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        CompressionStrategy::new(self.strategy.kind, self.strategy.psi)?;
        self.training.validate()
    }
}

/// `loss(model_j on val_i) + loss(model_i on val_j)`.
pub fn cross_similarity(
    model_i: &ParameterSet,
    model_j: &ParameterSet,
    val_i: &LabeledDataset,
    val_j: &LabeledDataset,
) -> Result<f64> {
    if !model_i.same_shape(model_j) {
        return Err(Error::Shape("models have different architectures".into()));
    }
    let (l_ij, _) = loss_and_accuracy(model_j, val_i)?;
    let (l_ji, _) = loss_and_accuracy(model_i, val_j)?;
    Ok(l_ij + l_ji)
}

/// Keep topology edges with `ds <= tau`, elect one leader per component and
/// grow the collection tree. Devices left without edges lead themselves.
pub fn form_federations(
    topology: &Topology,
    ds: &DissimilarityMatrix,
    tau: f64,
    round: u64,
) -> Result<(FederationPartition, Coordination)> {
    for (i, j) in topology.edges() {
        if ds.get(i, j).is_none() {
            return Err(Error::InvalidArgument(format!("no dissimilarity for edge ({i}, {j})")));
        }
    }
    let graph = FieldGraph::filtered(topology, |i, j| ds.get(i, j).is_some_and(|d| d <= tau));
    let coordination = fields::coordinate(&graph);
    Ok((
        FederationPartition::from_coordination(&coordination, round),
        coordination,
    ))
}

/// Weighted elementwise mean, accumulated in the order given.
///
/// Weights default to uniform. Callers pass models sorted by uid.
pub fn fed_avg(models: &[&ParameterSet], weights: Option<&[f64]>) -> Result<ParameterSet> {
    let Some(first) = models.first() else {
        return Err(Error::InvalidArgument("cannot average zero models".into()));
    };
    if let Some(w) = weights {
        if w.len() != models.len() {
            return Err(Error::InvalidArgument("one weight per model required".into()));
        }
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(
                "weights must be non-negative with a positive sum".into(),
            ));
        }
    }
    if models.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Shape("models have different architectures".into()));
    }
    // averaging identical inputs must return them bit for bit
    if models.iter().all(|m| *m == *first) {
        return Ok((*first).clone());
    }
    let total: f64 = weights.map_or(models.len() as f64, |w| w.iter().sum());
    let mut out = ParameterSet::zeros(&first.architecture());
    for (i, m) in models.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        out.axpy(w / total, m);
    }
    Ok(out)
}
