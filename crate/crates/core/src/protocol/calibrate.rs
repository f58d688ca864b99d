use rayon::prelude::*;

use super::{cross_similarity, run_round, Arm, DeviceState, DissimilarityMatrix, ProtocolConfig};
use crate::compression::compress;
use crate::environment::Topology;
use crate::error::{Error, Result};
use crate::neuralnet::ParameterSet;

/// Dissimilarity of every topology edge for the devices' current models, as
/// their neighbours would see them.
pub fn edge_dissimilarities(
    devices: &[DeviceState],
    topology: &Topology,
    cfg: &ProtocolConfig,
) -> Result<DissimilarityMatrix> {
    let shown: Vec<ParameterSet> = devices
        .par_iter()
        .map(|d| {
            if cfg.similarity_uses_compressed {
                compress(&d.model, &cfg.strategy).map(|c| c.to_params())
            } else {
                Ok(d.model.clone())
            }
        })
        .collect::<Result<_>>()?;
    let edges = topology.edges();
    let scores: Vec<f64> = edges
        .par_iter()
        .map(|&(i, j)| {
            let (i, j) = (i as usize, j as usize);
            cross_similarity(&shown[i], &shown[j], &devices[i].validation, &devices[j].validation)
        })
        .collect::<Result<_>>()?;
    let mut ds = DissimilarityMatrix::default();
    for (&(i, j), &d) in edges.iter().zip(&scores) {
        ds.insert(i, j, d);
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub tau: f64,
    pub intra_median: Option<f64>,
    pub inter_median: Option<f64>,
    pub intra_edges: usize,
    pub inter_edges: usize,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Train every device alone for `warmup_rounds`, then put the threshold
/// halfway between the median dissimilarity of same-subregion edges and that
/// of cross-subregion edges.
///
/// Uses the hidden subregion labels, so it belongs to experiment setup, not
/// to the devices. Without cross-subregion edges the threshold is twice the
/// largest same-subregion score; without same-subregion edges, half the
/// smallest cross-subregion score.
pub fn calibrate_tau(
    devices: &[DeviceState],
    topology: &Topology,
    cfg: &ProtocolConfig,
    warmup_rounds: usize,
) -> Result<Calibration> {
    let mut devices = devices.to_vec();
    // tau is irrelevant for isolated rounds but must validate
    let cfg = ProtocolConfig {
        tau: 1.0,
        ..cfg.clone()
    };
    for r in 1..=warmup_rounds as u64 {
        run_round(&mut devices, topology, &cfg, Arm::Isolated, r)?;
    }
    let ds = edge_dissimilarities(&devices, topology, &cfg)?;
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for ((i, j), d) in ds.iter() {
        if topology.sites[i as usize].subregion_id == topology.sites[j as usize].subregion_id {
            intra.push(d);
        } else {
            inter.push(d);
        }
    }
    let (intra_edges, inter_edges) = (intra.len(), inter.len());
    let intra_max = intra.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inter_min = inter.iter().copied().fold(f64::INFINITY, f64::min);
    let (intra_median, inter_median) = (median(intra), median(inter));
    let tau = match (intra_median, inter_median) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(_), None) => 2.0 * intra_max,
        (None, Some(_)) => 0.5 * inter_min,
        (None, None) => 1.0,
    };
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "calibration produced unusable threshold {tau}"
        )));
    }
    Ok(Calibration {
        tau,
        intra_median,
        inter_median,
        intra_edges,
        inter_edges,
    })
}
