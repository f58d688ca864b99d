use std::collections::BTreeMap;

use super::FederationPartition;
use crate::environment::DeviceSite;
use crate::error::{Error, Result};
use crate::neuralnet::{loss_and_accuracy, LabeledDataset, ParameterSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    /// Sum over subregions of the mean test loss.
    pub total: f64,
    pub region_loss: Vec<f64>,
    pub region_accuracy: Vec<f64>,
}

/// Score every subregion with the models its devices hold.
///
/// For subregion `j`, each federation contributes its model's loss and
/// accuracy on `test_sets[j]`, weighted by how many of its members sit in
/// `j`. When federations coincide with subregions this is exactly each
/// federation's model on its own subregion's test set.
pub fn evaluate_objective(
    partition: &FederationPartition,
    federation_models: &BTreeMap<u64, ParameterSet>,
    sites: &[DeviceSite],
    test_sets: &[LabeledDataset],
) -> Result<Objective> {
    let k = test_sets.len();
    let mut loss = vec![0.0; k];
    let mut acc = vec![0.0; k];
    let mut devices = vec![0usize; k];

    for f in &partition.federations {
        let model = federation_models.get(&f.leader).ok_or(Error::MissingSource(f.leader))?;
        let mut per_region: BTreeMap<usize, usize> = BTreeMap::new();
        for &m in &f.members {
            let site = sites
                .get(m as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("no site for device {m}")))?;
            if site.subregion_id >= k {
                return Err(Error::InvalidArgument(format!(
                    "device {m} sits in subregion {} but only {k} test sets were given",
                    site.subregion_id
                )));
            }
            *per_region.entry(site.subregion_id).or_default() += 1;
        }
        for (j, count) in per_region {
            let (l, a) = loss_and_accuracy(model, &test_sets[j])?;
            loss[j] += count as f64 * l;
            acc[j] += count as f64 * a;
            devices[j] += count;
        }
    }

    for j in 0..k {
        if devices[j] > 0 {
            loss[j] /= devices[j] as f64;
            acc[j] /= devices[j] as f64;
        } else {
            // nobody serves this subregion
            loss[j] = f64::NAN;
            acc[j] = f64::NAN;
        }
    }
    Ok(Objective {
        total: loss.iter().filter(|v| !v.is_nan()).sum(),
        region_loss: loss,
        region_accuracy: acc,
    })
}
