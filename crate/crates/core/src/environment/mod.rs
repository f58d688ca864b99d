//! The simulated world: a rectangular area cut into grid-cell subregions, the
//! devices scattered over it, who can hear whom, and what data each device
//! sees.

pub mod idx;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::neuralnet::LabeledDataset;
use crate::seed;

pub use idx::{load_idx, write_idx};

/// Rectangle `[0, width] x [0, height]` split into `rows x cols` equal cells.
/// Cell index is `row * cols + col`, row 0 at `y = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Area {
    pub width: f64,
    pub height: f64,
    pub rows: usize,
    pub cols: usize,
}

pub fn build_area(width: f64, height: f64, rows: usize, cols: usize) -> Result<Area> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "area dimensions must be positive, got {width}x{height}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("grid needs at least one cell".into()));
    }
    Ok(Area {
        width,
        height,
        rows,
        cols,
    })
}

impl Area {
    pub fn subregion_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Points on a shared edge go to the lower-index cell; points outside
    /// the rectangle are clamped onto it.
    pub fn subregion_of(&self, x: f64, y: f64) -> usize {
        let axis = |v: f64, extent: f64, cells: usize| -> usize {
            let pos = (v / (extent / cells as f64)).ceil() - 1.0;
            pos.clamp(0.0, (cells - 1) as f64) as usize
        };
        axis(y, self.height, self.rows) * self.cols + axis(x, self.width, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSite {
    pub uid: u64,
    pub x: f64,
    pub y: f64,
    /// Ground truth for evaluation. Protocol code never reads it.
    pub subregion_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    UniformRandom,
    /// `ceil(sqrt(n))`-wide lattice filled row-major, each point jittered
    /// by up to a quarter pitch on each axis.
    JitteredGrid,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::UniformRandom => "uniform-random",
            Placement::JitteredGrid => "jittered-grid",
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform-random" => Ok(Placement::UniformRandom),
            "jittered-grid" => Ok(Placement::JitteredGrid),
            _ => Err(format!("unknown placement '{s}'")),
        }
    }
}

/// Lattice side and pitch used by [`Placement::JitteredGrid`].
pub fn lattice(area: &Area, n: usize) -> (usize, f64, f64) {
    let side = (n as f64).sqrt().ceil().max(1.0) as usize;
    // ceil of the float sqrt can be off by one for large perfect squares
    let side = if (side - 1) * (side - 1) >= n { side - 1 } else { side }.max(1);
    (side, area.width / side as f64, area.height / side as f64)
}

pub fn deploy_devices(area: &Area, n: usize, placement: Placement, seed: u64) -> Result<Vec<DeviceSite>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one device".into()));
    }
    let mut rng = seed::rng(seed, &[0xDE91]);
    let (side, px, py) = lattice(area, n);
    let sites = (0..n)
        .map(|i| {
            let (x, y) = match placement {
                Placement::UniformRandom => (rng.random_range(0.0..area.width), rng.random_range(0.0..area.height)),
                Placement::JitteredGrid => {
                    let (r, c) = (i / side, i % side);
                    let jx = rng.random_range(-0.25..=0.25) * px;
                    let jy = rng.random_range(-0.25..=0.25) * py;
                    ((c as f64 + 0.5) * px + jx, (r as f64 + 0.5) * py + jy)
                }
            };
            DeviceSite {
                uid: i as u64,
                x,
                y,
                subregion_id: area.subregion_of(x, y),
            }
        })
        .collect();
    Ok(sites)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub sites: Vec<DeviceSite>,
    pub radius: f64,
    /// `adjacency[uid]` is the sorted neighbour list of device `uid`.
    pub adjacency: Vec<Vec<u64>>,
}

impl Topology {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn neighbors(&self, uid: u64) -> &[u64] {
        &self.adjacency[uid as usize]
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(u64, u64)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i as u64).map(move |&j| (i as u64, j)))
            .collect()
    }
}

/// Devices `i != j` are neighbours iff their distance is at most `radius`.
pub fn build_topology(sites: Vec<DeviceSite>, radius: f64) -> Result<Topology> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "communication radius must be positive, got {radius}"
        )));
    }
    for (i, s) in sites.iter().enumerate() {
        if s.uid != i as u64 {
            return Err(Error::InvalidArgument("device uids must be 0..n in order".into()));
        }
    }
    let adjacency = sites
        .iter()
        .map(|a| {
            sites
                .iter()
                .filter(|b| b.uid != a.uid && (a.x - b.x).hypot(a.y - b.y) <= radius)
                .map(|b| b.uid)
                .collect()
        })
        .collect();
    Ok(Topology {
        sites,
        radius,
        adjacency,
    })
}

/// Class-conditional Gaussian blobs, clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub dim: usize,
    /// Mean feature vector per class label.
    pub class_means: Vec<Vec<f64>>,
    /// Per subregion: owned labels and the blob standard deviation.
    pub regions: Vec<RegionBlobs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionBlobs {
    pub classes: Vec<usize>,
    pub std: f64,
}

impl BlobSpec {
    /// `k` subregions owning `per_region` consecutive labels each, class
    /// means uniform in `[0.15, 0.85]^dim`.
    pub fn disjoint(k: usize, per_region: usize, dim: usize, std: f64, seed: u64) -> Result<Self> {
        if k == 0 || per_region == 0 || dim == 0 {
            return Err(Error::InvalidArgument("blob spec needs k, classes and dim >= 1".into()));
        }
        if std.is_nan() || std <= 0.0 {
            return Err(Error::InvalidArgument("blob std must be positive".into()));
        }
        let mut rng = seed::rng(seed, &[0xB10B]);
        let class_means = (0..k * per_region)
            .map(|_| (0..dim).map(|_| rng.random_range(0.15..0.85)).collect())
            .collect();
        let regions = (0..k)
            .map(|j| RegionBlobs {
                classes: (j * per_region..(j + 1) * per_region).collect(),
                std,
            })
            .collect();
        Ok(Self {
            dim,
            class_means,
            regions,
        })
    }
}

/// A labelled sample pool and the labels each subregion owns.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxSpec {
    pub pool: Arc<LabeledDataset>,
    pub region_classes: Vec<Vec<usize>>,
}

impl IdxSpec {
    /// Split `0..classes` into `k` contiguous label ranges of near-equal size.
    pub fn contiguous(pool: Arc<LabeledDataset>, k: usize, classes: usize) -> Result<Self> {
        if k == 0 || classes < k {
            return Err(Error::InvalidArgument(format!(
                "cannot split {classes} labels over {k} subregions"
            )));
        }
        let region_classes = (0..k)
            .map(|j| (j * classes / k..(j + 1) * classes / k).collect())
            .collect();
        Ok(Self { pool, region_classes })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistributionKind {
    SyntheticBlobs(BlobSpec),
    IdxLabelSkew(IdxSpec),
}

/// Per-subregion data distributions plus a mixing fraction: each sample is
/// drawn from another subregion's labels with probability `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub epsilon: f64,
}

impl DistributionSpec {
    pub fn subregion_count(&self) -> usize {
        match &self.kind {
            DistributionKind::SyntheticBlobs(b) => b.regions.len(),
            DistributionKind::IdxLabelSkew(s) => s.region_classes.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            DistributionKind::SyntheticBlobs(b) => b.dim,
            DistributionKind::IdxLabelSkew(s) => s.pool.dim(),
        }
    }

    pub fn owned_labels(&self, subregion: usize) -> &[usize] {
        match &self.kind {
            DistributionKind::SyntheticBlobs(b) => &b.regions[subregion].classes,
            DistributionKind::IdxLabelSkew(s) => &s.region_classes[subregion],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "mixing fraction {} outside [0, 1)",
                self.epsilon
            )));
        }
        match &self.kind {
            DistributionKind::SyntheticBlobs(b) => {
                if b.regions.iter().any(|r| r.std.is_nan() || r.std <= 0.0) {
                    return Err(Error::InvalidArgument("blob std must be positive".into()));
                }
                if b.regions
                    .iter()
                    .flat_map(|r| &r.classes)
                    .any(|&c| c >= b.class_means.len())
                {
                    return Err(Error::InvalidArgument("region owns a class without a mean".into()));
                }
            }
            DistributionKind::IdxLabelSkew(s) => {
                let covered: BTreeSet<usize> = s.region_classes.iter().flatten().copied().collect();
                let present: BTreeSet<usize> = s.pool.labels().iter().copied().collect();
                if let Some(missing) = present.difference(&covered).next() {
                    return Err(Error::InvalidArgument(format!(
                        "label {missing} is not owned by any subregion"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draw `m` samples for a device in `subregion`.
///
/// The result depends only on `(spec, subregion, m, seed, salt)`; callers
/// pass the device uid as `salt`.
pub fn sample_local_dataset(
    spec: &DistributionSpec,
    subregion: usize,
    m: usize,
    seed: u64,
    salt: u64,
) -> Result<LabeledDataset> {
    if m == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if subregion >= spec.subregion_count() {
        return Err(Error::InvalidArgument(format!("no subregion {subregion}")));
    }
    let mut rng = seed::rng(seed, &[0xDA7A, subregion as u64, salt]);
    let owned = spec.owned_labels(subregion);
    match &spec.kind {
        DistributionKind::SyntheticBlobs(b) => {
            let others: Vec<usize> = (0..b.class_means.len()).filter(|c| !owned.contains(c)).collect();
            let std = b.regions[subregion].std;
            let mut out = LabeledDataset::empty(b.dim);
            let mut x = vec![0.0; b.dim];
            for _ in 0..m {
                let foreign = !others.is_empty() && rng.random::<f64>() < spec.epsilon;
                let pick = if foreign { &others } else { owned };
                let class = pick[rng.random_range(0..pick.len())];
                for (xi, mu) in x.iter_mut().zip(&b.class_means[class]) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xi = (mu + std * z).clamp(0.0, 1.0);
                }
                out.push(&x, class);
            }
            Ok(out)
        }
        DistributionKind::IdxLabelSkew(s) => {
            let (mut own_pool, mut other_pool): (Vec<usize>, Vec<usize>) =
                (0..s.pool.len()).partition(|&i| owned.contains(&s.pool.labels()[i]));
            own_pool.shuffle(&mut rng);
            other_pool.shuffle(&mut rng);
            let (mut own_iter, mut other_iter) = (own_pool.into_iter(), other_pool.into_iter());
            let mut picked = Vec::with_capacity(m);
            for _ in 0..m {
                let foreign = rng.random::<f64>() < spec.epsilon;
                let next = if foreign { other_iter.next() } else { own_iter.next() };
                picked.push(next.ok_or_else(|| {
                    Error::PoolExhausted(format!(
                        "subregion {subregion} needs {m} samples, {} pool ran dry",
                        if foreign { "foreign" } else { "owned" }
                    ))
                })?);
            }
            Ok(s.pool.subset(&picked))
        }
    }
}
