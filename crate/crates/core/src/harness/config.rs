//! Experiment configuration: a flat, sectioned `key = value` file.
//!
//! ```text
//! # four quadrants, 64 devices
//! [environment]
//! devices = 64
//! radius = auto
//!
//! [protocol]
//! psi = 0.3
//! ```
//!
//! Every key is optional. [`ExperimentConfig`]'s `Display` writes the full
//! file back with every key present.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::compression::CompressionKind;
use crate::environment::Placement;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentConfig {
    pub width: f64,
    pub height: f64,
    pub rows: usize,
    pub cols: usize,
    pub devices: usize,
    /// Communication radius; `None` means 1.5 lattice pitches.
    pub radius: Option<f64>,
    pub placement: Placement,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    SyntheticBlobs,
    IdxLabelSkew,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::SyntheticBlobs => "synthetic-blobs",
            DataSource::IdxLabelSkew => "idx-label-skew",
        }
    }
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-blobs" => Ok(DataSource::SyntheticBlobs),
            "idx-label-skew" => Ok(DataSource::IdxLabelSkew),
            other => Err(Error::InvalidArgument(format!("unknown distribution '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub distribution: DataSource,
    /// Samples per device, before the validation split.
    pub samples: usize,
    pub validation_fraction: f64,
    /// Held-out samples per subregion for scoring.
    pub test_samples: usize,
    pub epsilon: f64,
    pub features: usize,
    pub classes_per_region: usize,
    pub blob_std: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
    /// Label count of the idx pool; 0 takes the largest label plus one.
    pub idx_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes follow from the data.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSection {
    /// `None` calibrates the threshold before the run.
    pub tau: Option<f64>,
    pub calibration_rounds: usize,
    pub kind: CompressionKind,
    pub psi: f64,
    pub similarity_uses_compressed: bool,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub csv: PathBuf,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub protocol: ProtocolSection,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            environment: EnvironmentConfig {
                width: 10.0,
                height: 10.0,
                rows: 2,
                cols: 2,
                devices: 64,
                radius: None,
                placement: Placement::JitteredGrid,
                seed: 1,
            },
            data: DataConfig {
                distribution: DataSource::SyntheticBlobs,
                samples: 300,
                validation_fraction: 0.2,
                test_samples: 400,
                epsilon: 0.0,
                features: 8,
                classes_per_region: 2,
                blob_std: 0.1,
                idx_images: None,
                idx_labels: None,
                idx_test_images: None,
                idx_test_labels: None,
                idx_classes: 0,
            },
            model: ModelConfig { hidden: vec![16] },
            protocol: ProtocolSection {
                tau: None,
                calibration_rounds: 3,
                kind: CompressionKind::SparseQuantized,
                psi: 0.3,
                similarity_uses_compressed: true,
                rounds: 50,
                local_epochs: 2,
                batch_size: 16,
                learning_rate: 0.1,
            },
            output: OutputConfig {
                csv: PathBuf::from("metrics.csv"),
                checkpoint_dir: None,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn subregion_count(&self) -> usize {
        self.environment.rows * self.environment.cols
    }
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

struct Value<'a> {
    line: usize,
    key: &'a str,
    raw: &'a str,
}

impl Value<'_> {
    fn parse<T: std::str::FromStr>(&self, what: &str) -> Result<T> {
        self.raw
            .parse()
            .map_err(|_| cfg_err(self.line, format!("{}: expected {what}, got '{}'", self.key, self.raw)))
    }

    fn float(&self) -> Result<f64> {
        let v: f64 = self.parse("a number")?;
        if !v.is_finite() {
            return Err(cfg_err(self.line, format!("{} must be finite", self.key)));
        }
        Ok(v)
    }

    fn positive(&self) -> Result<f64> {
        let v = self.float()?;
        if v <= 0.0 {
            return Err(cfg_err(self.line, format!("{} must be > 0, got {v}", self.key)));
        }
        Ok(v)
    }

    fn count(&self, min: usize) -> Result<usize> {
        let v: usize = self.parse("a non-negative integer")?;
        if v < min {
            return Err(cfg_err(self.line, format!("{} must be >= {min}, got {v}", self.key)));
        }
        Ok(v)
    }

    fn unit(&self, lo_open: bool, hi_open: bool) -> Result<f64> {
        let v = self.float()?;
        let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
        let hi_ok = if hi_open { v < 1.0 } else { v <= 1.0 };
        if !(lo_ok && hi_ok) {
            let range = format!(
                "{}0, 1{}",
                if lo_open { "(" } else { "[" },
                if hi_open { ")" } else { "]" }
            );
            return Err(cfg_err(self.line, format!("{} must lie in {range}, got {v}", self.key)));
        }
        Ok(v)
    }

    fn auto_or_positive(&self) -> Result<Option<f64>> {
        if self.raw == "auto" {
            Ok(None)
        } else {
            self.positive().map(Some)
        }
    }

    fn boolean(&self) -> Result<bool> {
        match self.raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(cfg_err(
                self.line,
                format!("{}: expected true or false, got '{}'", self.key, self.raw),
            )),
        }
    }

    fn existing_file(&self) -> Result<Option<PathBuf>> {
        if self.raw.is_empty() {
            return Ok(None);
        }
        let p = PathBuf::from(self.raw);
        if !p.is_file() {
            return Err(cfg_err(
                self.line,
                format!("{}: no such file {}", self.key, p.display()),
            ));
        }
        Ok(Some(p))
    }
}

/// Parse and validate config text. Omitted keys take their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<String> = None;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| cfg_err(line, "unterminated section header"))?
                .trim();
            if !["environment", "data", "model", "protocol", "output"].contains(&name) {
                return Err(cfg_err(line, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, raw) = content
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("expected key = value, got '{content}'")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let sec = section
            .as_deref()
            .ok_or_else(|| cfg_err(line, format!("key '{key}' appears before any section")))?;
        let full = format!("{sec}.{key}");
        if let Some(first) = seen.insert(full.clone(), line) {
            return Err(cfg_err(line, format!("{full} already set on line {first}")));
        }
        let v = Value { line, key, raw };
        set_key(&mut cfg, sec, &v)?;
    }

    validate(&cfg, &seen)?;
    Ok(cfg)
}

fn set_key(cfg: &mut ExperimentConfig, section: &str, v: &Value) -> Result<()> {
    let env = &mut cfg.environment;
    let data = &mut cfg.data;
    let proto = &mut cfg.protocol;
    match (section, v.key) {
        ("environment", "width") => env.width = v.positive()?,
        ("environment", "height") => env.height = v.positive()?,
        ("environment", "rows") => env.rows = v.count(1)?,
        ("environment", "cols") => env.cols = v.count(1)?,
        ("environment", "devices") => env.devices = v.count(1)?,
        ("environment", "radius") => env.radius = v.auto_or_positive()?,
        ("environment", "placement") => {
            env.placement = v.raw.parse().map_err(|_| {
                cfg_err(
                    v.line,
                    format!("placement: expected uniform-random or jittered-grid, got '{}'", v.raw),
                )
            })?
        }
        ("environment", "seed") => env.seed = v.parse("an unsigned 64-bit integer")?,

        ("data", "distribution") => {
            data.distribution = v.raw.parse().map_err(|_| {
                cfg_err(
                    v.line,
                    format!(
                        "distribution: expected synthetic-blobs or idx-label-skew, got '{}'",
                        v.raw
                    ),
                )
            })?
        }
        ("data", "samples") => data.samples = v.count(2)?,
        ("data", "validation_fraction") => data.validation_fraction = v.unit(true, true)?,
        ("data", "test_samples") => data.test_samples = v.count(1)?,
        ("data", "epsilon") => data.epsilon = v.unit(false, true)?,
        ("data", "features") => data.features = v.count(1)?,
        ("data", "classes_per_region") => data.classes_per_region = v.count(1)?,
        ("data", "blob_std") => data.blob_std = v.positive()?,
        ("data", "idx_images") => data.idx_images = v.existing_file()?,
        ("data", "idx_labels") => data.idx_labels = v.existing_file()?,
        ("data", "idx_test_images") => data.idx_test_images = v.existing_file()?,
        ("data", "idx_test_labels") => data.idx_test_labels = v.existing_file()?,
        ("data", "idx_classes") => data.idx_classes = v.count(0)?,

        ("model", "hidden") => {
            cfg.model.hidden = if v.raw.is_empty() {
                Vec::new()
            } else {
                v.raw
                    .split(',')
                    .map(|w| {
                        Value {
                            line: v.line,
                            key: v.key,
                            raw: w.trim(),
                        }
                        .count(1)
                    })
                    .collect::<Result<_>>()?
            }
        }

        ("protocol", "tau") => proto.tau = v.auto_or_positive()?,
        ("protocol", "calibration_rounds") => proto.calibration_rounds = v.count(0)?,
        ("protocol", "kind") => {
            proto.kind = v.raw.parse().map_err(|_| {
                cfg_err(
                    v.line,
                    format!(
                        "kind: expected dense, sparse, quantized or sparse+quantized, got '{}'",
                        v.raw
                    ),
                )
            })?
        }
        ("protocol", "psi") => proto.psi = v.unit(false, true)?,
        ("protocol", "similarity_uses_compressed") => proto.similarity_uses_compressed = v.boolean()?,
        ("protocol", "rounds") => proto.rounds = v.count(1)?,
        ("protocol", "local_epochs") => proto.local_epochs = v.count(1)?,
        ("protocol", "batch_size") => proto.batch_size = v.count(1)?,
        ("protocol", "learning_rate") => {
            let lr = v.float()?;
            if lr < 0.0 {
                return Err(cfg_err(v.line, format!("learning_rate must be >= 0, got {lr}")));
            }
            proto.learning_rate = lr;
        }

        ("output", "csv") => {
            if v.raw.is_empty() {
                return Err(cfg_err(v.line, "csv path must not be empty"));
            }
            cfg.output.csv = PathBuf::from(v.raw);
        }
        ("output", "checkpoint_dir") => {
            cfg.output.checkpoint_dir = (!v.raw.is_empty()).then(|| PathBuf::from(v.raw));
        }

        (sec, key) => return Err(cfg_err(v.line, format!("unknown key '{key}' in [{sec}]"))),
    }
    Ok(())
}

/// Checks spanning several keys. Errors point at the first listed key that
/// was set in the file, or line 0 when all of them were defaulted.
fn validate(cfg: &ExperimentConfig, seen: &BTreeMap<String, usize>) -> Result<()> {
    let at = |keys: &[&str]| keys.iter().find_map(|k| seen.get(*k).copied()).unwrap_or(0);
    let d = &cfg.data;
    if d.distribution == DataSource::IdxLabelSkew {
        if d.idx_images.is_none() || d.idx_labels.is_none() {
            return Err(cfg_err(
                at(&["data.distribution", "data.idx_images", "data.idx_labels"]),
                "idx-label-skew needs idx_images and idx_labels",
            ));
        }
        if d.idx_test_images.is_some() != d.idx_test_labels.is_some() {
            return Err(cfg_err(
                at(&["data.idx_test_images", "data.idx_test_labels"]),
                "idx_test_images and idx_test_labels go together",
            ));
        }
        if d.idx_classes != 0 && d.idx_classes < cfg.subregion_count() {
            return Err(cfg_err(
                at(&["data.idx_classes"]),
                format!(
                    "{} labels cannot cover {} subregions",
                    d.idx_classes,
                    cfg.subregion_count()
                ),
            ));
        }
    }
    Ok(())
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn auto_or(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = &self.environment;
        writeln!(f, "[environment]")?;
        writeln!(f, "width = {}", e.width)?;
        writeln!(f, "height = {}", e.height)?;
        writeln!(f, "rows = {}", e.rows)?;
        writeln!(f, "cols = {}", e.cols)?;
        writeln!(f, "devices = {}", e.devices)?;
        writeln!(f, "radius = {}", auto_or(e.radius))?;
        writeln!(f, "placement = {}", e.placement.as_str())?;
        writeln!(f, "seed = {}", e.seed)?;

        let d = &self.data;
        writeln!(f, "\n[data]")?;
        writeln!(f, "distribution = {}", d.distribution.as_str())?;
        writeln!(f, "samples = {}", d.samples)?;
        writeln!(f, "validation_fraction = {}", d.validation_fraction)?;
        writeln!(f, "test_samples = {}", d.test_samples)?;
        writeln!(f, "epsilon = {}", d.epsilon)?;
        writeln!(f, "features = {}", d.features)?;
        writeln!(f, "classes_per_region = {}", d.classes_per_region)?;
        writeln!(f, "blob_std = {}", d.blob_std)?;
        writeln!(f, "idx_images = {}", opt_path(&d.idx_images))?;
        writeln!(f, "idx_labels = {}", opt_path(&d.idx_labels))?;
        writeln!(f, "idx_test_images = {}", opt_path(&d.idx_test_images))?;
        writeln!(f, "idx_test_labels = {}", opt_path(&d.idx_test_labels))?;
        writeln!(f, "idx_classes = {}", d.idx_classes)?;

        writeln!(f, "\n[model]")?;
        writeln!(f, "hidden = {}", join(&self.model.hidden))?;

        let p = &self.protocol;
        writeln!(f, "\n[protocol]")?;
        writeln!(f, "tau = {}", auto_or(p.tau))?;
        writeln!(f, "calibration_rounds = {}", p.calibration_rounds)?;
        writeln!(f, "kind = {}", p.kind)?;
        writeln!(f, "psi = {}", p.psi)?;
        writeln!(f, "similarity_uses_compressed = {}", p.similarity_uses_compressed)?;
        writeln!(f, "rounds = {}", p.rounds)?;
        writeln!(f, "local_epochs = {}", p.local_epochs)?;
        writeln!(f, "batch_size = {}", p.batch_size)?;
        writeln!(f, "learning_rate = {}", p.learning_rate)?;

        writeln!(f, "\n[output]")?;
        writeln!(f, "csv = {}", self.output.csv.display())?;
        writeln!(f, "checkpoint_dir = {}", opt_path(&self.output.checkpoint_dir))
    }
}
