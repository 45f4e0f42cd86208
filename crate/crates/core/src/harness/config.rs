use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer};

use crate::data::{generate_synthetic, load_idx, split_fractions, DatasetSplits, LabeledSet, SyntheticSpec};
use crate::error::{Error, Result};
use crate::lease::{Hyperparams, Mode};
use crate::nn::{AudienceSpec, ExplainerSpec};
use crate::searchspace::{CandidateOp, CellSpec};

/// A run configuration. Every section and key is optional; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub hyper: Hyperparams,
    pub search: SearchSection,
    pub audience: AudienceSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub mode: Mode,
    pub iterations: usize,
    pub batch_size: usize,
    pub out_dir: PathBuf,
    /// Write `Δ′` every this many iterations; 0 disables.
    pub dump_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            mode: Mode::Lease,
            iterations: 200,
            batch_size: 16,
            out_dir: PathBuf::from("runs"),
            dump_every: 0,
        }
    }
}

/// The cell searched over and the network it is stacked into during search.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub cells: usize,
    pub nodes: usize,
    pub channels: usize,
    #[serde(deserialize_with = "de_ops")]
    pub ops: Vec<CandidateOp>,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { cells: 1, nodes: 3, channels: 4, ops: CandidateOp::ALL.to_vec() }
    }
}

fn de_ops<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<CandidateOp>, D::Error> {
    let names = Vec::<String>::deserialize(d)?;
    names.iter().map(|n| n.parse().map_err(serde::de::Error::custom)).collect()
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudienceSection {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl Default for AudienceSection {
    fn default() -> Self {
        AudienceSection { conv1_channels: 4, conv2_channels: 8 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    /// Alias the explainer and audience splits (one training set, one
    /// validation set).
    pub shared: bool,
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// IDX only: `[train, val, test]` when shared, otherwise
    /// `[e_train, a_train, e_val, a_val, test]`.
    pub fractions: Option<Vec<f64>>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            classes: 4,
            shared: true,
            size: 8,
            n_train: 64,
            n_val: 64,
            n_test: 256,
            noise: 0.1,
            images: None,
            labels: None,
            fractions: None,
        }
    }
}

/// The retraining phase: the discrete cell stacked `cells` times at
/// `channels` width, trained by plain gradient descent at `ξ_e`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub cells: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { cells: 2, channels: 8, epochs: 30, batch_size: 16 }
    }
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigValidation { field: field.into(), message: message.into() }
}

impl RunConfig {
    /// Parses and validates. Relative IDX paths stay relative to the
    /// working directory.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates; relative IDX paths are resolved against
    /// the directory holding the config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.images, &mut cfg.data.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.check().map_err(|(field, msg)| invalid(&format!("hyper.{field}"), msg))?;
        if self.run.batch_size == 0 {
            return Err(invalid("run.batch_size", "must be ≥ 1"));
        }
        if self.eval.batch_size == 0 {
            return Err(invalid("eval.batch_size", "must be ≥ 1"));
        }
        let positive = [
            ("search.cells", self.search.cells),
            ("search.channels", self.search.channels),
            ("audience.conv1_channels", self.audience.conv1_channels),
            ("audience.conv2_channels", self.audience.conv2_channels),
            ("eval.cells", self.eval.cells),
            ("eval.channels", self.eval.channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(invalid(field, "must be ≥ 1"));
            }
        }
        if self.search.nodes < 2 {
            return Err(invalid("search.nodes", format!("must be ≥ 2, got {}", self.search.nodes)));
        }
        if self.search.ops.is_empty() {
            return Err(invalid("search.ops", "needs at least one candidate op"));
        }
        if !self.search.ops.iter().any(|&op| op != CandidateOp::Zero) {
            return Err(invalid("search.ops", "needs an op other than zero"));
        }
        for (i, op) in self.search.ops.iter().enumerate() {
            if self.search.ops[..i].contains(op) {
                return Err(invalid("search.ops", format!("`{op}` listed twice")));
            }
        }
        let d = &self.data;
        if d.classes < 2 {
            return Err(invalid("data.classes", format!("must be ≥ 2, got {}", d.classes)));
        }
        match d.source {
            DataSource::Synthetic => {
                if d.classes > 4 {
                    return Err(invalid("data.classes", format!("the synthetic task has at most 4 classes, got {}", d.classes)));
                }
                if d.size < 4 {
                    return Err(invalid("data.size", format!("must be ≥ 4, got {}", d.size)));
                }
                for (field, n) in [("data.n_train", d.n_train), ("data.n_val", d.n_val), ("data.n_test", d.n_test)] {
                    if n < d.classes {
                        return Err(invalid(field, format!("must hold one image per class (≥ {}), got {n}", d.classes)));
                    }
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    return Err(invalid("data.noise", format!("must be a finite value ≥ 0, got {}", d.noise)));
                }
            }
            DataSource::Idx => {
                if d.images.is_none() {
                    return Err(invalid("data.images", "required when source = \"idx\""));
                }
                if d.labels.is_none() {
                    return Err(invalid("data.labels", "required when source = \"idx\""));
                }
                let want = if d.shared { 3 } else { 5 };
                let fr = self.fractions();
                if fr.len() != want {
                    return Err(invalid("data.fractions", format!("expected {want} fractions, got {}", fr.len())));
                }
                if fr.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
                    return Err(invalid("data.fractions", "every fraction must be > 0"));
                }
                let total: f64 = fr.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(invalid("data.fractions", format!("must sum to 1, got {total}")));
                }
            }
        }
        self.search_cell().validate().map_err(|e| invalid("search", e.to_string()))?;
        Ok(())
    }

    fn fractions(&self) -> Vec<f64> {
        match &self.data.fractions {
            Some(f) => f.clone(),
            None if self.data.shared => vec![0.4, 0.4, 0.2],
            None => vec![0.2; 5],
        }
    }

    pub fn search_cell(&self) -> CellSpec {
        CellSpec { n_nodes: self.search.nodes, ops: self.search.ops.clone(), channels: self.search.channels }
    }

    /// The mixed network used during search.
    pub fn search_explainer(&self) -> ExplainerSpec {
        ExplainerSpec { in_channels: 1, classes: self.data.classes, cells: self.search.cells, cell: self.search_cell() }
    }

    /// The discrete network retrained during evaluation.
    pub fn eval_explainer(&self) -> ExplainerSpec {
        ExplainerSpec {
            in_channels: 1,
            classes: self.data.classes,
            cells: self.eval.cells,
            cell: CellSpec { channels: self.eval.channels, ..self.search_cell() },
        }
    }

    pub fn audience(&self) -> AudienceSpec {
        AudienceSpec {
            in_channels: 1,
            conv1_channels: self.audience.conv1_channels,
            conv2_channels: self.audience.conv2_channels,
            classes: self.data.classes,
        }
    }

    /// The four search splits and the held-out test set. Synthetic data is
    /// drawn from the run seed; IDX data is shuffled with it.
    pub fn datasets(&self) -> Result<(DatasetSplits, LabeledSet)> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                let spec = SyntheticSpec {
                    size: d.size,
                    classes: d.classes,
                    n_train: d.n_train,
                    n_val: d.n_val,
                    noise: d.noise,
                    seed: self.run.seed,
                    shared: d.shared,
                };
                generate_synthetic(&spec, d.n_test)
            }
            DataSource::Idx => {
                let (images, labels) = (d.images.as_ref(), d.labels.as_ref());
                let set = load_idx(images.expect("validated"), labels.expect("validated"))?;
                if let Some(&bad) = set.labels.iter().find(|&&l| l >= d.classes) {
                    return Err(invalid("data.classes", format!("label {bad} found but classes = {}", d.classes)));
                }
                let mut parts = split_fractions(&set, &self.fractions(), self.run.seed)?.into_iter();
                let mut next = || parts.next().expect("validated fraction count");
                let splits = if d.shared {
                    let (train, val) = (next(), next());
                    DatasetSplits { e_train: train.clone(), a_train: train, e_val: val.clone(), a_val: val }
                } else {
                    DatasetSplits { e_train: next(), a_train: next(), e_val: next(), a_val: next() }
                };
                Ok((splits, next()))
            }
        }
    }
}
