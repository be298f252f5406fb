//! TOML run configuration.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected and every value is range-checked on load.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use shapebias::bias::{ProbeDataset, SweepConfig, WorldConfig};
use shapebias::corpus::load_manifest;
use shapebias::diffcore::OptimizerKind;
use shapebias::embedder::EmbedderConfig;
use shapebias::matchnet::MatchNetConfig;
use shapebias::oneshot::DistanceKind;
use shapebias::seed::SeedKey;
use shapebias::stimgen::{make_probe_triples, DatasetMode, StimConfig};
use shapebias::{Error, Result};

/// Name of the generated triple set when it is used as a probe dataset.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub world: World,
    pub probes: Probes,
    pub embedder: Embedder,
    pub matchnet: MatchNet,
    pub sweep: Sweep,
    pub report: Report,
    /// Directory that relative paths in the file are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ByShape,
    ByColor,
    Conjunction,
}

impl From<Mode> for DatasetMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::ByShape => DatasetMode::ByShape,
            Mode::ByColor => DatasetMode::ByColor,
            Mode::Conjunction => DatasetMode::Conjunction,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct World {
    pub mode: Mode,
    pub size: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub mn_train_classes: usize,
}

impl Default for World {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            mode: Mode::ByShape,
            size: w.stim.size,
            n_shapes: w.stim.n_shapes,
            n_colors: w.stim.n_colors,
            n_classes: w.n_classes,
            n_per_class: w.n_per_class,
            n_test_per_class: w.n_test_per_class,
            mn_train_classes: w.mn_train_classes,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Probes {
    pub n_triples: usize,
    /// Include the generated triples as the `synthetic` dataset.
    pub synthetic: bool,
    pub manifests: Vec<ManifestEntry>,
}

impl Default for Probes {
    fn default() -> Self {
        Self {
            n_triples: 50,
            synthetic: true,
            manifests: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Rmsprop,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Embedder {
    pub feature_dim: usize,
    pub channels: [usize; 2],
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub checkpoint_interval: usize,
}

impl Default for Embedder {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            channels: [16, 32],
            steps: 1000,
            batch_size: 32,
            optimizer: OptimizerName::Rmsprop,
            learning_rate: 1e-3,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            checkpoint_interval: 100,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MatchNet {
    pub read_steps: usize,
    pub way: usize,
    pub learning_rate: f64,
    pub episodes: usize,
    pub checkpoint_interval: usize,
    pub eval_episodes: usize,
}

impl Default for MatchNet {
    fn default() -> Self {
        let m = MatchNetConfig::default();
        Self {
            read_steps: m.read_steps,
            way: m.way,
            learning_rate: m.learning_rate,
            episodes: 2000,
            checkpoint_interval: 200,
            eval_episodes: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DistanceName {
    Euclidean,
    Cosine,
}

impl From<DistanceName> for DistanceKind {
    fn from(d: DistanceName) -> Self {
        match d {
            DistanceName::Euclidean => DistanceKind::Euclidean,
            DistanceName::Cosine => DistanceKind::CosineDistance,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub n_embedder_seeds: usize,
    pub mn_seeds_per_embedder: usize,
    pub distance: DistanceName,
    pub jobs: usize,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            n_embedder_seeds: 5,
            mn_seeds_per_embedder: 3,
            distance: DistanceName::Euclidean,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Report {
    /// Dataset plotted by `report`; the first one in the records by default.
    pub dataset: Option<String>,
    /// KDE bandwidth; Silverman's rule when absent.
    pub bandwidth: Option<f64>,
    pub kde_points: Option<usize>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Decode(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probes.n_triples == 0 {
            return Err(bad("probes.n_triples must be at least 1"));
        }
        if !self.probes.synthetic && self.probes.manifests.is_empty() {
            return Err(bad("no probe datasets: enable probes.synthetic or list manifests"));
        }
        if self.probes.manifests.iter().any(|m| m.name == SYNTHETIC && self.probes.synthetic) {
            return Err(bad(format!("manifest name {SYNTHETIC:?} is reserved for the generated triples")));
        }
        if !(self.embedder.rms_decay > 0.0 && self.embedder.rms_decay < 1.0) || !(self.embedder.rms_eps > 0.0) {
            return Err(bad("embedder.rms_decay must lie in (0, 1) and rms_eps must be positive"));
        }
        if let Some(h) = self.report.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(bad(format!("report.bandwidth must be positive, got {h}")));
            }
        }
        if self.report.kde_points.is_some_and(|n| n < 2) {
            return Err(bad("report.kde_points must be at least 2"));
        }
        self.world_config().validate(self.matchnet.way)?;
        self.embedder_config(self.seed).validate()?;
        self.matchnet_config(self.seed).validate()?;
        if self.matchnet.eval_episodes == 0 {
            return Err(bad("matchnet.eval_episodes must be at least 1"));
        }
        if self.sweep.n_embedder_seeds == 0 || self.sweep.mn_seeds_per_embedder == 0 || self.sweep.jobs == 0 {
            return Err(bad("sweep counts and jobs must be at least 1"));
        }
        Ok(())
    }

    pub fn stim_config(&self) -> StimConfig {
        StimConfig {
            size: self.world.size,
            n_shapes: self.world.n_shapes,
            n_colors: self.world.n_colors,
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            stim: self.stim_config(),
            mode: self.world.mode.into(),
            n_classes: self.world.n_classes,
            n_per_class: self.world.n_per_class,
            n_test_per_class: self.world.n_test_per_class,
            mn_train_classes: self.world.mn_train_classes,
            seed: SeedKey::new(self.seed).child("world").value(),
        }
    }

    pub fn embedder_config(&self, seed: u64) -> EmbedderConfig {
        let e = &self.embedder;
        EmbedderConfig {
            image_size: self.world.size,
            feature_dim: e.feature_dim,
            channels: (e.channels[0], e.channels[1]),
            steps: e.steps,
            batch_size: e.batch_size,
            optimizer: match e.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Rmsprop => OptimizerKind::RmsProp {
                    decay: e.rms_decay,
                    eps: e.rms_eps,
                },
            },
            learning_rate: e.learning_rate,
            checkpoint_interval: e.checkpoint_interval,
            seed,
        }
    }

    pub fn matchnet_config(&self, seed: u64) -> MatchNetConfig {
        let m = &self.matchnet;
        MatchNetConfig {
            read_steps: m.read_steps,
            way: m.way,
            learning_rate: m.learning_rate,
            episodes: m.episodes,
            checkpoint_interval: m.checkpoint_interval,
            seed,
        }
    }

    pub fn triple_seed(&self) -> u64 {
        SeedKey::new(self.seed).child("triples").value()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        match (flag, &self.out_dir) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => PathBuf::from("runs"),
        }
    }

    /// Probe datasets in config order: the generated triples first.
    pub fn probe_datasets(&self) -> Result<Vec<ProbeDataset>> {
        let mut out = Vec::new();
        if self.probes.synthetic {
            out.push(ProbeDataset {
                name: SYNTHETIC.to_string(),
                triples: make_probe_triples(&self.stim_config(), self.probes.n_triples, self.triple_seed())?,
            });
        }
        for m in &self.probes.manifests {
            out.push(ProbeDataset {
                name: m.name.clone(),
                triples: load_manifest(&self.resolve(&m.path))?,
            });
        }
        Ok(out)
    }

    pub fn sweep_config(&self, distance: Option<DistanceKind>, jobs: Option<usize>) -> Result<SweepConfig> {
        let cfg = SweepConfig {
            n_embedder_seeds: self.sweep.n_embedder_seeds,
            mn_seeds_per_embedder: self.sweep.mn_seeds_per_embedder,
            seed_base: self.seed,
            world: self.world_config(),
            embedder: self.embedder_config(self.seed),
            matchnet: self.matchnet_config(self.seed),
            distance: distance.unwrap_or(self.sweep.distance.into()),
            datasets: self.probe_datasets()?,
            eval_episodes: self.matchnet.eval_episodes,
            jobs: jobs.unwrap_or(self.sweep.jobs),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
