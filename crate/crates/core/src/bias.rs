//! The shape-bias harness: probing, bias measurement and seed sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::corpus::{records_write, BiasRecord, ModelKind};
use crate::embedder::{classify_accuracy, train_embedder, EmbedderCheckpoint, EmbedderConfig};
use crate::error::{Error, Result};
use crate::matchnet::{mn_predict, sample_episode, train_matchnet, MatchNet, MatchNetConfig};
use crate::oneshot::{episode_accuracy, DistanceKind, SupportSet};
use crate::seed::SeedKey;
use crate::stimgen::{generate_dataset, DatasetMode, LabeledDataset, ProbeTriple, StimConfig};

/// Label given to the shape-match image in probe support sets.
pub const SHAPE_LABEL: usize = 0;
/// Label given to the color-match image in probe support sets.
pub const COLOR_LABEL: usize = 1;
/// MN seeds are `embedder_seed * MN_SEED_STRIDE + j`.
pub const MN_SEED_STRIDE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Choice {
    ShapeMatch,
    ColorMatch,
}

impl Choice {
    pub fn complement(self) -> Self {
        match self {
            Choice::ShapeMatch => Choice::ColorMatch,
            Choice::ColorMatch => Choice::ShapeMatch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub triple_id: usize,
    pub chosen: Choice,
    /// Preference for the shape match: distance gap for IB, probability gap
    /// for MN. Exactly 0 marks a tie, which counts as a shape choice.
    pub margin: f64,
}

impl ProbeOutcome {
    pub fn is_tie(&self) -> bool {
        self.margin == 0.0
    }
}

/// Embedder features of one triple's three images.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleFeatures {
    pub triple_id: usize,
    pub probe: Vec<f64>,
    pub shape_match: Vec<f64>,
    pub color_match: Vec<f64>,
}

pub fn embed_triples(checkpoint: &EmbedderCheckpoint, triples: &[ProbeTriple]) -> Result<Vec<TripleFeatures>> {
    let images: Vec<_> = triples
        .iter()
        .flat_map(|t| [&t.probe.image, &t.shape_match.image, &t.color_match.image])
        .collect();
    let feats = checkpoint.embed_batch(&images)?;
    Ok(triples
        .iter()
        .zip(feats.chunks(3))
        .map(|(t, f)| TripleFeatures {
            triple_id: t.triple_id,
            probe: f[0].clone(),
            shape_match: f[1].clone(),
            color_match: f[2].clone(),
        })
        .collect())
}

/// A one-shot classifier seen through per-label scores (higher is better).
pub trait ProbeScorer {
    fn scores(&self, probe: &[f64], support: &SupportSet<Vec<f64>>) -> Result<Vec<f64>>;
}

/// Inception-baseline analog: nearest neighbor over raw features. A label's
/// score is minus the distance to its closest support item.
#[derive(Clone, Copy, Debug, Default)]
pub struct IbScorer(pub DistanceKind);

impl ProbeScorer for IbScorer {
    fn scores(&self, probe: &[f64], support: &SupportSet<Vec<f64>>) -> Result<Vec<f64>> {
        let mut best = vec![f64::NEG_INFINITY; support.n_labels()];
        for (x, y) in support.items() {
            let s = -self.0.distance(probe, x)?;
            if s > best[*y] {
                best[*y] = s;
            }
        }
        Ok(best)
    }
}

/// Matching Network: scores are the predictive distribution.
#[derive(Clone, Copy, Debug)]
pub struct MnScorer<'a>(pub &'a MatchNet);

impl ProbeScorer for MnScorer<'_> {
    fn scores(&self, probe: &[f64], support: &SupportSet<Vec<f64>>) -> Result<Vec<f64>> {
        mn_predict(self.0, probe, support)
    }
}

/// Probe with the support set `{(x_s, y_s), (x_c, y_c)}`, shape match
/// first unless `color_first`.
pub fn probe_ordered<S: ProbeScorer + ?Sized>(scorer: &S, t: &TripleFeatures, color_first: bool) -> Result<ProbeOutcome> {
    let s = (t.shape_match.clone(), SHAPE_LABEL);
    let c = (t.color_match.clone(), COLOR_LABEL);
    let items = if color_first { vec![c, s] } else { vec![s, c] };
    let support = SupportSet::new(items)?;
    let scores = scorer.scores(&t.probe, &support).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("triple {}: {m}", t.triple_id)),
        other => other,
    })?;
    let margin = scores[SHAPE_LABEL] - scores[COLOR_LABEL];
    if margin.is_nan() {
        return Err(Error::numeric(format!("triple {}: undefined score margin", t.triple_id)));
    }
    Ok(ProbeOutcome {
        triple_id: t.triple_id,
        chosen: if margin >= 0.0 { Choice::ShapeMatch } else { Choice::ColorMatch },
        margin,
    })
}

pub fn probe_once<S: ProbeScorer + ?Sized>(scorer: &S, t: &TripleFeatures) -> Result<ProbeOutcome> {
    probe_ordered(scorer, t, false)
}

/// `B_s`: the fraction of probes given the shape-match label.
pub fn measure_bias(outcomes: &[ProbeOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::contract("bias of an empty outcome list"));
    }
    let shape = outcomes.iter().filter(|o| o.chosen == Choice::ShapeMatch).count();
    Ok(shape as f64 / outcomes.len() as f64)
}

pub fn tie_count(outcomes: &[ProbeOutcome]) -> usize {
    outcomes.iter().filter(|o| o.is_tie()).count()
}

pub fn probe_all<S: ProbeScorer + ?Sized>(scorer: &S, features: &[TripleFeatures]) -> Result<Vec<ProbeOutcome>> {
    features.iter().map(|t| probe_once(scorer, t)).collect()
}

pub fn bias_of<S: ProbeScorer + ?Sized>(scorer: &S, features: &[TripleFeatures]) -> Result<f64> {
    measure_bias(&probe_all(scorer, features)?)
}

// --- sweeps -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub name: String,
    pub triples: Vec<ProbeTriple>,
}

/// The labeled world the embedders (and MNs) learn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldConfig {
    pub stim: StimConfig,
    pub mode: DatasetMode,
    pub n_classes: usize,
    pub n_per_class: usize,
    /// Test images per class for the accuracy columns.
    pub n_test_per_class: usize,
    /// Classes `0..mn_train_classes` train the MNs; the rest of the library
    /// is held out for MN one-shot accuracy.
    pub mn_train_classes: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            stim: StimConfig::default(),
            mode: DatasetMode::ByShape,
            n_classes: 10,
            n_per_class: 100,
            n_test_per_class: 20,
            mn_train_classes: 8,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Number of classes the library offers in this mode.
    pub fn library_classes(&self) -> usize {
        match self.mode {
            DatasetMode::ByShape => self.stim.n_shapes,
            DatasetMode::ByColor => self.stim.n_colors,
            DatasetMode::Conjunction => self.stim.n_shapes * self.stim.n_colors,
        }
    }

    pub fn validate(&self, way: usize) -> Result<()> {
        self.stim.validate()?;
        let lib = self.library_classes();
        if self.n_classes < 2 || self.n_classes > lib {
            return Err(Error::contract(format!("world needs 2..={lib} classes, got {}", self.n_classes)));
        }
        if self.n_per_class < 2 || self.n_test_per_class < 2 {
            return Err(Error::contract("worlds need at least 2 training and 2 test images per class"));
        }
        if self.mn_train_classes < way || self.mn_train_classes > self.n_classes {
            return Err(Error::contract(format!(
                "MN training classes must lie in {way}..={}, got {}",
                self.n_classes, self.mn_train_classes
            )));
        }
        if lib - self.mn_train_classes < way {
            return Err(Error::contract(format!(
                "only {} held-out classes remain for {way}-way evaluation",
                lib - self.mn_train_classes
            )));
        }
        Ok(())
    }

    pub fn training_set(&self) -> Result<LabeledDataset> {
        generate_dataset(&self.stim, self.mode, self.n_classes, self.n_per_class, SeedKey::new(self.seed).child("world-train").value())
    }

    /// Every library class, `n_test_per_class` fresh images each.
    pub fn test_set(&self) -> Result<LabeledDataset> {
        generate_dataset(
            &self.stim,
            self.mode,
            self.library_classes(),
            self.n_test_per_class,
            SeedKey::new(self.seed).child("world-test").value(),
        )
    }
}

/// Test images of the embedder's own classes.
pub fn seen_class_subset(test: &LabeledDataset, n_classes: usize) -> LabeledDataset {
    LabeledDataset {
        items: test.items.iter().filter(|it| it.label < n_classes).cloned().collect(),
        mode: test.mode,
        n_classes,
    }
}

/// `(features, class)` pairs for the given images.
pub fn feature_items(checkpoint: &EmbedderCheckpoint, data: &LabeledDataset) -> Result<Vec<(Vec<f64>, usize)>> {
    let images: Vec<_> = data.items.iter().map(|it| &it.stimulus.image).collect();
    let feats = checkpoint.embed_batch(&images)?;
    Ok(feats.into_iter().zip(data.items.iter().map(|it| it.label)).collect())
}

/// Mean accuracy of `classifier` over `n` fixed-seed `way`-way episodes.
pub fn one_shot_accuracy<C>(classifier: &C, items: &[(Vec<f64>, usize)], way: usize, n: usize, seed: u64) -> Result<f64>
where
    C: crate::oneshot::OneShotClassifier<Vec<f64>> + ?Sized,
{
    let mut rng = SeedKey::new(seed).child("eval-episodes").rng();
    let episodes = (0..n).map(|_| sample_episode(items, way, &mut rng)).collect::<Result<Vec<_>>>()?;
    episode_accuracy(classifier, &episodes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub n_embedder_seeds: usize,
    pub mn_seeds_per_embedder: usize,
    pub seed_base: u64,
    pub world: WorldConfig,
    pub embedder: EmbedderConfig,
    pub matchnet: MatchNetConfig,
    pub distance: DistanceKind,
    pub datasets: Vec<ProbeDataset>,
    /// Episodes used for the MN accuracy column.
    pub eval_episodes: usize,
    /// Concurrent seed-jobs.
    pub jobs: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_embedder_seeds == 0 || self.mn_seeds_per_embedder == 0 || self.jobs == 0 || self.eval_episodes == 0 {
            return Err(Error::contract("sweep counts must all be at least 1"));
        }
        if self.mn_seeds_per_embedder as u64 > MN_SEED_STRIDE {
            return Err(Error::contract(format!("at most {MN_SEED_STRIDE} MN seeds per embedder")));
        }
        let last = self.seed_base.checked_add(self.n_embedder_seeds as u64 - 1);
        if last.and_then(|s| s.checked_mul(MN_SEED_STRIDE)).is_none() {
            return Err(Error::contract("embedder seeds too large to derive MN seeds"));
        }
        if self.datasets.is_empty() {
            return Err(Error::contract("sweep needs at least one probe dataset"));
        }
        let names: BTreeSet<_> = self.datasets.iter().map(|d| &d.name).collect();
        if names.len() != self.datasets.len() {
            return Err(Error::contract("probe dataset names must be unique"));
        }
        if self.datasets.iter().any(|d| d.triples.is_empty()) {
            return Err(Error::contract("probe datasets must be nonempty"));
        }
        self.world.validate(self.matchnet.way)?;
        self.embedder.validate()?;
        self.matchnet.validate()
    }

    pub fn embedder_seeds(&self) -> Vec<u64> {
        (0..self.n_embedder_seeds as u64).map(|i| self.seed_base + i).collect()
    }

    /// IB records the sweep will emit.
    pub fn expected_ib_records(&self) -> usize {
        self.n_embedder_seeds * self.embedder.n_checkpoints() * self.datasets.len()
    }

    pub fn expected_mn_records(&self) -> usize {
        let mn_checkpoints = self.matchnet.episodes / self.matchnet.checkpoint_interval + 1;
        self.n_embedder_seeds * self.mn_seeds_per_embedder * mn_checkpoints * self.datasets.len()
    }
}

pub fn mn_seed(embedder_seed: u64, j: usize) -> u64 {
    embedder_seed * MN_SEED_STRIDE + j as u64
}

pub fn embedder_seed_of(mn_seed: u64) -> u64 {
    mn_seed / MN_SEED_STRIDE
}

/// Shared, read-only inputs for every seed job.
struct SweepData {
    train: LabeledDataset,
    test_seen: LabeledDataset,
    mn_train: LabeledDataset,
    mn_heldout: LabeledDataset,
}

fn seed_job(config: &SweepConfig, data: &SweepData, seed: u64, log: &(dyn Fn(&str) + Sync)) -> Result<Vec<BiasRecord>> {
    let ecfg = EmbedderConfig { seed, ..config.embedder };
    let checkpoints = train_embedder(&data.train, &ecfg)?;
    let ib = IbScorer(config.distance);
    let mut out = Vec::new();
    for ck in &checkpoints {
        let acc = classify_accuracy(ck, &data.test_seen)?;
        for ds in &config.datasets {
            let feats = embed_triples(ck, &ds.triples)?;
            let bias = bias_of(&ib, &feats)?;
            out.push(BiasRecord {
                model_kind: ModelKind::Ib,
                seed,
                step: ck.step,
                dataset: ds.name.clone(),
                bias,
                accuracy: acc,
            });
        }
        log(&format!("IB\t{seed}\t{}\taccuracy={acc:.4}", ck.step));
    }
    let last = checkpoints.last().expect("training emits at least the step-0 checkpoint");
    let mn_train = feature_items(last, &data.mn_train)?;
    let heldout = feature_items(last, &data.mn_heldout)?;
    let probe_feats = config
        .datasets
        .iter()
        .map(|ds| embed_triples(last, &ds.triples))
        .collect::<Result<Vec<_>>>()?;
    for j in 0..config.mn_seeds_per_embedder {
        let s = mn_seed(seed, j);
        let mcfg = MatchNetConfig { seed: s, ..config.matchnet };
        let run = train_matchnet(&mn_train, &mcfg)?;
        for ck in &run.checkpoints {
            let acc = one_shot_accuracy(&ck.model, &heldout, mcfg.way, config.eval_episodes, s)?;
            for (ds, feats) in config.datasets.iter().zip(&probe_feats) {
                let bias = bias_of(&MnScorer(&ck.model), feats)?;
                out.push(BiasRecord {
                    model_kind: ModelKind::Mn,
                    seed: s,
                    step: ck.episode,
                    dataset: ds.name.clone(),
                    bias,
                    accuracy: acc,
                });
            }
            log(&format!("MN\t{s}\t{}\taccuracy={acc:.4}", ck.episode));
        }
    }
    Ok(out)
}

pub fn sort_records(records: &mut [BiasRecord]) {
    records.sort_by(|a, b| a.key().cmp(&b.key()));
}

/// Runs every seed job (at most `config.jobs` at once) and returns the
/// records sorted by key. With `out`, the sorted records gathered so far are
/// rewritten after each finished job, so a failure leaves completed jobs on
/// disk.
pub fn run_sweep(config: &SweepConfig, out: Option<&Path>, log: &(dyn Fn(&str) + Sync)) -> Result<Vec<BiasRecord>> {
    config.validate()?;
    let train = config.world.training_set()?;
    let test = config.world.test_set()?;
    let test_seen = seen_class_subset(&test, config.world.n_classes);
    let mn_train = seen_class_subset(&train, config.world.mn_train_classes);
    let (_, mn_heldout) = test.split_classes(config.world.mn_train_classes)?;
    let data = SweepData {
        train,
        test_seen,
        mn_train,
        mn_heldout,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::contract(format!("cannot start {} worker threads: {e}", config.jobs)))?;
    let collected: Mutex<Vec<BiasRecord>> = Mutex::new(Vec::new());
    let results: Vec<Result<()>> = pool.install(|| {
        config
            .embedder_seeds()
            .par_iter()
            .map(|&seed| {
                let recs = seed_job(config, &data, seed, log)?;
                let mut all = collected.lock().expect("record writer poisoned");
                all.extend(recs);
                sort_records(&mut all);
                if let Some(path) = out {
                    records_write(path, &all)?;
                }
                Ok(())
            })
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let mut all = collected.into_inner().expect("record writer poisoned");
    sort_records(&mut all);
    Ok(all)
}

/// The last-step record of every `(kind, seed)` on `dataset`.
pub fn final_records<'a>(records: &'a [BiasRecord], kind: ModelKind, dataset: &str) -> Vec<&'a BiasRecord> {
    let mut last: BTreeMap<u64, &BiasRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.model_kind == kind && r.dataset == dataset) {
        let e = last.entry(r.seed).or_insert(r);
        if r.step > e.step {
            *e = r;
        }
    }
    last.into_values().collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasPair {
    pub embedder_seed: u64,
    pub mn_seed: u64,
    pub ib_bias: f64,
    pub mn_bias: f64,
}

/// Pairs each MN's final bias with the final bias of the embedder that fed
/// it, on one dataset.
pub fn pair_mn_ib(records: &[BiasRecord], dataset: &str) -> Result<Vec<BiasPair>> {
    let ib: BTreeMap<u64, f64> = final_records(records, ModelKind::Ib, dataset)
        .into_iter()
        .map(|r| (r.seed, r.bias))
        .collect();
    let mn = final_records(records, ModelKind::Mn, dataset);
    if mn.is_empty() {
        return Err(Error::contract(format!("no MN records for dataset {dataset:?}")));
    }
    let missing: Vec<String> = mn
        .iter()
        .filter(|r| !ib.contains_key(&embedder_seed_of(r.seed)))
        .map(|r| format!("MN {} (embedder {})", r.seed, embedder_seed_of(r.seed)))
        .collect();
    if !missing.is_empty() {
        return Err(Error::contract(format!("no IB counterpart for {}", missing.join(", "))));
    }
    Ok(mn
        .into_iter()
        .map(|r| {
            let e = embedder_seed_of(r.seed);
            BiasPair {
                embedder_seed: e,
                mn_seed: r.seed,
                ib_bias: ib[&e],
                mn_bias: r.bias,
            }
        })
        .collect())
}

/// Start, middle and end windows over sorted checkpoint steps: the first,
/// middle and last tenth of the checkpoints, at least one each.
pub fn training_windows(steps: &[usize]) -> Result<[Vec<usize>; 3]> {
    let mut steps = steps.to_vec();
    steps.sort_unstable();
    steps.dedup();
    let n = steps.len();
    if n == 0 {
        return Err(Error::contract("no checkpoints to window"));
    }
    let w = (n / 10).max(1);
    let mid = (n - w) / 2;
    Ok([steps[..w].to_vec(), steps[mid..mid + w].to_vec(), steps[n - w..].to_vec()])
}

/// Records file path used by the sweep command inside an output directory.
pub fn records_path(dir: &Path) -> PathBuf {
    dir.join("records.csv")
}
