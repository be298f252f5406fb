//! Matching Networks over frozen embedder features.
//!
//! The network never sees pixels: `g′` and `f′` are the embedder's feature
//! vectors, computed once and passed in. Support embeddings come from a
//! bidirectional LSTM with a skip connection, probe embeddings from an LSTM
//! that reads the embedded support through cosine attention for `K` steps.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::{
    cosine_similarity, decode_params, encode_params, lstm_step, softmax_rows, Graph, LstmNodes, LstmParams, NodeId,
    Optimizer, ParamStore, Tensor,
};
use crate::error::{Error, Result};
use crate::oneshot::{one_shot_label, Episode, OneShotClassifier, SupportSet};
use crate::seed::SeedKey;

pub const DEFAULT_READ_STEPS: usize = 2;
/// Probabilities below this are clamped before the log in the episode loss.
pub const LOG_FLOOR: f64 = 1e-12;
/// Parameter holding K; its presence marks an MN checkpoint file.
pub const READ_STEPS_PARAM: &str = "meta.read_steps";

const SIDECAR_EXT: &str = "embedder";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchNetConfig {
    pub read_steps: usize,
    pub way: usize,
    pub learning_rate: f64,
    pub episodes: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for MatchNetConfig {
    fn default() -> Self {
        Self {
            read_steps: DEFAULT_READ_STEPS,
            way: 2,
            learning_rate: 0.1,
            episodes: 1000,
            checkpoint_interval: 100,
            seed: 0,
        }
    }
}

impl MatchNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::contract(format!("episodes need at least 2 classes, got way={}", self.way)));
        }
        if self.checkpoint_interval == 0 || self.episodes % self.checkpoint_interval != 0 {
            return Err(Error::contract(format!(
                "checkpoint interval {} must be positive and divide {} episodes",
                self.checkpoint_interval, self.episodes
            )));
        }
        Optimizer::sgd(self.learning_rate).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchNet {
    params: ParamStore,
    g_fwd: LstmParams,
    g_bwd: LstmParams,
    f_cell: LstmParams,
    read_steps: usize,
    embedder_path: Option<PathBuf>,
}

struct Bound {
    g_fwd: LstmNodes,
    g_bwd: LstmNodes,
    f_cell: LstmNodes,
}

impl MatchNet {
    /// Glorot-initialized LSTMs with hidden size `feature_dim`.
    pub fn new(feature_dim: usize, read_steps: usize, seed: u64) -> Result<Self> {
        let mut rng = SeedKey::new(seed).child("matchnet-init").rng();
        let mut params = ParamStore::new();
        let d = feature_dim;
        let g_fwd = LstmParams::init(&mut params, "g_fwd", d, d, d, &mut rng)?;
        let g_bwd = LstmParams::init(&mut params, "g_bwd", d, d, d, &mut rng)?;
        let f_cell = LstmParams::init(&mut params, "f_lstm", d, 2 * d, d, &mut rng)?;
        Ok(Self {
            params,
            g_fwd,
            g_bwd,
            f_cell,
            read_steps,
            embedder_path: None,
        })
    }

    /// Every LSTM weight and bias zero.
    pub fn zeroed(feature_dim: usize, read_steps: usize) -> Result<Self> {
        let mut m = Self::new(feature_dim, read_steps, 0)?;
        m.params.zero_all();
        Ok(m)
    }

    /// Wraps a parameter store holding the `g_fwd`, `g_bwd` and `f_lstm` cells.
    pub fn from_params(params: ParamStore, read_steps: usize) -> Result<Self> {
        let g_fwd = LstmParams::lookup(&params, "g_fwd")?;
        let g_bwd = LstmParams::lookup(&params, "g_bwd")?;
        let f_cell = LstmParams::lookup(&params, "f_lstm")?;
        let d = g_fwd.hidden;
        let consistent = [g_fwd, g_bwd, f_cell].iter().all(|l| l.hidden == d && l.input_dim == d)
            && g_fwd.state_dim == d
            && g_bwd.state_dim == d
            && f_cell.state_dim == 2 * d;
        if !consistent {
            return Err(Error::Decode("matching network LSTM shapes disagree".into()));
        }
        Ok(Self {
            params,
            g_fwd,
            g_bwd,
            f_cell,
            read_steps,
            embedder_path: None,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.g_fwd.hidden
    }

    pub fn read_steps(&self) -> usize {
        self.read_steps
    }

    pub fn embedder_path(&self) -> Option<&Path> {
        self.embedder_path.as_deref()
    }

    pub fn set_embedder_path(&mut self, path: Option<PathBuf>) {
        self.embedder_path = path;
    }

    fn bind(&self, g: &mut Graph) -> Result<Bound> {
        Ok(Bound {
            g_fwd: self.g_fwd.bind(g, &self.params)?,
            g_bwd: self.g_bwd.bind(g, &self.params)?,
            f_cell: self.f_cell.bind(g, &self.params)?,
        })
    }

    fn check_dim(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.feature_dim() {
            return Err(Error::contract(format!(
                "{what} has {} features, model expects {}",
                v.len(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    fn support_nodes(&self, g: &mut Graph, b: &Bound, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let d = self.feature_dim();
        let run = |g: &mut Graph, cell: &LstmNodes, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, NodeId)>> {
            let mut h = g.input(Tensor::zeros(vec![d]))?;
            let mut c = g.input(Tensor::zeros(vec![d]))?;
            let mut out = Vec::with_capacity(xs.len());
            for i in order {
                (h, c) = lstm_step(g, cell, h, c, xs[i])?;
                out.push((i, h));
            }
            Ok(out)
        };
        let fwd = run(g, &b.g_fwd, &mut (0..xs.len()))?;
        let mut bwd = run(g, &b.g_bwd, &mut (0..xs.len()).rev())?;
        bwd.reverse();
        let mut out = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            let both = g.add(fwd[i].1, bwd[i].1)?;
            out.push(g.add(both, xs[i])?);
        }
        Ok(out)
    }

    fn probe_node(&self, g: &mut Graph, b: &Bound, x: NodeId, support: &[NodeId]) -> Result<NodeId> {
        let d = self.feature_dim();
        let mut out = x;
        let mut h = g.input(Tensor::zeros(vec![d]))?;
        let mut r = g.input(Tensor::zeros(vec![d]))?;
        let mut c = g.input(Tensor::zeros(vec![d]))?;
        for _ in 0..self.read_steps {
            let state = g.concat(&[h, r])?;
            let (h_raw, c_next) = lstm_step(g, &b.f_cell, state, c, x)?;
            c = c_next;
            h = g.add(h_raw, x)?;
            let a = attention_node(g, h, support)?;
            let mut read = None;
            for (i, &gi) in support.iter().enumerate() {
                let ai = g.slice(a, i, 1)?;
                let term = g.scale_by(gi, ai)?;
                read = Some(match read {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            r = read.expect("support is nonempty");
            out = h;
        }
        Ok(out)
    }

    /// Predictive distribution node over `n_labels` labels.
    fn predict_node(
        &self,
        g: &mut Graph,
        b: &Bound,
        probe: NodeId,
        support: &[NodeId],
        labels: &[usize],
        n_labels: usize,
    ) -> Result<NodeId> {
        let f = self.probe_node(g, b, probe, support)?;
        let a = attention_node(g, f, support)?;
        let mut onehot = vec![0.0; labels.len() * n_labels];
        for (i, &y) in labels.iter().enumerate() {
            onehot[i * n_labels + y] = 1.0;
        }
        let y = g.input(Tensor::new(vec![labels.len(), n_labels], onehot)?)?;
        g.affine(a, y, None)
    }

    /// Context embeddings `g(x_i, S)` in support order.
    pub fn embed_support(&self, support: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if support.is_empty() {
            return Err(Error::contract("support set must be nonempty"));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g)?;
        let xs = self.inputs(&mut g, support)?;
        let nodes = self.support_nodes(&mut g, &b, &xs)?;
        Ok(nodes.iter().map(|&n| g.value(n).data().to_vec()).collect())
    }

    /// `f(x̂, S)` given the already embedded support.
    pub fn embed_probe(&self, probe: &[f64], embedded_support: &[Vec<f64>]) -> Result<Vec<f64>> {
        if embedded_support.is_empty() {
            return Err(Error::contract("embedded support must be nonempty"));
        }
        self.check_dim(probe, "probe")?;
        let mut g = Graph::new();
        let b = self.bind(&mut g)?;
        let x = g.input(Tensor::vector(probe.to_vec()))?;
        let gs = self.inputs(&mut g, embedded_support)?;
        let f = self.probe_node(&mut g, &b, x, &gs)?;
        Ok(g.value(f).data().to_vec())
    }

    fn inputs(&self, g: &mut Graph, vs: &[Vec<f64>]) -> Result<Vec<NodeId>> {
        vs.iter()
            .map(|v| {
                self.check_dim(v, "support item")?;
                g.input(Tensor::vector(v.clone()))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut store = self.params.clone();
        store.add(READ_STEPS_PARAM, Tensor::scalar(self.read_steps as f64))?;
        Ok(encode_params(&store))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let all = decode_params(bytes)?;
        let k = all.get(all.require(READ_STEPS_PARAM)?).item()?;
        if !(k >= 0.0 && k.fract() == 0.0) {
            return Err(Error::Decode(format!("invalid read step count {k}")));
        }
        let mut params = ParamStore::new();
        for (_, name, t) in all.iter().filter(|(_, n, _)| !n.starts_with("meta.")) {
            params.add(name, t.clone())?;
        }
        Self::from_params(params, k as usize)
    }

    /// Writes the parameters and, when known, the embedder path to a text
    /// sidecar next to them (`<path>.embedder`).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        match &self.embedder_path {
            Some(p) => std::fs::write(&side, format!("{}\n", p.display())).map_err(|e| Error::io(&side, e)),
            None if side.exists() => std::fs::remove_file(&side).map_err(|e| Error::io(&side, e)),
            None => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_bytes(&bytes)?;
        let side = sidecar_path(path);
        if side.exists() {
            let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            let line = text.lines().next().unwrap_or("").trim();
            if !line.is_empty() {
                m.embedder_path = Some(PathBuf::from(line));
            }
        }
        Ok(m)
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".");
    s.push(SIDECAR_EXT);
    PathBuf::from(s)
}

/// Differentiable `softmax_i cos(f, g_i)`.
pub fn attention_node(g: &mut Graph, f: NodeId, support: &[NodeId]) -> Result<NodeId> {
    let sims = support.iter().map(|&gi| g.cosine(f, gi)).collect::<Result<Vec<_>>>()?;
    let s = g.concat(&sims)?;
    g.softmax(s)
}

/// Softmax over cosine similarities between `f` and each `g_i`.
pub fn attention(f: &[f64], support: &[Vec<f64>]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::contract("attention over an empty support set"));
    }
    let sims = support.iter().map(|gi| cosine_similarity(f, gi)).collect::<Result<Vec<_>>>()?;
    Ok(softmax_rows(&sims, sims.len()))
}

/// `P(y | x̂, S)`: attention weights pooled by support label.
pub fn mn_predict(model: &MatchNet, probe: &[f64], support: &SupportSet<Vec<f64>>) -> Result<Vec<f64>> {
    model.check_dim(probe, "probe")?;
    let mut g = Graph::new();
    let b = model.bind(&mut g)?;
    let raw: Vec<Vec<f64>> = support.items().iter().map(|(x, _)| x.clone()).collect();
    let labels: Vec<usize> = support.items().iter().map(|(_, y)| *y).collect();
    let xs = model.inputs(&mut g, &raw)?;
    let gs = model.support_nodes(&mut g, &b, &xs)?;
    let x = g.input(Tensor::vector(probe.to_vec()))?;
    let p = model.predict_node(&mut g, &b, x, &gs, &labels, support.n_labels())?;
    Ok(g.value(p).data().to_vec())
}

impl OneShotClassifier<Vec<f64>> for MatchNet {
    fn classify(&self, support: &SupportSet<Vec<f64>>, probe: &Vec<f64>) -> Result<usize> {
        one_shot_label(&mn_predict(self, probe, support)?)
    }
}

/// Builds `−Σ log P(y | x, S)` over the probe batch on `g`.
pub fn episode_loss(g: &mut Graph, model: &MatchNet, episode: &Episode<Vec<f64>>) -> Result<NodeId> {
    if episode.probes.is_empty() {
        return Err(Error::contract("episode has no probes"));
    }
    let b = model.bind(g)?;
    let items = episode.support.items();
    let raw: Vec<Vec<f64>> = items.iter().map(|(x, _)| x.clone()).collect();
    let labels: Vec<usize> = items.iter().map(|(_, y)| *y).collect();
    let n_labels = episode.support.n_labels();
    let xs = model.inputs(g, &raw)?;
    let gs = model.support_nodes(g, &b, &xs)?;
    let mut total = None;
    for (x, y) in &episode.probes {
        if *y >= n_labels {
            return Err(Error::contract(format!("probe label {y} is not in the support set")));
        }
        model.check_dim(x, "probe")?;
        let xn = g.input(Tensor::vector(x.clone()))?;
        let p = model.predict_node(g, &b, xn, &gs, &labels, n_labels)?;
        let logp = g.log_clamped(p, LOG_FLOOR)?;
        let term = g.slice(logp, *y, 1)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = total.expect("probes are nonempty");
    let loss = g.scale(total, -1.0)?;
    g.sum(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStats {
    pub loss: f64,
    /// Probabilities that hit [`LOG_FLOOR`] in this episode.
    pub clamp_events: usize,
}

/// One SGD step on the network's own parameters.
pub fn train_episode(model: &mut MatchNet, episode: &Episode<Vec<f64>>, optimizer: &mut Optimizer) -> Result<EpisodeStats> {
    let mut g = Graph::new();
    let loss = episode_loss(&mut g, model, episode)?;
    let grads = g.backward(loss)?;
    optimizer.step(&mut model.params, &grads)?;
    Ok(EpisodeStats {
        loss: g.value(loss).item()?,
        clamp_events: g.clamp_events(),
    })
}

/// Samples a `way`-way one-shot episode from `(item, class)` pairs.
///
/// Each chosen class contributes one support item and one distinct probe
/// item. Class `j` of the draw is shown under label `permutation[j]`, and
/// the support set is ordered by label.
pub fn sample_episode<X: Clone, R: Rng>(items: &[(X, usize)], way: usize, rng: &mut R) -> Result<Episode<X>> {
    let n_classes = items.iter().map(|(_, c)| c + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, (_, c)) in items.iter().enumerate() {
        by_class[*c].push(i);
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| !by_class[c].is_empty()).collect();
    if let Some(c) = present.iter().find(|&&c| by_class[c].len() < 2) {
        return Err(Error::contract(format!(
            "class {c} has {} image(s); episodes need at least 2 per class",
            by_class[*c].len()
        )));
    }
    if way < 2 || present.len() < way {
        return Err(Error::contract(format!(
            "{way}-way episodes need at least {way} classes, dataset has {}",
            present.len()
        )));
    }
    let classes: Vec<usize> = present.choose_multiple(rng, way).copied().collect();
    let mut permutation: Vec<usize> = (0..way).collect();
    permutation.shuffle(rng);
    let mut support = Vec::with_capacity(way);
    let mut probes = Vec::with_capacity(way);
    for (j, &c) in classes.iter().enumerate() {
        let picked: Vec<usize> = by_class[c].choose_multiple(rng, 2).copied().collect();
        support.push((items[picked[0]].0.clone(), permutation[j]));
        probes.push((items[picked[1]].0.clone(), permutation[j]));
    }
    support.sort_by_key(|(_, y)| *y);
    Ok(Episode {
        support: SupportSet::new(support)?,
        probes,
        permutation,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchNetCheckpoint {
    pub episode: usize,
    /// Mean episode loss since the previous checkpoint (0 at episode 0).
    pub mean_loss: f64,
    pub model: MatchNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchNetRun {
    pub checkpoints: Vec<MatchNetCheckpoint>,
    pub losses: Vec<f64>,
    pub clamp_events: usize,
}

/// Episodic training from a fresh initialization on `(features, class)`
/// pairs. Checkpoints at episode 0 and every interval.
pub fn train_matchnet(data: &[(Vec<f64>, usize)], config: &MatchNetConfig) -> Result<MatchNetRun> {
    train_matchnet_with_log(data, config, &mut |_, _| {})
}

pub fn train_matchnet_with_log(
    data: &[(Vec<f64>, usize)],
    config: &MatchNetConfig,
    log: &mut dyn FnMut(usize, &EpisodeStats),
) -> Result<MatchNetRun> {
    config.validate()?;
    let dim = data
        .first()
        .map(|(x, _)| x.len())
        .ok_or_else(|| Error::contract("no training features"))?;
    let model = MatchNet::new(dim, config.read_steps, config.seed)?;
    train_from(model, data, config, log)
}

/// Continue training `model` (e.g. a zero-initialized one).
pub fn train_from(
    mut model: MatchNet,
    data: &[(Vec<f64>, usize)],
    config: &MatchNetConfig,
    log: &mut dyn FnMut(usize, &EpisodeStats),
) -> Result<MatchNetRun> {
    config.validate()?;
    let mut rng = SeedKey::new(config.seed).child("episodes").rng();
    let mut opt = Optimizer::sgd(config.learning_rate)?;
    let mut checkpoints = vec![MatchNetCheckpoint {
        episode: 0,
        mean_loss: 0.0,
        model: model.clone(),
    }];
    let mut losses = Vec::with_capacity(config.episodes);
    let mut clamp_events = 0;
    for step in 1..=config.episodes {
        let ep = sample_episode(data, config.way, &mut rng)?;
        let stats = train_episode(&mut model, &ep, &mut opt).map_err(|e| match e {
            Error::Numeric(detail) => Error::Training { step, detail },
            other => other,
        })?;
        clamp_events += stats.clamp_events;
        losses.push(stats.loss);
        log(step, &stats);
        if step % config.checkpoint_interval == 0 {
            let window = &losses[step - config.checkpoint_interval..];
            checkpoints.push(MatchNetCheckpoint {
                episode: step,
                mean_loss: window.iter().sum::<f64>() / window.len() as f64,
                model: model.clone(),
            });
        }
    }
    Ok(MatchNetRun {
        checkpoints,
        losses,
        clamp_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn tiny_episode(dim: usize, seed: u64) -> Episode<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Episode {
            support: SupportSet::new(vec![(random_vec(&mut rng, dim), 0), (random_vec(&mut rng, dim), 1)]).unwrap(),
            probes: vec![(random_vec(&mut rng, dim), 1), (random_vec(&mut rng, dim), 0)],
            permutation: vec![1, 0],
        }
    }

    #[test]
    fn zero_weights_reduce_to_raw_features() {
        let m = MatchNet::zeroed(4, 2).unwrap();
        let s = vec![vec![1.0, 2.0, 0.5, -1.0], vec![0.0, 1.0, 3.0, 2.0]];
        assert_eq!(m.embed_support(&s).unwrap(), s);
        let p = vec![0.3, -0.2, 0.9, 1.0];
        assert_eq!(m.embed_probe(&p, &s).unwrap(), p);
        let k0 = MatchNet { read_steps: 0, ..MatchNet::new(4, 2, 3).unwrap() };
        assert_eq!(k0.embed_probe(&p, &s).unwrap(), p);
        assert!(m.embed_support(&[]).is_err());
        assert!(m.embed_probe(&p, &[]).is_err());
    }

    #[test]
    fn support_order_matters_for_a_random_model() {
        let m = MatchNet::new(3, 2, 5).unwrap();
        let a = vec![0.2, 0.9, -0.4];
        let b = vec![-0.7, 0.1, 0.5];
        let fwd = m.embed_support(&[a.clone(), b.clone()]).unwrap();
        let rev = m.embed_support(&[b, a]).unwrap();
        assert_ne!(fwd[0], rev[1]);
        let single = m.embed_support(&[vec![0.1, 0.2, 0.3]]).unwrap();
        assert!(single[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_examples() {
        let w = attention(&[1.0, 0.0], &[vec![2.0, 0.0], vec![5.0, 0.0]]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = attention(&[1.0, 0.0], &[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert!((w[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((w[1] - 0.11920292202211755).abs() < 1e-12);
        assert!(matches!(attention(&[0.0, 0.0], &[vec![1.0, 0.0]]), Err(Error::Numeric(_))));
    }

    #[test]
    fn attention_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let dim = rng.gen_range(1..8);
            let k = rng.gen_range(1..6);
            let f = random_vec(&mut rng, dim);
            let gs: Vec<_> = (0..k).map(|_| random_vec(&mut rng, dim)).collect();
            let w = attention(&f, &gs).unwrap();
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn predictions_pool_by_label() {
        let m = MatchNet::zeroed(2, 2).unwrap();
        // three support items, two sharing label 0
        let s = SupportSet::new(vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1), (vec![1.0, 0.1], 0)]).unwrap();
        let p = mn_predict(&m, &[1.0, 0.2], &s).unwrap();
        let a = attention(&[1.0, 0.2], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.1]]).unwrap();
        assert!((p[0] - (a[0] + a[2])).abs() < 1e-15);
        assert!((p[1] - a[1]).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let s = SupportSet::new(vec![(vec![1.0, 1.0], 0), (vec![2.0, 2.0], 1)]).unwrap();
        assert_eq!(mn_predict(&m, &[0.3, 0.3], &s).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_two_way_loss_is_two_log_two() {
        let m = MatchNet::zeroed(2, 2).unwrap();
        let ep = Episode {
            support: SupportSet::new(vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)]).unwrap(),
            probes: vec![(vec![1.0, 1.0], 0), (vec![2.0, 2.0], 1)],
            permutation: vec![0, 1],
        };
        let mut g = Graph::new();
        let loss = episode_loss(&mut g, &m, &ep).unwrap();
        assert!((g.value(loss).item().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn episode_loss_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut m = MatchNet::new(3, 2, seed).unwrap();
            let ep = tiny_episode(3, 100 + seed);
            let k = m.read_steps;
            let report = check_params(&mut m.params, 1e-5, |g, store| {
                let view = MatchNet::from_params(store.clone(), k)?;
                episode_loss(g, &view, &ep)
            })
            .unwrap();
            assert!(report.checked > 0);
            assert!(report.max_rel_err <= 1e-4, "{report:?}");
        }
    }

    #[test]
    fn sampled_episodes_follow_the_contract() {
        let items: Vec<(usize, usize)> = (0..40).map(|i| (i, i % 8)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for way in [2, 5] {
            for _ in 0..50 {
                let ep = sample_episode(&items, way, &mut rng).unwrap();
                assert_eq!(ep.support.len(), way);
                assert_eq!(ep.probes.len(), way);
                assert!(ep.support.is_one_shot());
                let mut perm = ep.permutation.clone();
                perm.sort();
                assert_eq!(perm, (0..way).collect::<Vec<_>>());
                let support_ids: Vec<usize> = ep.support.items().iter().map(|(x, _)| *x).collect();
                for (x, y) in &ep.probes {
                    assert!(!support_ids.contains(x));
                    // the probe shares its class with the support item of the same label
                    let s = ep.support.items().iter().find(|(_, l)| l == y).unwrap();
                    assert_eq!(items[s.0].1, items[*x].1);
                }
                let labels: Vec<usize> = ep.support.items().iter().map(|(_, y)| *y).collect();
                assert_eq!(labels, (0..way).collect::<Vec<_>>());
            }
        }
        let a: Vec<_> = (0..5).map(|_| sample_episode(&items, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));

        let lonely = vec![(0, 0), (1, 0), (2, 1)];
        assert!(sample_episode(&lonely, 2, &mut rng).is_err());
        assert!(sample_episode(&items[..16], 9, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MatchNet::new(3, 2, 4).unwrap();
        m.set_embedder_path(Some(PathBuf::from("runs/emb_0.spck")));
        let path = dir.path().join("mn.spck");
        m.save(&path).unwrap();
        assert_eq!(MatchNet::load(&path).unwrap(), m);
        let k0 = MatchNet { read_steps: 0, ..m.clone() };
        assert_eq!(MatchNet::from_bytes(&k0.to_bytes().unwrap()).unwrap().read_steps(), 0);
    }

    #[test]
    fn training_reduces_loss_on_separable_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 4)).collect();
        let data: Vec<(Vec<f64>, usize)> = (0..60)
            .map(|i| {
                let c = i % 6;
                let x = centers[c].iter().map(|v| v + 0.3 * rng.gen_range(-1.0..1.0)).collect();
                (x, c)
            })
            .collect();
        let cfg = MatchNetConfig { episodes: 2000, checkpoint_interval: 200, seed: 1, ..Default::default() };
        let run = train_matchnet(&data, &cfg).unwrap();
        assert_eq!(run.checkpoints.len(), 11);
        let first: f64 = run.losses[..200].iter().sum::<f64>() / 200.0;
        let last: f64 = run.losses[1800..].iter().sum::<f64>() / 200.0;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(train_matchnet(&data, &cfg).unwrap(), run);
    }
}
