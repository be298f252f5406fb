//! Subcommand implementations. Results go to stdout, progress to stderr.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use shapebias::bias::{
    embed_triples, measure_bias, feature_items, one_shot_accuracy, probe_all, records_path,
    run_sweep, seen_class_subset, tie_count, IbScorer, MnScorer, ProbeScorer, TripleFeatures,
};
use shapebias::corpus::{load_manifest, records_read, write_manifest, write_ppm_file};
use shapebias::diffcore::decode_params;
use shapebias::embedder::{classify_accuracy, train_embedder_with_log, EmbedderCheckpoint};
use shapebias::matchnet::{train_matchnet_with_log, MatchNet, READ_STEPS_PARAM};
use shapebias::oneshot::DistanceKind;
use shapebias::stimgen::LabeledDataset;
use shapebias::{Error, Result};

use crate::config::RunConfig;
use crate::report::{pick_dataset, stats_lines, write_report, ReportOptions};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn println_flush(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn write_world(dir: &Path, data: &LabeledDataset) -> Result<()> {
    create_dir(dir)?;
    let mut labels = String::from("file,label\n");
    for (i, item) in data.items.iter().enumerate() {
        let name = format!("img{i:05}.ppm");
        write_ppm_file(&dir.join(&name), &item.stimulus.image)?;
        labels.push_str(&format!("{name},{}\n", item.label));
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, labels).map_err(io_err(&path))
}

/// Triples under `out/triples`, the labeled worlds under `out/world`.
pub fn gen_stimuli(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.probes.n_triples % 5 != 0 {
        eprintln!(
            "warning: {} triples is not a multiple of 5; backgrounds will not be balanced",
            cfg.probes.n_triples
        );
    }
    let datasets = cfg.probe_datasets()?;
    let synthetic = datasets
        .iter()
        .find(|d| d.name == crate::config::SYNTHETIC)
        .ok_or_else(|| Error::Contract("probes.synthetic is disabled; nothing to generate".into()))?;
    let manifest = write_manifest(&out.join("triples"), &synthetic.triples)?;
    let world = cfg.world_config();
    write_world(&out.join("world").join("train"), &world.training_set()?)?;
    write_world(&out.join("world").join("test"), &world.test_set()?)?;
    println_flush(&format!("triples\t{}\t{}", synthetic.triples.len(), manifest.display()));
    Ok(())
}

pub fn checkpoint_name(prefix: &str, step: usize) -> String {
    format!("{prefix}_{step:06}.ckpt")
}

pub fn train_embedder(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<PathBuf> {
    let seed = seed.unwrap_or(cfg.seed);
    let world = cfg.world_config();
    let train = world.training_set()?;
    let test_seen = seen_class_subset(&world.test_set()?, world.n_classes);
    let ecfg = cfg.embedder_config(seed);
    let dir = out.join(format!("embedder_seed{seed}"));
    create_dir(&dir)?;
    let checkpoints = train_embedder_with_log(&train, &ecfg, &mut |_, _| {})?;
    println_flush("step\tloss\taccuracy\ttest_accuracy");
    let mut last = dir.clone();
    for ck in &checkpoints {
        let test_acc = classify_accuracy(ck, &test_seen)?;
        let path = dir.join(checkpoint_name("step", ck.step));
        ck.save(&path)?;
        println_flush(&format!("{}\t{:.6}\t{:.6}\t{:.6}", ck.step, ck.train_loss, ck.train_accuracy, test_acc));
        last = path;
    }
    eprintln!("final checkpoint: {}", last.display());
    Ok(last)
}

pub fn train_mn(cfg: &RunConfig, embedder: &Path, seed: Option<u64>, out: &Path) -> Result<PathBuf> {
    if !embedder.is_file() {
        return Err(Error::Contract(format!("embedder checkpoint {} does not exist", embedder.display())));
    }
    let ck = EmbedderCheckpoint::load(embedder)?;
    let world = cfg.world_config();
    if ck.image_size() != world.stim.size {
        return Err(Error::Contract(format!(
            "embedder expects {0}x{0} images but the world renders {1}x{1}",
            ck.image_size(),
            world.stim.size
        )));
    }
    let seed = seed.unwrap_or(cfg.seed);
    let train = seen_class_subset(&world.training_set()?, world.mn_train_classes);
    let (_, heldout) = world.test_set()?.split_classes(world.mn_train_classes)?;
    let train = feature_items(&ck, &train)?;
    let heldout = feature_items(&ck, &heldout)?;
    let mcfg = cfg.matchnet_config(seed);
    let run = train_matchnet_with_log(&train, &mcfg, &mut |_, _| {})?;
    if run.clamp_events > 0 {
        eprintln!("warning: log-probability clamped {} times", run.clamp_events);
    }
    let dir = out.join(format!("matchnet_seed{seed}"));
    create_dir(&dir)?;
    let embedder_abs = std::fs::canonicalize(embedder).map_err(io_err(embedder))?;
    println_flush("episode\tloss\taccuracy");
    let mut last = dir.clone();
    for c in &run.checkpoints {
        let acc = one_shot_accuracy(&c.model, &heldout, mcfg.way, cfg.matchnet.eval_episodes, seed)?;
        let mut model = c.model.clone();
        model.set_embedder_path(Some(embedder_abs.clone()));
        let path = dir.join(checkpoint_name("episode", c.episode));
        model.save(&path)?;
        println_flush(&format!("{}\t{:.6}\t{:.6}", c.episode, c.mean_loss, acc));
        last = path;
    }
    eprintln!("final checkpoint: {}", last.display());
    Ok(last)
}

/// Probe features from a CSV with columns `triple_id,role,x0,x1,...`, one row
/// per role (`probe`, `shape_match`, `color_match`) per triple.
pub fn read_feature_triples(path: &Path) -> Result<Vec<TripleFeatures>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    let mut parts: BTreeMap<usize, [Option<Vec<f64>>; 3]> = BTreeMap::new();
    let mut dim = None;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
        let bad = |msg: String| Error::Decode(format!("{} row {}: {msg}", path.display(), row + 1));
        if rec.len() < 3 {
            return Err(bad("need triple_id, role and at least one feature".into()));
        }
        let id: usize = rec[0].trim().parse().map_err(|_| bad(format!("bad triple_id {:?}", &rec[0])))?;
        let slot = match rec[1].trim() {
            "probe" => 0,
            "shape_match" => 1,
            "color_match" => 2,
            other => return Err(bad(format!("unknown role {other:?}"))),
        };
        let v = rec
            .iter()
            .skip(2)
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad(format!("bad feature {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if *dim.get_or_insert(v.len()) != v.len() {
            return Err(bad("feature rows differ in length".into()));
        }
        let entry = parts.entry(id).or_default();
        if entry[slot].replace(v).is_some() {
            return Err(bad(format!("triple {id} repeats role {}", &rec[1])));
        }
    }
    if parts.is_empty() {
        return Err(Error::Decode(format!("{}: no feature rows", path.display())));
    }
    parts
        .into_iter()
        .map(|(id, [p, s, c])| match (p, s, c) {
            (Some(probe), Some(shape_match), Some(color_match)) => Ok(TripleFeatures {
                triple_id: id,
                probe,
                shape_match,
                color_match,
            }),
            _ => Err(Error::Decode(format!("{}: triple {id} lacks a role", path.display()))),
        })
        .collect()
}

pub enum ProbeSource<'a> {
    Checkpoint {
        path: &'a Path,
        embedder: Option<&'a Path>,
        manifest: Option<&'a Path>,
    },
    Features(&'a Path),
}

/// Bias, ties and probe count for one model on one set of triples.
pub fn probe(cfg: &RunConfig, source: ProbeSource<'_>, distance: Option<DistanceKind>) -> Result<(f64, usize, usize)> {
    let distance = distance.unwrap_or(cfg.sweep.distance.into());
    let (scorer, features): (Box<dyn ProbeScorer + '_>, Vec<TripleFeatures>) = match source {
        ProbeSource::Features(path) => (Box::new(IbScorer(distance)), read_feature_triples(path)?),
        ProbeSource::Checkpoint { path, embedder, manifest } => {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            let is_mn = decode_params(&bytes)?.find(READ_STEPS_PARAM).is_some();
            let (scorer, embedder_ck): (Box<dyn ProbeScorer>, EmbedderCheckpoint) = if is_mn {
                let mn = MatchNet::load(path)?;
                let ep = embedder
                    .map(Path::to_path_buf)
                    .or_else(|| mn.embedder_path().map(Path::to_path_buf))
                    .ok_or_else(|| Error::Contract("MN checkpoint has no embedder sidecar; pass --embedder".into()))?;
                let ck = EmbedderCheckpoint::load(&ep)?;
                (Box::new(OwnedMn(mn)), ck)
            } else {
                (Box::new(IbScorer(distance)), EmbedderCheckpoint::load(path)?)
            };
            let triples = match manifest {
                Some(m) => load_manifest(m)?,
                None => cfg.probe_datasets()?.swap_remove(0).triples,
            };
            (scorer, embed_triples(&embedder_ck, &triples)?)
        }
    };
    let outcomes = probe_all(scorer.as_ref(), &features)?;
    let bias = measure_bias(&outcomes)?;
    Ok((bias, tie_count(&outcomes), outcomes.len()))
}

struct OwnedMn(MatchNet);

impl ProbeScorer for OwnedMn {
    fn scores(&self, probe: &[f64], support: &shapebias::oneshot::SupportSet<Vec<f64>>) -> Result<Vec<f64>> {
        MnScorer(&self.0).scores(probe, support)
    }
}

pub fn sweep(cfg: &RunConfig, out: &Path, jobs: Option<usize>, distance: Option<DistanceKind>) -> Result<PathBuf> {
    let sc = cfg.sweep_config(distance, jobs)?;
    create_dir(out)?;
    let path = records_path(out);
    let records = run_sweep(&sc, Some(&path), &|line| eprintln!("{line}"))?;
    shapebias::corpus::records_write(&path, &records)?;
    println_flush(&format!("records\t{}\t{}", records.len(), path.display()));
    Ok(path)
}

pub fn stats(records: &Path, dataset: Option<&str>) -> Result<Vec<String>> {
    let records = records_read(records)?;
    let dataset = pick_dataset(&records, dataset)?;
    Ok(stats_lines(&records, &dataset))
}

pub fn report(records: &Path, out: &Path, opts: &ReportOptions) -> Result<Vec<PathBuf>> {
    let records = records_read(records)?;
    write_report(&records, out, opts)
}
