use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[world]
size = 16
n_classes = 4
n_per_class = 4
n_test_per_class = 2
mn_train_classes = 2

[probes]
n_triples = 5

[embedder]
feature_dim = 8
channels = [2, 3]
steps = 4
batch_size = 4
checkpoint_interval = 2

[matchnet]
episodes = 4
checkpoint_interval = 2
eval_episodes = 3

[sweep]
n_embedder_seeds = 2
mn_seeds_per_embedder = 2
"#;

fn shapebias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapebias")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_stimuli_default_is_fifty_triples_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = shapebias(&["gen-stimuli", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(!stderr(&o).contains("warning"));
    }
    let manifest = std::fs::read_to_string(a.join("triples/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 51);
    for rel in ["triples/manifest.csv", "triples/triple007_color.ppm", "world/train/labels.csv", "world/test/img00003.ppm"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn gen_stimuli_warns_on_unbalanced_backgrounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[probes]\nn_triples = 7\n[world]\nn_per_class = 2\nn_test_per_class = 2\n").unwrap();
    let o = shapebias(&["gen-stimuli", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("not a multiple of 5"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[embedder]\nstepz = 3\n").unwrap();
    let o = shapebias(&["train-embedder", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let o = shapebias(&["sweep", "--distance", "manhattan"]);
    assert_eq!(o.status.code(), Some(2));
    let o = shapebias(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_mn_without_embedder_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = shapebias(&["train-mn", "--config", s(&cfg), "--embedder", s(&dir.path().join("missing.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not exist"), "{}", stderr(&o));
}

fn table(o: &Output) -> Vec<Vec<String>> {
    stdout(o).lines().map(|l| l.split('\t').map(str::to_string).collect()).collect()
}

#[test]
fn train_probe_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("runs");
    let o = shapebias(&["train-embedder", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = table(&o);
    assert_eq!(rows[0], ["step", "loss", "accuracy", "test_accuracy"]);
    assert_eq!(rows.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "2", "4"]);

    let o2 = shapebias(&["train-embedder", "--config", s(&cfg), "--seed", "11", "--out", s(&out)]);
    assert!(o2.status.success());
    assert_ne!(stdout(&o), stdout(&o2));
    let a = std::fs::read(out.join("embedder_seed3/step_000004.ckpt")).unwrap();
    let b = std::fs::read(out.join("embedder_seed11/step_000004.ckpt")).unwrap();
    assert_ne!(a, b);

    let emb = out.join("embedder_seed3/step_000004.ckpt");
    let o = shapebias(&["train-mn", "--config", s(&cfg), "--embedder", s(&emb), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = table(&o);
    assert_eq!(rows[0], ["episode", "loss", "accuracy"]);
    assert_eq!(rows.len(), 4);
    let mn = out.join("matchnet_seed3/episode_000004.ckpt");
    assert!(shapebias::matchnet::sidecar_path(&mn).is_file());

    for (ck, dist) in [(&emb, "euclidean"), (&emb, "cosine"), (&mn, "euclidean")] {
        let o = shapebias(&["probe", "--config", s(&cfg), "--checkpoint", s(ck), "--distance", dist]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r = &table(&o)[0];
        assert_eq!(r[0], "B_s");
        let b: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&b));
        assert_eq!(r[5], "5");
    }
}

/// Independent recount: nearest neighbor by squared Euclidean distance,
/// ties to the shape match.
fn brute_force_bias(triples: &[[Vec<f64>; 3]]) -> f64 {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let shape = triples.iter().filter(|[p, s, c]| d2(p, s) <= d2(p, c)).count();
    shape as f64 / triples.len() as f64
}

#[test]
fn probe_on_handcrafted_features_matches_recount() {
    use rand::{Rng, SeedableRng};
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for trial in 0..5 {
        let triples: Vec<[Vec<f64>; 3]> = (0..40)
            .map(|_| std::array::from_fn(|_| (0..4).map(|_| rng.gen_range(0..4) as f64).collect()))
            .collect();
        let mut csv = String::from("triple_id,role,x0,x1,x2,x3\n");
        for (i, t) in triples.iter().enumerate() {
            for (role, v) in ["probe", "shape_match", "color_match"].iter().zip(t) {
                let cells: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                csv.push_str(&format!("{i},{role},{}\n", cells.join(",")));
            }
        }
        let path = dir.path().join(format!("f{trial}.csv"));
        std::fs::write(&path, csv).unwrap();
        let o = shapebias(&["probe", "--features", s(&path), "--distance", "euclidean"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let got: f64 = table(&o)[0][1].parse().unwrap();
        assert_eq!(format!("{got:.6}"), format!("{:.6}", brute_force_bias(&triples)));
    }
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "triple_id,role,x0\n0,probe,1\n0,shape_match,2\n").unwrap();
    assert_eq!(shapebias(&["probe", "--features", s(&bad)]).status.code(), Some(2));
}

#[test]
fn sweep_stats_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    for dist in ["cosine", "euclidean"] {
        let out = dir.path().join(dist);
        let o = shapebias(&["sweep", "--config", s(&cfg), "--out", s(&out), "--distance", dist, "--jobs", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let records = shapebias::corpus::records_read(&out.join("records.csv")).unwrap();
        // 2 embedders x 3 checkpoints + 2 x 2 MNs x 3 checkpoints, one dataset
        assert_eq!(records.len(), 2 * 3 + 2 * 2 * 3);
    }
    let records = dir.path().join("cosine/records.csv");
    let o = shapebias(&["stats", "--records", s(&records)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["dataset\tsynthetic", "ib_final_bias\tn=2", "mn_final_bias\tn=4", "bias_accuracy_corr\t", "mn_vs_ib_paired_t\t"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
    let rep = dir.path().join("report");
    let o = shapebias(&["report", "--records", s(&records), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(&rep).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        [
            "accuracy_vs_step.csv",
            "accuracy_vs_step.svg",
            "bias_kde.csv",
            "bias_kde.svg",
            "bias_vs_step.csv",
            "bias_vs_step.svg",
            "mn_vs_ib.csv",
            "mn_vs_ib.svg"
        ]
    );
    let garbage = dir.path().join("garbage.csv");
    std::fs::write(&garbage, "not,a,records,file\n").unwrap();
    assert_eq!(shapebias(&["stats", "--records", s(&garbage)]).status.code(), Some(2));
}
