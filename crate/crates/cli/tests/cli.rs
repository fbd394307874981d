use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use psagan_cli::{Manifest, RunConfig, SampleFile};

const SMOKE: &[&str] = &[
    "target_length=16",
    "epochs=2",
    "stage_epochs=1",
    "fade_epochs=1",
    "batches_per_epoch=2",
    "batch_size=8",
    "nf=4",
    "synthetic_series=4",
    "synthetic_length=400",
    "score_windows=64",
    "score_draws=2",
    "encoder_steps=30",
    "encoder_channels=8",
    "encoder_dim=8",
    "n_samples=3",
    "n_windows=2",
];

fn psagan(dir: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_psagan"));
    cmd.current_dir(dir).args(args);
    for s in SMOKE.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn smoke_train_writes_checkpoint_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = psagan(dir.path(), &["train"], &["out=a"]);
    ok(&a);
    assert!(dir.path().join("a/model.ckpt").is_file());
    assert!(dir.path().join("a/train.manifest.json").is_file());
    ok(&psagan(dir.path(), &["train"], &["out=b"]));
    let ma = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let mb = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(ma.iter().filter(|&&c| c == b'\n').count(), 2);
    assert_eq!(ma, mb);
    assert_eq!(
        std::fs::read(dir.path().join("a/model.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b/model.ckpt")).unwrap()
    );
}

#[test]
fn context_length_selects_the_conditioned_model() {
    let dir = tempfile::tempdir().unwrap();
    ok(&psagan(dir.path(), &["train"], &["context_length=64"]));
    let (pair, ck) = psagan::model::load_checkpoint(&dir.path().join("run/model.ckpt")).unwrap();
    assert_eq!(pair.config().context_length, 64);
    assert_eq!(ck.get("run_context_length"), Some("64"));
    let m = json(dir.path().join("run/train.manifest.json"));
    assert_eq!(m["tags"]["context_length"], "64");
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = psagan(dir.path(), &["train"], &["target_length=48"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("target_length"), "{}", stderr(&o));
    let o = psagan(dir.path(), &["train"], &["target_length=512"]);
    assert_eq!(o.status.code(), Some(2));
    let o = psagan(dir.path(), &["train"], &["no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));
    let o = psagan(dir.path(), &["train"], &["epochs=lots"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochs"));
    let o = psagan(dir.path(), &["train"], &["fade_epochs=5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# smoke\ntarget_length = 32\nepochs = 7 # comment\n").unwrap();
    let mut cfg = RunConfig::load(&path).unwrap();
    assert_eq!((cfg.target_length, cfg.epochs), (32, 7));
    cfg.apply(&["epochs=9".into()]).unwrap();
    assert_eq!(cfg.epochs, 9);
    let pairs: std::collections::BTreeMap<String, String> = cfg.to_pairs().into_iter().collect();
    assert_eq!(RunConfig::from_pairs(&pairs).unwrap(), cfg);
    assert_eq!(pairs.len(), RunConfig::KEYS.len());
    std::fs::write(&path, "target_length 32\n").unwrap();
    assert!(RunConfig::load(&path).is_err());
    let o = Command::new(env!("CARGO_BIN_EXE_psagan"))
        .current_dir(dir.path())
        .args(["train", "--config", "missing.cfg"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn scoring_needs_an_encoder_and_orders_sources() {
    let dir = tempfile::tempdir().unwrap();
    let o = psagan(dir.path(), &["score", "--baseline", "real"], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--train-encoder"));
    ok(&psagan(
        dir.path(),
        &["score", "--baseline", "real", "--train-encoder"],
        &["out=real"],
    ));
    let real = json(dir.path().join("real/score.json"));
    let encoder = dir.path().join("real/encoder.ckpt").display().to_string();
    let enc = format!("encoder={encoder}");
    ok(&psagan(
        dir.path(),
        &["score", "--baseline", "noise"],
        &["out=noise", &enc],
    ));
    let noise = json(dir.path().join("noise/score.json"));
    let (r, n) = (
        real["mean"].as_f64().unwrap(),
        noise["mean"].as_f64().unwrap(),
    );
    assert!(r < 0.1, "real-vs-real {r}");
    assert!(n > r, "noise {n} vs real {r}");
    assert_eq!(real["n_windows"], 64);
    assert_eq!(real["seed"], 0);
    assert_eq!(noise["source"], "noise");
}

#[test]
fn sample_file_scores_like_the_checkpoint_family() {
    let dir = tempfile::tempdir().unwrap();
    ok(&psagan(dir.path(), &["train"], &[]));
    ok(&psagan(dir.path(), &["sample"], &["sample_count=40"]));
    let f = SampleFile::load(&dir.path().join("run/samples.bin")).unwrap();
    assert_eq!((f.count(), f.tau, f.values.len()), (40, 16, 640));
    ok(&psagan(
        dir.path(),
        &["score", "--train-encoder", "--samples", "run/samples.bin"],
        &["out=s"],
    ));
    let s = json(dir.path().join("s/score.json"));
    assert_eq!(s["n_windows"], 20);
    assert!(s["mean"].as_f64().unwrap().is_finite());
}

#[test]
fn sample_file_round_trip_and_corruption() {
    let f = SampleFile {
        tau: 3,
        pairs: vec![(0, 5), (2, 1)],
        values: vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.0],
    };
    let mut bytes = Vec::new();
    f.write(&mut bytes).unwrap();
    assert_eq!(bytes.len(), 16 + 2 * (16 + 12));
    assert_eq!(&bytes[..8], &2u64.to_le_bytes());
    assert_eq!(SampleFile::read(&mut bytes.as_slice()).unwrap(), f);
    assert!(SampleFile::read(&mut &bytes[..bytes.len() - 1]).is_err());
    assert!(SampleFile::read(&mut &bytes[..4]).is_err());
}

#[test]
fn scenario_cold_start_lists_two_of_ten() {
    let dir = tempfile::tempdir().unwrap();
    ok(&psagan(
        dir.path(),
        &["scenario"],
        &[
            "scenario=cold_start",
            "cold_start_fraction=0.2",
            "synthetic_series=10",
        ],
    ));
    let m = json(dir.path().join("run/scenario.json"));
    assert_eq!(m["cold_start_ids"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_over_two_seeds_and_two_models() {
    let dir = tempfile::tempdir().unwrap();
    ok(&psagan(dir.path(), &["train"], &["out=model"]));
    let models = "models=moving_average,gan=model/model.ckpt";
    let o = psagan(
        dir.path(),
        &["eval"],
        &["models=moving_average,a=gone.ckpt,b=also_gone.ckpt"],
    );
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("gone.ckpt") && stderr(&o).contains("also_gone.ckpt"));
    ok(&psagan(
        dir.path(),
        &["eval"],
        &[models, "eval_seeds=3,4", "out=e1"],
    ));
    ok(&psagan(
        dir.path(),
        &["eval"],
        &[models, "eval_seeds=3,4", "out=e2"],
    ));
    let a = std::fs::read(dir.path().join("e1/eval.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("e2/eval.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 4);
    assert_eq!(v["models"].as_array().unwrap().len(), 2);
    let o = psagan(
        dir.path(),
        &["eval"],
        &[models, "eval_method=forecast", "out=e3"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizon"));
}

#[test]
fn impute_fills_only_hidden_values() {
    let dir = tempfile::tempdir().unwrap();
    ok(&psagan(dir.path(), &["train"], &[]));
    ok(&psagan(
        dir.path(),
        &["impute"],
        &[
            "scenario=stretch",
            "stretch_len=20",
            "stretch_fraction=0.05",
        ],
    ));
    let r = json(dir.path().join("run/impute.json"));
    assert!(r["hidden"].as_u64().unwrap() > 0);
    let imputed =
        psagan::data::load_csv(std::fs::File::open(dir.path().join("run/imputed.csv")).unwrap())
            .unwrap();
    assert_eq!(imputed.n_series(), 4);
    assert_eq!(imputed.len(), 400);
}

#[test]
fn replay_reproduces_every_command() {
    let dir = tempfile::tempdir().unwrap();
    ok(&psagan(dir.path(), &["train"], &[]));
    ok(&psagan(dir.path(), &["sample"], &["sample_count=20"]));
    ok(&psagan(
        dir.path(),
        &["score", "--train-encoder", "--baseline", "untrained"],
        &[],
    ));
    ok(&psagan(
        dir.path(),
        &["scenario"],
        &[
            "scenario=stretch",
            "stretch_len=20",
            "stretch_fraction=0.05",
        ],
    ));
    for name in ["train", "sample", "score", "scenario"] {
        let manifest = format!("run/{name}.manifest.json");
        let out = format!("replay_{name}");
        let o = Command::new(env!("CARGO_BIN_EXE_psagan"))
            .current_dir(dir.path())
            .args(["replay", &manifest, "--out", &out])
            .output()
            .unwrap();
        ok(&o);
        let original = Manifest::load(&dir.path().join(&manifest)).unwrap();
        assert!(!original.outputs.is_empty());
        for file in original.outputs.keys() {
            assert_eq!(
                std::fs::read(dir.path().join("run").join(file)).unwrap(),
                std::fs::read(dir.path().join(&out).join(file)).unwrap(),
                "{name}: {file}"
            );
        }
    }
    std::fs::write(dir.path().join("run/model.ckpt"), b"tampered").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_psagan"))
        .current_dir(dir.path())
        .args(["replay", "run/sample.manifest.json", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("changed"));
}
