use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vegcast_core::backbones::EncoderDecoderConfig;
use vegcast_core::cli::RunConfig;
use vegcast_core::evaluation::ScoreTable;
use vegcast_core::minicube::{SplitSpec, SyntheticWorldParams};
use vegcast_core::models::{Family, ModelConfig};
use vegcast_core::training::{TrainConfig, TrainLog};

fn vegcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vegcast")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small world and model so a full generate → train → evaluate cycle takes seconds.
fn small_config(dir: &Path) -> PathBuf {
    let mut world = SyntheticWorldParams::desk(7);
    world.height = 8;
    world.width = 8;
    let mut model = ModelConfig::desk(Family::ConvlstmMeteo);
    model.encdec = EncoderDecoderConfig { hidden: 4, kernel: 3, downsample: 2, norm_groups: 2, skips: true };
    model.conditioning.hidden = 4;
    model.layers = 1;
    let mut train = TrainConfig::desk(Family::ConvlstmMeteo);
    train.epochs = 2;
    train.batch_size = 4;
    train.crop = None;
    let cfg = RunConfig {
        world: Some(world),
        model: Some(model),
        train: Some(train),
        cubes: Some(15),
        ..Default::default()
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_writes_the_requested_cubes_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = vegcast(&["generate", "--config", p(&cfg), "--cubes", "10", "--seed", "7", "--out", p(dir)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read_dir(a.join("cubes")).unwrap().count(), 10);
    assert!(a.join("splits.json").exists());
    assert_eq!(files(&a), files(&b));

    let o = vegcast(&["generate", "--config", p(&cfg), "--out", p(&a)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
    let o = vegcast(&["generate", "--config", p(&cfg), "--cubes", "5", "--out", p(&a), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(a.join("cubes")).unwrap().count(), 5);
}

#[test]
fn overlapping_splits_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut splits = SplitSpec::desk();
    splits.subsets[1].years = vec![2, 3];
    let cfg = RunConfig { splits: Some(splits), ..Default::default() };
    let path = tmp.path().join("c.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = vegcast(&["generate", "--config", p(&path), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not disjoint"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&vegcast(&["frobnicate"])), 1);
    assert_eq!(code(&vegcast(&["train", "--meteo", "maybe"])), 1);
    assert_eq!(code(&vegcast(&["evaluate", "--baseline", "oracle"])), 1);
    assert_eq!(code(&vegcast(&["--help"])), 0);
}

#[test]
fn train_evaluate_report_cycle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_eq!(code(&vegcast(&["generate", "--config", p(&cfg), "--out", p(&data)])), 0);

    let o = vegcast(&["train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["run.json", "train_log.jsonl", "checkpoint/manifest.json", "last/manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(TrainLog::read_jsonl(&run.join("train_log.jsonl")).unwrap().epochs.len(), 2);

    // Resuming with a larger budget continues the epoch counter.
    let o = vegcast(&["train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(&run), "--resume", "--epochs", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = TrainLog::read_jsonl(&run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);

    let ck = run.join("checkpoint");
    let plain = tmp.path().join("eval");
    let o = vegcast(&["evaluate", "--dataset", p(&data), "--checkpoint", p(&ck), "--out", p(&plain), "--split", "ood-t"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let shuffled = tmp.path().join("eval-shuffled");
    let o = vegcast(&["evaluate", "--dataset", p(&data), "--checkpoint", p(&ck), "--out", p(&shuffled), "--shuffle"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(ScoreTable::load(&shuffled).unwrap().shuffled);
    for f in ["scores.csv", "summary.json", "reasons.json", "comparison.json"] {
        assert!(plain.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(plain.join("scores.csv")).unwrap();
    assert!(csv.starts_with("cube_id,landcover,n_pixels,r2,rmse,nse,abs_bias,model_id,config_hash"));

    let missing = vegcast(&["evaluate", "--dataset", p(&data), "--checkpoint", p(&tmp.path().join("nope")), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("no checkpoint"));

    let val = tmp.path().join("eval-val");
    assert_eq!(code(&vegcast(&["evaluate", "--dataset", p(&data), "--baseline", "persistence", "--out", p(&val), "--split", "val"])), 0);

    let rep = tmp.path().join("report");
    let o = vegcast(&["report", p(&plain), p(&shuffled), "--out", p(&rep)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(rep.join("horizon_rmse.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    let again = tmp.path().join("report2");
    assert_eq!(code(&vegcast(&["report", p(&plain), p(&shuffled), "--out", p(&again)])), 0);
    assert_eq!(files(&rep), files(&again));

    let mixed = tmp.path().join("report-mixed");
    let o = vegcast(&["report", p(&plain), p(&val), "--out", p(&mixed)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--allow-mixed"));
    assert_eq!(code(&vegcast(&["report", p(&plain), p(&val), "--out", p(&mixed), "--allow-mixed"])), 0);
}

#[test]
fn climatology_never_outperforms_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&vegcast(&["generate", "--config", p(&cfg), "--cubes", "40", "--out", p(&data)])), 0);
    let out = tmp.path().join("clim");
    let o = vegcast(&["evaluate", "--dataset", p(&data), "--baseline", "climatology", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = ScoreTable::load(&out).unwrap();
    assert_eq!(table.outperformance, Some(0.0));
}

#[test]
fn divergence_exits_with_three_and_keeps_the_last_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_eq!(code(&vegcast(&["generate", "--config", p(&cfg), "--out", p(&data)])), 0);
    assert_eq!(code(&vegcast(&["train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(&run), "--epochs", "1"])), 0);

    // Poison one parameter of the resumable checkpoint.
    let params = run.join("last").join("params");
    let blob = fs::read_dir(&params).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let mut bytes = fs::read(&blob).unwrap();
    bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&blob, &bytes).unwrap();

    let o = vegcast(&["train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(&run), "--resume", "--epochs", "3"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(run.join("last").join("manifest.json").exists());
    assert!(run.join("checkpoint").join("manifest.json").exists());
}
