use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;
use volformer::metrics::{psnr, Psnr};
use volformer::volume::{load_volume, save_volume};
use volformer::{ModelConfig, TrainConfig, Volume};

fn volformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volformer"))
        .args(args)
        .env("VOLFORMER_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn toy_configs(dir: &Path, iterations: u64) -> (String, String) {
    let model = dir.join("model.toml");
    let train = dir.join("train.toml");
    fs::write(&model, ModelConfig::toy().to_toml()).unwrap();
    let tc = TrainConfig {
        batch: 1,
        crop: 16,
        iterations,
        checkpoint_interval: 5,
        eval_interval: 5,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    fs::write(&train, tc.to_toml()).unwrap();
    (p(&model).to_string(), p(&train).to_string())
}

#[test]
fn synth_writes_pairs_deterministically() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = volformer(&["synth", "--seed", "3", "--size", "16", "--count", "2", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("# resolved synth"));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
    }
    let o = volformer(&["synth", "--size", "8", "--out", p(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn degrade_cases() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&volformer(&["synth", "--seed", "1", "--size", "32", "--out", p(&data)])), 0);
    let hr_path = data.join("phantom-000.vol");
    let hr = load_volume(&hr_path).unwrap();

    let same = dir.path().join("same.vol");
    let o = volformer(&["degrade", "--in", p(&hr_path), "--out", p(&same), "--factors", "1,1,1"]);
    assert_eq!(code(&o), 0);
    let v = load_volume(&same).unwrap();
    assert!(v.data.max_abs_diff(&hr.data) < 1e-5);

    let lr = dir.path().join("lr.vol");
    assert_eq!(code(&volformer(&["degrade", "--in", p(&hr_path), "--out", p(&lr), "--factors", "2,2,1"])), 0);
    let v = load_volume(&lr).unwrap();
    assert_eq!(v.dims(), [32, 32, 32]);
    match psnr(&v.data, &hr.data, 1.0).unwrap() {
        Psnr::Finite(db) => assert!(db < 60.0, "{db}"),
        Psnr::Identical => panic!("degradation was lossless"),
    }

    let c = dir.path().join("const.vol");
    save_volume(&Volume::from_raw([16, 16, 16], vec![0.25; 4096], "c").unwrap(), &c).unwrap();
    let out = dir.path().join("const-lr.vol");
    assert_eq!(code(&volformer(&["degrade", "--in", p(&c), "--out", p(&out)])), 0);
    assert!(load_volume(&out).unwrap().voxels().iter().all(|&x| (x - 0.25).abs() < 1e-6));

    let bad = dir.path().join("bad.vol");
    fs::write(&bad, [0u8; 10]).unwrap();
    fs::write(dir.path().join("bad.vol.hdr"), "garbage").unwrap();
    assert_eq!(code(&volformer(&["degrade", "--in", p(&bad), "--out", p(&out)])), 3);
    assert_eq!(code(&volformer(&["degrade", "--in", p(&bad), "--bogus"])), 2);
}

#[test]
fn train_infer_eval_pipeline() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&volformer(&["synth", "--seed", "2", "--size", "16", "--count", "2", "--out", p(&data)])), 0);
    let (model, train) = toy_configs(dir.path(), 10);

    let o = volformer(&["train", "--data", p(&dir.path().join("missing")), "--model-config", &model, "--train-config", &train, "--out", p(&run)]);
    assert_eq!(code(&o), 3);

    let o = volformer(&["train", "--data", p(&data), "--model-config", &model, "--train-config", &train, "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("# resolved train config"));
    let log = fs::read_to_string(run.join("metrics.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("loss=")).count(), 10);
    assert!(log.lines().nth(4).unwrap().contains("psnr="));

    // resume from the step-5 checkpoint continues numbering and reproduces the log
    let resumed = dir.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    let first_half: String = log.lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(resumed.join("metrics.log"), first_half).unwrap();
    let o = volformer(&[
        "train", "--data", p(&data), "--model-config", &model, "--train-config", &train, "--out", p(&resumed),
        "--resume", p(&run.join("step-000005.ckpt")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l.starts_with("step=6 ")));
    assert_eq!(fs::read_to_string(resumed.join("metrics.log")).unwrap(), log);
    assert_eq!(fs::read(resumed.join("final.ckpt")).unwrap(), fs::read(run.join("final.ckpt")).unwrap());

    let ckpt = run.join("final.ckpt");
    let sr = dir.path().join("sr.vol");
    let o = volformer(&["infer", "--checkpoint", p(&ckpt), "--in", p(&data.join("phantom-000.vol")), "--out", p(&sr)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_volume(&sr).unwrap().dims(), [16, 16, 16]);

    let mut other = ModelConfig::toy();
    other.c_emb = 8;
    let other_path = dir.path().join("other.toml");
    fs::write(&other_path, other.to_toml()).unwrap();
    let o = volformer(&["infer", "--checkpoint", p(&ckpt), "--in", p(&sr), "--out", p(&sr), "--model-config", p(&other_path)]);
    assert_eq!(code(&o), 2);

    let report = dir.path().join("report.txt");
    let o = volformer(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("method=model subject=ALL"));
    assert!(text.contains("method=trilinear subject=ALL"));

    let o = volformer(&["eval", "--sr", p(&data), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let agg = text.lines().find(|l| l.starts_with("method=model subject=ALL")).unwrap();
    assert!(agg.contains("psnr=identical") && agg.contains("nrmse=0.0000±0.0000"), "{agg}");
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempdir().unwrap();
    let model = dir.path().join("model.toml");
    fs::write(&model, "c_emb = 12\nunknown = 1\n").unwrap();
    let o = volformer(&["train", "--data", p(dir.path()), "--model-config", p(&model), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selftest_passes_and_detects_corruption() {
    let o = volformer(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS swmsa_oracle"));
    let o = volformer(&["selftest", "--corrupt-bias-index"]);
    assert_eq!(code(&o), 5);
    assert!(stdout(&o).contains("FAIL swmsa_oracle"));
}
