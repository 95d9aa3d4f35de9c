use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fiqnn::data::{dataset_to_idx, Dataset, Split};
use fiqnn::runtime::{parse_trace, IntegerModel};
use fiqnn::{CodeKind, IntTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fiqnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fiqnn")).current_dir(dir).args(args).output().expect("spawn fiqnn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn bars(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pix = Vec::with_capacity(n * 64);
    for i in 0..n {
        let row = if i % 2 == 0 { rng.gen_range(0..3) } else { rng.gen_range(5..8) };
        for r in 0..8 {
            for _ in 0..8 {
                pix.push(if r == row { rng.gen_range(170..=255) } else { rng.gen_range(0..60) });
            }
        }
    }
    let images = IntTensor::new(vec![n, 1, 8, 8], pix, 8, CodeKind::Unsigned).unwrap();
    Dataset::new(images, (0..n).map(|i| i % 2).collect(), 2, Split::Train).unwrap()
}

const CONFIG: &str = "\
# tiny two-class problem
seed = 3
network.layers = conv:4:3:1:1 bn clip pool:2 flatten dense:8 bn clip dense:2 bn
network.input_shape = 1x8x8
network.classes = 2
train.epochs = 2
train.batch_size = 16
train.lr_decay_epochs =
distill.batch_size = 16
distill.calibration_batches = 4
distill.stage1_weight_steps = 10
data.train = train-images,train-labels
data.test = test-images,test-labels
";

/// A directory holding synthetic IDX files and `tiny.cfg`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, data) in [("train", bars(192, 1)), ("test", bars(64, 2))] {
        let (images, labels) = dataset_to_idx(&data).unwrap();
        fs::write(dir.path().join(format!("{name}-images")), images).unwrap();
        fs::write(dir.path().join(format!("{name}-labels")), labels).unwrap();
    }
    fs::write(dir.path().join("tiny.cfg"), CONFIG).unwrap();
    dir
}

#[test]
fn full_run_exits_zero_and_writes_every_artifact() {
    let ws = workspace();
    let dir = ws.path();
    let o = fiqnn(dir, &["--config", "tiny.cfg", "--out", "out", "run"]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for name in ["round-trip", "reference-f64", "reference-exact", "multiply-shift", "float-trap"] {
        assert!(text.contains(&format!("verify check={name} outcome=")), "{name} missing:\n{text}");
    }
    assert!(!text.contains("outcome=Fail"), "{text}");
    let out = dir.join("out");
    for f in ["teacher.ckpt", "student.ckpt", "model.fiqn", "run.cfg", "stages.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let stages = fs::read_to_string(out.join("stages.txt")).unwrap();
    let records: Vec<&str> = stages.lines().collect();
    assert_eq!(records.len(), 6);
    for (i, r) in records.iter().enumerate() {
        assert!(r.starts_with(&format!("stage={} layer={} ", 1 + i / 3, i % 3)), "{r}");
    }

    let o = fiqnn(dir, &["--config", "tiny.cfg", "--out", "out", "evaluate"]);
    assert!(o.status.success());
    let record = stdout(&o).lines().find(|l| l.starts_with("metrics model=integer")).map(str::to_owned).unwrap();
    let in_run = text.lines().any(|l| l == record);
    assert!(in_run, "evaluate printed {record:?}, not found in the run output");

    let o = fiqnn(dir, &["--config", "tiny.cfg", "--out", "out", "infer", "--samples", "5", "--trace", "out/trace.txt"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("sample=")).count(), 5);
    let trace = parse_trace(&fs::read_to_string(out.join("trace.txt")).unwrap()).unwrap();
    let model = IntegerModel::load(&out.join("model.fiqn")).unwrap();
    assert_eq!(trace.len(), 5 * model.linear_layers().count());
}

#[test]
fn reruns_from_the_archived_config_are_bit_identical() {
    let ws = workspace();
    let dir = ws.path();
    for out in ["a", "b"] {
        let cfg = if out == "a" { "tiny.cfg".to_string() } else { "a/run.cfg".to_string() };
        for step in ["train-teacher", "distill", "export"] {
            let o = fiqnn(dir, &["--config", &cfg, "--out", out, step]);
            assert!(o.status.success(), "{step}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    for f in ["teacher.ckpt", "student.ckpt", "model.fiqn"] {
        assert_eq!(fs::read(dir.join("a").join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn verify_fails_with_code_five_on_a_foreign_student() {
    let ws = workspace();
    let dir = ws.path();
    for (out, seed) in [("a", "3"), ("b", "4")] {
        for step in ["train-teacher", "distill", "export"] {
            let o = fiqnn(dir, &["--config", "tiny.cfg", "--seed", seed, "--out", out, step]);
            assert!(o.status.success(), "{step}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    let o = fiqnn(dir, &["--config", "tiny.cfg", "--out", "a", "verify", "--student", "b/student.ckpt"]);
    assert_eq!(o.status.code(), Some(5), "{}", stdout(&o));
    assert!(stdout(&o).contains("model-matches-student"));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let ws = workspace();
    let dir = ws.path();
    fs::write(dir.join("bad.cfg"), "train.epochz = 3\n").unwrap();
    let o = fiqnn(dir, &["--config", "bad.cfg", "train-teacher"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
    fs::write(dir.join("dup.cfg"), "seed = 1\nseed = 2\n").unwrap();
    assert_eq!(fiqnn(dir, &["--config", "dup.cfg", "train-teacher"]).status.code(), Some(2));
    assert_eq!(fiqnn(dir, &["--config", "tiny.cfg", "--mode", "fast", "infer"]).status.code(), Some(2));
}

#[test]
fn missing_or_corrupt_data_exits_with_code_three() {
    let ws = workspace();
    let dir = ws.path();
    fs::write(dir.join("nodata.cfg"), CONFIG.replace("train-images,", "absent-images,")).unwrap();
    let o = fiqnn(dir, &["--config", "nodata.cfg", "--out", "x", "train-teacher"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(dir.join("train-labels"), [0u8, 0, 8, 1, 0, 0, 0, 2, 0, 7]).unwrap();
    let o = fiqnn(dir, &["--config", "tiny.cfg", "--out", "x", "train-teacher"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
