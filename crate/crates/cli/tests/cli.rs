use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfmkit_core::io::{read_tensor, write_tensor, DType};
use sfmkit_core::sfm::{Checkpoint, SfmConfig, SfmParams};
use sfmkit_core::Tensor;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../data/tests/fixtures")
}

fn sfmkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfmkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn eval_reproduces_golden_report() {
    let dir = fixtures().join("five_image");
    let o = sfmkit(&[
        "eval",
        "--detections",
        p(&dir.join("detections.jsonl")),
        "--gt",
        p(&dir.join("annotations")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let golden = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    assert_eq!(stdout(&o), golden);
}

#[test]
fn eval_ignores_detection_file_order() {
    let dir = fixtures().join("five_image");
    let text = std::fs::read_to_string(dir.join("detections.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    lines.reverse();
    lines.rotate_left(2);
    let tmp = tempfile::tempdir().unwrap();
    let shuffled = tmp.path().join("d.jsonl");
    std::fs::write(&shuffled, lines.join("\n")).unwrap();
    let run = |d: &Path| {
        stdout(&sfmkit(&[
            "eval",
            "--json",
            "--detections",
            p(d),
            "--gt",
            p(&dir.join("annotations")),
        ]))
    };
    let a = run(&dir.join("detections.jsonl"));
    assert_eq!(a, run(&shuffled));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["schema_version"], 1);
}

#[test]
fn eval_perfect_detections_score_100() {
    let dir = fixtures().join("five_image");
    let set = sfmkit_data::load_voc_dir(&dir.join("annotations"), None, "gt").unwrap();
    let mut lines = String::new();
    for img in &set.images {
        for b in &img.boxes {
            lines += &format!(
                "{{\"image_id\":\"{}\",\"x1\":{},\"y1\":{},\"x2\":{},\"y2\":{},\"score\":0.9,\"class\":\"{}\"}}\n",
                img.id, b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.label
            );
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("perfect.jsonl");
    std::fs::write(&d, lines).unwrap();
    let o = sfmkit(&[
        "eval",
        "--detections",
        p(&d),
        "--gt",
        p(&dir.join("annotations")),
    ]);
    let text = stdout(&o);
    let values: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    assert!(values.iter().all(|v| *v == "100.0" || *v == "-"), "{text}");
    assert_eq!(values[0], "100.0");
}

#[test]
fn eval_orphans_exit_3() {
    let dir = fixtures().join("five_image");
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("orphan.jsonl");
    std::fs::write(
        &d,
        "{\"image_id\":\"ghost\",\"x1\":0,\"y1\":0,\"x2\":5,\"y2\":5,\"score\":0.5,\"class\":\"chicken\"}\n",
    )
    .unwrap();
    let o = sfmkit(&[
        "eval",
        "--detections",
        p(&d),
        "--gt",
        p(&dir.join("annotations")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ghost"));
}

#[test]
fn stats_on_three_file_corpus() {
    let o = sfmkit(&["stats", p(&fixtures().join("voc3")), "--split", "syn"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row, ["syn", "3", "7", "42.86", "42.86", "14.29"]);

    let o = sfmkit(&["stats", "--json", p(&fixtures().join("voc3"))]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["schema_version"], 1);
    let s = &v["splits"][0];
    assert_eq!(
        (s["images"].as_u64(), s["boxes"].as_u64()),
        (Some(3), Some(7))
    );
    assert_eq!(s["pct_l"].as_f64(), Some(14.29));
}

#[test]
fn stats_errors_have_stable_codes() {
    assert_eq!(
        sfmkit(&["stats", "/definitely/not/here"]).status.code(),
        Some(2)
    );
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sfmkit(&["stats", p(tmp.path())]).status.code(), Some(3));
    let o = sfmkit(&[
        "--thresholds",
        "900,100",
        "stats",
        p(&fixtures().join("voc3")),
    ]);
    assert_eq!(o.status.code(), Some(5));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "nonsense = true\n").unwrap();
    let o = sfmkit(&["--config", p(&cfg), "stats", p(&fixtures().join("voc3"))]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn config_file_thresholds_apply_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "thresholds = [150.0, 2000.0]\n").unwrap();
    let voc = fixtures().join("voc3");
    let o = sfmkit(&["--config", p(&cfg), "stats", "--json", p(&voc)]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["splits"][0]["n_s"], 1);
    let o = sfmkit(&[
        "--config",
        p(&cfg),
        "--thresholds",
        "1024,9216",
        "stats",
        "--json",
        p(&voc),
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["splits"][0]["n_s"], 3);
}

#[test]
fn forward_with_fresh_checkpoint_is_bit_exact_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SfmConfig::new(4).with_heads(2);
    let params = SfmParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let ck = tmp.path().join("ck.json");
    std::fs::write(&ck, Checkpoint::from_params(&params).to_json().unwrap()).unwrap();
    let x = Tensor::randn(&[4, 5, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let input = tmp.path().join("x.sfmt");
    write_tensor(std::fs::File::create(&input).unwrap(), &x, DType::F64).unwrap();
    let output = tmp.path().join("y.sfmt");
    for mode in ["train", "infer"] {
        let o = sfmkit(&[
            "forward",
            "--checkpoint",
            p(&ck),
            "--input",
            p(&input),
            "--output",
            p(&output),
            "--mode",
            mode,
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(
            std::fs::read(&output).unwrap(),
            std::fs::read(&input).unwrap()
        );
    }
    let (y, _) = read_tensor(std::fs::File::open(&output).unwrap()).unwrap();
    assert_eq!(y, x);

    let o = sfmkit(&[
        "--heads",
        "4",
        "forward",
        "--checkpoint",
        p(&ck),
        "--input",
        p(&input),
        "--output",
        p(&output),
    ]);
    assert_eq!(o.status.code(), Some(5));
    let wrong = tmp.path().join("w.sfmt");
    write_tensor(
        std::fs::File::create(&wrong).unwrap(),
        &Tensor::zeros(&[3, 2, 2]),
        DType::F64,
    )
    .unwrap();
    let o = sfmkit(&[
        "forward",
        "--checkpoint",
        p(&ck),
        "--input",
        p(&wrong),
        "--output",
        p(&output),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_toy_is_reproducible_and_writes_a_usable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let trace = tmp.path().join(format!("{tag}.csv"));
        let ck = tmp.path().join(format!("{tag}.json"));
        let o = sfmkit(&[
            "--seed",
            "5",
            "--heads",
            "2",
            "train-toy",
            "--steps",
            "6",
            "--samples",
            "4",
            "--channels",
            "4",
            "--trace",
            p(&trace),
            "--checkpoint",
            p(&ck),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        (
            std::fs::read_to_string(trace).unwrap(),
            std::fs::read_to_string(ck).unwrap(),
        )
    };
    let (a, ca) = run("a");
    let (b, cb) = run("b");
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_eq!(a.lines().count(), 7);
    assert_eq!(a.lines().next(), Some("step,loss"));
    let params = Checkpoint::from_json(&ca).unwrap().into_params().unwrap();
    assert_eq!(params.config.heads, 2);

    let o = sfmkit(&[
        "--heads",
        "3",
        "train-toy",
        "--channels",
        "4",
        "--steps",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(5));
    let o = sfmkit(&[
        "--heads",
        "2",
        "--lr",
        "1e7",
        "train-toy",
        "--channels",
        "4",
        "--samples",
        "2",
        "--steps",
        "50",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn train_toy_json_summary() {
    let o = sfmkit(&[
        "--json",
        "--heads",
        "2",
        "train-toy",
        "--steps",
        "2",
        "--samples",
        "2",
        "--channels",
        "4",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["trace"].as_array().unwrap().len(), 2);
    assert_eq!(v["settings"]["momentum"], 0.937);
}

#[test]
fn gradcheck_passes_and_names_injected_faults() {
    let o = sfmkit(&["gradcheck", "--seeds", "2", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["passed"], true);
    assert!(v["cases"].as_array().unwrap().len() > 30);

    let o = sfmkit(&["gradcheck", "--seeds", "1", "--inject-fault", "conv2d"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("conv2d_3x3"), "{err}");
    assert_eq!(
        sfmkit(&["gradcheck", "--inject-fault", "nope"])
            .status
            .code(),
        Some(5)
    );
}

#[test]
fn thread_setting_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_sfmkit"))
        .args(["stats", p(&fixtures().join("voc3"))])
        .env("SFMKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(5));
    let o = Command::new(env!("CARGO_BIN_EXE_sfmkit"))
        .args(["stats", p(&fixtures().join("voc3"))])
        .env("SFMKIT_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn settings_are_printed_at_startup() {
    let o = Command::new(env!("CARGO_BIN_EXE_sfmkit"))
        .args(["stats", p(&fixtures().join("voc3"))])
        .output()
        .unwrap();
    let err = String::from_utf8_lossy(&o.stderr);
    for key in [
        "heads=8",
        "lr=0.01",
        "momentum=0.937",
        "weight_decay=0.0005",
        "batch_size=2",
    ] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
}
