use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 16] = [
    "--set",
    "n_train=4",
    "--set",
    "n_val=2",
    "--set",
    "n_test=4",
    "--set",
    "dur_min=1.0",
    "--set",
    "dur_max=1.2",
    "--set",
    "epochs=1",
    "--set",
    "batch_size=4",
    "--hidden",
    "4",
];

fn vad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vad(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn param_count_matches_closed_form() {
    let base = ok(&["param-count"]);
    assert!(
        base.lines().any(|l| l.starts_with("total") && l.ends_with("92993")),
        "{base}"
    );
    assert!(!base.contains("attention"));
    let da2 = ok(&["param-count", "--attention", "da2"]);
    assert!(
        da2.lines()
            .any(|l| l.starts_with("attention (da2)") && l.ends_with("1808")),
        "{da2}"
    );
    assert!(da2.contains("1.94%"));
}

#[test]
fn exit_codes_follow_error_class() {
    assert_eq!(vad(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(vad(&["param-count", "--attention", "da3"]).status.code(), Some(1));
    assert_eq!(vad(&["param-count", "--set", "colour=blue"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg");
    std::fs::write(&cfg, "hidden = 64\nwidth = 3\n").unwrap();
    let out = vad(&["param-count", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
    let missing = dir.path().join("missing.ckpt");
    let wav = dir.path().join("missing.wav");
    let out = vad(&["infer", "--checkpoint", s(&missing), "--wav", s(&wav)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
    assert_eq!(vad(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_grid_has_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let args = with_tiny(&[
        "sweep",
        "--set",
        "gammas=0,0.8",
        "--set",
        "conditions=nopad,pad3",
        "--jobs",
        "2",
        "--out",
        s(&out),
    ]);
    ok(&args);
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2 * 2, "{csv}");
    assert!(rows.iter().any(|r| r.starts_with("pad3,da2,fl0.8,0.8,")));
    assert!(rows.iter().any(|r| r.starts_with("nopad,none,ce,0,")));
    assert!(out.join("config").exists());
}

#[test]
fn pipeline_from_synth_to_inference() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&with_tiny(&["synth", "--seed", "3", "--out", s(&data)]));
    let manifest = data.join("manifest.csv");
    assert!(manifest.exists());

    let run = dir.path().join("run");
    ok(&with_tiny(&[
        "train",
        "--data",
        s(&manifest),
        "--attention",
        "da2",
        "--out",
        s(&run),
    ]));
    let ckpt = run.join("checkpoint").join("best.ckpt");
    assert!(ckpt.exists() && run.join("logs").join("train_log.csv").exists());

    // The echoed config alone reproduces the checkpoint.
    let again = dir.path().join("again");
    ok(&["train", "--config", s(&run.join("config")), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(again.join("checkpoint").join("best.ckpt")).unwrap()
    );

    let summary = ok(&["eval", "--config", s(&run.join("config")), "--checkpoint", s(&ckpt)]);
    assert!(summary.contains("overall"), "{summary}");
    let report = std::fs::read_to_string(run.join("reports").join("report.csv")).unwrap();
    assert!(report.starts_with("noise,snr_db,auc,n_frames"));

    let wav = data.join("wav").join("utt00000.wav");
    let probs = ok(&["infer", "--checkpoint", s(&ckpt), "--wav", s(&wav)]);
    let samples = vad_core::features::read_wav(&wav).unwrap().len();
    assert_eq!(probs.lines().count(), 1 + (samples - 400) / 160);
    assert!(probs
        .lines()
        .all(|l| l.parse::<f64>().is_ok_and(|p| (0.0..=1.0).contains(&p))));

    let dump = dir.path().join("dump");
    let labels = data.join("labels").join("utt00000.lab");
    ok(&[
        "dump-attn",
        "--checkpoint",
        s(&ckpt),
        "--wav",
        s(&wav),
        "--labels",
        s(&labels),
        "--start",
        "10",
        "--end",
        "30",
        "--out",
        s(&dump),
    ]);
    for f in ["hidden.csv", "refined.csv", "labels.csv"] {
        assert!(dump.join(f).exists(), "{f}");
    }
    let out = vad(&[
        "dump-attn",
        "--checkpoint",
        s(&ckpt),
        "--wav",
        s(&wav),
        "--start",
        "10",
        "--end",
        "5000",
        "--out",
        s(&dump),
    ]);
    // An out-of-range frame window is a bad flag value, hence a usage error.
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn label_featurize_and_prep() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&with_tiny(&["synth", "--out", s(&data)]));
    let manifest = data.join("manifest.csv");

    let feats = dir.path().join("feats");
    ok(&["featurize", "--manifest", s(&manifest), "--out", s(&feats)]);
    assert_eq!(std::fs::read_dir(&feats).unwrap().count(), 10);

    let labels = dir.path().join("labels");
    let wav = data.join("wav").join("utt00001.wav");
    let printed = ok(&["label", s(&wav), "--out", s(&labels)]);
    assert!(printed.contains("frames"));
    assert!(labels.join("utt00001.lab").exists());

    let prepped = dir.path().join("prepped");
    ok(&[
        "prep",
        "--manifest",
        s(&manifest),
        "--condition",
        "pad1",
        "--snr-set",
        "-5,5",
        "--out",
        s(&prepped),
    ]);
    let text = std::fs::read_to_string(prepped.join("manifest.csv")).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pad1")));
}
