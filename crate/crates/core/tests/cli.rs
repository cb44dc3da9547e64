use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn facefit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facefit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = facefit(dir, args);
    assert!(
        out.status.success(),
        "facefit {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_dataset(dir: &Path) {
    fs::write(dir.join("cfg.json"), r#"{"num_train": 24, "num_test": 6, "num_scans": 16}"#).unwrap();
    ok(dir, &["synth", "--config", "cfg.json", "--out", "data", "--seed", "2"]);
    ok(dir, &["build-model", "--scans", "data/scans/manifest.txt", "--num-bases", "6", "--out", "model.json"]);
}

#[test]
fn synth_is_byte_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.json"), r#"{"num_train": 5, "num_test": 2, "num_scans": 8, "num_bases": 4}"#).unwrap();
    for (out, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        ok(tmp.path(), &["synth", "--config", "cfg.json", "--out", out, "--seed", seed]);
    }
    let read = |d: &str, f: &str| fs::read(tmp.path().join(d).join(f)).unwrap();
    for f in ["train/annotations.csv", "train/truth.csv", "test/images/000006.pgm", "scans/scan_0003.csv", "config.json"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "train/annotations.csv"), read("c", "train/annotations.csv"));
    let cfg = String::from_utf8(read("c", "config.json")).unwrap();
    assert!(cfg.contains("\"seed\": 2"));
}

#[test]
fn train_logs_progress_and_pipeline_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    // No --gt: the ground truth is fitted on the fly.
    let out = ok(
        dir,
        &["train", "--dataset", "data/train/annotations.csv", "--model", "model.json", "--layers", "2", "--out", "c.json"],
    );
    let log = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = log.lines().filter(|l| l.starts_with("layer=")).collect();
    assert_eq!(lines.len(), 3, "{log}");
    for (k, line) in lines.iter().enumerate() {
        let (layer, nme) = line.split_once(' ').unwrap();
        assert_eq!(layer, format!("layer={k}"));
        let value: f64 = nme.strip_prefix("mean_nme=").unwrap().parse().unwrap();
        assert!(value.is_finite() && value > 0.0);
    }

    ok(dir, &["predict", "--cascade", "c.json", "--dataset", "data/test/annotations.csv", "--out", "pred.csv"]);
    ok(
        dir,
        &["eval", "--dataset", "data/test/annotations.csv", "--predictions", "pred.csv", "--bins", "-90,0,90", "--out", "ev"],
    );
    let global = fs::read_to_string(dir.join("ev/global.csv")).unwrap();
    assert!(global.starts_with("metric,value\nimages,6\nmape,"));
    let bins = fs::read_to_string(dir.join("ev/bins.csv")).unwrap();
    assert_eq!(bins.lines().count(), 3);
    let counted: usize = bins
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counted, 6);
    let landmarks = fs::read_to_string(dir.join("ev/landmarks.csv")).unwrap();
    assert_eq!(landmarks.lines().count(), 22);

    ok(
        dir,
        &["align", "--cascade", "c.json", "--image", "data/test/images/000024.pgm", "--bbox", "30,30,64,64",
          "--trace", "t.csv", "--out", "one.csv"],
    );
    let trace = fs::read_to_string(dir.join("t.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
    assert!(trace.starts_with("layer,m11,"));
    let one = fs::read_to_string(dir.join("one.csv")).unwrap();
    assert_eq!(one.lines().count(), 2);
}

#[test]
fn input_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let missing = facefit(dir, &["build-model", "--scans", "nope.txt", "--num-bases", "2", "--out", "m.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.txt"));

    let bad_box = facefit(dir, &["align", "--cascade", "c.json", "--image", "i.pgm", "--bbox", "1,2,3", "--out", "o.csv"]);
    assert_eq!(bad_box.status.code(), Some(2));

    fs::write(dir.join("m.json"), "{\"format_version\": 9, \"kind\": \"deformable_model\", \"dimensions\": {}, \"payload\": {}}").unwrap();
    fs::write(dir.join("ann.csv"), "image_path,bx,by,bw,bh\n").unwrap();
    let version = facefit(dir, &["fit-gt", "--dataset", "ann.csv", "--model", "m.json", "--out", "gt.csv"]);
    assert_eq!(version.status.code(), Some(2));

    let bad_kind = facefit(dir, &["train", "--dataset", "a", "--model", "b", "--kind", "forest", "--out", "c"]);
    assert_eq!(bad_kind.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    // Two scans whose normals at the first landmark cancel out.
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let pts = ["0,0,1", "1,0,0.5", "-1,0,0.5", "0,1,0.3", "0,-1,0.2", "0.5,0.5,0.4"];
    for (name, first_normal) in [("a.csv", "0,0,1"), ("b.csv", "0,0,-1")] {
        let mut text = String::from("x,y,z,nx,ny,nz\n");
        for (j, p) in pts.iter().enumerate() {
            let n = if j == 0 { first_normal } else { "0,0,1" };
            text.push_str(&format!("{p},{n}\n"));
        }
        fs::write(dir.join(name), text).unwrap();
    }
    fs::write(dir.join("manifest.txt"), "a.csv\nb.csv\n").unwrap();
    let out = facefit(dir, &["build-model", "--scans", "manifest.txt", "--num-bases", "0", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.join("m.json").exists());
}
