use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fetalseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fetalseg"))
        .args(args)
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "# small, fast settings\n\
         image_size = 32\n\
         slices_per_volume = 4\n\
         n_volumes = 4\n\
         icv_depth = 2\n\
         icv_base_channels = 4\n\
         tissue_depth = 2\n\
         tissue_base_channels = 4\n\
         icv_epochs = 4\n\
         tissue_epochs = 1\n\
         icv_batch_size = 4\n\
         tissue_batch_size = 4\n\
         cc_min_volume_mm3 = 0\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(fetalseg(&["--no-such-flag"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = fetalseg(&["--config", bad.to_str().unwrap(), "phantom"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = fetalseg(&["--out", dir.path().to_str().unwrap(), "sweep", "--proportions", "0,1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_plain_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = fetalseg(&["--out", d, "segment", "--input", "nowhere.mvol", "--output", "x.mvol"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn phantom_train_segment_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg.as_str(), "--out", out];
        all.extend_from_slice(args);
        let o = fetalseg(&all);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    assert!(run(&["phantom"]).contains("wrote 4 cases (2 train, 2 test)"));
    run(&["train", "--stage", "icv"]);
    let trained = run(&["train", "--stage", "tissue", "--arm", "none"]);
    assert!(trained.contains("0 flipped, 0 rotated, 0 with IIA"));
    assert!(out_dir.join("models/icv_flip_rot_iia.unet").exists());
    assert!(out_dir.join("models/tissue_none.unet").exists());

    let tissue = out_dir.join("models/tissue_none.unet");
    run(&["segment", "--tissue", tissue.to_str().unwrap()]);
    let report = run(&["evaluate"]);
    assert!(report.contains("with_artifact"), "{report}");
    assert!(out_dir.join("evaluation/scores.csv").exists());

    let image = fs::read_dir(out_dir.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_image.mvol"))
        .unwrap();
    let previews = run(&["augment", "preview", "--input", image.to_str().unwrap()]);
    assert!(previews.contains("wrote 4 triptychs"));
}

#[test]
fn gradcheck_passes() {
    let out = fetalseg(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(text.contains("network"));
}
