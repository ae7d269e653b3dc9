use std::fs;
use std::path::Path;

use fetalseg::config::ExperimentConfig;
use fetalseg::experiment::{
    cmd_ablation, cmd_evaluate, cmd_phantom, cmd_segment, cmd_sweep, cmd_train, data_dir, image_path, labels_path,
    load_dataset, prediction_path, AblationArm, Manifest, Stage,
};
use fetalseg::metrics::{scores_from_csv, Subset};
use fetalseg::volume::{load_labels, save_volume, IntensityVolume, Volume};
use fetalseg::{Error, TissueClass};

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_text(
        "image_size = 32\n\
         slices_per_volume = 4\n\
         n_volumes = 4\n\
         icv_depth = 2\n\
         icv_base_channels = 4\n\
         tissue_depth = 2\n\
         tissue_base_channels = 4\n\
         icv_epochs = 6\n\
         tissue_epochs = 2\n\
         icv_batch_size = 4\n\
         tissue_batch_size = 4\n\
         cc_min_volume_mm3 = 0\n",
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn phantom_command_writes_reproducible_dataset() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = ExperimentConfig {
        out_dir: a.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let ds = cmd_phantom(&cfg).unwrap();
    cfg.out_dir = b.path().to_path_buf();
    cmd_phantom(&cfg).unwrap();

    let (da, db) = (data_dir(a.path()), data_dir(b.path()));
    let ma = fs::read_to_string(da.join("manifest.txt")).unwrap();
    assert_eq!(ma, fs::read_to_string(db.join("manifest.txt")).unwrap());

    let mvols = fs::read_dir(&da)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mvol"))
        .count();
    assert_eq!(mvols, 24);

    let manifest = Manifest::parse(&ma).unwrap();
    assert_eq!(manifest.entries.len(), 12);
    assert_eq!(manifest.entries.iter().filter(|e| e.test).count(), 6);
    for case in &ds.cases {
        let e = manifest.entry(&case.id).unwrap();
        assert_eq!(e.artifact, case.has_injected_artifact);
        assert_eq!(e.test, e.artifact.iter().any(|&f| f), "{}", case.id);
        for (z, flag) in e.artifact.iter().enumerate() {
            assert_eq!(*flag, case.artifact_draws[z].is_some());
        }
    }
    let loaded = load_dataset(&da).unwrap();
    assert_eq!((&loaded.train, &loaded.test), (&ds.train, &ds.test));
    for (l, c) in loaded.cases.iter().zip(&ds.cases) {
        assert_eq!((&l.id, &l.intensity, &l.truth), (&c.id, &c.intensity, &c.truth));
        assert_eq!(l.has_injected_artifact, c.has_injected_artifact);
    }
}

#[test]
fn arm_draw_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.tissue_epochs = 1;
    let (_, none) = cmd_train(&cfg, Stage::Tissue, AblationArm::None, |_, _| {}).unwrap();
    let d = none.report.draws;
    assert!(d.slices > 0);
    assert_eq!((d.flipped, d.rotated, d.iia), (0, 0, 0));

    cfg.iia_proportion = 1.0;
    let (_, full) = cmd_train(&cfg, Stage::Tissue, AblationArm::FlipRotIia, |_, _| {}).unwrap();
    let d = full.report.draws;
    assert_eq!(d.iia, d.slices);
    assert_eq!(d.rotated, d.slices);
}

#[test]
fn training_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, _) = cmd_train(&tiny(a.path()), Stage::Icv, AblationArm::FlipRotIia, |_, _| {}).unwrap();
    let (pb, _) = cmd_train(&tiny(b.path()), Stage::Icv, AblationArm::FlipRotIia, |_, _| {}).unwrap();
    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    let history = fs::read_to_string(pa.with_extension("loss.csv")).unwrap();
    assert!(history.starts_with("epoch,loss\n"));
    assert_eq!(history.lines().count(), 7);
}

#[test]
fn segment_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (icv, _) = cmd_train(&cfg, Stage::Icv, AblationArm::FlipRot, |_, _| {}).unwrap();
    let (tissue, _) = cmd_train(&cfg, Stage::Tissue, AblationArm::FlipRot, |_, _| {}).unwrap();
    let data = data_dir(dir.path());
    let ds = load_dataset(&data).unwrap();
    let pred_dir = dir.path().join("pred");
    for case in ds.test_cases() {
        let out = prediction_path(&pred_dir, &case.id);
        let seg = cmd_segment(&cfg, &image_path(&data, &case.id), &icv, &tissue, &out).unwrap();
        let written = load_labels(&out).unwrap();
        assert_eq!(written, seg.labels);
        assert_eq!(written.geometry(), case.intensity.geometry());
        for (l, m) in written.data().iter().zip(&seg.icv.mask.data) {
            assert!(*l == 0 || *m);
        }
    }

    // an empty scan has no ICV to find
    let case = ds.test_cases().next().unwrap();
    let zero: IntensityVolume = Volume::filled(*case.intensity.geometry(), 0.0).unwrap();
    let zpath = dir.path().join("zero.mvol");
    save_volume(&zero, &zpath).unwrap();
    let err = cmd_segment(&cfg, &zpath, &icv, &tissue, &dir.path().join("zero_pred.mvol")).unwrap_err();
    assert!(matches!(err, Error::NoIcv), "{err}");

    // scoring the predictions
    let eval = dir.path().join("eval");
    let (scores, report) = cmd_evaluate(&data, &pred_dir, &eval).unwrap();
    let per_slice = fs::read_to_string(eval.join("scores.csv")).unwrap();
    assert_eq!(scores_from_csv(&per_slice).unwrap(), scores);
    for class in TissueClass::FOREGROUND {
        let dcs: Vec<f64> = scores
            .iter()
            .filter(|s| s.class == class)
            .filter_map(|s| s.dc)
            .collect();
        let m = report.class(class, Subset::All);
        assert_eq!(m.n_dc, dcs.len());
        if !dcs.is_empty() {
            let mean = dcs.iter().sum::<f64>() / dcs.len() as f64;
            assert!((m.dc.unwrap() - mean).abs() < 1e-12);
        }
        let split = report.class(class, Subset::WithArtifact).n_dc + report.class(class, Subset::WithoutArtifact).n_dc;
        assert_eq!(split, m.n_dc);
    }
    assert!(fs::read_to_string(eval.join("report.csv"))
        .unwrap()
        .starts_with("subset,class,dc,msd\n"));
}

#[test]
fn evaluating_the_reference_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ds = cmd_phantom(&cfg).unwrap();
    let data = data_dir(dir.path());
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for case in ds.test_cases() {
        fs::copy(labels_path(&data, &case.id), prediction_path(&pred, &case.id)).unwrap();
    }
    let (scores, report) = cmd_evaluate(&data, &pred, &dir.path().join("eval")).unwrap();
    let slices: usize = ds.test_cases().map(|c| c.has_injected_artifact.len()).sum();
    assert_eq!(scores.len(), slices * 7);
    assert!(scores.iter().all(|s| s.dc.is_none_or(|d| d == 1.0)));
    assert!(scores.iter().all(|s| s.msd.is_none_or(|d| d == 0.0)));
    let flagged = scores.iter().filter(|s| s.artifact).count();
    let clean = scores.iter().filter(|s| !s.artifact).count();
    assert_eq!(flagged + clean, scores.len());
    assert_eq!(report.grand(Subset::All).dc, Some(1.0));
}

#[test]
fn ablation_and_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.tissue_epochs = 1;
    let ablation = cmd_ablation(&cfg, 2).unwrap();
    let arms: Vec<AblationArm> = ablation.iter().map(|(a, _)| *a).collect();
    assert_eq!(arms, AblationArm::ALL);
    let csv = fs::read_to_string(dir.path().join("ablation/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 28);
    let order: Vec<&str> = rows.iter().step_by(7).map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(order, ["none", "flip", "flip+rot", "flip+rot+IIA"]);
    for arm in AblationArm::ALL {
        assert!(dir.path().join(format!("ablation/loss_{}.csv", arm.slug())).exists());
    }

    let sweep = cmd_sweep(&cfg, &[0.0, 0.5], 1).unwrap();
    let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 7);
    // p = 0 is the flip + rotation arm
    let flip_rot = &ablation[2].1.report;
    let p0 = &sweep[0].1.report;
    for subset in Subset::ALL {
        for class in TissueClass::FOREGROUND {
            let (a, b) = (flip_rot.class(class, subset), p0.class(class, subset));
            for (x, y) in [(a.dc, b.dc), (a.msd, b.msd)] {
                match (x, y) {
                    (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-6),
                    (x, y) => assert_eq!(x, y),
                }
            }
        }
    }
}
