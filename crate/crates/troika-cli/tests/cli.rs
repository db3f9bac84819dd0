//! End-to-end command tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn troika(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_troika"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.conf");
    std::fs::write(
        &path,
        "data.n_records = 12\n\
         data.image_size = 32\n\
         gen.n_upsamples = 2\n\
         gen.base_channels = 8\n\
         gen.min_channels = 4\n\
         gen.embed_dim = 8\n\
         gen.spade_hidden = 8\n\
         disc.width1 = 8\n\
         disc.width2 = 8\n\
         seg.base_channels = 4\n\
         train.epochs_seg = 1\n\
         train.epochs_gan = 1\n\
         train.max_seg_steps = 2\n\
         train.max_gan_steps = 2\n\
         train.batch_size = 2\n\
         exp.n_repeats = 2\n\
         exp.test_fraction = 0.25\n",
    )
    .unwrap();
    path
}

fn read_dir_sorted(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn gen_data_is_deterministic_and_counts_match() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();

    let out = troika(&["--config", cfg, "gen-data", "--out", "ds1"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(tmp.path().join("ds1/manifest.tsv")).unwrap();
    let rows: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 12);
    let classes: std::collections::HashSet<&str> =
        rows.iter().map(|r| r.split('\t').nth(1).unwrap()).collect();
    assert_eq!(classes.len(), 3);

    // rerun with the same seed: byte-identical files
    let out = troika(&["--config", cfg, "gen-data", "--out", "ds2"], tmp.path());
    assert!(out.status.success());
    assert_eq!(
        read_dir_sorted(&tmp.path().join("ds1/records")),
        read_dir_sorted(&tmp.path().join("ds2/records"))
    );
    for name in read_dir_sorted(&tmp.path().join("ds1/records")) {
        let a = std::fs::read(tmp.path().join("ds1/records").join(&name)).unwrap();
        let b = std::fs::read(tmp.path().join("ds2/records").join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    assert_eq!(
        std::fs::read(tmp.path().join("ds1/manifest.tsv")).unwrap(),
        std::fs::read(tmp.path().join("ds2/manifest.tsv")).unwrap()
    );
}

#[test]
fn invalid_proportions_exit_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("bad.conf"),
        "data.class_proportions = 0.5,0.2,0.1\n",
    )
    .unwrap();
    let out = troika(
        &["--config", "bad.conf", "gen-data", "--out", "ds"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("class_proportions"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_smoke_with_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_tiny_config(tmp.path());
    let cfg = cfg_path.to_str().unwrap();

    let out = troika(&["--config", cfg, "gen-data", "--out", "ds"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // segmentor training writes a checkpoint and a loss trace with one row
    // per executed step
    let out = troika(
        &["--config", cfg, "train", "seg", "--data", "ds", "--out", "seg.rgt"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(tmp.path().join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2, "header + max_seg_steps rows");

    // missing frozen checkpoint: usage error
    let out = troika(
        &[
            "--config", cfg, "train", "gan", "--data", "ds", "--segmentor",
            "nope.rgt", "--out", "gen.rgt",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    let out = troika(
        &[
            "--config", cfg, "train", "gan", "--data", "ds", "--segmentor",
            "seg.rgt", "--out", "gen.rgt", "--no-third-player",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("gen.rgt").exists());

    // strategy I without --class: usage error
    let out = troika(
        &[
            "--config", cfg, "synth", "--checkpoint", "gen.rgt", "--data", "ds",
            "--strategy", "I", "--out", "synth",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // balanced synthesis: (12 - n_c) per class; with counts (9,2,1)
    // that is 3 + 10 + 11 = 24 records, every one resolving provenance
    let out = troika(
        &[
            "--config", cfg, "synth", "--checkpoint", "gen.rgt", "--data", "ds",
            "--strategy", "II", "--out", "synth", "--grid",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(tmp.path().join("synth/manifest.tsv")).unwrap();
    let synth_rows: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(synth_rows.len(), 24);
    assert!(tmp.path().join("synth/grid_m0.pgm").exists());
    assert!(tmp.path().join("synth/grid_m1.pgm").exists());

    // provenance ids resolve against the source manifest
    let src_manifest = std::fs::read_to_string(tmp.path().join("ds/manifest.tsv")).unwrap();
    for row in synth_rows {
        let path = row.split('\t').next().unwrap();
        let rec = troika::data::record::load_record(&tmp.path().join("synth").join(path)).unwrap();
        let src = rec.provenance.expect("synthetic records carry provenance");
        assert!(src_manifest.contains(&src), "unknown source {src}");
    }
}

#[test]
fn experiment_writes_parsable_reports_and_chart() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_tiny_config(tmp.path());
    let cfg = cfg_path.to_str().unwrap();
    troika(&["--config", cfg, "gen-data", "--out", "ds"], tmp.path());
    let out = troika(
        &[
            "--config", cfg, "experiment", "--data", "ds", "--out", "rep",
            "--strategy", "I", "--class", "2",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let dice = std::fs::read_to_string(tmp.path().join("rep/report_dice.csv")).unwrap();
    let wil = std::fs::read_to_string(tmp.path().join("rep/report_wilcoxon.csv")).unwrap();
    let report = troika::pipeline::ExperimentReport::from_csv(&dice, &wil).unwrap();
    // baseline + requested condition only
    assert_eq!(
        report.conditions(),
        vec!["baseline".to_string(), "strategy_I_c2".to_string()]
    );
    // complete schema: 2 conditions x 2 folds x 3 classes
    assert_eq!(report.cells.len(), 12);
    assert_eq!(report.wilcoxon.len(), 3);

    let svg = std::fs::read_to_string(tmp.path().join("rep/report_chart.svg")).unwrap();
    for class in 0..3 {
        assert!(svg.contains(&format!("class {class}")));
    }
    assert!(svg.contains("baseline") && svg.contains("strategy_I_c2"));
}

#[test]
fn selfcheck_passes_and_fault_injection_fails_naming_the_op() {
    let tmp = tempfile::tempdir().unwrap();
    let out = troika(&["selfcheck"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));

    let out = troika(
        &["selfcheck", "--inject-backward-fault", "conv2d"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("conv2d"), "stdout: {stdout}");
}
