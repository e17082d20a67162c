use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shapeseg::segnet::Archive;
use shapeseg::synthdata::{load_volume, read_sample, Dataset};
use shapeseg::tensor::Tensor;
use shapeseg::voxelgeom::{boundary_voxels, sdm_target, Grid};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapeseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) {
    ok(&[
        "gen-data", "--count", "6", "--shape", "16", "--labeled", "2", "--unlabeled", "2", "--val", "2", "--seed", seed,
        "--out", s(dir),
    ]);
}

const TINY: &str = r#"
total_iters = 4
crop = [16, 16, 16]
val_every = 2
checkpoint_every = 2

[segmenter]
base_channels = 4
"#;

#[test]
fn gen_data_is_deterministic_and_validates_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a, "3");
    gen(&b, "3");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6 * 3 * 2 + 1);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let bad = run(&[
        "gen-data", "--count", "6", "--labeled", "2", "--unlabeled", "2", "--val", "1", "--out",
        s(&dir.path().join("c")),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("split"));
}

#[test]
fn compute_sdm_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "1");
    let mask_path = dir.path().join("case000_mask.json");
    let out = dir.path().join("sdm_out.json");
    ok(&["compute-sdm", "--mask", s(&mask_path), "--out", s(&out)]);
    let (_, data) = load_volume(&mask_path).unwrap();
    let mask = data.into_mask().unwrap();
    let sdm = load_volume(&out).unwrap().1.into_sdm().unwrap();
    assert!(sdm.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    for [d, h, w] in boundary_voxels(&mask).coords {
        assert_eq!(sdm.get(d, h, w), 0.0);
    }
    let expect: Vec<f32> = sdm_target(&mask).to_f32();
    assert_eq!(sdm.to_f32(), expect);

    let image = dir.path().join("case000_image.json");
    let wrong_kind = run(&["compute-sdm", "--mask", s(&image), "--out", s(&out)]);
    assert_eq!(wrong_kind.status.code(), Some(1));
    let missing = run(&["compute-sdm", "--mask", s(&dir.path().join("nope.json")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "2");
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir), "--mode", "full"]);
    for f in ["config.toml", "train_log.jsonl", "checkpoint_000002.ckpt", "final.ckpt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let ckpt = run_dir.join("final.ckpt");

    // the echoed config reproduces the run
    let echo_dir = dir.path().join("echo");
    ok(&["train", "--config", s(&run_dir.join("config.toml")), "--data", s(&data), "--out", s(&echo_dir)]);
    assert_eq!(
        Archive::load(&ckpt).unwrap(),
        Archive::load(&echo_dir.join("final.ckpt")).unwrap()
    );

    // resuming from the midpoint reaches the same final state
    let resume_dir = dir.path().join("resume");
    ok(&[
        "train", "--data", s(&data), "--out", s(&resume_dir), "--resume", s(&run_dir.join("checkpoint_000002.ckpt")),
    ]);
    assert_eq!(
        Archive::load(&ckpt).unwrap(),
        Archive::load(&resume_dir.join("final.ckpt")).unwrap()
    );

    let vol = data.join("case004_image.json");
    let (mask_out, sdm_out) = (dir.path().join("pred_mask.json"), dir.path().join("pred_sdm.json"));
    ok(&[
        "predict", "--checkpoint", s(&ckpt), "--volume", s(&vol), "--out-mask", s(&mask_out), "--out-sdm", s(&sdm_out),
    ]);
    let mask = load_volume(&mask_out).unwrap().1.into_mask().unwrap();
    let sdm = load_volume(&sdm_out).unwrap().1.into_sdm().unwrap();
    assert_eq!(mask.shape(), sdm.shape);
    assert!(sdm.values.iter().all(|v| *v > -1.0 && *v < 1.0));
    let seg = shapeseg::segnet::Segmenter::from_archive(&Archive::load(&ckpt).unwrap()).unwrap();
    let sample = read_sample(&data, "case004").unwrap();
    let (prob, _) = seg
        .predict(&Tensor::from_vec(&[1, 1, 16, 16, 16], sample.volume.as_slice().to_vec()))
        .unwrap();
    let prob = Grid::from_vec(sample.volume.shape(), prob.into_data()).unwrap();
    assert_eq!(mask, shapeseg::evalmetrics::binarize(&prob, 0.5));

    let eval_dir = dir.path().join("eval");
    let out = ok(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--nms", "both", "--out", s(&eval_dir)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Dice[%]\tJaccard[%]\tASD[voxel]\t95HD[voxel]"));
    let off = fs::read_to_string(eval_dir.join("metrics_nms_off.tsv")).unwrap();
    let on = fs::read_to_string(eval_dir.join("metrics_nms_on.tsv")).unwrap();
    assert!(off.lines().skip(1).all(|l| l.ends_with("\toff")));
    assert!(on.lines().skip(1).all(|l| l.ends_with("\ton")));
    let ds = Dataset::load(&data).unwrap();
    assert_eq!(off.lines().count(), ds.split().val_ids.len() + 2);
}

#[test]
fn bad_inputs_exit_with_validation_or_runtime_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "4");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    fs::write(&cfg, "labeled_per_batch = 4\n").unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labeled_per_batch"));

    assert_eq!(run(&["train", "--mode", "bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    // a model trained briefly, then a case file removed: evaluation reports it and fails
    fs::write(&cfg, TINY.replace("total_iters = 4", "total_iters = 1")).unwrap();
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir), "--mode", "supervised"]);
    let ckpt = run_dir.join("final.ckpt");
    let out = run(&[
        "predict", "--checkpoint", s(&ckpt), "--volume", s(&data.join("case004_image.json")), "--out-mask",
        s(&dir.path().join("m.json")), "--out-sdm", s(&dir.path().join("s.json")),
    ]);
    assert_eq!(out.status.code(), Some(1), "supervised checkpoints have no SDM head");
    let victim = Dataset::load(&data).unwrap().split().val_ids[0].clone();
    fs::remove_file(data.join(format!("{victim}_mask.raw"))).unwrap();
    let eval_dir = dir.path().join("eval");
    let out = run(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--nms", "off", "--out", s(&eval_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&victim));
    assert!(eval_dir.join("metrics_nms_off.tsv").exists());
}

#[test]
fn predict_rejects_indivisible_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-data", "--count", "3", "--shape", "16x16x10", "--labeled", "1", "--unlabeled", "1", "--val", "1", "--out",
        s(&data),
    ]);
    let seg = shapeseg::segnet::Segmenter::new(Default::default(), 0).unwrap();
    let ckpt = dir.path().join("seg.ckpt");
    seg.to_archive().save(&ckpt).unwrap();
    let out = run(&[
        "predict", "--checkpoint", s(&ckpt), "--volume", s(&data.join("case000_image.json")), "--out-mask",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiples of 4"));
}

#[test]
fn ablation_writes_a_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "5");
    let cfg = dir.path().join("abl.toml");
    fs::write(&cfg, TINY.replace("total_iters = 4", "total_iters = 2")).unwrap();
    let out_dir = dir.path().join("abl");
    let out = ok(&["ablation", "--config", s(&cfg), "--data", s(&data), "--seeds", "0,1", "--out", s(&out_dir)]);
    let text = String::from_utf8_lossy(&out.stdout);
    for mode in ["supervised", "supervised+sdm", "full"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(&format!("{mode}\t"))).count(), 3, "{text}");
    }
    assert!(out_dir.join("ablation.json").exists());
    assert!(out_dir.join("full_seed1").join("final.ckpt").exists());
}
