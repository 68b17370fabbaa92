use std::path::Path;
use std::process::{Command, Output};

fn pointattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointattn")).args(args).output().expect("spawn pointattn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str, scenes: &str) {
    let o = pointattn(&["gen", "--seed", seed, "--scenes", scenes, "--out", p(dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

/// Value rows of every block (the line after each header).
fn value_rows(tsv: &str) -> Vec<Vec<String>> {
    let lines: Vec<&str> = tsv.lines().filter(|l| !l.starts_with('#')).collect();
    lines.chunks(2).map(|c| c[1].split('\t').map(String::from).collect()).collect()
}

#[test]
fn gen_then_eval_untrained_model() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("data"), tmp.path().join("model"));
    gen(&data, "7", "4");
    let plys = std::fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ply").count();
    assert_eq!(plys, 4);

    // zero epochs saves the initialized model
    let o = pointattn(&["train", "--data", p(&data), "--out", p(&model), "--epochs", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report_path = tmp.path().join("report.tsv");
    let o = pointattn(&["eval", "--model", p(&model), "--data", p(&data), "--iou", "0.25,0.5", "--out", p(&report_path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = stdout(&o);
    assert_eq!(std::fs::read_to_string(&report_path).unwrap(), tsv);

    // every table row has one column per class plus the aggregate
    for line in tsv.lines().filter(|l| !l.starts_with('#')) {
        assert_eq!(line.split('\t').count(), 10 + 1, "{line}");
    }
    assert!(tsv.contains("# AP@0.25") && tsv.contains("# recall@0.5"));
    let rows = value_rows(&tsv);
    let map25: f64 = rows[0].last().unwrap().parse().unwrap();
    let map50: f64 = rows[2].last().unwrap().parse().unwrap();
    assert!(map25 < 0.2, "untrained mAP@0.25 {map25}");
    assert!(map50 <= map25);
}

#[test]
fn train_none_and_se_on_toy_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "3", "4");
    for kind in ["none", "se"] {
        let model = tmp.path().join(kind);
        let o = pointattn(&[
            "train", "--data", p(&data), "--out", p(&model), "--epochs", "1", "--batch", "2", "--attention", kind,
        ]);
        assert!(o.status.success(), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("epoch 1/1"));
        let config = std::fs::read_to_string(model.join("config.txt")).unwrap();
        assert!(config.contains(&format!("attention = {kind}")), "{config}");
        let curve = std::fs::read_to_string(model.join("loss.tsv")).unwrap();
        assert_eq!(curve.lines().count(), 1 + 2);

        let scene = data.join("scene_0000.ply");
        let dump = tmp.path().join(format!("{kind}_votes.ply"));
        let o = pointattn(&["dump-votes", "--model", p(&model), "--scene", p(&scene), "--out", p(&dump)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("mean vote-to-centroid distance"));
        assert!(std::fs::read_to_string(&dump).unwrap().contains("element vote 128"));
    }
}

#[test]
fn config_file_sets_model_and_data_supplies_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("data"), tmp.path().join("model"));
    gen(&data, "5", "2");
    let cfg = tmp.path().join("model.txt");
    std::fs::write(&cfg, "profile = toy\nattention = cbam\nseed = 4\n").unwrap();
    let o = pointattn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&model), "--epochs", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = std::fs::read_to_string(model.join("config.txt")).unwrap();
    assert!(saved.contains("attention = cbam") && saved.contains("seed = 4") && saved.contains("bookshelf"));

    std::fs::write(&cfg, "profile = toy\nattention = sideways\n").unwrap();
    let o = pointattn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&model)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sideways"));
}

#[test]
fn bench_prints_one_record_per_size() {
    let o = pointattn(&["bench", "--attention", "se", "--n-list", "16,32", "--c", "16", "--reps", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("kind\tn\tc"));
    assert!(lines[1].starts_with("se\t16\t16\t") && lines[2].starts_with("se\t32\t16\t"));
}

#[test]
fn exit_codes() {
    for args in [
        &["gen", "--bogus"][..],
        &["frobnicate"],
        &[],
        &["bench", "--attention", "transformer-xl"],
        &["eval", "--model", "m"],
    ] {
        let o = pointattn(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"), "{args:?}");
        assert!(o.stdout.is_empty());
    }
    assert_eq!(pointattn(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let o = pointattn(&["eval", "--model", p(&missing), "--data", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = pointattn(&["bench", "--attention", "none"]);
    assert_eq!(o.status.code(), Some(1));
    let o = pointattn(&["eval", "--model", p(&missing), "--data", p(&missing), "--iou", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}
