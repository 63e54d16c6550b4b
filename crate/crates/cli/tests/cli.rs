use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use octscreen::data_model::{load_manifest, write_manifest, DatasetManifest, VfProvenance};
use octscreen::embedding::read_feature_cache;
use octscreen::surrogate::{euclidean_distance, read_assignment_log};
use octscreen_cli::pipeline::*;
use octscreen_cli::run_record::{RunRecord, RUN_RECORD_FILE};
use octscreen_cli::{EXIT_OK, EXIT_VALIDATION};

fn run(args: &[&str]) -> i32 {
    octscreen_cli::run(std::iter::once("octscreen").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SYNTH: &[&str] = &[
    "--n-patients",
    "10",
    "--bscans-per-volume",
    "4",
    "--height",
    "16",
    "--width",
    "16",
];

const SMALL_EMBED: &[&str] = &[
    "--stem-width",
    "4",
    "--block-widths",
    "6,8",
    "--embed-dim",
    "8",
    "--backbone-epochs",
    "1",
];

const SMALL_TRAIN: &[&str] = &[
    "--stem-width",
    "4",
    "--block-widths",
    "6,8",
    "--reg-width",
    "4",
    "--batch-size",
    "8",
    "--epochs",
    "2",
];

fn synth(out: &Path, seed: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", s(out), "--seed", seed];
    args.extend_from_slice(SMALL_SYNTH);
    args.extend_from_slice(extra);
    assert_eq!(run(&args), EXIT_OK);
}

fn embed(out: &Path, data: &Path, extra: &[&str]) -> i32 {
    let train = data.join(TRAIN_FILE);
    let val = data.join(VAL_FILE);
    let mut args = vec!["embed", "--out", s(out), "--train", s(&train), "--val", s(&val)];
    args.extend_from_slice(SMALL_EMBED);
    args.extend_from_slice(extra);
    run(&args)
}

fn train(out: &Path, train: &Path, val: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["train", "--out", s(out), "--train", s(train), "--val", s(val), "--seed", "5"];
    args.extend_from_slice(SMALL_TRAIN);
    args.extend_from_slice(extra);
    run(&args)
}

/// Relative path -> contents of every file below `dir`.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn exactly_one_run_record(dir: &Path) -> RunRecord {
    let records = tree(dir)
        .keys()
        .filter(|p| p.file_name().unwrap() == RUN_RECORD_FILE)
        .count();
    assert_eq!(records, 1, "{}", dir.display());
    RunRecord::read(dir).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "7", &[]);
    synth(&b, "7", &[]);
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    let ra = ta.remove(Path::new(RUN_RECORD_FILE)).unwrap();
    let rb = tb.remove(Path::new(RUN_RECORD_FILE)).unwrap();
    assert_eq!(ta, tb);
    let (ra, rb): (serde_json::Value, serde_json::Value) =
        (serde_json::from_slice(&ra).unwrap(), serde_json::from_slice(&rb).unwrap());
    assert_eq!(ra["config_hash"], rb["config_hash"]);
    assert_eq!(ra["seed"], 7);

    let c = tmp.path().join("c");
    synth(&c, "8", &[]);
    assert_ne!(tree(&c).get(Path::new(MANIFEST_FILE)), ta.get(Path::new(MANIFEST_FILE)));
}

#[test]
fn invalid_rate_exits_2_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_octscreen"))
        .args(["synth", "--vf-missing-rate", "1.5", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--vf-missing-rate"), "{err}");
    assert!(!tmp.path().join(MANIFEST_FILE).exists());

    assert_eq!(run(&["synth", "--n-patients", "abc", "--out", s(tmp.path())]), EXIT_VALIDATION);
    assert_eq!(run(&["synth", "--config", "/nonexistent/cfg", "--out", s(tmp.path())]), 3);
    assert_eq!(run(&["frobnicate"]), EXIT_VALIDATION);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.cfg");
    std::fs::write(&cfg, "n_patients = 3\nbscans_per_volume = 3\nheight = 16\nwidth = 8\n").unwrap();
    let out = tmp.path().join("d");
    let code = run(&["synth", "--config", s(&cfg), "--n-patients", "4", "--out", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let m = load_manifest(&out.join(MANIFEST_FILE)).unwrap();
    let patients: std::collections::BTreeSet<_> =
        m.records.iter().map(|r| r.patient_id.clone()).collect();
    assert_eq!(patients.len(), 4);
    assert!(m.records.iter().all(|r| r.bscan_count == 3));
}

#[test]
fn default_synth_output_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(run(&["synth", "--out", s(&out)]), EXIT_OK);
    let full = load_manifest(&out.join(MANIFEST_FILE)).unwrap();
    let mut split_total = 0;
    for f in [TRAIN_FILE, VAL_FILE, TEST_FILE] {
        let m = load_manifest(&out.join(f)).unwrap();
        let vols = octscreen::data_model::load_volumes(&m).unwrap();
        assert_eq!(vols.len(), m.len());
        split_total += m.len();
    }
    assert_eq!(split_total, full.len());
    assert!(full.records.iter().all(|r| r.data_path.exists()));
    let rec = exactly_one_run_record(&out);
    assert_eq!(rec.command, "synth");
    assert!(rec.outputs.iter().any(|p| p.ends_with(MANIFEST_FILE)));
}

#[test]
fn embed_cache_is_keyed_by_checkpoint_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1", &[]);
    let out = tmp.path().join("embed");
    let train = data.join(TRAIN_FILE);
    let val = data.join(VAL_FILE);

    let first = embed_pipeline(&out, &train, &val, "1");
    assert!(!first.reused_checkpoint && !first.reused_features);
    let features = std::fs::read(&first.features).unwrap();
    let second = embed_pipeline(&out, &train, &val, "1");
    assert!(second.reused_checkpoint && second.reused_features);
    assert_eq!(second.checkpoint_hash, first.checkpoint_hash);
    assert_eq!(std::fs::read(&second.features).unwrap(), features);

    // a different seed retrains, which changes the hash the cache is keyed by
    let third = embed_pipeline(&out, &train, &val, "2");
    assert!(!third.reused_checkpoint && !third.reused_features);
    assert_ne!(third.checkpoint_hash, first.checkpoint_hash);
    let (hash, cached) = read_feature_cache(&third.features).unwrap();
    assert_eq!(hash, third.checkpoint_hash);
    assert_eq!(cached.len(), load_manifest(&train).unwrap().len());
    let rec = exactly_one_run_record(&out);
    assert_eq!(rec.seed, Some(2));
    assert!(rec.inputs.keys().any(|p| p.ends_with(TRAIN_FILE)));
    assert_eq!(embed(&out, &data, &["--seed", "2"]), EXIT_OK);
}

fn embed_pipeline(out: &Path, train: &Path, val: &Path, seed: &str) -> EmbedOutput {
    let mut kv = octscreen::config::KvConfig::new();
    for pair in SMALL_EMBED.chunks(2) {
        kv.set(&pair[0][2..].replace('-', "_"), pair[1]);
    }
    kv.set("seed", seed);
    octscreen_cli::pipeline::embed(out, train, Some(val), &kv).unwrap()
}

#[test]
fn embed_rejects_single_class_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2", &[]);
    let m = load_manifest(&data.join(TRAIN_FILE)).unwrap();
    let glaucoma = DatasetManifest::new(
        m.records.into_iter().filter(|r| r.class_label.is_glaucoma()).collect(),
        m.split_tag,
    );
    let path = tmp.path().join("one_class.csv");
    write_manifest(&path, &glaucoma).unwrap();
    let out = tmp.path().join("embed");
    let mut args = vec!["embed", "--out", s(&out), "--train", s(&path)];
    args.extend_from_slice(SMALL_EMBED);
    assert_eq!(run(&args), EXIT_VALIDATION);
}

#[test]
fn label_train_eval_cam_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3", &["--vf-missing-rate", "0.4"]);
    let emb = tmp.path().join("embed");
    assert_eq!(embed(&emb, &data, &["--seed", "3"]), EXIT_OK);
    let val = data.join(VAL_FILE);

    // semt needs surrogate labels first
    let semt = tmp.path().join("semt");
    assert_eq!(train(&semt, &data.join(TRAIN_FILE), &val, &["--mode", "semt"]), EXIT_VALIDATION);

    let lab = tmp.path().join("label");
    let features = emb.join(FEATURES_FILE);
    let code = run(&["label", "--out", s(&lab), "--features", s(&features), "--manifest", s(&data.join(TRAIN_FILE))]);
    assert_eq!(code, EXIT_OK);
    let labeled = load_manifest(&lab.join(LABELED_FILE)).unwrap();
    assert!(labeled.records.iter().all(|r| r.vf.is_some()));
    let log = read_assignment_log(&lab.join(ASSIGNMENTS_FILE)).unwrap();
    let n_surrogate = labeled
        .records
        .iter()
        .filter(|r| r.vf_provenance == VfProvenance::Surrogate)
        .count();
    assert!(n_surrogate > 0);
    assert_eq!(log.len(), n_surrogate);
    // logged distances against a direct recomputation from the cache
    let (_, cache) = read_feature_cache(&features).unwrap();
    let vec_of = |id: &str| &cache.iter().find(|e| e.volume_id == id).unwrap().vector;
    for a in &log {
        let d = euclidean_distance(vec_of(&a.recipient_id), vec_of(&a.donor_id)).unwrap();
        assert!((d - a.distance).abs() <= 1e-8 * d.max(1.0), "{a:?} vs {d}");
    }
    exactly_one_run_record(&lab);

    let labeled_path = lab.join(LABELED_FILE);
    assert_eq!(train(&semt, &labeled_path, &val, &["--mode", "semt"]), EXIT_OK);
    let model = semt.join(MODEL_FILE);
    assert!(model.exists());
    exactly_one_run_record(&semt);

    // resume continues the epoch numbering
    let epochs = |dir: &Path| -> Vec<u64> {
        std::fs::read_to_string(dir.join(LOG_FILE))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
            .collect()
    };
    let before = epochs(&semt);
    assert_eq!(before.len(), 2);
    assert_eq!(train(&semt, &labeled_path, &val, &["--mode", "semt", "--epochs", "4", "--resume"]), EXIT_OK);
    let after = epochs(&semt);
    let first = after[0];
    assert_eq!(after, (first..first + 4).collect::<Vec<_>>());
    assert_eq!(after[..2], before[..]);
    // changing anything but the epoch budget is refused
    let code = train(&semt, &labeled_path, &val, &["--mode", "semt", "--epochs", "5", "--lr", "0.5", "--resume"]);
    assert_eq!(code, EXIT_VALIDATION);
    let fresh = tmp.path().join("fresh");
    assert_eq!(train(&fresh, &labeled_path, &val, &["--resume"]), EXIT_VALIDATION);

    // eval
    let ev = tmp.path().join("eval");
    let test = data.join(TEST_FILE);
    assert_eq!(run(&["eval", "--out", s(&ev), "--test", s(&test), "--model", s(&model)]), EXIT_OK);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join(METRICS_FILE)).unwrap()).unwrap();
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&report), ["case_level", "counts", "image_level", "vf_mae"]);
    for level in ["image_level", "case_level"] {
        assert_eq!(keys(&report[level]), ["accuracy", "auc", "f1", "n"]);
    }
    assert_eq!(
        keys(&report["counts"]),
        ["glaucoma_cases", "glaucoma_volumes", "normal_cases", "normal_volumes"]
    );
    let test_m = load_manifest(&test).unwrap();
    assert_eq!(report["image_level"]["n"].as_u64().unwrap() as usize, test_m.len());
    let preds = std::fs::read_to_string(ev.join(PREDICTIONS_FILE)).unwrap();
    assert_eq!(preds.lines().count(), test_m.len() + 1);
    let rec = exactly_one_run_record(&ev);
    assert_eq!(rec.command, "eval");

    // eval on an empty test split
    let empty = tmp.path().join("empty.csv");
    write_manifest(&empty, &DatasetManifest::new(Vec::new(), test_m.split_tag)).unwrap();
    let ev2 = tmp.path().join("eval_empty");
    assert_eq!(run(&["eval", "--out", s(&ev2), "--test", s(&empty), "--model", s(&model)]), EXIT_VALIDATION);

    // cam
    let cam = tmp.path().join("cam");
    let vid = test_m.records[0].volume_id.clone();
    let code = run(&["cam", "--out", s(&cam), "--model", s(&model), "--manifest", s(&test), "--volume-id", &vid]);
    assert_eq!(code, EXIT_OK);
    let pngs: Vec<_> = tree(&cam)
        .into_keys()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(pngs.len(), 2);
    for p in &pngs {
        let img = image::open(cam.join(p)).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
    }
    exactly_one_run_record(&cam);
    let code = run(&["cam", "--out", s(&cam), "--model", s(&model), "--manifest", s(&test), "--volume-id", "nope"]);
    assert_eq!(code, EXIT_VALIDATION);
    let code = run(&["cam", "--out", s(&cam), "--model", s(&model), "--manifest", s(&test), "--volume-id", &vid, "--center", "0"]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn label_without_missing_vf_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4", &["--vf-missing-rate", "0"]);
    let emb = tmp.path().join("embed");
    assert_eq!(embed(&emb, &data, &[]), EXIT_OK);
    let lab = tmp.path().join("label");
    let train_path = data.join(TRAIN_FILE);
    let code = run(&["label", "--out", s(&lab), "--features", s(&emb.join(FEATURES_FILE)), "--manifest", s(&train_path)]);
    assert_eq!(code, EXIT_OK);
    assert!(read_assignment_log(&lab.join(ASSIGNMENTS_FILE)).unwrap().is_empty());
    let before = load_manifest(&train_path).unwrap();
    let after = load_manifest(&lab.join(LABELED_FILE)).unwrap();
    assert_eq!(before, after);
}
