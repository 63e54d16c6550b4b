use ndarray::Array3;
use octscreen::data_model::{
    generate_synthetic_dataset, make_bscan_triplets, DatasetManifest, SyntheticSpec,
    VfProvenance, Volume,
};
use octscreen::mtl_model::{forward, MtlArchitecture, MtlNetwork};
use octscreen::nn::TensorMap;
use octscreen::training::{
    continue_training, predict_volume, train_mtl, triplet_predictions, LabeledVolumes,
    TrainConfig, TrainMode, TrainState,
};
use octscreen::Error;

struct Data {
    train: DatasetManifest,
    train_v: Vec<Volume>,
    val: DatasetManifest,
    val_v: Vec<Volume>,
}

impl Data {
    fn new(seed: u64) -> Self {
        let spec = SyntheticSpec {
            n_patients: 10,
            bscans_per_volume: 5,
            height: 16,
            width: 16,
            seed,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let n_train = ds.manifest.len() * 2 / 3;
        let mut train = ds.manifest.clone();
        let val_records = train.records.split_off(n_train);
        let val = DatasetManifest::new(val_records, train.split_tag);
        let mut volumes = ds.volumes;
        let val_v = volumes.split_off(n_train);
        Data {
            train,
            train_v: volumes,
            val,
            val_v,
        }
    }

    fn train(&self) -> LabeledVolumes<'_> {
        LabeledVolumes::new(&self.train, &self.train_v).unwrap()
    }

    fn val(&self) -> LabeledVolumes<'_> {
        LabeledVolumes::new(&self.val, &self.val_v).unwrap()
    }
}

fn config(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        batch_size: 8,
        triplets_per_volume: 2,
        arch: MtlArchitecture {
            stem_width: 4,
            block_widths: vec![6, 8],
            reg_width: 4,
        },
        seed: 3,
        ..TrainConfig::default()
    }
}

fn params(net: &MtlNetwork) -> TensorMap {
    TensorMap::from_module(net)
}

#[test]
fn identical_seeds_reproduce_logs_and_parameters() {
    let d = Data::new(1);
    let a = train_mtl(d.train(), d.val(), &config(TrainMode::Mt, 2)).unwrap();
    let b = train_mtl(d.train(), d.val(), &config(TrainMode::Mt, 2)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(params(&a.net), params(&b.net));
    assert_eq!(a.log.len(), 2);
}

#[test]
fn single_task_equals_mt_without_any_vf() {
    let d = Data::new(2);
    let single = train_mtl(d.train(), d.val(), &config(TrainMode::SingleTask, 2)).unwrap();
    let mut stripped = d.train.clone();
    for r in &mut stripped.records {
        r.vf = None;
        r.vf_provenance = VfProvenance::Absent;
    }
    let mt = train_mtl(
        LabeledVolumes::new(&stripped, &d.train_v).unwrap(),
        d.val(),
        &config(TrainMode::Mt, 2),
    )
    .unwrap();
    assert_eq!(single.log, mt.log);
    assert!(single.log.iter().all(|r| r.l_reg_vfi == 0.0 && r.l_reg_psd == 0.0));
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let d = Data::new(3);
    let cfg = config(TrainMode::Mt, 0);
    let run = train_mtl(d.train(), d.val(), &cfg).unwrap();
    assert!(run.log.is_empty());
    assert_eq!(params(&run.net), params(&MtlNetwork::new(cfg.arch.clone(), cfg.seed)));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let d = Data::new(4);
    let full = train_mtl(d.train(), d.val(), &config(TrainMode::Semt, 3)).unwrap_err();
    // semt refuses absent VF; give every volume a measurement first
    assert!(matches!(full, Error::Precondition(_)));

    let mut labeled = d.train.clone();
    let donor = labeled
        .records
        .iter()
        .find_map(|r| r.vf)
        .expect("some measured VF");
    for r in &mut labeled.records {
        if r.vf.is_none() {
            r.vf = Some(donor);
            r.vf_provenance = VfProvenance::Surrogate;
        }
    }
    let train = LabeledVolumes::new(&labeled, &d.train_v).unwrap();
    let cfg3 = config(TrainMode::Semt, 3);
    let full = train_mtl(train, d.val(), &cfg3).unwrap();

    let first = train_mtl(train, d.val(), &config(TrainMode::Semt, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (state_path, log_path) = (dir.path().join("state.ckpt"), dir.path().join("log.jsonl"));
    first.state.save(&state_path, &log_path, &cfg3).unwrap();
    let (state, saved_cfg) = TrainState::load(&state_path, &log_path).unwrap();
    assert_eq!(saved_cfg, cfg3);
    assert_eq!(state.next_epoch, 1);
    let resumed = continue_training(state, train, d.val(), &cfg3, |_| Ok(())).unwrap();
    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.log[1].epoch, 1);
    assert_eq!(params(&resumed.net), params(&full.net));
    assert_eq!(params(&resumed.state.net), params(&full.state.net));
}

#[test]
fn selected_parameters_achieve_the_best_logged_auc() {
    let d = Data::new(5);
    let run = train_mtl(d.train(), d.val(), &config(TrainMode::Mt, 3)).unwrap();
    let best = run
        .log
        .iter()
        .filter_map(|r| r.val_auc)
        .fold(f64::NEG_INFINITY, f64::max);
    let epoch = run.best_epoch.unwrap();
    assert_eq!(run.log[epoch].val_auc, Some(best));
    let probs: Vec<f64> = d
        .val_v
        .iter()
        .map(|v| predict_volume(&run.net, v).unwrap().probability)
        .collect();
    let labels: Vec<f64> = d.val.records.iter().map(|r| r.class_label.target()).collect();
    let auc = octscreen::evaluation::auc(&probs, &labels).unwrap();
    assert_eq!(auc, Some(best));
}

#[test]
fn empty_training_split_is_rejected() {
    let d = Data::new(6);
    let empty = DatasetManifest::new(Vec::new(), d.train.split_tag);
    let err = train_mtl(
        LabeledVolumes::new(&empty, &[]).unwrap(),
        d.val(),
        &config(TrainMode::Mt, 1),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn horizontal_flips_change_the_trajectory() {
    let d = Data::new(7);
    let plain = train_mtl(d.train(), d.val(), &config(TrainMode::Mt, 1)).unwrap();
    let mut cfg = config(TrainMode::Mt, 1);
    cfg.hflip = true;
    let flipped = train_mtl(d.train(), d.val(), &cfg).unwrap();
    assert_ne!(plain.log[0].l_cls, flipped.log[0].l_cls);
}

#[test]
fn volume_prediction_is_the_mean_over_enumerated_triplets() {
    let d = Data::new(8);
    let net = MtlNetwork::new(config(TrainMode::Mt, 0).arch, 11);
    for (r, v) in d.val.records.iter().zip(&d.val_v).take(4) {
        let triplets = make_bscan_triplets(&r.volume_id, v).unwrap();
        assert_eq!(triplets.len(), r.bscan_count - 2);
        let outs: Vec<_> = triplets.iter().map(|t| forward(&net, t).unwrap()).collect();
        let n = outs.len() as f64;
        let prob = outs.iter().map(|o| o.class_prob).sum::<f64>() / n;
        let vf: Vec<f64> = (0..3)
            .map(|j| outs.iter().map(|o| o.vf_pred[j]).sum::<f64>() / n)
            .collect();
        let p = predict_volume(&net, v).unwrap();
        assert_eq!(p.probability, prob);
        assert_eq!(p.vf_normalized.to_vec(), vf);
        assert!((p.vf.vfi - 100.0 * vf[0]).abs() < 1e-12);
        assert!((p.vf.md - (-35.0 + 40.0 * vf[1])).abs() < 1e-12);
    }
}

#[test]
fn constant_volume_gives_equal_triplet_probabilities() {
    let net = MtlNetwork::new(config(TrainMode::Mt, 0).arch, 12);
    let v = Volume::new(Array3::from_elem((6, 16, 16), 0.3f32));
    let preds = triplet_predictions(&net, &v).unwrap();
    assert_eq!(preds.len(), 4);
    assert!(preds.iter().all(|p| p == &preds[0]));
    assert_eq!(predict_volume(&net, &v).unwrap().probability, preds[0].0);
}

#[test]
fn too_small_volume_is_rejected() {
    let net = MtlNetwork::new(config(TrainMode::Mt, 0).arch, 12);
    let v = Volume::new(Array3::zeros((2, 16, 16)));
    assert!(predict_volume(&net, &v).is_err());
}

#[test]
fn separable_cohort_reaches_high_validation_auc_in_semt_mode() {
    let spec = SyntheticSpec {
        n_patients: 24,
        bscans_per_volume: 8,
        vf_missing_rate: 0.0,
        class_overlap: -0.1,
        seed: 21,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec).unwrap();
    let (train, val, _) =
        octscreen::data_model::split_by_patient(&ds.manifest, [0.6, 0.2, 0.2], 21).unwrap();
    let volumes_of = |m: &DatasetManifest| -> Vec<Volume> {
        m.records
            .iter()
            .map(|r| {
                let i = ds.manifest.records.iter().position(|x| x.volume_id == r.volume_id).unwrap();
                ds.volumes[i].clone()
            })
            .collect()
    };
    let (train_v, val_v) = (volumes_of(&train), volumes_of(&val));
    let cfg = TrainConfig {
        mode: TrainMode::Semt,
        epochs: 6,
        seed: 21,
        ..TrainConfig::default()
    };
    let run = train_mtl(
        LabeledVolumes::new(&train, &train_v).unwrap(),
        LabeledVolumes::new(&val, &val_v).unwrap(),
        &cfg,
    )
    .unwrap();
    let last = run.log.last().unwrap().val_auc.unwrap();
    assert!(last >= 0.95, "final val AUC {last}");
}
