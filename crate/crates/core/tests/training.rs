use std::collections::BTreeMap;

use cadnet::data::{make_toy_dataset, MlrDataset, ToyOptions};
use cadnet::eval::{evaluate, EvalOptions};
use cadnet::model::CadNet;
use cadnet::nn::Mode;
use cadnet::train::{
    feature_disc_step, forward_streams, image_disc_step, main_losses, main_step, telemetry_csv, train, Ablation,
    Checkpoint, StepReport, TrainConfig, Trainer,
};
use cadnet::{sgd_step, SgdConfig};

fn toy(ids: usize, per_id: usize, seed: u64) -> MlrDataset {
    make_toy_dataset(&ToyOptions::new(ids, per_id, (32, 16), seed)).unwrap()
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        identities_per_batch: 3,
        samples_per_identity: 2,
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn snapshot(model: &CadNet, prefix: &str) -> Vec<(String, Vec<f32>)> {
    model.snapshot().into_iter().filter(|(n, _)| n.starts_with(prefix)).collect()
}

fn grads(model: &CadNet, prefix: &str) -> Vec<Option<Vec<f32>>> {
    model
        .params()
        .into_iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| p.value.grad())
        .collect()
}

fn any_nonzero(g: &[Option<Vec<f32>>]) -> bool {
    g.iter().flatten().any(|v| v.iter().any(|&x| x != 0.0))
}

fn all_zero(g: &[Option<Vec<f32>>]) -> bool {
    g.iter().flatten().all(|v| v.iter().all(|&x| x == 0.0))
}

const MAIN: [&str; 4] = ["E.", "G.", "F.", "C."];
const DISC: [&str; 2] = ["DF.", "DI."];

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = toy(4, 2, 1);
    let (a, rows_a) = train(&ds, config(2, 9)).unwrap();
    let (b, rows_b) = train(&ds, config(2, 9)).unwrap();
    assert_eq!(telemetry_csv(&rows_a), telemetry_csv(&rows_b));
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());

    let (c, _) = train(&ds, config(2, 10)).unwrap();
    assert_ne!(a.checkpoint().to_bytes().unwrap(), c.checkpoint().to_bytes().unwrap());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let ds = toy(4, 2, 2);
    let (full, full_rows) = train(&ds, config(3, 4)).unwrap();

    let (first, first_rows) = train(&ds, config(1, 4)).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(restored.to_bytes().unwrap(), bytes);
    let mut resumed = Trainer::resume(&restored, &ds).unwrap();
    resumed.config.epochs = 3;
    let rest = resumed.run(&ds, |_| {}).unwrap();

    let stitched: Vec<_> = first_rows.into_iter().chain(rest).collect();
    assert_eq!(telemetry_csv(&stitched), telemetry_csv(&full_rows));
    assert_eq!(
        resumed.checkpoint().to_bytes().unwrap(),
        full.checkpoint().to_bytes().unwrap()
    );

    // the next step after either path is the same
    let batch = full.epoch_batches(&ds).unwrap().remove(0);
    let mut a = Trainer::resume(&full.checkpoint(), &ds).unwrap();
    let mut b = Trainer::resume(&resumed.checkpoint(), &ds).unwrap();
    assert_eq!(a.step(&batch).unwrap(), b.step(&batch).unwrap());
}

#[test]
fn telemetry_matches_recomputation_from_checkpoint() {
    // 6 train images and a 3x2 batch: one step per epoch, so the epoch row
    // is that step's report
    let ds = toy(3, 2, 3);
    let mut trainer = Trainer::new(config(2, 5), &ds).unwrap();
    trainer.run_epoch(&ds).unwrap();
    assert_eq!(trainer.batches_per_epoch(&ds), 1);
    let before = Checkpoint::from_bytes(&trainer.checkpoint().to_bytes().unwrap()).unwrap();
    let batch = trainer.epoch_batches(&ds).unwrap().remove(0);
    let row = trainer.run_epoch(&ds).unwrap();

    let mut model = before.build_model().unwrap();
    let classes: BTreeMap<usize, usize> = ds.train_identities();
    let cfg = &before.config;
    let streams = forward_streams(&model, &batch, &classes).unwrap();
    let adv_f_d = feature_disc_step(&mut model, &streams, cfg).unwrap();
    let adv_i_d = image_disc_step(&mut model, &streams, cfg).unwrap();
    let losses = main_losses(&model, &streams, cfg).unwrap();
    let v = |t: &Option<cadnet::Tensor>| t.as_ref().map_or(0.0, |t| t.item());
    let recomputed = StepReport {
        id: v(&losses.id),
        tri: v(&losses.tri),
        rec: v(&losses.rec),
        adv_f_d,
        adv_f_g: v(&losses.adv_f_g),
        adv_i_d,
        adv_i_g: v(&losses.adv_i_g),
        total: v(&losses.total),
    };
    let pairs = [
        (row.losses.id, recomputed.id),
        (row.losses.tri, recomputed.tri),
        (row.losses.rec, recomputed.rec),
        (row.losses.adv_f_d, recomputed.adv_f_d),
        (row.losses.adv_f_g, recomputed.adv_f_g),
        (row.losses.adv_i_d, recomputed.adv_i_d),
        (row.losses.adv_i_g, recomputed.adv_i_g),
        (row.losses.total, recomputed.total),
    ];
    for (i, (logged, again)) in pairs.into_iter().enumerate() {
        assert!((logged - again).abs() <= 1e-5, "term {i}: {logged} vs {again}");
    }
}

#[test]
fn each_phase_touches_only_its_parameters() {
    let ds = toy(3, 2, 4);
    let trainer = Trainer::new(config(1, 6), &ds).unwrap();
    let batch = trainer.epoch_batches(&ds).unwrap().remove(0);
    let classes = ds.train_identities();
    let cfg = trainer.config.clone();
    let mut model = trainer.model;
    let streams = forward_streams(&model, &batch, &classes).unwrap();

    let all = |m: &CadNet| MAIN.iter().chain(&DISC).map(|p| (*p, snapshot(m, p))).collect::<Vec<_>>();
    let changed = |before: &[(&str, Vec<(String, Vec<f32>)>)], m: &CadNet| -> Vec<&'static str> {
        MAIN.iter()
            .chain(&DISC)
            .zip(before)
            .filter(|(p, (_, snap))| snapshot(m, p) != *snap)
            .map(|(p, _)| *p)
            .collect()
    };

    let s0 = all(&model);
    feature_disc_step(&mut model, &streams, &cfg).unwrap();
    assert_eq!(changed(&s0, &model), vec!["DF."]);
    assert!(any_nonzero(&grads(&model, "DF.")));
    for p in MAIN {
        assert!(all_zero(&grads(&model, p)), "{p} received a gradient from the D_F step");
    }

    let s1 = all(&model);
    image_disc_step(&mut model, &streams, &cfg).unwrap();
    assert_eq!(changed(&s1, &model), vec!["DI."]);
    assert!(any_nonzero(&grads(&model, "DI.")));
    for p in MAIN {
        assert!(all_zero(&grads(&model, p)), "{p} received a gradient from the D_I step");
    }

    let s2 = all(&model);
    main_step(&mut model, &streams, &cfg).unwrap();
    assert_eq!(changed(&s2, &model), MAIN.to_vec());
    for p in ["E.", "G."] {
        assert!(any_nonzero(&grads(&model, p)), "{p} got no gradient from the main step");
    }
    for p in DISC {
        assert!(all_zero(&grads(&model, p)), "{p} received a gradient from the main step");
    }
}

#[test]
fn zero_adversarial_weights_never_run_the_discriminators() {
    // poisoned discriminators: any forward through them would make a loss NaN
    let ds = toy(3, 2, 5);
    let cfg = TrainConfig {
        lambda_adv_feature: 0.0,
        lambda_adv_image: 0.0,
        ..config(2, 7)
    };
    let mut trainer = Trainer::new(cfg, &ds).unwrap();
    for p in trainer.model.params() {
        if DISC.iter().any(|d| p.name.starts_with(d)) {
            p.set_data(&vec![f32::NAN; p.value.numel()]);
        }
    }
    let rows = trainer.run(&ds, |_| {}).unwrap();
    for r in &rows {
        assert!(r.losses.total.is_finite());
        assert_eq!((r.losses.adv_f_d, r.losses.adv_f_g, r.losses.adv_i_d, r.losses.adv_i_g), (0.0, 0.0, 0.0, 0.0));
    }
    for p in trainer.model.params() {
        if DISC.iter().any(|d| p.name.starts_with(d)) {
            assert!(p.value.grad().is_none(), "{} has a gradient", p.name);
        }
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let ds = toy(3, 2, 6);
    let mut trainer = Trainer::new(config(1, 8), &ds).unwrap();
    for p in trainer.model.params() {
        if p.name.starts_with("C.") {
            p.set_data(&vec![f32::NAN; p.value.numel()]);
        }
    }
    let err = trainer.run(&ds, |_| {}).unwrap_err().to_string();
    assert!(err.contains("L_id"), "{err}");
}

#[test]
fn reconstruction_only_run_decreases() {
    // 2 identities x 2 images = 4 train images, one 2x2 batch per epoch
    let ds = toy(2, 2, 7);
    let cfg = TrainConfig {
        identities_per_batch: 2,
        samples_per_identity: 2,
        epochs: 20,
        seed: 3,
        lambda_adv_feature: 0.0,
        lambda_adv_image: 0.0,
        ablation: Ablation {
            no_cls: true,
            ..Ablation::default()
        },
        ..TrainConfig::default()
    };
    let (_, rows) = train(&ds, cfg).unwrap();
    let rec: Vec<f32> = rows.iter().map(|r| r.losses.rec).collect();
    let rises = rec.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "{rec:?}");
    assert!(rec[19] < rec[0], "{rec:?}");
    assert!(rows.iter().all(|r| r.losses.id == 0.0 && r.losses.tri == 0.0));
}

#[test]
fn decoder_can_overfit_one_image() {
    let ds = toy(2, 2, 8);
    let trainer = Trainer::new(config(1, 1), &ds).unwrap();
    let mut model = trainer.model;
    let x = cadnet::data::images_to_tensor(&[&ds.train[0].pixels]).unwrap();
    let sgd = SgdConfig::new(0.05, 0.9, 0.0).unwrap();
    let mut last = f32::INFINITY;
    for _ in 0..500 {
        let encoded = model.encode(&x, Mode::Train).unwrap();
        let loss = model.decode(&encoded, Mode::Train).unwrap().sub(&x).unwrap().l1_mean();
        last = loss.item();
        model.zero_grad();
        loss.backward().unwrap();
        let params = model.encoder.params_mut().into_iter().chain(model.decoder.params_mut());
        sgd_step(params, &sgd).unwrap();
    }
    let rec = model.recover(&[&ds.train[0].pixels]).unwrap();
    let err = rec.sub(&x).unwrap().l1_mean().item();
    assert!(err < 0.05, "mean |G(E(x)) - x| = {err} (last training loss {last})");
}

#[test]
fn untrained_model_is_at_chance_without_identity_signal() {
    // Queries come from a toy set with different identity appearances but
    // the same labels, so nothing ties them to the gallery.
    let gallery_side = toy(20, 4, 10);
    let unrelated = toy(20, 4, 11);
    let ds = MlrDataset {
        queries: unrelated.queries.clone(),
        references: unrelated.references.clone(),
        ..gallery_side
    };
    let trainer = Trainer::new(config(1, 2), &ds).unwrap();
    let opts = EvalOptions {
        rates: vec![2, 3, 4],
        trials: 10,
        seed: 3,
    };
    let report = evaluate(&trainer.model, &ds, &opts).unwrap();
    let n = (ds.references.len() * 3 * opts.trials) as f64;
    let p = 1.0 / 20.0;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((report.rank1 - p).abs() <= 3.0 * sigma + 0.02, "rank-1 {} vs chance {p}", report.rank1);
}

#[test]
fn evaluation_is_deterministic() {
    let ds = toy(4, 2, 12);
    let trainer = Trainer::new(config(1, 3), &ds).unwrap();
    let opts = EvalOptions {
        rates: vec![2, 8],
        trials: 1,
        seed: 5,
    };
    let a = evaluate(&trainer.model, &ds, &opts).unwrap();
    let b = evaluate(&trainer.model, &ds, &opts).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert!(a.cmc.windows(2).all(|w| w[0] <= w[1]));
    assert!((a.cmc.last().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn checkpoint_files_round_trip() {
    let ds = toy(3, 2, 13);
    let (trainer, _) = train(&ds, config(1, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cadnet");
    let ckpt = trainer.checkpoint();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    let model = back.build_model().unwrap();
    for ((n1, a), (n2, b)) in model.snapshot().iter().zip(trainer.model.snapshot().iter()) {
        assert_eq!(n1, n2);
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{n1}");
    }
}
