use std::fs;

use segkit::backbone::BackboneConfig;
use segkit::data::{generate_synthetic, SegmentationSample, SyntheticSpec};
use segkit::decoder::DecoderConfig;
use segkit::model::SegModel;
use segkit::trainer::{train_loop, Augment, Checkpoint, LogRecord, OptimState, TrainConfig};
use segkit::SegError;

fn data() -> Vec<SegmentationSample> {
    generate_synthetic(&SyntheticSpec {
        seed: 2,
        n_images: 4,
        height: 32,
        width: 32,
        n_cls: 5,
    })
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        iterations: 6,
        batch_size: 2,
        warmup_iters: 2,
        ..TrainConfig::default()
    }
}

fn fresh(seed: u64) -> (SegModel<f32>, OptimState<f32>) {
    let model = SegModel::new(BackboneConfig::micro(), DecoderConfig::default(), seed).unwrap();
    let optim = OptimState::new(config().optimizer, &model.params);
    (model, optim)
}

fn run(model: &mut SegModel<f32>, optim: &mut OptimState<f32>, start: usize, end: usize) -> Vec<LogRecord> {
    let aug = Augment {
        flip: true,
        crop: Some([32, 32]),
        ..Augment::default()
    };
    train_loop(model, optim, &data(), &config(), &aug, 7, start, end, |_| {}).unwrap()
}

fn params_of(model: &SegModel<f32>) -> Vec<Vec<f32>> {
    model.params.iter().map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn training_is_deterministic() {
    let (mut a, mut oa) = fresh(1);
    let (mut b, mut ob) = fresh(1);
    assert_eq!(run(&mut a, &mut oa, 0, 3), run(&mut b, &mut ob, 0, 3));
    assert_eq!(params_of(&a), params_of(&b));
}

#[test]
fn zero_iterations_leave_parameters_unchanged() {
    let (mut a, mut oa) = fresh(3);
    let before = params_of(&a);
    assert!(run(&mut a, &mut oa, 0, 0).is_empty());
    assert_eq!(params_of(&a), before);
    assert_eq!(oa.t, 0);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (mut a, mut oa) = fresh(4);
    let whole = run(&mut a, &mut oa, 0, 6);

    let (mut b, mut ob) = fresh(4);
    let mut split = run(&mut b, &mut ob, 0, 3);
    let path = dir.path().join("mid.bin");
    Checkpoint::capture(&b, Some(&ob), 3, 7).save(&path).unwrap();
    let ck = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(ck.manifest.iteration, 3);
    let mut c = ck.to_model().unwrap();
    let mut oc = ck.optim.unwrap();
    split.extend(run(&mut c, &mut oc, 3, 6));

    assert_eq!(whole, split);
    assert_eq!(params_of(&a), params_of(&c));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, mut o) = fresh(5);
    run(&mut m, &mut o, 0, 2);
    let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    Checkpoint::capture(&m, Some(&o), 2, 7).save(&p1).unwrap();
    Checkpoint::<f32>::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    let without = dir.path().join("c.bin");
    Checkpoint::capture(&m, None, 2, 7).save(&without).unwrap();
    let ck = Checkpoint::<f32>::load(&without).unwrap();
    assert!(ck.optim.is_none());
    assert_eq!(params_of(&ck.to_model().unwrap()), params_of(&m));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = fresh(6);
    let path = dir.path().join("ok.bin");
    Checkpoint::capture(&m, None, 0, 0).save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let cases: [(&str, Vec<u8>); 3] = [
        ("truncated", bytes[..bytes.len() - 5].to_vec()),
        ("trailing", [bytes.as_slice(), &[0u8; 3]].concat()),
        ("magic", [b"NOTSEGKT".as_slice(), &bytes[8..]].concat()),
    ];
    for (name, data) in cases {
        let p = dir.path().join(format!("{name}.bin"));
        fs::write(&p, data).unwrap();
        let err = Checkpoint::<f32>::load(&p).unwrap_err();
        assert!(matches!(err, SegError::Checkpoint(_)), "{name}: {err}");
    }
    assert!(matches!(
        Checkpoint::<f64>::load(&path).unwrap_err(),
        SegError::Checkpoint(_)
    ));
}

#[test]
fn mismatched_architecture_names_the_fields() {
    let (m, _) = fresh(8);
    let ck = Checkpoint::capture(&m, None, 0, 0);
    ck.verify(&BackboneConfig::micro(), &DecoderConfig::default()).unwrap();
    let mut bb = BackboneConfig::micro();
    bb.heads[2] = 2;
    let dec = DecoderConfig {
        hidden: 16,
        zir_enabled: false,
        ..DecoderConfig::default()
    };
    match ck.verify(&bb, &dec).unwrap_err() {
        SegError::DigestMismatch { fields, .. } => {
            for f in ["backbone.heads", "decoder.hidden", "decoder.zir_enabled"] {
                assert!(fields.contains(f), "{fields}");
            }
            assert!(!fields.contains("n_cls"), "{fields}");
        }
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn loss_falls_on_a_small_set() {
    let (mut m, mut o) = fresh(9);
    let cfg = TrainConfig {
        iterations: 40,
        batch_size: 4,
        warmup_iters: 0,
        schedule: segkit::trainer::LrSchedule::Constant,
        ..TrainConfig::default()
    };
    let records = train_loop(&mut m, &mut o, &data(), &cfg, &Augment::default(), 0, 0, 40, |_| {}).unwrap();
    let mean = |r: &[LogRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    assert!(mean(&records[30..]) < mean(&records[..10]));
}
