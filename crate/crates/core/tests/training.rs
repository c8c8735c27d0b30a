mod support;

use coastcast::data::{ScalerParams, WindowSpec};
use coastcast::models::{Architecture, ModelConfig, ModelGraph};
use coastcast::nn::Mode;
use coastcast::training::{
    batch_gradients, evaluate_mse, history_csv, train, Checkpoint, Dataset, TensorDataset, TrainConfig,
};
use coastcast::{Error, Tensor};
use proptest::prelude::*;
use support::{rng, uniform};

fn tiny(arch: Architecture) -> ModelConfig {
    let mut c = ModelConfig::new(arch).with_filters(2).with_grid(8, 8);
    c.depth = 2;
    c.lags = 4;
    c.variables = 2;
    c
}

fn dataset(n: usize, seed: u64) -> TensorDataset {
    let mut r = rng(seed);
    TensorDataset::new(
        uniform(&[n, 4, 8, 8, 2], &mut r, 0.1, 1.0),
        uniform(&[n, 1, 8, 8, 2], &mut r, 0.1, 1.0),
    )
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        epochs,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn trained(arch: Architecture) -> ModelGraph<f32> {
    let mut m = ModelGraph::build(tiny(arch)).unwrap();
    let d = dataset(4, 1);
    train(&mut m, &d, &d, &quick(2), |_| {}).unwrap();
    m
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Architecture::ALL {
        let m = trained(arch);
        let mut ck = Checkpoint::from_model(&m, 2, 0.125);
        ck.scaler = Some(ScalerParams {
            min: vec![-1.5, 0.25],
            max: vec![2.0, 35.0],
        });
        ck.window = Some(WindowSpec::new(4, 3).unwrap());
        let path = dir.path().join(format!("{arch}.ckpt"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.scaler, ck.scaler);
        assert_eq!(back.window, ck.window);
        for (store, saved) in [(&back.params, &ck.params), (&back.buffers, &ck.buffers)] {
            assert!(store.names().eq(saved.names()));
            for ((_, a), (_, b)) in store.iter().zip(saved.iter()) {
                assert!(a.bitwise_eq(b));
            }
        }
        let x = uniform(&[2, 4, 8, 8, 2], &mut rng(3), 0.0, 1.0);
        let y0 = m.forward(&x, Mode::Eval, 0).unwrap();
        let y1 = back.to_model().unwrap().forward(&x, Mode::Eval, 0).unwrap();
        assert!(y0.bitwise_eq(&y1), "{arch}");
    }
}

#[test]
fn residual_checkpoint_carries_running_stats() {
    let m = trained(Architecture::Residual);
    assert!(!m.buffers.is_empty());
    let moved = m
        .buffers
        .iter()
        .filter(|(n, _)| n.ends_with("running_mean"))
        .any(|(_, t)| t.data().iter().any(|&v| v != 0.0));
    assert!(moved);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&ModelGraph::build(tiny(Architecture::Residual)).unwrap(), 0, 1.0)
        .save(&path)
        .unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let load = |b: &[u8]| {
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b).unwrap();
        Checkpoint::load(&p)
    };

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(load(&magic), Err(Error::Format(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(load(&version), Err(Error::Format(_))));
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(load(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(load(&long), Err(Error::Format(_))));
    assert!(matches!(
        Checkpoint::load(dir.path().join("absent.ckpt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn mismatched_tensors_are_rejected() {
    let m = ModelGraph::build(tiny(Architecture::Plain)).unwrap();
    let mut ck = Checkpoint::from_model(&m, 0, 1.0);
    ck.config = ck.config.with_filters(3);
    assert!(matches!(ck.to_model(), Err(Error::Format(_))));
}

#[test]
fn training_is_deterministic() {
    let d = dataset(5, 2);
    let run = || {
        let mut m = ModelGraph::build(tiny(Architecture::InceptionResidual)).unwrap();
        let out = train(&mut m, &d, &d, &quick(3), |_| {}).unwrap();
        (out.history, m)
    };
    let (h0, m0) = run();
    let (h1, m1) = run();
    assert_eq!(h0, h1);
    for ((_, a), (_, b)) in m0.params.iter().zip(m1.params.iter()) {
        assert!(a.bitwise_eq(b));
    }
}

#[test]
fn best_checkpoint_has_lowest_validation_loss() {
    let tr = dataset(6, 3);
    let val = dataset(3, 4);
    let mut m = ModelGraph::build(tiny(Architecture::Plain)).unwrap();
    let out = train(&mut m, &tr, &val, &quick(6), |_| {}).unwrap();
    assert_eq!(out.history.len(), 6);
    assert!(out.history.iter().all(|r| out.best.val_loss <= r.val_mse));
    let rec = &out.history[out.best.epoch - 1];
    assert_eq!(rec.val_mse, out.best.val_loss);
    let again = evaluate_mse(&out.best.to_model().unwrap(), &val, 2).unwrap();
    assert_eq!(again, out.best.val_loss);
    let csv = history_csv(&out.history);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("epoch,train_mse,val_mse\n"));
}

#[test]
fn training_reduces_loss() {
    // Persistence target: the last input frame.
    let mut d = dataset(4, 5);
    let frame = 8 * 8 * 2;
    let targets: Vec<f32> = d.inputs.data().chunks(4 * frame).flat_map(|s| s[3 * frame..].to_vec()).collect();
    d.targets = Tensor::new(&[4, 1, 8, 8, 2], targets).unwrap();
    let mut c = tiny(Architecture::Plain);
    c.dropout = 0.0;
    let mut m = ModelGraph::build(c).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 150,
        learning_rate: 3e-3,
        ..quick(0)
    };
    let out = train(&mut m, &d, &d, &cfg, |_| {}).unwrap();
    let (first, last) = (out.history[0].val_mse, out.history.last().unwrap().val_mse);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn stop_below_ends_early() {
    let d = dataset(2, 6);
    let mut m = ModelGraph::build(tiny(Architecture::Plain)).unwrap();
    let cfg = TrainConfig {
        stop_below: Some(f64::INFINITY),
        ..quick(50)
    };
    let out = train(&mut m, &d, &d, &cfg, |_| {}).unwrap();
    assert_eq!(out.history.len(), 1);
}

#[test]
fn non_finite_loss_aborts() {
    let mut d = dataset(4, 7);
    d.inputs.data_mut()[5] = f32::NAN;
    let mut m = ModelGraph::build(tiny(Architecture::Plain)).unwrap();
    let cfg = TrainConfig {
        shuffle: false,
        ..quick(3)
    };
    let err = train(&mut m, &d, &d, &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }), "{err}");
}

struct Empty;

impl Dataset for Empty {
    fn len(&self) -> usize {
        0
    }

    fn batch(&self, _: &[usize]) -> coastcast::Result<(Tensor<f32>, Tensor<f32>)> {
        unreachable!()
    }
}

#[test]
fn empty_sets_and_bad_config() {
    let d = dataset(2, 8);
    let empty = Empty;
    let mut m = ModelGraph::build(tiny(Architecture::Plain)).unwrap();
    assert!(matches!(train(&mut m, &empty, &d, &quick(1), |_| {}), Err(Error::Data(_))));
    assert!(matches!(train(&mut m, &d, &empty, &quick(1), |_| {}), Err(Error::Data(_))));
    assert!(matches!(evaluate_mse(&m, &empty, 2), Err(Error::Data(_))));
    let zero_batch = TrainConfig {
        batch_size: 0,
        ..quick(1)
    };
    assert!(matches!(train(&mut m, &d, &d, &zero_batch, |_| {}), Err(Error::Config(_))));
    let no_epochs = quick(0);
    assert!(train(&mut m, &d, &d, &no_epochs, |_| {}).is_err());
}

#[test]
fn batch_loss_matches_eval_mse_without_dropout() {
    let mut c = tiny(Architecture::Plain);
    c.dropout = 0.0;
    let m = ModelGraph::build(c).unwrap();
    let d = dataset(3, 9);
    let (x, y) = d.batch(&[0, 1, 2]).unwrap();
    let step = batch_gradients(&m, x, &y, 0).unwrap();
    let eval = evaluate_mse(&m, &d, 3).unwrap();
    assert!((step.loss - eval).abs() < 1e-6 * eval);
    assert!(step.grads.names().eq(m.params.names()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn eval_mse_ignores_batching_and_order(perm_seed in 0u64..1000, bs in 1usize..6) {
        use rand::seq::SliceRandom;
        let m = ModelGraph::build(tiny(Architecture::Plain)).unwrap();
        let d = dataset(5, 10);
        let base = evaluate_mse(&m, &d, 5).unwrap();
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut rng(perm_seed));
        let (x, y) = d.batch(&order).unwrap();
        let shuffled = TensorDataset::new(x, y).unwrap();
        let other = evaluate_mse(&m, &shuffled, bs).unwrap();
        prop_assert!((base - other).abs() <= 1e-12 + 1e-9 * base);
    }
}
