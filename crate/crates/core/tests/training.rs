//! Optimisation sanity checks on the desk model.

use qmamba_core::data::base_image;
use qmamba_core::model::{Preset, QMamba, QMambaConfig};
use qmamba_core::optim::{AdamW, AdamWConfig};
use qmamba_core::params::ParamStore;
use qmamba_core::scan2d::ScanMode;
use qmamba_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk() -> (QMamba, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = QMambaConfig::preset(Preset::Desk, ScanMode::Local);
    let model = QMamba::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (model, store)
}

/// Full-batch AdamW at a constant rate; returns the loss after every step.
fn fit(model: &QMamba, store: &mut ParamStore, data: &[(Tensor, f64)], steps: usize, lr: f64) -> Vec<f64> {
    let mut opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..AdamWConfig::default() }, store);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, true);
        let mut terms = Vec::new();
        for (img, target) in data {
            let x = tape.constant(img.clone());
            let pred = model.forward(&mut tape, &bind, x).unwrap();
            let t = tape.constant(Tensor::full(&[1, 1], *target));
            let d = tape.sub(pred, t).unwrap();
            terms.push(tape.mul(d, d).unwrap());
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t).unwrap();
        }
        let loss = tape.scale(total, 1.0 / data.len() as f64);
        let loss = tape.sum(loss);
        tape.backward(loss).unwrap();
        let grads = store.collect_grads(&tape, &bind);
        opt.update(store, &grads, lr);
        losses.push(tape.value(loss).item());
    }
    losses
}

/// Final squared error after the last update.
fn error_after(model: &QMamba, store: &ParamStore, data: &[(Tensor, f64)]) -> f64 {
    data.iter().map(|(img, t)| (model.predict(store, img).unwrap() - t).powi(2)).sum::<f64>() / data.len() as f64
}

#[test]
fn single_sample_overfit() {
    let (model, mut store) = desk();
    let data = vec![(base_image(32, 1), 0.8)];
    fit(&model, &mut store, &data, 200, 1e-3);
    let err = error_after(&model, &store, &data);
    assert!(err < 1e-3, "squared error {err}");
}

#[test]
fn eight_sample_overfit() {
    let (model, mut store) = desk();
    let data: Vec<(Tensor, f64)> = (0..8).map(|i| (base_image(32, 10 + i), i as f64 / 7.0)).collect();
    let losses = fit(&model, &mut store, &data, 500, 1e-3);
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best < 1e-2, "best training loss {best}");
}

#[test]
fn training_loss_is_bit_reproducible() {
    let data = vec![(base_image(32, 3), 0.3), (base_image(32, 4), 0.7)];
    let runs: Vec<Vec<u64>> = (0..2)
        .map(|_| {
            let (model, mut store) = desk();
            fit(&model, &mut store, &data, 5, 1e-3).iter().map(|l| l.to_bits()).collect()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
