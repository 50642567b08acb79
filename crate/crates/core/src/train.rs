//! Patch-based training, evaluation, and transfer setup.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::data::{crop_patches, derive_seed, dihedral, IqaSample, MosScale};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::QMamba;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::styleprompt::{freeze_backbone, is_head_param};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

// Distinct RNG streams so crops, shuffles and evaluation never share draws.
const CROP_STREAM: u64 = 0xC0;
const SHUFFLE_STREAM: u64 = 0x5F;
const EVAL_STREAM: u64 = 0xE7;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Scalar,
    pub val_srcc: Option<Scalar>,
}

fn id_seed(id: &str) -> u64 {
    u64::from_le_bytes(Sha256::digest(id.as_bytes())[..8].try_into().expect("8 bytes"))
}

/// Trains the currently trainable parameters of `store` with MSE on
/// min-max normalized scores. `on_epoch` sees every epoch's log as it is
/// produced.
pub fn train(
    model: &QMamba,
    store: &mut ParamStore,
    train_set: &[IqaSample],
    val_set: &[IqaSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_set.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let scale = MosScale::fit(train_set)?;
    let targets: Vec<Scalar> = train_set.iter().map(|s| scale.apply(s.mos)).collect();
    let per_epoch = train_set.len() * cfg.patches_per_image;
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt =
        AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, store);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut items: Vec<(usize, Tensor)> = Vec::with_capacity(per_epoch);
        for (i, s) in train_set.iter().enumerate() {
            let seed = derive_seed(derive_seed(cfg.seed, CROP_STREAM), (epoch as u64) << 32 | i as u64);
            let crops = crop_patches(&s.image, cfg.patches_per_image, cfg.patch_size, seed)?;
            for (c, p) in crops.into_iter().enumerate() {
                let p = if cfg.augment { dihedral(&p, (derive_seed(seed, c as u64) & 7) as u8) } else { p };
                items.push((i, p));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, SHUFFLE_STREAM), epoch as u64));
        items.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, batch) in items.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape, true);
            let mut total = None;
            for (i, patch) in batch {
                let x = tape.constant(patch.clone());
                let pred = model.forward(&mut tape, &bind, x)?;
                let t = tape.constant(Tensor::full(&[1, 1], targets[*i]));
                let d = tape.sub(pred, t)?;
                let sq = tape.mul(d, d)?;
                total = Some(match total {
                    None => sq,
                    Some(acc) => tape.add(acc, sq)?,
                });
            }
            let sum = total.expect("non-empty batch");
            let loss = tape.scale(sum, 1.0 / batch.len() as Scalar);
            let loss = tape.sum(loss);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss became {lv} at epoch {}, step {}", epoch + 1, b + 1)));
            }
            loss_sum += lv * batch.len() as Scalar;
            tape.backward(loss)?;
            let grads = store.collect_grads(&tape, &bind);
            let step = epoch * steps_per_epoch + b;
            opt.update(store, &grads, cosine_lr(cfg.lr, step, total_steps));
        }
        let val_srcc =
            if val_set.len() >= 2 { evaluate(model, store, val_set, cfg).ok().map(|(r, _)| r.srcc()) } else { None };
        let log = EpochLog { epoch: epoch + 1, train_loss: loss_sum / items.len() as Scalar, val_srcc };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Image score: mean of the model's scores over `eval_patches` crops whose
/// positions depend only on the run seed and the sample id.
pub fn predict_sample(model: &QMamba, store: &ParamStore, sample: &IqaSample, cfg: &TrainConfig) -> Result<Scalar> {
    let seed = derive_seed(derive_seed(cfg.seed, EVAL_STREAM), id_seed(&sample.id));
    let patches = crop_patches(&sample.image, cfg.eval_patches, cfg.patch_size, seed)?;
    let mut acc = 0.0;
    for p in &patches {
        acc += model.predict(store, p)?;
    }
    Ok(acc / patches.len() as Scalar)
}

/// Scores every sample and correlates against the labels.
pub fn evaluate(
    model: &QMamba,
    store: &ParamStore,
    samples: &[IqaSample],
    cfg: &TrainConfig,
) -> Result<(EvalReport, Vec<Scalar>)> {
    let preds = samples.iter().map(|s| predict_sample(model, store, s, cfg)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<Scalar> = samples.iter().map(|s| s.mos).collect();
    let domains: Vec<String> = samples.iter().map(|s| s.domain.clone()).collect();
    Ok((EvalReport::new(&preds, &truth, &domains)?, preds))
}

/// What a transfer run is allowed to change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferMode {
    /// Evaluate the source model as is.
    None,
    /// Regression head only.
    LinearProbe,
    /// Adapters, plus the head when `tune_head` is set.
    StylePrompt,
    /// Every parameter.
    Full,
}

impl TransferMode {
    pub const ALL: [TransferMode; 4] =
        [TransferMode::None, TransferMode::LinearProbe, TransferMode::StylePrompt, TransferMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            TransferMode::None => "none",
            TransferMode::LinearProbe => "linear-probe",
            TransferMode::StylePrompt => "styleprompt",
            TransferMode::Full => "full",
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown transfer mode {s:?} (none|linear-probe|styleprompt|full)")))
    }
}

/// Sets trainability flags for `mode`.
pub fn configure_transfer(store: &mut ParamStore, mode: TransferMode, tune_head: bool) -> Result<()> {
    match mode {
        TransferMode::None => store.set_trainable(|_| false),
        TransferMode::LinearProbe => store.set_trainable(is_head_param),
        TransferMode::StylePrompt => freeze_backbone(store, tune_head)?,
        TransferMode::Full => store.set_trainable(|_| true),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, DistortionKind};
    use crate::model::{Preset, QMambaConfig};
    use crate::scan2d::ScanMode;

    fn tiny_setup() -> (QMamba, ParamStore, Vec<IqaSample>, TrainConfig) {
        let mut cfg = QMambaConfig::preset(Preset::Desk, ScanMode::Local);
        cfg.embed_dims = vec![8, 8];
        cfg.n_state = 2;
        let mut store = ParamStore::new();
        let model = QMamba::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let data = synth_dataset(6, 2, &DistortionKind::ALL).unwrap();
        let tc =
            TrainConfig { epochs: 2, batch_size: 4, patches_per_image: 1, eval_patches: 2, ..TrainConfig::default() };
        (model, store, data, tc)
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (m, mut s, d, c) = tiny_setup();
            let logs = train(&m, &mut s, &d, &d, &c, |_| {}).unwrap();
            (logs, s.checksum(|_| true))
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|l| l.train_loss.is_finite()));
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (m, mut s, d, mut c) = tiny_setup();
        c.epochs = 0;
        let before = s.checksum(|_| true);
        assert!(train(&m, &mut s, &d, &d, &c, |_| {}).unwrap().is_empty());
        assert_eq!(before, s.checksum(|_| true));
    }

    #[test]
    fn mode_none_is_frozen() {
        let (m, mut s, d, c) = tiny_setup();
        configure_transfer(&mut s, TransferMode::None, true).unwrap();
        let before = s.checksum(|_| true);
        train(&m, &mut s, &d, &d, &c, |_| {}).unwrap();
        assert_eq!(before, s.checksum(|_| true));
        assert!(matches!(configure_transfer(&mut s, TransferMode::StylePrompt, true), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (m, s, d, c) = tiny_setup();
        let (_, p1) = evaluate(&m, &s, &d, &c).unwrap();
        let (_, p2) = evaluate(&m, &s, &d, &c).unwrap();
        assert_eq!(p1, p2);
    }
}
