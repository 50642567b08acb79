//! StylePrompt adapters.
//!
//! Generation: a bank of `N` learnable prompts is mixed with weights
//! `softmax(conv1x1(GAP(F)))` into one fused prompt `P_f`.
//!
//! Injection: `P_f` is aligned to the stage width by a 1×1 conv, two linear
//! heads produce channel-wise `γ` and `β`, and the features become
//! `F·(1 + γ) + β`. The heads start at zero, so a fresh adapter is the
//! identity.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::layers::Linear;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_PROMPTS: usize = 6;

/// Parameter-name prefix shared by every adapter tensor.
pub const PROMPT_PREFIX: &str = "prompt";

pub fn is_prompt_param(name: &str) -> bool {
    name.starts_with(PROMPT_PREFIX)
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// `N` prompts of spatial size `size×size` with `channels` channels, plus
/// the 1×1 conv that predicts their mixing weights.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub prompts: ParamId,
    pub weight: Linear,
}

#[derive(Clone, Debug)]
pub struct StyleAffine {
    pub align: Linear,
    pub gamma: Linear,
    pub beta: Linear,
}

/// One adapter, attached after a stage.
#[derive(Clone, Debug)]
pub struct StylePrompt {
    pub bank: PromptBank,
    pub affine: StyleAffine,
}

impl StylePrompt {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        stage: usize,
        channels: usize,
        count: usize,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 || size == 0 {
            return Err(Error::Config("prompt count and size must be at least 1".into()));
        }
        let name = format!("{PROMPT_PREFIX}{stage}");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..count * size * size * channels).map(|_| normal.sample(rng)).collect();
        let prompts = store.add(format!("{name}.prompts"), Tensor::new(&[count, size * size, channels], data)?);
        let bank = PromptBank {
            count,
            size,
            channels,
            prompts,
            weight: Linear::new(store, &format!("{name}.weight"), channels, count, true, rng),
        };
        let affine = StyleAffine {
            align: Linear::new(store, &format!("{name}.align"), channels, channels, true, rng),
            gamma: Linear::zeros(store, &format!("{name}.gamma"), channels, channels, true),
            beta: Linear::zeros(store, &format!("{name}.beta"), channels, channels, true),
        };
        Ok(Self { bank, affine })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, f: Var) -> Result<Var> {
        let (pf, _) = spg_fuse(tape, bind, f, &self.bank)?;
        spi_inject(tape, bind, f, pf, &self.affine)
    }
}

/// Fuses the bank into `P_f` (`[size²×C]`) for features `f` (`[rows×C]`).
/// Also returns the mixing weights (`[1×N]`).
pub fn spg_fuse(tape: &mut Tape, bind: &Binding, f: Var, bank: &PromptBank) -> Result<(Var, Var)> {
    let c = *tape.shape(f).last().unwrap();
    if c != bank.channels {
        return Err(Error::shape("spg_fuse", tape.shape(f), &[bank.channels]));
    }
    let rows = tape.value(f).len() / c;
    let flat = tape.reshape(f, &[rows, c])?;
    let pooled = tape.mean_leading(flat);
    let logits = bank.weight.forward(tape, bind, pooled)?;
    let weights = tape.softmax(logits);
    let cells = bank.size * bank.size;
    let bankm = tape.reshape(bind[bank.prompts], &[bank.count, cells * c])?;
    let fused = tape.matmul(weights, bankm)?;
    let fused = tape.reshape(fused, &[cells, c])?;
    Ok((fused, weights))
}

/// `f·(1 + γ) + β` with `γ`, `β` derived from the fused prompt.
pub fn spi_inject(tape: &mut Tape, bind: &Binding, f: Var, pf: Var, aff: &StyleAffine) -> Result<Var> {
    let (gamma, beta) = style_affine(tape, bind, pf, aff)?;
    apply_affine(tape, f, gamma, beta)
}

/// `(γ, β)`, each `[1×C]`.
pub fn style_affine(tape: &mut Tape, bind: &Binding, pf: Var, aff: &StyleAffine) -> Result<(Var, Var)> {
    let aligned = aff.align.forward(tape, bind, pf)?;
    let aligned = if tape.shape(aligned)[0] > 1 { tape.mean_leading(aligned) } else { aligned };
    let gamma = aff.gamma.forward(tape, bind, aligned)?;
    let beta = aff.beta.forward(tape, bind, aligned)?;
    Ok((gamma, beta))
}

/// `f·(1 + γ) + β`, broadcasting `γ`, `β` over positions.
pub fn apply_affine(tape: &mut Tape, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scale = tape.add_scalar(gamma, 1.0);
    let y = tape.mul(f, scale)?;
    tape.add(y, beta)
}

/// Freezes everything except adapters (and the head when `tune_head`).
pub fn freeze_backbone(store: &mut ParamStore, tune_head: bool) -> Result<()> {
    if !store.iter().any(|(_, p)| is_prompt_param(&p.name)) {
        return Err(Error::Config("model has no StylePrompt adapters attached".into()));
    }
    store.set_trainable(|n| is_prompt_param(n) || (tune_head && is_head_param(n)));
    Ok(())
}

/// Freezes every parameter.
pub fn freeze_all(store: &mut ParamStore) {
    store.set_trainable(|_| false);
}

/// Trainable / total scalar parameters.
pub fn tunable_fraction(store: &ParamStore) -> f64 {
    let total = store.count();
    if total == 0 {
        return 0.0;
    }
    store.trainable_count() as f64 / total as f64
}

pub fn backbone_checksum(store: &ParamStore) -> String {
    store.checksum(|n| !is_prompt_param(n) && !is_head_param(n))
}
