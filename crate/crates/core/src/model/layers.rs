use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `x·W (+ b)` on `[rows×in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_dense(name.to_string(), input, output, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}_b"), &[output]));
        Self { w, b }
    }

    /// Zero-initialised weight (and bias).
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let w = store.add_zeros(name.to_string(), &[input, output]);
        let b = bias.then(|| store.add_zeros(format!("{name}_b"), &[output]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bind[self.w])?;
        match self.b {
            Some(b) => tape.add(y, bind[b]),
            None => Ok(y),
        }
    }
}

/// Layer norm over the last axis with a learnable affine.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add_zeros(format!("{name}.beta"), &[channels]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let n = tape.mul(n, bind[self.gamma])?;
        tape.add(n, bind[self.beta])
    }
}

/// A feature map stored as `[h·w × C]` rows in row-major pixel order.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

/// Non-overlapping `patch×patch` linearisation, projection and norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
    pub norm: Norm,
}

/// Per-channel input normalization applied before patch embedding
/// (the usual ImageNet statistics).
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Element indices turning an `[H×W×C]` image into `[(H/p)(W/p) × p·p·C]`.
pub fn patchify_index(h: usize, w: usize, c: usize, p: usize) -> Rc<[usize]> {
    let (hp, wp) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for pi in 0..hp {
        for pj in 0..wp {
            for di in 0..p {
                for dj in 0..p {
                    let base = ((pi * p + di) * w + pj * p + dj) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx.into()
}

impl PatchEmbed {
    pub fn new<R: Rng>(store: &mut ParamStore, patch: usize, out: usize, rng: &mut R) -> Self {
        Self {
            patch,
            proj: Linear::new(store, "stem.proj", patch * patch * 3, out, true, rng),
            norm: Norm::new(store, "stem.norm", out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, img: Var) -> Result<FeatureMap> {
        let [h, w, c] = *tape.shape(img) else {
            return Err(Error::shape("patch_embed", tape.shape(img), &[0, 0, 3]));
        };
        let p = self.patch;
        if c != 3 || h % p != 0 || w % p != 0 {
            return Err(Error::Precondition(format!(
                "patch_embed needs an H×W×3 image with H, W divisible by {p}, got {h}×{w}×{c}"
            )));
        }
        let (hp, wp) = (h / p, w / p);
        let inv_std = tape.constant(Tensor::new(&[3], PIXEL_STD.map(|s| 1.0 / s).to_vec())?);
        let shift = tape.constant(Tensor::new(&[3], (0..3).map(|k| -PIXEL_MEAN[k] / PIXEL_STD[k]).collect())?);
        let img = tape.mul(img, inv_std)?;
        let img = tape.add(img, shift)?;
        let flat = tape.gather(img, patchify_index(h, w, c, p), &[hp * wp, p * p * c])?;
        let y = self.proj.forward(tape, bind, flat)?;
        let y = self.norm.forward(tape, bind, y)?;
        Ok(FeatureMap { var: y, height: hp, width: wp })
    }
}

/// 2×2 patch merge (edge-replicated when odd), norm, projection.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub norm: Norm,
    pub proj: Linear,
}

/// Row indices for a 2×2 merge of an `h×w` grid; odd edges repeat the last
/// row/column.
pub fn merge_index(h: usize, w: usize, c: usize) -> (Rc<[usize]>, usize, usize) {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(h2 * w2 * 4 * c);
    for i in 0..h2 {
        for j in 0..w2 {
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let si = (2 * i + di).min(h - 1);
                let sj = (2 * j + dj).min(w - 1);
                let base = (si * w + sj) * c;
                idx.extend(base..base + c);
            }
        }
    }
    (idx.into(), h2, w2)
}

impl Downsample {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), 4 * input),
            proj: Linear::new(store, &format!("{name}.proj"), 4 * input, output, false, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, f: FeatureMap) -> Result<FeatureMap> {
        let c = *tape.shape(f.var).last().unwrap();
        let (idx, h2, w2) = merge_index(f.height, f.width, c);
        let merged = tape.gather(f.var, idx, &[h2 * w2, 4 * c])?;
        let y = self.norm.forward(tape, bind, merged)?;
        let y = self.proj.forward(tape, bind, y)?;
        Ok(FeatureMap { var: y, height: h2, width: w2 })
    }
}

/// GAP → linear → SiLU → linear(→1).
#[derive(Clone, Debug)]
pub struct QualityHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl QualityHead {
    pub fn new<R: Rng>(store: &mut ParamStore, channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, "head.fc1", channels, hidden, true, rng),
            fc2: Linear::new(store, "head.fc2", hidden, 1, true, rng),
        }
    }

    /// Score of a `[rows×C]` feature map, as a `[1×1]` value.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, f: Var) -> Result<Var> {
        let pooled = tape.mean_leading(f);
        let h = self.fc1.forward(tape, bind, pooled)?;
        let h = tape.silu(h);
        self.fc2.forward(tape, bind, h)
    }
}
