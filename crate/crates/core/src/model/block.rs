//! The gated, four-direction SS2D block.

use rand::Rng;

use super::layers::{FeatureMap, Linear, Norm};
use crate::error::Result;
use crate::params::{Binding, ParamId, ParamStore};
use crate::scan2d::{self, OrderCache, ScanMode};
use crate::ssm::{self, ScanPath};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Learnable SSM parameters of one scan direction.
#[derive(Clone, Debug)]
pub struct DirectionSsm {
    pub dt_in: ParamId,
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl DirectionSsm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, states: usize, rng: &mut R) -> Self {
        let rank = ssm::dt_rank(channels);
        Self {
            dt_in: store.add_dense(format!("{name}.dt_in"), channels, rank, rng),
            dt_proj: store.add_dense(format!("{name}.dt_proj"), rank, channels, rng),
            dt_bias: store.add(format!("{name}.dt_bias"), ssm::init_dt_bias(channels, rng)),
            b_proj: store.add_dense(format!("{name}.b_proj"), channels, states, rng),
            c_proj: store.add_dense(format!("{name}.c_proj"), channels, states, rng),
            a_log: store.add(format!("{name}.a_log"), ssm::init_a_log(channels, states)),
            d_skip: store.add(format!("{name}.d_skip"), Tensor::full(&[channels], 1.0)),
        }
    }

    /// Selective SSM over a `[L×D]` sequence.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, seq: Var, path: ScanPath) -> Result<Var> {
        let low = tape.matmul(seq, bind[self.dt_in])?;
        let pre = tape.matmul(low, bind[self.dt_proj])?;
        let pre = tape.add(pre, bind[self.dt_bias])?;
        let delta = tape.softplus(pre);
        let b = tape.matmul(seq, bind[self.b_proj])?;
        let c = tape.matmul(seq, bind[self.c_proj])?;
        let a = tape.exp(bind[self.a_log]);
        let a = tape.scale(a, -1.0);
        tape.selective_scan(seq, delta, a, b, c, bind[self.d_skip], path)
    }
}

/// Channel MLP sub-block (`x + fc2(silu(fc1(norm(x))))`), present when the
/// MLP ratio is non-zero.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Residual SS2D block. Output shape equals input shape; with the output
/// projections zero-initialised the block is exactly the identity.
#[derive(Clone, Debug)]
pub struct Ss2dBlock {
    pub channels: usize,
    pub inner: usize,
    pub mode: ScanMode,
    pub window: usize,
    pub chunk: usize,
    pub norm: Norm,
    pub in_x: Linear,
    pub in_z: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub directions: Vec<DirectionSsm>,
    pub out_norm: Norm,
    pub out_proj: Linear,
    pub mlp: Option<Mlp>,
}

pub struct BlockSpec {
    pub channels: usize,
    pub expand: usize,
    pub states: usize,
    pub mode: ScanMode,
    pub window: usize,
    pub mlp_ratio: usize,
    pub chunk: usize,
}

impl Ss2dBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, spec: &BlockSpec, rng: &mut R) -> Self {
        let c = spec.channels;
        let e = c * spec.expand;
        let bound = 1.0 / 3.0;
        let conv = (0..9 * e).map(|_| rng.gen_range(-bound..=bound)).collect::<Vec<Scalar>>();
        let mut block = Self {
            channels: c,
            inner: e,
            mode: spec.mode,
            window: spec.window,
            chunk: spec.chunk,
            norm: Norm::new(store, &format!("{name}.norm"), c),
            in_x: Linear::new(store, &format!("{name}.in_x"), c, e, false, rng),
            in_z: Linear::new(store, &format!("{name}.in_z"), c, e, false, rng),
            conv_w: store.add(format!("{name}.conv_w"), Tensor::new(&[3, 3, e], conv).expect("shape")),
            conv_b: store.add_zeros(format!("{name}.conv_b"), &[e]),
            directions: Vec::with_capacity(4),
            out_norm: Norm::new(store, &format!("{name}.out_norm"), e),
            out_proj: Linear::zeros(store, &format!("{name}.out_proj"), e, c, false),
            mlp: None,
        };
        for k in 0..4 {
            block.directions.push(DirectionSsm::new(store, &format!("{name}.dir{k}"), e, spec.states, rng));
        }
        if spec.mlp_ratio > 0 {
            let hidden = c * spec.mlp_ratio;
            block.mlp = Some(Mlp {
                norm: Norm::new(store, &format!("{name}.mlp_norm"), c),
                fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, true, rng),
                fc2: Linear::zeros(store, &format!("{name}.fc2"), hidden, c, true),
            });
        }
        block
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, f: FeatureMap, orders: &OrderCache) -> Result<FeatureMap> {
        let (h, w) = (f.height, f.width);
        let l = h * w;
        let n = self.norm.forward(tape, bind, f.var)?;
        let xs = self.in_x.forward(tape, bind, n)?;
        let z = self.in_z.forward(tape, bind, n)?;

        let grid = tape.reshape(xs, &[h, w, self.inner])?;
        let conv = tape.dwconv3x3(grid, bind[self.conv_w], bind[self.conv_b])?;
        let conv = tape.silu(conv);
        let xs = tape.reshape(conv, &[l, self.inner])?;

        let path = if self.chunk >= l { ScanPath::Reference } else { ScanPath::Chunked(self.chunk) };
        let set = orders.get(h, w, self.mode, self.window)?;
        let mut ys = [xs; 4];
        for (k, (dir, order)) in self.directions.iter().zip(set.iter()).enumerate() {
            let seq = scan2d::apply_order_var(tape, xs, order)?;
            ys[k] = dir.forward(tape, bind, seq, path)?;
        }
        let merged = scan2d::merge_directions_var(tape, ys, &set)?;

        let y = self.out_norm.forward(tape, bind, merged)?;
        let gate = tape.silu(z);
        let y = tape.mul(y, gate)?;
        let y = self.out_proj.forward(tape, bind, y)?;
        let mut out = tape.add(f.var, y)?;

        if let Some(mlp) = &self.mlp {
            let n = mlp.norm.forward(tape, bind, out)?;
            let hdn = mlp.fc1.forward(tape, bind, n)?;
            let hdn = tape.silu(hdn);
            let y = mlp.fc2.forward(tape, bind, hdn)?;
            out = tape.add(out, y)?;
        }
        Ok(FeatureMap { var: out, ..f })
    }
}
