//! Bijective 2D→1D traversal orders.
//!
//! Cross-scan flattens the grid row-major or column-major. Local-window scan
//! walks pixels inside each `window×window` tile, then moves tile to tile in
//! the same major order, which keeps 4-neighbours close in the sequence.
//! Edge tiles on grids the window does not divide are simply smaller.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanKind {
    CrossH,
    CrossV,
    LocalH(usize),
    LocalV(usize),
}

/// Which family of four directions a stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanMode {
    Cross,
    Local,
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScanMode::Cross => "cross",
            ScanMode::Local => "local",
        })
    }
}

impl std::str::FromStr for ScanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(ScanMode::Cross),
            "local" => Ok(ScanMode::Local),
            other => Err(Error::Config(format!("unknown scan mode {other:?} (cross|local)"))),
        }
    }
}

/// A traversal of an `height×width` grid.
///
/// `forward[t]` is the flat (row-major) pixel visited at step `t`;
/// `inverse[p]` is the step at which pixel `p` is visited.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    pub height: usize,
    pub width: usize,
    pub kind: ScanKind,
    pub reversed: bool,
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

fn check_extents(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Precondition(format!("grid extents must be positive, got {h}×{w}")));
    }
    Ok(())
}

/// Pixel order of `window`-tiled traversal; `column_major` flips both the
/// tile order and the within-tile order.
fn tiled(h: usize, w: usize, window: usize, column_major: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    let tiles_r = h.div_ceil(window);
    let tiles_c = w.div_ceil(window);
    let span = |t: usize, ext: usize| t * window..((t + 1) * window).min(ext);
    if !column_major {
        for tr in 0..tiles_r {
            for tc in 0..tiles_c {
                for i in span(tr, h) {
                    for j in span(tc, w) {
                        out.push(i * w + j);
                    }
                }
            }
        }
    } else {
        for tc in 0..tiles_c {
            for tr in 0..tiles_r {
                for j in span(tc, w) {
                    for i in span(tr, h) {
                        out.push(i * w + j);
                    }
                }
            }
        }
    }
    out
}

impl ScanOrder {
    pub fn new(height: usize, width: usize, kind: ScanKind, reversed: bool) -> Result<Self> {
        check_extents(height, width)?;
        let mut forward = match kind {
            ScanKind::CrossH => tiled(height, width, height.max(width), false),
            ScanKind::CrossV => tiled(height, width, height.max(width), true),
            ScanKind::LocalH(win) | ScanKind::LocalV(win) => {
                if win == 0 {
                    return Err(Error::Precondition("window must be at least 1".into()));
                }
                tiled(height, width, win, matches!(kind, ScanKind::LocalV(_)))
            }
        };
        if reversed {
            forward.reverse();
        }
        let mut inverse = vec![0; forward.len()];
        for (t, &p) in forward.iter().enumerate() {
            inverse[p] = t;
        }
        Ok(Self { height, width, kind, reversed, forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward_index(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse_index(&self) -> &[usize] {
        &self.inverse
    }

    /// `(row, col)` of every step, in sequence order.
    pub fn coords(&self) -> Vec<(usize, usize)> {
        self.forward.iter().map(|&p| (p / self.width, p % self.width)).collect()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.height * self.width];
        self.forward.len() == seen.len()
            && self.forward.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
            && self.forward.iter().enumerate().all(|(t, &p)| self.inverse[p] == t)
    }

    pub fn label(&self) -> String {
        let base = match self.kind {
            ScanKind::CrossH => "cross-h".to_string(),
            ScanKind::CrossV => "cross-v".to_string(),
            ScanKind::LocalH(w) => format!("local-h{w}"),
            ScanKind::LocalV(w) => format!("local-v{w}"),
        };
        if self.reversed {
            base + "-rev"
        } else {
            base
        }
    }
}

/// Row-major, row-major reversed, column-major, column-major reversed.
pub fn build_cross_scan(h: usize, w: usize) -> Result<[ScanOrder; 4]> {
    Ok([
        ScanOrder::new(h, w, ScanKind::CrossH, false)?,
        ScanOrder::new(h, w, ScanKind::CrossH, true)?,
        ScanOrder::new(h, w, ScanKind::CrossV, false)?,
        ScanOrder::new(h, w, ScanKind::CrossV, true)?,
    ])
}

/// Local-window counterparts of [`build_cross_scan`].
pub fn build_local_scan(h: usize, w: usize, window: usize) -> Result<[ScanOrder; 4]> {
    Ok([
        ScanOrder::new(h, w, ScanKind::LocalH(window), false)?,
        ScanOrder::new(h, w, ScanKind::LocalH(window), true)?,
        ScanOrder::new(h, w, ScanKind::LocalV(window), false)?,
        ScanOrder::new(h, w, ScanKind::LocalV(window), true)?,
    ])
}

pub fn build_orders(h: usize, w: usize, mode: ScanMode, window: usize) -> Result<[ScanOrder; 4]> {
    match mode {
        ScanMode::Cross => build_cross_scan(h, w),
        ScanMode::Local => build_local_scan(h, w, window),
    }
}

type OrderKey = (usize, usize, ScanMode, usize);

/// Process-wide cache of direction sets keyed by `(h, w, mode, window)`.
#[derive(Default, Debug)]
pub struct OrderCache {
    inner: RwLock<HashMap<OrderKey, Arc<[ScanOrder; 4]>>>,
}

impl OrderCache {
    pub fn get(&self, h: usize, w: usize, mode: ScanMode, window: usize) -> Result<Arc<[ScanOrder; 4]>> {
        let window = if mode == ScanMode::Cross { 0 } else { window };
        let key = (h, w, mode, window);
        if let Some(o) = self.inner.read().expect("order cache poisoned").get(&key) {
            return Ok(Arc::clone(o));
        }
        let orders = Arc::new(build_orders(h, w, mode, window)?);
        self.inner.write().expect("order cache poisoned").insert(key, Arc::clone(&orders));
        Ok(orders)
    }
}

fn check_map(f: &Tensor, order: &ScanOrder) -> Result<usize> {
    match *f.shape() {
        [h, w, c] if h == order.height && w == order.width => Ok(c),
        _ => Err(Error::shape("scan order", f.shape(), &[order.height, order.width])),
    }
}

/// `[H×W×C]` → `[L×C]` in sequence order.
pub fn apply_order(f: &Tensor, order: &ScanOrder) -> Result<Tensor> {
    let c = check_map(f, order)?;
    let mut out = Vec::with_capacity(f.len());
    for &p in &order.forward {
        out.extend_from_slice(&f.data()[p * c..(p + 1) * c]);
    }
    Tensor::new(&[order.len(), c], out)
}

/// `[L×C]` in sequence order → `[H×W×C]`.
pub fn invert_order(seq: &Tensor, order: &ScanOrder) -> Result<Tensor> {
    let [l, c] = *seq.shape() else {
        return Err(Error::shape("invert_order", seq.shape(), &[order.len()]));
    };
    if l != order.len() {
        return Err(Error::shape("invert_order", seq.shape(), &[order.len(), c]));
    }
    let mut out = Vec::with_capacity(seq.len());
    for &t in &order.inverse {
        out.extend_from_slice(&seq.data()[t * c..(t + 1) * c]);
    }
    Tensor::new(&[order.height, order.width, c], out)
}

/// Element-level gather indices that move `c`-channel rows by `rows`.
pub fn row_gather_index(rows: &[usize], c: usize) -> Rc<[usize]> {
    rows.iter().flat_map(|&r| (r * c)..(r * c + c)).collect()
}

/// Recorded [`apply_order`]: `[H×W×C]` (or `[HW×C]`) → `[L×C]`.
pub fn apply_order_var(tape: &mut Tape, f: Var, order: &ScanOrder) -> Result<Var> {
    let c = *tape.shape(f).last().unwrap();
    if tape.value(f).len() != order.len() * c {
        return Err(Error::shape("apply_order", tape.shape(f), &[order.height, order.width, c]));
    }
    tape.gather(f, row_gather_index(&order.forward, c), &[order.len(), c])
}

/// Recorded [`invert_order`], returning `[HW×C]` rows in pixel order.
pub fn invert_order_var(tape: &mut Tape, seq: Var, order: &ScanOrder) -> Result<Var> {
    let c = *tape.shape(seq).last().unwrap();
    if tape.value(seq).len() != order.len() * c {
        return Err(Error::shape("invert_order", tape.shape(seq), &[order.len(), c]));
    }
    tape.gather(seq, row_gather_index(&order.inverse, c), &[order.len(), c])
}

/// Un-permutes each direction's `[L×C]` output and sums them into `[H×W×C]`.
pub fn merge_directions(outputs: &[Tensor; 4], orders: &[ScanOrder; 4]) -> Result<Tensor> {
    let shape = outputs[0].shape().to_vec();
    if outputs.iter().any(|o| o.shape() != shape.as_slice()) {
        return Err(Error::shape(
            "merge_directions",
            &shape,
            outputs[1..].iter().find(|o| o.shape() != shape.as_slice()).unwrap().shape(),
        ));
    }
    let mut acc = invert_order(&outputs[0], &orders[0])?;
    for (o, ord) in outputs.iter().zip(orders).skip(1) {
        let m = invert_order(o, ord)?;
        for (a, b) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    Ok(acc)
}

/// Recorded [`merge_directions`], returning `[HW×C]`.
pub fn merge_directions_var(tape: &mut Tape, outputs: [Var; 4], orders: &[ScanOrder; 4]) -> Result<Var> {
    let mut acc = invert_order_var(tape, outputs[0], &orders[0])?;
    for (&o, ord) in outputs.iter().zip(orders).skip(1) {
        let m = invert_order_var(tape, o, ord)?;
        acc = tape.add(acc, m)?;
    }
    Ok(acc)
}

/// Sequence-distance statistics over all 4-neighbour pixel pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityProfile {
    pub pairs: usize,
    pub max_adjacent_gap: usize,
    pub mean_adjacent_gap: f64,
    /// Median gap (mean of the two middle values for an even count).
    pub median_adjacent_gap: f64,
}

pub fn locality_profile(order: &ScanOrder) -> LocalityProfile {
    let (h, w) = (order.height, order.width);
    let pos = &order.inverse;
    let mut gaps = Vec::with_capacity(2 * h * w);
    let mut visit = |p: usize, q: usize| gaps.push(pos[p].abs_diff(pos[q]));
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if j + 1 < w {
                visit(p, p + 1);
            }
            if i + 1 < h {
                visit(p, p + w);
            }
        }
    }
    let pairs = gaps.len();
    if pairs == 0 {
        return LocalityProfile { pairs, max_adjacent_gap: 0, mean_adjacent_gap: 0.0, median_adjacent_gap: 0.0 };
    }
    let total: u64 = gaps.iter().map(|&g| g as u64).sum();
    gaps.sort_unstable();
    let median = (gaps[(pairs - 1) / 2] + gaps[pairs / 2]) as f64 / 2.0;
    LocalityProfile {
        pairs,
        max_adjacent_gap: gaps[pairs - 1],
        mean_adjacent_gap: total as f64 / pairs as f64,
        median_adjacent_gap: median,
    }
}

/// Mean adjacent gap averaged over a set of directions.
pub fn mean_gap(orders: &[ScanOrder]) -> f64 {
    orders.iter().map(|o| locality_profile(o).mean_adjacent_gap).sum::<f64>() / orders.len() as f64
}
