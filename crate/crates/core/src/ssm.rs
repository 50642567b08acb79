//! Zero-order-hold discretization and the selective (input-dependent) scan.
//!
//! The state matrix is diagonal: every `(channel, state)` pair evolves as an
//! independent scalar system
//!
//! ```text
//! h_t = exp(Δ_t a) h_{t-1} + ((exp(Δ_t a) - 1) / a) b_t x_t
//! y_t = Σ_n c_t[n] h_t[n] + d x_t
//! ```
//!
//! Two evaluation paths are provided. The reference path walks the
//! recurrence one step at a time. The chunked path composes per-chunk affine
//! maps `h ↦ αh + β`, which is associative, so chunks can be solved
//! independently and stitched together with a short carry pass.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Below this `|Δa|` the ZOH input coefficient is evaluated by its series.
pub const ZOH_SERIES_THRESHOLD: Scalar = 1e-6;

/// Default chunk length for the chunked scan.
pub const DEFAULT_CHUNK: usize = 64;

/// `expm1(z) / z`, continuous through `z = 0`.
#[inline]
pub fn phi(z: Scalar) -> Scalar {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + z * (0.5 + z / 6.0)
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`].
#[inline]
pub fn phi_prime(z: Scalar) -> Scalar {
    if z.abs() < 1e-3 {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// `(exp(z), expm1(z))` from one transcendental call: near 0 `expm1` is
/// evaluated and `exp = 1 + expm1`, elsewhere `expm1 = exp - 1` loses at
/// most a few ulps.
#[inline]
fn exp_pair(z: Scalar) -> (Scalar, Scalar) {
    if z.abs() < 0.1 {
        let em1 = z.exp_m1();
        (1.0 + em1, em1)
    } else {
        let e = z.exp();
        (e, e - 1.0)
    }
}

/// Per-element discretization terms kept from the forward pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct Transitions {
    /// `exp(Δa)`, `[L×D×N]`.
    pub abar: Vec<Scalar>,
    /// `expm1(Δa)`, `[L×D×N]`.
    pub em1: Vec<Scalar>,
}

/// [`phi`] given `expm1(z)`.
#[inline]
fn phi_from(z: Scalar, em1: Scalar) -> Scalar {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + z * (0.5 + z / 6.0)
    } else {
        em1 / z
    }
}

/// [`phi_prime`] given `exp(z)` and `expm1(z)`.
#[inline]
fn phi_prime_from(z: Scalar, e: Scalar, em1: Scalar) -> Scalar {
    if z.abs() < 1e-3 {
        phi_prime(z)
    } else {
        (z * e - em1) / (z * z)
    }
}

/// Scalar ZOH: returns `(ā, b̄)` for continuous `(a, b)` and step `delta`.
pub fn zoh_scalar(a: Scalar, b: Scalar, delta: Scalar) -> Result<(Scalar, Scalar)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Precondition(format!("Δ must be positive, got {delta}")));
    }
    let z = delta * a;
    Ok((z.exp(), delta * phi(z) * b))
}

/// Discretizes a diagonal state matrix `a` (`[D×N]`) with input vector `b`
/// (`[N]`) and per-channel steps `delta` (`[D]`).
///
/// Returns `(Ā, B̄)`, both `[D×N]`.
pub fn discretize_zoh(a: &Tensor, b: &[Scalar], delta: &[Scalar]) -> Result<(Tensor, Tensor)> {
    let [d, n] = *a.shape() else {
        return Err(Error::shape("discretize_zoh", a.shape(), &[delta.len(), b.len()]));
    };
    if b.len() != n || delta.len() != d {
        return Err(Error::shape("discretize_zoh", a.shape(), &[delta.len(), b.len()]));
    }
    let mut abar = vec![0.0; d * n];
    let mut bbar = vec![0.0; d * n];
    for ch in 0..d {
        for s in 0..n {
            let (x, y) = zoh_scalar(a.data()[ch * n + s], b[s], delta[ch])?;
            abar[ch * n + s] = x;
            bbar[ch * n + s] = y;
        }
    }
    Ok((Tensor::new(&[d, n], abar)?, Tensor::new(&[d, n], bbar)?))
}

/// How a scan is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanPath {
    Reference,
    Chunked(usize),
}

/// Borrowed inputs of one selective scan over a single sequence.
///
/// Layouts: `x`, `delta` are `[L×D]`; `a` is `[D×N]`; `b`, `c` are `[L×N]`;
/// `d_skip` is `[D]`.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    pub len: usize,
    pub channels: usize,
    pub states: usize,
    pub x: &'a [Scalar],
    pub delta: &'a [Scalar],
    pub a: &'a [Scalar],
    pub b: &'a [Scalar],
    pub c: &'a [Scalar],
    pub d_skip: &'a [Scalar],
}

/// Scan result: outputs `y` (`[L×D]`) and hidden states `h` (`[L×D×N]`).
#[derive(Clone, Debug)]
pub struct ScanOutput {
    pub y: Vec<Scalar>,
    pub h: Vec<Scalar>,
}

/// Gradients of a scan with respect to each of its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads {
    pub x: Vec<Scalar>,
    pub delta: Vec<Scalar>,
    pub a: Vec<Scalar>,
    pub b: Vec<Scalar>,
    pub c: Vec<Scalar>,
    pub d_skip: Vec<Scalar>,
}

impl ScanInputs<'_> {
    fn validate(&self) -> Result<()> {
        let (l, d, n) = (self.len, self.channels, self.states);
        if l == 0 || d == 0 || n == 0 {
            return Err(Error::Precondition(format!("empty scan extents L={l} D={d} N={n}")));
        }
        let checks: [(&str, usize, usize); 6] = [
            ("x", self.x.len(), l * d),
            ("delta", self.delta.len(), l * d),
            ("a", self.a.len(), d * n),
            ("b", self.b.len(), l * n),
            ("c", self.c.len(), l * n),
            ("d_skip", self.d_skip.len(), d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Precondition(format!("scan input {name} has {got} elements, expected {want}")));
            }
        }
        let all = [self.x, self.delta, self.a, self.b, self.c, self.d_skip];
        if all.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite scan input".into()));
        }
        if let Some(bad) = self.delta.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Precondition(format!("Δ must be positive, got {bad}")));
        }
        Ok(())
    }

    /// Per-step transitions and injected input `b̄ x` (`[L×D×N]`).
    fn transitions(&self) -> (Transitions, Vec<Scalar>) {
        let (l, d, n) = (self.len, self.channels, self.states);
        let mut abar = vec![0.0; l * d * n];
        let mut em1s = vec![0.0; l * d * n];
        let mut u = vec![0.0; l * d * n];
        for t in 0..l {
            for ch in 0..d {
                let dt = self.delta[t * d + ch];
                let xv = self.x[t * d + ch];
                let base = (t * d + ch) * n;
                for s in 0..n {
                    let z = dt * self.a[ch * n + s];
                    let (e, em1) = exp_pair(z);
                    abar[base + s] = e;
                    em1s[base + s] = em1;
                    u[base + s] = dt * phi_from(z, em1) * self.b[t * n + s] * xv;
                }
            }
        }
        (Transitions { abar, em1: em1s }, u)
    }

    fn readout(&self, h: &[Scalar]) -> Vec<Scalar> {
        let (l, d, n) = (self.len, self.channels, self.states);
        let mut y = vec![0.0; l * d];
        for t in 0..l {
            let c = &self.c[t * n..(t + 1) * n];
            for ch in 0..d {
                let hs = &h[(t * d + ch) * n..(t * d + ch + 1) * n];
                let acc: Scalar = hs.iter().zip(c).map(|(h, c)| h * c).sum();
                y[t * d + ch] = acc + self.d_skip[ch] * self.x[t * d + ch];
            }
        }
        y
    }
}

/// Solves `h_t = α_t h_{t-1} + β_t` (`h_{-1} = 0`) for `len` steps of `width`
/// independent lanes. With `reverse`, solves `h_t = α_t h_{t+1} + β_t` from
/// the end instead.
pub fn affine_scan(
    alpha: &[Scalar],
    beta: &[Scalar],
    len: usize,
    width: usize,
    path: ScanPath,
    reverse: bool,
) -> Vec<Scalar> {
    debug_assert_eq!(alpha.len(), len * width);
    debug_assert_eq!(beta.len(), len * width);
    let step = |t: usize| if reverse { len - 1 - t } else { t };
    let mut h = vec![0.0; len * width];
    match path {
        ScanPath::Chunked(chunk) if chunk < len => {
            // Pass 1: each chunk from a zero carry, tracking the cumulative
            // transition so a carry can be folded in afterwards.
            let mut prod = vec![0.0; len * width];
            for start in (0..len).step_by(chunk) {
                let end = (start + chunk).min(len);
                for i in start..end {
                    let t = step(i);
                    let row = t * width..(t + 1) * width;
                    if i == start {
                        h[row.clone()].copy_from_slice(&beta[row.clone()]);
                        prod[row.clone()].copy_from_slice(&alpha[row]);
                    } else {
                        let p = step(i - 1) * width;
                        for k in 0..width {
                            h[t * width + k] = alpha[t * width + k] * h[p + k] + beta[t * width + k];
                            prod[t * width + k] = alpha[t * width + k] * prod[p + k];
                        }
                    }
                }
            }
            // Pass 2: carry the final state of each chunk into the next,
            // (P, h̃) ∘ carry = P·carry + h̃.
            for start in (chunk..len).step_by(chunk) {
                let end = (start + chunk).min(len);
                let carry_row = step(start - 1) * width;
                let carry: Vec<Scalar> = h[carry_row..carry_row + width].to_vec();
                for i in start..end {
                    let t = step(i) * width;
                    for k in 0..width {
                        h[t + k] += prod[t + k] * carry[k];
                    }
                }
            }
        }
        _ => {
            for i in 0..len {
                let t = step(i) * width;
                if i == 0 {
                    h[t..t + width].copy_from_slice(&beta[t..t + width]);
                } else {
                    let p = step(i - 1) * width;
                    for k in 0..width {
                        h[t + k] = alpha[t + k] * h[p + k] + beta[t + k];
                    }
                }
            }
        }
    }
    h
}

/// Strictly sequential scan. This is the ground truth the chunked path is
/// checked against.
pub fn selective_scan_ref(inp: &ScanInputs) -> Result<ScanOutput> {
    scan_with(inp, ScanPath::Reference)
}

/// Chunk-composed scan; equal to [`selective_scan_ref`] up to rounding.
pub fn selective_scan_chunked(inp: &ScanInputs, chunk: usize) -> Result<ScanOutput> {
    if chunk < 1 {
        return Err(Error::Precondition("chunk must be at least 1".into()));
    }
    scan_with(inp, ScanPath::Chunked(chunk))
}

pub fn scan_with(inp: &ScanInputs, path: ScanPath) -> Result<ScanOutput> {
    scan_keep_transitions(inp, path).map(|(out, _)| out)
}

/// Like [`scan_with`], also returning the transitions for reuse by the
/// backward pass.
pub(crate) fn scan_keep_transitions(inp: &ScanInputs, path: ScanPath) -> Result<(ScanOutput, Transitions)> {
    inp.validate()?;
    let width = inp.channels * inp.states;
    let (tr, u) = inp.transitions();
    let h = affine_scan(&tr.abar, &u, inp.len, width, path, false);
    let y = inp.readout(&h);
    Ok((ScanOutput { y, h }, tr))
}

/// Reverse-mode pass of the scan given the forward hidden states and the
/// upstream gradient `dy` (`[L×D]`).
pub fn selective_scan_backward(inp: &ScanInputs, h: &[Scalar], dy: &[Scalar], path: ScanPath) -> Result<ScanGrads> {
    inp.validate()?;
    let (tr, _) = inp.transitions();
    scan_backward_with(inp, h, &tr, dy, path)
}

/// Backward pass with the forward transitions `ā` supplied.
pub(crate) fn scan_backward_with(
    inp: &ScanInputs,
    h: &[Scalar],
    tr: &Transitions,
    dy: &[Scalar],
    path: ScanPath,
) -> Result<ScanGrads> {
    let (l, d, n) = (inp.len, inp.channels, inp.states);
    let (abar, em1s) = (&tr.abar, &tr.em1);
    if h.len() != l * d * n || abar.len() != h.len() || em1s.len() != h.len() || dy.len() != l * d {
        return Err(Error::Precondition("scan backward buffer sizes".into()));
    }
    let width = d * n;

    // Adjoint recurrence: g_t = ā_{t+1} g_{t+1} + c_t dy_t.
    let mut alpha = vec![0.0; l * width];
    alpha[..(l - 1) * width].copy_from_slice(&abar[width..]);
    let mut beta = vec![0.0; l * width];
    for t in 0..l {
        for ch in 0..d {
            let g = dy[t * d + ch];
            for s in 0..n {
                beta[(t * d + ch) * n + s] = inp.c[t * n + s] * g;
            }
        }
    }
    let adj = affine_scan(&alpha, &beta, l, width, path, true);

    let mut grads = ScanGrads {
        x: vec![0.0; l * d],
        delta: vec![0.0; l * d],
        a: vec![0.0; d * n],
        b: vec![0.0; l * n],
        c: vec![0.0; l * n],
        d_skip: vec![0.0; d],
    };
    for t in 0..l {
        for ch in 0..d {
            let i = t * d + ch;
            let (dt, xv, gy) = (inp.delta[i], inp.x[i], dy[i]);
            grads.x[i] += inp.d_skip[ch] * gy;
            grads.d_skip[ch] += xv * gy;
            let mut dx = 0.0;
            let mut ddt = 0.0;
            for s in 0..n {
                let k = i * n + s;
                let av = inp.a[ch * n + s];
                let bv = inp.b[t * n + s];
                let z = dt * av;
                let ab = abar[k];
                let em1 = em1s[k];
                let coef = dt * phi_from(z, em1);
                let g = adj[k];
                let hprev = if t > 0 { h[k - width] } else { 0.0 };

                grads.c[t * n + s] += gy * h[k];
                let d_abar = g * hprev;
                dx += g * coef * bv;
                grads.b[t * n + s] += g * xv * coef;
                let d_coef = g * xv * bv;
                // ∂ā/∂Δ = a·ā, ∂coef/∂Δ = ā, ∂ā/∂a = Δ·ā, ∂coef/∂a = Δ²·φ'(Δa)
                ddt += d_abar * av * ab + d_coef * ab;
                grads.a[ch * n + s] += d_abar * dt * ab + d_coef * dt * dt * phi_prime_from(z, ab, em1);
            }
            grads.x[i] += dx;
            grads.delta[i] += ddt;
        }
    }
    Ok(grads)
}

/// Learnable parameters of one selective SSM over `D` channels with `N`
/// states and a rank-`R` step projection.
///
/// `A = -exp(a_log)` is strictly negative; the step `Δ = softplus(x·W_in·W_dt + b_dt)`
/// is strictly positive.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: Tensor,
    pub dt_in: Tensor,
    pub dt_proj: Tensor,
    pub dt_bias: Tensor,
    pub b_proj: Tensor,
    pub c_proj: Tensor,
    pub d_skip: Tensor,
}

/// Input-dependent quantities of a scan, computed from `x`.
#[derive(Clone, Debug)]
pub struct Selection {
    pub delta: Vec<Scalar>,
    pub b: Vec<Scalar>,
    pub c: Vec<Scalar>,
}

pub fn softplus(v: Scalar) -> Scalar {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid(v: Scalar) -> Scalar {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Default rank of the Δ projection for `channels` inner channels.
pub fn dt_rank(channels: usize) -> usize {
    channels.div_ceil(16).max(1)
}

/// Inverse of softplus, used to place the initial Δ.
pub fn inverse_softplus(y: Scalar) -> Scalar {
    y + (-(-y).exp_m1()).ln()
}

/// `A_log` initialised to `log(1..=N)` per channel (S4D-real).
pub fn init_a_log(channels: usize, states: usize) -> Tensor {
    let data = (0..channels).flat_map(|_| (1..=states).map(|s| (s as Scalar).ln())).collect();
    Tensor::new(&[channels, states], data).expect("positive extents")
}

/// Δ bias so that `softplus(bias)` is log-uniform in `[1e-3, 1e-1]`.
pub fn init_dt_bias<R: Rng>(channels: usize, rng: &mut R) -> Tensor {
    let u = Uniform::new(1e-3f64.ln(), 1e-1f64.ln());
    let data = (0..channels).map(|_| inverse_softplus(u.sample(rng).exp())).collect();
    Tensor::new(&[channels], data).expect("positive extents")
}

impl SsmParams {
    /// Randomly initialised parameters for `channels` inner channels.
    pub fn init<R: Rng>(channels: usize, states: usize, rng: &mut R) -> Self {
        let rank = dt_rank(channels);
        let dense = |rows: usize, cols: usize, rng: &mut R| {
            let bound = 1.0 / (rows as Scalar).sqrt();
            let u = Uniform::new_inclusive(-bound, bound);
            Tensor::new(&[rows, cols], (0..rows * cols).map(|_| u.sample(rng)).collect()).expect("positive extents")
        };
        Self {
            a_log: init_a_log(channels, states),
            dt_in: dense(channels, rank, rng),
            dt_proj: dense(rank, channels, rng),
            dt_bias: init_dt_bias(channels, rng),
            b_proj: dense(channels, states, rng),
            c_proj: dense(channels, states, rng),
            d_skip: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn states(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(A_log)`.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    /// Computes Δ, B and C for the sequence `x` (`[L×D]`).
    pub fn select(&self, x: &Tensor) -> Result<Selection> {
        let low = x.matmul(&self.dt_in)?;
        let mut pre = low.matmul(&self.dt_proj)?;
        let d = self.channels();
        for (i, v) in pre.data_mut().iter_mut().enumerate() {
            *v = softplus(*v + self.dt_bias.data()[i % d]);
        }
        Ok(Selection {
            delta: pre.into_data(),
            b: x.matmul(&self.b_proj)?.into_data(),
            c: x.matmul(&self.c_proj)?.into_data(),
        })
    }

    /// Runs the full selective SSM on `x` (`[L×D]`).
    pub fn forward(&self, x: &Tensor, path: ScanPath) -> Result<Tensor> {
        let [l, d] = *x.shape() else {
            return Err(Error::shape("selective_scan", x.shape(), &[0, self.channels()]));
        };
        if d != self.channels() {
            return Err(Error::shape("selective_scan", x.shape(), &[l, self.channels()]));
        }
        let sel = self.select(x)?;
        let a = self.a();
        let inp = ScanInputs {
            len: l,
            channels: d,
            states: self.states(),
            x: x.data(),
            delta: &sel.delta,
            a: a.data(),
            b: &sel.b,
            c: &sel.c,
            d_skip: self.d_skip.data(),
        };
        let out = scan_with(&inp, path)?;
        Tensor::new(&[l, d], out.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_inputs<'a>(
        x: &'a [f64],
        delta: &'a [f64],
        a: &'a [f64],
        b: &'a [f64],
        c: &'a [f64],
        d: &'a [f64],
    ) -> ScanInputs<'a> {
        ScanInputs { len: x.len(), channels: 1, states: 1, x, delta, a, b, c, d_skip: d }
    }

    #[test]
    fn zoh_closed_forms() {
        let (ab, _) = zoh_scalar(-1.0, 1.0, std::f64::consts::LN_2).unwrap();
        assert!((ab - 0.5).abs() < 1e-12);

        let (ab, bb) = zoh_scalar(-2.0, 3.0, 0.5).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((ab - e1).abs() < 1e-12);
        assert!((bb - (e1 - 1.0) / -1.0 * 1.5).abs() < 1e-12);
        assert!((bb - 0.948_18).abs() < 1e-4);
    }

    #[test]
    fn zoh_small_step_limit() {
        let (ab, bb) = zoh_scalar(-1.0, 2.0, 1e-9).unwrap();
        assert!((ab - 1.0).abs() < 1e-8);
        assert!((bb - 2e-9).abs() < 1e-16);
    }

    #[test]
    fn zoh_rejects_nonpositive_step() {
        assert!(matches!(zoh_scalar(-1.0, 1.0, 0.0), Err(Error::Precondition(_))));
        assert!(zoh_scalar(-1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn phi_branches_meet() {
        for z in [-2e-6, -1.0000001e-6, -0.9999999e-6, 1e-6, 3e-6] {
            let direct = if z == 0.0 { 1.0 } else { f64::exp_m1(z) / z };
            assert!((phi(z) - direct).abs() < 1e-14, "z={z}");
        }
        for z in [-0.5, -1e-3, -0.9e-3, 1e-4, 2.0] {
            let h = 1e-6;
            let fd = (phi(z + h) - phi(z - h)) / (2.0 * h);
            assert!((phi_prime(z) - fd).abs() < 1e-8, "z={z}");
        }
    }

    #[test]
    fn discretize_matrix_matches_scalar() {
        let a = Tensor::new(&[2, 2], vec![-1.0, -2.0, -0.5, -3.0]).unwrap();
        let (ab, bb) = discretize_zoh(&a, &[1.0, 2.0], &[0.1, 0.2]).unwrap();
        let (x, y) = zoh_scalar(-3.0, 2.0, 0.2).unwrap();
        assert_eq!(ab.data()[3], x);
        assert_eq!(bb.data()[3], y);
        assert!(discretize_zoh(&a, &[1.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn hand_rolled_two_step_recurrence() {
        // Choose a, Δ so ā = 0.5 and b so b̄ = 1.
        let dt = std::f64::consts::LN_2;
        let a = -1.0;
        let b = 1.0 / (dt * phi(dt * a));
        let out =
            selective_scan_ref(&scalar_inputs(&[1.0, 1.0], &[dt, dt], &[a], &[b, b], &[1.0, 1.0], &[0.0])).unwrap();
        assert!((out.y[0] - 1.0).abs() < 1e-12);
        assert!((out.y[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn memoryless_when_transition_vanishes() {
        // Very negative a drives ā to 0 (underflow) and b̄ to b/|a|·(1-0).
        let a = [-1e4];
        let x = [0.3, -1.2, 2.0];
        let out = selective_scan_ref(&scalar_inputs(&x, &[1.0; 3], &a, &[5.0; 3], &[2.0; 3], &[0.0])).unwrap();
        for (t, &xv) in x.iter().enumerate() {
            let bbar = 5.0 * (1.0 - 0.0) / 1e4;
            assert!((out.y[t] - 2.0 * bbar * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let out =
            selective_scan_ref(&scalar_inputs(&[0.0; 4], &[0.1; 4], &[-1.0], &[1.0; 4], &[1.0; 4], &[0.7])).unwrap();
        assert!(out.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let inp = scalar_inputs(&[1.0, f64::NAN], &[0.1; 2], &[-1.0], &[1.0; 2], &[1.0; 2], &[0.0]);
        assert!(matches!(selective_scan_ref(&inp), Err(Error::Numeric(_))));
        let inp = scalar_inputs(&[1.0, 1.0], &[0.1, 0.0], &[-1.0], &[1.0; 2], &[1.0; 2], &[0.0]);
        assert!(matches!(selective_scan_ref(&inp), Err(Error::Precondition(_))));
        let inp = scalar_inputs(&[1.0], &[0.1], &[-1.0], &[1.0], &[1.0], &[0.0]);
        assert!(selective_scan_chunked(&inp, 0).is_err());
    }

    #[test]
    fn chunk_extremes_match_reference_exactly() {
        let x = [0.5, -1.0, 2.0, 0.25, 1.5];
        let inp =
            scalar_inputs(&x, &[0.3, 0.2, 0.5, 0.1, 0.9], &[-0.7], &[1.0, 0.5, -1.0, 2.0, 0.3], &[1.0; 5], &[0.1]);
        let r = selective_scan_ref(&inp).unwrap();
        // chunk >= L takes the reference path verbatim
        assert_eq!(selective_scan_chunked(&inp, 5).unwrap().y, r.y);
        assert_eq!(selective_scan_chunked(&inp, 99).unwrap().y, r.y);
        // chunk = 1: each chunk is a single step, carry pass is the recurrence
        let c1 = selective_scan_chunked(&inp, 1).unwrap();
        for (p, q) in c1.y.iter().zip(&r.y) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let inp = scalar_inputs(&[1.0, 2.0], &[0.1, 0.2], &[-1.0], &[1.0, 0.5], &[0.3, 0.4], &[0.2]);
        let fwd = selective_scan_ref(&inp).unwrap();
        let g = selective_scan_backward(&inp, &fwd.h, &[0.0, 0.0], ScanPath::Reference).unwrap();
        for v in [&g.x, &g.delta, &g.a, &g.b, &g.c, &g.d_skip] {
            assert!(v.iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn params_produce_positive_steps_and_negative_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SsmParams::init(8, 4, &mut rng);
        assert!(p.a().data().iter().all(|&v| v < 0.0));
        let x = Tensor::new(&[5, 8], (0..40).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let sel = p.select(&x).unwrap();
        assert!(sel.delta.iter().all(|&v| v > 0.0));
        for &b in p.dt_bias.data() {
            let dt = softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt));
        }
        let y_ref = p.forward(&x, ScanPath::Reference).unwrap();
        let y_ch = p.forward(&x, ScanPath::Chunked(2)).unwrap();
        assert!(y_ref.max_abs_diff(&y_ch) < 1e-12);
    }
}
