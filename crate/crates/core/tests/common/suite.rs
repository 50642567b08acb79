//! The gradient-check cases, shared by the unit-style tests and the
//! acceptance run.

use std::rc::Rc;

use qmamba_core::model::{Preset, QMamba, QMambaConfig};
use qmamba_core::params::ParamStore;
use qmamba_core::scan2d::{apply_order_var, build_cross_scan, build_local_scan, merge_directions_var, ScanMode};
use qmamba_core::ssm::ScanPath;
use qmamba_core::styleprompt::StylePrompt;
use qmamba_core::tape::{conv1x1, global_avg_pool};
use qmamba_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_op, check_params, perturb_zeros, project, random};

pub type Checks = Vec<(String, f64)>;

pub fn elementwise_and_broadcast() -> Checks {
    let a = random(&[3, 4], -2.0, 2.0, 1);
    let b = random(&[3, 4], -2.0, 2.0, 2);
    let row = random(&[4], -2.0, 2.0, 3);
    let mut out = Checks::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));
    push("add", check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])));
    push("add_bcast", check_op(&[a.clone(), row.clone()], |t, v| t.add(v[0], v[1])));
    push("sub", check_op(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])));
    push("mul", check_op(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])));
    push("mul_bcast", check_op(&[a.clone(), row], |t, v| t.mul(v[0], v[1])));
    push("mul_self", check_op(std::slice::from_ref(&a), |t, v| t.mul(v[0], v[0])));
    push("scale", check_op(std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7))));
    push("add_scalar", check_op(std::slice::from_ref(&a), |t, v| Ok(t.add_scalar(v[0], 0.3))));
    push("silu", check_op(std::slice::from_ref(&a), |t, v| Ok(t.silu(v[0]))));
    push("exp", check_op(std::slice::from_ref(&a), |t, v| Ok(t.exp(v[0]))));
    push("softplus", check_op(std::slice::from_ref(&a), |t, v| Ok(t.softplus(v[0]))));
    push("softmax", check_op(std::slice::from_ref(&a), |t, v| Ok(t.softmax(v[0]))));
    push("mean_leading", check_op(std::slice::from_ref(&a), |t, v| Ok(t.mean_leading(v[0]))));
    push("mean", check_op(std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0]))));
    push("sum", check_op(std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0]))));
    push("layer_norm", check_op(std::slice::from_ref(&a), |t, v| Ok(t.layer_norm(v[0]))));
    push("reshape", check_op(&[a], |t, v| t.reshape(v[0], &[2, 6])));
    out
}

pub fn linear_algebra_and_convolution() -> Checks {
    let a = random(&[3, 5], -1.0, 1.0, 4);
    let b = random(&[5, 2], -1.0, 1.0, 5);
    let mut out = Checks::new();
    out.push(("matmul".into(), check_op(&[a, b], |t, v| t.matmul(v[0], v[1]))));

    let x = random(&[4, 5, 3], -1.0, 1.0, 6);
    let w = random(&[3, 3, 3], -1.0, 1.0, 7);
    let bias = random(&[3], -1.0, 1.0, 8);
    out.push(("dwconv3x3".into(), check_op(&[x.clone(), w, bias], |t, v| t.dwconv3x3(v[0], v[1], v[2]))));

    let w1 = random(&[3, 2], -1.0, 1.0, 9);
    let b1 = random(&[2], -1.0, 1.0, 10);
    out.push(("conv1x1".into(), check_op(&[x.clone(), w1, b1], |t, v| conv1x1(t, v[0], v[1], v[2]))));
    out.push(("global_avg_pool".into(), check_op(std::slice::from_ref(&x), |t, v| Ok(global_avg_pool(t, v[0])))));

    // repeated indices exercise the scatter-add path
    let idx: Rc<[usize]> = vec![0, 5, 5, 59, 12, 0].into();
    out.push(("gather".into(), check_op(&[x], |t, v| t.gather(v[0], idx.clone(), &[2, 3]))));
    out
}

pub fn scan_orders() -> Checks {
    let f = random(&[5, 3, 2], -1.0, 1.0, 11);
    let mut out = Checks::new();
    for orders in [build_cross_scan(5, 3).unwrap(), build_local_scan(5, 3, 2).unwrap()] {
        for o in orders.iter() {
            out.push((
                format!("apply_order {}", o.label()),
                check_op(std::slice::from_ref(&f), |t, v| apply_order_var(t, v[0], o)),
            ));
        }
        let ys: Vec<Tensor> = (0..4).map(|k| random(&[15, 2], -1.0, 1.0, 20 + k)).collect();
        let e = check_op(&ys, |t, v| merge_directions_var(t, [v[0], v[1], v[2], v[3]], &orders));
        out.push((format!("merge_directions {}", orders[0].label()), e));
    }
    out
}

pub fn selective_scan_both_paths() -> Checks {
    let (l, d, n) = (9, 3, 2);
    let inputs = [
        random(&[l, d], -1.0, 1.0, 30),
        random(&[l, d], 0.05, 0.8, 31),
        random(&[d, n], -2.0, -0.2, 32),
        random(&[l, n], -1.0, 1.0, 33),
        random(&[l, n], -1.0, 1.0, 34),
        random(&[d], -1.0, 1.0, 35),
    ];
    let mut out = Checks::new();
    for path in [ScanPath::Reference, ScanPath::Chunked(1), ScanPath::Chunked(4), ScanPath::Chunked(64)] {
        let e = check_op(&inputs, |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], path));
        out.push((format!("selective_scan {path:?}"), e));
    }
    // |Δ·a| straddles the series threshold of the discretisation
    let mut small = inputs.clone();
    small[1] = random(&[l, d], 2e-5, 5e-5, 36);
    small[2] = random(&[d, n], -0.03, -0.01, 37);
    let e = check_op(&small, |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], ScanPath::Reference));
    out.push(("selective_scan small delta".into(), e));
    out
}

pub fn styleprompt_adapter() -> Checks {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut store = ParamStore::new();
    let sp = StylePrompt::new(&mut store, 0, 4, 3, 2, &mut rng).unwrap();
    perturb_zeros(&mut store, 41);
    let f = random(&[6, 4], -1.0, 1.0, 42);
    let input = check_op(std::slice::from_ref(&f), |t, v| {
        let b = store.bind(t, false);
        sp.forward(t, &b, v[0])
    });
    let (params, _, name) = check_params(&store, 1.0, 43, |t, b| {
        let x = t.constant(f.clone());
        let y = sp.forward(t, b, x)?;
        Ok(project(t, y))
    });
    vec![("styleprompt input".into(), input), (format!("styleprompt params (worst {name})"), params)]
}

/// Every operation-level case.
pub fn all_ops() -> Checks {
    [
        elementwise_and_broadcast(),
        linear_algebra_and_convolution(),
        scan_orders(),
        selective_scan_both_paths(),
        styleprompt_adapter(),
    ]
    .concat()
}

pub struct ModelCheck {
    pub worst: f64,
    pub checked: usize,
    pub total: usize,
    pub worst_name: String,
}

/// Samples 1% of the parameters of a small but complete model.
pub fn model_check(mode: ScanMode, prompts: usize, mlp_ratio: usize) -> ModelCheck {
    let mut cfg = QMambaConfig::preset(Preset::Desk, mode);
    cfg.embed_dims = vec![8, 12];
    cfg.n_state = 3;
    cfg.windows = vec![3, 2];
    cfg.head_hidden = 8;
    cfg.prompts = prompts;
    cfg.mlp_ratio = mlp_ratio;
    cfg.scan_chunk = 5;
    let mut store = ParamStore::new();
    let model = QMamba::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(50)).unwrap();
    perturb_zeros(&mut store, 51);
    let img = random(&[20, 24, 3], 0.0, 1.0, 52);
    let (worst, checked, worst_name) = check_params(&store, 0.01, 53, |t, b| {
        let x = t.constant(img.clone());
        model.forward(t, b, x)
    });
    ModelCheck { worst, checked, total: store.count(), worst_name }
}
