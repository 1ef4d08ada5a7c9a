//! Finite-difference checks for every differentiable tape op and for the
//! whole encoder + decoder + loss graph, all in f64 on shapes no larger
//! than 2×4×8×8.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegnet::model::StegNet;
use stegnet::tensor::{
    gradient_check, gradient_check_at, BatchNormState, GradCheckReport, Result, Tape, Tensor, Var,
};

pub const TOLERANCE: f64 = 1e-4;

pub struct Case {
    pub name: String,
    pub report: GradCheckReport,
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-hi, -lo] ∪ [lo, hi]`, away from the kinks of abs and clip.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Smooth, non-uniformly weighted scalar summary of a node.
fn summarize(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let v = t.variance(y)?;
    let m = t.mean(y)?;
    t.add(v, m)
}

type Graph<'a> = Box<dyn FnMut(&mut Tape<f64>, Var) -> Result<Var> + 'a>;

fn check(name: &str, input: &Tensor<f64>, graph: Graph<'_>) -> Case {
    Case {
        name: name.to_string(),
        report: gradient_check(input, TOLERANCE, graph).unwrap_or_else(|e| panic!("{name}: {e}")),
    }
}

pub fn op_cases() -> Vec<Case> {
    let x = uniform(&[2, 4, 8, 8], -1.0, 1.0, 11);
    let y = uniform(&[2, 4, 8, 8], -1.0, 1.0, 12);
    let k3 = uniform(&[3, 4, 3, 3], -0.5, 0.5, 13);
    let b3 = uniform(&[3], -0.2, 0.2, 14);
    let dw = uniform(&[4, 1, 3, 3], -0.5, 0.5, 15);
    let pw = uniform(&[4, 4, 1, 1], -0.5, 0.5, 16);
    let pb = uniform(&[4], -0.2, 0.2, 17);
    let gamma = uniform(&[4], 0.5, 1.5, 18);
    let beta = uniform(&[4], -0.5, 0.5, 19);
    let nz = away_from_zero(&[2, 4, 8, 8], 0.05, 1.0, 20);
    let mut cases = Vec::new();

    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        let tag = format!("conv2d s{stride} p{padding}");
        let (xk, kk, bk) = (k3.clone(), b3.clone(), x.clone());
        cases.push(check(&format!("{tag} input"), &x, Box::new(move |t, v| {
            let (k, b) = (t.constant(xk.clone()), t.constant(kk.clone()));
            let o = t.conv2d(v, k, b, stride, padding)?;
            summarize(t, o)
        })));
        let (xi, bi) = (bk.clone(), b3.clone());
        cases.push(check(&format!("{tag} kernel"), &k3, Box::new(move |t, k| {
            let (i, b) = (t.constant(xi.clone()), t.constant(bi.clone()));
            let o = t.conv2d(i, k, b, stride, padding)?;
            summarize(t, o)
        })));
        let (xi, ki) = (bk, k3.clone());
        cases.push(check(&format!("{tag} bias"), &b3, Box::new(move |t, b| {
            let (i, k) = (t.constant(xi.clone()), t.constant(ki.clone()));
            let o = t.conv2d(i, k, b, stride, padding)?;
            summarize(t, o)
        })));
    }

    let (dwc, xc) = (dw.clone(), x.clone());
    cases.push(check("depthwise input", &x, Box::new(move |t, v| {
        let k = t.constant(dwc.clone());
        let o = t.depthwise_conv2d(v, k)?;
        summarize(t, o)
    })));
    cases.push(check("depthwise kernel", &dw, Box::new(move |t, k| {
        let i = t.constant(xc.clone());
        let o = t.depthwise_conv2d(i, k)?;
        summarize(t, o)
    })));

    let (dwc, pwc, pbc) = (dw.clone(), pw.clone(), pb.clone());
    cases.push(check("separable input", &x, Box::new(move |t, v| {
        let (d, p, b) = (t.constant(dwc.clone()), t.constant(pwc.clone()), t.constant(pbc.clone()));
        let o = t.separable_conv2d(v, d, p, b)?;
        summarize(t, o)
    })));
    let (xc, dwc, pbc) = (x.clone(), dw.clone(), pb.clone());
    cases.push(check("separable pointwise", &pw, Box::new(move |t, p| {
        let (i, d, b) = (t.constant(xc.clone()), t.constant(dwc.clone()), t.constant(pbc.clone()));
        let o = t.separable_conv2d(i, d, p, b)?;
        summarize(t, o)
    })));

    for training in [true, false] {
        let mode = if training { "train" } else { "eval" };
        let state = {
            let mut s = BatchNormState::<f64>::new(4);
            s.running_mean = uniform(&[4], -0.3, 0.3, 21);
            s.running_var = uniform(&[4], 0.5, 2.0, 22);
            s.training = training;
            s
        };
        let (g, b, st) = (gamma.clone(), beta.clone(), state.clone());
        cases.push(check(&format!("batch_norm {mode} input"), &x, Box::new(move |t, v| {
            let mut st = st.clone();
            let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
            let o = t.batch_norm(v, g, b, &mut st)?;
            summarize(t, o)
        })));
        let (xi, b, st) = (x.clone(), beta.clone(), state.clone());
        cases.push(check(&format!("batch_norm {mode} gamma"), &gamma, Box::new(move |t, g| {
            let mut st = st.clone();
            let (i, b) = (t.constant(xi.clone()), t.constant(b.clone()));
            let o = t.batch_norm(i, g, b, &mut st)?;
            summarize(t, o)
        })));
        let (xi, g, st) = (x.clone(), gamma.clone(), state);
        cases.push(check(&format!("batch_norm {mode} beta"), &beta, Box::new(move |t, b| {
            let mut st = st.clone();
            let (i, g) = (t.constant(xi.clone()), t.constant(g.clone()));
            let o = t.batch_norm(i, g, b, &mut st)?;
            summarize(t, o)
        })));
    }

    cases.push(check("elu", &nz, Box::new(|t, v| {
        let o = t.elu(v, 1.0);
        summarize(t, o)
    })));
    cases.push(check("sigmoid", &x, Box::new(|t, v| {
        let o = t.sigmoid(v);
        summarize(t, o)
    })));
    let yc = y.clone();
    cases.push(check("add", &x, Box::new(move |t, v| {
        let w = t.constant(yc.clone());
        let o = t.add(v, w)?;
        summarize(t, o)
    })));
    let yc = y.clone();
    cases.push(check("sub", &x, Box::new(move |t, v| {
        let w = t.constant(yc.clone());
        let o = t.sub(w, v)?;
        summarize(t, o)
    })));
    cases.push(check("abs", &nz, Box::new(|t, v| {
        let o = t.abs(v);
        summarize(t, o)
    })));
    cases.push(check("scale", &x, Box::new(|t, v| {
        let o = t.scale(v, -2.5);
        summarize(t, o)
    })));
    // magnitudes in [0.05, 0.4] or [0.5, 1.0]: clear of the ±0.45 bounds
    let inner = away_from_zero(&[2, 4, 8, 8], 0.05, 0.4, 23);
    let outer = away_from_zero(&[2, 4, 8, 8], 0.5, 1.0, 25);
    let mut clip_in = inner;
    for (i, (v, o)) in clip_in.data_mut().iter_mut().zip(outer.data()).enumerate() {
        if i % 3 == 0 {
            *v = *o;
        }
    }
    cases.push(check("clip", &clip_in, Box::new(|t, v| {
        let o = t.clip(v, -0.45, 0.45)?;
        summarize(t, o)
    })));
    let xc = x.clone();
    let other = uniform(&[2, 3, 8, 8], 0.0, 1.0, 24);
    cases.push(check("concat_channels", &other, Box::new(move |t, v| {
        let a = t.constant(xc.clone());
        let o = t.concat_channels(a, v)?;
        summarize(t, o)
    })));
    cases.push(check("mean", &x, Box::new(|t, v| t.mean(v))));
    cases.push(check("variance", &x, Box::new(|t, v| t.variance(v))));
    cases.push(check("row_variance", &x, Box::new(|t, v| {
        let r = t.row_variance(v)?;
        summarize(t, r)
    })));
    // nz and y + 2 never meet
    let yc = y.map(|v| v + 2.0);
    cases.push(check("mean_abs_diff", &nz, Box::new(move |t, v| {
        let z = t.constant(yc.clone());
        t.mean_abs_diff(v, z)
    })));
    cases
}

/// Minimum distance between model outputs and their loss targets; the
/// absolute-error loss is not differentiable where they meet.
fn kink_margin(net: &StegNet<f64>, cover: &Tensor<f64>, hidden: &Tensor<f64>) -> f64 {
    let mut net = net.clone();
    let mut t = Tape::new();
    let c = t.constant(cover.clone());
    let h = t.constant(hidden.clone());
    let vars: Vec<Var> = net.parameters().into_iter().map(|(_, p)| t.constant(p.clone())).collect();
    let p = net.pass(&mut t, c, h, &vars).unwrap();
    let gap = |a: &Tensor<f64>, b: &Tensor<f64>| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(f64::INFINITY, f64::min)
    };
    gap(t.value(p.embedded), cover).min(gap(t.value(p.decoded), hidden))
}

/// Elements probed per parameter tensor in the network check.
pub const NETWORK_PROBES: usize = 12;

pub fn network_cases() -> Vec<Case> {
    let mut net = StegNet::<f64>::new(3);
    net.set_training(true);
    // finite differences straddling |E - C| = 0 or |D - H| = 0 are meaningless
    let (cover, hidden) = (0..)
        .map(|s| (uniform(&[2, 3, 8, 8], 0.05, 0.95, 100 + 2 * s), uniform(&[2, 3, 8, 8], 0.05, 0.95, 101 + 2 * s)))
        .find(|(c, h)| kink_margin(&net, c, h) > 1e-3)
        .expect("some seed keeps outputs off their targets");

    let graph = |slot: Option<usize>, hidden_probe: bool| {
        let net = net.clone();
        let (cover, hidden) = (cover.clone(), hidden.clone());
        move |t: &mut Tape<f64>, probe: Var| -> Result<Var> {
            let mut net = net.clone();
            let c = if slot.is_none() && !hidden_probe { probe } else { t.constant(cover.clone()) };
            let h = if hidden_probe { probe } else { t.constant(hidden.clone()) };
            let vars: Vec<Var> = net
                .parameters()
                .into_iter()
                .enumerate()
                .map(|(i, (_, p))| if Some(i) == slot { probe } else { t.constant(p.clone()) })
                .collect();
            Ok(net.pass(t, c, h, &vars)?.loss.total)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut probes = |len: usize| -> Vec<usize> {
        let mut v = sample(&mut rng, len, NETWORK_PROBES.min(len)).into_vec();
        v.sort_unstable();
        v
    };
    let mut cases = Vec::new();
    for (name, t, hidden_probe) in [("network cover", &cover, false), ("network hidden", &hidden, true)] {
        let idx = probes(t.len());
        let report = gradient_check_at(t, &idx, TOLERANCE, graph(None, hidden_probe)).unwrap();
        cases.push(Case { name: name.into(), report });
    }
    let params: Vec<(String, Tensor<f64>)> = net.parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (i, (name, p)) in params.iter().enumerate() {
        let idx = probes(p.len());
        let report = gradient_check_at(p, &idx, TOLERANCE, graph(Some(i), false)).unwrap();
        cases.push(Case { name: format!("network {name}"), report });
    }
    cases
}
