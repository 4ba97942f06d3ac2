#![allow(dead_code)]

use nowcast_core::data::{extract_windows, synthesize, SampleWindow, SynthConfig, WindowLayout};
use nowcast_core::metrics::{loss_on_graph, MetricKind, Variable};
use nowcast_core::model::{EncoderForecaster, ModelConfig};
use nowcast_core::nn::{GruCell, GruVariant, ParamStore, ProjectionHead, ResidualBlock};
use nowcast_core::tensor::kernels::LogitTransform;
use nowcast_core::tensor::{Graph, Tensor, Var};
use nowcast_core::train::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const SINGLE_OP_LIMIT: f64 = 1e-5;
pub const COMPOSED_LIMIT: f64 = 1e-4;
/// Entries checked per tensor; larger tensors are sampled.
const MAX_ENTRIES: usize = 48;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Uniform in ±[gap, 1], keeping clear of the kink at zero.
pub fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(gap..1.0);
        if r.gen() {
            m
        } else {
            -m
        }
    })
}

/// Reduce any output to a scalar with fixed random weights so every output
/// entry gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, out: Var) -> Var {
    if g.shape(out).is_empty() {
        return out;
    }
    let shape = g.shape(out).to_vec();
    let w = g.constant(uniform(&shape, 0xC0FFEE, -1.0, 1.0));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn picks(len: usize, seed: u64) -> Vec<usize> {
    if len <= MAX_ENTRIES {
        return (0..len).collect();
    }
    let mut r = rng(seed);
    (0..MAX_ENTRIES).map(|_| r.gen_range(0..len)).collect()
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub type InputFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Largest norm-wise relative error between backward and central
/// differences over all inputs.
pub fn check_inputs(inputs: &[Tensor<f64>], f: &InputFn) -> f64 {
    let loss_of = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars);
        let l = project(&mut g, out);
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars);
    let l = project(&mut g, out);
    g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let grad = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let idx = picks(inputs[i].len(), i as u64);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &k in &idx {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] += FD_STEP;
            let up = loss_of(&xs);
            xs[i].data_mut()[k] -= 2.0 * FD_STEP;
            let down = loss_of(&xs);
            a.push(grad.data()[k]);
            n.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_error(&a, &n));
    }
    worst
}

pub type ParamFn<'a> = dyn Fn(&ParamStore<f64>, &mut Graph<f64>) -> Var + 'a;

/// As [`check_inputs`], over every tensor of a parameter store.
pub fn check_params(store: &ParamStore<f64>, f: &ParamFn) -> f64 {
    check_params_each(store, f).into_iter().fold(0.0, f64::max)
}

/// Relative error of each parameter tensor, in store order.
pub fn check_params_each(store: &ParamStore<f64>, f: &ParamFn) -> Vec<f64> {
    let loss_of = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let out = f(s, &mut g);
        let l = project(&mut g, out);
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let out = f(store, &mut g);
    let l = project(&mut g, out);
    g.backward(l).unwrap();
    let grads = g.param_grads(&store.shapes());
    let mut errors = Vec::with_capacity(grads.len());
    for (i, grad) in grads.iter().enumerate() {
        let idx = picks(grad.len(), 100 + i as u64);
        let mut a = Vec::new();
        let mut n = Vec::new();
        let mut s = store.clone();
        for &k in &idx {
            let orig = s.tensors()[i].data()[k];
            s.tensors_mut()[i].data_mut()[k] = orig + FD_STEP;
            let up = loss_of(&s);
            s.tensors_mut()[i].data_mut()[k] = orig - FD_STEP;
            let down = loss_of(&s);
            s.tensors_mut()[i].data_mut()[k] = orig;
            a.push(grad.data()[k]);
            n.push((up - down) / (2.0 * FD_STEP));
        }
        errors.push(rel_error(&a, &n));
    }
    errors
}

/// Give every rank-1 parameter (biases, constant inputs) small random values
/// so their gradients are not trivially structured.
pub fn randomize_vectors(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        if t.rank() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
        }
    }
}

/// `(name, relative error)` for every differentiable primitive.
pub fn single_op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    for (k, s) in [(3, 1), (3, 2), (1, 1), (1, 2), (5, 1)] {
        let x = uniform(&[2, 3, 6, 6], 1, -1.0, 1.0);
        let w = uniform(&[4, 3, k, k], 2, -0.5, 0.5);
        let b = uniform(&[4], 3, -0.5, 0.5);
        let e = check_inputs(&[x, w, b], &|g, v| g.conv2d(v[0], v[1], v[2], s, k / 2).unwrap());
        push(&format!("conv2d k={k} stride={s}"), e);
    }
    let x = uniform(&[2, 3, 4, 5], 4, -1.0, 1.0);
    push("upsample2x", check_inputs(&[x], &|g, v| g.upsample2x(v[0]).unwrap()));

    let a = uniform(&[2, 3, 4], 5, -1.0, 1.0);
    let b = uniform(&[2, 3, 4], 6, -1.0, 1.0);
    let s = uniform(&[], 7, -1.0, 1.0);
    push("add", check_inputs(&[a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap()));
    push("sub", check_inputs(&[a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap()));
    push("mul", check_inputs(&[a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap()));
    push(
        "mul scalar broadcast",
        check_inputs(&[a.clone(), s], &|g, v| g.mul(v[0], v[1]).unwrap()),
    );
    push("scale", check_inputs(std::slice::from_ref(&a), &|g, v| g.scale(v[0], -1.7)));
    let wide = uniform(&[2, 3, 4], 8, -4.0, 4.0);
    push("sigmoid", check_inputs(std::slice::from_ref(&wide), &|g, v| g.sigmoid(v[0])));
    push("tanh", check_inputs(std::slice::from_ref(&wide), &|g, v| g.tanh(v[0])));
    push("one_minus", check_inputs(std::slice::from_ref(&a), &|g, v| g.one_minus(v[0])));
    let kinked = away_from_zero(&[2, 3, 4], 9, 0.05);
    push("leaky_relu", check_inputs(std::slice::from_ref(&kinked), &|g, v| g.leaky_relu(v[0], 0.2)));
    // Half the entries inside the clamp range, half outside, none near a bound.
    let straddle = kinked.map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 1.25 } else { v });
    push("clamp", check_inputs(&[straddle], &|g, v| g.clamp(v[0], -0.5, 0.5)));
    let c1 = uniform(&[2, 2, 3, 3], 10, -1.0, 1.0);
    let c2 = uniform(&[2, 3, 3, 3], 11, -1.0, 1.0);
    push(
        "concat_channels",
        check_inputs(&[c1, c2.clone()], &|g, v| g.concat_channels(v[0], v[1]).unwrap()),
    );
    push(
        "slice_channels",
        check_inputs(std::slice::from_ref(&c2), &|g, v| g.slice_channels(v[0], 1, 2).unwrap()),
    );
    let cv = uniform(&[3], 12, -1.0, 1.0);
    push(
        "expand_channels",
        check_inputs(&[cv], &|g, v| g.expand_channels(v[0], 2, 3, 4).unwrap()),
    );
    let seq = uniform(&[2, 3, 2, 2, 2], 13, -1.0, 1.0);
    push(
        "select_axis1",
        check_inputs(&[seq], &|g, v| g.select_axis1(v[0], 1).unwrap()),
    );
    push(
        "stack_axis1",
        check_inputs(&[c2.clone(), c2.map(|v| v * 0.5)], &|g, v| {
            g.stack_axis1(&[v[0], v[1], v[0]]).unwrap()
        }),
    );
    push("sum", check_inputs(std::slice::from_ref(&a), &|g, v| g.sum(v[0])));
    push(
        "reduce_mean",
        check_inputs(std::slice::from_ref(&a), &|g, v| g.reduce_mean(v[0], None).unwrap()),
    );
    let mask = Tensor::from_fn(&[2, 3, 4], |i| (i % 3 != 0) as u8 as f64);
    push(
        "reduce_mean masked",
        check_inputs(&[a], &|g, v| g.reduce_mean(v[0], Some(&mask)).unwrap()),
    );
    let p = uniform(&[2, 3, 4], 14, 0.05, 0.95);
    let lt = LogitTransform::new(1e-3).unwrap();
    push("logit_transform", check_inputs(&[p], &|g, v| g.logit_transform(v[0], lt)));
    out
}

pub fn tiny_model_config(variant: GruVariant) -> ModelConfig {
    ModelConfig {
        variant,
        depth: 2,
        stage_channels: vec![2, 3],
        input_channels: 2,
        input_frames: 2,
        output_frames: 3,
        gru_kernel: 3,
        block_kernel: 3,
    }
}

/// `(name, relative error)` for blocks, cells, the head, losses and a whole
/// miniature model.
pub fn composed_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();

    for (name, cin, cout, stride, post) in [
        ("residual block identity shortcut", 3, 3, 1, true),
        ("residual block projected shortcut stride 2", 2, 4, 2, true),
        ("residual block without post activation", 3, 2, 1, false),
    ] {
        let mut store = ParamStore::<f64>::new();
        let b = ResidualBlock::new(&mut store, &mut rng(20), "b", cin, cout, 3, stride, post)
            .unwrap();
        randomize_vectors(&mut store, 21);
        let x = uniform(&[1, cin, 4, 4], 22, -1.0, 1.0);
        let f = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
            let xv = g.constant(x.clone());
            b.forward(s, g, &xv).unwrap()
        };
        out.push((format!("{name} (weights)"), check_params(&store, &f)));
        let fx = |g: &mut Graph<f64>, v: &[Var]| b.forward(&store, g, &v[0]).unwrap();
        out.push((format!("{name} (input)"), check_inputs(std::slice::from_ref(&x), &fx)));
    }

    for variant in [GruVariant::ConvGru, GruVariant::ResGru] {
        let mut store = ParamStore::<f64>::new();
        let c = GruCell::new(&mut store, &mut rng(30), "g", variant, 2, 3, 3, true).unwrap();
        randomize_vectors(&mut store, 31);
        let x = uniform(&[1, 2, 4, 4], 32, -1.0, 1.0);
        let h = uniform(&[1, 3, 4, 4], 33, -1.0, 1.0);
        let f = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
            let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
            c.step(s, g, &xv, &hv).unwrap()
        };
        out.push((format!("{variant} step (weights)"), check_params(&store, &f)));
        let fx = |g: &mut Graph<f64>, v: &[Var]| c.step(&store, g, &v[0], &v[1]).unwrap();
        out.push((
            format!("{variant} step (input, state)"),
            check_inputs(&[x.clone(), h.clone()], &fx),
        ));
        let fu = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
            let hv = g.constant(h.clone());
            let states = c.unroll(s, g, None, &hv, 3).unwrap();
            g.stack_axis1(&states).unwrap()
        };
        out.push((
            format!("{variant} 3-step unroll with constant input"),
            check_params(&store, &fu),
        ));
    }

    let mut store = ParamStore::<f64>::new();
    let head = ProjectionHead::new(&mut store, &mut rng(40), "head", 3).unwrap();
    randomize_vectors(&mut store, 41);
    let x = uniform(&[2, 3, 3, 3], 42, -1.0, 1.0);
    let f = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let xv = g.constant(x.clone());
        head.forward(s, g, &xv).unwrap()
    };
    out.push(("projection head".into(), check_params(&store, &f)));

    let target = uniform(&[2, 3, 4], 43, 0.0, 1.0);
    let mask = Tensor::from_fn(&[2, 3, 4], |i| (i % 4 != 1) as u8 as f64);
    for kind in [MetricKind::Mse, MetricKind::MaskedMse, MetricKind::LogitMse] {
        let p = uniform(&[2, 3, 4], 44, -2.0, 2.0);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let pred = g.sigmoid(v[0]);
            loss_on_graph(g, pred, &target, &mask, kind, 1e-3).unwrap()
        };
        out.push((format!("{} loss", kind.name()), check_inputs(&[p], &f)));
    }

    for variant in [GruVariant::ConvGru, GruVariant::ResGru] {
        let cfg = tiny_model_config(variant);
        let mut model = EncoderForecaster::<f64>::build(&cfg, 50).unwrap();
        randomize_vectors(model.params_mut(), 51);
        // At two or three channels the default initialization attenuates the
        // signal reaching the deep encoder gates until their gradients sit at
        // the round-off floor of the finite differences; larger kernels keep
        // every gradient well above it.
        for t in model.params_mut().tensors_mut() {
            if t.rank() == 4 {
                t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            }
        }
        let x = uniform(&[1, 2, 2, 8, 8], 52, 0.0, 1.0);
        let f = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
            let mut m = model.clone();
            *m.params_mut() = s.clone();
            let xv = g.constant(x.clone());
            m.forward(g, &xv).unwrap()
        };
        out.push((format!("{variant} depth-2 model"), check_params(model.params(), &f)));
    }
    out
}

/// Windows cut from a freshly synthesized single-sequence archive.
pub fn synth_windows(
    frames: usize,
    size: usize,
    variable: Variable,
    input_frames: usize,
    output_frames: usize,
    seed: u64,
) -> Vec<SampleWindow> {
    let cfg = SynthConfig {
        sequences: 1,
        frames_per_sequence: frames,
        height: size,
        width: size,
        seed,
        ..SynthConfig::default()
    };
    let a = synthesize(&cfg).unwrap();
    let layout = WindowLayout {
        input_frames,
        output_frames,
        target_channel: a.channel_index(variable.name()).unwrap(),
    };
    extract_windows(&a, layout, "synthetic").unwrap()
}

/// A small, fast run configuration for trajectory tests.
pub fn tiny_run(seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = ModelConfig {
        variant: GruVariant::ConvGru,
        depth: 2,
        stage_channels: vec![4, 6],
        input_channels: 7,
        input_frames: 4,
        output_frames: 4,
        gru_kernel: 3,
        block_kernel: 3,
    };
    run.train.batch_size = 3;
    run.train.seed = seed;
    run.train.budget_epochs = 3;
    run.train.augment = true;
    run
}

/// Straight-line logit transform, clipped at `eps` and `1 - eps`.
pub fn oracle_logit(x: f64, eps: f64) -> f64 {
    let c = x.clamp(eps, 1.0 - eps);
    let lo = (eps / (1.0 - eps)).ln();
    let hi = ((1.0 - eps) / eps).ln();
    ((c / (1.0 - c)).ln() - lo) / (hi - lo)
}

/// Largest relative deviation of the library metrics from loop oracles over
/// `instances` random cases.
pub fn metric_oracle_error(instances: usize, seed: u64) -> f64 {
    use nowcast_core::metrics::{logit_mse, masked_mse, mse, quantized_mse};
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut note = |got: f64, want: f64| {
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    };
    for _ in 0..instances {
        let n = r.gen_range(1..200);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let mut m: Vec<f64> = (0..n).map(|_| f64::from(r.gen_bool(0.7) as u8)).collect();
        m[0] = 1.0;
        let b: Vec<f64> = (0..n).map(|_| f64::from(r.gen_bool(0.5) as u8)).collect();
        let eps = r.gen_range(1e-4..0.1);

        let (mut s, mut ms, mut mc, mut ls, mut wrong) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let d = p[i] - t[i];
            s += d * d;
            if m[i] == 1.0 {
                ms += d * d;
                mc += 1.0;
            }
            let l = oracle_logit(p[i], eps) - oracle_logit(t[i], eps);
            ls += l * l;
            if (p[i] >= 0.5) != (b[i] == 1.0) {
                wrong += 1.0;
            }
        }
        let n = n as f64;
        note(mse(&p, &t).unwrap(), s / n);
        note(masked_mse(&p, &t, &m).unwrap(), ms / mc);
        note(logit_mse(&p, &t, eps).unwrap(), ls / n);
        note(quantized_mse(&p, &b).unwrap(), wrong / n);
    }
    worst
}

/// Declarative reading of the plateau rules for a metric history: the stale
/// count of epoch `e` is `e` minus the epoch of the last strict minimum; the
/// rate is divided by 5 each time a stale count hits 3, 6 or 9; a stale count
/// of 10 stops. Returns `(improved, lr after the epoch, stopped)` per epoch
/// up to and including the stopping one.
pub fn oracle_schedule(metrics: &[f64], lr0: f64) -> Vec<(bool, f64, bool)> {
    let mut out = Vec::new();
    let mut last_best: Option<usize> = None;
    let mut lr = lr0;
    for (e, &m) in metrics.iter().enumerate() {
        let improved = metrics[..e].iter().all(|&p| m < p);
        if improved {
            last_best = Some(e);
        }
        let stale = match last_best {
            Some(b) => e - b,
            None => e + 1,
        };
        if !improved && [3, 6, 9].contains(&stale) {
            lr /= 5.0;
        }
        let stopped = stale >= 10;
        out.push((improved, lr, stopped));
        if stopped {
            break;
        }
    }
    out
}

/// Runs every metric sequence over a three-value alphabet up to `max_len`
/// epochs through the scheduler and compares with [`oracle_schedule`].
/// Returns the number of sequences checked, or the first disagreement.
pub fn scheduler_conformance(max_len: u32) -> Result<usize, String> {
    use nowcast_core::train::SchedulerState;
    let mut cases = 0;
    for len in 1..=max_len {
        for code in 0..3usize.pow(len) {
            let metrics: Vec<f64> = (0..len)
                .map(|k| [1.0, 2.0, 3.0][(code / 3usize.pow(k)) % 3])
                .collect();
            let want = oracle_schedule(&metrics, 1e-3);
            let mut s = SchedulerState::new(1e-3);
            for (e, &(improved, lr, stopped)) in want.iter().enumerate() {
                let ev = s.update(metrics[e]).map_err(|e| e.to_string())?;
                if ev.improved != improved || s.lr != lr || ev.stopped != stopped || s.stopped != stopped {
                    return Err(format!(
                        "{metrics:?} epoch {}: got ({}, {}, {}), want ({improved}, {lr}, {stopped})",
                        e + 1,
                        ev.improved,
                        s.lr,
                        ev.stopped
                    ));
                }
            }
            if s.stopped && s.update(0.0).is_ok() {
                return Err(format!("{metrics:?}: update accepted after stop"));
            }
            cases += 1;
        }
    }
    Ok(cases)
}

/// Windows used by the trajectory tests.
pub fn trajectory_windows() -> Vec<SampleWindow> {
    synth_windows(12, 16, Variable::Temperature, 4, 4, 3)
}

pub fn checkpoint_bytes(c: &nowcast_core::train::Checkpoint) -> Vec<u8> {
    let mut v = Vec::new();
    c.write_to(&mut v).unwrap();
    v
}

/// Three epochs in one go versus one epoch then a resume from `last.ckpt`.
/// Returns `(uninterrupted, resumed)` final checkpoints and history files.
pub fn interrupted_and_straight(
    seed: u64,
) -> ((Vec<u8>, String), (Vec<u8>, String)) {
    use nowcast_core::train::{Checkpoint, Trainer, HISTORY_FILE, LAST_CHECKPOINT};
    let ws = trajectory_windows();
    let cfg = tiny_run(seed);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();

    Trainer::new(&cfg).unwrap().train(&ws, &ws, Some(a.path()), |_| {}).unwrap();

    let mut first = cfg.clone();
    first.train.budget_epochs = 1;
    Trainer::new(&first).unwrap().train(&ws, &ws, Some(b.path()), |_| {}).unwrap();
    let ck = Checkpoint::load(b.path().join(LAST_CHECKPOINT)).unwrap();
    Trainer::resume(&ck, &cfg).unwrap().train(&ws, &ws, Some(b.path()), |_| {}).unwrap();

    let read = |d: &std::path::Path| {
        let ck = Checkpoint::load(d.join(LAST_CHECKPOINT)).unwrap();
        (checkpoint_bytes(&ck), std::fs::read_to_string(d.join(HISTORY_FILE)).unwrap())
    };
    (read(a.path()), read(b.path()))
}
