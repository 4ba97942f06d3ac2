use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::{Eval, Exec, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-scale..scale))
}

fn zero_conv(store: &mut ParamStore<f64>, c: &Conv2d) {
    store.get_mut(c.weight).data_mut().fill(0.0);
    store.get_mut(c.bias).data_mut().fill(0.0);
}

/// Zero every weight of a gate and set its final bias to `bias`.
fn pin_gate(store: &mut ParamStore<f64>, gate: &Gate, bias: f64) {
    match gate {
        Gate::Conv(c) => zero_conv(store, c),
        Gate::Residual(b) => {
            zero_conv(store, &b.conv1);
            zero_conv(store, &b.conv2);
            if let Some(s) = &b.shortcut {
                zero_conv(store, s);
            }
        }
    }
    store.get_mut(gate.output_bias()).data_mut().fill(bias);
}

fn run<F>(f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Eval<f64>) -> <Eval<f64> as Exec<f64>>::V,
{
    let mut ex = Eval::new();
    let v = f(&mut ex);
    ex.tensor(&v)
}

#[test]
fn zero_weight_block_is_identity_on_nonnegative_input() {
    let mut store = ParamStore::<f64>::new();
    let b = ResidualBlock::new(&mut store, &mut rng(1), "b", 3, 3, 3, 1, true).unwrap();
    assert!(b.shortcut.is_none());
    zero_conv(&mut store, &b.conv1);
    zero_conv(&mut store, &b.conv2);
    let x = random(&[1, 3, 4, 4], 2, 1.0);
    let y = run(|ex| {
        let xv = ex.constant(x.clone());
        b.forward(&store, ex, &xv).unwrap()
    });
    for (xi, yi) in x.data().iter().zip(y.data()) {
        let want = if *xi >= 0.0 { *xi } else { 0.2 * xi };
        assert_eq!(*yi, want);
    }
}

#[test]
fn strided_block_halves_resolution() {
    let mut store = ParamStore::<f32>::new();
    let b = ResidualBlock::new(&mut store, &mut rng(3), "b", 8, 16, 3, 2, true).unwrap();
    let mut ex = Eval::new();
    let x = ex.constant(Tensor::zeros(&[1, 8, 256, 256]));
    let y = b.forward(&store, &mut ex, &x).unwrap();
    assert_eq!(ex.shape_of(&y), vec![1, 16, 128, 128]);

    let odd = ex.constant(Tensor::zeros(&[1, 8, 5, 6]));
    assert!(matches!(b.forward(&store, &mut ex, &odd), Err(Error::Shape(_))));
}

fn cell(variant: GruVariant, cx: usize, ch: usize, seed: u64) -> (ParamStore<f64>, GruCell) {
    let mut store = ParamStore::new();
    let c = GruCell::new(&mut store, &mut rng(seed), "g", variant, cx, ch, 3, true).unwrap();
    (store, c)
}

#[test]
fn closed_update_gate_carries_state() {
    for variant in [GruVariant::ConvGru, GruVariant::ResGru] {
        let (mut store, c) = cell(variant, 2, 3, 5);
        pin_gate(&mut store, &c.update, -20.0);
        let x = random(&[1, 2, 4, 4], 6, 1.0);
        let h = random(&[1, 3, 4, 4], 7, 1.0);
        let y = run(|ex| {
            let (xv, hv) = (ex.constant(x.clone()), ex.constant(h.clone()));
            c.step(&store, ex, &xv, &hv).unwrap()
        });
        assert!(y.max_abs_diff(&h) < 1e-8, "{variant}: {}", y.max_abs_diff(&h));
    }
}

#[test]
fn open_update_gate_yields_candidate() {
    for variant in [GruVariant::ConvGru, GruVariant::ResGru] {
        let (mut store, c) = cell(variant, 2, 3, 8);
        pin_gate(&mut store, &c.update, 20.0);
        let x = random(&[1, 2, 4, 4], 9, 3.0);
        let h = random(&[1, 3, 4, 4], 10, 3.0);
        let mut ex = Eval::new();
        let (xv, hv) = (ex.constant(x), ex.constant(h));
        let tr = c.step_traced(&store, &mut ex, &xv, &hv).unwrap();
        let state = ex.tensor(&tr.state);
        let cand = ex.tensor(&tr.candidate);
        assert!(state.max_abs_diff(&cand) < 1e-7);
        assert!(state.data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn gate_activations_stay_in_unit_interval() {
    for variant in [GruVariant::ConvGru, GruVariant::ResGru] {
        let (store, c) = cell(variant, 3, 4, 11);
        let mut ex = Eval::new();
        let x = ex.constant(random(&[2, 3, 6, 6], 12, 5.0));
        let h = ex.constant(random(&[2, 4, 6, 6], 13, 5.0));
        let tr = c.step_traced(&store, &mut ex, &x, &h).unwrap();
        for v in [&tr.update, &tr.reset] {
            assert!(ex.tensor(v).data().iter().all(|&g| g > 0.0 && g < 1.0));
        }
        assert!(ex.tensor(&tr.candidate).data().iter().all(|&g| g.abs() < 1.0));
        assert_eq!(ex.shape_of(&tr.state), vec![2, 4, 6, 6]);
    }
}

// Straight-line reference implementation of the cell, one pixel at a time.

struct Img {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Img {
    fn of(t: &Tensor<f64>) -> Img {
        let s = t.shape();
        Img {
            c: s[1],
            h: s[2],
            w: s[3],
            v: t.data().to_vec(),
        }
    }
    fn at(&self, c: usize, i: isize, j: isize) -> f64 {
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            0.0
        } else {
            self.v[(c * self.h + i as usize) * self.w + j as usize]
        }
    }
    fn cat(&self, o: &Img) -> Img {
        let mut v = self.v.clone();
        v.extend_from_slice(&o.v);
        Img {
            c: self.c + o.c,
            h: self.h,
            w: self.w,
            v,
        }
    }
    fn map2(&self, o: &Img, f: impl Fn(f64, f64) -> f64) -> Img {
        Img {
            c: self.c,
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }
    fn map(&self, f: impl Fn(f64) -> f64) -> Img {
        Img {
            c: self.c,
            h: self.h,
            w: self.w,
            v: self.v.iter().map(|a| f(*a)).collect(),
        }
    }
}

fn ref_conv(store: &ParamStore<f64>, conv: &Conv2d, x: &Img) -> Img {
    let w = store.get(conv.weight).data();
    let b = store.get(conv.bias).data();
    let (k, s) = (conv.kernel, conv.stride);
    let p = (k / 2) as isize;
    let (ho, wo) = (x.h / s, x.w / s);
    let mut v = Vec::with_capacity(conv.cout * ho * wo);
    for co in 0..conv.cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b[co];
                for ci in 0..conv.cin {
                    for ki in 0..k {
                        for kj in 0..k {
                            let wv = w[((co * conv.cin + ci) * k + ki) * k + kj];
                            let yi = (i * s + ki) as isize - p;
                            let xj = (j * s + kj) as isize - p;
                            acc += wv * x.at(ci, yi, xj);
                        }
                    }
                }
                v.push(acc);
            }
        }
    }
    Img {
        c: conv.cout,
        h: ho,
        w: wo,
        v,
    }
}

fn leaky(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        0.2 * v
    }
}

fn ref_gate(store: &ParamStore<f64>, gate: &Gate, x: &Img) -> Img {
    match gate {
        Gate::Conv(c) => ref_conv(store, c, x),
        Gate::Residual(b) => {
            let y = ref_conv(store, &b.conv1, x).map(leaky);
            let y = ref_conv(store, &b.conv2, &y);
            let sc = match &b.shortcut {
                Some(s) => ref_conv(store, s, x),
                None => x.map(|v| v),
            };
            let sum = y.map2(&sc, |a, b| a + b);
            if b.post_activation {
                sum.map(leaky)
            } else {
                sum
            }
        }
    }
}

fn ref_step(store: &ParamStore<f64>, c: &GruCell, x: &Img, h: &Img) -> Img {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let xh = x.cat(h);
    let z = ref_gate(store, &c.update, &xh).map(sig);
    let r = ref_gate(store, &c.reset, &xh).map(sig);
    let rh = r.map2(h, |a, b| a * b);
    let cand = ref_gate(store, &c.candidate, &x.cat(&rh)).map(f64::tanh);
    let keep = z.map2(h, |z, h| (1.0 - z) * h);
    let fresh = z.map2(&cand, |z, c| z * c);
    keep.map2(&fresh, |a, b| a + b)
}

#[test]
fn step_matches_straight_line_reference() {
    for variant in [GruVariant::ConvGru, GruVariant::ResGru] {
        let (mut store, c) = cell(variant, 3, 3, 14);
        // Non-zero biases so every term of the reference is exercised.
        let mut r = rng(15);
        for t in store.tensors_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
            }
        }
        let x = random(&[1, 3, 4, 4], 16, 1.0);
        let h = random(&[1, 3, 4, 4], 17, 1.0);
        let got = run(|ex| {
            let (xv, hv) = (ex.constant(x.clone()), ex.constant(h.clone()));
            c.step(&store, ex, &xv, &hv).unwrap()
        });
        let want = ref_step(&store, &c, &Img::of(&x), &Img::of(&h));
        let err = got
            .data()
            .iter()
            .zip(&want.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{variant}: max error {err}");
    }
}

#[test]
fn unroll_composes_steps() {
    let (store, c) = cell(GruVariant::ConvGru, 2, 3, 18);
    let xs: Vec<Tensor<f64>> = (0..3).map(|i| random(&[1, 2, 4, 4], 20 + i, 1.0)).collect();
    let h0 = random(&[1, 3, 4, 4], 19, 1.0);
    let mut ex = Eval::new();
    let xv: Vec<_> = xs.iter().map(|x| ex.constant(x.clone())).collect();
    let hv = ex.constant(h0);
    let states = c.unroll(&store, &mut ex, Some(&xv), &hv, 3).unwrap();
    let mut h = hv.clone();
    for (t, x) in xv.iter().enumerate() {
        h = c.step(&store, &mut ex, x, &h).unwrap();
        assert_eq!(ex.tensor(&states[t]), ex.tensor(&h));
    }
    let one = c.unroll(&store, &mut ex, Some(&xv[..1]), &hv, 1).unwrap();
    assert_eq!(ex.tensor(&one[0]), ex.tensor(&states[0]));
}

#[test]
fn unroll_rejects_bad_arguments() {
    let (store, c) = cell(GruVariant::ConvGru, 2, 3, 21);
    let mut ex = Eval::new();
    let h0 = ex.constant(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(c.unroll(&store, &mut ex, None, &h0, 0).is_err());
    let x = ex.constant(Tensor::zeros(&[1, 2, 4, 4]));
    assert!(c.unroll(&store, &mut ex, Some(std::slice::from_ref(&x)), &h0, 2).is_err());
    let bad = ex.constant(Tensor::zeros(&[1, 2, 4, 5]));
    assert!(matches!(c.step(&store, &mut ex, &bad, &h0), Err(Error::Shape(_))));
}

#[test]
fn zero_cell_keeps_zero_state() {
    for variant in [GruVariant::ConvGru, GruVariant::ResGru] {
        let (mut store, c) = cell(variant, 2, 3, 22);
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut ex = Eval::new();
        let h0 = ex.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let states = c.unroll(&store, &mut ex, None, &h0, 4).unwrap();
        for s in states {
            assert!(ex.tensor(&s).data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn projection_head_range() {
    let mut store = ParamStore::<f64>::new();
    let head = ProjectionHead::new(&mut store, &mut rng(23), "head", 4).unwrap();
    zero_conv(&mut store, &head.conv);
    let x = random(&[2, 4, 3, 3], 24, 1.0);
    let y = run(|ex| {
        let xv = ex.constant(x.clone());
        head.forward(&store, ex, &xv).unwrap()
    });
    assert_eq!(y.shape(), &[2, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 0.5));

    store.get_mut(head.conv.bias).data_mut()[0] = 20.0;
    let y = run(|ex| {
        let xv = ex.constant(x.clone());
        head.forward(&store, ex, &xv).unwrap()
    });
    assert!(y.data().iter().all(|&v| v > 0.999_999 && v < 1.0));
}

#[test]
fn saturated_head_stays_inside_unit_interval_in_f32() {
    let mut store = ParamStore::<f32>::new();
    let head = ProjectionHead::new(&mut store, &mut rng(25), "head", 1).unwrap();
    store.get_mut(head.conv.weight).data_mut()[0] = 1.0;
    let mut ex = Eval::new();
    let x = ex.constant(Tensor::from_fn(&[1, 1, 1, 2], |i| if i == 0 { 100.0 } else { -100.0 }));
    let y = head.forward(&store, &mut ex, &x).unwrap();
    let y = ex.tensor(&y);
    assert!(y.data()[0] < 1.0 && y.data()[1] > 0.0);
}

#[test]
fn param_counts_match_store() {
    for variant in [GruVariant::ConvGru, GruVariant::ResGru] {
        let (store, c) = cell(variant, 3, 5, 26);
        assert_eq!(c.param_count(), store.count());
    }
    let mut store = ParamStore::<f32>::new();
    let b = ResidualBlock::new(&mut store, &mut rng(27), "b", 3, 6, 3, 2, true).unwrap();
    assert_eq!(b.param_count(), store.count());
    let mut store = ParamStore::<f32>::new();
    let c = Conv2d::new(&mut store, &mut rng(28), "c", 3, 1, 1, 1).unwrap();
    assert_eq!(c.param_count(), 4);
}
