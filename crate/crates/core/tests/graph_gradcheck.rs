//! Central finite-difference checks for every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seglab_core::graph::{ConvGeom, Graph, Mode, Var};
use seglab_core::params::{ParamKind, ParamStore};
use seglab_core::tensor::Tensor;
use seglab_core::training::loss::Labels;
use seglab_core::Result;

const H: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(r * f(inputs))` with a fixed random projection `r`.
fn scalar_of(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let n = g.value(out).numel();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.dot(out, w)
}

type BuildFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn eval(store: &ParamStore, mode: Mode, inputs: &[Tensor], build: &BuildFn) -> f64 {
    let mut g = Graph::new(store, mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let s = scalar_of(&mut g, out, 99).unwrap();
    g.value(s).data()[0]
}

fn check(store: &mut ParamStore, mode: Mode, inputs: Vec<Tensor>, build: &BuildFn, tol: f64) {
    let (input_grads, param_grads) = {
        let mut g = Graph::new(store, mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let s = scalar_of(&mut g, out, 99).unwrap();
        let grads = g.backward(s, &vars).unwrap();
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.var(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let pg: Vec<(usize, Tensor)> = store
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(id, e)| {
                (
                    id.index(),
                    grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(e.value.shape())),
                )
            })
            .collect();
        (ig, pg)
    };
    let mut worst: f64 = 0.0;
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fd = (eval(store, mode, &plus, build) - eval(store, mode, &minus, build)) / (2.0 * H);
            let a = analytic.data()[i];
            worst = worst.max((a - fd).abs() / (1.0 + a.abs().max(fd.abs())));
        }
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, analytic) in param_grads {
        let id = ids[pi];
        for i in 0..analytic.numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + H;
            let fp = eval(store, mode, &inputs, build);
            store.get_mut(id).data_mut()[i] = orig - H;
            let fm = eval(store, mode, &inputs, build);
            store.get_mut(id).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * H);
            let a = analytic.data()[i];
            worst = worst.max((a - fd).abs() / (1.0 + a.abs().max(fd.abs())));
        }
    }
    assert!(worst < tol, "worst relative error {worst}");
}

#[test]
fn conv2d_strided_dilated_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for geom in [
        ConvGeom { stride: 1, padding: 1, dilation: 1 },
        ConvGeom { stride: 2, padding: 1, dilation: 1 },
        ConvGeom { stride: 1, padding: 2, dilation: 2 },
        ConvGeom::SAME_1X1,
    ] {
        let k = if geom == ConvGeom::SAME_1X1 { 1 } else { 3 };
        let mut store = ParamStore::new();
        let w = store.add("w".into(), random(&[3, 2, k, k], &mut rng), ParamKind::Trainable);
        let b = store.add("b".into(), random(&[3], &mut rng), ParamKind::Trainable);
        let x = random(&[2, 2, 5, 6], &mut rng);
        let build = move |g: &mut Graph, v: &[Var]| {
            let wv = g.param(w);
            let bv = g.param(b);
            g.conv2d(v[0], wv, Some(bv), geom)
        };
        check(&mut store, Mode::Train, vec![x], &build, 1e-6);
    }
}

#[test]
fn conv_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let w = store.add("w".into(), random(&[3, 2, 2, 2], &mut rng), ParamKind::Trainable);
    let b = store.add("b".into(), random(&[2], &mut rng), ParamKind::Trainable);
    let build = move |g: &mut Graph, v: &[Var]| {
        let wv = g.param(w);
        let bv = g.param(b);
        g.conv_transpose2(v[0], wv, Some(bv))
    };
    check(&mut store, Mode::Train, vec![random(&[2, 3, 3, 2], &mut rng)], &build, 1e-6);
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [Mode::Train, Mode::Eval] {
        let mut store = ParamStore::new();
        let gamma = store.add("g".into(), random(&[3], &mut rng), ParamKind::Trainable);
        let beta = store.add("b".into(), random(&[3], &mut rng), ParamKind::Trainable);
        let rm = store.add("rm".into(), random(&[3], &mut rng), ParamKind::Buffer);
        let rv = store.add("rv".into(), Tensor::full(&[3], 0.7), ParamKind::Buffer);
        let build = move |g: &mut Graph, v: &[Var]| {
            let ga = g.param(gamma);
            let be = g.param(beta);
            g.batch_norm(v[0], ga, be, rm, rv, 1e-5, 0.1)
        };
        check(&mut store, mode, vec![random(&[2, 3, 3, 3], &mut rng)], &build, 1e-6);
    }
}

#[test]
fn pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let build = |g: &mut Graph, v: &[Var]| {
        let s = g.sigmoid(v[0]);
        let r = g.relu(v[1]);
        let a = g.add(s, r)?;
        g.weighted_sum(&[(a, 0.7), (v[0], -1.3)])
    };
    check(
        &mut store,
        Mode::Train,
        vec![random(&[2, 2, 3, 3], &mut rng), random(&[2, 2, 3, 3], &mut rng)],
        &build,
        1e-6,
    );
}

#[test]
fn broadcast_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let build = |g: &mut Graph, v: &[Var]| {
        let a = g.mul_broadcast(v[0], v[1])?;
        g.mul_broadcast(a, v[2])
    };
    check(
        &mut store,
        Mode::Train,
        vec![
            random(&[2, 3, 4, 4], &mut rng),
            random(&[2, 3, 1, 1], &mut rng),
            random(&[2, 1, 4, 4], &mut rng),
        ],
        &build,
        1e-6,
    );
}

#[test]
fn pooling_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let build = |g: &mut Graph, v: &[Var]| {
        let mp = g.max_pool(v[0], 3, 2, 1)?;
        let mp = g.resize(mp, 6, 6)?;
        let p2 = g.max_pool(v[0], 2, 2, 0)?;
        let p2 = g.resize(p2, 6, 6)?;
        let ga = g.global_avg_pool(v[0])?;
        let gm = g.global_max_pool(v[0])?;
        let gsum = g.add(ga, gm)?;
        let cm = g.channel_mean(v[0])?;
        let cx = g.channel_max(v[0])?;
        let sp = g.add(cm, cx)?;
        let x = g.mul_broadcast(v[0], gsum)?;
        let x = g.mul_broadcast(x, sp)?;
        let x = g.add(x, mp)?;
        g.add(x, p2)
    };
    check(&mut store, Mode::Train, vec![random(&[2, 3, 6, 6], &mut rng)], &build, 1e-6);
}

#[test]
fn concat_and_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let build = |g: &mut Graph, v: &[Var]| {
        let up = g.resize(v[0], 8, 6)?;
        let c = g.concat(&[up, v[1]])?;
        let one = g.global_avg_pool(c)?;
        let back = g.resize(one, 8, 6)?;
        g.add(c, back)
    };
    check(
        &mut store,
        Mode::Train,
        vec![random(&[2, 2, 4, 3], &mut rng), random(&[2, 1, 8, 6], &mut rng)],
        &build,
        1e-6,
    );
}

#[test]
fn softmax_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = Labels::new(2, 3, 3, (0..18).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
    let mut store = ParamStore::new();
    let build = move |g: &mut Graph, v: &[Var]| {
        let ce = g.cross_entropy(v[0], &labels)?;
        let p = g.softmax(v[0])?;
        let d = g.soft_dice(p, &labels, 1e-5)?;
        g.weighted_sum(&[(ce, 0.5), (d, 0.5)])
    };
    check(&mut store, Mode::Train, vec![random(&[2, 2, 3, 3], &mut rng)], &build, 1e-6);
}
