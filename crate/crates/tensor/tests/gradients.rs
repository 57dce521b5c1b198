//! Every differentiable op against central finite differences in f64.

use fgi_tensor::gradcheck::GradCheck;
use fgi_tensor::init::Init;
use fgi_tensor::nn::{BatchNorm2d, Conv2d, LayerNorm, Linear};
use fgi_tensor::ops::{Conv2dOptions, PoolKind, PoolWindow};
use fgi_tensor::{Graph, ParamStore, Rng, Tensor};
use rand::SeedableRng;

const TOL: f64 = 1e-4;
const SEEDS: [u64; 3] = [1, 2, 3];

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut Rng::seed_from_u64(seed))
}

/// Fixed random weights so the scalar objective mixes all outputs.
fn weights_like(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand(shape, seed ^ 0xabcdef)
}

macro_rules! assert_grad {
    ($report:expr) => {{
        let r = $report;
        assert!(r.max_rel_error < TOL, "{r:?}");
        assert!(r.elements_checked > 0);
    }};
}

#[test]
fn elementwise_and_broadcast_ops() {
    let store = ParamStore::<f64>::new();
    for seed in SEEDS {
        let inputs = [rand(&[2, 3, 4, 4], seed), rand(&[2, 3, 1, 1], seed + 10), rand(&[2, 1, 4, 4], seed + 20)];
        let mix = weights_like(&[2, 3, 4, 4], seed);
        let report = GradCheck::default()
            .run(&store, &inputs, |ctx, v| {
                let m = ctx.graph.constant(mix.clone());
                let a = v[0].silu().mul(v[1].sigmoid())?;
                let b = a.mul(v[2].relu().add(v[2].gelu_tanh())?)?;
                b.sub(v[0].abs().scale(0.3))?.neg().mul(m).map(|y| y.sum_all())
            })
            .unwrap();
        assert_grad!(report);
    }
}

#[test]
fn softmax_reshape_permute_and_shifts() {
    let store = ParamStore::<f64>::new();
    for seed in SEEDS {
        let inputs = [rand(&[2, 3, 4, 5], seed)];
        let mix = weights_like(&[5, 2, 3, 6, 6], seed);
        let report = GradCheck::default()
            .run(&store, &inputs, |ctx, v| {
                let x = v[0].scale(3.0).softmax_last();
                let x = x.roll2d(-1, 2)?.pad2d(1, 1, 0, 1)?.crop2d(0, 0, 6, 6)?;
                let x = x.reshape(&[1, 2, 3, 6, 6])?.permute(&[0, 1, 2, 3, 4])?;
                let x = x.reshape(&[2, 3, 6, 6])?.permute(&[3, 0, 1, 2])?.mean_all();
                let y = v[0].pad2d(1, 1, 1, 1)?.reshape(&[2, 3, 6, 7])?.crop2d(0, 0, 6, 6)?;
                let y = y.reshape(&[1, 2, 3, 6, 6])?.mul(ctx.graph.constant(mix.clone()))?.sum_all();
                x.add(y)
            })
            .unwrap();
        assert_grad!(report);
    }
}

#[test]
fn convolution_variants() {
    for seed in SEEDS {
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let convs = [
            Conv2d::new(&mut store, "full", 3, 4, 3, Conv2dOptions::default().stride(2).padding(1), true, &mut rng).unwrap(),
            Conv2d::new(&mut store, "dw", 4, 4, 5, Conv2dOptions::default().padding(2).groups(4), true, &mut rng).unwrap(),
            Conv2d::new(&mut store, "dw_s2", 4, 4, 3, Conv2dOptions::default().stride(2).padding(1).groups(4), false, &mut rng).unwrap(),
            Conv2d::new(&mut store, "pw", 4, 6, 1, Conv2dOptions::default(), true, &mut rng).unwrap(),
            Conv2d::new(&mut store, "grouped", 6, 4, 2, Conv2dOptions::default().stride(2).groups(2), true, &mut rng).unwrap(),
        ];
        let inputs = [rand(&[2, 3, 8, 8], seed)];
        let report = GradCheck::default()
            .run(&store, &inputs, |ctx, v| {
                let mut x = v[0];
                for c in &convs {
                    x = c.forward(ctx, x)?;
                }
                let m = ctx.graph.constant(weights_like(&x.shape(), seed));
                Ok(x.mul(m)?.sum_all())
            })
            .unwrap();
        assert_grad!(report);
    }
}

#[test]
fn pooling_and_channel_pool() {
    let store = ParamStore::<f64>::new();
    for seed in SEEDS {
        let inputs = [rand(&[2, 3, 6, 6], seed)];
        let report = GradCheck::default()
            .run(&store, &inputs, |ctx, v| {
                let a = v[0].pool2d(PoolKind::Avg, PoolWindow::Size(2, 3))?;
                let b = v[0].pool2d(PoolKind::Max, PoolWindow::Size(3, 2))?;
                let c = v[0].pool2d(PoolKind::Max, PoolWindow::Global)?;
                let d = v[0].pool2d(PoolKind::Avg, PoolWindow::Global)?;
                let e = v[0].channel_pool()?;
                let terms = [a, b, c, d, e];
                let mut total = ctx.graph.constant(Tensor::scalar(0.0));
                for (i, t) in terms.into_iter().enumerate() {
                    let m = ctx.graph.constant(weights_like(&t.shape(), seed + i as u64));
                    total = total.add(t.mul(m)?.sum_all())?;
                }
                Ok(total)
            })
            .unwrap();
        assert_grad!(report);
    }
}

#[test]
fn linear_and_batched_matmul() {
    for seed in SEEDS {
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 5, 4, true, Init::TruncNormal { std: 0.5 }, &mut rng).unwrap();
        let inputs = [rand(&[2, 3, 5], seed), rand(&[2, 4, 3], seed + 7)];
        let report = GradCheck::default()
            .run(&store, &inputs, |ctx, v| {
                let y = lin.forward(ctx, v[0])?; // [2,3,4]
                let a = y.bmm(v[1], false, false)?; // [2,3,3]
                let b = v[1].bmm(y, true, true)?; // [2,3,3]
                let c = v[0].bmm(v[0], false, true)?; // [2,3,3]
                let d = v[1].bmm(y, false, false)?.add(y.bmm(y, true, false)?)?; // [2,4,4]
                let m = ctx.graph.constant(weights_like(&[2, 3, 3], seed));
                let md = ctx.graph.constant(weights_like(&[2, 4, 4], seed + 1));
                a.add(b)?.add(c)?.mul(m)?.sum_all().add(d.mul(md)?.sum_all())
            })
            .unwrap();
        assert_grad!(report);
    }
}

#[test]
fn normalization_layers() {
    for seed in SEEDS {
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        // move affine parameters off their trivial init
        for id in store.param_ids().collect::<Vec<_>>() {
            let shape = store.param(id).value.shape().to_vec();
            *store.value_mut(id) = Tensor::rand_uniform(&shape, 0.5, 1.5, &mut rng);
        }
        let inputs = [rand(&[2, 3, 4, 4], seed)];
        for training in [true, false] {
            let report = GradCheck { training, ..GradCheck::default() }
                .run(&store, &inputs, |ctx, v| {
                    let y = bn.forward(ctx, v[0])?;
                    let y = ln.forward(ctx, y)?;
                    let m = ctx.graph.constant(weights_like(&[2, 3, 4, 4], seed));
                    Ok(y.mul(m)?.sum_all())
                })
                .unwrap();
            assert_grad!(report);
        }
    }
}

#[test]
fn backward_contracts() {
    // d/dw sum(w·x) = x
    let g = Graph::<f64>::new();
    let x = Tensor::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap();
    let w = g.leaf(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
    let loss = w.mul(g.constant(x.clone())).unwrap().sum_all();
    assert_eq!(*g.backward(loss).unwrap().wrt(w).unwrap(), x);

    // sigmoid'(0) = 1/4
    let g = Graph::<f64>::new();
    let w = g.leaf(Tensor::scalar(0.0));
    let grads = g.backward(w.sigmoid()).unwrap();
    assert_eq!(grads.wrt(w).unwrap().item(), 0.25);

    // non-scalar loss
    let g = Graph::<f64>::new();
    let w = g.leaf(Tensor::ones(&[2]));
    assert!(matches!(g.backward(w.scale(2.0)), Err(fgi_tensor::Error::Usage(_))));

    // detached graph: no gradients, no error
    let g = Graph::<f64>::new();
    let c = g.constant(Tensor::ones(&[2]));
    let w = g.leaf(Tensor::ones(&[2]));
    let grads = g.backward(c.sum_all()).unwrap();
    assert!(grads.wrt(w).is_none());
}

#[test]
fn parameter_gradients_accumulate_until_cleared() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    for expected in [3.0, 6.0] {
        let g = Graph::new();
        let loss = store.var(&g, id).scale(3.0).sum_all();
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads);
        assert_eq!(store.param(id).grad.as_ref().unwrap().data(), &[expected, expected]);
    }
    store.zero_grad();
    assert!(store.param(id).grad.is_none());
}
