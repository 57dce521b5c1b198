use fgi_net::blocks::*;
use fgi_tensor::nn::{Ctx, NORM_EPS};
use fgi_tensor::{Graph, ParamStore, Rng, Tensor};
use rand::SeedableRng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn set(store: &mut ParamStore<f64>, name: &str, values: &[f64]) {
    let id = store.find_param(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = store.param(id).value.shape().to_vec();
    *store.value_mut(id) = Tensor::from_vec(&shape, values.to_vec()).unwrap();
}

fn fill(store: &mut ParamStore<f64>, prefix: &str, v: f64) {
    for id in store.param_ids().collect::<Vec<_>>() {
        if store.param(id).name.starts_with(prefix) {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
}

/// Res_CBAM on a single-channel 2×2 map with every convolution reduced to
/// a scalar gain, evaluated element by element.
#[test]
fn res_cbam_hand_computed_example() {
    let mut rng = Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let block = ResCbam::new(&mut store, "m5", 1, true, &mut rng).unwrap();
    fill(&mut store, "", 0.0);
    // depthwise kernels are centre taps, pointwise convolutions are gains
    let centre = |g: f64| [0.0, 0.0, 0.0, 0.0, g, 0.0, 0.0, 0.0, 0.0];
    set(&mut store, "m5.res.depthwise.weight", &centre(1.0));
    set(&mut store, "m5.res.pointwise.weight", &[0.5]);
    set(&mut store, "m5.res.pointwise.bias", &[0.1]);
    set(&mut store, "m5.dwsep.depthwise.weight", &centre(2.0));
    set(&mut store, "m5.dwsep.depthwise.bias", &[0.2]);
    set(&mut store, "m5.dwsep.pointwise.weight", &[1.0]);
    // channel MLP 1 → 8 → 1: only the first hidden unit is live
    let mut fc1 = vec![0.0; 8];
    fc1[0] = 1.0;
    let mut fc2 = vec![0.0; 8];
    fc2[0] = 0.5;
    set(&mut store, "m5.channel_attn.fc1.weight", &fc1);
    set(&mut store, "m5.channel_attn.fc2.weight", &fc2);
    set(&mut store, "m5.channel_attn.fc2.bias", &[-0.3]);
    // spatial 7×7 conv over [mean; max]: centre taps 0.4 and 0.6, bias 0.05
    let mut ks = vec![0.0; 2 * 49];
    ks[24] = 0.4;
    ks[49 + 24] = 0.6;
    set(&mut store, "m5.spatial_attn.conv.weight", &ks);
    set(&mut store, "m5.spatial_attn.conv.bias", &[0.05]);

    let f_in = [1.0, -2.0, 0.5, 3.0];
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &store);
    let y = block.forward(&ctx, g.constant(Tensor::from_vec(&[1, 1, 2, 2], f_in.to_vec()).unwrap())).unwrap();

    // scalar evaluation
    let f_res: Vec<f64> = f_in.iter().map(|v| 0.5 * v + 0.1).collect();
    let f1: Vec<f64> = f_in.iter().map(|v| 2.0 * v + 0.2).collect();
    let avg = f1.iter().sum::<f64>() / 4.0;
    let max = f1.iter().cloned().fold(f64::MIN, f64::max);
    let mlp = |p: f64| 0.5 * p.max(0.0) - 0.3;
    let mc = sigmoid(mlp(avg) + mlp(max));
    let f2: Vec<f64> = f1.iter().map(|v| mc * v).collect();
    // one channel: mean map == max map == F''
    let f3: Vec<f64> = f2.iter().map(|v| sigmoid(0.4 * v + 0.6 * v + 0.05) * v).collect();
    let expected: Vec<f64> = f_res.iter().zip(&f3).map(|(a, b)| a + b).collect();
    for (got, want) in y.value().data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn residual_ablation_drops_only_the_residual_term() {
    let mut rng = Rng::seed_from_u64(1);
    let mut full = ParamStore::<f64>::new();
    let a = ResCbam::new(&mut full, "m5", 8, true, &mut rng).unwrap();
    let mut rng = Rng::seed_from_u64(1);
    let mut ablated = ParamStore::<f64>::new();
    let b = ResCbam::new(&mut ablated, "m5", 8, false, &mut rng).unwrap();
    // copy shared weights so outputs are comparable
    for id in ablated.param_ids().collect::<Vec<_>>() {
        let name = ablated.param(id).name.clone();
        let src = full.find_param(&name).unwrap();
        *ablated.value_mut(id) = (*full.param(src).value).clone();
    }
    let names = |s: &ParamStore<f64>| s.params().iter().map(|p| p.name.clone()).collect::<std::collections::BTreeSet<_>>();
    let removed: Vec<_> = names(&full).difference(&names(&ablated)).cloned().collect();
    assert!(!removed.is_empty() && removed.iter().all(|n| n.starts_with("m5.res.")), "{removed:?}");

    let x = Tensor::rand_uniform(&[2, 8, 5, 5], -1.0, 1.0, &mut rng);
    let g = Graph::new();
    let (ca, cb) = (Ctx::eval(&g, &full), Ctx::eval(&g, &ablated));
    let ya = a.forward(&ca, g.constant(x.clone())).unwrap();
    let yb = b.forward(&cb, g.constant(x.clone())).unwrap();
    let res = a.residual.as_ref().unwrap().forward(&ca, g.constant(x)).unwrap();
    let diff = ya.sub(yb).unwrap().sub(res).unwrap().value();
    assert!(diff.max_abs() < 1e-12);
}

#[test]
fn attention_maps_are_bounded_and_shrink_activations() {
    let mut rng = Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let ca = ChannelAttention::new(&mut store, "ca", 24, &mut rng).unwrap();
    let sa = SpatialAttention::new(&mut store, "sa", &mut rng).unwrap();
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &store);
    for _ in 0..5 {
        let f = g.constant(Tensor::rand_uniform(&[2, 24, 6, 6], -4.0, 4.0, &mut rng));
        let mc = ca.forward(&ctx, f).unwrap();
        let f2 = f.mul(mc).unwrap();
        let ms = sa.forward(&ctx, f2).unwrap();
        let f3 = f2.mul(ms).unwrap();
        assert!(mc.value().data().iter().chain(ms.value().data()).all(|&v| v > 0.0 && v < 1.0));
        for ((a, b), c) in f.value().data().iter().zip(f2.value().data()).zip(f3.value().data()) {
            assert!(b.abs() <= a.abs() && c.abs() <= b.abs());
        }
    }
}

#[test]
fn channel_map_ignores_spatial_order_and_spatial_map_ignores_channel_order() {
    let mut rng = Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let ca = ChannelAttention::new(&mut store, "ca", 16, &mut rng).unwrap();
    let sa = SpatialAttention::new(&mut store, "sa", &mut rng).unwrap();
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &store);
    let f = g.constant(Tensor::rand_uniform(&[1, 16, 5, 5], -2.0, 2.0, &mut rng));

    let rolled = f.roll2d(2, -1).unwrap();
    let a = ca.forward(&ctx, f).unwrap().value();
    let b = ca.forward(&ctx, rolled).unwrap().value();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }

    let idx: Vec<usize> = (0..16).rev().flat_map(|c| (0..25).map(move |p| c * 25 + p)).collect();
    let reversed = f.gather(&[1, 16, 5, 5], std::sync::Arc::new(idx)).unwrap();
    let a = sa.forward(&ctx, f).unwrap().value();
    let b = sa.forward(&ctx, reversed).unwrap().value();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

/// Direct evaluation of an MBConv block (eval-mode batch norm).
fn mbconv_oracle(store: &ParamStore<f64>, name: &str, spec: &MBConvSpec, x: &Tensor<f64>) -> Vec<f64> {
    let p = |n: &str| store.param(store.find_param(&format!("{name}.{n}")).unwrap()).value.data().to_vec();
    let bufs = |n: &str| store.buffer(store.find_buffer(&format!("{name}.{n}")).unwrap()).data().to_vec();
    let bn = |v: f64, c: usize, k: &str| {
        let (g, b) = (p(&format!("{k}.weight")), p(&format!("{k}.bias")));
        let (m, var) = (bufs(&format!("{k}.running_mean")), bufs(&format!("{k}.running_var")));
        (v - m[c]) / (var[c] + NORM_EPS).sqrt() * g[c] + b[c]
    };
    let s = x.shape();
    let (cin, h, w) = (s[1], s[2], s[3]);
    let mid = spec.expanded();
    // expand
    let mut e = vec![0.0; mid * h * w];
    for c in 0..mid {
        for i in 0..h * w {
            e[c * h * w + i] = if spec.expansion == 1 {
                x.data()[c * h * w + i]
            } else {
                let wt = p("expand_conv.weight");
                let v: f64 = (0..cin).map(|k| wt[c * cin + k] * x.data()[k * h * w + i]).sum();
                silu(bn(v, c, "bn0"))
            };
        }
    }
    // depthwise
    let (k, st, pad) = (spec.kernel, spec.stride, spec.kernel / 2);
    let (ho, wo) = ((h + 2 * pad - k) / st + 1, (w + 2 * pad - k) / st + 1);
    let dw = p("depthwise_conv.weight");
    let mut d = vec![0.0; mid * ho * wo];
    for c in 0..mid {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let (iy, ix) = ((oy * st + ky) as isize - pad as isize, (ox * st + kx) as isize - pad as isize);
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += dw[(c * k + ky) * k + kx] * e[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                d[(c * ho + oy) * wo + ox] = silu(bn(acc, c, "bn1"));
            }
        }
    }
    // squeeze-excite
    let r = spec.se_channels();
    let pooled: Vec<f64> = (0..mid).map(|c| d[c * ho * wo..(c + 1) * ho * wo].iter().sum::<f64>() / (ho * wo) as f64).collect();
    let (w1, b1, w2, b2) = (p("se.reduce.weight"), p("se.reduce.bias"), p("se.expand.weight"), p("se.expand.bias"));
    let hidden: Vec<f64> = (0..r).map(|j| silu(b1[j] + (0..mid).map(|c| w1[j * mid + c] * pooled[c]).sum::<f64>())).collect();
    let gate: Vec<f64> = (0..mid).map(|c| sigmoid(b2[c] + (0..r).map(|j| w2[c * r + j] * hidden[j]).sum::<f64>())).collect();
    // project
    let pw = p("project_conv.weight");
    let mut out = vec![0.0; spec.out_ch * ho * wo];
    for o in 0..spec.out_ch {
        for i in 0..ho * wo {
            let v: f64 = (0..mid).map(|c| pw[o * mid + c] * gate[c] * d[c * ho * wo + i]).sum();
            out[o * ho * wo + i] = bn(v, o, "bn2") + if spec.has_skip() { x.data()[o * ho * wo + i] } else { 0.0 };
        }
    }
    out
}

#[test]
fn mbconv_matches_direct_evaluation() {
    let specs = [MBConvSpec::new(8, 4, 1, 3, 1), MBConvSpec::new(4, 6, 6, 3, 2), MBConvSpec::new(6, 6, 6, 5, 1)];
    for (seed, spec) in specs.iter().enumerate() {
        let mut rng = Rng::seed_from_u64(seed as u64);
        let mut store = ParamStore::<f64>::new();
        let block = MBConv::new(&mut store, "b", spec, &mut rng).unwrap();
        // non-trivial running statistics and affine terms
        for id in store.param_ids().collect::<Vec<_>>() {
            if store.param(id).name.contains(".bn") {
                let shape = store.param(id).value.shape().to_vec();
                *store.value_mut(id) = Tensor::rand_uniform(&shape, 0.5, 1.5, &mut rng);
            }
        }
        for name in store.buffers().iter().map(|b| b.name.clone()).collect::<Vec<_>>() {
            let id = store.find_buffer(&name).unwrap();
            let shape = store.buffer(id).shape().to_vec();
            *store.buffer_mut(id) = Tensor::rand_uniform(&shape, 0.2, 1.2, &mut rng);
        }
        let x = Tensor::rand_uniform(&[1, spec.in_ch, 7, 7], -2.0, 2.0, &mut rng);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let y = block.forward(&ctx, g.constant(x.clone())).unwrap().value();
        let oracle = mbconv_oracle(&store, "b", spec, &x);
        assert_eq!(y.numel(), oracle.len());
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{spec:?}: {a} vs {b}");
        }
    }
}
