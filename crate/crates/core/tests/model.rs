use fgi_net::attention::WindowAttnConfig;
use fgi_net::blocks::MBConvSpec;
use fgi_net::checkpoint;
use fgi_net::model::{apply_ablation, count_flops, param_subtotal, ParamReport};
use fgi_net::{AblationTarget, ErrorKind, FgiNet, ModelConfig};
use fgi_tensor::nn::{Conv2d, Ctx};
use fgi_tensor::ops::Conv2dOptions;
use fgi_tensor::{Graph, ParamStore, Rng, Tensor};
use rand::SeedableRng;

fn images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(&[n, 3, size, size], -1.0, 1.0, &mut Rng::seed_from_u64(seed))
}

fn small() -> ModelConfig {
    ModelConfig::reference().with_input_size(32, 32)
}

// Parameter counts from the layer formulas, independent of the builder.

fn mbconv_params(s: &MBConvSpec) -> usize {
    let ce = s.in_ch * s.expansion;
    let se = ((s.in_ch as f64 * s.se_ratio).round() as usize).max(1);
    let expand = if s.expansion == 1 { 0 } else { s.in_ch * ce + 2 * ce };
    expand + ce * s.kernel * s.kernel + 2 * ce + (ce * se + se + se * ce + ce) + ce * s.out_ch + 2 * s.out_ch
}

fn swin_block_params(a: &WindowAttnConfig) -> usize {
    let c = a.dim;
    let hidden = c * a.mlp_ratio;
    let bias = if a.use_relative_bias { (2 * a.window - 1).pow(2) * a.heads } else { 0 };
    2 * c + (c * 3 * c + 3 * c) + (c * c + c) + bias + 2 * c + (c * hidden + hidden) + (hidden * c + c)
}

fn dwsep_params(c: usize) -> usize {
    c * 9 + c + c * c + c
}

fn reference_params_by_formula(cfg: &ModelConfig) -> usize {
    let stem = cfg.in_channels * cfg.stem_channels * 9 + 2 * cfg.stem_channels;
    let stages: usize = cfg
        .stages
        .iter()
        .map(|s| s.blocks.iter().map(mbconv_params).sum::<usize>() + 2 * swin_block_params(&s.attention))
        .sum();
    let c3 = cfg.stages.last().unwrap().blocks.last().unwrap().out_ch;
    let r = cfg.reduce_channels;
    let reduce = c3 * r * 4 + r + 2 * r;
    let global = 2 * swin_block_params(&cfg.final_attention);
    let hidden = (r / 16).max(8);
    let cbam = 2 * dwsep_params(r) + (r * hidden + hidden + hidden * r + r) + (2 * 49 + 1);
    let head = r * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden * cfg.out_dim + cfg.out_dim;
    stem + stages + reduce + global + cbam + head
}

#[test]
fn anchors_at_224() {
    let net = FgiNet::<f32>::build_seeded(&ModelConfig::reference(), 0).unwrap();
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &net.store);
    let taps = net.forward_taps(&ctx, g.constant(images(2, 224, 1)), &[]).unwrap();
    assert_eq!(taps.stages[2].shape(), vec![2, 112, 14, 14]);
    assert_eq!(taps.reduced.shape(), vec![2, 96, 7, 7]);
    assert_eq!(taps.refined.shape(), vec![2, 96, 7, 7]);
    assert_eq!(taps.output.shape(), vec![2, 3]);
    let head: Vec<(String, Vec<usize>)> = net
        .store
        .params()
        .iter()
        .filter(|p| p.name.starts_with("head."))
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    assert_eq!(
        head,
        vec![
            ("head.fc1.weight".to_string(), vec![32, 96]),
            ("head.fc1.bias".to_string(), vec![32]),
            ("head.fc2.weight".to_string(), vec![3, 32]),
            ("head.fc2.bias".to_string(), vec![3]),
        ]
    );
}

#[test]
fn parameter_counts_match_hand_counts() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::seed_from_u64(0);
    Conv2d::new(&mut store, "c", 3, 16, 3, Conv2dOptions::default().padding(1), true, &mut rng).unwrap();
    assert_eq!(store.num_params(), 448);

    let cfg = ModelConfig::reference();
    let net = FgiNet::<f32>::build_seeded(&cfg, 0).unwrap();
    let report = net.count_params();
    assert_eq!(report.total, reference_params_by_formula(&cfg));
    assert_eq!(report.get("stem"), 928);
    assert_eq!(report.get("head"), 3203);
    assert_eq!(report.get("reduce"), 43_296);
    assert_eq!(report.groups.iter().map(|(_, n)| n).sum::<usize>(), report.total);
    assert_eq!(param_subtotal(&net.store, "stage3.block0"), mbconv_params(&cfg.stages[2].blocks[0]));
    let deep = ParamReport::of(&net.store, 2);
    assert_eq!(deep.groups.iter().map(|(_, n)| n).sum::<usize>(), report.total);
    assert!((1_210_000..=1_810_000).contains(&report.total), "{}", report.total);
}

#[test]
fn flop_counts_match_hand_counts() {
    let report = count_flops(&ModelConfig::reference(), 224, 224).unwrap();
    let grouped = report.grouped(1);
    let get = |k: &str| grouped.iter().find(|(g, _)| g == k).map(|(_, m)| *m).unwrap();
    assert_eq!(get("stem"), 112 * 112 * 32 * 27);
    assert_eq!(get("head"), 96 * 32 + 32 * 3);
    assert_eq!(get("reduce"), 7 * 7 * 96 * 112 * 4);
    let g = report.gmacs();
    assert!((0.285..=0.475).contains(&g), "{g}");
    // every MAC lands in exactly one top-level group
    assert_eq!(grouped.iter().map(|(_, m)| m).sum::<u64>(), report.total_macs());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small();
    let net = FgiNet::<f32>::build_seeded(&cfg, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&net, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, net.config);
    for (a, b) in net.store.params().iter().zip(back.store.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data());
    }
    let x = images(2, 32, 3);
    assert_eq!(net.predict(&x).unwrap().data(), back.predict(&x).unwrap().data());
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
    // roughly four bytes per parameter
    assert!(bytes.len() > 4 * net.store.num_params() && bytes.len() < 4 * net.store.num_params() + 200_000);

    let err = checkpoint::from_bytes(&bytes[..bytes.len() - 5]).err().unwrap();
    assert_eq!(err.kind(), ErrorKind::Io);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());
    let mut trailing = bytes;
    trailing.push(0);
    assert!(checkpoint::from_bytes(&trailing).is_err());
}

#[test]
fn eval_is_deterministic_and_batch_independent() {
    let net = FgiNet::<f32>::build_seeded(&small(), 3).unwrap();
    let x = images(3, 32, 5);
    let a = net.predict(&x).unwrap();
    assert_eq!(a.data(), net.predict(&x).unwrap().data());
    let single = net.predict(&Tensor::from_vec(&[1, 3, 32, 32], x.data()[3 * 1024..6 * 1024].to_vec()).unwrap()).unwrap();
    for (p, q) in single.data().iter().zip(&a.data()[3..6]) {
        assert!((p - q).abs() < 1e-5, "{p} vs {q}");
    }
}

#[test]
fn train_mode_without_dropout_or_batch_stats_equals_eval() {
    let net = FgiNet::<f32>::build_seeded(&small(), 4).unwrap();
    let x = images(2, 32, 6);
    let g = Graph::new();
    let mut ctx = Ctx::new(&g, &net.store, true, Rng::seed_from_u64(1));
    ctx.freeze_norm = true;
    let y = net.forward(&ctx, g.constant(x.clone()), &[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(y.value().data(), net.predict(&x).unwrap().data());

    let g = Graph::new();
    let mut ctx = Ctx::new(&g, &net.store, true, Rng::seed_from_u64(1));
    ctx.freeze_norm = true;
    let dropped = net.forward(&ctx, g.constant(x.clone()), &[0.3, 0.3, 0.3]).unwrap();
    assert_ne!(dropped.value().data(), y.value().data());
}

#[test]
fn output_is_finite_across_input_range() {
    let net = FgiNet::<f32>::build_seeded(&small(), 8).unwrap();
    for scale in [0.0f32, 1.0, 3.0] {
        let x = images(2, 32, 9).map(|v| v * scale);
        assert!(net.predict(&x).unwrap().data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn ablations_remove_only_their_parameters() {
    let base = FgiNet::<f32>::build_seeded(&small(), 0).unwrap().param_names();
    let cases = [(AblationTarget::Residual, "res_cbam.res."), (AblationTarget::ResCbam, "res_cbam.")];
    for (target, prefix) in cases {
        let names = FgiNet::<f32>::build_seeded(&apply_ablation(&small(), target), 0).unwrap().param_names();
        assert!(names.is_subset(&base), "{target:?} added parameters");
        let removed: Vec<_> = base.difference(&names).collect();
        let expected: Vec<_> = base.iter().filter(|n| n.starts_with(prefix)).collect();
        assert_eq!(removed, expected, "{target:?}");
        assert!(!removed.is_empty());
    }
}

#[test]
fn input_size_rejects_maps_below_one_reduced_pixel() {
    let err = FgiNet::<f32>::build_seeded(&ModelConfig::reference().with_input_size(16, 16), 0).err().unwrap();
    assert_eq!(err.kind(), ErrorKind::Config);
}
