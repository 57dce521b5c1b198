use fgi_net::data::{synth_dataset, GazeDataset, GazeSample, SynthOptions};
use fgi_net::training::{dropout_rate_at, fit, l1_loss, lr_at, Optimizer, OptimizerKind};
use fgi_net::{ErrorKind, FgiNet, ModelConfig, Preset, TrainPlan};
use fgi_tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

const EXACT: f64 = 1e-12;

fn pretrain() -> TrainPlan {
    TrainPlan::preset(Preset::PretrainEth)
}

fn no_decay() -> TrainPlan {
    TrainPlan { decay: None, ..pretrain() }
}

#[test]
fn presets_hold_the_published_recipe() {
    let p = pretrain();
    assert_eq!((p.batch_size, p.epochs, p.optimizer, p.betas), (64, 30, OptimizerKind::AdamW, (0.88, 0.99)));
    assert_eq!((p.base_lr, p.max_lr, p.clr_step_size, p.warmup_epochs), (0.0001, 0.0005, 5.0, 3.0));
    assert_eq!(p.decay, Some((0.5, 10)));
    let table = [(Preset::Gaze360, 32, 60), (Preset::Mpii, 64, 80), (Preset::EyeDiap, 12, 50), (Preset::RtGene, 32, 50)];
    for (preset, batch, epochs) in table {
        let p = TrainPlan::preset(preset);
        assert_eq!((p.batch_size, p.epochs, p.max_lr), (batch, epochs, 0.0005), "{preset:?}");
        assert_eq!((p.optimizer, p.betas, p.warmup_epochs), (OptimizerKind::Adam, (0.88, 0.999), 5.0));
    }
    assert_eq!(TrainPlan::preset(Preset::Mpii).decay, Some((0.5, 60)));
    assert_eq!(TrainPlan::preset(Preset::EyeDiap).dropout_base, vec![0.09, 0.06, 0.03]);
    assert_eq!(TrainPlan::preset(Preset::RtGene).decay, None);
}

#[test]
fn cyclical_schedule_examples() {
    assert!((lr_at(&pretrain(), 5.0) - 0.0005).abs() < EXACT);
    assert!((lr_at(&no_decay(), 10.0) - 0.0001).abs() < EXACT);
    assert!((lr_at(&no_decay(), 20.0) - 0.0001).abs() < EXACT);
    assert!((lr_at(&no_decay(), 15.0) - 0.0005).abs() < EXACT);
    assert!((lr_at(&no_decay(), 7.5) - 0.0003).abs() < EXACT);
    assert_eq!(lr_at(&pretrain(), 0.0), 0.0);
    // decay halves both base and amplitude after 10 epochs
    assert!((lr_at(&pretrain(), 15.0) - 0.00025).abs() < EXACT);
    assert!((lr_at(&pretrain(), 10.0) - 0.00005).abs() < EXACT);
    // warmup is linear up to the scheduled value at its end
    let w = pretrain().warmup_epochs;
    let at_seam = lr_at(&pretrain(), w);
    assert!((lr_at(&pretrain(), w / 2.0) - at_seam / 2.0).abs() < EXACT);
    assert!((lr_at(&pretrain(), w - 1e-9) - at_seam).abs() < 1e-12);
}

#[test]
fn flat_finetune_schedule_is_constant_after_warmup() {
    let p = TrainPlan::preset(Preset::RtGene);
    for e in [5.0, 6.3, 10.0, 49.0] {
        assert!((lr_at(&p, e) - 0.0005).abs() < EXACT);
    }
    let mpii = TrainPlan::preset(Preset::Mpii);
    assert!((lr_at(&mpii, 61.0) - 0.00025).abs() < EXACT);
}

proptest! {
    #[test]
    fn lr_is_bounded_and_continuous(e in 0.0f64..60.0) {
        for plan in [pretrain(), no_decay(), TrainPlan::preset(Preset::Mpii)] {
            let lr = lr_at(&plan, e);
            prop_assert!((0.0..=plan.max_lr + EXACT).contains(&lr));
            // piecewise linear with slope at most max/warmup
            let slope = plan.max_lr / plan.warmup_epochs.min(plan.clr_step_size);
            let h = 1e-7;
            let near_decay = plan.decay.is_some_and(|(_, s)| ((e + h) / s as f64).floor() != (e / s as f64).floor());
            if !near_decay {
                prop_assert!((lr_at(&plan, e + h) - lr).abs() <= slope * h * 1.0001 + 1e-15);
            }
        }
    }

    #[test]
    fn lr_has_period_two_steps_without_decay(e in 3.0f64..40.0) {
        let p = no_decay();
        prop_assert!((lr_at(&p, e) - lr_at(&p, e + 2.0 * p.clr_step_size)).abs() < EXACT);
    }

    #[test]
    fn dropout_decays_monotonically(total in 1usize..200, a in 0usize..200, b in 0usize..200) {
        let base = [0.09, 0.06, 0.03];
        let (lo, hi) = (a.min(b), a.max(b));
        let (r_lo, r_hi) = (dropout_rate_at(&base, lo, total), dropout_rate_at(&base, hi, total));
        for (x, y) in r_lo.iter().zip(&r_hi) {
            prop_assert!(y <= x);
        }
        prop_assert_eq!(dropout_rate_at(&base, total, total), vec![0.0; 3]);
    }
}

#[test]
fn dropout_examples() {
    let base = [0.09, 0.06, 0.03];
    assert_eq!(dropout_rate_at(&base, 0, 50), vec![0.09, 0.06, 0.03]);
    assert_eq!(dropout_rate_at(&base, 50, 50), vec![0.0, 0.0, 0.0]);
    let half = dropout_rate_at(&base, 25, 50);
    for (h, e) in half.iter().zip([0.045, 0.03, 0.015]) {
        assert!((h - e).abs() < EXACT);
    }
}

#[test]
fn l1_examples() {
    let g = Graph::<f64>::new();
    let p = g.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let t = g.constant(Tensor::zeros(&[1, 3]));
    let loss = l1_loss(p, t).unwrap();
    assert_eq!(loss.value().item(), 2.0);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(p).unwrap().data(), &[1.0 / 3.0; 3]);
    assert_eq!(l1_loss(p, p).unwrap().value().item(), 0.0);
    let bad = g.constant(Tensor::zeros(&[2, 3]));
    assert_eq!(l1_loss(p, bad).err().unwrap().kind(), ErrorKind::Usage);
}

fn one_param(value: f64) -> (ParamStore<f64>, fgi_tensor::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add_param("w", Tensor::full(&[1], value)).unwrap();
    (store, id)
}

#[test]
fn first_adam_step_moves_by_lr() {
    let (mut store, id) = one_param(0.5);
    store.param_mut(id).grad = Some(Tensor::full(&[1], 1.0));
    let mut opt = Optimizer::new(OptimizerKind::Adam, (0.88, 0.999), 1e-8, 0.0);
    opt.step(&mut store, 0.001).unwrap();
    let delta = store.param(id).value.item() - 0.5;
    assert!((delta + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");

    let (mut store, id) = one_param(0.5);
    store.param_mut(id).grad = Some(Tensor::full(&[1], 0.0));
    let mut opt = Optimizer::new(OptimizerKind::Adam, (0.88, 0.999), 1e-8, 0.0);
    opt.step(&mut store, 0.001).unwrap();
    assert_eq!(store.param(id).value.item(), 0.5);
    assert_eq!(opt.step(&mut store, 0.0).err().unwrap().kind(), ErrorKind::Usage);
}

#[test]
fn adamw_without_decay_matches_adam_bit_for_bit() {
    let (mut a, id) = one_param(1.3);
    let (mut b, _) = one_param(1.3);
    let mut adam = Optimizer::new(OptimizerKind::Adam, (0.88, 0.999), 1e-8, 0.0);
    let mut adamw = Optimizer::new(OptimizerKind::AdamW, (0.88, 0.999), 1e-8, 0.0);
    for _ in 0..100 {
        // gradient of w² + sin(3w)
        for (store, opt) in [(&mut a, &mut adam), (&mut b, &mut adamw)] {
            let w = store.param(id).value.item();
            store.param_mut(id).grad = Some(Tensor::full(&[1], 2.0 * w + 3.0 * (3.0 * w).cos()));
            opt.step(store, 0.01).unwrap();
        }
        assert_eq!(a.param(id).value.item().to_bits(), b.param(id).value.item().to_bits());
    }
}

#[test]
fn adamw_decay_is_decoupled() {
    let (mut store, id) = one_param(2.0);
    store.param_mut(id).grad = Some(Tensor::full(&[1], 0.0));
    let mut opt = Optimizer::new(OptimizerKind::AdamW, (0.88, 0.99), 1e-8, 0.5);
    opt.step(&mut store, 0.1).unwrap();
    assert!((store.param(id).value.item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
}

#[test]
fn small_steps_descend_a_quadratic() {
    let target = [0.3, -1.2, 2.0];
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("w", Tensor::zeros(&[3])).unwrap();
    let f = |w: &[f64]| w.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut opt = Optimizer::new(OptimizerKind::Adam, (0.9, 0.999), 1e-8, 0.0);
    let mut prev = f(store.param(id).value.data());
    for _ in 0..50 {
        let w = store.param(id).value.data().to_vec();
        let g: Vec<f64> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        store.param_mut(id).grad = Some(Tensor::from_vec(&[3], g).unwrap());
        opt.step(&mut store, 0.01).unwrap();
        let now = f(store.param(id).value.data());
        assert!(now < prev);
        prev = now;
    }
}

fn tiny_setup() -> (ModelConfig, GazeDataset, TrainPlan) {
    let config = ModelConfig::reference().with_input_size(32, 32);
    let ds = synth_dataset(&SynthOptions::new(6, 11).size(32)).unwrap();
    let plan = TrainPlan { epochs: 2, batch_size: 4, seed: 5, ..TrainPlan::preset(Preset::EyeDiap) };
    (config, ds, plan)
}

#[test]
fn fit_is_deterministic_and_records_the_schedule() {
    let (config, ds, plan) = tiny_setup();
    let run = || {
        let mut net = FgiNet::<f32>::build_seeded(&config, plan.seed).unwrap();
        let h = fit(&mut net, &ds, Some(&ds), &plan, |_| {}).unwrap();
        (h, net)
    };
    let (h1, n1) = run();
    let (h2, n2) = run();
    assert_eq!(h1.to_csv(), h2.to_csv());
    for (a, b) in n1.store.params().iter().zip(n2.store.params()) {
        assert_eq!(a.value.data(), b.value.data());
    }
    assert_eq!(h1.epochs.len(), 2);
    for r in &h1.epochs {
        assert_eq!(r.lr, lr_at(&plan, r.epoch as f64));
        assert!(r.train_loss.is_finite() && r.val_angular_error_deg.is_some());
    }
    assert!(h1.to_csv().starts_with("epoch,lr,train_loss,val_angular_error_deg\n"));
}

#[test]
fn non_finite_input_aborts_with_attribution() {
    let (config, mut ds, plan) = tiny_setup();
    let size = ds.samples[0].image.shape().to_vec();
    let s = &ds.samples[0];
    ds.samples[0] = GazeSample::new(Tensor::full(&size, f32::NAN), s.yaw, s.pitch, s.subject.clone());
    let mut net = FgiNet::<f32>::build_seeded(&config, 0).unwrap();
    let err = fit(&mut net, &ds, None, &plan, |_| {}).err().unwrap();
    assert_eq!(err.kind(), ErrorKind::Numeric);
    assert!(err.to_string().contains("epoch 1 batch"), "{err}");
}

#[test]
fn fit_rejects_degenerate_inputs() {
    let (config, ds, plan) = tiny_setup();
    let mut net = FgiNet::<f32>::build_seeded(&config, 0).unwrap();
    assert!(fit(&mut net, &ds.subset(&[0]), None, &plan, |_| {}).is_err());
    let bad = TrainPlan { base_lr: 0.01, max_lr: 0.001, ..plan };
    assert_eq!(fit(&mut net, &ds, None, &bad, |_| {}).err().unwrap().kind(), ErrorKind::Config);
}
