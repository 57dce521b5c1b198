use std::fs;
use std::path::Path;
use std::process::ExitCode;

use fgi_net::checkpoint;
use fgi_net::config::KvDoc;
use fgi_net::data::{load_dataset, synth_dataset, write_dataset, GazeDataset, LoadOptions, SynthOptions};
use fgi_net::eval::{evaluate, per_sample_csv, write_fold_csv};
use fgi_net::gradsuite::{run_suite, GRAD_TOLERANCE};
use fgi_net::model::{apply_ablation, count_flops, ParamReport};
use fgi_net::training::{cross_validate, fit};
use fgi_net::{AblationTarget, Error, FgiNet, ModelConfig, Result, TrainPlan};

use crate::{Command, ModelArgs, TrainArgs};

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(args) => train(&args),
        Command::Eval { data, checkpoint, out, lenient } => eval(&data, &checkpoint, out.as_deref(), lenient),
        Command::Cv { train, protocol } => cv(&train, protocol),
        Command::Synth { n, seed, size, subjects, format, out } => {
            let ds = synth_dataset(&SynthOptions::new(n, seed).size(size).subjects(subjects))?;
            let manifest = write_dataset(&ds, &out, format)?;
            println!("wrote {n} samples ({size}x{size}, {subjects} subjects) to {}", manifest.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Params { model, depth } => params(&model, depth),
        Command::Flops { model, size, depth } => flops(&model, size, depth),
        Command::Gradcheck { seed, seeds } => gradcheck(seed, seeds),
        Command::Ablate { model, data, epochs, seed } => ablate(&model, data.as_deref(), epochs, seed),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_doc(args: &ModelArgs) -> Result<KvDoc> {
    match &args.config {
        Some(path) => KvDoc::parse(&read_text(path)?),
        None => Ok(KvDoc::new()),
    }
}

/// Model keys of `doc` applied over the reference architecture.
fn model_config(doc: &KvDoc) -> Result<ModelConfig> {
    let mut model = doc.clone();
    model.remove_prefix("train.");
    ModelConfig::from_overrides(&model)
}

fn plan(args: &TrainArgs, doc: &KvDoc) -> Result<TrainPlan> {
    let mut plan = TrainPlan::preset(args.model.preset).with_overrides(doc)?;
    if let Some(seed) = args.seed {
        plan.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        plan.epochs = epochs;
    }
    if let Some(b) = args.batch_size {
        plan.batch_size = b;
    }
    plan.validate()?;
    Ok(plan)
}

fn load(path: &Path, lenient: bool) -> Result<GazeDataset> {
    let (ds, errors) = load_dataset(path, &LoadOptions { lenient, image_size: None })?;
    for e in &errors {
        eprintln!("skipped row {}: {}", e.row, e.message);
    }
    if ds.is_empty() {
        return Err(Error::Data(format!("{}: no usable samples", path.display())));
    }
    Ok(ds)
}

/// Takes the input size from the data unless the config pins it.
fn fit_input_size(mut config: ModelConfig, doc: &KvDoc, ds: &GazeDataset) -> Result<ModelConfig> {
    let size = ds.image_size().expect("nonempty dataset");
    if doc.contains("input.height") || doc.contains("input.width") {
        check_size(&config, size)?;
    } else {
        config.input_size = size;
    }
    config.validate()?;
    Ok(config)
}

fn check_size(config: &ModelConfig, size: (usize, usize)) -> Result<()> {
    if config.input_size != size {
        return Err(Error::Data(format!("images are {}x{} but the model expects {}x{}", size.0, size.1, config.input_size.0, config.input_size.1)));
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<ExitCode> {
    let doc = load_doc(&args.model)?;
    let plan = plan(args, &doc)?;
    let ds = load(&args.data, args.lenient)?;
    let val = args.val.as_deref().map(|p| load(p, args.lenient)).transpose()?;
    let mut net = match &args.checkpoint {
        Some(path) => {
            let net = checkpoint::load(path)?;
            check_size(&net.config, ds.image_size().expect("nonempty dataset"))?;
            net
        }
        None => FgiNet::build_seeded(&fit_input_size(model_config(&doc)?, &doc, &ds)?, plan.seed)?,
    };
    if let Some(v) = &val {
        check_size(&net.config, v.image_size().expect("nonempty dataset"))?;
    }
    println!(
        "training on {} samples for {} epochs (batch {}, {}, seed {})",
        ds.len(),
        plan.epochs,
        plan.batch_size,
        plan.optimizer,
        plan.seed
    );
    let total = plan.epochs;
    let history = fit(&mut net, &ds, val.as_ref(), &plan, |r| {
        let val = r.val_angular_error_deg.map(|v| format!("  val {v:.3}°")).unwrap_or_default();
        println!("epoch {:>4}/{total}  lr {:.6}  loss {:.5}{val}", r.epoch, r.lr, r.train_loss);
    })?;
    fs::create_dir_all(&args.out)?;
    checkpoint::save(&net, &args.out.join("model.ckpt"))?;
    history.write_csv(&args.out.join("history.csv"))?;
    let report = evaluate(&net, &ds)?;
    println!("train mean angular error: {:.4}°", report.mean_deg);
    println!("wrote {} and {}", args.out.join("model.ckpt").display(), args.out.join("history.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn eval(data: &Path, ckpt: &Path, out: Option<&Path>, lenient: bool) -> Result<ExitCode> {
    let net = checkpoint::load(ckpt)?;
    let ds = load(data, lenient)?;
    check_size(&net.config, ds.image_size().expect("nonempty dataset"))?;
    let report = evaluate(&net, &ds)?;
    println!("mean angular error: {:.4}° over {} samples", report.mean_deg, ds.len());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.csv"), per_sample_csv(&ds, &report))?;
        println!("wrote {}", dir.join("eval.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cv(args: &TrainArgs, protocol: Option<fgi_net::eval::Protocol>) -> Result<ExitCode> {
    let doc = load_doc(&args.model)?;
    let plan = plan(args, &doc)?;
    let protocol = protocol.or(args.model.preset.protocol()).ok_or_else(|| {
        Error::Usage(format!("preset {} has no cross-validation protocol; pass --protocol", args.model.preset.name()))
    })?;
    let ds = load(&args.data, args.lenient)?;
    let config = fit_input_size(model_config(&doc)?, &doc, &ds)?;
    let results = cross_validate(&config, &ds, protocol, &plan, |r| {
        println!("fold {:<8} n_test {:>5}  mean error {:.4}°", r.fold, r.n_test, r.mean_error_deg);
    })?;
    let mean = results.iter().map(|r| r.mean_error_deg).sum::<f64>() / results.len() as f64;
    println!("mean over {} folds: {mean:.4}°", results.len());
    fs::create_dir_all(&args.out)?;
    write_fold_csv(&args.out.join("folds.csv"), &results)?;
    println!("wrote {}", args.out.join("folds.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn print_table(rows: &[(String, u64)], total: u64) {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(5);
    for (k, n) in rows {
        println!("{k:<width$}  {n:>13}  {:>6.2}%", 100.0 * *n as f64 / total.max(1) as f64);
    }
}

fn params(args: &ModelArgs, depth: usize) -> Result<ExitCode> {
    let config = model_config(&load_doc(args)?)?;
    let net = FgiNet::<f32>::build_seeded(&config, 0)?;
    let report = ParamReport::of(&net.store, depth.max(1));
    let rows: Vec<(String, u64)> = report.groups.iter().map(|(k, n)| (k.clone(), *n as u64)).collect();
    print_table(&rows, report.total as u64);
    println!("total params: {} ({:.3}M)", report.total, report.total as f64 / 1e6);
    Ok(ExitCode::SUCCESS)
}

fn flops(args: &ModelArgs, size: Option<usize>, depth: usize) -> Result<ExitCode> {
    let config = model_config(&load_doc(args)?)?;
    let (h, w) = size.map_or(config.input_size, |s| (s, s));
    let report = count_flops(&config, h, w)?;
    print_table(&report.grouped(depth.max(1)), report.total_macs());
    println!("total MACs at {h}x{w}: {} ({:.4} G)", report.total_macs(), report.gmacs());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seed: u64, seeds: u64) -> Result<ExitCode> {
    let list: Vec<u64> = (seed..seed + seeds.max(1)).collect();
    let results = run_suite(&list, |r| {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!("{status} {:<30} seed {:<3} max rel err {:.3e}  ({})", r.name, r.seed, r.report.max_rel_error, r.report.worst);
    })?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} above {GRAD_TOLERANCE:e}", results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(5) })
}

fn ablate(args: &ModelArgs, data: Option<&Path>, epochs: usize, seed: Option<u64>) -> Result<ExitCode> {
    let doc = load_doc(args)?;
    let ds = data.map(|p| load(p, false)).transpose()?;
    let mut base_cfg = model_config(&doc)?;
    if let Some(ds) = &ds {
        base_cfg = fit_input_size(base_cfg, &doc, ds)?;
    }
    let (h, w) = base_cfg.input_size;
    let mut plan = TrainPlan::preset(args.preset).with_overrides(&doc)?;
    plan.epochs = epochs;
    if let Some(s) = seed {
        plan.seed = s;
    }
    let base = FgiNet::<f32>::build_seeded(&base_cfg, plan.seed)?;
    let base_macs = count_flops(&base_cfg, h, w)?.total_macs();
    let base_names = base.param_names();
    let size_of = |name: &str| base.store.find_param(name).map_or(0, |id| base.store.param(id).value.numel());
    let mut variants = vec![("base".to_string(), base_cfg.clone())];
    variants.extend(AblationTarget::ALL.map(|t| (format!("-{}", t.name()), apply_ablation(&base_cfg, t))));
    println!("{:<12} {:>10} {:>10} {:>14} {:>13}", "variant", "params", "Δparams", "MACs", "ΔMACs");
    for (label, cfg) in &variants {
        let mut net = FgiNet::<f32>::build_seeded(cfg, plan.seed)?;
        let macs = count_flops(cfg, h, w)?.total_macs();
        let n = net.store.num_params();
        let removed: usize = base_names.difference(&net.param_names()).map(|name| size_of(name)).sum();
        println!(
            "{label:<12} {n:>10} {:>10} {macs:>14} {:>13}",
            n as i64 - base.store.num_params() as i64,
            macs as i64 - base_macs as i64
        );
        if removed > 0 {
            println!("{:<12} removed subgraph holds {removed} params", "");
        }
        if let Some(ds) = &ds {
            fit(&mut net, ds, None, &plan, |_| {})?;
            println!("{:<12} train error after {epochs} epoch(s): {:.4}°", "", evaluate(&net, ds)?.mean_deg);
        }
    }
    Ok(ExitCode::SUCCESS)
}
