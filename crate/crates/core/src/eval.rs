//! Angular-error evaluation and cross-validation folds.

use std::path::Path;
use std::str::FromStr;

use fgi_tensor::Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::GazeDataset;
use crate::error::{usage_err, Error, Result};
use crate::gaze::{angular_error_deg, Vec3};
use crate::model::FgiNet;

pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    LeaveOneSubjectOut,
    KFold(usize),
}

impl FromStr for Protocol {
    type Err = Error;

    /// `loso` or `kfold:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loso" | "leave-one-subject-out" => Ok(Protocol::LeaveOneSubjectOut),
            _ => s
                .strip_prefix("kfold:")
                .and_then(|k| k.parse().ok())
                .map(Protocol::KFold)
                .ok_or_else(|| usage_err(format!("unknown protocol `{s}` (expected loso or kfold:<k>)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    /// Subject held out, or `fold<i>`.
    pub label: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn fold_from_test(label: String, mut test: Vec<usize>, n: usize) -> Fold {
    test.sort_unstable();
    let mut in_test = vec![false; n];
    test.iter().for_each(|&i| in_test[i] = true);
    let train = (0..n).filter(|&i| !in_test[i]).collect();
    Fold { label, train, test }
}

/// Splits `ds` into folds whose test sets partition it. K-fold keeps every
/// subject inside one fold when there are at least `k` subjects, and
/// falls back to a shuffled index split otherwise.
pub fn make_folds(ds: &GazeDataset, protocol: Protocol, seed: u64) -> Result<Vec<Fold>> {
    let n = ds.len();
    let subjects = ds.subjects();
    let members = |s: &str| -> Vec<usize> { (0..n).filter(|&i| ds.samples[i].subject == s).collect() };
    match protocol {
        Protocol::LeaveOneSubjectOut => {
            if subjects.len() < 2 {
                return Err(usage_err(format!("leave-one-subject-out needs ≥ 2 subjects, found {}", subjects.len())));
            }
            Ok(subjects.iter().map(|s| fold_from_test(s.clone(), members(s), n)).collect())
        }
        Protocol::KFold(k) => {
            if k < 2 || k > n {
                return Err(usage_err(format!("{k}-fold split needs 2 ≤ k ≤ {n} samples")));
            }
            let mut rng = Rng::seed_from_u64(seed);
            let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
            if subjects.len() >= k {
                let mut groups: Vec<Vec<usize>> = subjects.iter().map(|s| members(s)).collect();
                groups.shuffle(&mut rng);
                // largest groups first, each into the currently smallest fold
                groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
                for g in groups {
                    let f = (0..k).min_by_key(|&f| (tests[f].len(), f)).expect("k ≥ 2");
                    tests[f].extend(g);
                }
            } else {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for (j, i) in order.into_iter().enumerate() {
                    tests[j * k / n].push(i);
                }
            }
            Ok(tests.into_iter().enumerate().map(|(f, t)| fold_from_test(format!("fold{f}"), t, n)).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_deg: f64,
    pub per_sample: Vec<f64>,
}

/// Mean angular error of `preds` against `gts`. The sum runs over sorted
/// errors so the mean does not depend on sample order.
pub fn evaluate_predictions(preds: &[Vec3], gts: &[Vec3]) -> Result<EvalReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(usage_err(format!("evaluation needs equal nonempty sets, got {} and {}", preds.len(), gts.len())));
    }
    let per_sample = preds.iter().zip(gts).map(|(p, g)| angular_error_deg(p, g)).collect::<Result<Vec<_>>>()?;
    let mut sorted = per_sample.clone();
    sorted.sort_by(f64::total_cmp);
    let mean_deg = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(EvalReport { mean_deg, per_sample })
}

/// Eval-mode predictions for every sample, in dataset order.
pub fn predict(net: &FgiNet<f32>, ds: &GazeDataset) -> Result<Vec<Vec3>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _) = ds.batch(chunk)?;
        let y = net.predict(&images)?;
        out.extend(y.data().chunks_exact(3).map(|v| [v[0] as f64, v[1] as f64, v[2] as f64]));
    }
    Ok(out)
}

pub fn evaluate(net: &FgiNet<f32>, ds: &GazeDataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(usage_err("cannot evaluate on an empty sample set"));
    }
    let preds = predict(net, ds)?;
    let gts: Vec<Vec3> = ds.samples.iter().map(|s| s.gaze).collect();
    evaluate_predictions(&preds, &gts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: String,
    pub n_test: usize,
    pub mean_error_deg: f64,
}

pub fn fold_csv(results: &[FoldResult]) -> String {
    let mut s = String::from("fold,n_test,mean_error_deg\n");
    for r in results {
        s.push_str(&format!("{},{},{}\n", r.fold, r.n_test, r.mean_error_deg));
    }
    s
}

pub fn write_fold_csv(path: &Path, results: &[FoldResult]) -> Result<()> {
    std::fs::write(path, fold_csv(results))?;
    Ok(())
}

/// Per-sample errors as `index,subject,error_deg` CSV.
pub fn per_sample_csv(ds: &GazeDataset, report: &EvalReport) -> String {
    let mut s = String::from("index,subject,error_deg\n");
    for (i, (sample, e)) in ds.samples.iter().zip(&report.per_sample).enumerate() {
        s.push_str(&format!("{i},{},{e}\n", sample.subject));
    }
    s
}
