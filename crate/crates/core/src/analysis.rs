//! Experiments over trained networks: branch ablation, per-class binary
//! classifiers, precision/recall and early decoding from branch energies.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::blocks::{BranchRemoval, RemovalConvention};
use crate::codebook::CodingScheme;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{accuracy, Head, Network, StemLayer};
use crate::nn::{BatchNorm, ParamStore};

const INFER_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchSet {
    Active,
    Inactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub block: usize,
    pub which: BranchSet,
    pub count: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub convention: RemovalConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub config: AblationConfig,
    pub trial_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

/// Removes `count` randomly chosen branches of one coded block from every
/// sample, drawn from the branches that are active (or inactive) for that
/// sample's true class, and reports eval accuracy per trial.
pub fn ablate_branches(net: &Network, data: &Dataset, cfg: &AblationConfig, parallel: bool) -> Result<AblationResult> {
    let block = net
        .blocks()
        .get(cfg.block)
        .ok_or_else(|| Error::Analysis(format!("no block {}", cfg.block)))?;
    let coding = block
        .coding
        .as_ref()
        .ok_or_else(|| Error::Analysis(format!("block {} is not coded", cfg.block)))?;
    let sets: Vec<Vec<usize>> = coding
        .scheme
        .codewords()
        .iter()
        .map(|w| match cfg.which {
            BranchSet::Active => w.active_branches(),
            BranchSet::Inactive => w.inactive_branches(),
        })
        .collect();
    if let Some(small) = sets.iter().find(|s| s.len() < cfg.count) {
        return Err(Error::Analysis(format!(
            "cannot remove {} of {} {:?} branches",
            cfg.count,
            small.len(),
            cfg.which
        )));
    }
    let n = block.branches;
    let run = |trial: usize| -> Result<f64> {
        let mut rng = trial_rng(cfg.seed, trial);
        let keep = data
            .y
            .iter()
            .map(|&y| {
                let mut row = vec![true; n];
                for &b in sets[y].choose_multiple(&mut rng, cfg.count) {
                    row[b] = false;
                }
                row
            })
            .collect();
        let removal = BranchRemoval {
            keep,
            convention: cfg.convention,
        };
        let inf = net.infer(&data.x, &[(cfg.block, removal)], INFER_BATCH, false)?;
        Ok(accuracy(&inf.logits, &data.y))
    };
    let trials: Vec<f64> = if parallel {
        (0..cfg.trials).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..cfg.trials).map(run).collect::<Result<_>>()?
    };
    let mean = trials.iter().sum::<f64>() / trials.len().max(1) as f64;
    Ok(AblationResult {
        config: *cfg,
        trial_accuracies: trials,
        mean_accuracy: mean,
    })
}

/// One-logit sub-network answering "is this class `class`?".
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryClassifier {
    pub net: Network,
    pub class: usize,
    pub threshold: f64,
}

impl BinaryClassifier {
    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn logits(&self, x: &Tensor, parallel: bool) -> Result<Vec<f64>> {
        Ok(self.net.infer(x, &[], INFER_BATCH, parallel)?.logits.into_data())
    }
}

fn copy_bn(src: &ParamStore, dst: &mut ParamStore, bn: &BatchNorm, prefix: &str) -> BatchNorm {
    BatchNorm {
        gamma: dst.add(format!("{prefix}.gamma"), src.value(bn.gamma).clone(), false),
        beta: dst.add(format!("{prefix}.beta"), src.value(bn.beta).clone(), false),
        running_mean: dst.add_buffer(format!("{prefix}.running_mean"), src.buffer(bn.running_mean).clone()),
        running_var: dst.add_buffer(format!("{prefix}.running_var"), src.buffer(bn.running_var).clone()),
        channels: bn.channels,
    }
}

/// Keeps, in every coded block, only the branches active for `class`, and
/// only row `class` of the head. No retraining; the threshold starts at 0.
pub fn extract_binary_classifier(net: &Network, class: usize) -> Result<BinaryClassifier> {
    if class >= net.num_outputs() {
        return Err(Error::Analysis(format!("class {class} outside {} outputs", net.num_outputs())));
    }
    let src = &net.store;
    let mut store = ParamStore::new();
    let stem = StemLayer {
        w: store.add("stem.w", src.value(net.stem.w).clone(), true),
        bn: copy_bn(src, &mut store, &net.stem.bn, "stem.bn"),
    };
    let mut blocks = Vec::with_capacity(net.blocks().len());
    for (i, b) in net.blocks().iter().enumerate() {
        let keep: Vec<usize> = match &b.coding {
            Some(c) => c.scheme.codeword(class).active_branches(),
            None => (0..b.branches).collect(),
        };
        blocks.push(b.extract(src, &mut store, &format!("blocks.{i}"), &keep)?);
    }
    let head = Head {
        w: store.add("head.w", src.value(net.head.w).select_rows(&[class]), true),
        b: store.add("head.b", src.value(net.head.b).select_rows(&[class]), false),
    };
    Ok(BinaryClassifier {
        net: Network {
            arch: net.arch.clone(),
            schemes: net.schemes.clone(),
            store,
            seed: net.seed,
            precision: net.precision,
            history: Vec::new(),
            stem,
            blocks,
            head,
        },
        class,
        threshold: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// No positive predictions, so precision is reported as 0.
    pub degenerate: bool,
}

impl PRPoint {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let degenerate = tp + fp == 0;
        let precision = if degenerate { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            degenerate,
        }
    }
}

/// Predicts positive when `logit >= threshold`.
pub fn pr_point(logits: &[f64], positive: &[bool], threshold: f64) -> PRPoint {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&l, &p) in logits.iter().zip(positive) {
        match (l >= threshold, p) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    PRPoint::from_counts(tp, fp, tn, fn_)
}

/// Candidate thresholds are the smallest logit (everything positive) and
/// the midpoints of the sorted unique logits; returns the first one with
/// the highest F1.
pub fn best_threshold(logits: &[f64], positive: &[bool]) -> Result<(f64, PRPoint)> {
    if !positive.iter().any(|&p| p) {
        return Err(Error::Analysis("no positive samples".into()));
    }
    let mut unique: Vec<f64> = logits.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let candidates = unique
        .first()
        .copied()
        .into_iter()
        .chain(unique.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let mut best: Option<(f64, PRPoint)> = None;
    for t in candidates {
        let p = pr_point(logits, positive, t);
        if best.is_none_or(|(_, b)| p.f1 > b.f1) {
            best = Some((t, p));
        }
    }
    best.ok_or_else(|| Error::Analysis("no samples".into()))
}

/// Sets and returns the F1-maximizing threshold of `bc` on `data`.
pub fn calibrate_threshold(bc: &mut BinaryClassifier, data: &Dataset, parallel: bool) -> Result<f64> {
    let logits = bc.logits(&data.x, parallel)?;
    let positive: Vec<bool> = data.y.iter().map(|&y| y == bc.class).collect();
    let (t, _) = best_threshold(&logits, &positive)?;
    bc.threshold = t;
    Ok(t)
}

/// Precision and recall of `bc` at `threshold`. With `negative_ratio`,
/// a seeded random subset of `ratio * positives` negatives is scored.
pub fn precision_recall(
    bc: &BinaryClassifier,
    threshold: f64,
    data: &Dataset,
    negative_ratio: Option<f64>,
    seed: u64,
    parallel: bool,
) -> Result<PRPoint> {
    let pos: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] == bc.class).collect();
    if pos.is_empty() {
        return Err(Error::Analysis(format!("no positives of class {}", bc.class)));
    }
    let neg: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] != bc.class).collect();
    let neg = match negative_ratio {
        Some(r) if r.is_finite() => {
            let want = ((r * pos.len() as f64).round() as usize).min(neg.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pick: Vec<usize> = neg.choose_multiple(&mut rng, want).copied().collect();
            pick.sort_unstable();
            pick
        }
        _ => neg,
    };
    let mut idx = pos.clone();
    idx.extend(&neg);
    let logits = bc.logits(&data.x.select_rows(&idx), parallel)?;
    let positive: Vec<bool> = (0..idx.len()).map(|i| i < pos.len()).collect();
    Ok(pr_point(&logits, &positive, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeScaling {
    /// Compare `r * v` with the codewords.
    #[default]
    Ratio,
    /// Compare the normalized energies directly.
    Raw,
}

/// Class whose codeword is nearest (Euclidean) to the energies; ties go to
/// the lowest class.
pub fn early_decode(energies: &[f64], scheme: &CodingScheme, scaling: DecodeScaling) -> usize {
    let scale = match scaling {
        DecodeScaling::Ratio => scheme.ratio(),
        DecodeScaling::Raw => 1.0,
    };
    let mut best = (0, f64::INFINITY);
    for (k, w) in scheme.codewords().iter().enumerate() {
        let d: f64 = energies
            .iter()
            .enumerate()
            .map(|(b, &e)| {
                let t = if w.is_active(b) { 1.0 } else { 0.0 };
                (scale * e - t).powi(2)
            })
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockAccuracy {
    pub block: usize,
    pub accuracy: f64,
}

/// Early-decoder accuracy of every coded block, in depth order.
pub fn early_decoder_accuracy(net: &Network, data: &Dataset, scaling: DecodeScaling, parallel: bool) -> Result<Vec<BlockAccuracy>> {
    let inf = net.infer(&data.x, &[], INFER_BATCH, parallel)?;
    let mut out = Vec::new();
    for (slot, &b) in inf.energy_blocks.iter().enumerate() {
        let Some(coding) = &net.blocks()[b].coding else {
            continue;
        };
        let e = &inf.energies[slot];
        let hits = data
            .y
            .iter()
            .enumerate()
            .filter(|&(i, &y)| early_decode(e.row(i), &coding.scheme, scaling) == y)
            .count();
        out.push(BlockAccuracy {
            block: b,
            accuracy: hits as f64 / data.len().max(1) as f64,
        });
    }
    Ok(out)
}

/// One measurement in tidy form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub experiment: String,
    pub block: Option<usize>,
    pub class: Option<usize>,
    pub trial: Option<usize>,
    pub metric: String,
    pub value: f64,
}

impl Record {
    pub fn new(experiment: &str, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            block: None,
            class: None,
            trial: None,
            metric: metric.into(),
            value,
        }
    }

    pub fn block(mut self, block: usize) -> Self {
        self.block = Some(block);
        self
    }

    pub fn class(mut self, class: usize) -> Self {
        self.class = Some(class);
        self
    }

    pub fn trial(mut self, trial: usize) -> Self {
        self.trial = Some(trial);
        self
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
