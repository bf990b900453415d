//! The toy-scale experiment suite: an uncoded baseline and coded networks
//! trained on Gaussian blobs, followed by every analysis.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    ablate_branches, calibrate_threshold, early_decoder_accuracy, extract_binary_classifier, precision_recall,
    AblationConfig, BlockAccuracy, BranchSet, DecodeScaling, Record,
};
use crate::autodiff::Precision;
use crate::blocks::{Penalty, RemovalConvention};
use crate::codebook::GenerateOptions;
use crate::data::{generate_blobs, BlobsConfig, DatasetSplit};
use crate::error::{Error, Result};
use crate::network::{build_network, count_parameters, generate_schemes, train, ArchSpec, CountPolicy, Keep, Network, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySuiteConfig {
    pub blobs: BlobsConfig,
    pub train: TrainConfig,
    /// Penalties compared in the exponent ablation; the first one trains
    /// the network used by every other analysis.
    pub penalties: Vec<Penalty>,
    pub trials: usize,
    pub analysis_seed: u64,
    pub decode: DecodeScaling,
    pub removal: RemovalConvention,
    pub precision: Precision,
    pub parallel: bool,
}

impl Default for ToySuiteConfig {
    fn default() -> Self {
        Self {
            blobs: BlobsConfig::default(),
            train: TrainConfig::default(),
            penalties: vec![Penalty::Power(4), Penalty::Power(2), Penalty::Abs],
            trials: 20,
            analysis_seed: 0,
            decode: DecodeScaling::Ratio,
            removal: RemovalConvention::default(),
            precision: Precision::F64,
            parallel: false,
        }
    }
}

pub fn penalty_label(p: Penalty) -> String {
    match p {
        Penalty::Power(e) => format!("power{e}"),
        Penalty::Abs => "abs".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedSummary {
    pub label: String,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub first_coding_losses: Vec<f64>,
    pub last_coding_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub class: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub params: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySuiteReport {
    pub baseline: TrainedSummary,
    /// One entry per configured penalty, in order.
    pub coded: Vec<TrainedSummary>,
    pub deepest_block: usize,
    pub shallowest_block: usize,
    pub removed_branches: usize,
    pub intact_accuracy: f64,
    pub active_removed_accuracy: f64,
    pub inactive_removed_accuracy: f64,
    pub classifiers: Vec<ClassifierSummary>,
    pub early_decoders: Vec<BlockAccuracy>,
}

impl ToySuiteReport {
    pub fn active_drop(&self) -> f64 {
        self.intact_accuracy - self.active_removed_accuracy
    }

    pub fn inactive_drop(&self) -> f64 {
        self.intact_accuracy - self.inactive_removed_accuracy
    }
}

fn summarize(label: String, net: &Network) -> Result<TrainedSummary> {
    let first = net.history.first().ok_or_else(|| Error::Analysis("no training history".into()))?;
    let last = net.history.last().unwrap_or(first);
    Ok(TrainedSummary {
        label,
        train_accuracy: last.train_accuracy,
        val_accuracy: last.val_accuracy.unwrap_or(f64::NAN),
        first_coding_losses: first.coding_losses.clone(),
        last_coding_losses: last.coding_losses.clone(),
    })
}

fn history_records(label: &str, net: &Network, out: &mut Vec<Record>) {
    let exp = format!("train/{label}");
    for h in &net.history {
        out.push(Record::new(&exp, "loss", h.loss).trial(h.epoch));
        out.push(Record::new(&exp, "class_loss", h.class_loss).trial(h.epoch));
        out.push(Record::new(&exp, "train_accuracy", h.train_accuracy).trial(h.epoch));
        if let Some(v) = h.val_accuracy {
            out.push(Record::new(&exp, "val_accuracy", v).trial(h.epoch));
        }
        for (slot, &c) in h.coding_losses.iter().enumerate() {
            out.push(Record::new(&exp, "coding_loss", c).block(slot).trial(h.epoch));
        }
    }
}

/// Trains the baseline and one coded network per penalty, then runs
/// ablation, extraction and early decoding on the first coded network.
/// In the records, `trial` holds the epoch for training curves.
pub fn run_toy_suite(cfg: &ToySuiteConfig) -> Result<(ToySuiteReport, Vec<Record>)> {
    let Some(&main_penalty) = cfg.penalties.first() else {
        return Err(Error::Config("at least one penalty is required".into()));
    };
    let DatasetSplit { train: train_set, val } = generate_blobs(&cfg.blobs)?;
    let arch = ArchSpec::toy(cfg.blobs.dim, cfg.blobs.num_classes);
    let schemes = generate_schemes(&arch, &GenerateOptions::default())?;
    let mut records = Vec::new();
    let train_cfg = TrainConfig {
        parallel_eval: cfg.parallel,
        ..cfg.train.clone()
    };

    log::info!("training uncoded baseline");
    let mut baseline = build_network(&arch.uncoded(), &[], train_cfg.seed, cfg.precision)?;
    let plain = TrainConfig {
        mu: 0.0,
        p_drop: 0.0,
        ..train_cfg.clone()
    };
    train(&mut baseline, &train_set, Some(&val), &plain)?;
    history_records("baseline", &baseline, &mut records);
    let baseline_summary = summarize("baseline".into(), &baseline)?;

    let mut coded = Vec::new();
    let mut main = None;
    for &penalty in &cfg.penalties {
        let label = penalty_label(penalty);
        log::info!("training coded network, penalty {label}");
        let mut net = build_network(&arch, &schemes, train_cfg.seed, cfg.precision)?;
        train(&mut net, &train_set, Some(&val), &TrainConfig { penalty, ..train_cfg.clone() })?;
        history_records(&format!("coded/{label}"), &net, &mut records);
        let s = summarize(label, &net)?;
        records.push(Record::new("exponent", &format!("val_accuracy/{}", s.label), s.val_accuracy));
        coded.push(s);
        if penalty == main_penalty && main.is_none() {
            main = Some(net);
        }
    }
    let net = main.expect("first penalty trained");
    records.push(Record::new("baseline", "val_accuracy", baseline_summary.val_accuracy));
    records.push(Record::new("coded", "val_accuracy", coded[0].val_accuracy));

    let coded_blocks = net.coded_blocks();
    let (&shallowest, &deepest) = coded_blocks
        .first()
        .zip(coded_blocks.last())
        .ok_or_else(|| Error::Analysis("network has no coded blocks".into()))?;
    let intact = net.evaluate(&val, 256, cfg.parallel)?.accuracy;
    let count = net.blocks()[deepest].spec.n_act;
    let ablation = |which| {
        ablate_branches(
            &net,
            &val,
            &AblationConfig {
                block: deepest,
                which,
                count,
                trials: cfg.trials,
                seed: cfg.analysis_seed,
                convention: cfg.removal,
            },
            cfg.parallel,
        )
    };
    let active = ablation(BranchSet::Active)?;
    let inactive = ablation(BranchSet::Inactive)?;
    for (name, res) in [("active", &active), ("inactive", &inactive)] {
        for (t, &a) in res.trial_accuracies.iter().enumerate() {
            records.push(Record::new(&format!("ablation/{name}"), "accuracy", a).block(deepest).trial(t));
        }
    }

    let mut classifiers = Vec::new();
    for class in 0..arch.num_classes {
        let mut bc = extract_binary_classifier(&net, class)?;
        let threshold = calibrate_threshold(&mut bc, &train_set, cfg.parallel)?;
        let pr = precision_recall(&bc, threshold, &val, None, cfg.analysis_seed, cfg.parallel)?;
        let count = count_parameters(&arch, &schemes, Keep::Class(class), CountPolicy::Retained)?;
        let exp = "binary";
        records.push(Record::new(exp, "threshold", threshold).class(class));
        records.push(Record::new(exp, "precision", pr.precision).class(class));
        records.push(Record::new(exp, "recall", pr.recall).class(class));
        records.push(Record::new(exp, "f1", pr.f1).class(class));
        records.push(Record::new(exp, "params", bc.num_params() as f64).class(class));
        classifiers.push(ClassifierSummary {
            class,
            threshold,
            precision: pr.precision,
            recall: pr.recall,
            f1: pr.f1,
            params: bc.num_params(),
            fraction: count.fraction,
        });
    }

    let early = early_decoder_accuracy(&net, &val, cfg.decode, cfg.parallel)?;
    for b in &early {
        records.push(Record::new("early_decode", "accuracy", b.accuracy).block(b.block));
    }

    let report = ToySuiteReport {
        baseline: baseline_summary,
        coded,
        deepest_block: deepest,
        shallowest_block: shallowest,
        removed_branches: count,
        intact_accuracy: intact,
        active_removed_accuracy: active.mean_accuracy,
        inactive_removed_accuracy: inactive.mean_accuracy,
        classifiers,
        early_decoders: early,
    };
    Ok((report, records))
}
