use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use coded_resnext::analysis::{
    ablate_branches, calibrate_threshold, early_decoder_accuracy, extract_binary_classifier, precision_recall,
    write_records, AblationConfig, BranchSet, DecodeScaling, Record,
};
use coded_resnext::autodiff::{gradcheck, ConvOptions, Graph, NormMode, Tensor, Var, DEFAULT_STEP};
use coded_resnext::blocks::{BlockCoding, BlockOptions, BlockSpec, CodedBlock};
use coded_resnext::codebook::{generate_scheme, verify_scheme, CodingScheme, GenerateOptions, DEFAULT_SEARCH_BUDGET};
use coded_resnext::experiment::run_toy_suite;
use coded_resnext::network::{
    build_network, count_parameters, generate_schemes, load_checkpoint, save_checkpoint, train, CountPolicy, Keep,
    Network,
};
use coded_resnext::nn::{Mode, ParamStore, Session};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::{
    AblateArgs, CheckpointArgs, Cli, CodebookCommand, Command, EarlyDecodeArgs, ExtractArgs, GenerateArgs,
    GradcheckArgs, ParamsArgs, Policy, Scaling, TrainArgs, VerifyArgs, Which,
};

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &g.out_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= g.deterministic;
    if let Some(arch) = &g.arch {
        cfg.arch = arch.clone();
    }
    if let Command::Train(a) = &cli.command {
        apply_train_args(&mut cfg, a);
    }
    cfg.resolve()
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.lr = a.lr.unwrap_or(t.lr);
    t.mu = a.mu.unwrap_or(t.mu);
    t.p_drop = a.p_drop.unwrap_or(t.p_drop);
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Codebook(CodebookCommand::Generate(_)) => "codebook-generate",
        Command::Codebook(CodebookCommand::Verify(_)) => "codebook-verify",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
        Command::Extract(_) => "extract",
        Command::EarlyDecode(_) => "early-decode",
        Command::Params(_) => "params",
        Command::Gradcheck(_) => "gradcheck",
        Command::ToySuite => "toy-suite",
        Command::DefaultConfig => "default-config",
    }
}

/// Runs one command and returns its one-line summary.
pub fn run(cli: Cli) -> Result<String> {
    if let Command::DefaultConfig = cli.command {
        return Ok(serde_json::to_string_pretty(&RunConfig::default())?);
    }
    let cfg = base_config(&cli)?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    let name = command_name(&cli.command);
    cfg.write(name, serde_json::to_value(&cli.command)?)?;
    match &cli.command {
        Command::Codebook(CodebookCommand::Generate(a)) => codebook_generate(&cfg, a),
        Command::Codebook(CodebookCommand::Verify(a)) => codebook_verify(&cfg, a),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Ablate(a) => ablate_cmd(&cfg, a),
        Command::Extract(a) => extract_cmd(&cfg, a),
        Command::EarlyDecode(a) => early_decode_cmd(&cfg, a),
        Command::Params(a) => params_cmd(&cfg, a),
        Command::Gradcheck(a) => gradcheck_cmd(&cfg, a),
        Command::ToySuite => toy_suite_cmd(&cfg),
        Command::DefaultConfig => unreachable!(),
    }
}

fn write_csv(cfg: &RunConfig, file: &str, records: &[Record]) -> Result<PathBuf> {
    let path = cfg.output_dir.join(file);
    write_records(&path, records).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn codebook_generate(cfg: &RunConfig, a: &GenerateArgs) -> Result<String> {
    let opts = GenerateOptions {
        budget: a.budget.unwrap_or(DEFAULT_SEARCH_BUDGET),
        allow_streaming: a.stream,
        ..Default::default()
    };
    let scheme = generate_scheme(a.k, a.n, a.n_act, a.h_min, &opts)?;
    let path = a.output.clone().unwrap_or_else(|| cfg.output_dir.join("scheme.txt"));
    scheme.save(&path, a.h_min)?;
    let report = verify_scheme(&scheme, a.k, a.n, a.n_act, a.h_min);
    Ok(format!(
        "K={} N={} N_act={}: min distance {}, balance {}, rules {} -> {}",
        a.k,
        a.n,
        a.n_act,
        scheme.min_distance(),
        report.balance_score,
        if report.passed() { "pass" } else { "fail" },
        path.display()
    ))
}

fn codebook_verify(cfg: &RunConfig, a: &VerifyArgs) -> Result<String> {
    let file = CodingScheme::load(&a.path).with_context(|| format!("cannot load scheme {}", a.path.display()))?;
    let k = a.k.unwrap_or(file.scheme.num_classes());
    let report = verify_scheme(&file.scheme, k, file.n, file.n_act, file.h_min);
    let out = cfg.output_dir.join("verify.json");
    std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
    let rules = [&report.rule_a, &report.distinct, &report.rule_b, &report.rule_c];
    let failed: Vec<&str> = rules.iter().filter(|r| !r.pass).map(|r| r.detail.as_str()).collect();
    if !report.passed() {
        bail!("{} fails verification: {}", a.path.display(), failed.join("; "));
    }
    Ok(format!(
        "{}: K={k} N={} N_act={} H_min={} passes (min distance {}, balance {})",
        a.path.display(),
        file.n,
        file.n_act,
        file.h_min,
        report.measured_min_distance.unwrap_or(file.n),
        report.balance_score
    ))
}

fn train_cmd(cfg: &RunConfig, a: &TrainArgs) -> Result<String> {
    let split = cfg.dataset()?;
    let mut arch = cfg.arch_spec()?;
    if a.uncoded {
        arch = arch.uncoded();
    }
    let schemes = generate_schemes(&arch, &GenerateOptions::default())?;
    let mut net = build_network(&arch, &schemes, cfg.seed, cfg.precision)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir.get_or_insert_with(|| cfg.output_dir.clone());
    train(&mut net, &split.train, Some(&split.val), &tc)?;
    let path = cfg.output_dir.join("model.ckpt");
    save_checkpoint(&net, &path)?;
    let mut records = Vec::new();
    for h in &net.history {
        records.push(Record::new("train", "loss", h.loss).trial(h.epoch));
        records.push(Record::new("train", "class_loss", h.class_loss).trial(h.epoch));
        records.push(Record::new("train", "train_accuracy", h.train_accuracy).trial(h.epoch));
        if let Some(v) = h.val_accuracy {
            records.push(Record::new("train", "val_accuracy", v).trial(h.epoch));
        }
        for (slot, &c) in h.coding_losses.iter().enumerate() {
            records.push(Record::new("train", "coding_loss", c).block(slot).trial(h.epoch));
        }
    }
    write_csv(cfg, "history.csv", &records)?;
    let last = net.history.last().context("training ran no epochs")?;
    Ok(format!(
        "{}: {} epochs, train accuracy {:.4}, val accuracy {:.4} -> {}",
        arch.name,
        net.history.len(),
        last.train_accuracy,
        last.val_accuracy.unwrap_or(f64::NAN),
        path.display()
    ))
}

fn checkpoint(cfg: &RunConfig, a: &CheckpointArgs) -> Result<(Network, PathBuf)> {
    let path = a.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
    let net = load_checkpoint(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok((net, path))
}

fn eval_cmd(cfg: &RunConfig, a: &CheckpointArgs) -> Result<String> {
    let (net, path) = checkpoint(cfg, a)?;
    let split = cfg.dataset()?;
    let report = net.evaluate(&split.val, cfg.analysis.batch_size, cfg.parallel())?;
    let mut records = vec![Record::new("eval", "accuracy", report.accuracy)];
    for (slot, &c) in report.coding_losses.iter().enumerate() {
        records.push(Record::new("eval", "coding_loss", c).block(slot));
    }
    write_csv(cfg, "eval.csv", &records)?;
    Ok(format!("{}: val accuracy {:.4} on {} samples", path.display(), report.accuracy, split.val.len()))
}

fn ablate_cmd(cfg: &RunConfig, a: &AblateArgs) -> Result<String> {
    let (net, _) = checkpoint(cfg, &a.ckpt)?;
    let split = cfg.dataset()?;
    let block = net.blocks().get(a.block).with_context(|| format!("no block {}", a.block))?;
    let which = match a.which {
        Which::Active => BranchSet::Active,
        Which::Inactive => BranchSet::Inactive,
    };
    let ac = AblationConfig {
        block: a.block,
        which,
        count: a.count.unwrap_or(block.spec.n_act),
        trials: a.trials.unwrap_or(cfg.analysis.trials),
        seed: cfg.seed,
        convention: cfg.analysis.removal,
    };
    let intact = net.evaluate(&split.val, cfg.analysis.batch_size, cfg.parallel())?.accuracy;
    let res = ablate_branches(&net, &split.val, &ac, cfg.parallel())?;
    let which_name = a.which.to_possible_value().map(|v| v.get_name().to_owned()).unwrap_or_default();
    let exp = format!("ablation/{which_name}");
    let mut records = vec![Record::new(&exp, "intact_accuracy", intact).block(a.block)];
    for (t, &acc) in res.trial_accuracies.iter().enumerate() {
        records.push(Record::new(&exp, "accuracy", acc).block(a.block).trial(t));
    }
    write_csv(cfg, "ablation.csv", &records)?;
    Ok(format!(
        "block {}: removing {} {which_name} branches, accuracy {:.4} -> {:.4} over {} trials",
        a.block, ac.count, intact, res.mean_accuracy, ac.trials
    ))
}

fn extract_cmd(cfg: &RunConfig, a: &ExtractArgs) -> Result<String> {
    let (net, _) = checkpoint(cfg, &a.ckpt)?;
    let split = cfg.dataset()?;
    let mut bc = extract_binary_classifier(&net, a.class)?;
    let threshold = calibrate_threshold(&mut bc, &split.train, cfg.parallel())?;
    let pr = precision_recall(&bc, threshold, &split.val, cfg.analysis.negative_ratio, cfg.seed, cfg.parallel())?;
    let path = cfg.output_dir.join(format!("class{}.ckpt", a.class));
    save_checkpoint(&bc.net, &path)?;
    let fraction = bc.num_params() as f64 / net.num_params() as f64;
    let records: Vec<Record> = [
        ("threshold", threshold),
        ("precision", pr.precision),
        ("recall", pr.recall),
        ("f1", pr.f1),
        ("params", bc.num_params() as f64),
        ("fraction", fraction),
    ]
    .into_iter()
    .map(|(m, v)| Record::new("binary", m, v).class(a.class))
    .collect();
    write_csv(cfg, "extract.csv", &records)?;
    Ok(format!(
        "class {}: {} parameters ({:.3} of the network), threshold {:.4}, precision {:.4}, recall {:.4}, F1 {:.4} -> {}",
        a.class,
        bc.num_params(),
        fraction,
        threshold,
        pr.precision,
        pr.recall,
        pr.f1,
        path.display()
    ))
}

fn early_decode_cmd(cfg: &RunConfig, a: &EarlyDecodeArgs) -> Result<String> {
    let (net, _) = checkpoint(cfg, &a.ckpt)?;
    let split = cfg.dataset()?;
    let scaling = match a.scaling {
        Some(Scaling::Ratio) => DecodeScaling::Ratio,
        Some(Scaling::Raw) => DecodeScaling::Raw,
        None => cfg.analysis.decode,
    };
    let acc = early_decoder_accuracy(&net, &split.val, scaling, cfg.parallel())?;
    let records: Vec<Record> = acc.iter().map(|b| Record::new("early_decode", "accuracy", b.accuracy).block(b.block)).collect();
    write_csv(cfg, "early_decode.csv", &records)?;
    let parts: Vec<String> = acc.iter().map(|b| format!("block {} {:.4}", b.block, b.accuracy)).collect();
    Ok(format!("early decoders: {}", parts.join(", ")))
}

fn params_cmd(cfg: &RunConfig, a: &ParamsArgs) -> Result<String> {
    let arch = cfg.arch_spec()?;
    let (policy, schemes) = match a.policy {
        Policy::Apportioned => (CountPolicy::Apportioned, Vec::new()),
        Policy::Retained => (CountPolicy::Retained, generate_schemes(&arch, &GenerateOptions::default())?),
    };
    let keep = a.class.map_or(Keep::All, Keep::Class);
    let c = count_parameters(&arch, &schemes, keep, policy)?;
    let mut record = Record::new("params", "fraction", c.fraction);
    if let Some(k) = a.class {
        record = record.class(k);
    }
    write_csv(cfg, "params.csv", &[Record::new("params", "total", c.total as f64), record])?;
    Ok(match a.class {
        Some(k) => format!(
            "{} class {k}: {} of {} parameters, fraction {:.3}",
            arch.name, c.kept, c.total, c.fraction
        ),
        None => format!("{}: {} parameters", arch.name, c.total),
    })
}

type Case = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor>, fn(&mut Graph, &[Var]) -> coded_resnext::Result<Var>);

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

const PRIMITIVES: [Case; 8] = [
    ("div", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.5, 2.0)], |g, v| g.div(v[0], v[1])),
    ("sqrt", |r| vec![uniform(r, &[6], 0.5, 2.0)], |g, v| Ok(g.sqrt(v[0]))),
    ("pow4", |r| vec![uniform(r, &[6], -1.0, 1.0)], |g, v| Ok(g.powi(v[0], 4))),
    ("mean", |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |g, v| g.mean_axes(v[0], &[0, 2])),
    (
        "linear",
        |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[2, 4], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    ),
    (
        "conv2d",
        |r| vec![uniform(r, &[2, 4, 5, 5], -1.0, 1.0), uniform(r, &[4, 2, 3, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvOptions { stride: 2, padding: 1, groups: 2 }),
    ),
    (
        "batch_norm",
        |r| vec![uniform(r, &[4, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)],
        |g, v| g.batch_norm(v[0], v[1], v[2], NormMode::Batch { eps: 1e-5 }).map(|r| r.0),
    ),
    ("cross_entropy", |r| vec![uniform(r, &[4, 3], -2.0, 2.0)], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
];

/// Gradient of a coded block's batch coding loss plus a sum readout of its
/// output, with respect to every branch parameter.
fn block_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let spec = BlockSpec { c_out: 6, d: 4, n: 4, n_act: 2, stride: 1, kernel: 3 };
    let scheme = generate_scheme(4, 4, 2, 2, &GenerateOptions::default())?;
    let mut store = ParamStore::new();
    let block = CodedBlock::new(&mut store, "b", 3, spec, Some(BlockCoding { group: 0, scheme }), rng)?;
    let x = uniform(rng, &[4, 3, 3, 3], -1.5, 1.5);
    let labels = [0, 1, 2, 3];
    let ids = block.branch_param_ids();
    let point: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
    let r = gradcheck(&point, DEFAULT_STEP, |g, vars| {
        let mut s = Session::new(g, &store, Mode::Train, ChaCha8Rng::seed_from_u64(seed));
        for (&id, &v) in ids.iter().zip(vars) {
            s.bind(id, v);
        }
        let xv = s.graph.constant(x.clone());
        let out = block.forward(&mut s, xv, &BlockOptions { labels: Some(&labels), ..Default::default() })?;
        let y = s.graph.mean_all(out.y)?;
        let y = s.graph.reshape(y, &[1])?;
        let loss = s.graph.reshape(out.loss.expect("coded block has a loss"), &[1])?;
        s.graph.add(y, loss)
    })?;
    Ok(r.max_relative_error)
}

fn gradcheck_cmd(cfg: &RunConfig, a: &GradcheckArgs) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for (name, make, op) in PRIMITIVES {
        let mut err = 0.0f64;
        for _ in 0..a.points {
            err = err.max(gradcheck(&make(&mut rng), DEFAULT_STEP, op)?.max_relative_error);
        }
        records.push(Record::new("gradcheck", name, err));
        worst = worst.max(err);
        if err >= a.tolerance {
            failed.push(name);
        }
    }
    let mut err = 0.0f64;
    for p in 0..a.points {
        err = err.max(block_case(&mut rng, p)?);
    }
    records.push(Record::new("gradcheck", "coded_block", err));
    worst = worst.max(err);
    if err >= a.tolerance {
        failed.push("coded_block");
    }
    write_csv(cfg, "gradcheck.csv", &records)?;
    if !failed.is_empty() {
        bail!("gradcheck above {:e}: {}", a.tolerance, failed.join(", "));
    }
    Ok(format!(
        "gradcheck: {} cases x {} points, max relative error {worst:.2e}",
        PRIMITIVES.len() + 1,
        a.points
    ))
}

fn toy_suite_cmd(cfg: &RunConfig) -> Result<String> {
    let (report, records) = run_toy_suite(&cfg.toy_suite())?;
    write_csv(cfg, "records.csv", &records)?;
    let path = cfg.output_dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let min_f1 = report.classifiers.iter().map(|c| c.f1).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "baseline {:.4}, coded {:.4}; block {} drop active {:.4} inactive {:.4}; min F1 {:.4} -> {}",
        report.baseline.val_accuracy,
        report.coded[0].val_accuracy,
        report.deepest_block,
        report.active_drop(),
        report.inactive_drop(),
        min_f1,
        path.display()
    ))
}
