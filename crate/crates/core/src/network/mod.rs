//! Architectures, network assembly and inference.

mod checkpoint;
mod count;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use count::{count_parameters, stage_param_counts, CountPolicy, Keep, ParamCount};
pub use train::{cosine_lr, total_loss, train, EpochRecord, Sgd, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvOptions, Graph, Precision, Tensor, Var};
use crate::blocks::{coding_loss, BlockCoding, BlockOptions, BlockSpec, BranchRemoval, CodedBlock, Penalty};
use crate::codebook::{generate_scheme, CodingScheme, GenerateOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Mode, ParamId, ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Stem {
    /// Affine map of a feature vector followed by norm and ReLU.
    Dense { width: usize },
    /// Convolution, norm, ReLU and an optional 3x3 stride-2 max pool.
    Conv {
        c_out: usize,
        kernel: usize,
        stride: usize,
        max_pool: bool,
    },
}

impl Stem {
    pub fn width(&self) -> usize {
        match *self {
            Stem::Dense { width } => width,
            Stem::Conv { c_out, .. } => c_out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Block shape; `stride` applies to the first block of the stage only.
    pub block: BlockSpec,
    pub repeat: usize,
    /// Minimum Hamming distance used when generating this stage's scheme.
    #[serde(default)]
    pub h_min: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Per-sample input shape: `[dim]` or `[c, h, w]`.
    pub input: Vec<usize>,
    pub stem: Stem,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

pub const PRESETS: [&str; 4] = ["toy", "table1-cifar10", "table1-cifar100", "table1-imagenet"];

fn stage(c_out: usize, d: usize, n: usize, n_act: usize, repeat: usize, stride: usize, kernel: usize, h_min: Option<usize>) -> StageSpec {
    StageSpec {
        block: BlockSpec {
            c_out,
            d,
            n,
            n_act,
            stride,
            kernel,
        },
        repeat,
        h_min,
    }
}

impl ArchSpec {
    /// Dense toy network for feature vectors of length `dim`.
    pub fn toy(dim: usize, num_classes: usize) -> Self {
        Self {
            name: "toy".into(),
            input: vec![dim],
            stem: Stem::Dense { width: 16 },
            stages: vec![
                stage(16, 8, 8, 8, 2, 1, 1, None),
                stage(32, 16, 8, 4, 2, 1, 1, Some(4)),
                stage(64, 32, 8, 2, 2, 1, 1, Some(2)),
            ],
            num_classes,
        }
    }

    pub fn table1_cifar10() -> Self {
        Self {
            name: "table1-cifar10".into(),
            input: vec![3, 32, 32],
            stem: Stem::Conv { c_out: 64, kernel: 3, stride: 1, max_pool: false },
            stages: vec![
                stage(256, 11, 10, 10, 3, 1, 3, None),
                stage(512, 22, 10, 5, 3, 2, 3, Some(4)),
                stage(1024, 44, 10, 3, 3, 2, 3, Some(4)),
            ],
            num_classes: 10,
        }
    }

    pub fn table1_cifar100() -> Self {
        Self {
            name: "table1-cifar100".into(),
            input: vec![3, 32, 32],
            stem: Stem::Conv { c_out: 64, kernel: 3, stride: 1, max_pool: false },
            stages: vec![
                stage(256, 6, 20, 20, 3, 1, 3, None),
                stage(512, 12, 20, 8, 3, 2, 3, Some(8)),
                stage(1024, 24, 20, 4, 3, 2, 3, Some(4)),
            ],
            num_classes: 100,
        }
    }

    pub fn table1_imagenet() -> Self {
        Self {
            name: "table1-imagenet".into(),
            input: vec![3, 160, 160],
            stem: Stem::Conv { c_out: 64, kernel: 7, stride: 2, max_pool: true },
            stages: vec![
                stage(256, 4, 32, 32, 3, 1, 3, None),
                stage(512, 8, 32, 32, 4, 2, 3, None),
                stage(1024, 16, 32, 16, 6, 2, 3, Some(10)),
                stage(2048, 32, 32, 8, 3, 2, 3, Some(6)),
            ],
            num_classes: 1000,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(32, 8)),
            "table1-cifar10" => Ok(Self::table1_cifar10()),
            "table1-cifar100" => Ok(Self::table1_cifar100()),
            "table1-imagenet" => Ok(Self::table1_imagenet()),
            other => Err(Error::Arch(format!(
                "unknown architecture {other:?}; presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// The same network with every block uncoded.
    pub fn uncoded(&self) -> Self {
        let mut a = self.clone();
        a.name = format!("{}-uncoded", self.name);
        for s in &mut a.stages {
            s.block.n_act = s.block.n;
            s.h_min = None;
        }
        a
    }

    /// Every block with its input width, in depth order.
    pub fn blocks(&self) -> Vec<(usize, BlockSpec)> {
        let mut c_in = self.stem.width();
        let mut out = Vec::new();
        for s in &self.stages {
            for i in 0..s.repeat {
                let mut b = s.block;
                if i > 0 {
                    b.stride = 1;
                }
                out.push((c_in, b));
                c_in = b.c_out;
            }
        }
        out
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(self.stem.width(), |s| s.block.c_out)
    }

    /// Distinct coded ratios `(n_act, n, h_min)` in depth order.
    pub fn coded_ratios(&self) -> Vec<(usize, usize, Option<usize>)> {
        let mut out: Vec<(usize, usize, Option<usize>)> = Vec::new();
        for s in &self.stages {
            let b = s.block;
            if b.is_coded() && !out.iter().any(|&(a, n, _)| a == b.n_act && n == b.n) {
                out.push((b.n_act, b.n, s.h_min));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Arch("need at least two classes".into()));
        }
        match (self.stem, self.input.len()) {
            (Stem::Dense { .. }, 1) | (Stem::Conv { .. }, 3) => {}
            _ => {
                return Err(Error::Arch(format!(
                    "stem {:?} cannot take input {:?}",
                    self.stem, self.input
                )))
            }
        }
        if let Stem::Conv { kernel, stride, .. } = self.stem {
            if kernel % 2 == 0 || stride == 0 {
                return Err(Error::Arch("stem kernel must be odd and stride positive".into()));
            }
        }
        let first = self.stages.first().ok_or_else(|| Error::Arch("no stages".into()))?;
        if first.block.is_coded() {
            return Err(Error::Arch("first stage must be uncoded".into()));
        }
        let mut prev = 1.0;
        for s in &self.stages {
            s.block.validate()?;
            if s.repeat == 0 {
                return Err(Error::Arch("stage with zero blocks".into()));
            }
            let r = s.block.ratio();
            if r > prev + 1e-12 {
                return Err(Error::Arch("ratios must not increase with depth".into()));
            }
            prev = r;
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.repeat).sum()
    }
}

/// Generates one scheme per coded ratio. Stages without an explicit
/// `h_min` use 2.
pub fn generate_schemes(arch: &ArchSpec, opts: &GenerateOptions) -> Result<Vec<CodingScheme>> {
    arch.coded_ratios()
        .into_iter()
        .map(|(n_act, n, h_min)| generate_scheme(arch.num_classes, n, n_act, h_min.unwrap_or(2), opts))
        .collect()
}

fn find_scheme(schemes: &[CodingScheme], n: usize, n_act: usize) -> Option<(usize, &CodingScheme)> {
    schemes
        .iter()
        .enumerate()
        .find(|(_, s)| s.n() == n && s.n_act() == n_act)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct StemLayer {
    pub w: ParamId,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameters, structure and training record of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub schemes: Vec<CodingScheme>,
    pub store: ParamStore,
    pub seed: u64,
    pub precision: Precision,
    pub history: Vec<EpochRecord>,
    pub(crate) stem: StemLayer,
    pub(crate) blocks: Vec<CodedBlock>,
    pub(crate) head: Head,
}

/// Builds an untrained network; initialization is a function of `seed`.
pub fn build_network(arch: &ArchSpec, schemes: &[CodingScheme], seed: u64, precision: Precision) -> Result<Network> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stem = match arch.stem {
        Stem::Dense { width } => StemLayer {
            w: store.add_weight("stem.w", &[width, arch.input[0], 1, 1], &mut rng),
            bn: BatchNorm::new(&mut store, "stem.bn", width),
        },
        Stem::Conv { c_out, kernel, .. } => StemLayer {
            w: store.add_weight("stem.w", &[c_out, arch.input[0], kernel, kernel], &mut rng),
            bn: BatchNorm::new(&mut store, "stem.bn", c_out),
        },
    };
    let mut blocks = Vec::new();
    for (i, (c_in, spec)) in arch.blocks().into_iter().enumerate() {
        let coding = if spec.is_coded() {
            let (group, scheme) = find_scheme(schemes, spec.n, spec.n_act).ok_or(Error::MissingScheme {
                n_act: spec.n_act,
                n: spec.n,
            })?;
            if scheme.num_classes() != arch.num_classes {
                return Err(Error::SchemeClassMismatch {
                    n_act: spec.n_act,
                    n: spec.n,
                    expected: arch.num_classes,
                    found: scheme.num_classes(),
                });
            }
            Some(BlockCoding {
                group,
                scheme: scheme.clone(),
            })
        } else {
            None
        };
        blocks.push(CodedBlock::new(&mut store, &format!("blocks.{i}"), c_in, spec, coding, &mut rng)?);
    }
    let c = arch.final_width();
    let head = Head {
        w: store.add_weight("head.w", &[arch.num_classes, c], &mut rng),
        b: store.add_bias("head.b", arch.num_classes),
    };
    Ok(Network {
        arch: arch.clone(),
        schemes: schemes.to_vec(),
        store,
        seed,
        precision,
        history: Vec::new(),
        stem,
        blocks,
        head,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub labels: Option<&'a [usize]>,
    pub p_drop: f64,
    pub penalty: Penalty,
    /// `(block index, removal)` pairs.
    pub removals: &'a [(usize, BranchRemoval)],
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            labels: None,
            p_drop: 0.0,
            penalty: Penalty::default(),
            removals: &[],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Batch-mean coding loss per coded block (training mode only).
    pub coding_losses: Vec<Var>,
    /// `(block index, normalized energies [B, N, 1, 1])` per normalizing block.
    pub energies: Vec<(usize, Var)>,
}

/// Eval-mode outputs over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// `[samples, outputs]`.
    pub logits: Tensor,
    /// Indices of blocks whose energies are recorded.
    pub energy_blocks: Vec<usize>,
    /// Per recorded block, `[samples, N]`.
    pub energies: Vec<Tensor>,
}

impl Network {
    pub fn blocks(&self) -> &[CodedBlock] {
        &self.blocks
    }

    /// Indices of coded blocks, in depth order.
    pub fn coded_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].is_coded()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn num_outputs(&self) -> usize {
        self.store.value(self.head.b).len()
    }

    pub fn forward(&self, s: &mut Session<'_>, x: &Tensor, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        let batch = x.shape().first().copied().unwrap_or(0);
        if &x.shape()[1..] != self.arch.input.as_slice() {
            return Err(Error::Shape {
                op: "network",
                node: 0,
                detail: format!("input {:?} does not match {:?}", x.shape(), self.arch.input),
            });
        }
        let input = match self.arch.stem {
            Stem::Dense { .. } => x.clone().reshape(&[batch, self.arch.input[0], 1, 1])?,
            Stem::Conv { .. } => x.clone(),
        };
        let xv = s.graph.constant(input);
        let w = s.param(self.stem.w);
        let mut h = match self.arch.stem {
            Stem::Dense { .. } => s.graph.conv2d(xv, w, None, ConvOptions::default())?,
            Stem::Conv { kernel, stride, .. } => s.graph.conv2d(
                xv,
                w,
                None,
                ConvOptions {
                    stride,
                    padding: kernel / 2,
                    groups: 1,
                },
            )?,
        };
        h = s.batch_norm(h, &self.stem.bn)?;
        h = s.graph.relu(h);
        if let Stem::Conv { max_pool: true, .. } = self.arch.stem {
            h = s.graph.max_pool2d(h, 3, 2, 1)?;
        }

        let mut coding_losses = Vec::new();
        let mut energies = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let removal = opts.removals.iter().find(|(b, _)| *b == i).map(|(_, r)| r);
            let bo = BlockOptions {
                labels: opts.labels,
                p_drop: opts.p_drop,
                penalty: opts.penalty,
                removal,
            };
            let out = block.forward(s, h, &bo)?;
            if let Some(l) = out.loss {
                coding_losses.push(l);
            }
            if let Some(e) = out.energies {
                energies.push((i, e));
            }
            h = out.y;
        }

        let pooled = s.graph.mean_axes(h, &[2, 3])?;
        let c = s.graph.shape(pooled)[1];
        let pooled = s.graph.reshape(pooled, &[batch, c])?;
        let (hw, hb) = (s.param(self.head.w), s.param(self.head.b));
        let logits = s.graph.linear(pooled, hw, Some(hb))?;
        Ok(ForwardOutput {
            logits,
            coding_losses,
            energies,
        })
    }

    /// Eval-mode pass over one batch.
    pub fn infer_batch(&self, x: &Tensor, removals: &[(usize, BranchRemoval)]) -> Result<Inference> {
        let mut g = Graph::new(self.precision);
        let mut s = Session::new(&mut g, &self.store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let opts = ForwardOptions {
            removals,
            ..Default::default()
        };
        let out = self.forward(&mut s, x, &opts)?;
        drop(s);
        let batch = x.shape()[0];
        let energies = out
            .energies
            .iter()
            .map(|&(_, e)| {
                let t = g.value(e);
                t.clone().reshape(&[batch, t.shape()[1]])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Inference {
            logits: g.value(out.logits).clone(),
            energy_blocks: out.energies.iter().map(|&(i, _)| i).collect(),
            energies,
        })
    }

    /// Eval-mode pass over `x` in chunks of `batch_size`. Results do not
    /// depend on `parallel` or the chunk size.
    pub fn infer(&self, x: &Tensor, removals: &[(usize, BranchRemoval)], batch_size: usize, parallel: bool) -> Result<Inference> {
        let n = x.shape().first().copied().unwrap_or(0);
        let bs = batch_size.max(1);
        let chunks: Vec<(usize, usize)> = (0..n).step_by(bs).map(|s| (s, (s + bs).min(n))).collect();
        let run = |&(lo, hi): &(usize, usize)| -> Result<Inference> {
            let idx: Vec<usize> = (lo..hi).collect();
            let part: Vec<(usize, BranchRemoval)> = removals
                .iter()
                .map(|(b, r)| {
                    (
                        *b,
                        BranchRemoval {
                            keep: r.keep[lo..hi].to_vec(),
                            convention: r.convention,
                        },
                    )
                })
                .collect();
            self.infer_batch(&x.select_rows(&idx), &part)
        };
        let parts: Vec<Inference> = if parallel {
            chunks.par_iter().map(run).collect::<Result<_>>()?
        } else {
            chunks.iter().map(run).collect::<Result<_>>()?
        };
        concat_inference(parts, self.num_outputs())
    }

    /// Top-1 accuracy and mean coding loss per coded block, in eval mode.
    pub fn evaluate(&self, data: &Dataset, batch_size: usize, parallel: bool) -> Result<EvalReport> {
        let inf = self.infer(&data.x, &[], batch_size, parallel)?;
        let mut coding_losses = Vec::new();
        for (slot, &b) in inf.energy_blocks.iter().enumerate() {
            let Some(coding) = &self.blocks[b].coding else {
                continue;
            };
            let r = self.blocks[b].spec.ratio();
            let e = &inf.energies[slot];
            let mut total = 0.0;
            for (i, &y) in data.y.iter().enumerate() {
                total += coding_loss(e.row(i), coding.scheme.codeword(y), r, Penalty::default())?;
            }
            coding_losses.push(total / data.len().max(1) as f64);
        }
        Ok(EvalReport {
            accuracy: accuracy(&inf.logits, &data.y),
            coding_losses,
        })
    }
}

fn concat_inference(parts: Vec<Inference>, outputs: usize) -> Result<Inference> {
    let mut logits = Vec::new();
    let mut energy_blocks = Vec::new();
    let mut energies: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut n = 0;
    for p in parts {
        n += p.logits.shape()[0];
        logits.extend_from_slice(p.logits.data());
        if energies.is_empty() {
            energy_blocks = p.energy_blocks.clone();
            energies = p.energies.iter().map(|e| (e.shape()[1], Vec::new())).collect();
        }
        for ((_, acc), e) in energies.iter_mut().zip(&p.energies) {
            acc.extend_from_slice(e.data());
        }
    }
    Ok(Inference {
        logits: Tensor::new(vec![n, outputs], logits)?,
        energy_blocks,
        energies: energies
            .into_iter()
            .map(|(w, d)| Tensor::new(vec![n, w], d))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub coding_losses: Vec<f64>,
}

/// Argmax of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate_accuracy(net: &Network, data: &Dataset) -> Result<EvalReport> {
    net.evaluate(data, 256, true)
}
