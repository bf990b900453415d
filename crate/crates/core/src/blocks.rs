//! Coded multi-branch residual blocks.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvOptions, Tensor, Var};
use crate::codebook::{Codeword, CodingScheme};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Mode, ParamId, ParamStore, Session};

/// Guard added to the mean energy before the square root.
pub const ENERGY_EPS: f64 = 1e-8;

/// Mean of squares of one sample's branch output.
pub fn mean_energy(t: &[f64]) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    t.iter().map(|x| x * x).sum::<f64>() / t.len() as f64
}

/// Divides every branch output by `sqrt(eps + mean_n E(t_n))`.
pub fn energy_normalize(branches: &[Tensor]) -> Vec<Tensor> {
    if branches.is_empty() {
        return Vec::new();
    }
    let total: f64 = branches.iter().map(|t| mean_energy(t.data())).sum();
    let denom = (ENERGY_EPS + total / branches.len() as f64).sqrt();
    branches.iter().map(|t| t.map(|x| x / denom)).collect()
}

/// Penalty applied to `r * E_n - w_n` in the coding loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    /// `x^p` for a positive even `p`.
    Power(u32),
    /// `|x|`.
    Abs,
}

impl Default for Penalty {
    fn default() -> Self {
        Penalty::Power(4)
    }
}

impl Penalty {
    pub fn validate(self) -> Result<Self> {
        match self {
            Penalty::Power(p) if p == 0 || p % 2 == 1 => Err(Error::OddExponent(p)),
            other => Ok(other),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Penalty::Power(p) => x.powi(p as i32),
            Penalty::Abs => x.abs(),
        }
    }
}

/// `(1/N) * sum_n penalty(r * E_n - w_n)`.
pub fn coding_loss(energies: &[f64], codeword: &Codeword, r: f64, penalty: Penalty) -> Result<f64> {
    let penalty = penalty.validate()?;
    if energies.len() != codeword.len() {
        return Err(Error::LengthMismatch(energies.len(), codeword.len()));
    }
    let w = codeword.to_f64();
    let sum: f64 = energies
        .iter()
        .zip(&w)
        .map(|(e, w)| penalty.apply(r * e - w))
        .sum();
    Ok(sum / energies.len() as f64)
}

/// Branch keep-mask shared by all blocks coded with one scheme during a
/// forward pass. `false` marks a dropped branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropMask {
    pub bits: Vec<bool>,
    pub group: usize,
}

impl DropMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

pub fn draw_drop_mask(n: usize, p_drop: f64, rng: &mut ChaCha8Rng, group: usize) -> Result<DropMask> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Config(format!("p_drop must be in [0, 1), got {p_drop}")));
    }
    let bits = (0..n)
        .map(|_| p_drop == 0.0 || !rng.random_bool(p_drop))
        .collect();
    Ok(DropMask { bits, group })
}

/// Per-forward-pass cache of drop masks keyed by scheme group.
#[derive(Debug, Default)]
pub struct MaskCache {
    masks: HashMap<usize, Arc<DropMask>>,
}

impl MaskCache {
    pub fn get_or_draw(&mut self, group: usize, n: usize, p_drop: f64, rng: &mut ChaCha8Rng) -> Result<Arc<DropMask>> {
        if let Some(m) = self.masks.get(&group) {
            if m.len() != n {
                return Err(Error::MaskMismatch {
                    expected: format!("group {group} with N={n}"),
                    found: format!("group {} with N={}", m.group, m.len()),
                });
            }
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(draw_drop_mask(n, p_drop, rng, group)?);
        self.masks.insert(group, Arc::clone(&m));
        Ok(m)
    }

    pub fn get(&self, group: usize) -> Option<Arc<DropMask>> {
        self.masks.get(&group).cloned()
    }

    pub fn clear(&mut self) {
        self.masks.clear();
    }
}

/// Shape of one block: `[c_out, d, n_act/n]` plus stride and middle kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub c_out: usize,
    pub d: usize,
    pub n: usize,
    pub n_act: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub kernel: usize,
}

fn one() -> usize {
    1
}

impl BlockSpec {
    pub fn is_coded(&self) -> bool {
        self.n_act < self.n
    }

    pub fn ratio(&self) -> f64 {
        self.n_act as f64 / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_act == 0 || self.n_act > self.n {
            return Err(Error::Arch(format!("invalid ratio {}/{}", self.n_act, self.n)));
        }
        if self.c_out == 0 || self.d == 0 || self.stride == 0 || self.kernel == 0 {
            return Err(Error::Arch(format!("zero dimension in {self:?}")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Arch(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn has_projection(&self, c_in: usize) -> bool {
        c_in != self.c_out || self.stride > 1
    }

    /// Parameters of `branches` branches (convolutions and their norms).
    pub fn branch_params(&self, c_in: usize, branches: usize) -> usize {
        let d = self.d;
        branches * (c_in * d + d * d * self.kernel * self.kernel + d * self.c_out + 4 * d)
    }

    /// Parameters outside the branches: the post-sum norm and the shortcut.
    pub fn shared_params(&self, c_in: usize) -> usize {
        let shortcut = if self.has_projection(c_in) {
            c_in * self.c_out + 2 * self.c_out
        } else {
            0
        };
        2 * self.c_out + shortcut
    }
}

/// How removed branches interact with energy normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalConvention {
    /// Removed branches leave both the energy mean and the sum.
    #[default]
    ExcludeFromNormalization,
    /// Removed branches are zeroed and still counted in the energy mean.
    ZeroBeforeNormalization,
}

/// Per-sample branch removal applied to one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRemoval {
    /// `keep[sample][branch]`.
    pub keep: Vec<Vec<bool>>,
    pub convention: RemovalConvention,
}

/// Scheme binding of a coded block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCoding {
    /// Index of the scheme shared by consecutive blocks with the same ratio.
    pub group: usize,
    pub scheme: CodingScheme,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOptions<'a> {
    pub labels: Option<&'a [usize]>,
    pub p_drop: f64,
    pub penalty: Penalty,
    pub removal: Option<&'a BranchRemoval>,
}

impl Default for BlockOptions<'_> {
    fn default() -> Self {
        Self {
            labels: None,
            p_drop: 0.0,
            penalty: Penalty::default(),
            removal: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub y: Var,
    /// Normalized branch energies `[B, N, 1, 1]`, measured before dropping.
    pub energies: Option<Var>,
    /// Batch-mean coding loss (scalar).
    pub loss: Option<Var>,
    /// Coding loss per sample `[B, 1, 1, 1]`.
    pub sample_loss: Option<Var>,
}

/// `N` parallel bottleneck branches whose outputs are summed, normalized by
/// a shared batch norm and added to the skip path.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedBlock {
    pub c_in: usize,
    pub spec: BlockSpec,
    /// Branches physically present (equals `spec.n` unless extracted).
    pub branches: usize,
    pub energy_norm: bool,
    pub coding: Option<BlockCoding>,
    pub(crate) w_in: ParamId,
    pub(crate) bn1: BatchNorm,
    pub(crate) w_mid: ParamId,
    pub(crate) bn2: BatchNorm,
    pub(crate) w_out: ParamId,
    pub(crate) bn3: BatchNorm,
    pub(crate) shortcut: Option<(ParamId, BatchNorm)>,
}

impl CodedBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        spec: BlockSpec,
        coding: Option<BlockCoding>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        match &coding {
            Some(c) if c.scheme.n() != spec.n || c.scheme.n_act() != spec.n_act => {
                return Err(Error::Arch(format!(
                    "scheme {}/{} bound to block {prefix} with ratio {}/{}",
                    c.scheme.n_act(),
                    c.scheme.n(),
                    spec.n_act,
                    spec.n
                )))
            }
            None if spec.is_coded() => {
                return Err(Error::MissingScheme {
                    n_act: spec.n_act,
                    n: spec.n,
                })
            }
            _ => {}
        }
        let (n, d, k) = (spec.n, spec.d, spec.kernel);
        let w_in = store.add_weight(format!("{prefix}.w_in"), &[n * d, c_in, 1, 1], rng);
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), n * d);
        let w_mid = store.add_weight(format!("{prefix}.w_mid"), &[n * d, d, k, k], rng);
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), n * d);
        let w_out = store.add_weight(format!("{prefix}.w_out"), &[n * spec.c_out, d, 1, 1], rng);
        let bn3 = BatchNorm::new(store, &format!("{prefix}.bn3"), spec.c_out);
        let shortcut = spec.has_projection(c_in).then(|| {
            let w = store.add_weight(format!("{prefix}.w_skip"), &[spec.c_out, c_in, 1, 1], rng);
            (w, BatchNorm::new(store, &format!("{prefix}.bn_skip"), spec.c_out))
        });
        Ok(Self {
            c_in,
            spec,
            branches: n,
            energy_norm: spec.is_coded(),
            coding,
            w_in,
            bn1,
            w_mid,
            bn2,
            w_out,
            bn3,
            shortcut,
        })
    }

    pub fn is_coded(&self) -> bool {
        self.coding.is_some()
    }

    /// Parameters of every tensor this block owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.w_in,
            self.bn1.gamma,
            self.bn1.beta,
            self.w_mid,
            self.bn2.gamma,
            self.bn2.beta,
            self.w_out,
            self.bn3.gamma,
            self.bn3.beta,
        ];
        if let Some((w, bn)) = &self.shortcut {
            ids.extend([*w, bn.gamma, bn.beta]);
        }
        ids
    }

    /// Parameters of the branch transforms only.
    pub fn branch_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.w_in,
            self.bn1.gamma,
            self.bn1.beta,
            self.w_mid,
            self.bn2.gamma,
            self.bn2.beta,
            self.w_out,
        ]
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).len()).sum()
    }

    /// Output spatial size for an input of `h x w`.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (k, s) = (self.spec.kernel, self.spec.stride);
        let p = k / 2;
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, opts: &BlockOptions<'_>) -> Result<BlockOutput> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(Error::Shape {
                op: "coded_block",
                node: x.index(),
                detail: format!("expected [B, {}, H, W], got {shape:?}", self.c_in),
            });
        }
        let batch = shape[0];
        let (n, c_out) = (self.branches, self.spec.c_out);
        let train = s.mode() == Mode::Train;

        let w_in = s.param(self.w_in);
        let h = s.graph.conv2d(x, w_in, None, ConvOptions::default())?;
        let h = s.batch_norm(h, &self.bn1)?;
        let h = s.graph.relu(h);
        let w_mid = s.param(self.w_mid);
        let mid = ConvOptions {
            stride: self.spec.stride,
            padding: self.spec.kernel / 2,
            groups: n,
        };
        let h = s.graph.conv2d(h, w_mid, None, mid)?;
        let h = s.batch_norm(h, &self.bn2)?;
        let h = s.graph.relu(h);
        let w_out = s.param(self.w_out);
        let grouped = ConvOptions {
            groups: n,
            ..ConvOptions::default()
        };
        let t = s.graph.conv2d(h, w_out, None, grouped)?;
        let (ho, wo) = (s.graph.shape(t)[2], s.graph.shape(t)[3]);
        let mut t = s.graph.reshape(t, &[batch, n, c_out, ho * wo])?;

        let mut kept = vec![n as f64; batch];
        if let Some(removal) = opts.removal {
            if removal.keep.len() != batch || removal.keep.iter().any(|k| k.len() != n) {
                return Err(Error::Analysis(format!(
                    "removal mask must be [{batch}][{n}]"
                )));
            }
            let mask = Tensor::from_fn(&[batch, n, 1, 1], |i| {
                f64::from(u8::from(removal.keep[i / n][i % n]))
            });
            let m = s.graph.constant(mask);
            t = s.graph.mul(t, m)?;
            if removal.convention == RemovalConvention::ExcludeFromNormalization {
                for (c, k) in kept.iter_mut().zip(&removal.keep) {
                    *c = k.iter().filter(|&&b| b).count().max(1) as f64;
                }
            }
        }

        let mut energies = None;
        if self.energy_norm {
            let sq = s.graph.square(t);
            let e = s.graph.mean_axes(sq, &[2, 3])?;
            let total = s.graph.sum_axes(e, &[1])?;
            let count = s.graph.constant(Tensor::new(vec![batch, 1, 1, 1], kept)?);
            let avg = s.graph.div(total, count)?;
            let avg = s.graph.add_scalar(avg, ENERGY_EPS);
            let denom = s.graph.sqrt(avg);
            t = s.graph.div(t, denom)?;
            let sq = s.graph.square(t);
            energies = Some(s.graph.mean_axes(sq, &[2, 3])?);
        }

        let (mut loss, mut sample_loss) = (None, None);
        if let (true, Some(coding), Some(e)) = (train, &self.coding, energies) {
            let labels = opts.labels.ok_or(Error::MissingLabel(x.index()))?;
            if labels.len() != batch {
                return Err(Error::Shape {
                    op: "coding_loss",
                    node: x.index(),
                    detail: format!("{} labels for batch {batch}", labels.len()),
                });
            }
            let k = coding.scheme.num_classes();
            let mut target = Vec::with_capacity(batch * n);
            for &y in labels {
                if y >= k {
                    return Err(Error::Dataset(format!("label {y} outside {k} classes")));
                }
                target.extend(coding.scheme.codeword(y).to_f64());
            }
            let w = s.graph.constant(Tensor::new(vec![batch, n, 1, 1], target)?);
            let re = s.graph.scale(e, self.spec.ratio());
            let diff = s.graph.sub(re, w)?;
            let pen = match opts.penalty.validate()? {
                Penalty::Power(p) => s.graph.powi(diff, p as i32),
                Penalty::Abs => s.graph.abs(diff),
            };
            let per = s.graph.mean_axes(pen, &[1])?;
            sample_loss = Some(per);
            loss = Some(s.graph.mean_all(per)?);

            if opts.p_drop > 0.0 {
                let mask = {
                    let Session { masks, rng, .. } = s;
                    masks.get_or_draw(coding.group, n, opts.p_drop, rng)?
                };
                let m = Tensor::from_fn(&[1, n, 1, 1], |i| f64::from(u8::from(mask.bits[i])));
                let m = s.graph.constant(m);
                t = s.graph.mul(t, m)?;
            }
        }

        let summed = s.graph.sum_axes(t, &[1])?;
        let summed = s.graph.reshape(summed, &[batch, c_out, ho, wo])?;
        let summed = s.batch_norm(summed, &self.bn3)?;
        let skip = match &self.shortcut {
            Some((w, bn)) => {
                let w = s.param(*w);
                let proj = ConvOptions {
                    stride: self.spec.stride,
                    ..ConvOptions::default()
                };
                let p = s.graph.conv2d(x, w, None, proj)?;
                s.batch_norm(p, bn)?
            }
            None => x,
        };
        let y = s.graph.add(summed, skip)?;
        let y = s.graph.relu(y);
        Ok(BlockOutput {
            y,
            energies,
            loss,
            sample_loss,
        })
    }

    /// Copy of this block keeping only `keep` branches, in order. Energy
    /// normalization of the copy pools over the kept branches.
    pub fn extract(&self, src: &ParamStore, dst: &mut ParamStore, prefix: &str, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&b| b >= self.branches) {
            return Err(Error::Analysis(format!(
                "cannot keep branches {keep:?} of {}",
                self.branches
            )));
        }
        let (d, c_out) = (self.spec.d, self.spec.c_out);
        let slice = |id: ParamId, width: usize| {
            let rows: Vec<usize> = keep.iter().flat_map(|&b| b * width..(b + 1) * width).collect();
            src.value(id).select_rows(&rows)
        };
        let copy_bn = |dst: &mut ParamStore, bn: &BatchNorm, name: &str, width: Option<usize>| {
            let pick = |t: &Tensor| match width {
                Some(w) => {
                    let rows: Vec<usize> = keep.iter().flat_map(|&b| b * w..(b + 1) * w).collect();
                    t.select_rows(&rows)
                }
                None => t.clone(),
            };
            let channels = width.map_or(bn.channels, |w| w * keep.len());
            let gamma = dst.add(format!("{prefix}.{name}.gamma"), pick(src.value(bn.gamma)), false);
            let beta = dst.add(format!("{prefix}.{name}.beta"), pick(src.value(bn.beta)), false);
            let running_mean = dst.add_buffer(
                format!("{prefix}.{name}.running_mean"),
                pick(src.buffer(bn.running_mean)),
            );
            let running_var = dst.add_buffer(
                format!("{prefix}.{name}.running_var"),
                pick(src.buffer(bn.running_var)),
            );
            BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                channels,
            }
        };
        let w_in = dst.add(format!("{prefix}.w_in"), slice(self.w_in, d), true);
        let bn1 = copy_bn(dst, &self.bn1, "bn1", Some(d));
        let w_mid = dst.add(format!("{prefix}.w_mid"), slice(self.w_mid, d), true);
        let bn2 = copy_bn(dst, &self.bn2, "bn2", Some(d));
        let w_out = dst.add(format!("{prefix}.w_out"), slice(self.w_out, c_out), true);
        let bn3 = copy_bn(dst, &self.bn3, "bn3", None);
        let shortcut = self.shortcut.as_ref().map(|(w, bn)| {
            let w = dst.add(format!("{prefix}.w_skip"), src.value(*w).clone(), true);
            (w, copy_bn(dst, bn, "bn_skip", None))
        });
        Ok(Self {
            c_in: self.c_in,
            spec: self.spec,
            branches: keep.len(),
            energy_norm: self.energy_norm,
            coding: None,
            w_in,
            bn1,
            w_mid,
            bn2,
            w_out,
            bn3,
            shortcut,
        })
    }
}

/// Normalized energies `[B, N, 1, 1]` as per-sample rows.
pub fn energy_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape().get(1).copied().unwrap_or(0);
    t.data().chunks(n.max(1)).map(<[f64]>::to_vec).collect()
}
