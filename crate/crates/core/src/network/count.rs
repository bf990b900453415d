use serde::{Deserialize, Serialize};

use super::{ArchSpec, Stem};
use crate::codebook::CodingScheme;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keep {
    All,
    Class(usize),
}

/// How a coded block's non-branch parameters (post-sum norm, shortcut) are
/// attributed to one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountPolicy {
    /// The whole coded block counts at the class's active fraction.
    #[default]
    Apportioned,
    /// Non-branch parameters are kept in full, as in the extracted model.
    Retained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    pub kept: u64,
    pub fraction: f64,
}

impl ParamCount {
    pub fn removed(&self) -> u64 {
        self.total - self.kept
    }
}

fn stem_params(arch: &ArchSpec) -> u64 {
    let c_in = arch.input[0];
    let w = match arch.stem {
        Stem::Dense { width } => c_in * width,
        Stem::Conv { c_out, kernel, .. } => c_in * c_out * kernel * kernel,
    };
    (w + 2 * arch.stem.width()) as u64
}

/// Parameters per stage, excluding stem and head.
pub fn stage_param_counts(arch: &ArchSpec) -> Vec<u64> {
    let blocks = arch.blocks();
    let mut out = Vec::new();
    let mut i = 0;
    for s in &arch.stages {
        let mut total = 0;
        for (c_in, b) in &blocks[i..i + s.repeat] {
            total += (b.branch_params(*c_in, b.n) + b.shared_params(*c_in)) as u64;
        }
        out.push(total);
        i += s.repeat;
    }
    out
}

/// Counts parameters of the full network and of the part serving one
/// class. Shapes only; no weights are needed. Without a matching scheme a
/// coded block keeps `n_act` branches.
pub fn count_parameters(arch: &ArchSpec, schemes: &[CodingScheme], keep: Keep, policy: CountPolicy) -> Result<ParamCount> {
    arch.validate()?;
    let k = arch.num_classes;
    if let Keep::Class(c) = keep {
        if c >= k {
            return Err(Error::Arch(format!("class {c} outside {k} classes")));
        }
    }
    let stem = stem_params(arch);
    let c = arch.final_width();
    let head = (c * k + k) as u64;
    let (mut total, mut kept) = (stem + head, stem);
    kept += match keep {
        Keep::All => head,
        Keep::Class(_) => (c + 1) as u64,
    };
    for (c_in, b) in arch.blocks() {
        let branches = b.branch_params(c_in, b.n) as u64;
        let shared = b.shared_params(c_in) as u64;
        total += branches + shared;
        let active = match keep {
            Keep::Class(class) if b.is_coded() => {
                match schemes.iter().find(|s| s.n() == b.n && s.n_act() == b.n_act) {
                    Some(scheme) if scheme.num_classes() != k => {
                        return Err(Error::SchemeClassMismatch {
                            n_act: b.n_act,
                            n: b.n,
                            expected: k,
                            found: scheme.num_classes(),
                        })
                    }
                    Some(scheme) => scheme.codeword(class).weight(),
                    // every codeword of a valid scheme has weight n_act
                    None => b.n_act,
                }
            }
            _ => b.n,
        };
        let per_branch = branches / b.n as u64;
        kept += match policy {
            CountPolicy::Retained => per_branch * active as u64 + shared,
            CountPolicy::Apportioned => {
                ((branches + shared) as f64 * active as f64 / b.n as f64).round() as u64
            }
        };
    }
    Ok(ParamCount {
        total,
        kept,
        fraction: kept as f64 / total as f64,
    })
}
