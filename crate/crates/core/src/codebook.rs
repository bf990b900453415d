//! Class-to-branch coding schemes.
//!
//! A coding scheme assigns every class a constant-weight binary codeword
//! whose length equals the number of branches of a block. Schemes are
//! built in three steps:
//!
//! 1. enumerate every codeword of the requested weight in ascending
//!    integer order,
//! 2. greedily admit words that keep a minimum Hamming distance to all
//!    previously admitted words (a constant-weight lexicode),
//! 3. pick `K` of the admitted words whose column sums are as balanced as
//!    possible (greedy construction followed by swap local search).
//!
//! Printed codewords read left to right as branch 0, 1, ..., N-1. The
//! integer value of a codeword is the printed string read as a binary
//! number, so branch 0 is the most significant bit.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Codewords are stored in a single machine word.
pub const MAX_CODEWORD_LEN: usize = 64;

/// Largest `C(N, N_act)` materialized by [`enumerate_constant_weight`] unless
/// the caller raises the cap.
pub const DEFAULT_ENUMERATION_CAP: u128 = 20_000_000;

/// Default number of swap evaluations granted to [`search_scheme`].
pub const DEFAULT_SEARCH_BUDGET: u64 = 1_000_000;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Codeword {
    value: u64,
    len: u8,
}

impl Codeword {
    pub fn new(value: u64, len: usize) -> Result<Self> {
        if len == 0 || len > MAX_CODEWORD_LEN {
            return Err(Error::InvalidCodeword(format!(
                "length {len} outside 1..={MAX_CODEWORD_LEN}"
            )));
        }
        if len < 64 && value >> len != 0 {
            return Err(Error::InvalidCodeword(format!(
                "value {value:#x} does not fit in {len} bits"
            )));
        }
        Ok(Self {
            value,
            len: len as u8,
        })
    }

    /// Builds a codeword from per-branch activity flags (index 0 = branch 0).
    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let len = bits.len();
        let mut value = 0u64;
        for &b in bits {
            value = (value << 1) | u64::from(b);
        }
        Self::new(value, len)
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn weight(&self) -> usize {
        self.value.count_ones() as usize
    }

    /// Whether branch `branch` is active for this codeword.
    pub fn is_active(&self, branch: usize) -> bool {
        assert!(branch < self.len(), "branch {branch} out of range");
        (self.value >> (self.len() - 1 - branch)) & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_active(i)).collect()
    }

    pub fn active_branches(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_active(i)).collect()
    }

    pub fn inactive_branches(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_active(i)).collect()
    }

    /// The codeword as a 0/1 vector of reals, branch order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits().into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Returns a copy with branch `branch` flipped.
    pub fn flipped(&self, branch: usize) -> Self {
        assert!(branch < self.len(), "branch {branch} out of range");
        Self {
            value: self.value ^ (1 << (self.len() - 1 - branch)),
            len: self.len,
        }
    }
}

impl fmt::Display for Codeword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            f.write_str(if self.is_active(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Codeword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Codeword({self})")
    }
}

impl FromStr for Codeword {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidCodeword(format!(
                    "unexpected character {other:?} in {s:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(&bits)
    }
}

pub fn hamming_distance(a: &Codeword, b: &Codeword) -> Result<usize> {
    if a.len != b.len {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok((a.value ^ b.value).count_ones() as usize)
}

/// Binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact at every step: acc * (n - i) is divisible by (i + 1)
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Streams every length-`n` word of weight `n_act` in ascending integer
/// order (Gosper's hack).
#[derive(Debug, Clone)]
pub struct ConstantWeightIter {
    next: Option<u64>,
    len: usize,
}

impl ConstantWeightIter {
    pub fn new(n: usize, n_act: usize) -> Result<Self> {
        check_lengths(n, n_act)?;
        let first = if n_act == 64 {
            u64::MAX
        } else {
            (1u64 << n_act) - 1
        };
        Ok(Self {
            next: Some(first),
            len: n,
        })
    }
}

impl Iterator for ConstantWeightIter {
    type Item = Codeword;

    fn next(&mut self) -> Option<Codeword> {
        let cur = self.next?;
        self.next = successor(cur, self.len);
        Some(Codeword {
            value: cur,
            len: self.len as u8,
        })
    }
}

fn successor(v: u64, len: usize) -> Option<u64> {
    if v == 0 {
        return None;
    }
    let c = v & v.wrapping_neg();
    let (r, overflow) = v.overflowing_add(c);
    if overflow {
        return None;
    }
    let next = (((r ^ v) >> 2) / c) | r;
    if len < 64 && next >> len != 0 {
        None
    } else {
        Some(next)
    }
}

fn check_lengths(n: usize, n_act: usize) -> Result<()> {
    if n_act == 0 || n_act > n || n > MAX_CODEWORD_LEN {
        return Err(Error::InvalidCodeword(format!(
            "need 0 < N_act <= N <= {MAX_CODEWORD_LEN}, got N={n} N_act={n_act}"
        )));
    }
    Ok(())
}

/// Materializes all weight-`n_act` words of length `n`, ascending.
pub fn enumerate_constant_weight(n: usize, n_act: usize, cap: u128) -> Result<Vec<Codeword>> {
    check_lengths(n, n_act)?;
    let count = binomial(n, n_act);
    if count > cap {
        return Err(Error::EnumerationCap {
            n,
            n_act,
            count,
            cap,
        });
    }
    Ok(ConstantWeightIter::new(n, n_act)?.collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `N_act * K` divisible by `N`, i.e. the per-column target `r K` is integral.
    pub rk_integral: bool,
    pub combinations: u128,
    pub enough_codewords: bool,
    /// Per-column sum of a perfectly balanced scheme.
    pub s_opt: Option<usize>,
}

pub fn check_feasibility(k: usize, n: usize, n_act: usize) -> FeasibilityReport {
    let ones = k * n_act;
    let rk_integral = n > 0 && ones.is_multiple_of(n);
    let combinations = binomial(n, n_act);
    FeasibilityReport {
        rk_integral,
        combinations,
        enough_codewords: combinations >= k as u128,
        s_opt: rk_integral.then(|| ones / n),
    }
}

/// Scans `candidates` in order and admits a word iff it is at distance at
/// least `h_min` from every word admitted so far.
pub fn greedy_select<I>(candidates: I, h_min: usize) -> Vec<Codeword>
where
    I: IntoIterator<Item = Codeword>,
{
    let mut admitted: Vec<Codeword> = Vec::new();
    for w in candidates {
        let ok = admitted
            .iter()
            .all(|g| ((g.value ^ w.value).count_ones() as usize) >= h_min);
        if ok {
            admitted.push(w);
        }
    }
    admitted
}

/// A `K x N` table of codewords, one row per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingScheme {
    codewords: Vec<Codeword>,
    n: usize,
    n_act: usize,
    min_distance: usize,
    column_sums: Vec<usize>,
}

impl CodingScheme {
    /// Wraps a table of equal-length codewords. Rule compliance is not
    /// enforced here; see [`verify_scheme`].
    pub fn new(codewords: Vec<Codeword>) -> Result<Self> {
        let first = codewords
            .first()
            .ok_or_else(|| Error::InvalidCodeword("empty coding scheme".into()))?;
        let n = first.len();
        if let Some(bad) = codewords.iter().find(|w| w.len() != n) {
            return Err(Error::LengthMismatch(n, bad.len()));
        }
        let n_act = first.weight();
        let min_distance = min_pairwise_distance(&codewords).unwrap_or(n);
        let column_sums = column_sums(&codewords);
        Ok(Self {
            codewords,
            n,
            n_act,
            min_distance,
            column_sums,
        })
    }

    pub fn codewords(&self) -> &[Codeword] {
        &self.codewords
    }

    pub fn codeword(&self, class: usize) -> &Codeword {
        &self.codewords[class]
    }

    pub fn num_classes(&self) -> usize {
        self.codewords.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_act(&self) -> usize {
        self.n_act
    }

    pub fn ratio(&self) -> f64 {
        self.n_act as f64 / self.n as f64
    }

    pub fn min_distance(&self) -> usize {
        self.min_distance
    }

    pub fn column_sums(&self) -> &[usize] {
        &self.column_sums
    }

    /// Serializes in the plain-text scheme format.
    pub fn write_to<W: Write>(&self, mut out: W, h_min: usize) -> std::io::Result<()> {
        writeln!(out, "# N={} N_act={} H_min={}", self.n, self.n_act, h_min)?;
        for (k, w) in self.codewords.iter().enumerate() {
            writeln!(out, "{k} {w}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, h_min: usize) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file), h_min)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SchemeFile> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        SchemeFile::read_from(std::io::BufReader::new(file))
    }
}

/// A scheme file: the header values plus the table itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemeFile {
    pub n: usize,
    pub n_act: usize,
    pub h_min: usize,
    pub scheme: CodingScheme,
}

impl SchemeFile {
    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut header: Option<(usize, usize, usize)> = None;
        let mut rows: Vec<(usize, Codeword)> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::SchemeFormat(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if header.is_some() || !rows.is_empty() {
                    return Err(Error::SchemeFormat(format!(
                        "line {}: unexpected header",
                        lineno + 1
                    )));
                }
                header = Some(parse_header(rest)?);
                continue;
            }
            if header.is_none() {
                return Err(Error::SchemeFormat("missing header line".into()));
            }
            let mut parts = line.split_whitespace();
            let (Some(idx), Some(bits), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::SchemeFormat(format!(
                    "line {}: expected `<class_index> <bitstring>`",
                    lineno + 1
                )));
            };
            let idx: usize = idx.parse().map_err(|_| {
                Error::SchemeFormat(format!("line {}: bad class index {idx:?}", lineno + 1))
            })?;
            rows.push((idx, bits.parse()?));
        }
        let (n, n_act, h_min) =
            header.ok_or_else(|| Error::SchemeFormat("missing header line".into()))?;
        for (expect, (idx, w)) in rows.iter().enumerate() {
            if *idx != expect {
                return Err(Error::SchemeFormat(format!(
                    "class indices must be 0..K in order, found {idx} at position {expect}"
                )));
            }
            if w.len() != n {
                return Err(Error::SchemeFormat(format!(
                    "class {idx}: codeword length {} does not match N={n}",
                    w.len()
                )));
            }
        }
        let scheme = CodingScheme::new(rows.into_iter().map(|(_, w)| w).collect())?;
        Ok(Self {
            n,
            n_act,
            h_min,
            scheme,
        })
    }
}

fn parse_header(rest: &str) -> Result<(usize, usize, usize)> {
    let mut n = None;
    let mut n_act = None;
    let mut h_min = None;
    for tok in rest.split_whitespace() {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::SchemeFormat(format!("bad header token {tok:?}")))?;
        let val: usize = val
            .parse()
            .map_err(|_| Error::SchemeFormat(format!("bad header value {tok:?}")))?;
        match key {
            "N" => n = Some(val),
            "N_act" => n_act = Some(val),
            "H_min" => h_min = Some(val),
            _ => return Err(Error::SchemeFormat(format!("unknown header key {key:?}"))),
        }
    }
    match (n, n_act, h_min) {
        (Some(n), Some(a), Some(h)) => Ok((n, a, h)),
        _ => Err(Error::SchemeFormat(
            "header must define N, N_act and H_min".into(),
        )),
    }
}

fn min_pairwise_distance(words: &[Codeword]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, a) in words.iter().enumerate() {
        for b in &words[i + 1..] {
            let d = (a.value ^ b.value).count_ones() as usize;
            best = Some(best.map_or(d, |m| m.min(d)));
        }
    }
    best
}

fn column_sums(words: &[Codeword]) -> Vec<usize> {
    let n = words.first().map_or(0, |w| w.len());
    let mut sums = vec![0usize; n];
    for w in words {
        for (j, s) in sums.iter_mut().enumerate() {
            *s += usize::from(w.is_active(j));
        }
    }
    sums
}

/// `S_max - S_min` over the column sums of the table.
pub fn balance_score(scheme: &CodingScheme) -> usize {
    spread(&column_sums(&scheme.codewords))
}

fn spread<T: Copy + Ord + std::ops::Sub<Output = T> + Default>(sums: &[T]) -> T {
    match (sums.iter().max(), sums.iter().min()) {
        (Some(&hi), Some(&lo)) => hi - lo,
        _ => T::default(),
    }
}

/// Lexicographic search objective: spread first, then squared deviation
/// from the mean column sum (scaled by N to stay integral).
fn objective(cols: &[i64], k: usize, n_act: usize) -> (i64, i64) {
    let n = cols.len() as i64;
    let total = (k * n_act) as i64;
    let dev: i64 = cols.iter().map(|&c| (c * n - total).pow(2)).sum();
    (spread(cols), dev)
}

/// Sum of the column totals under the active bits of `w`.
fn load(cols: &[i64], w: &Codeword) -> i64 {
    let len = w.len();
    cols.iter()
        .enumerate()
        .filter(|(j, _)| (w.value >> (len - 1 - j)) & 1 == 1)
        .map(|(_, &c)| c)
        .sum()
}

fn add_word(cols: &mut [i64], w: &Codeword, sign: i64) {
    let len = w.len();
    for (j, c) in cols.iter_mut().enumerate() {
        if (w.value >> (len - 1 - j)) & 1 == 1 {
            *c += sign;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchStats {
    pub evaluations: u64,
    pub swaps: u64,
}

/// Chooses `k` codewords from `pool` with balanced column sums.
///
/// The starting subset is built greedily: each step adds the word that
/// minimizes the running maximum column sum, ties going to the word whose
/// active columns are least loaded and then to the lowest integer value.
/// If the first `k` words of the pool already score better, they are used
/// instead. Improving single swaps (one member out, one non-member in) are
/// then applied first-improvement, crowded members and sparse candidates
/// tried first; when none exists a two-for-two exchange is attempted. The
/// search stops when the spread reaches zero, no improving move exists, or
/// `budget` evaluations have been spent. The objective is the spread,
/// ties broken by the squared deviation of column sums from their mean.
pub fn search_scheme(pool: &[Codeword], k: usize, budget: u64) -> Result<CodingScheme> {
    search_scheme_with_stats(pool, k, budget).map(|(s, _)| s)
}

pub fn search_scheme_with_stats(
    pool: &[Codeword],
    k: usize,
    budget: u64,
) -> Result<(CodingScheme, SearchStats)> {
    if pool.len() < k || k == 0 {
        return Err(Error::InsufficientCodewords {
            available: pool.len(),
            needed: k,
        });
    }
    let n = pool[0].len();
    let n_act = pool[0].weight();
    if let Some(bad) = pool.iter().find(|w| w.len() != n) {
        return Err(Error::LengthMismatch(n, bad.len()));
    }
    if pool.iter().any(|w| w.weight() != n_act) {
        return Err(Error::InvalidCodeword(
            "search pool mixes codeword weights".into(),
        ));
    }

    let mut stats = SearchStats {
        evaluations: 0,
        swaps: 0,
    };

    let (mut members, mut cols) = greedy_construction(pool, k, n);
    let first_k: Vec<usize> = (0..k).collect();
    let mut first_cols = vec![0i64; n];
    for &i in &first_k {
        add_word(&mut first_cols, &pool[i], 1);
    }
    if objective(&first_cols, k, n_act) < objective(&cols, k, n_act) {
        members = first_k;
        cols = first_cols;
    }

    let mut in_set = vec![false; pool.len()];
    for &m in &members {
        in_set[m] = true;
    }

    let mut scratch = vec![0i64; n];
    'search: loop {
        let current = objective(&cols, k, n_act);
        if current.0 == 0 {
            break;
        }
        let mut best: Option<(usize, usize)> = None;
        let mut slots: Vec<usize> = (0..members.len()).collect();
        slots.sort_by_key(|&s| (std::cmp::Reverse(load(&cols, &pool[members[s]])), s));
        let mut outside: Vec<usize> = (0..pool.len()).filter(|&i| !in_set[i]).collect();
        outside.sort_by_key(|&i| (load(&cols, &pool[i]), i));
        'scan: for &slot in &slots {
            for &cand in &outside {
                if stats.evaluations >= budget {
                    break 'search;
                }
                stats.evaluations += 1;
                scratch.copy_from_slice(&cols);
                add_word(&mut scratch, &pool[members[slot]], -1);
                add_word(&mut scratch, &pool[cand], 1);
                if objective(&scratch, k, n_act) < current {
                    best = Some((slot, cand));
                    break 'scan;
                }
            }
        }
        let moves = match best {
            Some((slot, cand)) => vec![(slot, cand)],
            None => match find_pair_swap(pool, &members, &in_set, &cols, k, n_act, budget, &mut stats) {
                Some(pair) => pair.to_vec(),
                None => break,
            },
        };
        for (slot, cand) in moves {
            let out = members[slot];
            add_word(&mut cols, &pool[out], -1);
            add_word(&mut cols, &pool[cand], 1);
            in_set[out] = false;
            in_set[cand] = true;
            members[slot] = cand;
        }
        stats.swaps += 1;
    }

    let mut chosen: Vec<Codeword> = members.iter().map(|&i| pool[i]).collect();
    chosen.sort();
    Ok((CodingScheme::new(chosen)?, stats))
}

/// First improving exchange of two members for two non-members, scanned in
/// (member pair, candidate pair) order. Used once single swaps are exhausted.
#[allow(clippy::too_many_arguments)]
fn find_pair_swap(
    pool: &[Codeword],
    members: &[usize],
    in_set: &[bool],
    cols: &[i64],
    k: usize,
    n_act: usize,
    budget: u64,
    stats: &mut SearchStats,
) -> Option<[(usize, usize); 2]> {
    let current = objective(cols, k, n_act);
    let mut slots: Vec<usize> = (0..members.len()).collect();
    slots.sort_by_key(|&s| (std::cmp::Reverse(load(cols, &pool[members[s]])), s));
    let mut outside: Vec<usize> = (0..pool.len()).filter(|&i| !in_set[i]).collect();
    outside.sort_by_key(|&i| (load(cols, &pool[i]), i));
    let mut after_out = vec![0i64; cols.len()];
    let mut scratch = vec![0i64; cols.len()];
    for (ai, &a) in slots.iter().enumerate() {
        for &b in &slots[ai + 1..] {
            after_out.copy_from_slice(cols);
            add_word(&mut after_out, &pool[members[a]], -1);
            add_word(&mut after_out, &pool[members[b]], -1);
            for (ci, &c) in outside.iter().enumerate() {
                for &d in &outside[ci + 1..] {
                    if stats.evaluations >= budget {
                        return None;
                    }
                    stats.evaluations += 1;
                    scratch.copy_from_slice(&after_out);
                    add_word(&mut scratch, &pool[c], 1);
                    add_word(&mut scratch, &pool[d], 1);
                    if objective(&scratch, k, n_act) < current {
                        return Some([(a, c), (b, d)]);
                    }
                }
            }
        }
    }
    None
}

fn greedy_construction(pool: &[Codeword], k: usize, n: usize) -> (Vec<usize>, Vec<i64>) {
    let mut cols = vec![0i64; n];
    let mut taken = vec![false; pool.len()];
    let mut members = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(i64, i64, u64, usize)> = None;
        for (i, w) in pool.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let mut peak = 0i64;
            for (j, &c) in cols.iter().enumerate() {
                let bit = ((w.value >> (n - 1 - j)) & 1) as i64;
                peak = peak.max(c + bit);
            }
            let key = (peak, load(&cols, w), w.value, i);
            if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                best = Some(key);
            }
        }
        let (_, _, _, i) = best.expect("pool larger than k");
        taken[i] = true;
        add_word(&mut cols, &pool[i], 1);
        members.push(i);
    }
    (members, cols)
}

/// Swap search over the whole constant-weight `universe` instead of a
/// pre-filtered pool. A non-member may replace a member only if it keeps
/// distance `>= h_min` to every other member, so rule B is preserved.
/// Moves are taken first-improvement in (candidate, member) order.
pub fn refine_scheme(
    universe: &[Codeword],
    start: &CodingScheme,
    h_min: usize,
    budget: u64,
) -> Result<(CodingScheme, SearchStats)> {
    let k = start.num_classes();
    let n = start.n();
    let n_act = start.n_act();
    if let Some(bad) = universe.iter().find(|w| w.len() != n || w.weight() != n_act) {
        return Err(Error::InvalidCodeword(format!(
            "universe word {bad} does not match N={n}, N_act={n_act}"
        )));
    }
    let mut members: Vec<Codeword> = start.codewords().to_vec();
    let mut cols = vec![0i64; n];
    for w in &members {
        add_word(&mut cols, w, 1);
    }
    let close = |a: &Codeword, b: &Codeword| ((a.value ^ b.value).count_ones() as usize) < h_min;

    // conflicts[c] = number of members closer than h_min to universe[c]
    let mut conflicts: Vec<u32> = universe
        .iter()
        .map(|c| members.iter().filter(|m| close(c, m)).count() as u32)
        .collect();
    let mut is_member: std::collections::HashSet<u64> = members.iter().map(|w| w.value).collect();

    let mut stats = SearchStats {
        evaluations: 0,
        swaps: 0,
    };
    let mut scratch = vec![0i64; n];
    'outer: loop {
        let current = objective(&cols, k, n_act);
        if current.0 == 0 {
            break;
        }
        let mut moved = false;
        for (ci, cand) in universe.iter().enumerate() {
            if conflicts[ci] > 1 || is_member.contains(&cand.value) {
                continue;
            }
            for slot in 0..k {
                // a conflicting candidate can only replace the member it conflicts with
                if conflicts[ci] == 1 && !close(cand, &members[slot]) {
                    continue;
                }
                if stats.evaluations >= budget {
                    break 'outer;
                }
                stats.evaluations += 1;
                scratch.copy_from_slice(&cols);
                add_word(&mut scratch, &members[slot], -1);
                add_word(&mut scratch, cand, 1);
                if objective(&scratch, k, n_act) < current {
                    let out = members[slot];
                    for (c, count) in universe.iter().zip(conflicts.iter_mut()) {
                        if close(c, &out) {
                            *count -= 1;
                        }
                        if close(c, cand) {
                            *count += 1;
                        }
                    }
                    is_member.remove(&out.value);
                    is_member.insert(cand.value);
                    members[slot] = *cand;
                    cols.copy_from_slice(&scratch);
                    stats.swaps += 1;
                    moved = true;
                    break;
                }
            }
            if moved {
                break;
            }
        }
        if !moved {
            break;
        }
    }
    members.sort();
    Ok((CodingScheme::new(members)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub budget: u64,
    pub enumeration_cap: u128,
    /// Stream candidates instead of failing when the constant-weight
    /// enumeration exceeds the cap. Streamed schemes skip balance refinement.
    pub allow_streaming: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_SEARCH_BUDGET,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            allow_streaming: false,
        }
    }
}

/// Enumerate, filter by minimum distance, then balance.
///
/// When the enumeration is materialized and the balanced subset of the
/// filtered pool still has a column spread above the best possible value,
/// [`refine_scheme`] continues the search over the full enumeration.
pub fn generate_scheme(
    k: usize,
    n: usize,
    n_act: usize,
    h_min: usize,
    opts: &GenerateOptions,
) -> Result<CodingScheme> {
    check_lengths(n, n_act)?;
    let report = check_feasibility(k, n, n_act);
    if k == 0 || !report.enough_codewords {
        return Err(Error::Infeasible { report });
    }
    let lower_bound = if report.rk_integral { 0 } else { 1 };
    if report.combinations > opts.enumeration_cap && opts.allow_streaming {
        let pool = greedy_select(ConstantWeightIter::new(n, n_act)?, h_min);
        log::debug!("generate_scheme K={k} N={n} N_act={n_act} H_min={h_min}: {} candidates (streamed)", pool.len());
        return search_scheme(&pool, k, opts.budget);
    }
    let universe = enumerate_constant_weight(n, n_act, opts.enumeration_cap)?;
    let pool = greedy_select(universe.iter().copied(), h_min);
    log::debug!(
        "generate_scheme K={k} N={n} N_act={n_act} H_min={h_min}: {} candidates",
        pool.len()
    );
    let scheme = search_scheme(&pool, k, opts.budget)?;
    if balance_score(&scheme) <= lower_bound {
        return Ok(scheme);
    }
    let (refined, stats) = refine_scheme(&universe, &scheme, h_min, opts.budget)?;
    log::debug!("refinement: {stats:?}, spread {}", balance_score(&refined));
    Ok(refined)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCheck {
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub classes: usize,
    pub expected_classes: usize,
    pub length_ok: bool,
    /// Rows whose weight differs from `N_act`.
    pub rule_a_violations: Vec<usize>,
    pub duplicate_pairs: Vec<(usize, usize)>,
    pub measured_min_distance: Option<usize>,
    pub required_min_distance: usize,
    pub column_sums: Vec<usize>,
    pub balance_score: usize,
    /// Smallest achievable spread: 0 when `r K` is integral, else 1.
    pub balance_lower_bound: usize,
    pub rule_a: RuleCheck,
    pub distinct: RuleCheck,
    pub rule_b: RuleCheck,
    pub rule_c: RuleCheck,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.classes == self.expected_classes
            && self.length_ok
            && self.rule_a.pass
            && self.distinct.pass
            && self.rule_b.pass
            && self.rule_c.pass
    }
}

/// Recomputes every rule directly from the codeword bits.
pub fn verify_scheme(
    scheme: &CodingScheme,
    k: usize,
    n: usize,
    n_act: usize,
    h_min: usize,
) -> VerificationReport {
    let words = scheme.codewords();
    let length_ok = words.iter().all(|w| w.len() == n);
    let rule_a_violations: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| w.weight() != n_act)
        .map(|(i, _)| i)
        .collect();

    let mut duplicate_pairs = Vec::new();
    let mut measured: Option<usize> = None;
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            let d = (words[i].value ^ words[j].value).count_ones() as usize;
            if words[i] == words[j] {
                duplicate_pairs.push((i, j));
            }
            measured = Some(measured.map_or(d, |m| m.min(d)));
        }
    }

    let cols = column_sums(words);
    let score = spread(&cols);
    let lower = if check_feasibility(k, n, n_act).rk_integral {
        0
    } else {
        1
    };

    let rule_a = RuleCheck {
        pass: rule_a_violations.is_empty(),
        detail: format!("{} rows with weight != {n_act}", rule_a_violations.len()),
    };
    let distinct = RuleCheck {
        pass: duplicate_pairs.is_empty(),
        detail: format!("{} duplicated pairs", duplicate_pairs.len()),
    };
    let rule_b = RuleCheck {
        pass: measured.is_none_or(|d| d >= h_min),
        detail: format!("min distance {measured:?}, required {h_min}"),
    };
    let rule_c = RuleCheck {
        pass: score <= lower,
        detail: format!("column spread {score}, best possible {lower}"),
    };

    VerificationReport {
        classes: words.len(),
        expected_classes: k,
        length_ok,
        rule_a_violations,
        duplicate_pairs,
        measured_min_distance: measured,
        required_min_distance: h_min,
        column_sums: cols,
        balance_score: score,
        balance_lower_bound: lower,
        rule_a,
        distinct,
        rule_b,
        rule_c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cw(s: &str) -> Codeword {
        s.parse().unwrap()
    }

    #[test]
    fn display_roundtrip_and_branch_order() {
        let w = cw("1001001000");
        assert_eq!(w.to_string(), "1001001000");
        assert_eq!(w.active_branches(), vec![0, 3, 6]);
        assert_eq!(w.value(), 0b1001001000);
    }

    #[test]
    fn hamming_table_pairs() {
        assert_eq!(hamming_distance(&cw("0100010001"), &cw("0001100001")).unwrap(), 4);
        assert_eq!(hamming_distance(&cw("1010100011"), &cw("0101010101")).unwrap(), 8);
        let a = cw("0110");
        assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
    }

    #[test]
    fn hamming_length_mismatch() {
        assert!(matches!(
            hamming_distance(&cw("01"), &cw("011")),
            Err(Error::LengthMismatch(2, 3))
        ));
    }

    #[test]
    fn enumerate_small() {
        let words = enumerate_constant_weight(3, 1, DEFAULT_ENUMERATION_CAP).unwrap();
        let printed: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        assert_eq!(printed, ["001", "010", "100"]);
    }

    #[test]
    fn enumerate_counts() {
        assert_eq!(enumerate_constant_weight(10, 3, DEFAULT_ENUMERATION_CAP).unwrap().len(), 120);
        assert_eq!(enumerate_constant_weight(20, 8, DEFAULT_ENUMERATION_CAP).unwrap().len(), 125_970);
        assert_eq!(enumerate_constant_weight(64, 64, 1).unwrap().len(), 1);
        assert_eq!(enumerate_constant_weight(64, 1, 100).unwrap().len(), 64);
    }

    #[test]
    fn enumerate_cap_is_named() {
        let err = enumerate_constant_weight(32, 16, DEFAULT_ENUMERATION_CAP).unwrap_err();
        assert!(err.to_string().contains("20000000"), "{err}");
    }

    #[test]
    fn enumerate_rejects_bad_args() {
        assert!(enumerate_constant_weight(4, 0, 10).is_err());
        assert!(enumerate_constant_weight(4, 5, 10).is_err());
        assert!(enumerate_constant_weight(65, 1, 100).is_err());
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(10, 3), 120);
        assert_eq!(binomial(20, 8), 125_970);
        assert_eq!(binomial(32, 16), 601_080_390);
        assert_eq!(binomial(3, 5), 0);
    }

    #[test]
    fn feasibility_examples() {
        let r = check_feasibility(10, 10, 3);
        assert!(r.rk_integral && r.enough_codewords);
        assert_eq!(r.s_opt, Some(3));
        assert_eq!(r.combinations, 120);

        let r = check_feasibility(100, 20, 8);
        assert_eq!(r.s_opt, Some(40));
        assert!(r.enough_codewords);

        assert_eq!(check_feasibility(10, 10, 4).s_opt, Some(4));

        let r = check_feasibility(7, 10, 3);
        assert!(!r.rk_integral);
        assert_eq!(r.s_opt, None);

        assert!(!check_feasibility(11, 4, 2).enough_codewords);
    }

    #[test]
    fn greedy_examples() {
        let l = enumerate_constant_weight(3, 1, 100).unwrap();
        assert_eq!(greedy_select(l.clone(), 2), l);
        let l = enumerate_constant_weight(6, 3, 100).unwrap();
        assert_eq!(greedy_select(l.clone(), 1), l);
        let g = greedy_select(enumerate_constant_weight(10, 3, 1000).unwrap(), 4);
        assert!(g.len() >= 10, "only {} words", g.len());
    }

    #[test]
    fn balance_of_single_word() {
        let s = CodingScheme::new(vec![cw("0110")]).unwrap();
        assert_eq!(balance_score(&s), 1);
        let s = CodingScheme::new(vec![cw("1111")]).unwrap();
        assert_eq!(balance_score(&s), 0);
    }

    #[test]
    fn search_errors_on_small_pool() {
        let pool = enumerate_constant_weight(4, 2, 100).unwrap();
        let err = search_scheme(&pool, 7, 100).unwrap_err();
        assert!(err.to_string().contains("insufficient codewords, lower H_min"));
    }

    #[test]
    fn search_with_whole_pool_keeps_it() {
        let pool = greedy_select(enumerate_constant_weight(6, 2, 100).unwrap(), 2);
        let s = search_scheme(&pool, pool.len(), 1000).unwrap();
        let mut expected = pool.clone();
        expected.sort();
        assert_eq!(s.codewords(), expected.as_slice());
    }

    #[test]
    fn search_is_deterministic() {
        let pool = greedy_select(enumerate_constant_weight(12, 4, 10_000).unwrap(), 4);
        let a = search_scheme(&pool, 9, 10_000).unwrap();
        let b = search_scheme(&pool, 9, 10_000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_reports_infeasible() {
        let err = generate_scheme(11, 4, 2, 1, &GenerateOptions::default()).unwrap_err();
        match err {
            Error::Infeasible { report } => assert!(!report.enough_codewords),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn generate_streaming_matches_materialized() {
        let small_cap = GenerateOptions {
            enumeration_cap: 10,
            allow_streaming: true,
            ..GenerateOptions::default()
        };
        let a = generate_scheme(10, 10, 3, 4, &small_cap).unwrap();
        let pool = greedy_select(enumerate_constant_weight(10, 3, 1000).unwrap(), 4);
        assert_eq!(a, search_scheme(&pool, 10, small_cap.budget).unwrap());
        let no_stream = GenerateOptions {
            enumeration_cap: 10,
            ..GenerateOptions::default()
        };
        assert!(matches!(
            generate_scheme(10, 10, 3, 4, &no_stream),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn verify_detects_duplicates_and_weight() {
        let s = CodingScheme::new(vec![cw("1100"), cw("0011"), cw("1100")]).unwrap();
        let r = verify_scheme(&s, 3, 4, 2, 2);
        assert!(!r.distinct.pass);
        assert_eq!(r.duplicate_pairs, vec![(0, 2)]);
        assert!(!r.rule_b.pass);
        assert!(!r.passed());

        let s = CodingScheme::new(vec![cw("1100"), cw("0111")]).unwrap();
        let r = verify_scheme(&s, 2, 4, 2, 1);
        assert_eq!(r.rule_a_violations, vec![1]);
        assert!(!r.rule_a.pass);
    }

    #[test]
    fn scheme_file_roundtrip() {
        let s = generate_scheme(10, 10, 3, 4, &GenerateOptions::default()).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf, 4).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# N=10 N_act=3 H_min=4\n0 "));
        let parsed = SchemeFile::read_from(buf.as_slice()).unwrap();
        assert_eq!(parsed.scheme, s);
        assert_eq!((parsed.n, parsed.n_act, parsed.h_min), (10, 3, 4));
    }

    #[test]
    fn scheme_file_errors() {
        assert!(SchemeFile::read_from("0 0110\n".as_bytes()).is_err());
        assert!(SchemeFile::read_from("# N=4 N_act=2\n0 0110\n".as_bytes()).is_err());
        assert!(SchemeFile::read_from("# N=4 N_act=2 H_min=2\n1 0110\n".as_bytes()).is_err());
        assert!(SchemeFile::read_from("# N=4 N_act=2 H_min=2\n0 01102\n".as_bytes()).is_err());
        assert!(SchemeFile::read_from("# N=5 N_act=2 H_min=2\n0 0110\n".as_bytes()).is_err());
    }
}
