//! DoReFa-style fake quantizers with straight-through gradients, bitwidth
//! tasks, and the per-update task sampler.

use std::fmt;
use std::str::FromStr;

use bitadapt_tensor::{Graph, Real, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantization precision: `Int(k)` with `1 <= k <= 16`, or full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "BitwidthRepr", into = "BitwidthRepr")]
pub enum Bitwidth {
    Int(u8),
    Fp,
}

impl Bitwidth {
    pub const MAX_BITS: u8 = 16;

    pub fn int(k: u8) -> Result<Self> {
        if (1..=Self::MAX_BITS).contains(&k) {
            Ok(Bitwidth::Int(k))
        } else {
            Err(Error::Bitwidth(format!("{k} is outside 1..=16")))
        }
    }

    pub fn is_fp(self) -> bool {
        self == Bitwidth::Fp
    }

    /// Number of grid intervals `2^k - 1`, or `None` at full precision.
    pub fn levels(self) -> Option<u32> {
        match self {
            Bitwidth::Int(k) => Some((1u32 << k) - 1),
            Bitwidth::Fp => None,
        }
    }
}

impl fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bitwidth::Int(k) => write!(f, "{k}"),
            Bitwidth::Fp => f.write_str("FP"),
        }
    }
}

impl FromStr for Bitwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("fp") || s.eq_ignore_ascii_case("fp32") {
            return Ok(Bitwidth::Fp);
        }
        let k: u8 = s
            .parse()
            .map_err(|_| Error::Bitwidth(format!("`{s}` is neither an integer nor FP")))?;
        Bitwidth::int(k)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BitwidthRepr {
    Int(u64),
    Str(String),
}

impl TryFrom<BitwidthRepr> for Bitwidth {
    type Error = Error;

    fn try_from(r: BitwidthRepr) -> Result<Self> {
        match r {
            BitwidthRepr::Int(k) => Bitwidth::int(u8::try_from(k).unwrap_or(0)),
            BitwidthRepr::Str(s) => s.parse(),
        }
    }
}

impl From<Bitwidth> for BitwidthRepr {
    fn from(b: Bitwidth) -> Self {
        match b {
            Bitwidth::Int(k) => BitwidthRepr::Int(k as u64),
            Bitwidth::Fp => BitwidthRepr::Str("FP".into()),
        }
    }
}

/// A `(b_w, b_a)` pair. Serialized as the string `"(b_w,b_a)"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BitwidthTask {
    pub b_w: Bitwidth,
    pub b_a: Bitwidth,
}

impl BitwidthTask {
    pub const FP: BitwidthTask = BitwidthTask {
        b_w: Bitwidth::Fp,
        b_a: Bitwidth::Fp,
    };

    pub fn new(b_w: Bitwidth, b_a: Bitwidth) -> Self {
        BitwidthTask { b_w, b_a }
    }

    pub fn is_fp(self) -> bool {
        self == Self::FP
    }

    /// `(FP, 1)` and `(1, FP)` are never trained or sampled.
    pub fn is_excluded(self) -> bool {
        matches!(
            (self.b_w, self.b_a),
            (Bitwidth::Fp, Bitwidth::Int(1)) | (Bitwidth::Int(1), Bitwidth::Fp)
        )
    }
}

impl fmt::Display for BitwidthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.b_w, self.b_a)
    }
}

impl TryFrom<String> for BitwidthTask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BitwidthTask> for String {
    fn from(t: BitwidthTask) -> Self {
        t.to_string()
    }
}

impl FromStr for BitwidthTask {
    type Err = Error;

    /// Parses `"w,a"`, `"(w,a)"` or `"w/a"`.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (w, a) = inner
            .split_once(',')
            .or_else(|| inner.split_once('/'))
            .ok_or_else(|| Error::Bitwidth(format!("`{s}` is not a (b_w,b_a) pair")))?;
        Ok(BitwidthTask::new(w.parse()?, a.parse()?))
    }
}

/// The candidate space the sampler draws from.
///
/// In the default mode weight and activation bitwidths come from separate
/// candidate lists and every non-excluded combination is a task. When `tuples`
/// is set, tasks are drawn from that explicit list instead.
#[derive(Clone, Debug, PartialEq)]
pub struct BitwidthTaskSet {
    pub weights: Vec<Bitwidth>,
    pub activations: Vec<Bitwidth>,
    pub minor: Vec<Bitwidth>,
    pub tuples: Option<Vec<BitwidthTask>>,
}

impl BitwidthTaskSet {
    pub fn new(weights: Vec<Bitwidth>, activations: Vec<Bitwidth>) -> Self {
        BitwidthTaskSet {
            weights: dedup(weights),
            activations: dedup(activations),
            minor: Vec::new(),
            tuples: None,
        }
    }

    /// Same candidates for weights and activations.
    pub fn symmetric(bits: Vec<Bitwidth>) -> Self {
        Self::new(bits.clone(), bits)
    }

    pub fn from_tuples(tuples: Vec<BitwidthTask>) -> Self {
        let mut set = Self::new(
            tuples.iter().map(|t| t.b_w).collect(),
            tuples.iter().map(|t| t.b_a).collect(),
        );
        let mut seen = Vec::new();
        for t in tuples {
            if !seen.contains(&t) {
                seen.push(t);
            }
        }
        set.tuples = Some(seen);
        set
    }

    pub fn with_minor(mut self, minor: Vec<Bitwidth>) -> Self {
        self.minor = dedup(minor);
        self
    }

    /// All valid tasks in candidate order.
    pub fn valid_tasks(&self) -> Vec<BitwidthTask> {
        match &self.tuples {
            Some(t) => t.iter().copied().filter(|t| !t.is_excluded()).collect(),
            None => self
                .weights
                .iter()
                .flat_map(|&w| {
                    self.activations
                        .iter()
                        .map(move |&a| BitwidthTask::new(w, a))
                })
                .filter(|t| !t.is_excluded())
                .collect(),
        }
    }

    pub fn contains(&self, task: BitwidthTask) -> bool {
        self.valid_tasks().contains(&task)
    }

    pub fn validate(&self, fix_first_fp: bool) -> Result<()> {
        let tasks = self.valid_tasks();
        if tasks.is_empty() {
            return Err(Error::Sampler(
                "task set has no valid (b_w,b_a) pair".into(),
            ));
        }
        if fix_first_fp && !tasks.contains(&BitwidthTask::FP) {
            return Err(Error::Sampler(
                "fixing the first branch to (FP,FP) requires FP among the candidates".into(),
            ));
        }
        for m in &self.minor {
            if !tasks.iter().any(|t| t.b_w == *m) {
                return Err(Error::Sampler(format!(
                    "minor bitwidth {m} has no valid task in the set"
                )));
            }
        }
        Ok(())
    }
}

fn dedup(bits: Vec<Bitwidth>) -> Vec<Bitwidth> {
    let mut out = Vec::with_capacity(bits.len());
    for b in bits {
        if !out.contains(&b) {
            out.push(b);
        }
    }
    out
}

/// Draws `m` branch tasks for one outer update.
///
/// Slot 0 is `(FP,FP)` when `fix_first_fp` is set. When minor bitwidths exist
/// and `m >= 3`, slot 1 pairs a uniformly chosen minor weight bitwidth with a
/// uniformly chosen activation bitwidth valid for it. Every other slot is
/// uniform over [`BitwidthTaskSet::valid_tasks`].
pub fn sample_bitwidth_tasks<R: Rng + ?Sized>(
    ts: &BitwidthTaskSet,
    m: usize,
    rng: &mut R,
    fix_first_fp: bool,
) -> Result<Vec<BitwidthTask>> {
    ts.validate(fix_first_fp)?;
    let fixed = usize::from(fix_first_fp);
    if m < fixed.max(1) {
        return Err(Error::Sampler(format!(
            "M = {m} is smaller than the {} slot(s) the rules require",
            fixed.max(1)
        )));
    }
    let tasks = ts.valid_tasks();
    let minor_slot = !ts.minor.is_empty() && m >= 3;
    let mut out = Vec::with_capacity(m);
    for slot in 0..m {
        let task = if slot == 0 && fix_first_fp {
            BitwidthTask::FP
        } else if slot == 1 && minor_slot {
            let b_w = ts.minor[rng.gen_range(0..ts.minor.len())];
            let partners: Vec<_> = tasks.iter().filter(|t| t.b_w == b_w).collect();
            *partners[rng.gen_range(0..partners.len())]
        } else {
            tasks[rng.gen_range(0..tasks.len())]
        };
        out.push(task);
    }
    Ok(out)
}

fn int_bits(k: u32) -> Result<u32> {
    if k == 0 || k > Bitwidth::MAX_BITS as u32 {
        return Err(Error::Bitwidth(format!("k = {k} is outside 1..=16")));
    }
    Ok((1u32 << k) - 1)
}

/// `round((2^k - 1)·x) / (2^k - 1)` with a straight-through gradient.
/// The caller keeps `x` within `[0, 1]`.
pub fn quantize_k<T: Real>(g: &mut Graph<T>, x: Var, k: u32) -> Result<Var> {
    Ok(g.round_ste(x, int_bits(k)?))
}

/// Weight quantizer. `FP` returns `w` itself.
///
/// For `k >= 2` the weights pass through `tanh`, are normalized into `[0, 1]`
/// by the largest magnitude, quantized, and mapped back to `[-1, 1]`. For
/// `k = 1` the result is `sign(w)` scaled by the mean absolute weight.
pub fn quantize_weights<T: Real>(g: &mut Graph<T>, w: Var, b: Bitwidth) -> Result<Var> {
    match b {
        Bitwidth::Fp => Ok(w),
        Bitwidth::Int(1) => {
            let abs = g.abs(w);
            let scale = g.mean(abs);
            let sign = g.sign_ste(w);
            Ok(g.mul_scalar(sign, scale)?)
        }
        Bitwidth::Int(k) => {
            let t = g.tanh(w);
            let abs = g.abs(t);
            let max = g.max_all(abs);
            let r = g.div_scalar(t, max)?;
            let half = T::of(0.5);
            let unit = g.affine(r, half, half);
            let q = quantize_k(g, unit, k as u32)?;
            Ok(g.affine(q, T::of(2.0), -T::one()))
        }
    }
}

/// Activation quantizer: `quantize_k(clip(a, 0, 1))`. `FP` returns `a` itself.
pub fn quantize_activations<T: Real>(g: &mut Graph<T>, a: Var, b: Bitwidth) -> Result<Var> {
    match b {
        Bitwidth::Fp => Ok(a),
        Bitwidth::Int(k) => {
            let c = g.clip(a, T::zero(), T::one());
            quantize_k(g, c, k as u32)
        }
    }
}
