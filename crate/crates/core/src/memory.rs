//! Memory banks under the three update disciplines.
//!
//! * STM: append the frame embedding every `θ` frames; grows without bound.
//! * EMA: GT slot plus one slot blended towards the query every `θ` frames.
//! * SAM: a fixed composition of GT, latest and recurrent slots. The
//!   recurrent slot ([`RdeState`]) is refreshed every `θ` frames by two
//!   aggregation modules, one for keys and one for values.

use std::fmt;
use std::str::FromStr;

use crate::encoders::{KeyMap, ValueMap};
use crate::error::{Error, Result};
use crate::sam::SamParams;
use crate::tensor::{Tensor, TensorArchive};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Stm,
    Ema,
    Sam,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Stm, Pattern::Ema, Pattern::Sam];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Stm => "stm",
            Pattern::Ema => "ema",
            Pattern::Sam => "sam",
        }
    }

    fn code(self) -> f64 {
        Pattern::ALL.iter().position(|&p| p == self).unwrap() as f64
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stm" => Ok(Pattern::Stm),
            "ema" => Ok(Pattern::Ema),
            "sam" => Ok(Pattern::Sam),
            other => Err(Error::Config(format!("unknown memory pattern `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Gt,
    Latest,
    Rde,
    Historical,
}

impl Origin {
    const ALL: [Origin; 4] = [Origin::Gt, Origin::Latest, Origin::Rde, Origin::Historical];
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySlot {
    pub key: KeyMap,
    pub values: ValueMap,
    pub origin: Origin,
    pub frame_index: usize,
}

impl MemorySlot {
    pub fn new(key: KeyMap, values: ValueMap, origin: Origin, frame_index: usize) -> Result<Self> {
        let ks = key.0.shape();
        if ks.len() != 3 {
            return Err(Error::dim(format!("slot key must be Ckxhxw, got {ks:?}")));
        }
        if values.0.is_empty() {
            return Err(Error::dim("slot holds no object values"));
        }
        let vs = values.0[0].shape();
        if vs.len() != 3 || vs[1..] != ks[1..] {
            return Err(Error::dim(format!(
                "value {vs:?} does not match key {ks:?}"
            )));
        }
        if values.0.iter().any(|v| v.shape() != vs) {
            return Err(Error::dim("object values differ in shape"));
        }
        Ok(MemorySlot {
            key,
            values,
            origin,
            frame_index,
        })
    }

    /// Spatial positions per slot.
    pub fn positions(&self) -> usize {
        self.key.0.shape()[1] * self.key.0.shape()[2]
    }

    pub fn num_objects(&self) -> usize {
        self.values.num_objects()
    }

    pub fn float_count(&self) -> usize {
        self.key.0.len() + self.values.float_count()
    }

    pub fn with_origin(&self, origin: Origin) -> Self {
        MemorySlot {
            origin,
            ..self.clone()
        }
    }
}

/// The recurrent dynamic embedding carried between updates.
#[derive(Clone, Debug, PartialEq)]
pub struct RdeState {
    pub key: KeyMap,
    pub values: ValueMap,
    pub last_update_frame: usize,
}

impl RdeState {
    /// Starts the recurrence from a copy of the ground-truth slot.
    pub fn from_slot(slot: &MemorySlot) -> Self {
        RdeState {
            key: slot.key.clone(),
            values: slot.values.clone(),
            last_update_frame: slot.frame_index,
        }
    }

    pub fn as_slot(&self) -> MemorySlot {
        MemorySlot {
            key: self.key.clone(),
            values: self.values.clone(),
            origin: Origin::Rde,
            frame_index: self.last_update_frame,
        }
    }
}

/// Whether the bank takes an update at `frame_index`.
pub fn is_update_frame(frame_index: usize, theta: usize) -> bool {
    frame_index.is_multiple_of(theta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pattern: Pattern,
    theta: usize,
    slots: Vec<MemorySlot>,
}

impl MemoryBank {
    pub fn new(pattern: Pattern, theta: usize) -> Result<Self> {
        if theta == 0 {
            return Err(Error::Config("memory.theta must be at least 1".into()));
        }
        Ok(MemoryBank {
            pattern,
            theta,
            slots: Vec::new(),
        })
    }

    pub fn from_slots(pattern: Pattern, theta: usize, slots: Vec<MemorySlot>) -> Result<Self> {
        let mut bank = Self::new(pattern, theta)?;
        for s in slots {
            bank.check_compatible(&s)?;
            bank.slots.push(s);
        }
        Ok(bank)
    }

    pub fn pattern(&self) -> Pattern {
        self.pattern
    }

    pub fn theta(&self) -> usize {
        self.theta
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn float_count(&self) -> usize {
        self.slots.iter().map(MemorySlot::float_count).sum()
    }

    fn check_compatible(&self, slot: &MemorySlot) -> Result<()> {
        if let Some(first) = self.slots.first() {
            if first.key.0.shape() != slot.key.0.shape()
                || first.values.0.len() != slot.values.0.len()
                || first.values.0[0].shape() != slot.values.0[0].shape()
            {
                return Err(Error::dim("slot shapes differ from the rest of the bank"));
            }
        }
        Ok(())
    }

    /// STM discipline: stores `slot` iff its frame index is a multiple of
    /// `θ`. Returns whether it was stored.
    pub fn stm_append(&mut self, slot: MemorySlot) -> Result<bool> {
        if self.pattern != Pattern::Stm {
            return Err(Error::contract(format!(
                "stm_append on a {} bank",
                self.pattern
            )));
        }
        if !is_update_frame(slot.frame_index, self.theta) {
            return Ok(false);
        }
        self.check_compatible(&slot)?;
        self.slots.push(slot);
        Ok(true)
    }

    /// Swaps out every slot at once, keeping pattern and interval.
    pub fn replace_slots(&mut self, slots: Vec<MemorySlot>) -> Result<()> {
        let fresh = Self::from_slots(self.pattern, self.theta, slots)?;
        self.slots = fresh.slots;
        Ok(())
    }

    pub fn slot_mut(&mut self, index: usize) -> Option<&mut MemorySlot> {
        self.slots.get_mut(index)
    }

    /// Serializes slots and bank metadata.
    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::default();
        archive.push(
            "bank.meta",
            Tensor::new(vec![2], vec![self.pattern.code(), self.theta as f64]).unwrap(),
        );
        for (i, s) in self.slots.iter().enumerate() {
            let origin = Origin::ALL.iter().position(|&o| o == s.origin).unwrap() as f64;
            archive.push(
                format!("slot.{i}.meta"),
                Tensor::new(vec![2], vec![origin, s.frame_index as f64]).unwrap(),
            );
            archive.push(format!("slot.{i}.key"), s.key.0.clone());
            for (j, v) in s.values.0.iter().enumerate() {
                archive.push(format!("slot.{i}.value.{j}"), v.clone());
            }
        }
        archive
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let meta = archive.require("bank.meta")?;
        let code = |v: f64, n: usize, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < n {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("bad {what} code {v}")))
            }
        };
        let pattern = Pattern::ALL[code(meta.data()[0], 3, "pattern")?];
        let theta = code(meta.data()[1], usize::MAX, "theta")?;
        let mut slots = Vec::new();
        let mut i = 0;
        while let Some(m) = archive.get(&format!("slot.{i}.meta")) {
            let origin = Origin::ALL[code(m.data()[0], 4, "origin")?];
            let frame_index = code(m.data()[1], usize::MAX, "frame")?;
            let key = archive.require(&format!("slot.{i}.key"))?.clone();
            let mut values = Vec::new();
            let mut j = 0;
            while let Some(v) = archive.get(&format!("slot.{i}.value.{j}")) {
                values.push(v.clone());
                j += 1;
            }
            slots.push(MemorySlot::new(KeyMap(key), ValueMap(values), origin, frame_index)?);
            i += 1;
        }
        Self::from_slots(pattern, theta, slots)
    }
}

/// `(1 − λ)·query + λ·old`, elementwise.
pub fn ema_blend(old: &Tensor, query: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain(format!("blend weight {lambda} outside [0, 1]")));
    }
    if old.shape() != query.shape() {
        return Err(Error::dim(format!(
            "blend of {:?} with {:?}",
            old.shape(),
            query.shape()
        )));
    }
    let data = old
        .data()
        .iter()
        .zip(query.data())
        .map(|(&o, &q)| (1.0 - lambda) * q + lambda * o)
        .collect();
    Tensor::new(old.shape().to_vec(), data)
}

/// Chooses, for every memory position `p`, the query position `q` that
/// gets blended into it.
pub trait PairingRule {
    /// `memory` and `query` are `C×h×w` keys; the result has one query
    /// index per memory position.
    fn pair(&self, memory: &Tensor, query: &Tensor) -> Result<Vec<usize>>;
}

/// Pairs each memory position with its most cosine-similar query position;
/// ties go to the lower index.
#[derive(Clone, Copy, Debug, Default)]
pub struct MostSimilar;

/// Pairs equal spatial positions.
#[derive(Clone, Copy, Debug, Default)]
pub struct SamePosition;

fn columns(key: &Tensor) -> (usize, usize) {
    (key.shape()[0], key.len() / key.shape()[0])
}

impl PairingRule for MostSimilar {
    fn pair(&self, memory: &Tensor, query: &Tensor) -> Result<Vec<usize>> {
        if memory.shape() != query.shape() {
            return Err(Error::dim("pairing keys differ in shape"));
        }
        let (c, n) = columns(memory);
        let col = |t: &Tensor, j: usize| -> Vec<f64> { (0..c).map(|i| t.data()[i * n + j]).collect() };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let qcols: Vec<Vec<f64>> = (0..n).map(|j| col(query, j)).collect();
        let qnorms: Vec<f64> = qcols.iter().map(|v| norm(v)).collect();
        Ok((0..n)
            .map(|p| {
                let m = col(memory, p);
                let mn = norm(&m);
                let mut best = (0, f64::NEG_INFINITY);
                for (q, qc) in qcols.iter().enumerate() {
                    let cos = m.iter().zip(qc).map(|(a, b)| a * b).sum::<f64>() / (mn * qnorms[q]);
                    if cos > best.1 {
                        best = (q, cos);
                    }
                }
                best.0
            })
            .collect())
    }
}

impl PairingRule for SamePosition {
    fn pair(&self, memory: &Tensor, query: &Tensor) -> Result<Vec<usize>> {
        if memory.shape() != query.shape() {
            return Err(Error::dim("pairing keys differ in shape"));
        }
        Ok((0..columns(memory).1).collect())
    }
}

fn gather_columns(t: &Tensor, pairing: &[usize]) -> Tensor {
    let (_, n) = columns(t);
    Tensor::from_fn(t.shape(), |i| t.data()[(i / n) * n + pairing[i % n]])
}

/// Blends the paired query embedding into `old`, key and values alike.
pub fn ema_update(
    old: &MemorySlot,
    query: &MemorySlot,
    lambda: f64,
    rule: &dyn PairingRule,
) -> Result<MemorySlot> {
    if old.num_objects() != query.num_objects() {
        return Err(Error::dim("object counts differ"));
    }
    let pairing = rule.pair(&old.key.0, &query.key.0)?;
    let key = ema_blend(&old.key.0, &gather_columns(&query.key.0, &pairing), lambda)?;
    let values = old
        .values
        .0
        .iter()
        .zip(&query.values.0)
        .map(|(o, q)| ema_blend(o, &gather_columns(q, &pairing), lambda))
        .collect::<Result<Vec<_>>>()?;
    MemorySlot::new(KeyMap(key), ValueMap(values), Origin::Historical, query.frame_index)
}

fn with_time_axis(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    t.reshape(&[s[0], 1, s[1], s[2]])
}

/// One recurrence step: previous embedding plus latest slot through the
/// key and value modules. Inputs are left untouched.
pub fn sam_update(
    rde: &RdeState,
    latest: &MemorySlot,
    key_sam: &SamParams,
    value_sam: &SamParams,
) -> Result<RdeState> {
    if latest.origin != Origin::Latest {
        return Err(Error::contract(format!(
            "recurrent update needs a latest slot, got {:?}",
            latest.origin
        )));
    }
    if rde.key.0.shape() != latest.key.0.shape() || rde.values.0.len() != latest.values.0.len() {
        return Err(Error::dim("recurrent state and latest slot differ in shape"));
    }
    let squeeze_back = |t: Tensor| -> Result<Tensor> {
        let s = t.shape().to_vec();
        t.into_reshaped(&[s[0], s[2], s[3]])
    };
    let key = squeeze_back(key_sam.forward(&with_time_axis(&rde.key.0)?, &with_time_axis(&latest.key.0)?)?)?;
    let values = rde
        .values
        .0
        .iter()
        .zip(&latest.values.0)
        .map(|(prev, cur)| {
            if prev.shape() != cur.shape() {
                return Err(Error::dim("object value shapes differ"));
            }
            squeeze_back(value_sam.forward(&with_time_axis(prev)?, &with_time_axis(cur)?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RdeState {
        key: KeyMap(key),
        values: ValueMap(values),
        last_update_frame: latest.frame_index,
    })
}

/// Bank compositions from the inference-strategy ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[derive(Default)]
pub enum Strategy {
    First,
    Latest,
    Rde,
    FirstRde,
    LatestRde,
    FirstLatest,
    FirstLatestRde,
    DoubleFirstLatest,
    FirstDoubleLatest,
    #[default]
    DoubleFirstLatestRde,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::First,
        Strategy::Latest,
        Strategy::Rde,
        Strategy::FirstRde,
        Strategy::LatestRde,
        Strategy::FirstLatest,
        Strategy::FirstLatestRde,
        Strategy::DoubleFirstLatest,
        Strategy::FirstDoubleLatest,
        Strategy::DoubleFirstLatestRde,
    ];

    /// Copies of (GT, latest, recurrent) slots.
    fn counts(self) -> (usize, usize, usize) {
        match self {
            Strategy::First => (1, 0, 0),
            Strategy::Latest => (0, 1, 0),
            Strategy::Rde => (0, 0, 1),
            Strategy::FirstRde => (1, 0, 1),
            Strategy::LatestRde => (0, 1, 1),
            Strategy::FirstLatest => (1, 1, 0),
            Strategy::FirstLatestRde => (1, 1, 1),
            Strategy::DoubleFirstLatest => (2, 1, 0),
            Strategy::FirstDoubleLatest => (1, 2, 0),
            Strategy::DoubleFirstLatestRde => (2, 1, 1),
        }
    }

    pub fn composition(self) -> Vec<Origin> {
        let (f, l, r) = self.counts();
        let mut out = vec![Origin::Gt; f];
        out.extend(std::iter::repeat_n(Origin::Latest, l));
        out.extend(std::iter::repeat_n(Origin::Rde, r));
        out
    }

    pub fn slot_count(self) -> usize {
        let (f, l, r) = self.counts();
        f + l + r
    }

    pub fn uses_rde(self) -> bool {
        self.counts().2 > 0
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Strategy::First => "F",
            Strategy::Latest => "L",
            Strategy::Rde => "RDE",
            Strategy::FirstRde => "F&RDE",
            Strategy::LatestRde => "L&RDE",
            Strategy::FirstLatest => "F&L",
            Strategy::FirstLatestRde => "F&L&RDE",
            Strategy::DoubleFirstLatest => "2F&L",
            Strategy::FirstDoubleLatest => "F&2L",
            Strategy::DoubleFirstLatestRde => "2F&L&RDE",
        }
    }

    fn long_name(self) -> &'static str {
        match self {
            Strategy::First => "first frame",
            Strategy::Latest => "latest frame",
            Strategy::Rde => "rde",
            Strategy::FirstRde => "first frame & rde",
            Strategy::LatestRde => "latest frame & rde",
            Strategy::FirstLatest => "first frame & latest frame",
            Strategy::FirstLatestRde => "first frame & latest frame & rde",
            Strategy::DoubleFirstLatest => "first frame x2 & latest frame",
            Strategy::FirstDoubleLatest => "first frame & latest frame x2",
            Strategy::DoubleFirstLatestRde => "first frame x2 & latest frame & rde",
        }
    }
}


impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts short names (`2F&L&RDE`, spaces ignored) and long names
    /// (`first frame x2 & latest frame & rde`), case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let squashed: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_uppercase();
        let lowered = s.split_whitespace().collect::<Vec<_>>().join(" ").to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.short_name() == squashed || st.long_name() == lowered)
            .ok_or_else(|| Error::Config(format!("unknown bank strategy `{}`", s.trim())))
    }
}

/// Lays out the slots a strategy asks for; the bank is tagged SAM-pattern.
pub fn assemble_bank(
    gt: &MemorySlot,
    latest: &MemorySlot,
    rde: &RdeState,
    strategy: Strategy,
    theta: usize,
) -> Result<MemoryBank> {
    let slots = strategy
        .composition()
        .into_iter()
        .map(|origin| match origin {
            Origin::Gt => gt.with_origin(Origin::Gt),
            Origin::Latest => latest.with_origin(Origin::Latest),
            _ => rde.as_slot(),
        })
        .collect();
    MemoryBank::from_slots(Pattern::Sam, theta, slots)
}

/// Bank contents laid out as matrices: `keys` is `Ck×N_mem`, each entry of
/// `values` is `Cv×N_mem`, and column `s·hw + pos` is position `pos` of slot `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatBank {
    pub keys: Tensor,
    pub values: Vec<Tensor>,
}

fn stack_columns(parts: &[&Tensor]) -> Tensor {
    let c = parts[0].shape()[0];
    let hw = parts[0].len() / c;
    let n = parts.len() * hw;
    Tensor::from_fn(&[c, n], |i| {
        let (ch, col) = (i / n, i % n);
        parts[col / hw].data()[ch * hw + col % hw]
    })
}

pub fn flatten_bank(bank: &MemoryBank) -> Result<FlatBank> {
    if bank.is_empty() {
        return Err(Error::contract("cannot read from an empty bank"));
    }
    let keys: Vec<&Tensor> = bank.slots.iter().map(|s| &s.key.0).collect();
    let values = (0..bank.slots[0].num_objects())
        .map(|obj| {
            let parts: Vec<&Tensor> = bank.slots.iter().map(|s| &s.values.0[obj]).collect();
            stack_columns(&parts)
        })
        .collect();
    Ok(FlatBank {
        keys: stack_columns(&keys),
        values,
    })
}

/// Inverse of [`flatten_bank`]; `template` supplies slot geometry and tags.
pub fn unflatten_bank(flat: &FlatBank, template: &MemoryBank) -> Result<MemoryBank> {
    if template.is_empty() {
        return Err(Error::contract("empty template bank"));
    }
    let first = &template.slots[0];
    let (h, w) = (first.key.0.shape()[1], first.key.0.shape()[2]);
    let hw = h * w;
    let n = template.len() * hw;
    if flat.keys.rank() != 2
        || flat.keys.shape()[1] != n
        || flat.values.len() != first.num_objects()
        || flat.values.iter().any(|v| v.rank() != 2 || v.shape()[1] != n)
    {
        return Err(Error::dim("flat bank does not match the template"));
    }
    let split = |t: &Tensor, s: usize| -> Tensor {
        let c = t.shape()[0];
        Tensor::from_fn(&[c, h, w], |i| t.data()[(i / hw) * n + s * hw + i % hw])
    };
    let slots = template
        .slots
        .iter()
        .enumerate()
        .map(|(s, t)| {
            MemorySlot::new(
                KeyMap(split(&flat.keys, s)),
                ValueMap(flat.values.iter().map(|v| split(v, s)).collect()),
                t.origin,
                t.frame_index,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::from_slots(template.pattern, template.theta, slots)
}
