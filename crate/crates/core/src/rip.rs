//! Ranged inner-product: a reduction expressed as `2D + 1` instruction
//! segments `Pre_1 .. Pre_D, Body, Post_D .. Post_1` executed over a
//! flattened `D`-level loop nest.
//!
//! At loop index `k` the executed segments are a contiguous range picked
//! from how many trailing components of `k` sit at zero (start) and at
//! their maximum (end). This reproduces the call order of the nested loop
//!
//! ```text
//! Pre_1; for i0 { Pre_2; for i1 { .. Body .. } Post_2; } Post_1
//! ```
//!
//! without any branches inside segments.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MeritError, Result};
use crate::tensor::{dequantize, ndrange, quantize, DType};

pub const NUM_REGS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AluOp {
    /// `a + ((b + c) >> s)`
    Add,
    /// `a + ((b - c) >> s)`
    Sub,
    /// `a + (|b - c| >> s)`
    L1,
    /// `a + ((b * c) >> s)`
    Mac,
    Max,
    Min,
    /// `a ? b : c`
    Sel,
    Band,
    Bor,
    Bxor,
    Bnot,
    /// Load component `aux` of the current `(p, a)` index.
    Idx,
    /// Interpolated lookup in table `aux`, input `a`.
    Lut,
    /// Load constant `aux`.
    Movc,
    /// `a / b`, REAL32 only.
    Div,
}

impl AluOp {
    pub fn uses_shift(self) -> bool {
        matches!(self, AluOp::Add | AluOp::Sub | AluOp::L1 | AluOp::Mac)
    }
}

/// Instruction source: a register, one of the two input ports, or zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Operand {
    Reg(u8),
    PortA,
    PortB,
    #[default]
    Zero,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "r{r}"),
            Operand::PortA => f.write_str("a"),
            Operand::PortB => f.write_str("b"),
            Operand::Zero => f.write_str("zero"),
        }
    }
}

impl From<Operand> for String {
    fn from(o: Operand) -> String {
        o.to_string()
    }
}

impl TryFrom<String> for Operand {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "a" => Ok(Operand::PortA),
            "b" => Ok(Operand::PortB),
            "zero" | "0" => Ok(Operand::Zero),
            r if r.starts_with('r') => r[1..]
                .parse::<u8>()
                .ok()
                .filter(|&n| (n as usize) < NUM_REGS)
                .map(Operand::Reg)
                .ok_or_else(|| format!("bad register {s:?}")),
            _ => Err(format!("bad operand {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AluInstr {
    pub op: AluOp,
    pub dst: u8,
    #[serde(default)]
    pub src_a: Operand,
    #[serde(default)]
    pub src_b: Operand,
    #[serde(default)]
    pub src_c: Operand,
    #[serde(default)]
    pub shift: u8,
    #[serde(default)]
    pub aux: u16,
}

impl AluInstr {
    pub fn new(op: AluOp, dst: u8, src_a: Operand, src_b: Operand, src_c: Operand) -> Self {
        AluInstr { op, dst, src_a, src_b, src_c, shift: 0, aux: 0 }
    }

    pub fn with_shift(mut self, shift: u8) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_aux(mut self, aux: u16) -> Self {
        self.aux = aux;
        self
    }
}

/// Uniformly sampled lookup table with linear interpolation over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LutTable {
    pub samples: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    /// Extend the end segments linearly instead of failing out of range.
    #[serde(default)]
    pub extrapolate: bool,
}

impl LutTable {
    pub fn sampled(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let samples = (0..n)
            .map(|i| {
                let x = if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
                f(x)
            })
            .collect();
        LutTable { samples, lo, hi, extrapolate: false }
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let n = self.samples.len();
        let out_of_range = x.is_nan() || x < self.lo || x > self.hi;
        if out_of_range && (!self.extrapolate || x.is_nan()) {
            return Err(MeritError::LutRange { input: x, lo: self.lo, hi: self.hi });
        }
        if n == 1 || self.hi <= self.lo {
            return Ok(self.samples[0]);
        }
        let pos = (x - self.lo) / (self.hi - self.lo) * (n - 1) as f64;
        let i = (pos.floor().max(0.0) as usize).min(n - 2);
        let frac = pos - i as f64;
        Ok(self.samples[i] + (self.samples[i + 1] - self.samples[i]) * frac)
    }
}

/// One of the `2D + 1` program segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Segment {
    /// `Pre(l)` runs before level `l` (1-based) starts.
    Pre(usize),
    Body,
    /// `Post(l)` runs after level `l` finishes.
    Post(usize),
}

impl Segment {
    /// Position in the concatenated program for loop depth `depth`.
    pub fn flat(self, depth: usize) -> usize {
        match self {
            Segment::Pre(l) => l - 1,
            Segment::Body => depth,
            Segment::Post(l) => 2 * depth + 1 - l,
        }
    }

    pub fn from_flat(flat: usize, depth: usize) -> Segment {
        use std::cmp::Ordering::*;
        match flat.cmp(&depth) {
            Less => Segment::Pre(flat + 1),
            Equal => Segment::Body,
            Greater => Segment::Post(2 * depth + 1 - flat),
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Pre(l) => write!(f, "Pre_{l}"),
            Segment::Body => f.write_str("Body"),
            Segment::Post(l) => write!(f, "Post_{l}"),
        }
    }
}

fn trailing_counts(a_shape: &[usize], k: &[usize]) -> (usize, usize) {
    let zeros = k.iter().rev().take_while(|&&v| v == 0).count();
    let maxes = k.iter().zip(a_shape).rev().take_while(|(&v, &e)| v + 1 == e).count();
    (zeros, maxes)
}

/// Flat segment bounds `[D - zeros, D + maxes]` executed at `k`; unchecked.
pub fn phase_range_flat(a_shape: &[usize], k: &[usize]) -> (usize, usize) {
    let (zeros, maxes) = trailing_counts(a_shape, k);
    let d = a_shape.len();
    (d - zeros, d + maxes)
}

/// First and last segment executed at loop index `k`.
pub fn phase_range(a_shape: &[usize], k: &[usize]) -> Result<(Segment, Segment)> {
    if k.len() != a_shape.len() || k.iter().zip(a_shape).any(|(&i, &e)| i >= e) {
        return Err(MeritError::OutOfRange { index: k.iter().map(|&i| i as i64).collect(), shape: a_shape.to_vec() });
    }
    let d = a_shape.len();
    let (first, last) = phase_range_flat(a_shape, k);
    Ok((Segment::from_flat(first, d), Segment::from_flat(last, d)))
}

/// Full segment call sequence for one reduction over `a_shape`.
pub fn segment_trace(a_shape: &[usize]) -> Vec<Segment> {
    let d = a_shape.len();
    ndrange(a_shape)
        .flat_map(|k| {
            let (first, last) = phase_range_flat(a_shape, &k);
            (first..=last).map(move |s| Segment::from_flat(s, d))
        })
        .collect()
}

fn default_emit_level() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyProgram {
    pub depth: usize,
    /// `Pre_1 .. Pre_D, Body, Post_D .. Post_1`.
    pub segments: Vec<Vec<AluInstr>>,
    #[serde(default)]
    pub constants: Vec<f64>,
    #[serde(default)]
    pub tables: Vec<LutTable>,
    /// Registers `r0 .. r{outputs-1}` are emitted.
    pub outputs: usize,
    /// Loop level whose `Post` completion emits the outputs. Level 1 emits
    /// once per reduction; level `l` emits once per iteration of the
    /// levels above it.
    #[serde(default = "default_emit_level")]
    pub emit_level: usize,
}

impl StrategyProgram {
    /// Program with empty segments for `depth` levels.
    pub fn empty(depth: usize, outputs: usize) -> Self {
        StrategyProgram {
            depth,
            segments: vec![Vec::new(); 2 * depth + 1],
            constants: Vec::new(),
            tables: Vec::new(),
            outputs,
            emit_level: 1,
        }
    }

    pub fn segment_mut(&mut self, seg: Segment) -> &mut Vec<AluInstr> {
        let d = self.depth;
        &mut self.segments[seg.flat(d)]
    }

    pub fn segment(&self, seg: Segment) -> &[AluInstr] {
        &self.segments[seg.flat(self.depth)]
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: StrategyProgram = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    /// Number of values emitted per reduction over `a_shape`.
    pub fn emits_per_reduction(&self, a_shape: &[usize]) -> usize {
        self.outputs * a_shape[..self.emit_level - 1].iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MeritError::InvalidProgram(m));
        if self.segments.len() != 2 * self.depth + 1 {
            return bad(format!(
                "depth {} needs {} segments, found {}",
                self.depth,
                2 * self.depth + 1,
                self.segments.len()
            ));
        }
        if self.outputs == 0 || self.outputs > NUM_REGS {
            return bad(format!("outputs {} not in 1..={NUM_REGS}", self.outputs));
        }
        if self.emit_level == 0 || self.emit_level > self.depth.max(1) {
            return bad(format!("emit_level {} not in 1..={}", self.emit_level, self.depth.max(1)));
        }
        for (s, seg) in self.segments.iter().enumerate() {
            for ins in seg {
                let at = Segment::from_flat(s, self.depth);
                if ins.dst as usize >= NUM_REGS {
                    return bad(format!("{at}: dst r{} out of range", ins.dst));
                }
                if ins.shift > 15 {
                    return bad(format!("{at}: shift {} > 15", ins.shift));
                }
                if ins.shift != 0 && !ins.op.uses_shift() {
                    return bad(format!("{at}: {:?} takes no shift", ins.op));
                }
                match ins.op {
                    AluOp::Movc if ins.aux as usize >= self.constants.len() => {
                        return bad(format!("{at}: constant {} missing", ins.aux))
                    }
                    AluOp::Lut if ins.aux as usize >= self.tables.len() => {
                        return bad(format!("{at}: table {} missing", ins.aux))
                    }
                    _ => {}
                }
            }
        }
        for (i, t) in self.tables.iter().enumerate() {
            if t.samples.is_empty() || t.hi.partial_cmp(&t.lo).is_none_or(|o| o.is_lt()) {
                return bad(format!("table {i} is empty or has an inverted range"));
            }
        }
        Ok(())
    }
}

/// Register-level arithmetic for one element type.
pub trait Lane: Copy + PartialEq + fmt::Debug + Send + Sync + 'static {
    fn zero() -> Self;
    fn from_real(v: f64, frac_bits: u8) -> Self;
    fn to_real(self, frac_bits: u8) -> f64;
    fn from_index(i: usize) -> Self;
    fn arith(op: AluOp, a: Self, b: Self, c: Self, shift: u8) -> Result<Self>;
}

fn context_op(op: AluOp) -> MeritError {
    MeritError::InvalidProgram(format!("{op:?} needs execution context"))
}

impl Lane for f32 {
    fn zero() -> f32 {
        0.0
    }

    fn from_real(v: f64, _frac_bits: u8) -> f32 {
        v as f32
    }

    fn to_real(self, _frac_bits: u8) -> f64 {
        f64::from(self)
    }

    fn from_index(i: usize) -> f32 {
        i as f32
    }

    fn arith(op: AluOp, a: f32, b: f32, c: f32, shift: u8) -> Result<f32> {
        let scale = 1.0 / (1u32 << shift) as f32;
        let bits = |x: f32| x as i32;
        Ok(match op {
            AluOp::Add => a + (b + c) * scale,
            AluOp::Sub => a + (b - c) * scale,
            AluOp::L1 => a + (b - c).abs() * scale,
            AluOp::Mac => a + (b * c) * scale,
            AluOp::Max => a.max(b),
            AluOp::Min => a.min(b),
            AluOp::Sel => {
                if a != 0.0 {
                    b
                } else {
                    c
                }
            }
            AluOp::Band => (bits(a) & bits(b)) as f32,
            AluOp::Bor => (bits(a) | bits(b)) as f32,
            AluOp::Bxor => (bits(a) ^ bits(b)) as f32,
            AluOp::Bnot => (!bits(a)) as f32,
            AluOp::Div => {
                if b == 0.0 {
                    return Err(MeritError::DivByZero);
                }
                a / b
            }
            AluOp::Idx | AluOp::Lut | AluOp::Movc => return Err(context_op(op)),
        })
    }
}

fn saturate(v: i32) -> i16 {
    v.clamp(i32::from(i16::MIN), i32::from(i16::MAX)) as i16
}

impl Lane for i16 {
    fn zero() -> i16 {
        0
    }

    fn from_real(v: f64, frac_bits: u8) -> i16 {
        quantize(v, frac_bits)
    }

    fn to_real(self, frac_bits: u8) -> f64 {
        dequantize(self, frac_bits)
    }

    fn from_index(i: usize) -> i16 {
        saturate(i.min(i32::MAX as usize) as i32)
    }

    fn arith(op: AluOp, a: i16, b: i16, c: i16, shift: u8) -> Result<i16> {
        let (a, b, c) = (i32::from(a), i32::from(b), i32::from(c));
        // `>>` on i32 is an arithmetic shift: rounds toward negative infinity.
        Ok(match op {
            AluOp::Add => saturate(a + ((b + c) >> shift)),
            AluOp::Sub => saturate(a + ((b - c) >> shift)),
            AluOp::L1 => saturate(a + ((b - c).abs() >> shift)),
            AluOp::Mac => saturate(a + ((b * c) >> shift)),
            AluOp::Max => a.max(b) as i16,
            AluOp::Min => a.min(b) as i16,
            AluOp::Sel => {
                if a != 0 {
                    b as i16
                } else {
                    c as i16
                }
            }
            AluOp::Band => (a & b) as i16,
            AluOp::Bor => (a | b) as i16,
            AluOp::Bxor => (a ^ b) as i16,
            AluOp::Bnot => !(a as i16),
            AluOp::Div => {
                return Err(MeritError::InvalidProgram("DIV is REAL32-only; use a reciprocal LUT in FIX16".into()))
            }
            AluOp::Idx | AluOp::Lut | AluOp::Movc => return Err(context_op(op)),
        })
    }
}

/// Stateless ALU evaluation of the arithmetic, logical and DIV operations.
pub fn alu_op<L: Lane>(op: AluOp, a: L, b: L, c: L, shift: u8) -> Result<L> {
    L::arith(op, a, b, c, shift)
}

pub type RegisterFile<L> = [L; NUM_REGS];

pub fn new_register_file<L: Lane>() -> RegisterFile<L> {
    [L::zero(); NUM_REGS]
}

/// A validated program bound to an element type and loop shape.
#[derive(Clone, Debug)]
pub struct Executor<'p, L: Lane> {
    prog: &'p StrategyProgram,
    a_shape: Vec<usize>,
    constants: Vec<L>,
    frac_bits: u8,
}

impl<'p, L: Lane> Executor<'p, L> {
    pub fn new(prog: &'p StrategyProgram, a_shape: &[usize], dtype: DType) -> Result<Self> {
        prog.validate()?;
        if prog.depth != a_shape.len() {
            return Err(MeritError::InvalidProgram(format!(
                "program depth {} vs accumulation rank {}",
                prog.depth,
                a_shape.len()
            )));
        }
        let frac_bits = dtype.frac_bits();
        Ok(Executor {
            prog,
            a_shape: a_shape.to_vec(),
            constants: prog.constants.iter().map(|&c| L::from_real(c, frac_bits)).collect(),
            frac_bits,
        })
    }

    pub fn program(&self) -> &StrategyProgram {
        self.prog
    }

    /// Executes the segments selected for `a_idx`. `index` is the full
    /// `(p, a)` index visible to IDX. Emitted registers are appended to `out`.
    pub fn step(
        &self,
        regs: &mut RegisterFile<L>,
        index: &[usize],
        a_idx: &[usize],
        port_a: L,
        port_b: L,
        out: &mut Vec<L>,
    ) -> Result<()> {
        let d = self.prog.depth;
        let (zeros, maxes) = trailing_counts(&self.a_shape, a_idx);
        for seg in &self.prog.segments[d - zeros..=d + maxes] {
            for ins in seg {
                let read = |o: Operand, regs: &RegisterFile<L>| match o {
                    Operand::Reg(r) => regs[r as usize],
                    Operand::PortA => port_a,
                    Operand::PortB => port_b,
                    Operand::Zero => L::zero(),
                };
                let a = read(ins.src_a, regs);
                let value = match ins.op {
                    AluOp::Idx => {
                        let i = *index.get(ins.aux as usize).ok_or_else(|| MeritError::OutOfRange {
                            index: vec![i64::from(ins.aux)],
                            shape: vec![index.len()],
                        })?;
                        L::from_index(i)
                    }
                    AluOp::Movc => self.constants[ins.aux as usize],
                    AluOp::Lut => {
                        let y = self.prog.tables[ins.aux as usize].eval(a.to_real(self.frac_bits))?;
                        L::from_real(y, self.frac_bits)
                    }
                    op => L::arith(op, a, read(ins.src_b, regs), read(ins.src_c, regs), ins.shift)?,
                };
                regs[ins.dst as usize] = value;
            }
        }
        if maxes + self.prog.emit_level > d {
            out.extend_from_slice(&regs[..self.prog.outputs]);
        }
        Ok(())
    }

    /// One complete reduction over the accumulation range.
    pub fn run(
        &self,
        p_idx: &[usize],
        mut feed_a: impl FnMut(&[usize]) -> Result<L>,
        mut feed_b: impl FnMut(&[usize]) -> Result<L>,
    ) -> Result<Vec<L>> {
        let mut regs = new_register_file();
        let mut out = Vec::with_capacity(self.prog.emits_per_reduction(&self.a_shape));
        let mut index: Vec<usize> = p_idx.to_vec();
        index.resize(p_idx.len() + self.a_shape.len(), 0);
        for a in ndrange(&self.a_shape) {
            index[p_idx.len()..].copy_from_slice(&a);
            let pa = feed_a(&a)?;
            let pb = feed_b(&a)?;
            self.step(&mut regs, &index, &a, pa, pb, &mut out)?;
        }
        Ok(out)
    }
}

/// Runs `prog` over `a_shape` with zeroed registers and per-index feeds.
pub fn rip_execute<L: Lane>(
    prog: &StrategyProgram,
    a_shape: &[usize],
    dtype: DType,
    feed_a: impl FnMut(&[usize]) -> Result<L>,
    feed_b: impl FnMut(&[usize]) -> Result<L>,
) -> Result<Vec<L>> {
    Executor::new(prog, a_shape, dtype)?.run(&[], feed_a, feed_b)
}

/// Canonical programs.
pub mod programs {
    use super::*;

    const R0: Operand = Operand::Reg(0);
    const A: Operand = Operand::PortA;
    const B: Operand = Operand::PortB;
    const Z: Operand = Operand::Zero;

    fn init_r0(depth: usize, outputs: usize) -> StrategyProgram {
        let mut p = StrategyProgram::empty(depth, outputs);
        let first = if depth == 0 { Segment::Body } else { Segment::Pre(1) };
        p.segment_mut(first).push(AluInstr::new(AluOp::Add, 0, Z, Z, Z));
        p
    }

    fn last_segment(depth: usize) -> Segment {
        if depth == 0 {
            Segment::Body
        } else {
            Segment::Post(1)
        }
    }

    /// `r0 = sum a*b`; `shift` rescales each product (FIX16 uses frac_bits).
    pub fn dot_product(depth: usize, shift: u8) -> StrategyProgram {
        let mut p = init_r0(depth, 1);
        p.segment_mut(Segment::Body).push(AluInstr::new(AluOp::Mac, 0, R0, A, B).with_shift(shift));
        p
    }

    /// `max(sum a*b, 0)`
    pub fn relu_dot(depth: usize, shift: u8) -> StrategyProgram {
        let mut p = dot_product(depth, shift);
        p.segment_mut(last_segment(depth)).push(AluInstr::new(AluOp::Max, 0, R0, Z, Z));
        p
    }

    /// `sum |a - b|`
    pub fn l1_distance(depth: usize) -> StrategyProgram {
        let mut p = init_r0(depth, 1);
        p.segment_mut(Segment::Body).push(AluInstr::new(AluOp::L1, 0, R0, A, B));
        p
    }

    /// `max a` over the range; port `b` is ignored.
    pub fn max_reduce(depth: usize) -> StrategyProgram {
        let mut p = StrategyProgram::empty(depth, 1);
        if depth > 0 {
            p.segment_mut(Segment::Pre(1)).push(AluInstr::new(AluOp::Add, 0, A, Z, Z));
        } else {
            p.segment_mut(Segment::Body).push(AluInstr::new(AluOp::Add, 0, A, Z, Z));
        }
        p.segment_mut(Segment::Body).push(AluInstr::new(AluOp::Max, 0, R0, A, Z));
        p
    }
}
