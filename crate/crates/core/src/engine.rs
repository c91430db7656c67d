//! Evaluation of `vec(C) = R(M(A), M(B))`: every row of the two views is
//! reduced by one strategy program. `run_full` gathers straight from the
//! sources; `run_tiled` stages footprint boxes in a simulated scratchpad and
//! accounts the words moved.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeritError, Result};
use crate::rip::{new_register_file, Executor, Lane, RegisterFile, StrategyProgram};
use crate::tensor::{ndrange, unravel, DType, Element, Tensor};
use crate::view::{Boundary, FootprintBox, ViewSpec};

/// Default scratchpad capacities in bytes for inputs A and B.
pub const DEFAULT_SCRATCHPAD_BYTES: [usize; 2] = [16 * 1024, 8 * 1024];

#[derive(Clone, Debug)]
pub struct Workload {
    pub view_a: ViewSpec,
    pub view_b: ViewSpec,
    pub src_a: Tensor,
    pub src_b: Tensor,
    pub program: StrategyProgram,
}

impl Workload {
    pub fn new(
        view_a: ViewSpec,
        view_b: ViewSpec,
        src_a: Tensor,
        src_b: Tensor,
        program: StrategyProgram,
    ) -> Result<Self> {
        let w = Workload { view_a, view_b, src_a, src_b, program };
        w.check()?;
        Ok(w)
    }

    pub fn check(&self) -> Result<()> {
        let mismatch = |m: String| Err(MeritError::ShapeMismatch(m));
        self.view_a.check()?;
        self.view_b.check()?;
        if self.view_a.p_shape != self.view_b.p_shape || self.view_a.a_shape != self.view_b.a_shape {
            return mismatch(format!(
                "views disagree: A ({:?}, {:?}) vs B ({:?}, {:?})",
                self.view_a.p_shape, self.view_a.a_shape, self.view_b.p_shape, self.view_b.a_shape
            ));
        }
        for (view, src, name) in [(&self.view_a, &self.src_a, "A"), (&self.view_b, &self.src_b, "B")] {
            if view.source_shape != src.shape() {
                return mismatch(format!("source {name} is {:?}, view expects {:?}", src.shape(), view.source_shape));
            }
        }
        if self.src_a.dtype() != self.src_b.dtype() {
            return mismatch(format!("dtypes differ: {} vs {}", self.src_a.dtype().name(), self.src_b.dtype().name()));
        }
        self.program.validate()?;
        if self.program.depth != self.a_shape().len() {
            return Err(MeritError::InvalidProgram(format!(
                "program depth {} vs accumulation rank {}",
                self.program.depth,
                self.a_shape().len()
            )));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.src_a.dtype()
    }

    pub fn p_shape(&self) -> &[usize] {
        &self.view_a.p_shape
    }

    pub fn a_shape(&self) -> &[usize] {
        &self.view_a.a_shape
    }

    /// Values emitted per output position `p`.
    pub fn emits_per_p(&self) -> usize {
        self.program.emits_per_reduction(self.a_shape())
    }

    /// `p_shape`, with a trailing axis when more than one value is emitted per `p`.
    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.p_shape().to_vec();
        let e = self.emits_per_p();
        if e > 1 || shape.is_empty() {
            shape.push(e);
        }
        shape
    }

    pub fn macs(&self) -> u64 {
        let p: u64 = self.p_shape().iter().map(|&e| e as u64).product();
        let a: u64 = self.a_shape().iter().map(|&e| e as u64).product();
        p * a
    }
}

fn default_capacity() -> Option<[usize; 2]> {
    Some(DEFAULT_SCRATCHPAD_BYTES)
}

/// Output-stationary tiling: a-tiles run innermost so partial sums stay in
/// registers across passes. Edge tiles are clipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub t_p: Vec<usize>,
    pub t_a: Vec<usize>,
    /// Scratchpad bytes per input; `None` disables the overflow check.
    #[serde(default = "default_capacity")]
    pub capacity_bytes: Option<[usize; 2]>,
}

impl TilingPlan {
    pub fn new(t_p: Vec<usize>, t_a: Vec<usize>) -> Self {
        TilingPlan { t_p, t_a, capacity_bytes: default_capacity() }
    }

    pub fn unbounded(t_p: Vec<usize>, t_a: Vec<usize>) -> Self {
        TilingPlan { t_p, t_a, capacity_bytes: None }
    }

    /// One pass covering everything.
    pub fn single_pass(w: &Workload) -> Self {
        TilingPlan::unbounded(w.p_shape().to_vec(), w.a_shape().to_vec())
    }

    /// Checks ranks and extents, and that every a-tile is a contiguous run of
    /// the row-major accumulation order: `(1, .., 1, t_j, full, .., full)`.
    /// Other shapes would reorder the reduction and change results.
    pub fn check(&self, w: &Workload) -> Result<()> {
        let bad = |m: String| Err(MeritError::InvalidTiling(m));
        let (p, a) = (w.p_shape(), w.a_shape());
        if self.t_p.len() != p.len() || self.t_a.len() != a.len() {
            return bad(format!(
                "tile ranks ({}, {}) vs workload ({}, {})",
                self.t_p.len(),
                self.t_a.len(),
                p.len(),
                a.len()
            ));
        }
        let pairs = self.t_p.iter().zip(p).chain(self.t_a.iter().zip(a));
        if pairs.clone().any(|(&t, &e)| t == 0 || t > e) {
            return bad(format!("tile ({:?}, {:?}) does not fit ({p:?}, {a:?})", self.t_p, self.t_a));
        }
        if let Some(j) = (0..a.len()).rev().find(|&i| self.t_a[i] < a[i]) {
            if self.t_a[..j].iter().any(|&t| t != 1) {
                return bad(format!("a-tile {:?} is not contiguous in row-major order over {a:?}", self.t_a));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    /// Words fetched from DRAM per input, summed over passes.
    pub dram_read_words: [u64; 2],
    pub dram_write_words: u64,
    /// Largest box staged at once per input.
    pub scratchpad_peak_words: [u64; 2],
    pub passes: u64,
    pub macs: u64,
}

impl TrafficReport {
    fn merge(&mut self, o: &TrafficReport) {
        for i in 0..2 {
            self.dram_read_words[i] += o.dram_read_words[i];
            self.scratchpad_peak_words[i] = self.scratchpad_peak_words[i].max(o.scratchpad_peak_words[i]);
        }
        self.passes += o.passes;
    }

    pub fn total_read_words(&self) -> u64 {
        self.dram_read_words.iter().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Gathers directly from a source tensor.
struct Direct<'a, L> {
    view: &'a ViewSpec,
    data: &'a [L],
    strides: Vec<usize>,
    x: Vec<i64>,
}

impl<'a, L: Lane> Direct<'a, L> {
    fn new(view: &'a ViewSpec, data: &'a [L]) -> Self {
        let strides = row_major_strides(&view.source_shape);
        Direct { view, data, strides, x: vec![0; view.source_shape.len()] }
    }

    fn fetch(&mut self, k: &[usize]) -> Result<L> {
        self.view.source_coords(k, &mut self.x);
        if self.view.resolve(&mut self.x)?.is_none() {
            return Ok(L::zero());
        }
        let off: usize = self.x.iter().zip(&self.strides).map(|(&v, &s)| v as usize * s).sum();
        Ok(self.data[off])
    }
}

/// A footprint box copied into local storage; gathers outside it fail.
struct Staged<'a, L> {
    view: &'a ViewSpec,
    region: Option<FootprintBox>,
    data: Vec<L>,
    strides: Vec<usize>,
    x: Vec<i64>,
}

impl<'a, L: Lane> Staged<'a, L> {
    fn load(view: &'a ViewSpec, src: &[L], region: Option<FootprintBox>) -> Self {
        let src_strides = row_major_strides(&view.source_shape);
        let (data, strides) = match &region {
            Some(b) => {
                let mut data = Vec::with_capacity(b.words() as usize);
                for local in ndrange(&b.extents) {
                    let off: usize = local
                        .iter()
                        .zip(&b.origin)
                        .zip(&src_strides)
                        .map(|((&l, &o), &s)| (l as i64 + o) as usize * s)
                        .sum();
                    data.push(src[off]);
                }
                (data, row_major_strides(&b.extents))
            }
            None => (Vec::new(), Vec::new()),
        };
        Staged { view, region, data, strides, x: vec![0; view.source_shape.len()] }
    }

    fn fetch(&mut self, k: &[usize]) -> Result<L> {
        self.view.source_coords(k, &mut self.x);
        if self.view.resolve(&mut self.x)?.is_none() {
            return Ok(L::zero());
        }
        match &self.region {
            Some(b) if b.contains(&self.x) => {
                let off: usize =
                    self.x.iter().zip(&b.origin).zip(&self.strides).map(|((&v, &o), &s)| (v - o) as usize * s).sum();
                Ok(self.data[off])
            }
            _ => Err(MeritError::OutOfFootprint { index: self.x.clone() }),
        }
    }
}

/// Staged words for one input: the box clipped to what the source holds.
fn staged_region(view: &ViewSpec, b: &FootprintBox) -> Option<FootprintBox> {
    match view.boundary {
        Boundary::ZeroPad | Boundary::Reject => b.clip(&view.source_shape),
        Boundary::Clamp => Some(b.clamp_into(&view.source_shape)),
    }
}

fn slices<L: Element>(w: &Workload) -> (&[L], &[L]) {
    (w.src_a.as_slice::<L>().expect("dtype checked"), w.src_b.as_slice::<L>().expect("dtype checked"))
}

fn full_impl<L: Lane + Element>(w: &Workload) -> Result<Tensor> {
    let exec = Executor::<L>::new(&w.program, w.a_shape(), w.dtype())?;
    let (sa, sb) = slices::<L>(w);
    let p_shape = w.p_shape();
    let np = p_shape.len();
    let emits = w.emits_per_p();
    let rows: usize = p_shape.iter().product();
    let mut out = vec![L::zero(); rows * emits];
    out.par_chunks_mut(emits).enumerate().try_for_each(|(row, dst)| -> Result<()> {
        let mut ga = Direct::new(&w.view_a, sa);
        let mut gb = Direct::new(&w.view_b, sb);
        let mut index = vec![0usize; np + w.a_shape().len()];
        unravel(p_shape, row, &mut index[..np]);
        let mut regs = new_register_file::<L>();
        let mut emitted = Vec::with_capacity(emits);
        for a in ndrange(w.a_shape()) {
            index[np..].copy_from_slice(&a);
            let va = ga.fetch(&index)?;
            let vb = gb.fetch(&index)?;
            exec.step(&mut regs, &index, &a, va, vb, &mut emitted)?;
        }
        dst.copy_from_slice(&emitted);
        Ok(())
    })?;
    L::build(w.output_shape(), w.dtype(), out)
}

/// Evaluates every output row with a row-major sweep over the accumulation range.
pub fn run_full(w: &Workload) -> Result<Tensor> {
    w.check()?;
    match w.dtype() {
        DType::Real32 => full_impl::<f32>(w),
        DType::Fix16 { .. } => full_impl::<i16>(w),
    }
}

fn tile_origins(shape: &[usize], tile: &[usize]) -> Vec<Vec<usize>> {
    let counts: Vec<usize> = shape.iter().zip(tile).map(|(&e, &t)| e.div_ceil(t)).collect();
    ndrange(&counts).map(|c| c.iter().zip(tile).map(|(&i, &t)| i * t).collect()).collect()
}

fn clipped(origin: &[usize], tile: &[usize], shape: &[usize]) -> Vec<usize> {
    origin.iter().zip(tile).zip(shape).map(|((&o, &t), &e)| t.min(e - o)).collect()
}

struct PTileResult<L> {
    rows: Vec<(usize, Vec<L>)>,
    report: TrafficReport,
}

fn p_tile<L: Lane + Element>(
    w: &Workload,
    exec: &Executor<'_, L>,
    plan: &TilingPlan,
    p0: &[usize],
) -> Result<PTileResult<L>> {
    let (p_shape, a_shape) = (w.p_shape(), w.a_shape());
    let np = p_shape.len();
    let tp = clipped(p0, &plan.t_p, p_shape);
    let views = [&w.view_a, &w.view_b];
    let (sa, sb) = slices::<L>(w);
    let word_bytes = w.dtype().word_bytes();

    let p_list: Vec<Vec<usize>> = ndrange(&tp).map(|l| l.iter().zip(p0).map(|(&i, &o)| i + o).collect()).collect();
    let mut state: Vec<(RegisterFile<L>, Vec<L>)> = p_list.iter().map(|_| (new_register_file(), Vec::new())).collect();
    let mut report = TrafficReport::default();
    let mut index = vec![0usize; np + a_shape.len()];

    for a0 in tile_origins(a_shape, &plan.t_a) {
        let ta = clipped(&a0, &plan.t_a, a_shape);
        let k0: Vec<usize> = p0.iter().chain(&a0).copied().collect();
        let mut regions = Vec::with_capacity(2);
        for (i, view) in views.iter().enumerate() {
            let region = staged_region(view, &view.footprint_box(&k0, &tp, &ta)?);
            let words = region.as_ref().map_or(0, FootprintBox::words);
            if let Some(cap) = plan.capacity_bytes {
                let needed = words as usize * word_bytes;
                if needed > cap[i] {
                    return Err(MeritError::ScratchpadOverflow { input: i, needed, capacity: cap[i] });
                }
            }
            report.dram_read_words[i] += words;
            report.scratchpad_peak_words[i] = report.scratchpad_peak_words[i].max(words);
            regions.push(region);
        }
        report.passes += 1;
        let rb = regions.pop().expect("two regions");
        let ra = regions.pop().expect("two regions");
        let mut stage_a = Staged::load(&w.view_a, sa, ra);
        let mut stage_b = Staged::load(&w.view_b, sb, rb);

        for (p, (regs, emitted)) in p_list.iter().zip(state.iter_mut()) {
            index[..np].copy_from_slice(p);
            for local in ndrange(&ta) {
                for (dst, (&l, &o)) in index[np..].iter_mut().zip(local.iter().zip(&a0)) {
                    *dst = l + o;
                }
                let va = stage_a.fetch(&index)?;
                let vb = stage_b.fetch(&index)?;
                exec.step(regs, &index, &index[np..], va, vb, emitted)?;
            }
        }
    }
    let rows = p_list
        .iter()
        .zip(state)
        .map(|(p, (_, emitted))| {
            let flat = p.iter().zip(p_shape).fold(0, |acc, (&i, &e)| acc * e + i);
            (flat, emitted)
        })
        .collect();
    Ok(PTileResult { rows, report })
}

fn tiled_impl<L: Lane + Element>(w: &Workload, plan: &TilingPlan) -> Result<(Tensor, TrafficReport)> {
    let exec = Executor::<L>::new(&w.program, w.a_shape(), w.dtype())?;
    let origins = tile_origins(w.p_shape(), &plan.t_p);
    let results: Vec<PTileResult<L>> =
        origins.par_iter().map(|p0| p_tile(w, &exec, plan, p0)).collect::<Result<_>>()?;

    let emits = w.emits_per_p();
    let rows: usize = w.p_shape().iter().product();
    let mut out = vec![L::zero(); rows * emits];
    let mut report = TrafficReport::default();
    for r in &results {
        report.merge(&r.report);
        for (flat, emitted) in &r.rows {
            out[flat * emits..(flat + 1) * emits].copy_from_slice(emitted);
        }
    }
    report.dram_write_words = out.len() as u64;
    report.macs = w.macs();
    Ok((L::build(w.output_shape(), w.dtype(), out)?, report))
}

/// Tiled evaluation with scratchpad staging. Results match [`run_full`]
/// bit for bit because the accumulation order is unchanged.
pub fn run_tiled(w: &Workload, plan: &TilingPlan) -> Result<(Tensor, TrafficReport)> {
    w.check()?;
    plan.check(w)?;
    match w.dtype() {
        DType::Real32 => tiled_impl::<f32>(w, plan),
        DType::Fix16 { .. } => tiled_impl::<i16>(w, plan),
    }
}

/// Shape and staged traffic of one pass, in execution order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PassInfo {
    pub p0: Vec<usize>,
    pub a0: Vec<usize>,
    /// Tile extents after clipping at the range edges.
    pub t_p: Vec<usize>,
    pub t_a: Vec<usize>,
    /// Words fetched per input, as counted by [`run_tiled`].
    pub staged_words: [u64; 2],
}

/// Enumerates the passes of `plan` without evaluating anything.
pub fn plan_passes(w: &Workload, plan: &TilingPlan) -> Result<Vec<PassInfo>> {
    w.check()?;
    plan.check(w)?;
    let (p_shape, a_shape) = (w.p_shape(), w.a_shape());
    let a_origins = tile_origins(a_shape, &plan.t_a);
    let mut out = Vec::new();
    for p0 in tile_origins(p_shape, &plan.t_p) {
        let tp = clipped(&p0, &plan.t_p, p_shape);
        for a0 in &a_origins {
            let ta = clipped(a0, &plan.t_a, a_shape);
            let k0: Vec<usize> = p0.iter().chain(a0).copied().collect();
            let mut staged_words = [0u64; 2];
            for (i, view) in [&w.view_a, &w.view_b].into_iter().enumerate() {
                let region = staged_region(view, &view.footprint_box(&k0, &tp, &ta)?);
                staged_words[i] = region.as_ref().map_or(0, FootprintBox::words);
            }
            out.push(PassInfo { p0: p0.clone(), a0: a0.clone(), t_p: tp.clone(), t_a: ta, staged_words });
        }
    }
    Ok(out)
}

/// Words per input of the eagerly unrolled matrix: `prod(p) * prod(a)`.
pub fn naive_unrolled_words(w: &Workload) -> u64 {
    w.macs()
}

/// MACs per word moved.
pub fn reuse_rate(macs: f64, in_words: f64, out_words: f64) -> Result<f64> {
    let denom = in_words + out_words;
    if denom <= 0.0 {
        return Err(MeritError::DivByZero);
    }
    Ok(macs / denom)
}
