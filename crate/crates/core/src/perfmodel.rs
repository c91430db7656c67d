//! Analytic pass-latency model with prefetch overlap, folding of parallel
//! width into loop depth, and the reuse-rate comparison table.

use serde::{Deserialize, Serialize};

use crate::engine::{plan_passes, reuse_rate, TilingPlan, Workload};
use crate::error::{MeritError, Result};
use crate::rip::{AluOp, Segment};
use crate::tensor::{ndrange, DType, Element, Tensor};
use crate::view::ViewTerm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineParams {
    pub alus_per_tau: usize,
    pub taus: usize,
    /// `None` models unlimited bandwidth.
    pub dram_words_per_cycle: Option<f64>,
    /// Scratchpad words per read pipeline (inputs A and B).
    pub scratchpad_words: [usize; 2],
    /// Fixed cycles added to every pass for pipeline fill and drain.
    #[serde(default)]
    pub pass_overhead_cycles: u64,
}

impl Default for MachineParams {
    fn default() -> Self {
        MachineParams {
            alus_per_tau: 32,
            taus: 1,
            dram_words_per_cycle: Some(16.0),
            scratchpad_words: [8192, 4096],
            pass_overhead_cycles: 0,
        }
    }
}

impl MachineParams {
    pub fn alus(&self) -> usize {
        self.alus_per_tau * self.taus
    }

    pub fn check(&self) -> Result<()> {
        let ok_bw = self.dram_words_per_cycle.is_none_or(|b| b > 0.0 && b.is_finite());
        if self.alus_per_tau == 0 || self.taus == 0 || !ok_bw {
            return Err(MeritError::BadParams(format!("machine parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn compute_cycles(&self, t_p: &[usize], t_a: &[usize]) -> u64 {
        let tp: usize = t_p.iter().product();
        let ta: usize = t_a.iter().product();
        tp.div_ceil(self.alus()) as u64 * ta as u64 + self.pass_overhead_cycles
    }

    pub fn load_cycles(&self, words: u64) -> u64 {
        match self.dram_words_per_cycle {
            Some(bw) => (words as f64 / bw).ceil() as u64,
            None => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PassLatency {
    pub load: u64,
    pub compute: u64,
    /// Steady-state latency once the load overlaps the previous compute.
    pub overlapped: u64,
}

impl PassLatency {
    pub fn new(load: u64, compute: u64) -> Self {
        PassLatency { load, compute, overlapped: load.max(compute) }
    }
}

/// Latency of one interior tile: its compute and the load of both footprints.
pub fn pass_latency(w: &Workload, t_p: &[usize], t_a: &[usize], mp: &MachineParams) -> Result<PassLatency> {
    mp.check()?;
    let words = w.view_a.footprint(t_p, t_a)?.words + w.view_b.footprint(t_p, t_a)?.words;
    Ok(PassLatency::new(mp.load_cycles(words), mp.compute_cycles(t_p, t_a)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Schedule {
    pub passes: u64,
    pub macs: u64,
    pub compute_cycles: u64,
    pub load_cycles: u64,
    /// Warm-up load, overlapped body, and the final compute.
    pub total_cycles: u64,
    /// `sum max(load, compute)`: the cost with warm-up and cool-down ignored.
    pub steady_cycles: u64,
    pub utilization: f64,
    /// MACs per cycle in steady state.
    pub steady_throughput: f64,
    /// ALU-cycles not spent on a MAC, in whole-machine cycles.
    pub bubble_cycles: f64,
}

/// Double-buffered schedule: pass `i + 1` loads while pass `i` computes.
pub fn schedule(w: &Workload, plan: &TilingPlan, mp: &MachineParams) -> Result<Schedule> {
    mp.check()?;
    let passes = plan_passes(w, plan)?;
    let lat: Vec<PassLatency> = passes
        .iter()
        .map(|p| {
            PassLatency::new(mp.load_cycles(p.staged_words[0] + p.staged_words[1]), mp.compute_cycles(&p.t_p, &p.t_a))
        })
        .collect();
    let n = lat.len();
    let mut total = lat[0].load + lat[n - 1].compute;
    for i in 0..n - 1 {
        total += lat[i].compute.max(lat[i + 1].load);
    }
    let steady: u64 = lat.iter().map(|l| l.overlapped).sum();
    let macs = w.macs();
    let alus = mp.alus() as f64;
    Ok(Schedule {
        passes: n as u64,
        macs,
        compute_cycles: lat.iter().map(|l| l.compute).sum(),
        load_cycles: lat.iter().map(|l| l.load).sum(),
        total_cycles: total,
        steady_cycles: steady,
        utilization: macs as f64 / (alus * total as f64),
        steady_throughput: macs as f64 / steady as f64,
        bubble_cycles: total as f64 - macs as f64 / alus,
    })
}

/// MACs over ALU-cycles of the modeled schedule.
pub fn utilization(w: &Workload, plan: &TilingPlan, mp: &MachineParams) -> Result<f64> {
    Ok(schedule(w, plan, mp)?.utilization)
}

/// A workload with one p axis split as `p = f * (E / F) + p'`, where `f`
/// becomes a new outermost accumulation level.
#[derive(Clone, Debug)]
pub struct Folded {
    pub workload: Workload,
    /// Folded p axis, `None` when `factor == 1`.
    pub axis: Option<usize>,
    pub factor: usize,
    original_p: Vec<usize>,
    original_output: Vec<usize>,
    emits: usize,
}

fn fold_terms(terms: &[ViewTerm], np: usize, axis: usize, inner: usize) -> Vec<ViewTerm> {
    let mut out: Vec<ViewTerm> = terms
        .iter()
        .map(|t| ViewTerm { component: if t.component >= np { t.component + 1 } else { t.component }, ..*t })
        .collect();
    for t in terms.iter().filter(|t| t.component == axis) {
        out.push(ViewTerm::new(np, t.axis, t.stride * inner as i64, 0));
    }
    out
}

/// Trades parallel width for loop depth. The outermost p axis divisible by
/// `factor` is split; results are unchanged after [`Folded::unfold`].
pub fn fold(w: &Workload, factor: usize) -> Result<Folded> {
    w.check()?;
    let p = w.p_shape().to_vec();
    let base = Folded {
        workload: w.clone(),
        axis: None,
        factor,
        original_p: p.clone(),
        original_output: w.output_shape(),
        emits: w.emits_per_p(),
    };
    if factor == 1 {
        return Ok(base);
    }
    let total: usize = p.iter().product();
    let axis = (factor > 1)
        .then(|| p.iter().position(|&e| e % factor == 0))
        .flatten()
        .ok_or(MeritError::Indivisible { extent: total, factor })?;
    let np = p.len();
    let inner = p[axis] / factor;

    let mut prog = w.program.clone();
    for ins in prog.segments.iter_mut().flatten() {
        if ins.op == AluOp::Idx {
            let aux = ins.aux as usize;
            if aux == axis {
                return Err(MeritError::InvalidProgram(format!("IDX reads folded axis {axis}")));
            }
            if aux >= np {
                ins.aux += 1;
            }
        }
    }
    prog.depth += 1;
    prog.segments.insert(0, Vec::new());
    prog.segments.push(Vec::new());
    prog.emit_level += 1;
    debug_assert!(prog.segment(Segment::Pre(1)).is_empty());

    let mut wf = w.clone();
    for view in [&mut wf.view_a, &mut wf.view_b] {
        view.terms = fold_terms(&view.terms, np, axis, inner);
        view.p_shape[axis] = inner;
        view.a_shape.insert(0, factor);
    }
    wf.program = prog;
    wf.check()?;
    Ok(Folded { workload: wf, axis: Some(axis), ..base })
}

impl Folded {
    /// Tiling of the folded workload with the same p-tile width as `plan`,
    /// so each pass covers `factor` times the work. The new level is tiled
    /// whole when the original a-tile was.
    pub fn plan(&self, plan: &TilingPlan) -> TilingPlan {
        let Some(axis) = self.axis else { return plan.clone() };
        let mut t_p = plan.t_p.clone();
        t_p[axis] = t_p[axis].min(self.workload.p_shape()[axis]);
        let full = plan.t_a.as_slice() == &self.workload.a_shape()[1..];
        let mut t_a = plan.t_a.clone();
        t_a.insert(0, if full { self.factor } else { 1 });
        TilingPlan { t_p, t_a, capacity_bytes: plan.capacity_bytes }
    }

    /// Restores the original output layout from a folded result.
    pub fn unfold(&self, out: &Tensor) -> Result<Tensor> {
        let Some(axis) = self.axis else { return Ok(out.clone()) };
        let expected = self.workload.output_shape();
        if out.shape() != expected.as_slice() {
            return Err(MeritError::ShapeMismatch(format!("folded output {:?} vs {expected:?}", out.shape())));
        }
        match out.dtype() {
            DType::Real32 => self.unfold_as::<f32>(out, axis),
            DType::Fix16 { .. } => self.unfold_as::<i16>(out, axis),
        }
    }

    fn unfold_as<T: Element>(&self, out: &Tensor, axis: usize) -> Result<Tensor> {
        let src = out.as_slice::<T>().expect("dtype matches");
        let inner = self.original_p[axis] / self.factor;
        let folded_p = &self.workload.view_a.p_shape;
        let row = self.factor * self.emits;
        let mut data = Vec::with_capacity(src.len());
        for p in ndrange(&self.original_p) {
            let (f, q) = (p[axis] / inner, p[axis] % inner);
            let flat = p
                .iter()
                .enumerate()
                .zip(folded_p)
                .fold(0, |acc, ((i, &v), &e)| acc * e + if i == axis { q } else { v });
            let start = flat * row + f * self.emits;
            data.extend_from_slice(&src[start..start + self.emits]);
        }
        T::build(self.original_output.clone(), out.dtype(), data)
    }
}

/// One row of the data-reuse comparison for a 3x3 convolution pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReuseRow {
    pub architecture: &'static str,
    pub scope: &'static str,
    pub input_words: f64,
    pub kernel_words: f64,
    pub output_words: f64,
    pub macs: f64,
    /// Value as printed in the published comparison.
    pub printed: f64,
    pub computed: f64,
}

fn row(architecture: &'static str, scope: &'static str, io: [f64; 3], macs: f64, printed: f64) -> Result<ReuseRow> {
    let [input_words, kernel_words, output_words] = io;
    Ok(ReuseRow {
        architecture,
        scope,
        input_words,
        kernel_words,
        output_words,
        macs,
        printed,
        computed: reuse_rate(macs, input_words + kernel_words, output_words)?,
    })
}

/// The published comparison recomputed as MACs over input plus output
/// words. "Overall" rows stream `n` passes with the kernel resident, so its
/// words vanish as `n` grows and are listed as zero here.
pub fn reuse_table() -> Vec<ReuseRow> {
    let eyeriss_alu = [12.0, 192.0, 16.0];
    let eyeriss_pass = [12.0 * 16.0, 192.0 * 3.0, 16.0 * 14.0];
    [
        row("systolic 8x16", "1 ALU", [1.0, 1.0, 1.0], 1.0, 0.33),
        row("systolic 8x16", "overall", [8.0, 0.0, 16.0], 128.0, 5.33),
        row("eyeriss 3x14", "1 ALU", eyeriss_alu, 192.0, 0.87),
        row("eyeriss 3x14", "1 pass", eyeriss_pass, 192.0 * 3.0 * 14.0, 8.12),
        row("eyeriss 3x14", "overall", [eyeriss_pass[0], 0.0, eyeriss_pass[2]], 192.0 * 3.0 * 14.0, 19.38),
        row("merit-z 32", "1 TAU pass", [18.0 * 10.0 * 8.0, 3.0 * 3.0 * 8.0 * 16.0, 0.0], 147456.0, 78.77),
    ]
    .into_iter()
    .collect::<Result<_>>()
    .expect("table rows have nonzero traffic")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_full;
    use crate::rip::programs::dot_product;
    use crate::view::{Boundary, ViewSpec};

    fn gemm(n: usize) -> Workload {
        let a: Vec<f32> = (0..n * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let b: Vec<f32> = (0..n * n).map(|i| (i % 5) as f32 * 0.5).collect();
        Workload::new(
            ViewSpec::new(
                vec![n, n],
                vec![n, n],
                vec![n],
                vec![ViewTerm::new(0, 0, 1, 0), ViewTerm::new(2, 1, 1, 0)],
                Boundary::ZeroPad,
            )
            .unwrap(),
            ViewSpec::new(
                vec![n, n],
                vec![n, n],
                vec![n],
                vec![ViewTerm::new(2, 0, 1, 0), ViewTerm::new(1, 1, 1, 0)],
                Boundary::ZeroPad,
            )
            .unwrap(),
            Tensor::from_f32(vec![n, n], a).unwrap(),
            Tensor::from_f32(vec![n, n], b).unwrap(),
            dot_product(1, 0),
        )
        .unwrap()
    }

    #[test]
    fn max_rule() {
        assert_eq!(PassLatency::new(60, 100).overlapped, 100);
        assert_eq!(PassLatency::new(100, 60).overlapped, 100);
        let w = gemm(8);
        let mp = MachineParams { dram_words_per_cycle: None, ..MachineParams::default() };
        let l = pass_latency(&w, &[8, 8], &[8], &mp).unwrap();
        assert_eq!(l.overlapped, l.compute);
        assert_eq!(l.compute, 2 * 8);
    }

    #[test]
    fn schedule_totals() {
        let w = gemm(8);
        let mp = MachineParams { alus_per_tau: 16, dram_words_per_cycle: Some(4.0), ..MachineParams::default() };
        let s = schedule(&w, &TilingPlan::new(vec![4, 4], vec![8]), &mp).unwrap();
        // 4 passes, each: compute 8, load (32 + 32) / 4 = 16
        assert_eq!(s.passes, 4);
        assert_eq!(s.total_cycles, 16 + 3 * 16 + 8);
        assert_eq!(s.steady_cycles, 64);
        assert!((s.utilization - 512.0 / (16.0 * 72.0)).abs() < 1e-12);
    }

    #[test]
    fn fold_is_a_numerical_no_op() {
        let w = gemm(8);
        let f = fold(&w, 2).unwrap();
        assert_eq!(f.workload.p_shape(), &[4, 8]);
        assert_eq!(f.workload.a_shape(), &[2, 8]);
        let folded = run_full(&f.workload).unwrap();
        assert_eq!(folded.shape(), &[4, 8, 2]);
        assert!(f.unfold(&folded).unwrap().bit_eq(&run_full(&w).unwrap()));
        let same = fold(&w, 1).unwrap();
        assert_eq!(same.workload.p_shape(), w.p_shape());
        assert_eq!(fold(&w, 3).unwrap_err().code(), "INDIVISIBLE");
    }

    #[test]
    fn fold_plan_reduces_passes() {
        let w = gemm(8);
        let f = fold(&w, 2).unwrap();
        let plan = TilingPlan::new(vec![2, 8], vec![8]);
        let fp = f.plan(&plan);
        assert_eq!(fp.t_p, vec![2, 8]);
        assert_eq!(fp.t_a, vec![2, 8]);
        let mp = MachineParams { dram_words_per_cycle: None, pass_overhead_cycles: 20, ..MachineParams::default() };
        let before = schedule(&w, &plan, &mp).unwrap();
        let after = schedule(&f.workload, &fp, &mp).unwrap();
        assert_eq!(after.passes * 2, before.passes);
        assert!(after.bubble_cycles < before.bubble_cycles);
    }

    #[test]
    fn reuse_rows() {
        for r in reuse_table() {
            if r.architecture.starts_with("merit") {
                assert!((r.computed - 56.89).abs() < 0.01);
            } else {
                assert!((r.computed - r.printed).abs() <= 0.02, "{r:?}");
            }
        }
    }
}
