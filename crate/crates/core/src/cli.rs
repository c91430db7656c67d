//! `merit` command-line front end. Every report is JSON: pretty-printed by
//! default, a single line with `--json`. Exit status is 0 on success, 1 when
//! an analysis fails (irreducible matrix, unroutable permutation, failed
//! verification) and 2 on usage or input errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::{run_full, run_tiled, TilingPlan, Workload};
use crate::error::{MeritError, Result};
use crate::interconnect::butterfly_route;
use crate::layout::{
    default_address_bits, detect_conflicts, generate_layouts, property_matrix, reduce_to_identity, search_hash,
    TileGeometry,
};
use crate::perfmodel::{fold, reuse_table, schedule, MachineParams};
use crate::rip::StrategyProgram;
use crate::tensor::{DType, Tensor};
use crate::view::ViewSpec;
use crate::workloads::{resolve, TemplateSpec, TEMPLATES};

/// Relative tolerance for REAL32 verification against an oracle.
pub const VERIFY_RTOL: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "merit", version, about = "Gather-view tensor transforms and accelerator analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Format {
    /// Print compact single-line JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute a workload from a template or a manifest.
    Run(RunArgs),
    /// List the built-in workload templates.
    ListTemplates(Format),
    /// Source footprint of one tile.
    Footprint(FootprintArgs),
    /// Bank-conflict analysis of an affine ALU address pattern.
    Banks(BanksArgs),
    /// Route a permutation through the butterfly interconnect.
    Route(RouteArgs),
    /// Pass-level latency and utilization model.
    Pipeline(PipelineArgs),
    /// Data-reuse comparison table.
    Reuse(Format),
    /// Scratchpad layout candidates for a convolution tile.
    Layouts(LayoutArgs),
}

#[derive(Args, Debug)]
struct TemplateArgs {
    #[arg(long)]
    template: Option<String>,
    /// Comma-separated key=value pairs.
    #[arg(long, default_value = "")]
    params: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    workload: TemplateArgs,
    /// JSON manifest; replaces the template flags.
    #[arg(long, conflicts_with = "template")]
    manifest: Option<PathBuf>,
    /// Tile as `P,A` with `x`-separated extents, e.g. `16x8,5x5`.
    #[arg(long)]
    tile: Option<String>,
    /// Skip the scratchpad capacity check.
    #[arg(long)]
    unbounded: bool,
    /// Compare with the template oracle, and tiled with untiled output.
    #[arg(long)]
    verify: bool,
    /// Write the output tensor here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    format: Format,
}

#[derive(Args, Debug)]
struct FootprintArgs {
    #[command(flatten)]
    workload: TemplateArgs,
    /// View JSON file; replaces the template flags.
    #[arg(long, conflicts_with = "template")]
    view: Option<PathBuf>,
    /// Which input view of the template: `a` or `b`.
    #[arg(long, default_value = "a")]
    input: String,
    #[arg(long)]
    tile: String,
    #[command(flatten)]
    format: Format,
}

#[derive(Args, Debug)]
struct BanksArgs {
    /// Address coefficient per ALU bit, e.g. `1,6,12`.
    #[arg(long, value_delimiter = ',', required = true)]
    coeffs: Vec<u64>,
    #[arg(long, default_value_t = 8)]
    banks: usize,
    /// Address bits to analyze; defaults to the bank bits, or enough to
    /// cover the coefficient sum when searching for a hash.
    #[arg(long)]
    addr_bits: Option<usize>,
    /// Search for a bit-linear bank hash when the plain matrix fails.
    #[arg(long)]
    search_hash: bool,
    #[command(flatten)]
    format: Format,
}

#[derive(Args, Debug)]
struct RouteArgs {
    #[arg(long, default_value_t = 8)]
    banks: usize,
    /// Bank line read by each ALU, e.g. `3,4,1,2,7,0,5,6`.
    #[arg(long, value_delimiter = ',', required = true)]
    perm: Vec<usize>,
    #[command(flatten)]
    format: Format,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    workload: TemplateArgs,
    #[arg(long)]
    tile: Option<String>,
    #[arg(long)]
    unbounded: bool,
    #[arg(long, default_value_t = 32)]
    alus_per_tau: usize,
    #[arg(long, default_value_t = 1)]
    taus: usize,
    /// DRAM words per cycle, or `inf`.
    #[arg(long, default_value = "16")]
    bandwidth: String,
    #[arg(long, default_value_t = 0)]
    overhead: u64,
    /// Fold the outermost divisible p axis by this factor first.
    #[arg(long)]
    fold: Option<usize>,
    #[command(flatten)]
    format: Format,
}

#[derive(Args, Debug)]
struct LayoutArgs {
    /// Output tile as `HxW`.
    #[arg(long, default_value = "4x4")]
    tile: String,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 8)]
    banks: usize,
    #[command(flatten)]
    format: Format,
}

/// Workload reference inside a manifest: a template, or explicit files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorkloadRef {
    Template {
        template: String,
        #[serde(default)]
        params: String,
    },
    Bundle {
        src_a: PathBuf,
        src_b: PathBuf,
        view_a: PathBuf,
        view_b: PathBuf,
        program: PathBuf,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub tensor: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything needed to reproduce one `run`. Relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub workload: WorkloadRef,
    #[serde(default)]
    pub tiling: Option<TilingPlan>,
    #[serde(default)]
    pub machine: Option<MachineParams>,
    #[serde(default)]
    pub output: OutputPaths,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub verify: bool,
}

impl Manifest {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Caps the global rayon pool from `MERIT_THREADS` when set.
pub fn init_threads() {
    if let Some(n) = std::env::var("MERIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses argv, runs the command and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{text}");
                0
            } else {
                let _ = write!(err, "{text}");
                2
            };
        }
    };
    let (report, ok, compact) = match dispatch(cli.command) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error [{}]: {e}", e.code());
            return 2;
        }
    };
    let text = if compact { serde_json::to_string(&report) } else { serde_json::to_string_pretty(&report) }
        .expect("reports serialize");
    if writeln!(out, "{text}").is_err() {
        return 2;
    }
    if ok {
        0
    } else {
        1
    }
}

fn dispatch(cmd: Command) -> Result<(Value, bool, bool)> {
    match cmd {
        Command::Run(a) => {
            let compact = a.format.json;
            cmd_run(a).map(|(v, ok)| (v, ok, compact))
        }
        Command::ListTemplates(f) => {
            let list: Vec<Value> = TEMPLATES.iter().map(|(n, d)| json!({ "name": n, "description": d })).collect();
            Ok((Value::Array(list), true, f.json))
        }
        Command::Footprint(a) => cmd_footprint(&a).map(|v| (v, true, a.format.json)),
        Command::Banks(a) => cmd_banks(&a).map(|(v, ok)| (v, ok, a.format.json)),
        Command::Route(a) => cmd_route(&a).map(|(v, ok)| (v, ok, a.format.json)),
        Command::Pipeline(a) => cmd_pipeline(&a).map(|v| (v, true, a.format.json)),
        Command::Reuse(f) => Ok((cmd_reuse(), true, f.json)),
        Command::Layouts(a) => cmd_layouts(&a).map(|v| (v, true, a.format.json)),
    }
}

fn bad(msg: impl Into<String>) -> MeritError {
    MeritError::BadParams(msg.into())
}

fn parse_extents(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split('x').map(|v| v.trim().parse().map_err(|_| bad(format!("bad extent {v:?} in {s:?}")))).collect()
}

/// Parses `P,A` tiles such as `16x8,5x5`; an empty side means rank zero.
pub fn parse_tile(s: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let (p, a) = s.split_once(',').ok_or_else(|| bad(format!("tile {s:?} is not P,A")))?;
    Ok((parse_extents(p)?, parse_extents(a)?))
}

fn plan_from(tile: Option<&str>, unbounded: bool, w: &Workload) -> Result<TilingPlan> {
    let Some(t) = tile else {
        return Ok(TilingPlan::single_pass(w));
    };
    let (t_p, t_a) = parse_tile(t)?;
    let plan = if unbounded { TilingPlan::unbounded(t_p, t_a) } else { TilingPlan::new(t_p, t_a) };
    plan.check(w)?;
    Ok(plan)
}

fn template_spec(t: &TemplateArgs) -> Result<TemplateSpec> {
    let name = t.template.as_deref().ok_or_else(|| bad("--template is required"))?;
    resolve(name, &t.params)
}

/// FNV-1a over the serialized tensor, as a stable output fingerprint.
pub fn digest(t: &Tensor) -> String {
    let h =
        t.to_bytes().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    format!("{h:016x}")
}

/// Largest absolute error, and whether every element meets the REAL32
/// tolerance or, for FIX16, matches exactly.
pub fn compare(got: &Tensor, want: &Tensor) -> (f64, bool) {
    if got.shape() != want.shape() {
        return (f64::INFINITY, false);
    }
    let (g, w) = (got.to_f64_vec(), want.to_f64_vec());
    let max_err = g.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ok = match got.dtype() {
        DType::Real32 => g.iter().zip(&w).all(|(a, b)| (a - b).abs() <= VERIFY_RTOL * (1.0 + b.abs())),
        DType::Fix16 { .. } => got.bit_eq(want),
    };
    (max_err, ok)
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_bundle(base: &Path, r: &WorkloadRef) -> Result<Workload> {
    let WorkloadRef::Bundle { src_a, src_b, view_a, view_b, program } = r else {
        unreachable!("called for bundles only")
    };
    let text = |p: &PathBuf| std::fs::read_to_string(resolve_path(base, p));
    Workload::new(
        ViewSpec::from_json(&text(view_a)?)?,
        ViewSpec::from_json(&text(view_b)?)?,
        Tensor::read_file(resolve_path(base, src_a))?,
        Tensor::read_file(resolve_path(base, src_b))?,
        StrategyProgram::from_json(&text(program)?)?,
    )
}

fn cmd_run(a: RunArgs) -> Result<(Value, bool)> {
    let (manifest, base) = match &a.manifest {
        Some(path) => {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (Manifest::read(path)?, base)
        }
        None => {
            let template = a.workload.template.clone().ok_or_else(|| bad("--template or --manifest is required"))?;
            let m = Manifest {
                workload: WorkloadRef::Template { template, params: a.workload.params.clone() },
                tiling: None,
                machine: None,
                output: OutputPaths { tensor: a.out.clone(), report: None },
                seed: a.workload.seed,
                verify: a.verify,
            };
            (m, PathBuf::new())
        }
    };
    let verify = manifest.verify || a.verify;
    let (spec, inputs, w) = match &manifest.workload {
        WorkloadRef::Template { template, params } => {
            let spec = resolve(template, params)?;
            let (x, y) = spec.random_inputs(manifest.seed)?;
            let w = spec.build(x.clone(), y.clone())?;
            (Some(spec), Some((x, y)), w)
        }
        bundle => (None, None, load_bundle(&base, bundle)?),
    };
    let plan = match (&a.tile, &manifest.tiling) {
        (Some(_), _) | (None, None) => plan_from(a.tile.as_deref(), a.unbounded, &w)?,
        (None, Some(p)) => {
            p.check(&w)?;
            p.clone()
        }
    };
    let (output, traffic) = run_tiled(&w, &plan)?;

    let mut ok = true;
    let verification = if verify {
        let tiled_matches_full = output.bit_eq(&run_full(&w)?);
        ok &= tiled_matches_full;
        let oracle = match (&spec, &inputs) {
            (Some(s), Some((x, y))) => {
                let (max_abs_err, pass) = compare(&output, &s.oracle(x, y)?);
                ok &= pass;
                json!({ "max_abs_err": max_abs_err, "ok": pass })
            }
            _ => Value::Null,
        };
        json!({ "tiled_matches_full": tiled_matches_full, "oracle": oracle, "ok": ok })
    } else {
        Value::Null
    };
    let sched = match &manifest.machine {
        Some(mp) => serde_json::to_value(schedule(&w, &plan, mp)?)?,
        None => Value::Null,
    };
    let report = json!({
        "workload": match &spec {
            Some(s) => serde_json::to_value(s)?,
            None => serde_json::to_value(&manifest.workload)?,
        },
        "seed": manifest.seed,
        "dtype": w.dtype().name(),
        "p_shape": w.p_shape(),
        "a_shape": w.a_shape(),
        "output_shape": output.shape(),
        "tiling": plan,
        "traffic": traffic,
        "output_digest": digest(&output),
        "schedule": sched,
        "verify": verification,
    });
    let tensor_path = a.out.as_ref().or(manifest.output.tensor.as_ref()).map(|p| resolve_path(&base, p));
    if let Some(p) = tensor_path {
        output.write_file(p)?;
    }
    if let Some(p) = &manifest.output.report {
        std::fs::write(resolve_path(&base, p), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok((report, ok))
}

fn cmd_footprint(a: &FootprintArgs) -> Result<Value> {
    let view = match &a.view {
        Some(p) => ViewSpec::from_json(&std::fs::read_to_string(p)?)?,
        None => {
            let spec = template_spec(&a.workload)?;
            let w = spec.instantiate(a.workload.seed)?;
            match a.input.as_str() {
                "a" => w.view_a,
                "b" => w.view_b,
                other => return Err(bad(format!("--input must be a or b, got {other:?}"))),
            }
        }
    };
    let (t_p, t_a) = parse_tile(&a.tile)?;
    if t_p.len() != view.p_shape.len() || t_a.len() != view.a_shape.len() {
        return Err(MeritError::InvalidTiling(format!(
            "tile ranks ({}, {}) vs view ({}, {})",
            t_p.len(),
            t_a.len(),
            view.p_shape.len(),
            view.a_shape.len()
        )));
    }
    Ok(serde_json::to_value(view.footprint(&t_p, &t_a)?)?)
}

fn cmd_banks(a: &BanksArgs) -> Result<(Value, bool)> {
    bank_report(&a.coeffs, a.banks, a.addr_bits, a.search_hash)
}

/// Full bank-conflict analysis of one address pattern as a JSON report,
/// plus whether the pattern (or its hashed form) reduces to identity.
pub fn bank_report(coeffs: &[u64], banks: usize, addr_bits: Option<usize>, try_hash: bool) -> Result<(Value, bool)> {
    if !banks.is_power_of_two() || banks < 2 {
        return Err(bad(format!("bank count {banks} is not a power of two >= 2")));
    }
    let bb = banks.trailing_zeros() as usize;
    if coeffs.is_empty() || coeffs.len() > 16 {
        return Err(bad("between 1 and 16 coefficients are required"));
    }
    let m = addr_bits.unwrap_or_else(|| default_address_bits(coeffs, bb, try_hash));
    if m == 0 || m > 24 {
        return Err(bad(format!("{m} address bits is outside 1..=24")));
    }
    let h = property_matrix(coeffs, m);
    let plain = reduce_to_identity(&h);
    let mut hash = None;
    let mut hashed = Value::Null;
    if !plain.success && try_hash {
        if let Some(cfg) = search_hash(&h, bb) {
            let hh = cfg.apply(&h);
            hashed = json!({ "H": hh, "trace": reduce_to_identity(&hh) });
            hash = Some(cfg);
        }
    }
    let reducible = plain.success || hash.is_some();
    let conflicts = detect_conflicts(coeffs, banks, hash.as_ref(), Some(m))?;
    let report = json!({
        "coeffs": coeffs,
        "banks": banks,
        "address_bits": m,
        "H": h,
        "trace": plain,
        "hash": hash,
        "hashed": hashed,
        "conflicts": conflicts,
        "reducible": reducible,
    });
    Ok((report, reducible))
}

fn cmd_route(a: &RouteArgs) -> Result<(Value, bool)> {
    let routing = butterfly_route(a.banks, &a.perm)?;
    let ok = routing.is_routed();
    Ok((json!({ "banks": a.banks, "perm": a.perm, "routing": routing, "routed": ok }), ok))
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<Value> {
    let spec = template_spec(&a.workload)?;
    let w = spec.instantiate(a.workload.seed)?;
    let bw = match a.bandwidth.as_str() {
        "inf" => None,
        s => Some(s.parse::<f64>().map_err(|_| bad(format!("bad bandwidth {s:?}")))?),
    };
    let mp = MachineParams {
        alus_per_tau: a.alus_per_tau,
        taus: a.taus,
        dram_words_per_cycle: bw,
        pass_overhead_cycles: a.overhead,
        ..MachineParams::default()
    };
    let plan = plan_from(a.tile.as_deref(), a.unbounded, &w)?;
    let (w, plan) = match a.fold {
        Some(f) => {
            let folded = fold(&w, f)?;
            let plan = folded.plan(&plan);
            (folded.workload, plan)
        }
        None => (w, plan),
    };
    let s = schedule(&w, &plan, &mp)?;
    Ok(json!({
        "workload": spec,
        "machine": mp,
        "tiling": plan,
        "fold": a.fold,
        "load_cycles": s.load_cycles,
        "compute_cycles": s.compute_cycles,
        "utilization": s.utilization,
        "schedule": s,
    }))
}

fn cmd_reuse() -> Value {
    let rows = reuse_table();
    json!({
        "formula": "macs / (input_words + kernel_words + output_words)",
        "rows": rows,
    })
}

fn cmd_layouts(a: &LayoutArgs) -> Result<Value> {
    let hw = parse_extents(&a.tile)?;
    let [tile_h, tile_w] = hw[..] else {
        return Err(bad(format!("tile {:?} is not HxW", a.tile)));
    };
    if a.kernel == 0 {
        return Err(bad("kernel must be positive"));
    }
    let geom = TileGeometry { tile_h, tile_w, kernel: a.kernel };
    let candidates = generate_layouts(&geom, a.banks)?;
    let best = candidates.iter().filter(|c| c.conflict_free).min_by_key(|c| c.waste_words);
    Ok(json!({
        "geometry": geom,
        "patch": geom.patch(),
        "banks": a.banks,
        "candidates": candidates,
        "least_waste_conflict_free": best,
    }))
}
