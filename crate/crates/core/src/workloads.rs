//! Canonical workloads and their direct-loop reference implementations.
//!
//! Builders express each computation as two gather views and a strategy
//! program. Oracles compute the same result with plain nested loops over the
//! source tensors, in the same accumulation order and with the same
//! fixed-point rounding, so REAL32 agrees to rounding and FIX16 exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::Workload;
use crate::error::{MeritError, Result};
use crate::rip::{programs, AluInstr, AluOp, LutTable, Operand, Segment, StrategyProgram};
use crate::tensor::{DType, Element, Tensor, DEFAULT_FRAC_BITS};
use crate::view::{Boundary, ViewSpec, ViewTerm};

/// Template names with a one-line description, in listing order.
pub const TEMPLATES: &[(&str, &str)] = &[
    ("gemm", "C[m,n] = sum_k A[m,k] B[k,n]; params m, n, k"),
    ("conv2d", "zero-padded 2D convolution; params c_in, c_out, h, w, k, stride, dilation, pad, out"),
    ("dilated", "convolution with dilation 2 and no padding; conv2d params"),
    ("alexnet_conv1", "11x11 stride-4 convolution at offset -5 producing 48x55x55 from 3 channels; conv2d params"),
    ("correlation", "optical-flow correlation I1[c,y,x] * I2[c,y+dy,x+dx]; params c, h, w, d"),
    (
        "motion_estimation",
        "block SAD over a search window with edge clamping; params blocks_y, blocks_x, block, radius",
    ),
    ("bilateral", "REAL32 bilateral filter with table-driven weights; params h, w, k, sigma_s, sigma_r, lut"),
    ("maxpool", "max pooling; params c, h, w, k, stride"),
    ("relu_fused_conv", "conv2d with max(x, 0) applied in the final segment; conv2d params"),
];

/// Convolution geometry. Singleton channel axes are squeezed out of the
/// views, so a one-channel image is a rank-2 source.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvParams {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Params {
    Gemm { m: usize, n: usize, k: usize },
    Conv(ConvParams),
    Correlation { c: usize, h: usize, w: usize, d: usize },
    MotionEstimation { blocks_y: usize, blocks_x: usize, block: usize, radius: usize },
    Bilateral { h: usize, w: usize, k: usize, sigma_s: f64, sigma_r: f64, lut: usize },
    Maxpool { c: usize, h: usize, w: usize, k: usize, stride: usize },
}

/// A template resolved against its parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TemplateSpec {
    pub name: String,
    pub dtype: DType,
    pub params: Params,
}

/// Parses comma-separated `key=value` pairs.
pub fn parse_params(s: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let (k, v) =
            item.split_once('=').ok_or_else(|| MeritError::BadParams(format!("expected key=value, got {item:?}")))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(MeritError::BadParams(format!("duplicate key {:?}", k.trim())));
        }
    }
    Ok(out)
}

struct Kv(BTreeMap<String, String>);

impl Kv {
    fn get<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.0
            .remove(key)
            .map(|v| v.parse().map_err(|_| MeritError::BadParams(format!("{key}={v} is not valid"))))
            .transpose()
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn pos(&mut self, key: &str, default: usize) -> Result<usize> {
        let v = self.num(key, default)?;
        if v == 0 {
            return Err(MeritError::BadParams(format!("{key} must be positive")));
        }
        Ok(v)
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(k) => Err(MeritError::BadParams(format!("unknown parameter {k:?}"))),
            None => Ok(()),
        }
    }
}

struct ConvDefaults {
    c_in: usize,
    c_out: usize,
    hw: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    /// `None` pads by half the dilated kernel span.
    pad: Option<usize>,
    /// `None` derives the output extent from the padded input.
    out: Option<usize>,
}

fn conv_out(extent: usize, pad: usize, span: usize, stride: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < span {
        return Err(MeritError::BadParams(format!("kernel span {span} exceeds padded extent {padded}")));
    }
    Ok((padded - span) / stride + 1)
}

fn conv_params(kv: &mut Kv, d: ConvDefaults, relu: bool) -> Result<ConvParams> {
    let c_in = kv.pos("c_in", d.c_in)?;
    let c_out = kv.pos("c_out", d.c_out)?;
    let h = kv.pos("h", d.hw)?;
    let w = kv.pos("w", d.hw)?;
    let k = kv.pos("k", d.k)?;
    let stride = kv.pos("stride", d.stride)?;
    let dilation = kv.pos("dilation", d.dilation)?;
    let span = dilation * (k - 1) + 1;
    let pad = kv.num("pad", d.pad.unwrap_or((span - 1) / 2))?;
    let (out_h, out_w) = match kv.get::<usize>("out")?.or(d.out) {
        Some(0) => return Err(MeritError::BadParams("out must be positive".into())),
        Some(o) => (o, o),
        None => (conv_out(h, pad, span, stride)?, conv_out(w, pad, span, stride)?),
    };
    Ok(ConvParams { c_in, c_out, h, w, k, stride, dilation, pad, out_h, out_w, relu })
}

/// Resolves a template name and parameter string. `dtype=real32|fix16` and
/// `frac_bits` are accepted by every template.
pub fn resolve(name: &str, params: &str) -> Result<TemplateSpec> {
    let mut kv = Kv(parse_params(params)?);
    let frac_bits: u8 = kv.num("frac_bits", DEFAULT_FRAC_BITS)?;
    if frac_bits > 14 {
        return Err(MeritError::BadParams(format!("frac_bits {frac_bits} exceeds 14")));
    }
    let dtype = match kv.0.remove("dtype").as_deref() {
        None | Some("real32") => DType::Real32,
        Some("fix16") => DType::Fix16 { frac_bits },
        Some(other) => return Err(MeritError::BadParams(format!("unknown dtype {other:?}"))),
    };
    let small_conv = ConvDefaults { c_in: 1, c_out: 1, hw: 32, k: 3, stride: 1, dilation: 1, pad: None, out: None };
    let params = match name {
        "gemm" => Params::Gemm { m: kv.pos("m", 16)?, n: kv.pos("n", 16)?, k: kv.pos("k", 16)? },
        "conv2d" => Params::Conv(conv_params(&mut kv, small_conv, false)?),
        "relu_fused_conv" => Params::Conv(conv_params(&mut kv, small_conv, true)?),
        "dilated" => {
            Params::Conv(conv_params(&mut kv, ConvDefaults { dilation: 2, pad: Some(0), ..small_conv }, false)?)
        }
        "alexnet_conv1" => Params::Conv(conv_params(
            &mut kv,
            ConvDefaults { c_in: 3, c_out: 48, hw: 227, k: 11, stride: 4, dilation: 1, pad: Some(5), out: Some(55) },
            false,
        )?),
        "correlation" => {
            Params::Correlation { c: kv.pos("c", 4)?, h: kv.pos("h", 16)?, w: kv.pos("w", 16)?, d: kv.pos("d", 4)? }
        }
        "motion_estimation" => Params::MotionEstimation {
            blocks_y: kv.pos("blocks_y", 2)?,
            blocks_x: kv.pos("blocks_x", 2)?,
            block: kv.pos("block", 8)?,
            radius: kv.num("radius", 2)?,
        },
        "bilateral" => {
            if dtype != DType::Real32 {
                return Err(MeritError::BadParams("bilateral divides, so it needs REAL32".into()));
            }
            let (h, w) = (kv.pos("h", 16)?, kv.pos("w", 16)?);
            let k = kv.pos("k", 5)?;
            let sigma_s: f64 = kv.num("sigma_s", 1.5)?;
            let sigma_r: f64 = kv.num("sigma_r", 0.1)?;
            let lut = kv.num("lut", 256)?;
            if k % 2 == 0 {
                return Err(MeritError::BadParams(format!("kernel size {k} must be odd")));
            }
            if !(sigma_s > 0.0 && sigma_r > 0.0 && sigma_s.is_finite() && sigma_r.is_finite()) {
                return Err(MeritError::BadParams("sigma_s and sigma_r must be positive".into()));
            }
            if lut < 2 {
                return Err(MeritError::BadParams("lut needs at least 2 samples".into()));
            }
            Params::Bilateral { h, w, k, sigma_s, sigma_r, lut }
        }
        "maxpool" => {
            let (c, h, w) = (kv.pos("c", 1)?, kv.pos("h", 16)?, kv.pos("w", 16)?);
            let k = kv.pos("k", 2)?;
            let stride = kv.pos("stride", k)?;
            if h < k || w < k {
                return Err(MeritError::BadParams(format!("window {k} exceeds image {h}x{w}")));
            }
            Params::Maxpool { c, h, w, k, stride }
        }
        other => return Err(MeritError::UnknownTemplate(other.to_string())),
    };
    kv.finish()?;
    Ok(TemplateSpec { name: name.to_string(), dtype, params })
}

fn shift_for(dtype: DType) -> u8 {
    dtype.frac_bits()
}

fn view(source: Vec<usize>, p: Vec<usize>, a: Vec<usize>, terms: Vec<ViewTerm>, b: Boundary) -> Result<ViewSpec> {
    ViewSpec::new(source, p, a, terms, b)
}

fn t(component: usize, axis: usize, stride: i64, offset: i64) -> ViewTerm {
    ViewTerm::new(component, axis, stride, offset)
}

/// Squeezed conv layout: which channel axes exist.
struct ConvAxes {
    co: bool,
    ci: bool,
}

impl ConvParams {
    fn axes(&self) -> ConvAxes {
        ConvAxes { co: self.c_out > 1, ci: self.c_in > 1 }
    }

    fn image_shape(&self) -> Vec<usize> {
        let mut s = if self.c_in > 1 { vec![self.c_in] } else { vec![] };
        s.extend([self.h, self.w]);
        s
    }

    fn kernel_shape(&self) -> Vec<usize> {
        let ax = self.axes();
        let mut s = Vec::new();
        if ax.co {
            s.push(self.c_out);
        }
        if ax.ci {
            s.push(self.c_in);
        }
        s.extend([self.k, self.k]);
        s
    }

    fn p_shape(&self) -> Vec<usize> {
        let mut s = if self.c_out > 1 { vec![self.c_out] } else { vec![] };
        s.extend([self.out_h, self.out_w]);
        s
    }

    fn a_shape(&self) -> Vec<usize> {
        let mut s = if self.c_in > 1 { vec![self.c_in] } else { vec![] };
        s.extend([self.k, self.k]);
        s
    }

    fn views(&self) -> Result<(ViewSpec, ViewSpec)> {
        let ax = self.axes();
        let np = self.p_shape().len();
        let (py, px) = (np - 2, np - 1);
        let na = self.a_shape().len();
        let (ay, ax_) = (np + na - 2, np + na - 1);
        let (s, d, o) = (self.stride as i64, self.dilation as i64, -(self.pad as i64));
        let img_y = usize::from(ax.ci);
        let mut img_terms =
            vec![t(py, img_y, s, o), t(ay, img_y, d, 0), t(px, img_y + 1, s, o), t(ax_, img_y + 1, d, 0)];
        let mut ker_terms = Vec::new();
        let mut axis = 0;
        if ax.co {
            ker_terms.push(t(0, axis, 1, 0));
            axis += 1;
        }
        if ax.ci {
            img_terms.insert(0, t(np, 0, 1, 0));
            ker_terms.push(t(np, axis, 1, 0));
            axis += 1;
        }
        ker_terms.push(t(ay, axis, 1, 0));
        ker_terms.push(t(ax_, axis + 1, 1, 0));
        Ok((
            view(self.image_shape(), self.p_shape(), self.a_shape(), img_terms, Boundary::ZeroPad)?,
            view(self.kernel_shape(), self.p_shape(), self.a_shape(), ker_terms, Boundary::ZeroPad)?,
        ))
    }
}

impl TemplateSpec {
    /// Shapes of the two source tensors.
    pub fn input_shapes(&self) -> [Vec<usize>; 2] {
        match &self.params {
            Params::Gemm { m, n, k } => [vec![*m, *k], vec![*k, *n]],
            Params::Conv(c) => [c.image_shape(), c.kernel_shape()],
            Params::Correlation { c, h, w, .. } => [vec![*c, *h, *w], vec![*c, *h, *w]],
            Params::MotionEstimation { blocks_y, blocks_x, block, .. } => {
                let s = vec![blocks_y * block, blocks_x * block];
                [s.clone(), s]
            }
            Params::Bilateral { h, w, .. } => [vec![*h, *w], vec![*h, *w]],
            Params::Maxpool { c, h, w, .. } => [vec![*c, *h, *w], vec![1]],
        }
    }

    /// Seeded inputs: uniform in `[-1, 1)`, or `[0, 1)` for the image filters.
    pub fn random_inputs(&self, seed: u64) -> Result<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = match self.params {
            Params::Bilateral { .. } | Params::MotionEstimation { .. } => 0.0,
            _ => -1.0,
        };
        let [sa, sb] = self.input_shapes();
        let mut draw = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..1.0)).collect();
            Tensor::from_values(shape, self.dtype, &v)
        };
        let a = draw(sa)?;
        if let Params::Bilateral { .. } = self.params {
            // the standard filter guides with the image itself
            return Ok((a.clone(), a));
        }
        Ok((a, draw(sb)?))
    }

    /// Views and program for the given source tensors.
    pub fn build(&self, src_a: Tensor, src_b: Tensor) -> Result<Workload> {
        let (va, vb, prog) = self.parts()?;
        Workload::new(va, vb, src_a, src_b, prog)
    }

    /// Builds with seeded random inputs.
    pub fn instantiate(&self, seed: u64) -> Result<Workload> {
        let (a, b) = self.random_inputs(seed)?;
        self.build(a, b)
    }

    fn parts(&self) -> Result<(ViewSpec, ViewSpec, StrategyProgram)> {
        let sh = shift_for(self.dtype);
        let [sa, sb] = self.input_shapes();
        Ok(match &self.params {
            Params::Gemm { m, n, k } => {
                let (p, a) = (vec![*m, *n], vec![*k]);
                (
                    view(sa, p.clone(), a.clone(), vec![t(0, 0, 1, 0), t(2, 1, 1, 0)], Boundary::Reject)?,
                    view(sb, p, a, vec![t(2, 0, 1, 0), t(1, 1, 1, 0)], Boundary::Reject)?,
                    programs::dot_product(1, sh),
                )
            }
            Params::Conv(c) => {
                let (va, vb) = c.views()?;
                let depth = c.a_shape().len();
                let prog = if c.relu { programs::relu_dot(depth, sh) } else { programs::dot_product(depth, sh) };
                (va, vb, prog)
            }
            Params::Correlation { h, w, d, c } => {
                let (p, a) = (vec![*h, *w, *d, *d], vec![*c]);
                (
                    view(
                        sa,
                        p.clone(),
                        a.clone(),
                        vec![t(4, 0, 1, 0), t(0, 1, 1, 0), t(1, 2, 1, 0)],
                        Boundary::ZeroPad,
                    )?,
                    view(
                        sb,
                        p,
                        a,
                        vec![t(4, 0, 1, 0), t(0, 1, 1, 0), t(2, 1, 1, 0), t(1, 2, 1, 0), t(3, 2, 1, 0)],
                        Boundary::ZeroPad,
                    )?,
                    programs::dot_product(1, sh),
                )
            }
            Params::MotionEstimation { blocks_y, blocks_x, block, radius } => {
                let win = 2 * radius + 1;
                let (p, a) = (vec![*blocks_y, *blocks_x, win, win], vec![*block, *block]);
                let (b, r) = (*block as i64, -(*radius as i64));
                (
                    view(
                        sa,
                        p.clone(),
                        a.clone(),
                        vec![t(0, 0, b, 0), t(4, 0, 1, 0), t(1, 1, b, 0), t(5, 1, 1, 0)],
                        Boundary::Reject,
                    )?,
                    view(
                        sb,
                        p,
                        a,
                        vec![t(0, 0, b, 0), t(2, 0, 1, r), t(4, 0, 1, 0), t(1, 1, b, 0), t(3, 1, 1, r), t(5, 1, 1, 0)],
                        Boundary::Clamp,
                    )?,
                    programs::l1_distance(2),
                )
            }
            Params::Bilateral { h, w, k, sigma_s, sigma_r, lut } => {
                let (p, a) = (vec![*h, *w], vec![*k, *k]);
                let r = -((*k / 2) as i64);
                (
                    view(
                        sa,
                        p.clone(),
                        a.clone(),
                        vec![t(0, 0, 1, 0), t(2, 0, 1, r), t(1, 1, 1, 0), t(3, 1, 1, r)],
                        Boundary::Clamp,
                    )?,
                    view(sb, p, a, vec![t(0, 0, 1, 0), t(1, 1, 1, 0)], Boundary::Clamp)?,
                    bilateral_program(*k, *sigma_s, *sigma_r, *lut),
                )
            }
            Params::Maxpool { c, h, w, k, stride } => {
                let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
                let (p, a) = (vec![*c, oh, ow], vec![*k, *k]);
                let s = *stride as i64;
                (
                    view(
                        sa,
                        p.clone(),
                        a.clone(),
                        vec![t(0, 0, 1, 0), t(1, 1, s, 0), t(3, 1, 1, 0), t(2, 2, s, 0), t(4, 2, 1, 0)],
                        Boundary::Reject,
                    )?,
                    view(sb, p, a, vec![], Boundary::Reject)?,
                    programs::max_reduce(2),
                )
            }
        })
    }

    /// Direct-loop reference output, shaped like the workload output.
    pub fn oracle(&self, src_a: &Tensor, src_b: &Tensor) -> Result<Tensor> {
        let [sa, sb] = self.input_shapes();
        if src_a.shape() != sa || src_b.shape() != sb {
            return Err(MeritError::ShapeMismatch(format!(
                "expected inputs {sa:?} and {sb:?}, got {:?} and {:?}",
                src_a.shape(),
                src_b.shape()
            )));
        }
        if src_a.dtype() != self.dtype || src_b.dtype() != self.dtype {
            return Err(MeritError::ShapeMismatch(format!("inputs must be {}", self.dtype.name())));
        }
        match self.dtype {
            DType::Real32 => oracle_typed::<f32>(self, src_a, src_b),
            DType::Fix16 { .. } => oracle_typed::<i16>(self, src_a, src_b),
        }
    }
}

/// Bilateral program. Port `a` is the clamped neighbour, port `b` the centre
/// of the guide image, which is the input itself for the standard filter.
///
/// ```text
/// Pre_1:  r1 = 0; r2 = 0
/// Body:   r3 = range_lut(a - b)
///         r6 = space_lut(dy) * space_lut(dx) * r3
///         r2 += r6; r1 += r6 * a
/// Post_1: r0 = r1 / r2
/// ```
pub fn bilateral_program(k: usize, sigma_s: f64, sigma_r: f64, lut: usize) -> StrategyProgram {
    use Operand::{PortA as A, PortB as B, Reg, Zero as Z};
    let mut p = StrategyProgram::empty(2, 1);
    let radius = (k / 2) as f64;
    p.tables.push(LutTable::sampled(-1.0, 1.0, lut, |d| gauss(d, sigma_r)));
    p.tables.push(LutTable::sampled(0.0, (k - 1) as f64, k, |i| gauss(i - radius, sigma_s)));
    let pre = p.segment_mut(Segment::Pre(1));
    pre.push(AluInstr::new(AluOp::Add, 1, Z, Z, Z));
    pre.push(AluInstr::new(AluOp::Add, 2, Z, Z, Z));
    let body = p.segment_mut(Segment::Body);
    body.push(AluInstr::new(AluOp::Sub, 3, Z, A, B));
    body.push(AluInstr::new(AluOp::Lut, 3, Reg(3), Z, Z).with_aux(0));
    body.push(AluInstr::new(AluOp::Idx, 4, Z, Z, Z).with_aux(2));
    body.push(AluInstr::new(AluOp::Lut, 4, Reg(4), Z, Z).with_aux(1));
    body.push(AluInstr::new(AluOp::Idx, 5, Z, Z, Z).with_aux(3));
    body.push(AluInstr::new(AluOp::Lut, 5, Reg(5), Z, Z).with_aux(1));
    body.push(AluInstr::new(AluOp::Mac, 6, Z, Reg(4), Reg(5)));
    body.push(AluInstr::new(AluOp::Mac, 6, Z, Reg(6), Reg(3)));
    body.push(AluInstr::new(AluOp::Add, 2, Reg(2), Reg(6), Z));
    body.push(AluInstr::new(AluOp::Mac, 1, Reg(1), Reg(6), A));
    p.segment_mut(Segment::Post(1)).push(AluInstr::new(AluOp::Div, 0, Reg(1), Reg(2), Z));
    p
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp()
}

/// Arithmetic the oracles need, written out independently of the ALU model.
trait Num: Element + PartialOrd {
    const ZERO: Self;
    fn mac(acc: Self, x: Self, y: Self, shift: u8) -> Self;
    fn l1(acc: Self, x: Self, y: Self) -> Self;
    fn to_f32(self) -> f32;
}

impl Num for f32 {
    const ZERO: f32 = 0.0;
    fn mac(acc: f32, x: f32, y: f32, _shift: u8) -> f32 {
        acc + x * y
    }
    fn l1(acc: f32, x: f32, y: f32) -> f32 {
        acc + (x - y).abs()
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Num for i16 {
    const ZERO: i16 = 0;
    fn mac(acc: i16, x: i16, y: i16, shift: u8) -> i16 {
        let prod = (i32::from(x) * i32::from(y)).div_euclid(1 << shift);
        (i32::from(acc) + prod).clamp(-32768, 32767) as i16
    }
    fn l1(acc: i16, x: i16, y: i16) -> i16 {
        (i32::from(acc) + (i32::from(x) - i32::from(y)).abs()).clamp(-32768, 32767) as i16
    }
    fn to_f32(self) -> f32 {
        f32::from(self)
    }
}

/// Row-major reader with zero fill outside the tensor.
struct Src<'t, T> {
    data: &'t [T],
    shape: &'t [usize],
}

impl<'t, T: Num> Src<'t, T> {
    fn new(t: &'t Tensor) -> Self {
        Src { data: T::slice(t).expect("dtype checked by caller"), shape: t.shape() }
    }

    fn get(&self, idx: &[i64]) -> T {
        let mut off = 0usize;
        for (&i, &e) in idx.iter().zip(self.shape) {
            if i < 0 || i as usize >= e {
                return T::ZERO;
            }
            off = off * e + i as usize;
        }
        self.data[off]
    }

    fn clamped(&self, idx: &[i64]) -> T {
        let c: Vec<i64> = idx.iter().zip(self.shape).map(|(&i, &e)| i.clamp(0, e as i64 - 1)).collect();
        self.get(&c)
    }
}

fn oracle_typed<T: Num>(spec: &TemplateSpec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sh = shift_for(spec.dtype);
    let (x, y) = (Src::<T>::new(a), Src::<T>::new(b));
    let mut out = Vec::new();
    let shape = match &spec.params {
        Params::Gemm { m, n, k } => {
            for i in 0..*m as i64 {
                for j in 0..*n as i64 {
                    let mut acc = T::ZERO;
                    for l in 0..*k as i64 {
                        acc = T::mac(acc, x.get(&[i, l]), y.get(&[l, j]), sh);
                    }
                    out.push(acc);
                }
            }
            vec![*m, *n]
        }
        Params::Conv(c) => {
            let (s, d, pad) = (c.stride as i64, c.dilation as i64, c.pad as i64);
            for co in 0..c.c_out as i64 {
                for oy in 0..c.out_h as i64 {
                    for ox in 0..c.out_w as i64 {
                        let mut acc = T::ZERO;
                        for ci in 0..c.c_in as i64 {
                            for ky in 0..c.k as i64 {
                                for kx in 0..c.k as i64 {
                                    let iy = oy * s - pad + ky * d;
                                    let ix = ox * s - pad + kx * d;
                                    let px = if c.c_in > 1 { x.get(&[ci, iy, ix]) } else { x.get(&[iy, ix]) };
                                    let kw = match (c.c_out > 1, c.c_in > 1) {
                                        (true, true) => y.get(&[co, ci, ky, kx]),
                                        (true, false) => y.get(&[co, ky, kx]),
                                        (false, true) => y.get(&[ci, ky, kx]),
                                        (false, false) => y.get(&[ky, kx]),
                                    };
                                    acc = T::mac(acc, px, kw, sh);
                                }
                            }
                        }
                        if c.relu && acc < T::ZERO {
                            acc = T::ZERO;
                        }
                        out.push(acc);
                    }
                }
            }
            c.p_shape()
        }
        Params::Correlation { c, h, w, d } => {
            for py in 0..*h as i64 {
                for px in 0..*w as i64 {
                    for dy in 0..*d as i64 {
                        for dx in 0..*d as i64 {
                            let mut acc = T::ZERO;
                            for ch in 0..*c as i64 {
                                acc = T::mac(acc, x.get(&[ch, py, px]), y.get(&[ch, py + dy, px + dx]), sh);
                            }
                            out.push(acc);
                        }
                    }
                }
            }
            vec![*h, *w, *d, *d]
        }
        Params::MotionEstimation { blocks_y, blocks_x, block, radius } => {
            let (bs, r) = (*block as i64, *radius as i64);
            for by in 0..*blocks_y as i64 {
                for bx in 0..*blocks_x as i64 {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let mut acc = T::ZERO;
                            for yy in 0..bs {
                                for xx in 0..bs {
                                    let (cy, cx) = (by * bs + yy, bx * bs + xx);
                                    acc = T::l1(acc, x.get(&[cy, cx]), y.clamped(&[cy + dy, cx + dx]));
                                }
                            }
                            out.push(acc);
                        }
                    }
                }
            }
            let win = 2 * radius + 1;
            vec![*blocks_y, *blocks_x, win, win]
        }
        Params::Bilateral { h, w, k, sigma_s, sigma_r, lut } => {
            let vals = bilateral_oracle(&x, &y, *h, *w, *k, *sigma_s, *sigma_r, *lut)?;
            return Tensor::from_f32(vec![*h, *w], vals);
        }
        Params::Maxpool { c, h, w, k, stride } => {
            let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
            let s = *stride as i64;
            for ch in 0..*c as i64 {
                for oy in 0..oh as i64 {
                    for ox in 0..ow as i64 {
                        let mut m = x.get(&[ch, oy * s, ox * s]);
                        for ky in 0..*k as i64 {
                            for kx in 0..*k as i64 {
                                let v = x.get(&[ch, oy * s + ky, ox * s + kx]);
                                if v > m {
                                    m = v;
                                }
                            }
                        }
                        out.push(m);
                    }
                }
            }
            vec![*c, oh, ow]
        }
    };
    T::build(shape, spec.dtype, out)
}

/// Piecewise-linear sample of `f` on `n` uniform points over `[lo, hi]`.
fn interp(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64, x: f64) -> Result<f64> {
    if !(lo..=hi).contains(&x) {
        return Err(MeritError::LutRange { input: x, lo, hi });
    }
    let step = (hi - lo) / (n - 1) as f64;
    let pos = (x - lo) / (hi - lo) * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 2);
    let (y0, y1) = (f(lo + step * i as f64), f(lo + step * (i + 1) as f64));
    Ok(y0 + (y1 - y0) * (pos - i as f64))
}

#[allow(clippy::too_many_arguments)]
fn bilateral_oracle<T: Num>(
    img: &Src<T>,
    guide: &Src<T>,
    h: usize,
    w: usize,
    k: usize,
    sigma_s: f64,
    sigma_r: f64,
    lut: usize,
) -> Result<Vec<f32>> {
    let r = (k / 2) as i64;
    let space: Vec<f32> = (0..k).map(|i| gauss(i as f64 - r as f64, sigma_s) as f32).collect();
    let mut out = Vec::with_capacity(h * w);
    for py in 0..h as i64 {
        for px in 0..w as i64 {
            let centre = guide.get(&[py, px]).to_f32();
            let (mut num, mut den) = (0f32, 0f32);
            for dy in 0..k {
                for dx in 0..k {
                    let v = img.clamped(&[py + dy as i64 - r, px + dx as i64 - r]).to_f32();
                    let diff = v - centre;
                    let range = interp(-1.0, 1.0, lut, |d| gauss(d, sigma_r), f64::from(diff))? as f32;
                    let wgt = space[dy] * space[dx] * range;
                    den += wgt;
                    num += wgt * v;
                }
            }
            if den == 0.0 {
                return Err(MeritError::DivByZero);
            }
            out.push(num / den);
        }
    }
    Ok(out)
}

/// Resolves a template and builds it with seeded random inputs.
pub fn build(name: &str, params: &str, seed: u64) -> Result<Workload> {
    resolve(name, params)?.instantiate(seed)
}
