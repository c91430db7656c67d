//! Declarative gather views.
//!
//! A [`ViewSpec`] maps a concatenated index `k = (p, a)` onto a source
//! tensor: source coordinate `x_i` is the sum of `k_j * stride_j + offset_j`
//! over every term whose target axis is `i`. Axes with no term sit at 0.
//! Rows of the virtual matrix are the row-major flattening of `p`, columns
//! the row-major flattening of `a`.

use serde::{Deserialize, Serialize};

use crate::error::{MeritError, Result};
use crate::tensor::{ndrange, row_major_offset, DType, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Boundary {
    /// Out-of-range coordinates read as zero.
    #[default]
    ZeroPad,
    /// Each coordinate is clamped into `[0, extent - 1]`.
    Clamp,
    /// Out-of-range coordinates are an error.
    Reject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewTerm {
    /// Position in the concatenated `(p, a)` index.
    pub component: usize,
    /// Source axis receiving the contribution.
    pub axis: usize,
    pub stride: i64,
    pub offset: i64,
}

impl ViewTerm {
    pub fn new(component: usize, axis: usize, stride: i64, offset: i64) -> Self {
        ViewTerm { component, axis, stride, offset }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewSpec {
    pub source_shape: Vec<usize>,
    pub p_shape: Vec<usize>,
    pub a_shape: Vec<usize>,
    pub terms: Vec<ViewTerm>,
    #[serde(default)]
    pub boundary: Boundary,
}

/// Minimal source box touched by one tile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub per_axis: Vec<usize>,
    pub words: u64,
}

/// A footprint placed at a concrete tile origin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FootprintBox {
    pub origin: Vec<i64>,
    pub extents: Vec<usize>,
}

impl FootprintBox {
    pub fn words(&self) -> u64 {
        self.extents.iter().map(|&e| e as u64).product()
    }

    /// Intersection with `[0, shape)`; `None` when empty.
    pub fn clip(&self, shape: &[usize]) -> Option<FootprintBox> {
        let mut origin = Vec::with_capacity(shape.len());
        let mut extents = Vec::with_capacity(shape.len());
        for ((&o, &e), &s) in self.origin.iter().zip(&self.extents).zip(shape) {
            let lo = o.max(0);
            let hi = (o + e as i64).min(s as i64);
            if hi <= lo {
                return None;
            }
            origin.push(lo);
            extents.push((hi - lo) as usize);
        }
        Some(FootprintBox { origin, extents })
    }

    /// Box whose bounds are clamped into `[0, shape)`; never empty.
    pub fn clamp_into(&self, shape: &[usize]) -> FootprintBox {
        let mut origin = Vec::with_capacity(shape.len());
        let mut extents = Vec::with_capacity(shape.len());
        for ((&o, &e), &s) in self.origin.iter().zip(&self.extents).zip(shape) {
            let top = s as i64 - 1;
            let lo = o.clamp(0, top);
            let hi = (o + e as i64 - 1).clamp(0, top);
            origin.push(lo);
            extents.push((hi - lo + 1) as usize);
        }
        FootprintBox { origin, extents }
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.iter().zip(&self.origin).zip(&self.extents).all(|((&xi, &o), &e)| xi >= o && xi < o + e as i64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosticKind {
    AxisOutOfRange,
    ComponentOutOfRange,
    ZeroExtent,
    /// An accumulation component with no term: the view is constant along it.
    InfoBroadcast,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub detail: String,
}

impl Diagnostic {
    pub fn is_error(&self) -> bool {
        self.kind != DiagnosticKind::InfoBroadcast
    }
}

impl ViewSpec {
    pub fn new(
        source_shape: Vec<usize>,
        p_shape: Vec<usize>,
        a_shape: Vec<usize>,
        terms: Vec<ViewTerm>,
        boundary: Boundary,
    ) -> Result<Self> {
        let spec = ViewSpec { source_shape, p_shape, a_shape, terms, boundary };
        spec.check()?;
        Ok(spec)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ViewSpec = serde_json::from_str(s)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("view spec serializes")
    }

    pub fn k_rank(&self) -> usize {
        self.p_shape.len() + self.a_shape.len()
    }

    pub fn k_shape(&self) -> Vec<usize> {
        self.p_shape.iter().chain(&self.a_shape).copied().collect()
    }

    pub fn rows(&self) -> usize {
        self.p_shape.iter().product()
    }

    pub fn cols(&self) -> usize {
        self.a_shape.iter().product()
    }

    /// Structural diagnostics. Errors make the view unusable; a-components
    /// without a term are reported as informational broadcasts.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let rank = self.source_shape.len();
        let kr = self.k_rank();
        if self.source_shape.is_empty() || self.source_shape.contains(&0) {
            out.push(Diagnostic {
                kind: DiagnosticKind::ZeroExtent,
                detail: format!("source shape {:?}", self.source_shape),
            });
        }
        if self.k_shape().contains(&0) {
            out.push(Diagnostic {
                kind: DiagnosticKind::ZeroExtent,
                detail: format!("p {:?} / a {:?}", self.p_shape, self.a_shape),
            });
        }
        for (i, t) in self.terms.iter().enumerate() {
            if t.axis >= rank {
                out.push(Diagnostic {
                    kind: DiagnosticKind::AxisOutOfRange,
                    detail: format!("term {i}: axis {} >= source rank {rank}", t.axis),
                });
            }
            if t.component >= kr {
                out.push(Diagnostic {
                    kind: DiagnosticKind::ComponentOutOfRange,
                    detail: format!("term {i}: component {} >= |k| {kr}", t.component),
                });
            }
        }
        let np = self.p_shape.len();
        for j in np..kr {
            if !self.terms.iter().any(|t| t.component == j) {
                out.push(Diagnostic {
                    kind: DiagnosticKind::InfoBroadcast,
                    detail: format!("a-component {} has no term", j - np),
                });
            }
        }
        out
    }

    /// True when every `k` component appears in at least one term.
    pub fn is_regular(&self) -> bool {
        (0..self.k_rank()).all(|j| self.terms.iter().any(|t| t.component == j))
    }

    pub fn check(&self) -> Result<()> {
        let errors: Vec<String> = self.validate().into_iter().filter(Diagnostic::is_error).map(|d| d.detail).collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(MeritError::InvalidSpec(errors.join("; ")))
        }
    }

    fn check_k(&self, k: &[usize]) -> Result<()> {
        let in_range =
            k.len() == self.k_rank() && k.iter().zip(self.p_shape.iter().chain(&self.a_shape)).all(|(&i, &e)| i < e);
        if in_range {
            Ok(())
        } else {
            Err(MeritError::OutOfRange { index: k.iter().map(|&i| i as i64).collect(), shape: self.k_shape() })
        }
    }

    /// Unbounded source coordinates for `k`.
    pub fn source_coords(&self, k: &[usize], x: &mut [i64]) {
        x.iter_mut().for_each(|v| *v = 0);
        for t in &self.terms {
            x[t.axis] += k[t.component] as i64 * t.stride + t.offset;
        }
    }

    /// Applies the boundary rule to raw coordinates. `Ok(None)` is a zero fill.
    pub fn resolve(&self, x: &mut [i64]) -> Result<Option<()>> {
        for (xi, &e) in x.iter_mut().zip(&self.source_shape) {
            if *xi >= 0 && *xi < e as i64 {
                continue;
            }
            match self.boundary {
                Boundary::ZeroPad => return Ok(None),
                Boundary::Clamp => *xi = (*xi).clamp(0, e as i64 - 1),
                Boundary::Reject => {
                    return Err(MeritError::OutOfRange { index: x.to_vec(), shape: self.source_shape.clone() })
                }
            }
        }
        Ok(Some(()))
    }

    /// Row-major source offset addressed by `k`, or `None` for a zero fill.
    pub fn gather_offset(&self, k: &[usize]) -> Result<Option<usize>> {
        self.check_k(k)?;
        let mut x = vec![0i64; self.source_shape.len()];
        self.source_coords(k, &mut x);
        if self.resolve(&mut x)?.is_none() {
            return Ok(None);
        }
        let idx: Vec<usize> = x.iter().map(|&v| v as usize).collect();
        Ok(row_major_offset(&self.source_shape, &idx))
    }

    fn check_source(&self, src: &Tensor) -> Result<()> {
        if src.shape() != self.source_shape.as_slice() {
            return Err(MeritError::ShapeMismatch(format!(
                "source tensor {:?} vs view source_shape {:?}",
                src.shape(),
                self.source_shape
            )));
        }
        Ok(())
    }

    pub fn gather(&self, src: &Tensor, k: &[usize]) -> Result<Scalar> {
        self.check_source(src)?;
        Ok(match self.gather_offset(k)? {
            Some(off) => src.scalar_at_offset(off),
            None => zero_scalar(src.dtype()),
        })
    }

    /// Eager `(prod p) x (prod a)` matrix of the view.
    pub fn materialize(&self, src: &Tensor) -> Result<Tensor> {
        self.check()?;
        self.check_source(src)?;
        let rows = self.rows();
        let cols = self.cols();
        let np = self.p_shape.len();
        let mut k = vec![0usize; self.k_rank()];
        let mut values = Vec::with_capacity(rows * cols);
        for p in ndrange(&self.p_shape) {
            k[..np].copy_from_slice(&p);
            for a in ndrange(&self.a_shape) {
                k[np..].copy_from_slice(&a);
                values.push(self.gather_offset(&k)?);
            }
        }
        let shape = vec![rows, cols];
        match src.dtype() {
            DType::Real32 => {
                let s = src.as_slice::<f32>().expect("real payload");
                Tensor::from_f32(shape, values.iter().map(|o| o.map_or(0.0, |o| s[o])).collect())
            }
            DType::Fix16 { frac_bits } => {
                let s = src.as_slice::<i16>().expect("fixed payload");
                Tensor::from_fix16(shape, frac_bits, values.iter().map(|o| o.map_or(0, |o| s[o])).collect())
            }
        }
    }

    fn check_tile(&self, t_p: &[usize], t_a: &[usize]) -> Result<()> {
        if t_p.len() != self.p_shape.len() || t_a.len() != self.a_shape.len() {
            return Err(MeritError::InvalidTiling(format!(
                "tile ranks ({}, {}) vs view ({}, {})",
                t_p.len(),
                t_a.len(),
                self.p_shape.len(),
                self.a_shape.len()
            )));
        }
        let fits = t_p.iter().chain(t_a).zip(self.p_shape.iter().chain(&self.a_shape));
        for (&t, &e) in fits {
            if t == 0 || t > e {
                return Err(MeritError::InvalidTiling(format!(
                    "tile ({t_p:?}, {t_a:?}) does not fit ({:?}, {:?})",
                    self.p_shape, self.a_shape
                )));
            }
        }
        Ok(())
    }

    fn check_strides(&self) -> Result<()> {
        match self.terms.iter().enumerate().find(|(_, t)| t.stride < 0) {
            Some((term, t)) => Err(MeritError::NegativeStride { term, stride: t.stride }),
            None => Ok(()),
        }
    }

    /// Per-axis extent of the source box covered by a `(t_p, t_a)` tile:
    /// `1 + sum_j (t_j - 1) * s_j` over the terms that target the axis.
    pub fn footprint(&self, t_p: &[usize], t_a: &[usize]) -> Result<Footprint> {
        self.check()?;
        self.check_tile(t_p, t_a)?;
        self.check_strides()?;
        let t: Vec<usize> = t_p.iter().chain(t_a).copied().collect();
        let mut per_axis = vec![1usize; self.source_shape.len()];
        for term in &self.terms {
            per_axis[term.axis] += (t[term.component] - 1) * term.stride as usize;
        }
        let words = per_axis.iter().map(|&e| e as u64).product();
        Ok(Footprint { per_axis, words })
    }

    /// Footprint placed at the tile whose first index is `k0`.
    pub fn footprint_box(&self, k0: &[usize], t_p: &[usize], t_a: &[usize]) -> Result<FootprintBox> {
        let fp = self.footprint(t_p, t_a)?;
        let mut origin = vec![0i64; self.source_shape.len()];
        self.source_coords(k0, &mut origin);
        Ok(FootprintBox { origin, extents: fp.per_axis })
    }
}

pub fn zero_scalar(dtype: DType) -> Scalar {
    match dtype {
        DType::Real32 => Scalar::Real(0.0),
        DType::Fix16 { .. } => Scalar::Fixed(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_a(m: usize, n: usize, k: usize) -> ViewSpec {
        ViewSpec::new(
            vec![m, k],
            vec![m, n],
            vec![k],
            vec![ViewTerm::new(0, 0, 1, 0), ViewTerm::new(2, 1, 1, 0)],
            Boundary::ZeroPad,
        )
        .unwrap()
    }

    #[test]
    fn gemm_gather_copies_index() {
        let spec = gemm_a(2, 3, 2);
        let a = Tensor::from_f32(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(spec.gather(&a, &[1, 2, 0]).unwrap(), Scalar::Real(3.0));
    }

    #[test]
    fn alexnet_corner_is_zero_padded() {
        let spec = ViewSpec::new(
            vec![3, 227, 227],
            vec![48, 55, 55],
            vec![3, 11, 11],
            vec![
                ViewTerm::new(3, 0, 1, 0),
                ViewTerm::new(1, 1, 4, -5),
                ViewTerm::new(4, 1, 1, 0),
                ViewTerm::new(2, 2, 4, -5),
                ViewTerm::new(5, 2, 1, 0),
            ],
            Boundary::ZeroPad,
        )
        .unwrap();
        let mut x = vec![0i64; 3];
        spec.source_coords(&[7, 0, 0, 2, 0, 0], &mut x);
        assert_eq!(x, vec![2, -5, -5]);
        assert_eq!(spec.gather_offset(&[7, 0, 0, 2, 0, 0]).unwrap(), None);
    }

    #[test]
    fn dilated_coordinates() {
        // I[a1, p2 + 2 a2, p3 + 2 a3]
        let spec = ViewSpec::new(
            vec![2, 16, 16],
            vec![1, 8, 8],
            vec![2, 3, 3],
            vec![
                ViewTerm::new(3, 0, 1, 0),
                ViewTerm::new(1, 1, 1, 0),
                ViewTerm::new(4, 1, 2, 0),
                ViewTerm::new(2, 2, 1, 0),
                ViewTerm::new(5, 2, 2, 0),
            ],
            Boundary::Reject,
        )
        .unwrap();
        let mut x = vec![0i64; 3];
        spec.source_coords(&[0, 3, 4, 1, 1, 2], &mut x);
        assert_eq!(x, vec![1, 5, 8]);
    }

    #[test]
    fn boundaries() {
        let mut spec = ViewSpec::new(
            vec![4],
            vec![4],
            vec![3],
            vec![ViewTerm::new(0, 0, 1, -1), ViewTerm::new(1, 0, 1, 0)],
            Boundary::ZeroPad,
        )
        .unwrap();
        let t = Tensor::from_f32(vec![4], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(spec.gather(&t, &[0, 0]).unwrap(), Scalar::Real(0.0));
        spec.boundary = Boundary::Clamp;
        assert_eq!(spec.gather(&t, &[0, 0]).unwrap(), Scalar::Real(1.0));
        assert_eq!(spec.gather(&t, &[3, 2]).unwrap(), Scalar::Real(4.0));
        spec.boundary = Boundary::Reject;
        assert_eq!(spec.gather(&t, &[0, 0]).unwrap_err().code(), "OUT_OF_RANGE");
        assert_eq!(spec.gather(&t, &[0, 1]).unwrap(), Scalar::Real(1.0));
        // k out of range is an error under every boundary
        assert_eq!(spec.gather(&t, &[4, 0]).unwrap_err().code(), "OUT_OF_RANGE");
    }

    #[test]
    fn empty_a_shape_gives_single_column() {
        // transpose of a 2x3 matrix as a pure permutation
        let spec = ViewSpec::new(
            vec![2, 3],
            vec![3, 2],
            vec![],
            vec![ViewTerm::new(0, 1, 1, 0), ViewTerm::new(1, 0, 1, 0)],
            Boundary::Reject,
        )
        .unwrap();
        let t = Tensor::from_f32(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let m = spec.materialize(&t).unwrap();
        assert_eq!(m.shape(), &[6, 1]);
        assert_eq!(m.as_slice::<f32>().unwrap(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn footprint_examples() {
        let conv = ViewSpec::new(
            vec![32, 32],
            vec![32, 32],
            vec![5, 5],
            vec![
                ViewTerm::new(0, 0, 1, -2),
                ViewTerm::new(2, 0, 1, 0),
                ViewTerm::new(1, 1, 1, -2),
                ViewTerm::new(3, 1, 1, 0),
            ],
            Boundary::ZeroPad,
        )
        .unwrap();
        let fp = conv.footprint(&[16, 8], &[5, 5]).unwrap();
        assert_eq!(fp.per_axis, vec![20, 12]);
        assert_eq!(fp.words, 240);
        let unit = conv.footprint(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(unit.per_axis, vec![1, 1]);

        let g = gemm_a(4, 4, 4).footprint(&[2, 2], &[2]).unwrap();
        assert_eq!(g.per_axis, vec![2, 2]);
        assert_eq!(g.words, 4);
    }

    #[test]
    fn footprint_errors() {
        let mut spec = gemm_a(4, 4, 4);
        assert_eq!(spec.footprint(&[5, 1], &[1]).unwrap_err().code(), "INVALID_TILING");
        assert_eq!(spec.footprint(&[1], &[1]).unwrap_err().code(), "INVALID_TILING");
        spec.terms[0].stride = -1;
        assert_eq!(spec.footprint(&[1, 1], &[1]).unwrap_err().code(), "NEGATIVE_STRIDE");
    }

    #[test]
    fn validate_reports() {
        assert!(gemm_a(2, 2, 2).validate().is_empty());
        let mut bad = gemm_a(2, 2, 2);
        bad.terms.push(ViewTerm::new(0, 2, 1, 0));
        let d = bad.validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::AxisOutOfRange);
        assert!(bad.check().is_err());

        let mut broadcast = gemm_a(2, 2, 2);
        broadcast.terms.pop();
        let d = broadcast.validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::InfoBroadcast);
        assert!(broadcast.check().is_ok());
        assert!(!broadcast.is_regular());
    }

    #[test]
    fn json_round_trip_shape() {
        let spec = gemm_a(2, 2, 2);
        let json = spec.to_json();
        assert!(json.contains("\"boundary\": \"ZERO_PAD\""));
        assert_eq!(ViewSpec::from_json(&json).unwrap(), spec);
        let minimal = r#"{"source_shape":[2],"p_shape":[2],"a_shape":[],
            "terms":[{"component":0,"axis":0,"stride":1,"offset":0}]}"#;
        assert_eq!(ViewSpec::from_json(minimal).unwrap().boundary, Boundary::ZeroPad);
    }
}
