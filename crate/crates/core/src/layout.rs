//! Bank-conflict analysis for SIMD reads from a banked scratchpad.
//!
//! When ALU `n` reads address `A_n = A_0 + sum_i c_i * bit_i(n)`, the
//! pattern is described by a ternary hash-property matrix `H`: entry
//! `(r, j)` says whether flipping ALU bit `j` always (1), never (0) or
//! sometimes (x) flips address bit `r`. If `H` reduces to the identity the
//! low address bits are a bijection of the ALU index for every base, so the
//! banks never collide. A bit-linear hash `(X, R^t)` can mix higher address
//! bits in to make an otherwise failing pattern reducible.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MeritError, Result};
use crate::tensor::ndrange;
use crate::view::ViewSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tern {
    Zero,
    One,
    X,
}

impl Tern {
    pub fn is_pure(self) -> bool {
        self != Tern::X
    }

    pub fn and(self, o: Tern) -> Tern {
        match (self, o) {
            (Tern::Zero, _) | (_, Tern::Zero) => Tern::Zero,
            (Tern::One, Tern::One) => Tern::One,
            _ => Tern::X,
        }
    }

    /// GF(2) addition lifted to `{0, 1, x}`; `x` absorbs.
    pub fn xor(self, o: Tern) -> Tern {
        match (self, o) {
            (Tern::X, _) | (_, Tern::X) => Tern::X,
            (a, b) if a == b => Tern::Zero,
            _ => Tern::One,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Tern::Zero => '0',
            Tern::One => '1',
            Tern::X => 'x',
        }
    }

    pub fn from_char(c: char) -> Option<Tern> {
        match c {
            '0' => Some(Tern::Zero),
            '1' => Some(Tern::One),
            'x' | 'X' => Some(Tern::X),
            _ => None,
        }
    }
}

impl std::ops::Not for Tern {
    type Output = Tern;

    fn not(self) -> Tern {
        match self {
            Tern::Zero => Tern::One,
            Tern::One => Tern::Zero,
            Tern::X => Tern::X,
        }
    }
}

/// Rows are address bits (LSB first), columns ALU-index bits.
/// Serialized as rows of single-character strings: `[["1","0"],["x","1"]]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<String>>", into = "Vec<Vec<String>>")]
pub struct TernaryMatrix {
    rows: Vec<Vec<Tern>>,
}

impl TernaryMatrix {
    pub fn new(rows: Vec<Vec<Tern>>) -> Result<Self> {
        if let Some(w) = rows.first().map(Vec::len) {
            if rows.iter().any(|r| r.len() != w) {
                return Err(MeritError::ShapeMismatch("ragged ternary matrix".into()));
            }
        }
        Ok(TernaryMatrix { rows })
    }

    /// Parses rows such as `"x10"`.
    pub fn parse<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let rows = rows
            .iter()
            .map(|r| {
                r.as_ref()
                    .chars()
                    .filter(|c| !c.is_whitespace() && *c != ',')
                    .map(|c| {
                        Tern::from_char(c).ok_or_else(|| MeritError::BadParams(format!("bad ternary digit {c:?}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        TernaryMatrix::new(rows)
    }

    pub fn identity(n: usize) -> Self {
        let rows = (0..n).map(|r| (0..n).map(|c| if r == c { Tern::One } else { Tern::Zero }).collect()).collect();
        TernaryMatrix { rows }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn get(&self, r: usize, c: usize) -> Tern {
        self.rows[r][c]
    }

    pub fn row(&self, r: usize) -> &[Tern] {
        &self.rows[r]
    }

    pub fn rows(&self) -> &[Vec<Tern>] {
        &self.rows
    }

    pub fn is_identity(&self) -> bool {
        self.n_rows() == self.n_cols() && *self == TernaryMatrix::identity(self.n_rows())
    }

    pub fn row_strings(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.iter().map(|t| t.as_char()).collect()).collect()
    }
}

impl From<TernaryMatrix> for Vec<Vec<String>> {
    fn from(m: TernaryMatrix) -> Vec<Vec<String>> {
        m.rows.iter().map(|r| r.iter().map(|t| t.as_char().to_string()).collect()).collect()
    }
}

impl TryFrom<Vec<Vec<String>>> for TernaryMatrix {
    type Error = MeritError;

    fn try_from(rows: Vec<Vec<String>>) -> Result<Self> {
        TernaryMatrix::parse(&rows.iter().map(|r| r.concat()).collect::<Vec<_>>())
    }
}

impl fmt::Display for TernaryMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.row_strings().iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            let spaced: Vec<String> = r.chars().map(String::from).collect();
            write!(f, "[{}]", spaced.join(" "))?;
        }
        Ok(())
    }
}

pub fn bit_length(v: u64) -> usize {
    (u64::BITS - v.leading_zeros()) as usize
}

/// Address bits needed for analysis: the bank bits alone without a hash,
/// enough to see every carry of `sum c` with one.
pub fn default_address_bits(coeffs: &[u64], bank_bits: usize, hashed: bool) -> usize {
    if hashed {
        bank_bits.max(bit_length(coeffs.iter().sum()))
    } else {
        bank_bits
    }
}

/// `A_n = base + sum_i coeffs[i] * bit_i(n)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressPattern {
    pub base: u64,
    pub coeffs: Vec<u64>,
}

impl AddressPattern {
    pub fn alu_bits(&self) -> usize {
        self.coeffs.len()
    }

    pub fn address(&self, n: usize) -> u64 {
        pattern_address(self.base, &self.coeffs, n)
    }

    pub fn addresses(&self) -> Vec<u64> {
        (0..1usize << self.coeffs.len()).map(|n| self.address(n)).collect()
    }
}

fn pattern_address(base: u64, coeffs: &[u64], n: usize) -> u64 {
    coeffs.iter().enumerate().filter(|(i, _)| n >> i & 1 == 1).fold(base, |acc, (_, &c)| acc.wrapping_add(c))
}

/// Recovers `(A_0, c)` from per-ALU addresses; `None` when the list is not
/// affine in the ALU-index bits.
pub fn fit_affine_pattern(addresses: &[i64]) -> Option<AddressPattern> {
    let n = addresses.len();
    if n == 0 || !n.is_power_of_two() || addresses[0] < 0 {
        return None;
    }
    let base = addresses[0];
    let bits = n.trailing_zeros() as usize;
    let mut coeffs = Vec::with_capacity(bits);
    for i in 0..bits {
        let c = addresses[1 << i] - base;
        if c < 0 {
            return None;
        }
        coeffs.push(c as u64);
    }
    let pattern = AddressPattern { base: base as u64, coeffs };
    (0..n).all(|k| pattern.address(k) as i64 == addresses[k]).then_some(pattern)
}

/// Exhaustive classification of address-bit flips over all bases in
/// `[0, 2^m)`, all ALU indices and all flipped ALU bits.
pub fn property_matrix(coeffs: &[u64], m: usize) -> TernaryMatrix {
    let b = coeffs.len();
    let mask = if m >= 64 { u64::MAX } else { (1u64 << m) - 1 };
    let mut ever_flip = vec![0u64; b];
    let mut ever_keep = vec![0u64; b];
    for base in 0..=mask {
        for n in 0..1usize << b {
            let an = pattern_address(base, coeffs, n);
            for j in 0..b {
                if n >> j & 1 == 1 {
                    continue;
                }
                let flips = (an ^ pattern_address(base, coeffs, n | 1 << j)) & mask;
                ever_flip[j] |= flips;
                ever_keep[j] |= !flips & mask;
            }
        }
    }
    let rows = (0..m)
        .map(|r| {
            (0..b)
                .map(|j| match (ever_flip[j] >> r & 1, ever_keep[j] >> r & 1) {
                    (1, 0) => Tern::One,
                    (0, _) => Tern::Zero,
                    _ => Tern::X,
                })
                .collect()
        })
        .collect();
    TernaryMatrix { rows }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Reduction {
    pub success: bool,
    /// Failure reason: `"not square"`, `"no pure row"` or `"not identity"`.
    pub reason: Option<String>,
    /// Pivot rows in the order they were used.
    pub pivots: Vec<usize>,
    pub result: TernaryMatrix,
}

/// Elimination without row swaps: while an unused row free of `x` exists,
/// take the lowest one and AND its ternary NOT into every other row.
pub fn reduce_to_identity(h: &TernaryMatrix) -> Reduction {
    let n = h.n_rows();
    let mut rows = h.rows.clone();
    let fail = |reason: &str, pivots, rows| Reduction {
        success: false,
        reason: Some(reason.to_string()),
        pivots,
        result: TernaryMatrix { rows },
    };
    if n != h.n_cols() {
        return fail("not square", Vec::new(), rows);
    }
    let mut used = vec![false; n];
    let mut pivots = Vec::new();
    while let Some(p) = (0..n).find(|&i| !used[i] && rows[i].iter().all(|t| t.is_pure())) {
        used[p] = true;
        pivots.push(p);
        let inv: Vec<Tern> = rows[p].iter().map(|&t| !t).collect();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != p {
                row.iter_mut().zip(&inv).for_each(|(t, &v)| *t = t.and(v));
            }
        }
    }
    let result = TernaryMatrix { rows };
    if result.is_identity() {
        Reduction { success: true, reason: None, pivots, result }
    } else if result.rows.iter().any(|r| r.iter().any(|t| !t.is_pure())) {
        fail("no pure row", pivots, result.rows)
    } else {
        fail("not identity", pivots, result.rows)
    }
}

/// Bit-linear bank hash: `v = X * addr_bits` over GF(2), then bank bit `i`
/// is `v[(i + t) mod bank_bits]` (upper rows rotated to the bottom).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HashConfig {
    /// `bank_bits x m` binary matrix.
    pub x: Vec<Vec<u8>>,
    pub t: usize,
}

impl HashConfig {
    pub fn identity(bank_bits: usize, m: usize) -> Self {
        let x = (0..bank_bits).map(|r| (0..m).map(|c| u8::from(r == c)).collect()).collect();
        HashConfig { x, t: 0 }
    }

    pub fn bank_bits(&self) -> usize {
        self.x.len()
    }

    pub fn address_bits(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Diagonal ones, and at most one extra one to the right of it per row.
    pub fn is_legal(&self) -> bool {
        let bb = self.bank_bits();
        self.t < bb.max(1)
            && self.x.iter().enumerate().all(|(r, row)| {
                row.len() == self.address_bits()
                    && row.get(r) == Some(&1)
                    && row.iter().all(|&v| v <= 1)
                    && row[..r].iter().all(|&v| v == 0)
                    && row[r + 1..].iter().filter(|&&v| v == 1).count() <= 1
            })
    }

    pub fn bank(&self, addr: u64) -> usize {
        let bb = self.bank_bits();
        let v: Vec<u64> = self
            .x
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, &b)| b == 1).fold(0, |acc, (c, _)| acc ^ (addr >> c & 1)))
            .collect();
        (0..bb).fold(0usize, |acc, i| acc | (v[(i + self.t) % bb] as usize) << i)
    }

    /// `R^t * X * H` in ternary arithmetic.
    pub fn apply(&self, h: &TernaryMatrix) -> TernaryMatrix {
        let bb = self.bank_bits();
        let cols = h.n_cols();
        let v: Vec<Vec<Tern>> = self
            .x
            .iter()
            .map(|xrow| {
                (0..cols)
                    .map(|j| {
                        xrow.iter()
                            .enumerate()
                            .filter(|(_, &b)| b == 1)
                            .fold(Tern::Zero, |acc, (c, _)| acc.xor(h.get(c, j)))
                    })
                    .collect()
            })
            .collect();
        TernaryMatrix { rows: (0..bb).map(|i| v[(i + self.t) % bb].clone()).collect() }
    }
}

/// Bank of `addr` under `cfg`, or `addr mod 2^bank_bits` without a hash.
pub fn apply_bit_hash(addr: u64, cfg: Option<&HashConfig>, bank_bits: usize) -> usize {
    match cfg {
        Some(c) => c.bank(addr),
        None => (addr & ((1u64 << bank_bits) - 1)) as usize,
    }
}

/// First `(X, R^t)` in enumeration order whose product with `h` reduces to
/// the identity. X rows are enumerated with row 0 varying slowest, each row
/// trying no off-diagonal first and then columns ascending; `t` is innermost.
pub fn search_hash(h: &TernaryMatrix, bank_bits: usize) -> Option<HashConfig> {
    let m = h.n_rows();
    if m < bank_bits || h.n_cols() != bank_bits || bank_bits == 0 {
        return None;
    }
    // choice[r] = 0 for none, otherwise off-diagonal column r + choice[r]
    let radix: Vec<usize> = (0..bank_bits).map(|r| m - r).collect();
    let mut choice = vec![0usize; bank_bits];
    loop {
        let x: Vec<Vec<u8>> = (0..bank_bits)
            .map(|r| {
                let mut row = vec![0u8; m];
                row[r] = 1;
                if choice[r] > 0 {
                    row[r + choice[r]] = 1;
                }
                row
            })
            .collect();
        for t in 0..bank_bits {
            let cfg = HashConfig { x: x.clone(), t };
            if reduce_to_identity(&cfg.apply(h)).success {
                return Some(cfg);
            }
        }
        // odometer with the last row fastest
        let mut r = bank_bits;
        loop {
            if r == 0 {
                return None;
            }
            r -= 1;
            choice[r] += 1;
            if choice[r] < radix[r] {
                break;
            }
            choice[r] = 0;
        }
    }
}

/// ALU pairs that share a bank for some base in `[0, 2^m)`.
/// `m` defaults to [`default_address_bits`].
pub fn detect_conflicts(
    coeffs: &[u64],
    banks: usize,
    hash: Option<&HashConfig>,
    m: Option<usize>,
) -> Result<Vec<(usize, usize)>> {
    if !banks.is_power_of_two() {
        return Err(MeritError::BadParams(format!("bank count {banks} is not a power of two")));
    }
    let bb = banks.trailing_zeros() as usize;
    let m = m.unwrap_or_else(|| match hash {
        Some(h) => h.address_bits(),
        None => bb,
    });
    let alus = 1usize << coeffs.len();
    let mut seen = vec![false; alus * alus];
    let mut bank_of = vec![0usize; alus];
    for base in 0..1u64 << m {
        for (n, b) in bank_of.iter_mut().enumerate() {
            *b = apply_bit_hash(pattern_address(base, coeffs, n), hash, bb);
        }
        for i in 0..alus {
            for j in i + 1..alus {
                if bank_of[i] == bank_of[j] {
                    seen[i * alus + j] = true;
                }
            }
        }
    }
    Ok((0..alus).flat_map(|i| (i + 1..alus).map(move |j| (i, j))).filter(|&(i, j)| seen[i * alus + j]).collect())
}

/// Placement of a staged footprint box in the scratchpad. The last source
/// axis is contiguous; each line along it is padded to `pitch = extent + row_pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScratchpadLayout {
    RowMajor {
        row_pad: usize,
    },
    /// Odd lines store column `x` at `x ^ swap`.
    XorSwap {
        row_pad: usize,
        swap: usize,
    },
}

impl ScratchpadLayout {
    pub fn row_pad(self) -> usize {
        match self {
            ScratchpadLayout::RowMajor { row_pad } | ScratchpadLayout::XorSwap { row_pad, .. } => row_pad,
        }
    }

    /// Address of a box-local coordinate.
    pub fn address(self, local: &[usize], extents: &[usize]) -> u64 {
        let d = local.len();
        if d == 0 {
            return 0;
        }
        let pitch = extents[d - 1] + self.row_pad();
        let mut col = local[d - 1];
        if let ScratchpadLayout::XorSwap { swap, .. } = self {
            if d >= 2 && local[d - 2] % 2 == 1 {
                col ^= swap;
            }
        }
        let mut addr = col as u64;
        let mut stride = pitch as u64;
        for i in (0..d - 1).rev() {
            addr += local[i] as u64 * stride;
            stride *= extents[i] as u64;
        }
        addr
    }

    /// Rejects an XOR swap that would move a column past the padded row,
    /// where it would alias a word of the next row.
    pub fn check(self, extents: &[usize]) -> Result<()> {
        let ScratchpadLayout::XorSwap { swap, row_pad } = self else { return Ok(()) };
        let Some(&w) = extents.last() else { return Ok(()) };
        match (0..w).map(|c| c ^ swap).max() {
            Some(top) if top >= w + row_pad => Err(MeritError::BadParams(format!(
                "swap {swap} moves column {} past a {w}+{row_pad} word row",
                top ^ swap
            ))),
            _ => Ok(()),
        }
    }

    /// Scratchpad words spent on a box, padding included.
    pub fn words(self, extents: &[usize]) -> u64 {
        match extents.split_last() {
            Some((&last, rest)) => (last + self.row_pad()) as u64 * rest.iter().map(|&e| e as u64).product::<u64>(),
            None => 1,
        }
    }
}

/// Scratchpad address each ALU reads at every a-step of the tile whose
/// origin is `k0`, with ALU `n` handling the tile-local p index `group[n]`.
pub fn column_addresses(
    spec: &ViewSpec,
    k0: &[usize],
    t_p: &[usize],
    t_a: &[usize],
    layout: ScratchpadLayout,
    group: &[Vec<usize>],
) -> Result<Vec<Vec<u64>>> {
    let region = spec.footprint_box(k0, t_p, t_a)?;
    layout.check(&region.extents)?;
    let np = spec.p_shape.len();
    let mut x = vec![0i64; spec.source_shape.len()];
    let mut k = k0.to_vec();
    let mut steps = Vec::new();
    for a in ndrange(t_a) {
        let mut addrs = Vec::with_capacity(group.len());
        for p in group {
            if p.len() != np || p.iter().zip(t_p).any(|(&i, &t)| i >= t) {
                return Err(MeritError::BadParams(format!("group entry {p:?} outside tile {t_p:?}")));
            }
            for (i, v) in p.iter().chain(&a).enumerate() {
                k[i] = k0[i] + v;
            }
            spec.source_coords(&k, &mut x);
            if !region.contains(&x) {
                return Err(MeritError::OutOfFootprint { index: x.clone() });
            }
            let local: Vec<usize> = x.iter().zip(&region.origin).map(|(&v, &o)| (v - o) as usize).collect();
            addrs.push(layout.address(&local, &region.extents));
        }
        steps.push(addrs);
    }
    Ok(steps)
}

/// A 2D output sub-tile computed by a stride-1 square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub tile_h: usize,
    pub tile_w: usize,
    pub kernel: usize,
}

impl TileGeometry {
    pub fn patch(&self) -> (usize, usize) {
        (self.tile_h + self.kernel - 1, self.tile_w + self.kernel - 1)
    }

    /// Convolution view over exactly one patch, so the footprint box is the patch.
    pub fn view(&self) -> ViewSpec {
        use crate::view::{Boundary, ViewTerm};
        let (ph, pw) = self.patch();
        ViewSpec::new(
            vec![ph, pw],
            vec![self.tile_h, self.tile_w],
            vec![self.kernel, self.kernel],
            vec![
                ViewTerm::new(0, 0, 1, 0),
                ViewTerm::new(2, 0, 1, 0),
                ViewTerm::new(1, 1, 1, 0),
                ViewTerm::new(3, 1, 1, 0),
            ],
            Boundary::Reject,
        )
        .expect("geometry view is well formed")
    }
}

/// Groups of ALUs over the tile. ALU bit `i` drives coordinate bit
/// `alu_bits[i]`, where coordinate bits are the x bits (LSB first) followed
/// by the y bits; the remaining bits enumerate the groups.
pub fn grouping(geom: &TileGeometry, alu_bits: &[usize]) -> Result<Vec<Vec<Vec<usize>>>> {
    let (th, tw) = (geom.tile_h, geom.tile_w);
    if !th.is_power_of_two() || !tw.is_power_of_two() {
        return Err(MeritError::BadParams(format!("tile {th}x{tw} is not a power of two")));
    }
    let xb = tw.trailing_zeros() as usize;
    let total = xb + th.trailing_zeros() as usize;
    if alu_bits.iter().any(|&b| b >= total) || (1..alu_bits.len()).any(|i| alu_bits[..i].contains(&alu_bits[i])) {
        return Err(MeritError::BadParams(format!("bad ALU bit selection {alu_bits:?}")));
    }
    let rest: Vec<usize> = (0..total).filter(|b| !alu_bits.contains(b)).collect();
    let place = |bits: &[usize], v: usize| bits.iter().enumerate().fold(0usize, |acc, (i, &b)| acc | (v >> i & 1) << b);
    Ok((0..1usize << rest.len())
        .map(|g| {
            (0..1usize << alu_bits.len())
                .map(|n| {
                    let coord = place(&rest, g) | place(alu_bits, n);
                    vec![coord >> xb, coord & (tw - 1)]
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Padded,
    XorHash,
    Retiled,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayoutCandidate {
    pub kind: LayoutKind,
    pub layout: ScratchpadLayout,
    /// Coordinate bits driven by the ALU index (x bits then y bits).
    pub alu_bits: Vec<usize>,
    pub pad_words_per_row: usize,
    pub waste_words: u64,
    /// Affine fit shared by every step; reported at the first group and a-step.
    pub pattern: Option<AddressPattern>,
    pub h: Option<TernaryMatrix>,
    pub reduces: Option<bool>,
    /// Conflicting ALU pairs of the affine pattern over all bases.
    pub conflict_pairs: Option<Vec<(usize, usize)>>,
    /// `(group, a-step)` pairs whose reads collide, by direct simulation.
    pub conflicting_steps: usize,
    pub conflict_free: bool,
}

fn analyze(
    geom: &TileGeometry,
    banks: usize,
    kind: LayoutKind,
    layout: ScratchpadLayout,
    alu_bits: Vec<usize>,
) -> Result<LayoutCandidate> {
    let view = geom.view();
    let bb = banks.trailing_zeros() as usize;
    let t_p = [geom.tile_h, geom.tile_w];
    let t_a = [geom.kernel, geom.kernel];
    let groups = grouping(geom, &alu_bits)?;
    let mut conflicting_steps = 0;
    let mut fits = Vec::new();
    for g in &groups {
        for step in column_addresses(&view, &[0; 4], &t_p, &t_a, layout, g)? {
            fits.push(fit_affine_pattern(&step.iter().map(|&a| a as i64).collect::<Vec<_>>()));
            let mut used = vec![false; banks];
            let clash = step.iter().any(|&a| {
                let b = apply_bit_hash(a, None, bb);
                std::mem::replace(&mut used[b], true)
            });
            conflicting_steps += usize::from(clash);
        }
    }
    // affine only if every step shares one coefficient vector
    let pattern = match fits.first() {
        Some(Some(p)) if fits.iter().all(|f| f.as_ref().is_some_and(|f| f.coeffs == p.coeffs)) => Some(p.clone()),
        _ => None,
    };
    let (h, reduces, conflict_pairs) = match &pattern {
        Some(p) if p.alu_bits() == bb => {
            let h = property_matrix(&p.coeffs, bb);
            let ok = reduce_to_identity(&h).success;
            (Some(h), Some(ok), Some(detect_conflicts(&p.coeffs, banks, None, None)?))
        }
        Some(p) => (None, None, Some(detect_conflicts(&p.coeffs, banks, None, None)?)),
        None => (None, None, None),
    };
    let (ph, pw) = geom.patch();
    Ok(LayoutCandidate {
        kind,
        layout,
        alu_bits,
        pad_words_per_row: layout.row_pad(),
        waste_words: layout.words(&[ph, pw]) - (ph * pw) as u64,
        pattern,
        h,
        reduces,
        conflict_pairs,
        conflicting_steps,
        conflict_free: conflicting_steps == 0,
    })
}

/// Candidate scratchpad layouts for one tile and bank count: row padding
/// from 0 to `banks` words with the row-major grouping, the XOR-swap layout
/// at the next power-of-two pitch, and every zero-padding re-tiling.
pub fn generate_layouts(geom: &TileGeometry, banks: usize) -> Result<Vec<LayoutCandidate>> {
    if !banks.is_power_of_two() || banks < 2 {
        return Err(MeritError::BadParams(format!("bank count {banks} is not a power of two >= 2")));
    }
    let bb = banks.trailing_zeros() as usize;
    let total = (geom.tile_h * geom.tile_w).trailing_zeros() as usize;
    if !(geom.tile_h * geom.tile_w).is_power_of_two() || total < bb {
        return Err(MeritError::BadParams(format!("tile {}x{} does not hold {banks} ALUs", geom.tile_h, geom.tile_w)));
    }
    let naive: Vec<usize> = (0..bb).collect();
    let mut out = Vec::new();
    for pad in 0..=banks {
        out.push(analyze(geom, banks, LayoutKind::Padded, ScratchpadLayout::RowMajor { row_pad: pad }, naive.clone())?);
    }
    let pw = geom.patch().1;
    let pitch = pw.next_power_of_two();
    let xor = ScratchpadLayout::XorSwap { row_pad: pitch - pw, swap: banks / 2 };
    out.push(analyze(geom, banks, LayoutKind::XorHash, xor, naive.clone())?);
    for bits in combinations(total, bb) {
        if bits != naive {
            out.push(analyze(geom, banks, LayoutKind::Retiled, ScratchpadLayout::RowMajor { row_pad: 0 }, bits)?);
        }
    }
    Ok(out)
}

/// `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0u64..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|&b| m >> b & 1 == 1).collect())
        .collect();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tm(rows: &[&str]) -> TernaryMatrix {
        TernaryMatrix::parse(rows).unwrap()
    }

    #[test]
    fn property_matrices() {
        assert_eq!(property_matrix(&[1, 6, 12], 3), tm(&["100", "x10", "xx1"]));
        assert_eq!(property_matrix(&[4, 8, 3], 4), tm(&["001", "00x", "10x", "x1x"]));
        assert_eq!(property_matrix(&[1, 2, 6], 3), tm(&["100", "x11", "xxx"]));
    }

    #[test]
    fn reductions() {
        let h1 = reduce_to_identity(&tm(&["100", "x10", "xx1"]));
        assert!(h1.success);
        assert_eq!(h1.pivots, vec![0, 1, 2]);
        let h2 = reduce_to_identity(&tm(&["10x", "x10", "0x1"]));
        assert!(!h2.success);
        assert_eq!(h2.reason.as_deref(), Some("no pure row"));
        assert!(h2.pivots.is_empty());
        assert!(!reduce_to_identity(&tm(&["100", "x11", "xxx"])).success);
        assert!(reduce_to_identity(&tm(&["10x", "x1x", "001"])).success);
        assert_eq!(reduce_to_identity(&tm(&["10", "01", "00"])).reason.as_deref(), Some("not square"));
        assert_eq!(reduce_to_identity(&tm(&["11", "01"])).reason.as_deref(), Some("not identity"));
    }

    #[test]
    fn hash_search_finds_the_worked_example() {
        let h = property_matrix(&[4, 8, 3], 4);
        let cfg = search_hash(&h, 3).unwrap();
        assert_eq!(cfg.x, vec![vec![1, 0, 0, 0], vec![0, 1, 1, 0], vec![0, 0, 1, 1]]);
        assert_eq!(cfg.t, 1);
        assert!(cfg.is_legal());
        assert_eq!(cfg.apply(&h), tm(&["10x", "x1x", "001"]));
        assert!(detect_conflicts(&[4, 8, 3], 8, Some(&cfg), None).unwrap().is_empty());
        assert_eq!(cfg.bank(3), 5);
    }

    #[test]
    fn hash_search_prefers_identity() {
        let h = property_matrix(&[1, 6, 12], 4);
        let cfg = search_hash(&h, 3).unwrap();
        assert_eq!(cfg, HashConfig::identity(3, 4));
    }

    #[test]
    fn hash_search_exhausts_on_degenerate_pattern() {
        let h = property_matrix(&[0, 0, 0], 4);
        assert_eq!(search_hash(&h, 3), None);
    }

    #[test]
    fn bit_hash_examples() {
        assert_eq!(apply_bit_hash(13, Some(&HashConfig::identity(3, 4)), 3), 5);
        assert_eq!(apply_bit_hash(13, None, 3), 5);
        let rot = HashConfig { x: HashConfig::identity(3, 3).x, t: 1 };
        // bits (1,0,1) of 5 rotate to (0,1,1)
        assert_eq!(rot.bank(5), 6);
    }

    #[test]
    fn conflict_detection() {
        assert_eq!(detect_conflicts(&[1, 2, 6], 8, None, None).unwrap(), vec![(0, 6), (1, 7)]);
        assert!(detect_conflicts(&[1, 6, 12], 8, None, None).unwrap().is_empty());
        let banks: Vec<usize> =
            AddressPattern { base: 3, coeffs: vec![1, 6, 12] }.addresses().iter().map(|&a| (a % 8) as usize).collect();
        assert_eq!(banks, vec![3, 4, 1, 2, 7, 0, 5, 6]);
        assert!(detect_conflicts(&[1], 3, None, None).is_err());
    }

    #[test]
    fn affine_fits() {
        let p = fit_affine_pattern(&[0, 1, 2, 3, 6, 7, 8, 9]).unwrap();
        assert_eq!((p.base, p.coeffs), (0, vec![1, 2, 6]));
        let p = fit_affine_pattern(&[3, 4, 9, 10, 15, 16, 21, 22]).unwrap();
        assert_eq!((p.base, p.coeffs), (3, vec![1, 6, 12]));
        assert_eq!(fit_affine_pattern(&[0, 1, 2, 4]), None);
        assert_eq!(fit_affine_pattern(&[0, 1, 2]), None);
        assert_eq!(fit_affine_pattern(&[5]).unwrap().coeffs, Vec::<u64>::new());
    }

    #[test]
    fn column_addresses_for_conv_tile() {
        let geom = TileGeometry { tile_h: 4, tile_w: 4, kernel: 3 };
        let naive = grouping(&geom, &[0, 1, 2]).unwrap();
        let steps = column_addresses(
            &geom.view(),
            &[0; 4],
            &[4, 4],
            &[3, 3],
            ScratchpadLayout::RowMajor { row_pad: 0 },
            &naive[0],
        )
        .unwrap();
        assert_eq!(steps.len(), 9);
        assert_eq!(steps[0], vec![0, 1, 2, 3, 6, 7, 8, 9]);
        let iv = grouping(&geom, &[0, 2, 3]).unwrap();
        let steps = column_addresses(
            &geom.view(),
            &[0; 4],
            &[4, 4],
            &[3, 3],
            ScratchpadLayout::RowMajor { row_pad: 0 },
            &iv[0],
        )
        .unwrap();
        let p = fit_affine_pattern(&steps[0].iter().map(|&a| a as i64).collect::<Vec<_>>()).unwrap();
        assert_eq!(p.coeffs, vec![1, 6, 12]);
    }

    #[test]
    fn single_alu_single_address() {
        let geom = TileGeometry { tile_h: 1, tile_w: 1, kernel: 1 };
        let g = grouping(&geom, &[]).unwrap();
        let steps =
            column_addresses(&geom.view(), &[0; 4], &[1, 1], &[1, 1], ScratchpadLayout::RowMajor { row_pad: 0 }, &g[0])
                .unwrap();
        assert_eq!(steps, vec![vec![0]]);
    }

    #[test]
    fn layout_candidates() {
        let geom = TileGeometry { tile_h: 4, tile_w: 4, kernel: 3 };
        let all = generate_layouts(&geom, 8).unwrap();
        let padded: Vec<_> = all.iter().filter(|c| c.kind == LayoutKind::Padded).collect();
        assert!(!padded[0].conflict_free);
        assert_eq!(padded[0].conflict_pairs.as_deref(), Some(&[(0, 6), (1, 7)][..]));
        let best = padded.iter().find(|c| c.conflict_free).unwrap();
        assert_eq!(best.pad_words_per_row, 6);
        assert_eq!(best.pattern.as_ref().unwrap().coeffs, vec![1, 2, 12]);

        let xor = all.iter().find(|c| c.kind == LayoutKind::XorHash).unwrap();
        assert!(xor.conflict_free);
        assert_eq!(xor.pad_words_per_row, 2);
        assert!(xor.pattern.is_none());

        for (bits, c) in [(vec![0, 1, 3], vec![1, 2, 12]), (vec![0, 2, 3], vec![1, 6, 12])] {
            let r = all.iter().find(|x| x.kind == LayoutKind::Retiled && x.alu_bits == bits).unwrap();
            assert_eq!(r.pattern.as_ref().unwrap().coeffs, c);
            assert_eq!(r.reduces, Some(true));
            assert!(r.conflict_free);
            assert_eq!(r.waste_words, 0);
        }
    }

    #[test]
    fn xor_swap_must_stay_in_row() {
        let ok = ScratchpadLayout::XorSwap { row_pad: 2, swap: 4 };
        assert!(ok.check(&[6, 6]).is_ok());
        assert_eq!(ok.address(&[1, 5], &[6, 6]), 8 + 1);
        let bad = ScratchpadLayout::XorSwap { row_pad: 0, swap: 2 };
        assert!(matches!(bad.check(&[6, 6]), Err(MeritError::BadParams(_))));
        assert!(ScratchpadLayout::RowMajor { row_pad: 0 }.check(&[6, 6]).is_ok());
    }

    #[test]
    fn ternary_json() {
        let h = tm(&["1x0"]);
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, r#"[["1","x","0"]]"#);
        assert_eq!(serde_json::from_str::<TernaryMatrix>(&s).unwrap(), h);
    }
}
