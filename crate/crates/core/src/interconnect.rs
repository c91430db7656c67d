//! Functional model of the bank-to-ALU path: a `log2 N` stage butterfly
//! whose stage `s` exchanges lines differing in bit `s`, fed by a banked
//! scratchpad addressed through an optional bit-linear hash.

use serde::Serialize;

use crate::error::{MeritError, Result};
use crate::layout::{HashConfig, ScratchpadLayout};
use crate::tensor::{ndrange, Tensor};
use crate::view::ViewSpec;

pub use crate::layout::apply_bit_hash;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Switch {
    Through,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ButterflyConfig {
    pub ports: usize,
    /// `stages[s][i]` sets the `i`-th switch of stage `s`, which joins the
    /// `i`-th line with bit `s` clear to its partner with bit `s` set.
    pub stages: Vec<Vec<Switch>>,
}

fn switch_low_line(s: usize, i: usize) -> usize {
    ((i >> s) << (s + 1)) | (i & ((1 << s) - 1))
}

impl ButterflyConfig {
    pub fn all_through(ports: usize) -> Self {
        let n = ports.trailing_zeros() as usize;
        ButterflyConfig { ports, stages: vec![vec![Switch::Through; ports / 2]; n] }
    }

    /// Moves `inputs[line]` through the stages; returns the output lines.
    pub fn apply<T: Clone>(&self, inputs: &[T]) -> Vec<T> {
        let mut lines = inputs.to_vec();
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, sw) in stage.iter().enumerate() {
                if *sw == Switch::Cross {
                    let lo = switch_low_line(s, i);
                    lines.swap(lo, lo | 1 << s);
                }
            }
        }
        lines
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Routing {
    Routed {
        config: ButterflyConfig,
    },
    /// Two packets needed `line` after `stage`.
    Unroutable {
        stage: usize,
        line: usize,
    },
}

impl Routing {
    pub fn is_routed(&self) -> bool {
        matches!(self, Routing::Routed { .. })
    }
}

fn check_permutation(n: usize, perm: &[usize]) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(MeritError::InvalidPermutation(format!("{n} ports is not a power of two")));
    }
    if perm.len() != n {
        return Err(MeritError::InvalidPermutation(format!("{} entries for {n} ports", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(MeritError::InvalidPermutation(format!("{perm:?}")));
        }
    }
    Ok(())
}

/// Destination-tag routing, least significant bit first: ALU `n` receives
/// the word on bank line `perm[n]`. Stage `s` moves each packet to the line
/// whose bit `s` matches its destination.
pub fn butterfly_route(n: usize, perm: &[usize]) -> Result<Routing> {
    check_permutation(n, perm)?;
    let bits = n.trailing_zeros() as usize;
    let mut pos = perm.to_vec();
    let mut stages = Vec::with_capacity(bits);
    for s in 0..bits {
        let mut owner = vec![usize::MAX; n];
        let mut stage = vec![Switch::Through; n / 2];
        for (dest, p) in pos.iter_mut().enumerate() {
            let next = (*p & !(1 << s)) | (dest & 1 << s);
            if owner[next] != usize::MAX {
                return Ok(Routing::Unroutable { stage: s, line: next });
            }
            owner[next] = dest;
            if next != *p && *p & 1 << s == 0 {
                stage[((*p >> (s + 1)) << s) | (*p & ((1 << s) - 1))] = Switch::Cross;
            }
            *p = next;
        }
        stages.push(stage);
    }
    Ok(Routing::Routed { config: ButterflyConfig { ports: n, stages } })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FetchVerdict {
    Ok,
    /// The step stalls: these ALU pairs address the same bank.
    BankConflict {
        pairs: Vec<(usize, usize)>,
    },
    Unroutable {
        stage: usize,
        line: usize,
    },
    /// Delivered word differs from the direct gather.
    Mismatch {
        alu: usize,
        expected: f64,
        delivered: f64,
    },
}

/// One tile's fetch traffic as seen by the banked scratchpad.
pub struct FetchSetup<'a> {
    pub view: &'a ViewSpec,
    pub src: &'a Tensor,
    pub k0: &'a [usize],
    pub t_p: &'a [usize],
    pub t_a: &'a [usize],
    pub layout: ScratchpadLayout,
    /// Tile-local p index served by each ALU.
    pub group: &'a [Vec<usize>],
    pub banks: usize,
    pub hash: Option<&'a HashConfig>,
}

/// Stages the tile footprint into banks, then for every a-step routes each
/// bank's word to the ALU that asked for it and checks it against the view.
pub fn simulate_fetch(setup: &FetchSetup<'_>) -> Result<Vec<FetchVerdict>> {
    let FetchSetup { view, src, k0, t_p, t_a, layout, group, banks, hash } = *setup;
    if group.len() != banks || !banks.is_power_of_two() {
        return Err(MeritError::BadParams(format!(
            "{} ALUs on {banks} banks; need equal power-of-two counts",
            group.len()
        )));
    }
    let bb = banks.trailing_zeros() as usize;
    let region = view.footprint_box(k0, t_p, t_a)?;
    layout.check(&region.extents)?;

    // scratchpad image: bank -> row -> word
    let mut memory: Vec<Vec<Option<f64>>> = vec![Vec::new(); banks];
    let mut x = vec![0i64; region.origin.len()];
    for local in ndrange(&region.extents) {
        for ((xi, &l), &o) in x.iter_mut().zip(&local).zip(&region.origin) {
            *xi = l as i64 + o;
        }
        let value = match view.resolve(&mut x)? {
            Some(()) => {
                let idx: Vec<usize> = x.iter().map(|&v| v as usize).collect();
                src.value(&idx)?
            }
            None => 0.0,
        };
        let addr = layout.address(&local, &region.extents);
        let (bank, row) = (apply_bit_hash(addr, hash, bb), (addr >> bb) as usize);
        let cells = &mut memory[bank];
        if cells.len() <= row {
            cells.resize(row + 1, None);
        }
        cells[row] = Some(value);
    }

    let steps = crate::layout::column_addresses(view, k0, t_p, t_a, layout, group)?;
    let mut verdicts = Vec::with_capacity(steps.len());
    for (a, addrs) in ndrange(t_a).zip(steps) {
        let bank_rows: Vec<(usize, usize)> =
            addrs.iter().map(|&ad| (apply_bit_hash(ad, hash, bb), (ad >> bb) as usize)).collect();
        let pairs: Vec<(usize, usize)> = (0..banks)
            .flat_map(|i| (i + 1..banks).map(move |j| (i, j)))
            .filter(|&(i, j)| bank_rows[i].0 == bank_rows[j].0)
            .collect();
        if !pairs.is_empty() {
            verdicts.push(FetchVerdict::BankConflict { pairs });
            continue;
        }
        let perm: Vec<usize> = bank_rows.iter().map(|&(b, _)| b).collect();
        let config = match butterfly_route(banks, &perm)? {
            Routing::Routed { config } => config,
            Routing::Unroutable { stage, line } => {
                verdicts.push(FetchVerdict::Unroutable { stage, line });
                continue;
            }
        };
        let mut inputs = vec![f64::NAN; banks];
        for &(b, r) in &bank_rows {
            inputs[b] = memory[b].get(r).copied().flatten().unwrap_or(f64::NAN);
        }
        let delivered = config.apply(&inputs);
        let mut verdict = FetchVerdict::Ok;
        for (alu, p) in group.iter().enumerate() {
            let k: Vec<usize> = p.iter().chain(&a).zip(k0).map(|(&l, &o)| l + o).collect();
            let expected = match view.gather_offset(&k)? {
                Some(off) => src.value_at_offset(off),
                None => 0.0,
            };
            if delivered[alu].to_bits() != expected.to_bits() {
                verdict = FetchVerdict::Mismatch { alu, expected, delivered: delivered[alu] };
                break;
            }
        }
        verdicts.push(verdict);
    }
    Ok(verdicts)
}
