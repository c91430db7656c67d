//! Randomized invariants across the library.
mod common;

use common::{random_spec, random_tiling, within, FAMILIES};
use merit::engine::{run_full, run_tiled, TilingPlan};
use merit::interconnect::{butterfly_route, simulate_fetch, FetchSetup, FetchVerdict};
use merit::layout::{grouping, property_matrix, reduce_to_identity, search_hash, ScratchpadLayout, Tern, TileGeometry};
use merit::perfmodel::{fold, utilization, MachineParams};
use merit::rip::{alu_op, phase_range_flat, segment_trace, AluOp, Segment};
use merit::tensor::{ndrange, DType, Tensor};
use merit::view::{Boundary, ViewSpec, ViewTerm};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family() -> impl Strategy<Value = &'static str> {
    prop::sample::select(FAMILIES)
}

fn dtype() -> impl Strategy<Value = DType> {
    prop_oneof![Just(DType::Real32), (0u8..=14).prop_map(|f| DType::Fix16 { frac_bits: f })]
}

fn shape(rank: std::ops::RangeInclusive<usize>, max: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1..=max, rank)
}

/// A regular view with non-negative strides over a random source.
fn view() -> impl Strategy<Value = ViewSpec> {
    (shape(1..=3, 6), shape(0..=2, 4), shape(1..=2, 4), 0usize..3).prop_flat_map(|(src, p, a, b)| {
        let comps = p.len() + a.len();
        let axes = src.len();
        let terms = prop::collection::vec((0..comps, 0..axes, 0i64..=3, -2i64..=2), 1..=4);
        let boundary = [Boundary::ZeroPad, Boundary::Clamp, Boundary::ZeroPad][b];
        terms.prop_map(move |ts| ViewSpec {
            source_shape: src.clone(),
            p_shape: p.clone(),
            a_shape: a.clone(),
            terms: ts.into_iter().map(|(c, ax, s, o)| ViewTerm::new(c, ax, s, o)).collect(),
            boundary,
        })
    })
}

/// Direct recursion: hooks of level `l` wrap the whole loop at that level,
/// firing once per iteration of the enclosing levels.
fn nested_trace(a: &[usize]) -> Vec<Segment> {
    fn go(a: &[usize], level: usize, out: &mut Vec<Segment>) {
        if level == a.len() {
            out.push(Segment::Body);
            return;
        }
        out.push(Segment::Pre(level + 1));
        for _ in 0..a[level] {
            go(a, level + 1, out);
        }
        out.push(Segment::Post(level + 1));
    }
    let mut raw = Vec::new();
    go(a, 0, &mut raw);
    raw
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tensor_bytes_roundtrip(s in shape(1..=4, 5), dt in dtype(), seed in any::<u64>()) {
        let n: usize = s.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = match dt {
            DType::Real32 => Tensor::from_f32(s, (0..n).map(|_| f32::from_bits(rand::Rng::gen(&mut rng))).collect()),
            DType::Fix16 { frac_bits } => Tensor::from_fix16(s, frac_bits, (0..n).map(|_| rand::Rng::gen(&mut rng)).collect()),
        }
        .unwrap();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        prop_assert!(back.bit_eq(&t));
    }

    #[test]
    fn ndrange_is_row_major(s in shape(1..=4, 4)) {
        let t = Tensor::zeros(s.clone(), DType::Real32).unwrap();
        let offsets: Vec<usize> = ndrange(&s).map(|k| t.offset(&k).unwrap()).collect();
        prop_assert_eq!(offsets, (0..t.len()).collect::<Vec<_>>());
    }

    #[test]
    fn phase_range_contains_body(a in shape(1..=3, 4), seed in any::<u64>()) {
        let k: Vec<usize> = a.iter().enumerate().map(|(i, &e)| (seed as usize >> (4 * i)) % e).collect();
        let (lo, hi) = phase_range_flat(&a, &k);
        prop_assert!(lo <= a.len() && a.len() <= hi && hi <= 2 * a.len());
    }

    #[test]
    fn linearization_matches_recursion(a in shape(1..=3, 4)) {
        prop_assert_eq!(segment_trace(&a), nested_trace(&a));
    }

    #[test]
    fn fix16_saturates_like_wide_arithmetic(
        op in prop::sample::select(vec![AluOp::Add, AluOp::Sub, AluOp::L1, AluOp::Mac]),
        a in any::<i16>(), b in any::<i16>(), c in any::<i16>(), s in 0u8..16,
    ) {
        let (wa, wb, wc) = (i64::from(a), i64::from(b), i64::from(c));
        let inner = match op {
            AluOp::Add => wb + wc,
            AluOp::Sub => wb - wc,
            AluOp::L1 => (wb - wc).abs(),
            _ => wb * wc,
        };
        let want = (wa + inner.div_euclid(1 << s)).clamp(i16::MIN.into(), i16::MAX.into());
        prop_assert_eq!(i64::from(alu_op::<i16>(op, a, b, c, s).unwrap()), want);
    }

    #[test]
    fn materialize_matches_gather(v in view(), seed in any::<u64>()) {
        prop_assume!(v.check().is_ok());
        let n: usize = v.source_shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f32> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 1.0..2.0)).collect();
        let src = Tensor::from_f32(v.source_shape.clone(), vals.clone()).unwrap();
        let m = v.materialize(&src).unwrap();
        let shape: Vec<usize> = v.p_shape.iter().chain(&v.a_shape).copied().collect();
        for (i, k) in ndrange(&shape).enumerate() {
            prop_assert_eq!(m.scalar_at_offset(i), v.gather(&src, &k).unwrap());
        }
        // Purity: every non-fill value comes from the source.
        for x in m.to_f64_vec() {
            prop_assert!(x == 0.0 || vals.iter().any(|&s| f64::from(s) == x));
        }
    }

    #[test]
    fn property_matrix_lowest_bit(coeffs in prop::collection::vec(0u64..64, 1..=5), m in 1usize..=6) {
        let h = property_matrix(&coeffs, m);
        for (j, &c) in coeffs.iter().enumerate() {
            let c = c % (1 << m);
            if c == 0 {
                continue;
            }
            let low = c.trailing_zeros() as usize;
            prop_assert_eq!(h.get(low, j), Tern::One);
            for r in 0..low {
                prop_assert_eq!(h.get(r, j), Tern::Zero);
            }
        }
    }

    #[test]
    fn search_hash_is_legal(coeffs in prop::collection::vec(0u64..32, 3), m in 3usize..=5) {
        let h = property_matrix(&coeffs, m);
        if let Some(cfg) = search_hash(&h, 3) {
            prop_assert!(cfg.is_legal());
            prop_assert!(reduce_to_identity(&cfg.apply(&h)).success);
        }
    }

    #[test]
    fn butterfly_delivers_routed_permutations(bits in 0usize..=5, seed in any::<u64>()) {
        let n = 1 << bits;
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let first = butterfly_route(n, &perm).unwrap();
        prop_assert_eq!(&first, &butterfly_route(n, &perm).unwrap());
        if let merit::interconnect::Routing::Routed { config } = first {
            let lines: Vec<usize> = (0..n).collect();
            prop_assert_eq!(config.apply(&lines), perm);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Every case covers all templates, so each sees 64 parameterizations.
    #[test]
    fn workload_matches_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for fam in FAMILIES {
            let spec = random_spec(&mut rng, fam);
            let (a, b) = spec.random_inputs(seed).unwrap();
            let got = run_full(&spec.build(a.clone(), b.clone()).unwrap()).unwrap();
            let want = spec.oracle(&a, &b).unwrap();
            match got.dtype() {
                DType::Real32 => prop_assert!(within(&got.to_f64_vec(), &want.to_f64_vec(), 1e-5), "{fam}"),
                DType::Fix16 { .. } => prop_assert!(got.bit_eq(&want), "{fam}"),
            }
        }
    }

    #[test]
    fn fold_is_a_no_op(fam in family(), seed in any::<u64>(), factor in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_spec(&mut rng, fam).instantiate(seed).unwrap();
        let Ok(f) = fold(&w, factor) else { return Ok(()) };
        let full = run_full(&w).unwrap();
        prop_assert!(f.unfold(&run_full(&f.workload).unwrap()).unwrap().bit_eq(&full));
        let plan = f.plan(&random_tiling(&mut rng, &w));
        let (tiled, _) = run_tiled(&f.workload, &plan).unwrap();
        prop_assert!(f.unfold(&tiled).unwrap().bit_eq(&full));
    }

    #[test]
    fn utilization_bounded_and_saturating(fam in family(), seed in any::<u64>(), bw in 0.25f64..64.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_spec(&mut rng, fam).instantiate(seed).unwrap();
        let plan = random_tiling(&mut rng, &w);
        let mut prev = f64::INFINITY;
        for alus in [1, 2, 4, 8, 16, 32, 64] {
            let mp = MachineParams { alus_per_tau: alus, dram_words_per_cycle: Some(bw), ..MachineParams::default() };
            let u = utilization(&w, &plan, &mp).unwrap();
            prop_assert!(u > 0.0 && u <= 1.0, "{u}");
            prop_assert!(u <= prev + 1e-12, "{alus} ALUs: {u} > {prev}");
            prev = u;
        }
    }

    // Dense kernels only: with dilation a wider a-tile also stages the gaps.
    #[test]
    fn larger_a_tiles_read_less(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = loop {
            let p = common::random_params(&mut rng, "conv2d");
            if p.contains("stride=1,dilation=1,") {
                break p;
            }
        };
        let spec = merit::workloads::resolve("conv2d", &params).unwrap();
        let w = spec.instantiate(seed).unwrap();
        let small = random_tiling(&mut rng, &w);
        let a = w.a_shape();
        let split = small.t_a.iter().position(|&t| t != 1).unwrap_or(a.len());
        // Grow the partial axis, or move the split one level out.
        let mut t_a = small.t_a.clone();
        if split < a.len() && t_a[split] < a[split] {
            t_a[split] = rand::Rng::gen_range(&mut rng, t_a[split]..=a[split]);
        } else if split > 0 {
            t_a[split - 1] = rand::Rng::gen_range(&mut rng, 1..=a[split - 1]);
        }
        let big = TilingPlan::unbounded(small.t_p.clone(), t_a);
        let (_, rs) = run_tiled(&w, &small).unwrap();
        let (_, rb) = run_tiled(&w, &big).unwrap();
        prop_assert!(rb.dram_read_words[0] <= rs.dram_read_words[0], "{params} {small:?} -> {big:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn footprint_box_contains_touched(v in view(), seed in any::<u64>()) {
        prop_assume!(v.check().is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = v.p_shape.iter().chain(&v.a_shape).copied().collect();
        let np = v.p_shape.len();
        let t: Vec<usize> = dims.iter().map(|&e| rand::Rng::gen_range(&mut rng, 1..=e)).collect();
        let k0: Vec<usize> = dims.iter().zip(&t).map(|(&e, &ti)| rand::Rng::gen_range(&mut rng, 0..=e - ti)).collect();
        let bx = v.footprint_box(&k0, &t[..np], &t[np..]).unwrap();
        let mut x = vec![0i64; v.source_shape.len()];
        for d in ndrange(&t) {
            let k: Vec<usize> = k0.iter().zip(&d).map(|(a, b)| a + b).collect();
            v.source_coords(&k, &mut x);
            prop_assert!(bx.contains(&x), "{x:?} outside {bx:?}");
        }
    }

    #[test]
    fn tiled_equals_untiled(fam in family(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_spec(&mut rng, fam).instantiate(seed).unwrap();
        let plan = random_tiling(&mut rng, &w);
        let full = run_full(&w).unwrap();
        let (tiled, _) = run_tiled(&w, &plan).unwrap();
        prop_assert!(tiled.bit_eq(&full), "{fam} {plan:?}");
    }

    // Routing may stall, but a routed step always delivers the gathered word;
    // a swap that aliases rows is refused up front.
    #[test]
    fn routed_fetches_deliver_gathered_words(
        kernel in 1usize..=3,
        pad in 0usize..=8,
        swap in prop::option::of(1usize..=4),
        bits in prop::sample::subsequence(vec![0usize, 1, 2, 3], 3).prop_shuffle(),
        seed in any::<u64>(),
    ) {
        let geom = TileGeometry { tile_h: 4, tile_w: 4, kernel };
        let view = geom.view();
        let (ph, pw) = geom.patch();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..ph * pw).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect();
        let src = Tensor::from_f32(vec![ph, pw], vals).unwrap();
        let layout = match swap {
            Some(swap) => ScratchpadLayout::XorSwap { row_pad: pad, swap },
            None => ScratchpadLayout::RowMajor { row_pad: pad },
        };
        for group in grouping(&geom, &bits).unwrap() {
            let setup = FetchSetup {
                view: &view,
                src: &src,
                k0: &[0; 4],
                t_p: &[4, 4],
                t_a: &[kernel, kernel],
                layout,
                group: &group,
                banks: 8,
                hash: None,
            };
            if layout.check(&[ph, pw]).is_err() {
                prop_assert!(simulate_fetch(&setup).is_err());
                continue;
            }
            for v in simulate_fetch(&setup).unwrap() {
                prop_assert!(!matches!(v, FetchVerdict::Mismatch { .. }), "{v:?}");
            }
        }
    }
}
