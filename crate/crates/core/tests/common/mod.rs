//! Random workload and tiling generators shared by the integration suites.
#![allow(dead_code)]

use merit::engine::{TilingPlan, Workload};
use merit::workloads::{resolve, TemplateSpec};
use rand::seq::SliceRandom;
use rand::Rng;

pub const FAMILIES: &[&str] =
    &["gemm", "conv2d", "dilated", "correlation", "motion_estimation", "bilateral", "maxpool", "relu_fused_conv"];

fn dtype(rng: &mut impl Rng, family: &str) -> String {
    if family == "bilateral" || rng.gen_bool(0.5) {
        "dtype=real32".into()
    } else {
        format!("dtype=fix16,frac_bits={}", [6, 8, 10].choose(rng).unwrap())
    }
}

/// A random, valid parameter string for `family`, with every extent <= 64.
pub fn random_params(rng: &mut impl Rng, family: &str) -> String {
    let body = match family {
        "gemm" => format!("m={},n={},k={}", rng.gen_range(1..=24), rng.gen_range(1..=24), rng.gen_range(1..=24)),
        "conv2d" | "relu_fused_conv" => {
            let k = *[1, 3, 5].choose(rng).unwrap();
            let dil = rng.gen_range(1..=2);
            let span = dil * (k - 1) + 1;
            format!(
                "c_in={},c_out={},h={},w={},k={k},stride={},dilation={dil},pad={}",
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(span..=20),
                rng.gen_range(span..=20),
                rng.gen_range(1..=3),
                rng.gen_range(0..=span / 2),
            )
        }
        "dilated" => {
            let k = rng.gen_range(1..=3);
            let span = 2 * (k - 1) + 1;
            format!(
                "c_in={},c_out={},h={},w={},k={k}",
                rng.gen_range(1..=2),
                rng.gen_range(1..=2),
                rng.gen_range(span..=18),
                rng.gen_range(span..=18)
            )
        }
        "correlation" => format!(
            "c={},h={},w={},d={}",
            rng.gen_range(1..=4),
            rng.gen_range(2..=12),
            rng.gen_range(2..=12),
            rng.gen_range(1..=4)
        ),
        "motion_estimation" => format!(
            "blocks_y={},blocks_x={},block={},radius={}",
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(2..=6),
            rng.gen_range(0..=2)
        ),
        "bilateral" => format!(
            "h={},w={},k={},sigma_s={},sigma_r={},lut={}",
            rng.gen_range(2..=12),
            rng.gen_range(2..=12),
            [1, 3, 5].choose(rng).unwrap(),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.05..0.5),
            [16, 64, 256].choose(rng).unwrap()
        ),
        "maxpool" => {
            let k = rng.gen_range(1..=3);
            format!(
                "c={},h={},w={},k={k},stride={}",
                rng.gen_range(1..=3),
                rng.gen_range(k..=16),
                rng.gen_range(k..=16),
                rng.gen_range(1..=3)
            )
        }
        other => panic!("no generator for {other}"),
    };
    format!("{body},{}", dtype(rng, family))
}

pub fn random_spec(rng: &mut impl Rng, family: &str) -> TemplateSpec {
    let params = random_params(rng, family);
    resolve(family, &params).unwrap_or_else(|e| panic!("{family} {params}: {e}"))
}

/// A legal tile: any p-tile, and an a-tile that is a contiguous run of the
/// row-major accumulation order.
pub fn random_tiling(rng: &mut impl Rng, w: &Workload) -> TilingPlan {
    let t_p = w.p_shape().iter().map(|&e| rng.gen_range(1..=e)).collect();
    let a = w.a_shape();
    let split = rng.gen_range(0..=a.len());
    let t_a = (0..a.len())
        .map(|i| match i.cmp(&split) {
            std::cmp::Ordering::Less => 1,
            std::cmp::Ordering::Equal => rng.gen_range(1..=a[i]),
            std::cmp::Ordering::Greater => a[i],
        })
        .collect();
    TilingPlan::unbounded(t_p, t_a)
}

/// Elementwise `|got - want| <= rtol * (1 + |want|)`.
pub fn within(got: &[f64], want: &[f64], rtol: f64) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= rtol * (1.0 + w.abs()))
}
