//! Central finite-difference verification of analytic gradients.
//!
//! A check evaluates a scalar projection `L = sum(r * f(x))` with a fixed
//! random `r`, compares `dL/dx` from [`Tape::backward`] against
//! `(L(x + eps) - L(x - eps)) / 2 eps` for every input element, and reports
//! `|a - n| / max(1, |a|, |n|)`. The numeric side only ever runs forward
//! passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::sampling::{offset_channels, RoiBox};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-2;

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One randomly drawn check problem.
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    /// Which inputs are differentiated (others are held constant).
    pub differentiable: Vec<bool>,
    pub build: Builder,
}

/// Outcome of checking one op over many random instances.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn forward(case: &GradCase, inputs: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

fn project(y: &Tensor, r: &[f32]) -> f64 {
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Maximum relative error between analytic and numeric gradients of `case`.
pub fn max_relative_error(case: &GradCase, eps: f32, rng: &mut impl Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.differentiable)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let n_out = tape.value(out).len();
    let r: Vec<f32> = if n_out == 1 {
        vec![1.0]
    } else {
        (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let loss = if n_out == 1 {
        out
    } else {
        let shape = tape.shape(out).to_vec();
        let rv = tape.constant(Tensor::new(&shape, r.clone())?);
        let prod = tape.mul(out, rv)?;
        tape.sum(prod)?
    };
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        if !case.differentiable[i] {
            continue;
        }
        let analytic = grads.get(*var);
        let mut perturbed = case.inputs.clone();
        for e in 0..case.inputs[i].len() {
            let orig = case.inputs[i].data()[e];
            perturbed[i].data_mut()[e] = orig + eps;
            let plus = project(&forward(case, &perturbed)?, &r);
            perturbed[i].data_mut()[e] = orig - eps;
            let minus = project(&forward(case, &perturbed)?, &r);
            perturbed[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps as f64);
            let a = analytic.data()[e] as f64;
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for inputs feeding a ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0f32);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reals whose fractional part stays in `[0.1, 0.9]`, keeping bilinear
/// samples away from the integer grid where the kernel has a kink.
fn off_grid(shape: &[usize], lo: i32, hi: i32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as f32 + rng.random_range(0.1..0.9f32))
}

fn case(inputs: Vec<Tensor>, differentiable: Vec<bool>, build: Builder) -> GradCase {
    GradCase {
        inputs,
        differentiable,
        build,
    }
}

/// Named generators for every differentiable op.
pub fn op_generators() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> GradCase)> {
    vec![
        ("add", |rng| {
            case(
                vec![uniform(&[4, 4], -1.0, 1.0, rng), uniform(&[4, 4], -1.0, 1.0, rng)],
                vec![true, true],
                Box::new(|t, v| t.add(v[0], v[1])),
            )
        }),
        ("sub", |rng| {
            case(
                vec![uniform(&[4, 4], -1.0, 1.0, rng), uniform(&[4, 4], -1.0, 1.0, rng)],
                vec![true, true],
                Box::new(|t, v| t.sub(v[0], v[1])),
            )
        }),
        ("mul", |rng| {
            case(
                vec![uniform(&[4, 4], -1.0, 1.0, rng), uniform(&[4, 4], -1.0, 1.0, rng)],
                vec![true, true],
                Box::new(|t, v| t.mul(v[0], v[1])),
            )
        }),
        ("relu", |rng| {
            case(vec![away_from_zero(&[4, 4], rng)], vec![true], Box::new(|t, v| t.relu(v[0])))
        }),
        ("scale", |rng| {
            let s = rng.random_range(-2.0..2.0f32);
            case(
                vec![uniform(&[4, 4], -1.0, 1.0, rng)],
                vec![true],
                Box::new(move |t, v| t.scale(v[0], s)),
            )
        }),
        ("conv2d", |rng| {
            let stride = if rng.random_bool(0.5) { 1 } else { 2 };
            case(
                vec![
                    uniform(&[3, 6, 6], -1.0, 1.0, rng),
                    uniform(&[2, 3, 3, 3], -0.5, 0.5, rng),
                    uniform(&[2], -0.5, 0.5, rng),
                ],
                vec![true, true, true],
                Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, 1)),
            )
        }),
        ("conv2d_1x1", |rng| {
            case(
                vec![
                    uniform(&[3, 4, 5], -1.0, 1.0, rng),
                    uniform(&[2, 3, 1, 1], -0.5, 0.5, rng),
                    uniform(&[2], -0.5, 0.5, rng),
                ],
                vec![true, true, true],
                Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 0)),
            )
        }),
        ("matmul", |rng| {
            case(
                vec![uniform(&[3, 4], -1.0, 1.0, rng), uniform(&[4, 2], -1.0, 1.0, rng)],
                vec![true, true],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }),
        ("linear", |rng| {
            case(
                vec![
                    uniform(&[2, 5], -1.0, 1.0, rng),
                    uniform(&[5, 3], -1.0, 1.0, rng),
                    uniform(&[3], -1.0, 1.0, rng),
                ],
                vec![true, true, true],
                Box::new(|t, v| t.linear(v[0], v[1], v[2])),
            )
        }),
        ("concat_cols", |rng| {
            case(
                vec![uniform(&[2, 3], -1.0, 1.0, rng), uniform(&[2, 2], -1.0, 1.0, rng)],
                vec![true, true],
                Box::new(|t, v| t.concat_cols(v[0], v[1])),
            )
        }),
        ("avg_pool2", |rng| {
            case(vec![uniform(&[2, 4, 6], -1.0, 1.0, rng)], vec![true], Box::new(|t, v| t.avg_pool2(v[0])))
        }),
        ("upsample2", |rng| {
            case(vec![uniform(&[2, 3, 2], -1.0, 1.0, rng)], vec![true], Box::new(|t, v| t.upsample2(v[0])))
        }),
        ("spatial_softmax_ce", |rng| {
            let targets: Vec<Option<(usize, usize)>> = (0..2)
                .map(|_| Some((rng.random_range(0..3), rng.random_range(0..3))))
                .chain(std::iter::once(None))
                .collect();
            case(
                vec![uniform(&[3, 3, 3], -2.0, 2.0, rng)],
                vec![true],
                Box::new(move |t, v| t.spatial_softmax_ce(v[0], &targets)),
            )
        }),
        ("softmax_ce", |rng| {
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            case(
                vec![uniform(&[3, 4], -2.0, 2.0, rng)],
                vec![true],
                Box::new(move |t, v| t.softmax_ce(v[0], &labels)),
            )
        }),
        ("bce_with_logits", |rng| {
            let targets: Vec<f32> = (0..5).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            case(
                vec![uniform(&[5], -3.0, 3.0, rng)],
                vec![true],
                Box::new(move |t, v| t.bce_with_logits(v[0], &targets)),
            )
        }),
        ("smooth_l1", |rng| {
            let target = uniform(&[2, 4], -1.0, 1.0, rng);
            // Differences avoid the |d| = 1 seam by at least 0.1.
            let pred = Tensor::from_fn(&[2, 4], |i| {
                let mag = if rng.random_bool(0.5) {
                    rng.random_range(0.05..0.9f32)
                } else {
                    rng.random_range(1.1..2.0f32)
                };
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                target.data()[i] + sign * mag
            });
            case(
                vec![pred],
                vec![true],
                Box::new(move |t, v| t.smooth_l1(v[0], &target, 2.0)),
            )
        }),
        ("bilinear_sample", |rng| {
            case(
                vec![uniform(&[2, 5, 6], -1.0, 1.0, rng), off_grid(&[4, 2], -1, 5, rng)],
                vec![true, true],
                Box::new(|t, v| t.bilinear_sample(v[0], v[1])),
            )
        }),
        ("deformable_conv2d", |rng| {
            let (c, h, w, k, g) = (2, 4, 4, 3, 2);
            case(
                vec![
                    uniform(&[c, h, w], -1.0, 1.0, rng),
                    off_grid(&[offset_channels(k, g), h, w], -2, 2, rng),
                    uniform(&[2, c, k, k], -0.5, 0.5, rng),
                    uniform(&[2], -0.5, 0.5, rng),
                ],
                vec![true, true, true, true],
                Box::new(move |t, v| t.deformable_conv2d(v[0], v[1], v[2], v[3], g)),
            )
        }),
        ("roi_align", |rng| {
            let y0 = rng.random_range(0.0..3.0f32);
            let x0 = rng.random_range(0.0..3.0f32);
            let roi = RoiBox::new(x0, y0, x0 + rng.random_range(2.0..4.0), y0 + rng.random_range(2.0..4.0));
            case(
                vec![uniform(&[2, 7, 7], -1.0, 1.0, rng)],
                vec![true],
                Box::new(move |t, v| t.roi_align(v[0], &roi, 3, 2, 2)),
            )
        }),
        ("conv_relu_loss_pipeline", |rng| loop {
            let x = uniform(&[2, 5, 5], -1.0, 1.0, rng);
            let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, rng);
            let b = uniform(&[3], -0.2, 0.2, rng);
            // Redraw instances with a pre-activation too close to the ReLU
            // kink for a finite difference to be meaningful.
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let z = tape.conv2d(xv, wv, bv, 1, 1).expect("valid shapes");
            if tape.value(z).data().iter().any(|v| v.abs() < 0.02) {
                continue;
            }
            let targets: Vec<Option<(usize, usize)>> =
                (0..3).map(|_| Some((rng.random_range(0..5), rng.random_range(0..5)))).collect();
            break case(
                vec![x, w, b],
                vec![true, true, true],
                Box::new(move |t, v| {
                    let z = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                    let a = t.relu(z)?;
                    t.spatial_softmax_ce(a, &targets)
                }),
            );
        }),
    ]
}

/// Checks every op on `instances` random problems each.
pub fn run_suite(instances: usize, seed: u64, eps: f32, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (i, (name, gen)) in op_generators().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 1_000_003));
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let case = gen(&mut rng);
            worst = worst.max(max_relative_error(&case, eps, &mut rng)?);
        }
        reports.push(GradCheckReport {
            op: name.to_string(),
            instances,
            max_rel_error: worst,
            tolerance,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        let reports = run_suite(5, 7, DEFAULT_EPS, DEFAULT_TOLERANCE).unwrap();
        for r in &reports {
            assert!(r.passed(), "{} max rel error {}", r.op, r.max_rel_error);
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // `scale` by 2 checked against a forward that scales by 3.
        let case = GradCase {
            inputs: vec![Tensor::full(&[3], 0.5)],
            differentiable: vec![true],
            build: Box::new(|t, v| {
                let s = t.scale(v[0], 2.0)?;
                if t.requires_grad(v[0]) {
                    Ok(s)
                } else {
                    t.scale(v[0], 3.0)
                }
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(max_relative_error(&case, DEFAULT_EPS, &mut rng).unwrap() > 0.1);
    }
}
