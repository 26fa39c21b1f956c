//! Shared test support: the central finite-difference gradient oracle.
//!
//! The oracle is independent of the reverse-mode path it checks: it only
//! re-evaluates the forward function at perturbed inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skdssl::tensor::{backward, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

/// How to draw the values of one differentiable input.
pub enum InputSpec {
    /// Uniform in [-1, 1].
    Random(Vec<usize>),
    /// Uniform in [lo, hi].
    RandomIn(Vec<usize>, f64, f64),
    /// Uniform in [-1, 1], resampled away from the ReLU kink at zero.
    AvoidKink(Vec<usize>),
    /// Caller-provided values.
    Fixed(Vec<f64>, Vec<usize>),
}

pub struct GradCase {
    pub inputs: Vec<InputSpec>,
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(&[Tensor<f64>]) -> skdssl::Result<Tensor<f64>>>,
}

fn draw(spec: &InputSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    match spec {
        InputSpec::Random(shape) => {
            let n = shape.iter().product();
            ((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape.clone())
        }
        InputSpec::RandomIn(shape, lo, hi) => {
            let n = shape.iter().product();
            ((0..n).map(|_| rng.gen_range(*lo..*hi)).collect(), shape.clone())
        }
        InputSpec::AvoidKink(shape) => {
            let n = shape.iter().product();
            let vals = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    // Finite differences are invalid across the kink at zero.
                    if v.abs() < 0.05 {
                        v + 0.15 * if v >= 0.0 { 1.0 } else { -1.0 }
                    } else {
                        v
                    }
                })
                .collect();
            (vals, shape.clone())
        }
        InputSpec::Fixed(vals, shape) => (vals.clone(), shape.clone()),
    }
}

/// Scalarize an arbitrary-shape output with fixed random weights so a single
/// backward pass covers every output element.
fn scalarize(out: &Tensor<f64>, weights: &Tensor<f64>) -> skdssl::Result<Tensor<f64>> {
    out.mul(weights)?.sum()
}

/// Compare reverse-mode gradients of `case.f` against central finite
/// differences for every input element, over `SEEDS` random instances.
/// Returns the worst relative error observed, or a failure description.
pub fn check_gradients(
    name: &str,
    make: impl Fn(&mut ChaCha8Rng) -> GradCase,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
        let case = make(&mut rng);
        let drawn: Vec<(Vec<f64>, Vec<usize>)> =
            case.inputs.iter().map(|s| draw(s, &mut rng)).collect();
        let leaves: Vec<Tensor<f64>> = drawn
            .iter()
            .map(|(v, s)| Tensor::leaf(v.clone(), s, true).expect("leaf"))
            .collect();
        let out = (case.f)(&leaves).map_err(|e| format!("{name}: forward failed: {e}"))?;
        let wvals: Vec<f64> = (0..out.numel())
            .map(|_| {
                let mag: f64 = rng.gen_range(0.5..1.5);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let weights = Tensor::new(wvals, out.shape()).expect("weights");
        let loss = scalarize(&out, &weights).map_err(|e| format!("{name}: scalarize: {e}"))?;
        let grads = backward(&loss).map_err(|e| format!("{name}: backward: {e}"))?;

        let eval = |inputs: &[(Vec<f64>, Vec<usize>)]| -> Result<f64, String> {
            let ts: Vec<Tensor<f64>> = inputs
                .iter()
                .map(|(v, s)| Tensor::new(v.clone(), s).expect("leaf"))
                .collect();
            let out = (case.f)(&ts).map_err(|e| format!("{name}: fd forward: {e}"))?;
            Ok(scalarize(&out, &weights)
                .map_err(|e| format!("{name}: fd scalarize: {e}"))?
                .item())
        };

        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(leaf)
                .ok_or_else(|| format!("{name}: input {i} missing from gradient map"))?
                .to_vec();
            for e in 0..drawn[i].0.len() {
                let mut plus = drawn.clone();
                plus[i].0[e] += FD_STEP;
                let mut minus = drawn.clone();
                minus[i].0[e] -= FD_STEP;
                let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
                let a = analytic[e];
                let rel = (a - fd).abs() / f64::max(1.0, f64::max(a.abs(), fd.abs()));
                worst = worst.max(rel);
                if rel >= GRAD_TOL {
                    return Err(format!(
                        "{name}: seed {seed} input {i} elem {e}: analytic {a} vs fd {fd} (rel {rel:.3e})"
                    ));
                }
            }
        }
    }
    Ok(worst)
}

/// Catalog of gradient-check cases for every differentiable primitive.
/// Both the per-op test file and the acceptance suite draw from this list.
pub mod cases {
    use super::*;
    use rand::seq::SliceRandom;
    use skdssl::tensor::{batch_norm_eval, batch_norm_train};

    type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> GradCase>;

    pub fn all() -> Vec<(&'static str, Maker)> {
        vec![
            ("cosine_loss", Box::new(cosine_loss_case)),
            ("cosine_loss_detached_target", Box::new(cosine_loss_detached_case)),
            ("kl_divergence", Box::new(kl_case)),
            ("matmul", Box::new(matmul)),
            ("conv2d", Box::new(conv2d)),
            ("add", Box::new(add_same)),
            ("add_bias_broadcast", Box::new(add_bias)),
            ("sub", Box::new(sub)),
            ("scalar_mul", Box::new(scalar_mul)),
            ("elementwise_mul", Box::new(elementwise_mul)),
            ("relu", Box::new(relu)),
            ("batch_norm_train_2d", Box::new(batch_norm_train_2d)),
            ("batch_norm_train_4d", Box::new(batch_norm_train_4d)),
            ("batch_norm_eval", Box::new(batch_norm_eval_case)),
            ("global_avg_pool", Box::new(global_avg_pool)),
            ("max_pool", Box::new(max_pool)),
            ("softmax_last_dim", Box::new(softmax_last_dim)),
            ("log_softmax_last_dim", Box::new(log_softmax_last_dim)),
            ("log", Box::new(log)),
            ("exp", Box::new(exp)),
            ("sum", Box::new(sum)),
            ("mean", Box::new(mean)),
            ("reshape", Box::new(reshape)),
            ("concat_rows", Box::new(concat_rows)),
            ("transpose", Box::new(transpose)),
            ("l2_normalize", Box::new(l2_normalize)),
        ]
    }

    pub use super::loss_cases_impl::{cosine_loss_case, cosine_loss_detached_case, kl_case};

    pub fn matmul(rng: &mut ChaCha8Rng) -> GradCase {
        let (m, k, n) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..6));
        GradCase {
            inputs: vec![InputSpec::Random(vec![m, k]), InputSpec::Random(vec![k, n])],
            f: Box::new(|t| t[0].matmul(&t[1])),
        }
    }

    pub fn conv2d(rng: &mut ChaCha8Rng) -> GradCase {
        let (n, c, oc) = (2, rng.gen_range(1..3), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(5..9), rng.gen_range(5..9));
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..2);
        GradCase {
            inputs: vec![
                InputSpec::Random(vec![n, c, h, w]),
                InputSpec::Random(vec![oc, c, 3, 3]),
            ],
            f: Box::new(move |t| t[0].conv2d(&t[1], stride, padding)),
        }
    }

    pub fn add_same(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::Random(shape.clone()), InputSpec::Random(shape)],
            f: Box::new(|t| t[0].add(&t[1])),
        }
    }

    pub fn add_bias(rng: &mut ChaCha8Rng) -> GradCase {
        let (n, d) = (rng.gen_range(2..5), rng.gen_range(2..5));
        GradCase {
            inputs: vec![InputSpec::Random(vec![n, d]), InputSpec::Random(vec![d])],
            f: Box::new(|t| t[0].add(&t[1])),
        }
    }

    pub fn sub(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::Random(shape.clone()), InputSpec::Random(shape)],
            f: Box::new(|t| t[0].sub(&t[1])),
        }
    }

    pub fn scalar_mul(rng: &mut ChaCha8Rng) -> GradCase {
        let c = rng.gen_range(-2.0..2.0);
        GradCase {
            inputs: vec![InputSpec::Random(vec![3, 4])],
            f: Box::new(move |t| t[0].mul_scalar(c)),
        }
    }

    pub fn elementwise_mul(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::Random(shape.clone()), InputSpec::Random(shape)],
            f: Box::new(|t| t[0].mul(&t[1])),
        }
    }

    pub fn relu(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..6)];
        GradCase {
            inputs: vec![InputSpec::AvoidKink(shape)],
            f: Box::new(|t| t[0].relu()),
        }
    }

    pub fn batch_norm_train_2d(rng: &mut ChaCha8Rng) -> GradCase {
        let (n, d) = (rng.gen_range(4..8), rng.gen_range(2..5));
        GradCase {
            inputs: vec![
                InputSpec::Random(vec![n, d]),
                InputSpec::RandomIn(vec![d], 0.5, 1.5),
                InputSpec::Random(vec![d]),
            ],
            f: Box::new(|t| batch_norm_train(&t[0], &t[1], &t[2], 1e-5).map(|r| r.0)),
        }
    }

    pub fn batch_norm_train_4d(rng: &mut ChaCha8Rng) -> GradCase {
        let c = rng.gen_range(1..4);
        GradCase {
            inputs: vec![
                InputSpec::Random(vec![2, c, 3, 4]),
                InputSpec::RandomIn(vec![c], 0.5, 1.5),
                InputSpec::Random(vec![c]),
            ],
            f: Box::new(|t| batch_norm_train(&t[0], &t[1], &t[2], 1e-5).map(|r| r.0)),
        }
    }

    pub fn batch_norm_eval_case(rng: &mut ChaCha8Rng) -> GradCase {
        let c = rng.gen_range(1..4);
        let rm: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let rv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.3..1.5)).collect();
        GradCase {
            inputs: vec![
                InputSpec::Random(vec![3, c, 2, 3]),
                InputSpec::RandomIn(vec![c], 0.5, 1.5),
                InputSpec::Random(vec![c]),
            ],
            f: Box::new(move |t| batch_norm_eval(&t[0], &t[1], &t[2], &rm, &rv, 1e-5)),
        }
    }

    pub fn global_avg_pool(rng: &mut ChaCha8Rng) -> GradCase {
        let c = rng.gen_range(1..4);
        GradCase {
            inputs: vec![InputSpec::Random(vec![2, c, 3, 4])],
            f: Box::new(|t| t[0].global_avg_pool()),
        }
    }

    pub fn max_pool(rng: &mut ChaCha8Rng) -> GradCase {
        // Equally spaced shuffled values keep window maxima well separated,
        // which finite differences require.
        let shape = vec![2, 2, 6, 6];
        let n: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect();
        vals.shuffle(rng);
        GradCase {
            inputs: vec![InputSpec::Fixed(vals, shape)],
            f: Box::new(|t| t[0].max_pool(2, 2)),
        }
    }

    pub fn softmax_last_dim(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..6)];
        GradCase {
            inputs: vec![InputSpec::Random(shape)],
            f: Box::new(|t| t[0].softmax_last_dim()),
        }
    }

    pub fn log_softmax_last_dim(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..6)];
        GradCase {
            inputs: vec![InputSpec::Random(shape)],
            f: Box::new(|t| t[0].log_softmax_last_dim()),
        }
    }

    pub fn log(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::RandomIn(shape, 0.2, 2.0)],
            f: Box::new(|t| t[0].log()),
        }
    }

    pub fn exp(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::Random(shape)],
            f: Box::new(|t| t[0].exp()),
        }
    }

    pub fn sum(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::Random(shape)],
            f: Box::new(|t| t[0].sum()),
        }
    }

    pub fn mean(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::Random(shape)],
            f: Box::new(|t| t[0].mean()),
        }
    }

    pub fn reshape(rng: &mut ChaCha8Rng) -> GradCase {
        let (a, b) = (rng.gen_range(2..5), 4);
        GradCase {
            inputs: vec![InputSpec::Random(vec![a, b])],
            f: Box::new(move |t| t[0].reshape(&[t[0].numel() / 2, 2])),
        }
    }

    pub fn concat_rows(rng: &mut ChaCha8Rng) -> GradCase {
        let d = rng.gen_range(2..5);
        GradCase {
            inputs: vec![
                InputSpec::Random(vec![2, d]),
                InputSpec::Random(vec![1, d]),
                InputSpec::Random(vec![3, d]),
            ],
            f: Box::new(|t| Tensor::concat_rows(t)),
        }
    }

    pub fn transpose(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::Random(shape)],
            f: Box::new(|t| t[0].transpose()),
        }
    }

    pub fn l2_normalize(rng: &mut ChaCha8Rng) -> GradCase {
        let shape = vec![rng.gen_range(2..5), rng.gen_range(2..5)];
        GradCase {
            inputs: vec![InputSpec::RandomIn(shape, 0.3, 1.5)],
            f: Box::new(|t| t[0].l2_normalize()),
        }
    }
}

/// Loss-level gradient cases live next to the primitive catalog so the
/// acceptance suite can run the whole set in one sweep.
pub mod loss_cases_impl {
    use super::*;
    use rand::Rng;
    use skdssl::losses::{kl_divergence, temperature_softmax, SoftTargets};

    /// Both arguments differentiable (the cross-view form).
    pub fn cosine_loss_case(rng: &mut ChaCha8Rng) -> GradCase {
        let (n, p) = (rng.gen_range(2..5), rng.gen_range(2..6));
        GradCase {
            inputs: vec![
                InputSpec::RandomIn(vec![n, p], 0.3, 1.5),
                InputSpec::RandomIn(vec![n, p], 0.3, 1.5),
            ],
            f: Box::new(|t| skdssl::losses::cosine_loss(&t[0], &t[1])),
        }
    }

    /// Second argument detached (the cross-model form against the target
    /// projection).
    pub fn cosine_loss_detached_case(rng: &mut ChaCha8Rng) -> GradCase {
        let (n, p) = (rng.gen_range(2..5), rng.gen_range(2..6));
        let target: Vec<f64> = (0..n * p).map(|_| rng.gen_range(0.3..1.5)).collect();
        let target = Tensor::new(target, &[n, p]).unwrap();
        GradCase {
            inputs: vec![InputSpec::RandomIn(vec![n, p], 0.3, 1.5)],
            f: Box::new(move |t| skdssl::losses::cosine_loss(&t[0], &target)),
        }
    }

    /// KL distillation loss differentiated through the temperature softmax
    /// with respect to the logits; the soft targets are constants.
    pub fn kl_case(rng: &mut ChaCha8Rng) -> GradCase {
        let (n, k) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let mut rows = Vec::with_capacity(n * k);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            rows.extend(raw.into_iter().map(|v| v / s));
        }
        let targets = SoftTargets::from_values(rows, n, k).unwrap();
        GradCase {
            inputs: vec![InputSpec::Random(vec![n, k])],
            f: Box::new(move |t| {
                let a = temperature_softmax(&t[0], 4.0)?;
                kl_divergence(&targets, &a)
            }),
        }
    }
}
