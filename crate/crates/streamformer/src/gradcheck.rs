//! The gradient-verification suite: every registered tape primitive and
//! each composite block is checked against central finite differences on a
//! set of derived seeds. Shared by the `grad-check` command and the
//! acceptance tests.
//!
//! Loss functions weight the output with a fixed random readout; a plain
//! sum is degenerate for normalizing ops (softmax rows sum to one, layer
//! norm rows sum to zero) and would compare nothing but rounding noise.

use crate::attention::MhaVars;
use crate::error::Result;
use crate::layers::{
    block_forward, Activation, BlockVars, DropoutCtx, FfnVars, IcMode, IcVars, LayerNormVars,
    NormScheme, VggVars,
};
use crate::rng::Rng;
use crate::tensor::check::{finite_diff_check, DEFAULT_EPS};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Mask, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub composite: bool,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Run the full suite: `seeds` repetitions per case, worst error kept.
/// Primitives are held to `primitive_tol`, composite blocks to
/// `composite_tol`.
pub fn run_suite<S: Scalar>(
    seed: u64,
    seeds: u32,
    primitive_tol: f64,
    composite_tol: f64,
) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    for case in cases::<S>() {
        let mut worst: f64 = 0.0;
        for s in 0..seeds {
            let mut rng = Rng::derive(seed, &format!("gradcheck.{}.{s}", case.name));
            worst = worst.max((case.run)(&mut rng)?);
        }
        let threshold = if case.composite {
            composite_tol
        } else {
            primitive_tol
        };
        results.push(CaseResult {
            name: case.name,
            composite: case.composite,
            max_rel_err: worst,
            threshold,
            passed: worst <= threshold,
        });
    }
    Ok(results)
}

type CaseFn = Box<dyn Fn(&mut Rng) -> Result<f64>>;

struct Case<S: Scalar> {
    name: &'static str,
    composite: bool,
    run: CaseFn,
    _marker: std::marker::PhantomData<S>,
}

fn rand<S: Scalar>(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor<S> {
    Tensor::rand_uniform(shape, bound, rng)
}

/// Uniform samples kept away from zero (ReLU kink safety under finite
/// differences).
fn rand_off_kink<S: Scalar>(shape: Vec<usize>, rng: &mut Rng) -> Tensor<S> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v = rng.uniform(2.0);
            let v = if v.abs() < 0.3 {
                0.3_f64.copysign(v)
            } else {
                v
            };
            S::from_f64(v)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform samples with pooling pairs separated enough that an eps-sized
/// perturbation cannot flip an argmax.
fn rand_pool_safe<S: Scalar>(shape: Vec<usize>, rng: &mut Rng) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|i| S::from_f64(rng.uniform(1.0) + (i % 13) as f64 * 0.031))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn weighted_sum<S: Scalar>(tape: &mut Tape<S>, y: Var, readout: &Tensor<S>) -> Result<Var> {
    let w = tape.constant(readout.clone());
    let weighted = tape.mul(y, w)?;
    Ok(tape.sum(weighted))
}

fn cases<S: Scalar>() -> Vec<Case<S>> {
    fn case<S: Scalar>(
        name: &'static str,
        composite: bool,
        run: impl Fn(&mut Rng) -> Result<f64> + 'static,
    ) -> Case<S> {
        Case {
            name,
            composite,
            run: Box::new(run),
            _marker: std::marker::PhantomData,
        }
    }

    vec![
        case("matmul", false, |rng| {
            let a = rand::<S>(vec![3, 4], 1.0, rng);
            let b = rand::<S>(vec![4, 2], 1.0, rng);
            let r = rand::<S>(vec![3, 2], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.matmul(vars[0], vars[1])?;
                    weighted_sum(tape, y, &r)
                },
                &[a, b],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("transpose", false, |rng| {
            let x = rand::<S>(vec![3, 5], 1.0, rng);
            let r = rand::<S>(vec![5, 3], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.transpose(vars[0])?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("add", false, |rng| {
            let a = rand::<S>(vec![2, 4], 1.0, rng);
            let b = rand::<S>(vec![2, 4], 1.0, rng);
            let r = rand::<S>(vec![2, 4], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.add(vars[0], vars[1])?;
                    weighted_sum(tape, y, &r)
                },
                &[a, b],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("mul", false, |rng| {
            let a = rand::<S>(vec![2, 4], 1.0, rng);
            let b = rand::<S>(vec![2, 4], 1.0, rng);
            let r = rand::<S>(vec![2, 4], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.mul(vars[0], vars[1])?;
                    weighted_sum(tape, y, &r)
                },
                &[a, b],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("scale", false, |rng| {
            let x = rand::<S>(vec![3, 3], 1.0, rng);
            let r = rand::<S>(vec![3, 3], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.scale(vars[0], -1.7);
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("add_row_bias", false, |rng| {
            let x = rand::<S>(vec![3, 4], 1.0, rng);
            let b = rand::<S>(vec![4], 1.0, rng);
            let r = rand::<S>(vec![3, 4], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.add_row_bias(vars[0], vars[1])?;
                    weighted_sum(tape, y, &r)
                },
                &[x, b],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("relu", false, |rng| {
            let x = rand_off_kink::<S>(vec![3, 4], rng);
            let r = rand::<S>(vec![3, 4], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.relu(vars[0]);
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("gelu", false, |rng| {
            let x = rand::<S>(vec![3, 4], 2.0, rng);
            let r = rand::<S>(vec![3, 4], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.gelu(vars[0]);
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("exp", false, |rng| {
            let x = rand::<S>(vec![3, 4], 1.5, rng);
            let r = rand::<S>(vec![3, 4], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.exp(vars[0]);
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("sum", false, |rng| {
            let x = rand::<S>(vec![4, 3], 2.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| Ok(tape.sum(vars[0])),
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("mean_last", false, |rng| {
            let x = rand::<S>(vec![3, 5], 2.0, rng);
            let r = rand::<S>(vec![3], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.mean_last(vars[0])?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("var_last", false, |rng| {
            let x = rand::<S>(vec![3, 5], 2.0, rng);
            let r = rand::<S>(vec![3], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.var_last(vars[0])?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("softmax_last", false, |rng| {
            let x = rand::<S>(vec![2, 5], 2.0, rng);
            let r = rand::<S>(vec![2, 5], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.softmax_last(vars[0], None)?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("softmax_last_masked", false, |rng| {
            let x = rand::<S>(vec![2, 5], 2.0, rng);
            let r = rand::<S>(vec![2, 5], 1.0, rng);
            let mask = Mask::new(
                2,
                5,
                vec![true, false, true, true, false, true, true, false, true, true],
            );
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.softmax_last(vars[0], Some(&mask))?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("log_softmax_last", false, |rng| {
            let x = rand::<S>(vec![2, 5], 2.0, rng);
            let r = rand::<S>(vec![2, 5], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.log_softmax_last(vars[0])?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("layer_norm", false, |rng| {
            let x = rand::<S>(vec![3, 6], 2.0, rng);
            let gain = rand::<S>(vec![6], 1.0, rng);
            let bias = rand::<S>(vec![6], 1.0, rng);
            let r = rand::<S>(vec![3, 6], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                    weighted_sum(tape, y, &r)
                },
                &[x, gain, bias],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("conv1d", false, |rng| {
            let x = rand::<S>(vec![6, 3], 1.0, rng);
            let k = rand::<S>(vec![3, 3, 4], 1.0, rng);
            let b = rand::<S>(vec![4], 1.0, rng);
            let r = rand::<S>(vec![6, 4], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.conv1d(vars[0], vars[1], vars[2])?;
                    weighted_sum(tape, y, &r)
                },
                &[x, k, b],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("conv2d", false, |rng| {
            let x = rand::<S>(vec![4, 5, 2], 1.0, rng);
            let k = rand::<S>(vec![3, 3, 2, 3], 1.0, rng);
            let b = rand::<S>(vec![3], 1.0, rng);
            let r = rand::<S>(vec![4, 5, 3], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.conv2d(vars[0], vars[1], vars[2])?;
                    weighted_sum(tape, y, &r)
                },
                &[x, k, b],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("maxpool_time", false, |rng| {
            let x = rand_pool_safe::<S>(vec![6, 3, 2], rng);
            let r = rand::<S>(vec![3, 3, 2], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.maxpool_time(vars[0])?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("maxpool_freq", false, |rng| {
            let x = rand_pool_safe::<S>(vec![3, 6, 2], rng);
            let r = rand::<S>(vec![3, 3, 2], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.maxpool_freq(vars[0])?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("concat_time", false, |rng| {
            let a = rand::<S>(vec![2, 3], 1.0, rng);
            let b = rand::<S>(vec![4, 3], 1.0, rng);
            let r = rand::<S>(vec![6, 3], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.concat_rows(vars[0], vars[1])?;
                    weighted_sum(tape, y, &r)
                },
                &[a, b],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("concat_cols", false, |rng| {
            let a = rand::<S>(vec![3, 2], 1.0, rng);
            let b = rand::<S>(vec![3, 4], 1.0, rng);
            let r = rand::<S>(vec![3, 6], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.concat_cols(vars[0], vars[1])?;
                    weighted_sum(tape, y, &r)
                },
                &[a, b],
                DEFAULT_EPS,
                &[],
            )
        }),
        case("slice", false, |rng| {
            let x = rand::<S>(vec![5, 6], 1.0, rng);
            let r = rand::<S>(vec![2, 3], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let rows = tape.slice_rows(vars[0], 1, 2)?;
                    let y = tape.slice_cols(rows, 2, 3)?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("reshape", false, |rng| {
            let x = rand::<S>(vec![4, 6], 1.0, rng);
            let r = rand::<S>(vec![2, 12], 1.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let y = tape.reshape(vars[0], vec![2, 12])?;
                    weighted_sum(tape, y, &r)
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("nll_from_log_probs", false, |rng| {
            let x = rand::<S>(vec![4, 3], 2.0, rng);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let logp = tape.log_softmax_last(vars[0])?;
                    tape.nll_from_log_probs(logp, &[0, 2, 1, 1])
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
        }),
        case("stop_gradient", false, |rng| {
            // The severed input is excluded from the numeric comparison;
            // the live path must still check out, and the severed analytic
            // gradient must be exactly zero.
            let x = rand::<S>(vec![2, 3], 1.0, rng);
            let y = rand::<S>(vec![2, 3], 1.0, rng);
            let f = |tape: &mut Tape<S>, vars: &[Var]| {
                let sg = tape.stop_gradient(vars[0]);
                let prod = tape.mul(sg, vars[1])?;
                Ok(tape.sum(prod))
            };
            let err = finite_diff_check(&f, &[x.clone(), y.clone()], DEFAULT_EPS, &[0])?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x, true);
            let yv = tape.leaf(y, true);
            let loss = f(&mut tape, &[xv, yv])?;
            tape.backward(loss)?;
            let severed = tape.grad(xv).unwrap();
            let zero = severed
                .data()
                .iter()
                .all(|v| v.to_f64().to_bits() == 0.0f64.to_bits());
            Ok(if zero { err } else { 1.0 })
        }),
        case("pre_norm_block", true, |rng| {
            block_case::<S>(rng, NormScheme::Pre, false)
        }),
        case("post_norm_block", true, |rng| {
            block_case::<S>(rng, NormScheme::Post, false)
        }),
        case("interleaved_conv_block", true, |rng| {
            block_case::<S>(rng, NormScheme::Pre, true)
        }),
        case("vgg_front_end", true, |rng| {
            let x = rand::<S>(vec![6, 8], 1.0, rng);
            let chans = [1usize, 2, 2, 4, 4];
            let mut params: Vec<Tensor<S>> = Vec::new();
            for i in 0..4 {
                params.push(rand::<S>(vec![3, 3, chans[i], chans[i + 1]], 0.5, rng));
                params.push(rand::<S>(vec![chans[i + 1]], 0.5, rng));
            }
            // Frequency 8 pools to 2; 2 * 4 channels = 8 projection inputs.
            params.push(rand::<S>(vec![8, 4], 0.5, rng));
            params.push(rand::<S>(vec![4], 0.5, rng));
            let r = rand::<S>(vec![3, 4], 1.0, rng);
            let mut inputs = vec![x];
            inputs.extend(params);
            finite_diff_check(
                &|tape: &mut Tape<S>, vars: &[Var]| {
                    let vgg = VggVars {
                        kernels: [vars[1], vars[3], vars[5], vars[7]],
                        biases: [vars[2], vars[4], vars[6], vars[8]],
                        proj_w: vars[9],
                        proj_b: vars[10],
                    };
                    let y = crate::layers::vgg_encoder(tape, vars[0], &vgg)?;
                    weighted_sum(tape, y, &r)
                },
                &inputs,
                DEFAULT_EPS,
                &[],
            )
        }),
    ]
}

/// Finite-difference check of one full block with respect to its input.
fn block_case<S: Scalar>(rng: &mut Rng, norm: NormScheme, ic: bool) -> Result<f64> {
    let (t, d, d_ff) = (4usize, 8usize, 12usize);
    let x = rand::<S>(vec![t, d], 1.0, rng);
    let readout = rand::<S>(vec![t, d], 1.0, rng);
    let param_seed = rng.next_u64();
    finite_diff_check(
        &move |tape: &mut Tape<S>, vars: &[Var]| {
            let mut prng = Rng::new(param_seed);
            let block = build_block(tape, d, d_ff, 2, ic, &mut prng);
            let y = block_forward(
                tape,
                vars[0],
                &block,
                norm,
                None,
                None,
                IcMode::Full,
                &mut DropoutCtx::eval(),
            )?
            .out;
            weighted_sum(tape, y, &readout)
        },
        std::slice::from_ref(&x),
        DEFAULT_EPS,
        &[],
    )
}

fn build_block<S: Scalar>(
    tape: &mut Tape<S>,
    d: usize,
    d_ff: usize,
    heads: usize,
    ic: bool,
    rng: &mut Rng,
) -> BlockVars {
    let mat = |tape: &mut Tape<S>, r: usize, c: usize, rng: &mut Rng| {
        let t = Tensor::<S>::rand_uniform(vec![r, c], 0.4, rng);
        tape.leaf(t, false)
    };
    let wq = mat(tape, d, d, rng);
    let wk = mat(tape, d, d, rng);
    let wv = mat(tape, d, d, rng);
    let wo = mat(tape, d, d, rng);
    let w1 = mat(tape, d, d_ff, rng);
    let w2 = mat(tape, d_ff, d, rng);
    let ln = |tape: &mut Tape<S>, rng: &mut Rng| {
        let gain = Tensor::<S>::rand_uniform(vec![d], 0.5, rng);
        let gain_shifted = Tensor::new(
            vec![d],
            gain.data().iter().map(|&g| g + S::ONE).collect(),
        )
        .unwrap();
        LayerNormVars {
            gain: tape.leaf(gain_shifted, false),
            bias: tape.leaf(Tensor::rand_uniform(vec![d], 0.2, rng), false),
            eps: 1e-5,
        }
    };
    let ln1 = ln(tape, rng);
    let ln2 = ln(tape, rng);
    let zd = tape.leaf(Tensor::zeros(vec![d]), false);
    let zff = tape.leaf(Tensor::zeros(vec![d_ff]), false);
    let ic = if ic {
        let kernel = tape.leaf(Tensor::rand_uniform(vec![3, d, d], 0.3, rng), false);
        let ln = ln(tape, rng);
        Some(IcVars {
            kernel,
            bias: zd,
            ln,
        })
    } else {
        None
    };
    BlockVars {
        mha: MhaVars {
            wq,
            bq: zd,
            wk,
            bk: zd,
            wv,
            bv: zd,
            wo,
            bo: zd,
            n_heads: heads,
        },
        ffn: FfnVars {
            w1,
            b1: zff,
            w2,
            b2: zd,
            activation: Activation::Relu,
        },
        ln1,
        ln2,
        ic,
    }
}

/// Gradient-norm profile of a freshly initialized model across depth: one
/// backward pass of the frame-mean cross-entropy on random data, per-block
/// aggregated parameter gradient norms plus the gradient norm at each
/// block's input. The initialization and normalization experiments compare
/// these profiles across schemes.
pub struct GradNormProfile {
    pub param_norms: Vec<f64>,
    pub activation_norms: Vec<f64>,
}

impl GradNormProfile {
    pub fn param_max_over_min(&self) -> f64 {
        let max = self.param_norms.iter().cloned().fold(0.0, f64::max);
        let min = self
            .param_norms
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        max / min
    }

    /// `||grad at block-1 input|| / ||grad at block-L input||`.
    pub fn activation_first_over_last(&self) -> f64 {
        self.activation_norms[0] / self.activation_norms[self.activation_norms.len() - 1]
    }
}

pub fn gradient_norm_profile(
    cfg: &crate::model::ModelConfig,
    data_seed: u64,
    frames: usize,
) -> Result<GradNormProfile> {
    use crate::model::AcousticModel;
    let model: AcousticModel<f64> = AcousticModel::build(cfg.clone())?;
    let mut rng = Rng::derive(data_seed, "gradnorm.data");
    let feats = Tensor::<f64>::rand_uniform(vec![frames, cfg.n_features], 1.0, &mut rng);
    let labels: Vec<usize> = (0..cfg.out_len(frames))
        .map(|_| rng.range_usize(0, cfg.n_classes))
        .collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let fv = tape.constant(feats);
    let mut h = model.apply_front_end(&mut tape, &bound, fv)?;
    let mut block_inputs = Vec::with_capacity(cfg.depth);
    for block in bound.blocks() {
        block_inputs.push(h);
        h = block_forward(
            &mut tape,
            h,
            block,
            cfg.norm,
            None,
            None,
            IcMode::Full,
            &mut DropoutCtx::eval(),
        )?
        .out;
    }
    let logp = model.classify(&mut tape, &bound, h)?;
    let loss = tape.nll_from_log_probs(logp, &labels)?;
    tape.backward(loss)?;

    let mut param_sq = vec![0.0f64; cfg.depth];
    for (i, e) in model.params().entries.iter().enumerate() {
        if let Some(rest) = e.name.strip_prefix("block") {
            let l: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .expect("block parameter names carry their index");
            if let Some(g) = tape.grad(bound.vars[i]) {
                param_sq[l - 1] += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    let activation_norms = block_inputs
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.norm()).unwrap_or(0.0))
        .collect();
    Ok(GradNormProfile {
        param_norms: param_sq.iter().map(|s| s.sqrt()).collect(),
        activation_norms,
    })
}
