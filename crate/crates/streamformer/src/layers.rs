//! Transformer building blocks: layer normalization, Pre-Norm / Post-Norm
//! residual blocks, position-wise feed-forward, the interleaved 1-D
//! convolution sublayer, and the two front-ends (linear, VGG).
//!
//! Front-end geometry feeds the latency accounting in `streaming`: the VGG
//! encoder time-pools its input by 2 *before* the four same-padded 3x3
//! convolutions, so its receptive field extends exactly 4 output frames to
//! each side and the reported lookahead is exact rather than an upper bound.

use crate::attention::{multi_head, MhaVars};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Mask, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScheme {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<S: Scalar>(self, tape: &mut Tape<S>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
    pub eps: f64,
}

pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LayerNormVars) -> Result<Var> {
    tape.layer_norm(x, p.gain, p.bias, p.eps)
}

#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub activation: Activation,
}

/// Inverted dropout: keep with probability `1 - p`, rescale by `1/(1 - p)`.
/// `p = 0` or a missing rng (eval mode) is the identity, bit for bit.
pub struct DropoutCtx<'a> {
    pub p: f64,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> DropoutCtx<'a> {
    pub fn eval() -> Self {
        DropoutCtx { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut Rng) -> Self {
        DropoutCtx { p, rng: Some(rng) }
    }

    pub fn apply<S: Scalar>(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let rng = match (&mut self.rng, self.p) {
            (Some(rng), p) if p > 0.0 => rng,
            _ => return Ok(x),
        };
        let shape = tape.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        let keep_scale = 1.0 / (1.0 - self.p);
        let data: Vec<S> = (0..numel)
            .map(|_| {
                if rng.bernoulli(1.0 - self.p) {
                    S::from_f64(keep_scale)
                } else {
                    S::ZERO
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(shape, data).unwrap());
        tape.mul(x, mask)
    }
}

/// `W2 * act(W1 x + b1) + b2` per frame; dropout sits on the inner
/// activation.
pub fn feed_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &FfnVars,
    dropout: &mut DropoutCtx,
) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row_bias(h, p.b1)?;
    let h = p.activation.apply(tape, h);
    let h = dropout.apply(tape, h)?;
    let out = tape.matmul(h, p.w2)?;
    tape.add_row_bias(out, p.b2)
}

/// Interleaved-convolution sublayer parameters: kernel `[k, d, d]` with
/// bias, plus the sublayer's own layer norm.
#[derive(Debug, Clone, Copy)]
pub struct IcVars {
    pub kernel: Var,
    pub bias: Var,
    pub ln: LayerNormVars,
}

/// How the interleaved convolution treats time boundaries.
pub enum IcMode {
    /// Same-padded convolution over the whole sequence (offline and
    /// mask-lookahead modes; contributes (k-1)/2 frames of lookahead).
    Full,
    /// Chunk-local: each chunk of `chunk` rows sees `(k-1)/2` trailing rows
    /// of the previous chunk and zero padding at its own right edge, so no
    /// information crosses a chunk boundary forward. Offline reference for
    /// chunk recurrence.
    ChunkLocal { chunk: usize },
    /// One streamed chunk: `prefix` holds the `(k-1)/2` rows preceding the
    /// chunk (empty at stream start).
    Prefixed { prefix: Var },
}

/// Lookahead (frames of future input per occurrence) of a same-padded
/// width-`k` convolution.
pub fn conv1d_lookahead(k: usize) -> u64 {
    ((k - 1) / 2) as u64
}

/// Chunk-structured 1-D convolution used by the chunk-recurrent model: the
/// convolution window never reaches past the end of the chunk it is in, and
/// reaches back at most `(k-1)/2` rows into the previous chunk.
fn chunk_local_conv1d<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    kernel: Var,
    bias: Var,
    chunk: usize,
) -> Result<Var> {
    if chunk == 0 {
        return Err(Error::config("chunk_local_conv1d", "chunk size must be >= 1"));
    }
    let t = tape.shape(x)[0];
    let half = tape.shape(kernel)[0] / 2;
    let mut joined: Option<Var> = None;
    let mut start = 0;
    while start < t {
        let end = (start + chunk).min(t);
        let lead = start.min(half);
        let slice = tape.slice_rows(x, start - lead, end - start + lead)?;
        let conv = tape.conv1d(slice, kernel, bias)?;
        let body = tape.slice_rows(conv, lead, end - start)?;
        joined = Some(match joined {
            Some(acc) => tape.concat_rows(acc, body)?,
            None => body,
        });
        start = end;
    }
    joined.ok_or_else(|| Error::config("chunk_local_conv1d", "empty input"))
}

/// Full transformer block parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub mha: MhaVars,
    pub ffn: FfnVars,
    pub ln1: LayerNormVars,
    pub ln2: LayerNormVars,
    pub ic: Option<IcVars>,
}

/// Result of one block: the block output plus the raw stream that entered
/// the interleaved-convolution sublayer (pre-LN under Pre-Norm). Chunk
/// recurrence caches trailing rows of that stream to seed the next chunk's
/// convolution.
pub struct BlockOut {
    pub out: Var,
    pub conv_input: Option<Var>,
}

/// One residual block: self-attention sublayer, feed-forward sublayer, and
/// (when configured) the interleaved-convolution sublayer, each with its own
/// layer norm placed according to `norm`:
///
/// * Post-Norm: `x <- LN(x + F(x))`
/// * Pre-Norm:  `x <- x + F(LN(x))`
///
/// `kv_prefix` (chunk recurrence) prepends raw hidden rows to the K/V side
/// of attention; under Pre-Norm the prefix is normalized at use, so cached
/// rows and live rows pass through the same LN.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &BlockVars,
    norm: NormScheme,
    mask: Option<&Mask>,
    kv_prefix: Option<Var>,
    ic_mode: IcMode,
    dropout: &mut DropoutCtx,
) -> Result<BlockOut> {
    // Self-attention sublayer.
    let x = match norm {
        NormScheme::Pre => {
            let q_in = layer_norm(tape, x, &p.ln1)?;
            let kv_in = match kv_prefix {
                Some(prefix) => {
                    let joined = tape.concat_rows(prefix, x)?;
                    layer_norm(tape, joined, &p.ln1)?
                }
                None => q_in,
            };
            let attn = multi_head(tape, q_in, kv_in, &p.mha, mask)?;
            let attn = dropout.apply(tape, attn)?;
            tape.add(x, attn)?
        }
        NormScheme::Post => {
            let kv_in = match kv_prefix {
                Some(prefix) => tape.concat_rows(prefix, x)?,
                None => x,
            };
            let attn = multi_head(tape, x, kv_in, &p.mha, mask)?;
            let attn = dropout.apply(tape, attn)?;
            let sum = tape.add(x, attn)?;
            layer_norm(tape, sum, &p.ln1)?
        }
    };

    // Feed-forward sublayer.
    let x = match norm {
        NormScheme::Pre => {
            let h = layer_norm(tape, x, &p.ln2)?;
            let ff = feed_forward(tape, h, &p.ffn, dropout)?;
            tape.add(x, ff)?
        }
        NormScheme::Post => {
            let ff = feed_forward(tape, x, &p.ffn, dropout)?;
            let sum = tape.add(x, ff)?;
            layer_norm(tape, sum, &p.ln2)?
        }
    };

    // Interleaved-convolution sublayer.
    let Some(ic) = &p.ic else {
        return Ok(BlockOut {
            out: x,
            conv_input: None,
        });
    };
    let conv_of = |tape: &mut Tape<S>, h: Var, mode: &IcMode| -> Result<Var> {
        match mode {
            IcMode::Full => tape.conv1d(h, ic.kernel, ic.bias),
            IcMode::ChunkLocal { chunk } => {
                chunk_local_conv1d(tape, h, ic.kernel, ic.bias, *chunk)
            }
            IcMode::Prefixed { prefix } => {
                let rows = tape.shape(h)[0];
                let lead = tape.shape(*prefix)[0];
                let joined = tape.concat_rows(*prefix, h)?;
                let conv = tape.conv1d(joined, ic.kernel, ic.bias)?;
                tape.slice_rows(conv, lead, rows)
            }
        }
    };
    let out = match norm {
        NormScheme::Pre => {
            let conv = match &ic_mode {
                // Normalize prefix rows together with the chunk so cached
                // and live rows see identical statistics handling.
                IcMode::Prefixed { prefix } => {
                    let lead = tape.shape(*prefix)[0];
                    let rows = tape.shape(x)[0];
                    let joined = tape.concat_rows(*prefix, x)?;
                    let normed = layer_norm(tape, joined, &ic.ln)?;
                    let normed_prefix = tape.slice_rows(normed, 0, lead)?;
                    let normed_body = tape.slice_rows(normed, lead, rows)?;
                    conv_of(
                        tape,
                        normed_body,
                        &IcMode::Prefixed {
                            prefix: normed_prefix,
                        },
                    )?
                }
                _ => {
                    let h = layer_norm(tape, x, &ic.ln)?;
                    conv_of(tape, h, &ic_mode)?
                }
            };
            let conv = dropout.apply(tape, conv)?;
            tape.add(x, conv)?
        }
        NormScheme::Post => {
            let conv = conv_of(tape, x, &ic_mode)?;
            let conv = dropout.apply(tape, conv)?;
            let sum = tape.add(x, conv)?;
            layer_norm(tape, sum, &ic.ln)?
        }
    };
    Ok(BlockOut {
        out,
        conv_input: Some(x),
    })
}

// ---- front-ends ----------------------------------------------------------------

pub const VGG_CONV_LAYERS: usize = 4;
pub const VGG_KERNEL: usize = 3;

/// Lookahead of the VGG front-end in *output* frames: the time pool runs
/// first, so each of the four same-padded 3x3 convolutions contributes one
/// output frame of future context.
pub fn vgg_lookahead_frames() -> u64 {
    (VGG_CONV_LAYERS * ((VGG_KERNEL - 1) / 2)) as u64
}

/// Past context of the VGG front-end in output frames (symmetric kernels).
pub fn vgg_past_frames() -> u64 {
    vgg_lookahead_frames()
}

pub fn vgg_out_len(t_in: usize) -> usize {
    t_in / 2
}

#[derive(Debug, Clone, Copy)]
pub struct VggVars {
    pub kernels: [Var; VGG_CONV_LAYERS],
    pub biases: [Var; VGG_CONV_LAYERS],
    pub proj_w: Var,
    pub proj_b: Var,
}

/// VGG-style front-end over `[T, n_features]` log-mel frames:
/// time-max-pool x2, then four 3x3 convolutions (ReLU) with two frequency
/// max-pools, then a linear map to the model dimension. Output frame rate is
/// half the input rate.
pub fn vgg_encoder<S: Scalar>(tape: &mut Tape<S>, features: Var, v: &VggVars) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "vgg_encoder",
            lhs: s,
            rhs: vec![],
        });
    }
    let (t, f) = (s[0], s[1]);
    if t < 2 {
        return Err(Error::config(
            "vgg_encoder",
            format!("need at least 2 input frames, got {t}"),
        ));
    }
    let x = tape.reshape(features, vec![t, f, 1])?;
    let x = tape.maxpool_time(x)?;
    let x = tape.conv2d(x, v.kernels[0], v.biases[0])?;
    let x = tape.relu(x);
    let x = tape.conv2d(x, v.kernels[1], v.biases[1])?;
    let x = tape.relu(x);
    let x = tape.maxpool_freq(x)?;
    let x = tape.conv2d(x, v.kernels[2], v.biases[2])?;
    let x = tape.relu(x);
    let x = tape.conv2d(x, v.kernels[3], v.biases[3])?;
    let x = tape.relu(x);
    let x = tape.maxpool_freq(x)?;
    let out_shape = tape.shape(x).to_vec();
    let flat = tape.reshape(x, vec![out_shape[0], out_shape[1] * out_shape[2]])?;
    let proj = tape.matmul(flat, v.proj_w)?;
    tape.add_row_bias(proj, v.proj_b)
}

#[derive(Debug, Clone, Copy)]
pub struct LinearEncoderVars {
    pub w: Var,
    pub b: Var,
}

/// Single affine projection to the model dimension; zero lookahead.
pub fn linear_encoder<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    v: &LinearEncoderVars,
) -> Result<Var> {
    let proj = tape.matmul(features, v.w)?;
    tape.add_row_bias(proj, v.b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{finite_diff_check, DEFAULT_EPS};

    fn ln_vars(tape: &mut Tape<f64>, d: usize, grad: bool) -> LayerNormVars {
        LayerNormVars {
            gain: tape.leaf(Tensor::full(vec![d], 1.0), grad),
            bias: tape.leaf(Tensor::zeros(vec![d]), grad),
            eps: 1e-5,
        }
    }

    fn mat(tape: &mut Tape<f64>, rng: &mut Rng, r: usize, c: usize, grad: bool) -> Var {
        tape.leaf(Tensor::rand_uniform(vec![r, c], 0.4, rng), grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn random_block(
        tape: &mut Tape<f64>,
        d: usize,
        d_ff: usize,
        n_heads: usize,
        ic: bool,
        rng: &mut Rng,
        grad: bool,
        zero_output_projections: bool,
    ) -> BlockVars {
        let wq = mat(tape, rng, d, d, grad);
        let wk = mat(tape, rng, d, d, grad);
        let wv = mat(tape, rng, d, d, grad);
        let wo = if zero_output_projections {
            tape.leaf(Tensor::zeros(vec![d, d]), grad)
        } else {
            mat(tape, rng, d, d, grad)
        };
        let w1 = mat(tape, rng, d, d_ff, grad);
        let w2 = if zero_output_projections {
            tape.leaf(Tensor::zeros(vec![d_ff, d]), grad)
        } else {
            mat(tape, rng, d_ff, d, grad)
        };
        let mha = MhaVars {
            wq,
            bq: tape.leaf(Tensor::zeros(vec![d]), grad),
            wk,
            bk: tape.leaf(Tensor::zeros(vec![d]), grad),
            wv,
            bv: tape.leaf(Tensor::zeros(vec![d]), grad),
            wo,
            bo: tape.leaf(Tensor::zeros(vec![d]), grad),
            n_heads,
        };
        let ffn = FfnVars {
            w1,
            b1: tape.leaf(Tensor::zeros(vec![d_ff]), grad),
            w2,
            b2: tape.leaf(Tensor::zeros(vec![d]), grad),
            activation: Activation::Relu,
        };
        let ic = if ic {
            let kernel = if zero_output_projections {
                tape.leaf(Tensor::zeros(vec![3, d, d]), grad)
            } else {
                tape.leaf(Tensor::rand_uniform(vec![3, d, d], 0.3, rng), grad)
            };
            Some(IcVars {
                kernel,
                bias: tape.leaf(Tensor::zeros(vec![d]), grad),
                ln: ln_vars(tape, d, grad),
            })
        } else {
            None
        };
        BlockVars {
            mha,
            ffn,
            ln1: ln_vars(tape, d, grad),
            ln2: ln_vars(tape, d, grad),
            ic,
        }
    }

    #[test]
    fn layer_norm_zero_variance_row_maps_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 4], 3.5), false);
        let p = ln_vars(&mut tape, 4, false);
        let y = layer_norm(&mut tape, x, &p).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::rand_uniform(vec![6, 16], 3.0, &mut rng), false);
        let p = ln_vars(&mut tape, 16, false);
        let y = layer_norm(&mut tape, x, &p).unwrap();
        for r in 0..6 {
            let row = tape.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    #[test]
    fn layer_norm_affine_recovery() {
        // gain = sigma, bias = mu reproduces a row with those statistics.
        let mut rng = Rng::new(2);
        let d = 8;
        let raw: Vec<f64> = (0..d).map(|_| rng.uniform(2.0)).collect();
        let mu = raw.iter().sum::<f64>() / d as f64;
        let var = raw.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![1, d], &raw).unwrap(), false);
        let p = LayerNormVars {
            gain: tape.leaf(Tensor::full(vec![d], var.sqrt()), false),
            bias: tape.leaf(Tensor::full(vec![d], mu), false),
            eps: 1e-10,
        };
        let y = layer_norm(&mut tape, x, &p).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&raw) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn post_norm_with_zero_sublayers_is_iterated_layer_norm() {
        let mut rng = Rng::new(3);
        let (t, d) = (3, 8);
        let x_t = Tensor::<f64>::rand_uniform(vec![t, d], 2.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x_t.clone(), false);
        let block = random_block(&mut tape, d, 16, 2, false, &mut rng, false, true);
        let y = block_forward(
            &mut tape,
            x,
            &block,
            NormScheme::Post,
            None,
            None,
            IcMode::Full,
            &mut DropoutCtx::eval(),
        )
        .unwrap()
        .out;
        // Reference: LN(LN(x)) with the same parameters.
        let l1 = layer_norm(&mut tape, x, &block.ln1).unwrap();
        let l2 = layer_norm(&mut tape, l1, &block.ln2).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(l2).data());
    }

    #[test]
    fn pre_norm_with_zero_sublayers_is_identity() {
        let mut rng = Rng::new(4);
        let (t, d) = (4, 8);
        let x_t = Tensor::<f64>::rand_uniform(vec![t, d], 2.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let mut x = tape.leaf(x_t.clone(), false);
        for _ in 0..7 {
            let block = random_block(&mut tape, d, 16, 2, false, &mut rng, false, true);
            x = block_forward(
                &mut tape,
                x,
                &block,
                NormScheme::Pre,
                None,
                None,
                IcMode::Full,
                &mut DropoutCtx::eval(),
            )
            .unwrap()
            .out;
        }
        assert_eq!(tape.value(x).data(), x_t.data());
    }

    #[test]
    fn single_frame_block_is_well_defined() {
        let mut rng = Rng::new(5);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::rand_uniform(vec![1, 8], 1.0, &mut rng), false);
        let block = random_block(&mut tape, 8, 16, 2, false, &mut rng, false, false);
        let y = block_forward(
            &mut tape,
            x,
            &block,
            NormScheme::Post,
            None,
            None,
            IcMode::Full,
            &mut DropoutCtx::eval(),
        )
        .unwrap()
        .out;
        assert_eq!(tape.shape(y), &[1, 8]);
        assert!(tape.value(y).is_all_finite());
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        // The readout weights the output with a fixed random matrix: a plain
        // sum is degenerate for post-norm (normalized rows sum to a
        // constant), leaving nothing but rounding noise to compare.
        let mut rng = Rng::new(6);
        let x = Tensor::<f64>::rand_uniform(vec![4, 8], 1.0, &mut rng);
        let readout = Tensor::<f64>::rand_uniform(vec![4, 8], 1.0, &mut rng);
        for norm in [NormScheme::Pre, NormScheme::Post] {
            let block_rng = Rng::new(7);
            let err = finite_diff_check(
                &|tape: &mut Tape<f64>, vars: &[Var]| {
                    let mut rng = block_rng.clone();
                    let block = random_block(tape, 8, 12, 2, false, &mut rng, false, false);
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
                    let w = tape.constant(readout.clone());
                    let weighted = tape.mul(y, w)?;
                    Ok(tape.sum(weighted))
                },
                std::slice::from_ref(&x),
                DEFAULT_EPS,
                &[],
            )
            .unwrap();
            assert!(err <= 1e-4, "{norm:?}: rel err {err}");
        }
    }

    #[test]
    fn feed_forward_zero_weights_yield_bias_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![3, 4], 2.0), false);
        let p = FfnVars {
            w1: tape.leaf(Tensor::zeros(vec![4, 8]), false),
            b1: tape.leaf(Tensor::zeros(vec![8]), false),
            w2: tape.leaf(Tensor::zeros(vec![8, 4]), false),
            b2: tape.leaf(Tensor::from_f64s(vec![4], &[1.0, 2.0, 3.0, 4.0]).unwrap(), false),
            activation: Activation::Relu,
        };
        let y = feed_forward(&mut tape, x, &p, &mut DropoutCtx::eval()).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(y).row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn feed_forward_is_frame_wise() {
        let mut rng = Rng::new(8);
        let (t, d) = (5, 4);
        let x = Tensor::<f64>::rand_uniform(vec![t, d], 1.0, &mut rng);
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut prng = Rng::new(99);
            let xv = tape.leaf(input.clone(), false);
            let p = FfnVars {
                w1: tape.leaf(Tensor::rand_uniform(vec![d, 8], 0.5, &mut prng), false),
                b1: tape.leaf(Tensor::rand_uniform(vec![8], 0.5, &mut prng), false),
                w2: tape.leaf(Tensor::rand_uniform(vec![8, d], 0.5, &mut prng), false),
                b2: tape.leaf(Tensor::rand_uniform(vec![d], 0.5, &mut prng), false),
                activation: Activation::Relu,
            };
            let y = feed_forward(&mut tape, xv, &p, &mut DropoutCtx::eval()).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        // Permute frames; outputs must permute identically.
        let perm = [4usize, 2, 0, 3, 1];
        let mut permuted = vec![0.0; t * d];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * d..(dst + 1) * d].copy_from_slice(x.row(src));
        }
        let shuffled = run(&Tensor::from_f64s(vec![t, d], &permuted).unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(shuffled.row(dst), base.row(src));
        }
    }

    #[test]
    fn interleaved_conv_receptive_field_is_one_frame_each_side() {
        assert_eq!(conv1d_lookahead(3), 1);
        // Perturbation probe: output frame t reacts to inputs t-1..=t+1 only.
        let mut rng = Rng::new(9);
        let (t, d) = (8, 4);
        let x = Tensor::<f64>::rand_uniform(vec![t, d], 1.0, &mut rng);
        let kernel = Tensor::<f64>::rand_uniform(vec![3, d, d], 0.5, &mut rng);
        let bias = Tensor::<f64>::rand_uniform(vec![d], 0.5, &mut rng);
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(input.clone(), false);
            let kv = tape.leaf(kernel.clone(), false);
            let bv = tape.leaf(bias.clone(), false);
            let y = tape.conv1d(xv, kv, bv).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        let probe_t = 4usize;
        for delta in [-3i64, -2, 2, 3] {
            let src = (probe_t as i64 + delta) as usize;
            let mut x2 = x.clone();
            x2.data_mut()[src * d] += 10.0;
            let out = run(&x2);
            assert_eq!(
                out.row(probe_t),
                base.row(probe_t),
                "frame {probe_t} must ignore input {src}"
            );
        }
        for delta in [-1i64, 0, 1] {
            let src = (probe_t as i64 + delta) as usize;
            let mut x2 = x.clone();
            x2.data_mut()[src * d] += 10.0;
            let out = run(&x2);
            assert_ne!(out.row(probe_t), base.row(probe_t));
        }
    }

    fn random_vgg(tape: &mut Tape<f64>, d_model: usize, rng: &mut Rng) -> VggVars {
        let ch = [1usize, 4, 4, 8, 8];
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for i in 0..VGG_CONV_LAYERS {
            kernels.push(tape.leaf(
                Tensor::rand_uniform(vec![3, 3, ch[i], ch[i + 1]], 0.4, rng),
                false,
            ));
            biases.push(tape.leaf(Tensor::rand_uniform(vec![ch[i + 1]], 0.4, rng), false));
        }
        VggVars {
            kernels: kernels.try_into().unwrap(),
            biases: biases.try_into().unwrap(),
            // Frequency axis: 8 -> 4 -> 2 after the two pools; 2 * 8 = 16 in.
            proj_w: tape.leaf(Tensor::rand_uniform(vec![16, d_model], 0.4, rng), false),
            proj_b: tape.leaf(Tensor::rand_uniform(vec![d_model], 0.4, rng), false),
        }
    }

    #[test]
    fn vgg_halves_time_and_projects_to_model_dim() {
        let mut rng = Rng::new(10);
        for t_in in [2usize, 9, 16] {
            let mut tape = Tape::<f64>::new();
            let features = tape.leaf(Tensor::rand_uniform(vec![t_in, 8], 1.0, &mut rng), false);
            let vgg = random_vgg(&mut tape, 12, &mut rng);
            let y = vgg_encoder(&mut tape, features, &vgg).unwrap();
            assert_eq!(tape.shape(y), &[t_in / 2, 12]);
        }
    }

    #[test]
    fn vgg_rejects_single_frame() {
        let mut rng = Rng::new(11);
        let mut tape = Tape::<f64>::new();
        let features = tape.leaf(Tensor::rand_uniform(vec![1, 8], 1.0, &mut rng), false);
        let vgg = random_vgg(&mut tape, 12, &mut rng);
        assert!(vgg_encoder(&mut tape, features, &vgg).is_err());
    }

    #[test]
    fn vgg_reported_lookahead_is_four_output_frames() {
        assert_eq!(vgg_lookahead_frames(), 4);
    }

    #[test]
    fn vgg_lookahead_matches_perturbation_boundary() {
        // Changing input frames beyond the reported lookahead never changes
        // an interior output frame; changing the boundary frame does.
        let mut rng = Rng::new(12);
        let (t_in, f) = (32usize, 8usize);
        let x = Tensor::<f64>::rand_uniform(vec![t_in, f], 1.0, &mut rng);
        let param_rng = Rng::new(13);
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut prng = param_rng.clone();
            let xv = tape.leaf(input.clone(), false);
            let vgg = random_vgg(&mut tape, 12, &mut prng);
            let y = vgg_encoder(&mut tape, xv, &vgg).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        let probe_out = 5usize; // output frame index
        let lookahead = vgg_lookahead_frames() as usize;
        // Output tau covers pooled frames tau-4..=tau+4, i.e. raw inputs
        // 2(tau-4)..=2(tau+4)+1. One past the right edge: 2(tau+4)+2.
        let beyond = 2 * (probe_out + lookahead) + 2;
        let mut x2 = x.clone();
        for c in 0..f {
            x2.data_mut()[beyond * f + c] += 10.0;
        }
        let out = run(&x2);
        assert_eq!(out.row(probe_out), base.row(probe_out));
        // Just inside: raw input 2(tau+4)+1 can change the output. A large
        // positive bump always survives the max-pool.
        let inside = 2 * (probe_out + lookahead) + 1;
        let mut x3 = x.clone();
        for c in 0..f {
            x3.data_mut()[inside * f + c] += 10.0;
        }
        let out = run(&x3);
        assert_ne!(out.row(probe_out), base.row(probe_out));
    }

    #[test]
    fn linear_encoder_zero_weights_yield_bias_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![3, 5], 2.0), false);
        let enc = LinearEncoderVars {
            w: tape.leaf(Tensor::zeros(vec![5, 4]), false),
            b: tape.leaf(Tensor::from_f64s(vec![4], &[1.0, 2.0, 3.0, 4.0]).unwrap(), false),
        };
        let y = linear_encoder(&mut tape, x, &enc).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(y).row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn linear_encoder_matches_per_frame_loop() {
        let mut rng = Rng::new(14);
        let (t, f, d) = (4, 5, 3);
        let x = Tensor::<f64>::rand_uniform(vec![t, f], 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(vec![f, d], 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(vec![d], 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), false);
        let enc = LinearEncoderVars {
            w: tape.leaf(w.clone(), false),
            b: tape.leaf(b.clone(), false),
        };
        let y = linear_encoder(&mut tape, xv, &enc).unwrap();
        for r in 0..t {
            for o in 0..d {
                let mut want = b.data()[o];
                for c in 0..f {
                    want += x.data()[r * f + c] * w.data()[c * d + o];
                }
                assert!((tape.value(y).data()[r * d + o] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn chunked_conv_respects_chunk_boundaries() {
        // Frame at a chunk end must not see the next chunk's first frame;
        // frame at a chunk start must see the previous chunk's last frame.
        let mut rng = Rng::new(15);
        let (t, d, chunk) = (12usize, 3usize, 4usize);
        let x = Tensor::<f64>::rand_uniform(vec![t, d], 1.0, &mut rng);
        let kernel = Tensor::<f64>::rand_uniform(vec![3, d, d], 0.5, &mut rng);
        let bias = Tensor::<f64>::rand_uniform(vec![d], 0.5, &mut rng);
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(input.clone(), false);
            let kv = tape.leaf(kernel.clone(), false);
            let bv = tape.leaf(bias.clone(), false);
            let y = chunk_local_conv1d(&mut tape, xv, kv, bv, chunk).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        // Perturb frame 4 (start of chunk 1): frame 3 (end of chunk 0) must
        // not change, frame 5 must.
        let mut x2 = x.clone();
        x2.data_mut()[4 * d] += 10.0;
        let out = run(&x2);
        assert_eq!(out.row(3), base.row(3), "no forward leak across boundary");
        assert_ne!(out.row(5), base.row(5));
        // Perturb frame 3 (end of chunk 0): frame 4 (start of chunk 1) does
        // see it (one-frame history).
        let mut x3 = x.clone();
        x3.data_mut()[3 * d] += 10.0;
        let out = run(&x3);
        assert_ne!(out.row(4), base.row(4));
        assert_eq!(out.row(5), base.row(5), "history reach is one frame only");
    }
}
