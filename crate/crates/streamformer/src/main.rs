//! Command-line surface: context/latency analysis, gradient verification,
//! streaming-equivalence checks, training, inference, init statistics,
//! parameter accounting, and the streaming cost benchmark.
//!
//! Exit codes: 0 pass, 1 verification failure, 2 usage error, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use streamformer::attention::{ContextWindow, Extent};
use streamformer::error::Error;
use streamformer::init::{init_bound, ks_critical_1pct, ks_statistic_uniform, InitScheme, InitSpec};
use streamformer::io::FeatureFile;
use streamformer::model::{
    count_from_specs, load_model, AcousticModel, FrontEndKind, LoadedModel, ModelConfig,
    StreamingSpec,
};
use streamformer::rng::Rng;
use streamformer::streaming::{
    accumulate_context, latency_ms, masked_incremental_times, masked_stream_forward, stream_infer,
    Streamer,
};
use streamformer::tensor::{Scalar, Tensor};
use streamformer::trainer::{train, Schedule, SyntheticTask, TrainOptions};

#[derive(Parser)]
#[command(
    name = "streamformer",
    about = "Streaming Transformer acoustic-model toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Text,
    Tsv,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrontArg {
    Linear,
    Vgg,
}

#[derive(Clone, Copy, ValueEnum)]
enum InferMode {
    Offline,
    Masked,
    Xl,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    XavierUniform,
    DepthScale,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer and accumulated context windows with the resulting latency.
    AnalyzeContext {
        #[arg(long)]
        layers: usize,
        /// Per-layer window as L:R, e.g. -2:1 or -inf:3.
        #[arg(long, allow_hyphen_values = true)]
        window: String,
        /// Count an interleaved convolution per block.
        #[arg(long)]
        ic: bool,
        #[arg(long, value_enum, default_value = "linear")]
        frontend: FrontArg,
        /// Output frame period in milliseconds.
        #[arg(long, default_value = "20")]
        frame_ms: u64,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
    /// Finite-difference verification of every primitive and block.
    GradCheck {
        #[arg(long, default_value = "1")]
        seed: u64,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        #[arg(long, default_value = "10")]
        seeds: u32,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
    /// Chunked streaming vs the offline block-mask oracle.
    StreamEquiv {
        #[arg(long, default_value = "4")]
        layers: usize,
        #[arg(long, default_value = "16")]
        chunk: usize,
        #[arg(long, default_value = "96")]
        seqlen: usize,
        #[arg(long, default_value = "16")]
        dk: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long, value_enum, default_value = "linear")]
        frontend: FrontArg,
        #[arg(long)]
        ic: bool,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        /// Defaults to 1e-10 at f64 and 1e-5 at f32.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Train on the bundled synthetic task.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "synthetic")]
        task: String,
        #[arg(long)]
        steps: Option<u64>,
        /// Stop once held-out frame accuracy reaches this value.
        #[arg(long)]
        target_acc: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Log-posterior inference over a feature file.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum)]
        mode: InferMode,
        /// Window for masked mode, as L:R.
        #[arg(long, allow_hyphen_values = true)]
        window: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialization bounds, sample variance, and KS statistics per layer.
    InitStats {
        #[arg(long, value_enum, default_value = "depth-scale")]
        scheme: SchemeArg,
        #[arg(long, default_value = "4")]
        layers: usize,
        #[arg(long, default_value = "512")]
        d_in: usize,
        #[arg(long, default_value = "512")]
        d_out: usize,
        #[arg(long, default_value = "1")]
        seed: u64,
        #[arg(long, default_value = "1000000")]
        samples: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
    /// Parameter count and component breakdown for a config.
    ParamCount {
        #[arg(long, conflicts_with = "reference")]
        config: Option<PathBuf>,
        /// Named reference configuration (table2-8x624).
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
    /// Per-chunk cost of chunk-recurrent inference vs masked recompute.
    StreamBench {
        #[arg(long, default_value = "4")]
        layers: usize,
        #[arg(long, default_value = "32")]
        dk: usize,
        #[arg(long, default_value = "16")]
        chunk: usize,
        #[arg(long, default_value = "100")]
        chunks: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
        /// Also measure the masked-lookahead recompute baseline.
        #[arg(long)]
        masked_baseline: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Io(_) | Error::FileFormat { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<u8, Error> {
    match cmd {
        Cmd::AnalyzeContext {
            layers,
            window,
            ic,
            frontend,
            frame_ms,
            format,
        } => analyze_context(layers, &window, ic, frontend, frame_ms, format),
        Cmd::GradCheck {
            seed,
            dtype,
            seeds,
            format,
        } => grad_check(seed, dtype, seeds, format),
        Cmd::StreamEquiv {
            layers,
            chunk,
            seqlen,
            dk,
            seed,
            frontend,
            ic,
            dtype,
            tolerance,
        } => stream_equiv(
            layers, chunk, seqlen, dk, seed, frontend, ic, dtype, tolerance,
        ),
        Cmd::Train {
            config,
            task,
            steps,
            target_acc,
            out,
        } => cmd_train(&config, &task, steps, target_acc, &out),
        Cmd::Infer {
            model,
            features,
            mode,
            window,
            out,
        } => cmd_infer(&model, &features, mode, window.as_deref(), &out),
        Cmd::InitStats {
            scheme,
            layers,
            d_in,
            d_out,
            seed,
            samples,
            format,
        } => init_stats(scheme, layers, d_in, d_out, seed, samples, format),
        Cmd::ParamCount {
            config,
            reference,
            format,
        } => param_count(config.as_deref(), reference.as_deref(), format),
        Cmd::StreamBench {
            layers,
            dk,
            chunk,
            chunks,
            seed,
            masked_baseline,
        } => stream_bench(layers, dk, chunk, chunks, seed, masked_baseline),
    }
}

fn analyze_context(
    layers: usize,
    window: &str,
    ic: bool,
    frontend: FrontArg,
    frame_ms: u64,
    format: OutputFormat,
) -> Result<u8, Error> {
    if layers == 0 {
        return Err(Error::config("analyze-context", "layers must be >= 1"));
    }
    let w = ContextWindow::from_str(window)?;
    let enc = match frontend {
        FrontArg::Linear => (0, 0),
        FrontArg::Vgg => (
            streamformer::layers::vgg_past_frames(),
            streamformer::layers::vgg_lookahead_frames(),
        ),
    };
    let latency_of = |acc: &ContextWindow| match acc.future {
        Extent::Finite(f) => format!("{}", latency_ms(f, frame_ms)),
        Extent::Unbounded => "inf".to_string(),
    };
    println!("layer\tper_layer\taccumulated\tright_frames\tlatency_ms");
    if enc != (0, 0) {
        let acc = ContextWindow {
            past: Extent::Finite(enc.0),
            future: Extent::Finite(enc.1),
        };
        println!(
            "frontend\t[-{}, {}]\t{}\t{}\t{}",
            enc.0,
            enc.1,
            acc,
            enc.1,
            latency_of(&acc)
        );
    }
    for l in 1..=layers {
        let acc = accumulate_context(&w, l, ic, enc);
        let right = match acc.future {
            Extent::Finite(f) => f.to_string(),
            Extent::Unbounded => "inf".to_string(),
        };
        println!("{l}\t{w}\t{acc}\t{right}\t{}", latency_of(&acc));
    }
    let total = accumulate_context(&w, layers, ic, enc);
    if matches!(format, OutputFormat::Text) {
        println!(
            "total context {total}, latency {} ms at {frame_ms} ms frames",
            latency_of(&total)
        );
    }
    Ok(0)
}

fn grad_check(seed: u64, dtype: DtypeArg, seeds: u32, format: OutputFormat) -> Result<u8, Error> {
    // f32 cannot reach the f64 tolerances; it runs in report-only mode with
    // degraded thresholds and never fails hard.
    let (results, hard_fail) = match dtype {
        DtypeArg::F64 => (
            streamformer::gradcheck::run_suite::<f64>(seed, seeds, 1e-6, 1e-4)?,
            true,
        ),
        DtypeArg::F32 => (
            streamformer::gradcheck::run_suite::<f32>(seed, seeds, 5e-2, 5e-1)?,
            false,
        ),
    };
    println!("case\tkind\tmax_rel_err\tthreshold\tstatus");
    let mut failures = 0usize;
    for r in &results {
        let kind = if r.composite { "block" } else { "primitive" };
        let status = if r.passed { "pass" } else { "FAIL" };
        println!(
            "{}\t{}\t{:.3e}\t{:.1e}\t{}",
            r.name, kind, r.max_rel_err, r.threshold, status
        );
        if !r.passed {
            failures += 1;
        }
    }
    if matches!(format, OutputFormat::Text) {
        println!(
            "{} cases, {} failures ({} seeds each)",
            results.len(),
            failures,
            seeds
        );
        if !hard_fail {
            println!("f32 mode is informational; thresholds are degraded and not enforced");
        }
    }
    Ok(if hard_fail && failures > 0 { 1 } else { 0 })
}

#[allow(clippy::too_many_arguments)]
fn stream_equiv(
    layers: usize,
    chunk: usize,
    seqlen: usize,
    dk: usize,
    seed: u64,
    frontend: FrontArg,
    ic: bool,
    dtype: DtypeArg,
    tolerance: Option<f64>,
) -> Result<u8, Error> {
    fn check<S: Scalar>(
        layers: usize,
        chunk: usize,
        seqlen: usize,
        dk: usize,
        seed: u64,
        frontend: FrontArg,
        ic: bool,
    ) -> Result<f64, Error> {
        let cfg = ModelConfig {
            depth: layers,
            heads: 2,
            d_model: dk,
            d_ff: 2 * dk,
            dropout: 0.0,
            n_classes: 6,
            n_features: 8,
            interleaved_conv: ic,
            front_end: match frontend {
                FrontArg::Linear => FrontEndKind::Linear,
                FrontArg::Vgg => FrontEndKind::Vgg,
            },
            streaming: StreamingSpec::Xl { chunk },
            seed,
            ..Default::default()
        };
        let model: AcousticModel<S> = AcousticModel::build(cfg)?;
        let mut rng = Rng::derive(seed, "stream-equiv.features");
        let feats = Tensor::<S>::rand_uniform(vec![seqlen, 8], 1.0, &mut rng);
        let oracle = model.forward(&feats, streamformer::model::ForwardMode::Eval)?;
        let (emissions, _) = stream_infer(&model, &feats)?;
        let mut worst: f64 = 0.0;
        for e in &emissions {
            for (got, want) in e.log_posteriors.iter().zip(oracle.row(e.frame_index)) {
                worst = worst.max((got.to_f64() - want.to_f64()).abs());
            }
        }
        Ok(worst)
    }
    let (diff, tol) = match dtype {
        DtypeArg::F64 => (
            check::<f64>(layers, chunk, seqlen, dk, seed, frontend, ic)?,
            tolerance.unwrap_or(1e-10),
        ),
        DtypeArg::F32 => (
            check::<f32>(layers, chunk, seqlen, dk, seed, frontend, ic)?,
            tolerance.unwrap_or(1e-5),
        ),
    };
    println!("max_abs_diff\t{diff:.3e}");
    println!("tolerance\t{tol:.3e}");
    println!("status\t{}", if diff <= tol { "pass" } else { "FAIL" });
    Ok(if diff <= tol { 0 } else { 1 })
}

fn cmd_train(
    config_path: &std::path::Path,
    task_name: &str,
    steps: Option<u64>,
    target_acc: Option<f64>,
    out_dir: &std::path::Path,
) -> Result<u8, Error> {
    if task_name != "synthetic" {
        return Err(Error::config(
            "train",
            format!("unknown task {task_name:?}; bundled task is \"synthetic\""),
        ));
    }
    let source = config_path.display().to_string();
    let text = std::fs::read_to_string(config_path)?;
    let mut extra: Vec<&str> = Schedule::KEYS.to_vec();
    extra.push("task_noise");
    let (cfg, notices) = ModelConfig::parse_text(&text, &source, &extra)?;
    let (sched, sched_notices) = Schedule::parse_text(&text, &source)?;
    for n in notices.iter().chain(&sched_notices) {
        println!("notice: {n}");
    }
    let task_noise = text
        .lines()
        .filter_map(|l| l.split('#').next().unwrap_or("").trim().split_once('='))
        .find(|(k, _)| k.trim() == "task_noise")
        .map(|(_, v)| v.trim().parse::<f64>())
        .transpose()
        .map_err(|_| Error::file(&source, "bad task_noise"))?
        .unwrap_or(0.5);

    std::fs::create_dir_all(out_dir)?;
    let mut model: AcousticModel<f64> = AcousticModel::build(cfg.clone())?;
    let task = SyntheticTask::for_model(&cfg, task_noise);
    let options = TrainOptions {
        steps: steps.unwrap_or(2000),
        target_accuracy: target_acc,
        ..Default::default()
    };
    let outcome = train(&mut model, &task, &sched, &options)?;

    let log_path = out_dir.join("train.log");
    let mut log = String::new();
    for record in &outcome.records {
        log.push_str(&record.to_line());
        log.push('\n');
    }
    std::fs::write(&log_path, log)?;
    let model_path = out_dir.join("model.sfm");
    model.save(&model_path)?;
    println!(
        "trained {} steps, final accuracy {}",
        outcome.steps_run,
        outcome
            .final_accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into())
    );
    println!("log: {}", log_path.display());
    println!("checkpoint: {}", model_path.display());
    Ok(0)
}

fn cmd_infer(
    model_path: &std::path::Path,
    features_path: &std::path::Path,
    mode: InferMode,
    window: Option<&str>,
    out_path: &std::path::Path,
) -> Result<u8, Error> {
    let loaded = load_model(model_path)?;
    let features = FeatureFile::read(features_path)?;
    match loaded {
        LoadedModel::F64(model) => infer_impl(&model, &features, mode, window, out_path),
        LoadedModel::F32(model) => infer_impl(&model, &features, mode, window, out_path),
    }
}

fn infer_impl<S: Scalar>(
    model: &AcousticModel<S>,
    features: &FeatureFile,
    mode: InferMode,
    window: Option<&str>,
    out_path: &std::path::Path,
) -> Result<u8, Error> {
    let feats: Tensor<S> = features.to_tensor();
    let out_period = match model.config().front_end {
        FrontEndKind::Linear => features.frame_period_ms,
        FrontEndKind::Vgg => features.frame_period_ms * 2,
    };
    let logp: Tensor<S> = match mode {
        InferMode::Offline => {
            // Unbounded window equals the unmasked forward bit for bit and
            // ignores any streaming restriction in the checkpoint config.
            masked_stream_forward(model, &feats, &ContextWindow::unbounded())?
        }
        InferMode::Masked => {
            let w = match (window, model.config().streaming) {
                (Some(s), _) => ContextWindow::from_str(s)?,
                (None, StreamingSpec::Masked(w)) => w,
                (None, _) => {
                    return Err(Error::config(
                        "infer",
                        "masked mode needs --window or a masked model config",
                    ))
                }
            };
            masked_stream_forward(model, &feats, &w)?
        }
        InferMode::Xl => {
            // Feed the stream in pieces so labels flow out while input is
            // still arriving, the way a live decoder would consume them.
            let mut streamer = Streamer::new(model)?;
            let mut rows: Vec<Vec<S>> = Vec::new();
            let mut consume = |emissions: Vec<streamformer::streaming::Emission<S>>| {
                for e in emissions {
                    println!(
                        "emit\tframe={}\tat_ms={}",
                        e.frame_index,
                        e.frame_index as u64 * out_period as u64
                    );
                    rows.push(e.log_posteriors);
                }
            };
            let t = feats.shape()[0];
            let piece = match model.config().streaming {
                StreamingSpec::Xl { chunk } => chunk.max(1),
                _ => unreachable!("Streamer::new validated the mode"),
            };
            let mut offset = 0;
            while offset < t {
                let len = piece.min(t - offset);
                consume(streamer.push(&feats.slice_rows(offset, len))?);
                offset += len;
            }
            consume(streamer.finish()?);
            let k = model.config().n_classes;
            let mut data = Vec::with_capacity(rows.len() * k);
            for row in &rows {
                data.extend_from_slice(row);
            }
            Tensor::new(vec![rows.len(), k], data).unwrap()
        }
    };
    let out_file = FeatureFile::new(logp.cast::<f32>(), out_period)?;
    out_file.write(out_path)?;
    println!(
        "wrote {} frames x {} classes to {}",
        out_file.frame_count(),
        out_file.feature_dim(),
        out_path.display()
    );
    Ok(0)
}

fn init_stats(
    scheme: SchemeArg,
    layers: usize,
    d_in: usize,
    d_out: usize,
    seed: u64,
    samples: usize,
    format: OutputFormat,
) -> Result<u8, Error> {
    let scheme = match scheme {
        SchemeArg::XavierUniform => InitScheme::XavierUniform,
        SchemeArg::DepthScale => InitScheme::DepthScale,
    };
    println!("layer\tbound\tempirical_var\texpected_var\tvar_rel_dev\tks_stat\tks_critical_1pct");
    let mut failures = 0usize;
    for layer in 1..=layers.max(1) {
        let spec = InitSpec {
            scheme,
            layer,
            d_in,
            d_out,
            seed: seed ^ layer as u64,
        };
        let bound = init_bound(&spec)?;
        let mut rng = Rng::derive(seed, &format!("init-stats.{layer}"));
        let data: Vec<f64> = (0..samples).map(|_| rng.uniform(bound)).collect();
        let var = data.iter().map(|w| w * w).sum::<f64>() / samples as f64;
        let expected = bound * bound / 3.0;
        let dev = (var - expected).abs() / expected;
        let ks_n = samples.min(100_000);
        let ks = ks_statistic_uniform(&data[..ks_n], bound);
        let critical = ks_critical_1pct(ks_n);
        if dev > 0.02 || ks > critical {
            failures += 1;
        }
        println!(
            "{layer}\t{bound:.9}\t{var:.9e}\t{expected:.9e}\t{dev:.5}\t{ks:.6}\t{critical:.6}"
        );
    }
    if matches!(format, OutputFormat::Text) {
        println!(
            "scheme {}: {} layers checked, {} failures",
            scheme.name(),
            layers,
            failures
        );
    }
    Ok(if failures > 0 { 1 } else { 0 })
}

fn param_count(
    config: Option<&std::path::Path>,
    reference_name: Option<&str>,
    format: OutputFormat,
) -> Result<u8, Error> {
    let (cfg, reference): (ModelConfig, Option<f64>) = match (config, reference_name) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            let source = path.display().to_string();
            let mut extra: Vec<&str> = Schedule::KEYS.to_vec();
            extra.push("task_noise");
            let (cfg, notices) = ModelConfig::parse_text(&text, &source, &extra)?;
            for n in &notices {
                println!("notice: {n}");
            }
            (cfg, None)
        }
        (None, Some(name)) => match name {
            "table2-8x624" => (ModelConfig::table2_8h_624(), Some(53.5e6)),
            other => {
                return Err(Error::config(
                    "param-count",
                    format!("unknown reference config {other:?} (try table2-8x624)"),
                ))
            }
        },
        _ => {
            return Err(Error::config(
                "param-count",
                "give exactly one of --config or --reference",
            ))
        }
    };
    let count = count_from_specs(&cfg)?;
    println!("component\tparameters");
    for (name, n) in &count.breakdown {
        println!("{name}\t{n}");
    }
    println!("total\t{}", count.total);
    if let Some(reference) = reference {
        let rel = (count.total as f64 - reference) / reference;
        println!("reference\t{reference}");
        println!("relative_deviation\t{rel:+.4}");
        if matches!(format, OutputFormat::Text) {
            println!(
                "residual comes from biases, the VGG channel widths and the \
                 final layer norm, none of which the reference pins down"
            );
        }
        return Ok(if rel.abs() <= 0.15 { 0 } else { 1 });
    }
    Ok(0)
}

fn stream_bench(
    layers: usize,
    dk: usize,
    chunk: usize,
    chunks: usize,
    seed: u64,
    masked_baseline: bool,
) -> Result<u8, Error> {
    if chunks < 10 {
        return Err(Error::config("stream-bench", "need at least 10 chunks"));
    }
    let cfg = ModelConfig {
        depth: layers,
        heads: 2,
        d_model: dk,
        d_ff: 2 * dk,
        dropout: 0.0,
        n_classes: 16,
        n_features: 8,
        streaming: StreamingSpec::Xl { chunk },
        seed,
        ..Default::default()
    };
    let model: AcousticModel<f64> = AcousticModel::build(cfg)?;
    let t = chunk * chunks;
    let mut rng = Rng::derive(seed, "stream-bench.features");
    let feats = Tensor::<f64>::rand_uniform(vec![t, 8], 1.0, &mut rng);
    // Warm-up pass so allocator effects don't land on chunk 1.
    let _ = stream_infer(&model, &feats.slice_rows(0, chunk.min(t)))?;
    let (_, stats) = stream_infer(&model, &feats)?;
    let micros: Vec<f64> = stats
        .chunk_times
        .iter()
        .map(|d| d.as_secs_f64() * 1e6)
        .collect();
    println!("chunk\tmicros");
    for (i, us) in micros.iter().enumerate() {
        println!("{i}\t{us:.1}");
    }
    let early = median(&micros[1..micros.len().min(20)]);
    let late = median(&micros[micros.len().saturating_sub(20)..]);
    let ratio = late / early;
    println!("xl_early_median_us\t{early:.1}");
    println!("xl_late_median_us\t{late:.1}");
    println!("xl_late_over_early\t{ratio:.3}");
    if masked_baseline {
        let w = ContextWindow {
            past: Extent::Unbounded,
            future: Extent::Finite(3),
        };
        let masked = masked_incremental_times(&model, &feats, &w, chunk)?;
        let m: Vec<f64> = masked.iter().map(|d| d.as_secs_f64() * 1e6).collect();
        let m_early = median(&m[1..m.len().min(20)]);
        let m_late = median(&m[m.len().saturating_sub(20)..]);
        println!("masked_early_median_us\t{m_early:.1}");
        println!("masked_late_median_us\t{m_late:.1}");
        println!("masked_late_over_early\t{:.3}", m_late / m_early);
    }
    let pass = (0.8..=1.25).contains(&ratio);
    println!("status\t{}", if pass { "pass" } else { "FAIL" });
    Ok(if pass { 0 } else { 1 })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}
