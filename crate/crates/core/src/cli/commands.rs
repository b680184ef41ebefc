use std::io::Write;
use std::path::Path;

use crate::attention::{
    choose_ordering, cosformer_flops_factor, count_exp_ops, flops_estimate, product_mul_adds,
    resolve_order, OrderingPolicy, Variant,
};
use crate::autodiff::Tape;
use crate::bench::{emit_csv, emit_plotdata, format_sig6, run_bench, BenchSpec, Precision};
use crate::cost::ProductOrder;
use crate::error::{Error, Result};
use crate::model::{
    evaluate, load_checkpoint, make_synthetic_dataset, save_checkpoint, traced_classifier,
    train_toy_with, write_trace_csv, Checkpoint, ModelConfig, Pooling, TrainOptions,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::viz::{read_pgm, token_saliency, write_pgm, GrayImage, MatrixKind, SaliencySource};

use super::{
    run_check, BenchArgs, CheckArgs, CheckHooks, CheckOptions, Cli, Command, FlopsArgs, MatrixArg,
    SaliencyArgs, TrainArgs, EXIT_FAILED, EXIT_OK,
};

pub(super) fn dispatch(
    cli: &Cli,
    hooks: &CheckHooks,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let precision = cli.precision.as_deref();
    if precision == Some("32") && !matches!(cli.command, Command::Bench(_)) {
        return Err(Error::Config(
            "--precision 32 is only supported by bench".into(),
        ));
    }
    match &cli.command {
        Command::Check(a) => cmd_check(a, cli.seed, hooks, out, err),
        Command::Bench(a) => {
            let p = if precision == Some("64") {
                Precision::F64
            } else {
                Precision::F32
            };
            cmd_bench(a, cli.seed, p, out, err)
        }
        Command::Train(a) => cmd_train(a, cli.seed, out),
        Command::Saliency(a) => cmd_saliency(a, cli.seed, out),
        Command::Flops(a) => cmd_flops(a, out),
    }
}

fn cmd_check(
    a: &CheckArgs,
    seed: u64,
    hooks: &CheckHooks,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(Error::Config("--sizes must list positive integers".into()));
    }
    if a.trials == 0 {
        let _ = writeln!(err, "warning: --trials 0 runs no checks; passing vacuously");
        return Ok(EXIT_OK);
    }
    let opts = CheckOptions {
        sizes: a.sizes.clone(),
        trials: a.trials,
        seed,
    };
    let results = run_check(&opts, hooks, out)?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        let _ = writeln!(out, "all {} properties passed", results.len());
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(err, "{failed} of {} properties failed", results.len());
        Ok(EXIT_FAILED)
    }
}

fn cmd_bench(
    a: &BenchArgs,
    seed: u64,
    precision: Precision,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let spec = BenchSpec {
        variants: a.variants.iter().map(|&v| v.into()).collect(),
        n_values: a.n_sweep.clone(),
        d_values: a.d_sweep.clone(),
        heads: a.heads,
        repeats: a.repeats,
        warmup: a.warmup,
        fix_ordering: a.fix_ordering,
        precision,
        seed,
    };
    let report = run_bench(&spec)?;
    for note in &report.notes {
        let _ = writeln!(err, "{note}");
    }
    let _ = writeln!(
        out,
        "{:<8} {:>6} {:>6} {:>3} {:<14} {:>12} {:>12} {:>12} {:>12} {:>14}",
        "variant",
        "N",
        "D",
        "H",
        "ordering",
        "mean_ms",
        "min_ms",
        "stddev_ms",
        "exp_ops",
        "mul_adds"
    );
    for r in &report.records {
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>6} {:>3} {:<14} {:>12} {:>12} {:>12} {:>12} {:>14}",
            r.variant.as_str(),
            r.n,
            r.d,
            r.h,
            r.ordering_used.to_string(),
            format_sig6(r.mean_ms),
            format_sig6(r.min_ms),
            format_sig6(r.stddev_ms),
            r.exp_ops,
            r.mul_adds
        );
    }
    if let Some(path) = &a.csv {
        emit_csv(&report.records, path)?;
    }
    if let Some(path) = &a.plotdata {
        emit_plotdata(&report.records, path)?;
    }
    Ok(EXIT_OK)
}

fn cmd_train(a: &TrainArgs, seed: u64, out: &mut dyn Write) -> Result<i32> {
    let cfg = ModelConfig {
        depth: a.depth,
        dim: a.dim,
        heads: a.heads,
        activation: a.activation.into(),
        variant: a.variant.into(),
        pooling: a.pooling.into(),
        normalization: a.norm.into(),
        patch_grid: a.patch_grid,
        d_in: a.d_in,
        ..Default::default()
    };
    cfg.validate()?;
    let data = make_synthetic_dataset(
        &mut Rng::new(seed),
        a.samples,
        a.patch_grid,
        a.d_in,
        a.signal_strength,
    )?;
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        seed,
    };
    let outcome = train_toy_with(&cfg, &data, &opts)?;
    let accuracy = evaluate(&cfg, &outcome.state.params, &data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let trace_path = a.out.join("trace.csv");
    let ckpt_path = a.out.join("model.ckpt");
    write_trace_csv(&trace_path, &outcome.trace)?;
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            config: cfg,
            params: outcome.state.params,
        },
    )?;
    let _ = writeln!(
        out,
        "{} H={} {} norm={:?}: final loss {} train accuracy {}",
        cfg.variant,
        cfg.heads,
        cfg.activation,
        cfg.normalization,
        format_sig6(outcome.trace.last().map_or(f64::NAN, |r| r.loss)),
        format_sig6(accuracy)
    );
    let _ = writeln!(
        out,
        "wrote {} and {}",
        trace_path.display(),
        ckpt_path.display()
    );
    Ok(EXIT_OK)
}

/// Splits a square image into `grid²` patches of `p x p` pixels (`p² =
/// d_in`), each flattened row-major and scaled to `[0, 1]`.
fn image_tokens(img: &GrayImage, cfg: &ModelConfig, path: &Path) -> Result<Tensor> {
    let p = (cfg.d_in as f64).sqrt().round() as usize;
    if p * p != cfg.d_in {
        return Err(Error::Config(format!(
            "image input needs a square patch size, model has d_in = {}",
            cfg.d_in
        )));
    }
    let g = cfg.patch_grid;
    let side = g * p;
    if img.width != side || img.height != side {
        return Err(Error::Config(format!(
            "{}: expected a {side}x{side} image, got {}x{}",
            path.display(),
            img.width,
            img.height
        )));
    }
    let mut data = Vec::with_capacity(g * g * cfg.d_in);
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..p {
                for x in 0..p {
                    let px = img.pixels[(gy * p + y) * side + gx * p + x];
                    data.push(f64::from(px) / 255.0);
                }
            }
        }
    }
    Tensor::from_vec(&[g * g, cfg.d_in], data)
}

fn cmd_saliency(a: &SaliencyArgs, seed: u64, out: &mut dyn Write) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = ckpt.config;
    if a.layer >= cfg.depth {
        return Err(Error::Config(format!(
            "--layer {} out of range (model has {} layers)",
            a.layer, cfg.depth
        )));
    }
    if a.upscale == 0 {
        return Err(Error::Config("--upscale must be at least 1".into()));
    }
    let tokens = match &a.input {
        Some(path) => image_tokens(&read_pgm(path)?, &cfg, path)?,
        None => {
            let data =
                make_synthetic_dataset(&mut Rng::new(seed), 2, cfg.patch_grid, cfg.d_in, 3.0)?;
            data.samples[1].tokens.clone()
        }
    };
    let mut tape = Tape::new();
    let bound = ckpt.params.bind(&mut tape);
    let t = tape.leaf(tokens);
    let trace = traced_classifier(&mut tape, t, &cfg, &bound)?;
    let layer = trace.layers[a.layer];
    let (var, kind) = match a.matrix {
        MatrixArg::Q => (layer.queries, MatrixKind::Query),
        MatrixArg::K => (layer.keys, MatrixKind::Key),
    };
    let mut m = tape.value(var).clone();
    if cfg.pooling == Pooling::ClsToken {
        let rows: Vec<usize> = (1..m.rows()).collect();
        m = m.select_rows(&rows)?;
    }
    let mut map = token_saliency(&m, cfg.patch_grid)?;
    map.source = Some(SaliencySource {
        matrix: kind,
        layer: a.layer,
    });
    write_pgm(&map, &a.out, a.upscale)?;
    let side = cfg.patch_grid * a.upscale;
    let _ = writeln!(
        out,
        "wrote {} ({side}x{side}, {kind} at layer {})",
        a.out.display(),
        a.layer
    );
    Ok(EXIT_OK)
}

fn cmd_flops(a: &FlopsArgs, out: &mut dyn Write) -> Result<i32> {
    let variant: Variant = a.variant.into();
    let (n, d, h) = (a.n, a.d, a.heads);
    let exp = count_exp_ops(variant, n, d, h)?;
    let dh = d / h;
    let policy: OrderingPolicy = a.ordering.into();
    let mut w = |line: String| {
        let _ = writeln!(out, "{line}");
    };
    w(format!(
        "variant: {variant}  N={n} D={d} H={h} head_width={dh}"
    ));
    w(format!("exp_ops: {}", exp.instrumented));
    w(format!("exp_ops_nominal: {}", exp.nominal));
    w(format!(
        "exp_ops_exact: {}",
        if exp.exact {
            "yes"
        } else {
            "no (upper bound, data dependent)"
        }
    ));
    for order in [ProductOrder::TokensFirst, ProductOrder::ChannelsFirst] {
        let value = match variant.native_order() {
            Some(native) if native != order => format!("n/a (kernel is {native})"),
            _ => (product_mul_adds(order, n, dh) * h as u64).to_string(),
        };
        w(format!("mul_adds_{order}: {value}"));
    }
    let auto = resolve_order(variant, OrderingPolicy::Auto, n, dh);
    let reason = if variant.native_order().is_some() {
        "native".to_string()
    } else if choose_ordering(n, dh) == ProductOrder::TokensFirst {
        format!("N={n} < d={dh}")
    } else {
        format!("N={n} >= d={dh}")
    };
    w(format!("auto_ordering: {auto} ({reason})"));
    let selected = resolve_order(variant, policy, n, dh);
    w(format!(
        "mul_adds: {} ({selected})",
        flops_estimate(variant, n, d, h, policy)?
    ));
    let sima = flops_estimate(Variant::SimA, n, d, h, policy)?;
    let cos = cosformer_flops_factor();
    w(format!("sima_mul_adds: {sima}"));
    w(format!(
        "cosformer_mul_adds: {} ({}x sima_mul_adds, one product per term: {})",
        cos.factor * sima,
        cos.factor,
        cos.terms
            .iter()
            .map(|t| t.describe())
            .collect::<Vec<_>>()
            .join(" + ")
    ));
    Ok(EXIT_OK)
}
