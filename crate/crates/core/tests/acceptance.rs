//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs with `harness = false` so the lines always print.

use std::time::{Duration, Instant};

use sima::attention::{
    attention_core, attention_forward, l1_normalize_columns, sima_head_forward, AttentionConfig,
    AttentionWeights, Variant, NORM_EPS,
};
use sima::bench::{run_bench, BenchRecord, BenchSpec, Precision};
use sima::model::{
    block_forward, classifier_forward, evaluate, make_synthetic_dataset, parameter_grad_check,
    train_toy, Activation, Dataset, ModelConfig, ParamStore, Pooling,
};
use sima::tensor::{matmul, matmul_nt};
use sima::viz::{read_pgm, render, token_saliency, write_pgm, SaliencyMap};
use sima::{Cost, ProductOrder, Rng, Tensor};

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn qkv(rng: &mut Rng, n: usize, d: usize) -> (Tensor, Tensor, Tensor) {
    (
        rng.normal_tensor(&[n, d], 1.0),
        rng.normal_tensor(&[n, d], 1.0),
        rng.normal_tensor(&[n, d], 1.0),
    )
}

fn c1_ordering_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(64);
        let d = 1 + rng.below(64);
        let (q, k, v) = qkv(&mut rng, n, d);
        let mut cost = Cost::new();
        let a =
            sima_head_forward(&q, &k, &v, ProductOrder::TokensFirst, NORM_EPS, &mut cost).unwrap();
        let b = sima_head_forward(&q, &k, &v, ProductOrder::ChannelsFirst, NORM_EPS, &mut cost)
            .unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-10 && elapsed < Duration::from_secs(5),
        format!("max diff {worst:.2e} over 100 draws in {elapsed:.2?}"),
    )
}

fn c2_attention_bound() -> Verdict {
    let mut rng = Rng::new(102);
    let mut in_range = true;
    let mut worst_ratio = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(64);
        let d = 1 + rng.below(64);
        let (q, k, _) = qkv(&mut rng, n, d);
        let qh = l1_normalize_columns(&q, NORM_EPS).unwrap();
        let kh = l1_normalize_columns(&k, NORM_EPS).unwrap();
        let s = matmul_nt(&qh, &kh, &mut Cost::new()).unwrap();
        in_range &= s
            .data()
            .iter()
            .all(|x| (-(d as f64)..=d as f64).contains(x));
        worst_ratio = worst_ratio.max(s.max_abs() / d as f64);
    }
    // Single nonzero row: every normalized column is a signed unit vector on
    // that row, so the score there is +-d.
    let mut extreme_ok = true;
    let mut extreme_err = 0.0f64;
    for (n, d, row) in [(1, 1, 0), (5, 8, 2), (16, 64, 15), (64, 3, 7)] {
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        for j in 0..d {
            q[row * d + j] = 0.5 + rng.uniform();
            k[row * d + j] = -(0.5 + rng.uniform());
        }
        let qh = l1_normalize_columns(&Tensor::from_vec(&[n, d], q).unwrap(), NORM_EPS).unwrap();
        let kh = l1_normalize_columns(&Tensor::from_vec(&[n, d], k).unwrap(), NORM_EPS).unwrap();
        let s = matmul_nt(&qh, &kh, &mut Cost::new()).unwrap();
        let err = (s.at(row, row).abs() - d as f64).abs();
        extreme_err = extreme_err.max(err);
        extreme_ok &= err <= 1e-12;
    }
    verdict(
        in_range && extreme_ok,
        format!("max |score|/d = {worst_ratio:.4} over 100 draws; extreme case off by {extreme_err:.1e}"),
    )
}

fn c3_exp_counters() -> Verdict {
    let h = 8usize;
    let mut mismatches = Vec::new();
    let mut rng = Rng::new(103);
    for n in [64usize, 256, 512] {
        for d in [64usize, 128, 256] {
            let (q, k, v) = qkv(&mut rng, n, d);
            for (variant, expect) in [
                (Variant::Msa, h * n * n),
                (Variant::Xca, h * (d / h) * (d / h)),
                (Variant::SimA, 0),
            ] {
                let cfg = AttentionConfig::new(d, h, variant).unwrap();
                let mut cost = Cost::new();
                attention_core(&q, &k, &v, &cfg, &mut cost).unwrap();
                if cost.exp_ops() != expect as u64 {
                    mismatches.push(format!(
                        "{variant} N={n} D={d}: {} != {expect}",
                        cost.exp_ops()
                    ));
                }
            }
        }
    }
    let (q, k, v) = qkv(&mut rng, 256, 64);
    let mut cost = Cost::new();
    attention_core(
        &q,
        &k,
        &v,
        &AttentionConfig::new(64, 8, Variant::Msa).unwrap(),
        &mut cost,
    )
    .unwrap();
    let headline = cost.exp_ops();
    verdict(
        mismatches.is_empty() && headline == 524_288,
        format!(
            "MSA at N=256 D=64 H=8 counts {headline}; {} mismatches {mismatches:?}",
            mismatches.len()
        ),
    )
}

fn c4_gradients() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig {
        depth: 1,
        dim: 8,
        heads: 2,
        patch_grid: 2,
        d_in: 4,
        pooling: Pooling::ClsToken,
        ..Default::default()
    };
    let mut rng = Rng::new(0);
    let mut params = ParamStore::init(&cfg, &mut rng).unwrap();
    // std 0.2 keeps GELU units away from saturation, where some gradient
    // coordinates fall below what a step of 1e-5 can resolve.
    params.randomize(&mut rng, 0.2);
    let data = make_synthetic_dataset(&mut rng, 2, 2, 4, 3.0).unwrap();
    let reports = parameter_grad_check(&cfg, &params, &data.samples[1], 1e-5).unwrap();
    let (worst_name, worst) = reports
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_rel_error))
        .fold(("", 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-4 && elapsed < Duration::from_secs(60) && cfg.num_tokens() == 5,
        format!(
            "{} tensors, {checked} scalars, worst {worst:.2e} ({worst_name}) in {elapsed:.2?}",
            reports.len()
        ),
    )
}

fn c5_permutation() -> Verdict {
    let mut rng = Rng::new(105);
    let (n, d, h) = (12, 8, 2);
    let mut worst = 0.0f64;
    let x: Tensor = rng.normal_tensor(&[n, d], 1.0);
    let weights: Vec<(AttentionConfig, AttentionWeights)> = Variant::ALL
        .iter()
        .map(|&v| {
            let cfg = AttentionConfig::new(d, h, v).unwrap();
            let w = AttentionWeights::init(&cfg, &mut rng, 1.0 / (d as f64).sqrt());
            (cfg, w)
        })
        .collect();
    let model = ModelConfig {
        depth: 1,
        dim: d,
        heads: h,
        ..Default::default()
    };
    let mut params = ParamStore::init(&model, &mut rng).unwrap();
    params.randomize(&mut rng, 0.2);
    let block = params.block(0).unwrap();
    for _ in 0..20 {
        let perm = rng.permutation(n);
        let px = x.select_rows(&perm).unwrap();
        let mut cost = Cost::new();
        for (cfg, w) in &weights {
            let fx = attention_forward(&x, cfg, w, &mut cost).unwrap();
            let fpx = attention_forward(&px, cfg, w, &mut cost).unwrap();
            worst = worst.max(fpx.max_abs_diff(&fx.select_rows(&perm).unwrap()));
        }
        let fx = block_forward(&x, &block, &model, &mut cost).unwrap();
        let fpx = block_forward(&px, &block, &model, &mut cost).unwrap();
        worst = worst.max(fpx.max_abs_diff(&fx.select_rows(&perm).unwrap()));
    }
    verdict(
        worst < 1e-12,
        format!("4 variants + block, 20 permutations: max diff {worst:.2e}"),
    )
}

fn c6_scale_invariance() -> Verdict {
    let mut rng = Rng::new(106);
    let m = rng.normal_tensor::<f64>(&[16, 8], 1.0);
    let base = l1_normalize_columns(&m, NORM_EPS).unwrap();
    let mut l1_err = 0.0f64;
    for c in [1e-3, 1.0, 1e3] {
        l1_err = l1_err.max(
            l1_normalize_columns(&m.scale(c), NORM_EPS)
                .unwrap()
                .max_abs_diff(&base),
        );
    }
    // Projections without bias: Q = c X Wq, so Q-hat is unchanged while the
    // MSA logits Q K^T grow by c².
    let (d, n) = (8, 16);
    let x: Tensor = rng.normal_tensor(&[n, d], 1.0);
    let wq: Tensor = rng.normal_tensor(&[d, d], 0.3);
    let wk: Tensor = rng.normal_tensor(&[d, d], 0.3);
    let mut cost = Cost::new();
    let scores = |x: &Tensor, cost: &mut Cost| {
        let q = matmul(x, &wq, cost).unwrap();
        let k = matmul(x, &wk, cost).unwrap();
        let sima = matmul_nt(
            &l1_normalize_columns(&q, NORM_EPS).unwrap(),
            &l1_normalize_columns(&k, NORM_EPS).unwrap(),
            cost,
        )
        .unwrap();
        (sima, matmul_nt(&q, &k, cost).unwrap())
    };
    let (sima1, msa1) = scores(&x, &mut cost);
    let mut sima_err = 0.0f64;
    let mut msa_err = 0.0f64;
    for c in [1e-3, 1.0, 1e3] {
        let (s, m) = scores(&x.scale(c), &mut cost);
        sima_err = sima_err.max(s.max_abs_diff(&sima1));
        msa_err = msa_err.max(m.max_abs_diff(&msa1.scale(c * c)) / (c * c * msa1.max_abs()));
    }
    verdict(
        l1_err < 1e-12 && sima_err < 1e-12 && msa_err < 1e-12,
        format!("l1 diff {l1_err:.1e}; SimA scores diff {sima_err:.1e}; MSA c² scaling rel err {msa_err:.1e}"),
    )
}

fn toy_dataset() -> Dataset {
    make_synthetic_dataset(&mut Rng::new(0), 512, 4, 16, 3.0).unwrap()
}

fn train_and_score(cfg: &ModelConfig, data: &Dataset) -> (f64, Vec<f64>) {
    let out = train_toy(cfg, data, 500, 1e-3).unwrap();
    let acc = evaluate(cfg, &out.state.params, data).unwrap();
    (acc, out.trace.iter().map(|r| r.loss).collect())
}

fn c7_trainability(data: &Dataset) -> Verdict {
    let start = Instant::now();
    let sima = ModelConfig::default();
    let msa = ModelConfig {
        variant: Variant::Msa,
        ..sima
    };
    let (acc_sima, trace) = train_and_score(&sima, data);
    let (_, trace_again) = train_and_score(&sima, data);
    let (acc_msa, _) = train_and_score(&msa, data);
    let elapsed = start.elapsed();
    let deterministic = trace == trace_again;
    verdict(
        acc_sima >= 0.95 && acc_msa >= 0.95 && deterministic && elapsed < Duration::from_secs(600),
        format!(
            "SimA H=4 {acc_sima:.3}, MSA H=4 {acc_msa:.3}, repeat run identical: {deterministic}, {elapsed:.1?}"
        ),
    )
}

fn c8_single_head(data: &Dataset) -> Verdict {
    let cfg = ModelConfig {
        heads: 1,
        ..Default::default()
    };
    let (acc, _) = train_and_score(&cfg, data);
    verdict(acc >= 0.95, format!("SimA H=1 train accuracy {acc:.3}"))
}

fn c9_exp_free() -> Verdict {
    let cfg = ModelConfig {
        activation: Activation::Relu,
        ..Default::default()
    };
    let mut rng = Rng::new(109);
    let mut params = ParamStore::init(&cfg, &mut rng).unwrap();
    params.randomize(&mut rng, 0.2);
    let x: Tensor = rng.normal_tensor(&[16, 16], 1.0);
    let mut cost = Cost::new();
    let logits = classifier_forward(&x, &cfg, &params, &mut cost).unwrap();
    verdict(
        cost.exp_ops() == 0 && logits.all_finite(),
        format!(
            "exp counter {} after a full forward ({} mul-adds)",
            cost.exp_ops(),
            cost.mul_adds()
        ),
    )
}

fn mean_of(records: &[BenchRecord], v: Variant) -> f64 {
    records
        .iter()
        .find(|r| r.variant == v)
        .map_or(f64::NAN, |r| r.mean_ms)
}

fn c10_bench_direction() -> Verdict {
    let run = |variants: Vec<Variant>, n: usize, d: usize| {
        run_bench(&BenchSpec {
            variants,
            n_values: vec![n],
            d_values: vec![d],
            heads: 8,
            repeats: 1000,
            warmup: 50,
            fix_ordering: true,
            precision: Precision::F32,
            seed: 110,
        })
        .unwrap()
        .records
    };
    let tokens = run(vec![Variant::SimA, Variant::Msa], 1024, 64);
    let channels = run(vec![Variant::SimA, Variant::Xca], 64, 512);
    let (s1, m1) = (
        mean_of(&tokens, Variant::SimA),
        mean_of(&tokens, Variant::Msa),
    );
    let (s2, x2) = (
        mean_of(&channels, Variant::SimA),
        mean_of(&channels, Variant::Xca),
    );
    verdict(
        s1 < m1 && s2 < x2,
        format!("N=1024 D=64: SimA {s1:.3} ms vs MSA {m1:.3} ms; N=64 D=512: SimA {s2:.4} ms vs XCA {x2:.4} ms"),
    )
}

fn c11_equal_mul_adds() -> Verdict {
    let records = run_bench(&BenchSpec {
        variants: Variant::ALL.to_vec(),
        n_values: vec![16, 64, 256],
        d_values: vec![32, 64, 128],
        heads: 4,
        repeats: 1,
        warmup: 0,
        fix_ordering: true,
        precision: Precision::F64,
        seed: 111,
    })
    .unwrap()
    .records;
    let mut groups = 0;
    let mut equal = true;
    for n in [16, 64, 256] {
        for d in [32, 64, 128] {
            let counts: Vec<u64> = records
                .iter()
                .filter(|r| r.n == n && r.d == d)
                .map(|r| r.mul_adds)
                .collect();
            groups += 1;
            equal &= counts.len() == 3 && counts.windows(2).all(|w| w[0] == w[1]);
        }
    }
    verdict(
        equal,
        format!("{groups} shapes, 3 variants each, mul_adds identical: {equal}"),
    )
}

fn c12_cosformer() -> Verdict {
    let (n, d, h) = (196usize, 384usize, 6usize);
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_sima"))
        .args([
            "flops",
            "--variant",
            "sima",
            "--n",
            "196",
            "--d",
            "384",
            "--heads",
            "6",
            "--ordering",
            "channels-first",
        ])
        .output()
        .unwrap();
    let code = out.status.code().unwrap_or(-1);
    let text = String::from_utf8(out.stdout).unwrap();
    let value = |key: &str| -> u64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    let cos = value("cosformer_mul_adds: ");
    // Q-hat (K-hat^T V) per head: two N x d x d products.
    let dh = d / h;
    let sima = (h * 2 * n * dh * dh) as u64;
    verdict(
        code == 0 && cos == 4 * sima && value("sima_mul_adds: ") == sima,
        format!("cosformer line {cos} = 4 x {sima}"),
    )
}

fn c13_saliency() -> Verdict {
    let mut rng = Rng::new(113);
    let m: Tensor = rng.normal_tensor(&[16, 8], 1.0);
    let map = token_saliency(&m, 4).unwrap();
    let norms: Vec<f64> = (0..16)
        .map(|i| m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let oracle_err = norms
        .iter()
        .enumerate()
        .map(|(i, v)| (map.grid.at(i / 4, i % 4) - (v - lo) / (hi - lo)).abs())
        .fold(0.0, f64::max);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.pgm");
    write_pgm(&map, &path, 3).unwrap();
    let back = read_pgm(&path).unwrap();
    let round_trip = back == render(&map, 3).unwrap() && (back.width, back.height) == (12, 12);

    let mut hot = vec![0.0; 9 * 2];
    hot[5 * 2] = 1.5;
    let hot = token_saliency(&Tensor::from_vec(&[9, 2], hot).unwrap(), 3).unwrap();
    let img = render(
        &SaliencyMap {
            grid: hot.grid,
            source: None,
        },
        4,
    )
    .unwrap();
    // Token 5 is grid cell (1, 2): pixels rows 4..8, cols 8..12.
    let single_block = img.pixels.iter().enumerate().all(|(i, &p)| {
        let (y, x) = (i / img.width, i % img.width);
        let inside = (4..8).contains(&y) && (8..12).contains(&x);
        p == if inside { 255 } else { 0 }
    });
    verdict(
        oracle_err < 1e-12 && round_trip && single_block,
        format!("oracle diff {oracle_err:.1e}; PGM round-trip {round_trip}; single 255 block {single_block}"),
    )
}

fn main() {
    let data = toy_dataset();
    let criteria: Vec<Criterion> = vec![
        ("ordering equivalence", Box::new(c1_ordering_equivalence)),
        ("attention bound", Box::new(c2_attention_bound)),
        ("exp-counter exactness", Box::new(c3_exp_counters)),
        ("gradient correctness", Box::new(c4_gradients)),
        ("permutation equivariance", Box::new(c5_permutation)),
        ("scale invariance", Box::new(c6_scale_invariance)),
        ("trainability", Box::new(|| c7_trainability(&data))),
        ("single-head robustness", Box::new(|| c8_single_head(&data))),
        ("exp-free inference", Box::new(c9_exp_free)),
        ("benchmark direction", Box::new(c10_bench_direction)),
        ("harness validity", Box::new(c11_equal_mul_adds)),
        ("cosformer factor", Box::new(c12_cosformer)),
        ("saliency pipeline", Box::new(c13_saliency)),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let v = check();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {status} {name}: {}", i + 1, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
