use std::path::Path;
use std::process::{Command, Output};

use sima::bench::{parse_csv, CSV_HEADER};
use sima::cli::{run_with_hooks, CheckHooks};
use sima::viz::read_pgm;
use sima::{Cost, Result, Tensor};

fn sima(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sima"))
        .args(args)
        .env_remove("SIMA_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .to_string()
}

#[test]
fn check_passes_and_trials_zero_is_vacuous() {
    let o = sima(&["check", "--trials", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(),
        7
    );

    let o = sima(&["check", "--trials", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
}

fn unnormalized_softmax(a: &Tensor, cost: &mut Cost) -> Result<Tensor> {
    cost.add_exp(a.len() as u64);
    Ok(a.map(f64::exp))
}

#[test]
fn broken_softmax_fails_check_and_names_property() {
    let hooks = CheckHooks {
        softmax_rows: unnormalized_softmax,
    };
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with_hooks(
        ["sima", "check", "--trials", "10"],
        &hooks,
        &mut out,
        &mut err,
    );
    let text = String::from_utf8(out).unwrap();
    assert_eq!(code, 1);
    assert!(text.contains("FAIL softmax-row-sum"), "{text}");
    assert!(text.contains("FAIL attention-bound"), "{text}");
    assert!(text.contains("seed=0 trial="), "{text}");
}

#[test]
fn flops_reports() {
    let o = sima(&[
        "flops",
        "--variant",
        "msa",
        "--n",
        "256",
        "--d",
        "64",
        "--heads",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(field(&stdout(&o), "exp_ops"), "524288");

    let o = sima(&[
        "flops",
        "--variant",
        "sima",
        "--n",
        "197",
        "--d",
        "384",
        "--heads",
        "6",
    ]);
    let text = stdout(&o);
    assert_eq!(field(&text, "exp_ops"), "0");
    assert!(field(&text, "auto_ordering").starts_with("ChannelsFirst"));

    let o = sima(&[
        "flops",
        "--variant",
        "sima",
        "--n",
        "16",
        "--d",
        "384",
        "--heads",
        "6",
    ]);
    assert!(field(&stdout(&o), "auto_ordering").starts_with("TokensFirst"));

    let o = sima(&[
        "flops",
        "--variant",
        "xca",
        "--n",
        "64",
        "--d",
        "256",
        "--heads",
        "8",
    ]);
    let text = stdout(&o);
    assert_eq!(field(&text, "exp_ops"), (8 * 32 * 32).to_string());
    assert_eq!(field(&text, "exp_ops_nominal"), (8 * 256 * 256).to_string());
}

#[test]
fn usage_errors_exit_2() {
    let o = sima(&["bench", "--variants", "sima,xca,elu,soft"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(
        e.contains("soft")
            && e.contains("sima")
            && e.contains("msa")
            && e.contains("xca")
            && e.contains("elu"),
        "{e}"
    );

    assert_eq!(sima(&["check", "--bogus"]).status.code(), Some(2));
    assert_eq!(sima(&[]).status.code(), Some(2));
    assert_eq!(
        sima(&[
            "--precision",
            "32",
            "flops",
            "--n",
            "4",
            "--d",
            "4",
            "--heads",
            "1"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        sima(&["flops", "--n", "4", "--d", "6", "--heads", "4"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sima(&["--help"]).status.code(), Some(0));
}

#[test]
fn bench_writes_csv_and_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let plot = dir.path().join("b.dat");
    let o = sima(&[
        "bench",
        "--variants",
        "sima,msa,elu",
        "--n-sweep",
        "32,64",
        "--d-sweep",
        "16",
        "--heads",
        "2",
        "--repeats",
        "1",
        "--warmup",
        "0",
        "--fix-ordering",
        "--csv",
        csv.to_str().unwrap(),
        "--plotdata",
        plot.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let records = parse_csv(&text).unwrap();
    assert_eq!(records.len(), 6);
    for r in &records {
        assert_eq!(r.stddev_ms, 0.0);
        assert_eq!(r.min_ms, r.mean_ms);
    }
    let plot = std::fs::read_to_string(&plot).unwrap();
    assert!(plot.starts_with("# variant=sima D=16 H=2\n"));
    assert_eq!(plot.split("\n\n").count(), 3);

    let o = sima(&[
        "bench",
        "--n-sweep",
        "8",
        "--d-sweep",
        "4",
        "--heads",
        "2",
        "--repeats",
        "1",
        "--csv",
        "/nonexistent/dir/x.csv",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_then_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = sima(&[
        "--seed",
        "5",
        "train",
        "--steps",
        "30",
        "--depth",
        "1",
        "--dim",
        "16",
        "--heads",
        "2",
        "--activation",
        "relu",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 31);
    let ckpt = out.join("model.ckpt");

    let q = dir.path().join("q.pgm");
    let k = dir.path().join("k.pgm");
    let run = |m: &str, p: &Path| {
        sima(&[
            "saliency",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--matrix",
            m,
            "--out",
            p.to_str().unwrap(),
            "--upscale",
            "3",
        ])
    };
    assert_eq!(run("q", &q).status.code(), Some(0));
    assert_eq!(run("k", &k).status.code(), Some(0));
    let (qi, ki) = (read_pgm(&q).unwrap(), read_pgm(&k).unwrap());
    assert_eq!((qi.width, qi.height), (12, 12));
    assert_ne!(qi.pixels, ki.pixels);
    assert!(qi.pixels.contains(&255) && qi.pixels.contains(&0));

    // A constant 16x16 image gives identical tokens and an all-zero map.
    let flat = dir.path().join("flat.pgm");
    let mut bytes = b"P5\n16 16\n255\n".to_vec();
    bytes.extend(std::iter::repeat_n(90u8, 256));
    std::fs::write(&flat, bytes).unwrap();
    let zero = dir.path().join("zero.pgm");
    let o = sima(&[
        "saliency",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        flat.to_str().unwrap(),
        "--out",
        zero.to_str().unwrap(),
        "--upscale",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let z = read_pgm(&zero).unwrap();
    assert_eq!((z.width, z.height), (8, 8));
    assert!(z.pixels.iter().all(|&p| p == 0));

    let o = sima(&[
        "saliency",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--layer",
        "1",
        "--out",
        zero.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = sima(&[
        "saliency",
        "--checkpoint",
        dir.path().join("none").to_str().unwrap(),
        "--out",
        zero.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_is_deterministic_under_seed_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str, seed_flag: bool| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sima"));
        if seed_flag {
            cmd.args(["--seed", "11"]);
        } else {
            cmd.env("SIMA_SEED", "11");
        }
        let o = cmd
            .args([
                "train", "--steps", "5", "--depth", "1", "--dim", "8", "--heads", "2", "--out",
            ])
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        (
            std::fs::read(out.join("trace.csv")).unwrap(),
            std::fs::read(out.join("model.ckpt")).unwrap(),
        )
    };
    assert_eq!(go("a", true), go("b", false));
}

#[test]
fn diverging_training_exits_1_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = sima(&[
        "train",
        "--norm",
        "none",
        "--lr",
        "1e150",
        "--steps",
        "50",
        "--depth",
        "1",
        "--dim",
        "8",
        "--heads",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("diverged at step"), "{}", stderr(&o));
}
