use std::path::Path;
use std::process::Command;

use bitadapt::harness::run::{train, CHECKPOINT_FILE, METRICS_FILE, RESOLVED_CONFIG_FILE};
use bitadapt::harness::{
    decode_checkpoint, encode_checkpoint, metrics_csv, read_checkpoint, report_cost,
    CheckpointError, MetricRow, RunConfig,
};
use bitadapt::models::Params;
use bitadapt::quant::Bitwidth;
use bitadapt_tensor::Tensor;
use proptest::prelude::*;

const TINY: &str = r#"
seed = 5

[model]
kind = "conv8"
width = 4

[data.synthetic]
num_classes = 4
samples_per_class = 8
image_size = 16

[data]
synthetic_test_per_class = 4

[engine]
kind = "mebqat"
epochs = 2
batch_size = 8
m = 3

[bitwidths]
weights = [1, 2, "FP"]
activations = [1, 2, "FP"]
minor = [1]
"#;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn one_row_csv_matches_the_golden_file() {
    let row = MetricRow {
        epoch: 3,
        branch: 1,
        b_w: Bitwidth::Int(2),
        b_a: Bitwidth::Fp,
        loss: std::f64::consts::LN_2,
        kd_loss: 1e-7,
        accuracy: 2.0 / 3.0,
        backprops: 8,
        wall_ms: 0,
    };
    let golden = std::fs::read_to_string(fixture("metrics-one-row.csv")).unwrap();
    assert_eq!(metrics_csv(&[row]), golden);
}

fn params_strategy() -> impl Strategy<Value = Params> {
    prop::collection::vec(
        (
            "[a-z]{1,8}(\\.[a-z]{1,6})?",
            prop::collection::vec(1usize..4, 0..4),
            any::<u32>(),
        ),
        0..6,
    )
    .prop_map(|specs| {
        let mut p = Params::new();
        for (name, shape, seed) in specs {
            let n: usize = shape.iter().product();
            // arbitrary bit patterns, including NaN payloads and subnormals
            let data = (0..n as u32)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i)))
                .collect();
            p.insert(name, Tensor::new(&shape, data).unwrap());
        }
        p
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(p in params_strategy()) {
        let back = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        prop_assert_eq!(back.len(), p.len());
        for ((na, a), (nb, b)) in p.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn any_truncation_is_reported(p in params_strategy(), frac in 0.0f64..1.0) {
        let bytes = encode_checkpoint(&p).unwrap();
        let cut = ((bytes.len() as f64) * frac) as usize;
        prop_assume!(cut < bytes.len());
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        prop_assert!(matches!(err, CheckpointError::Truncated { .. }), "{}", err);
    }
}

#[test]
fn identical_runs_are_byte_identical() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, &dir.path().join("a")).unwrap();
    let b = train(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a.rows, b.rows);
    for f in [METRICS_FILE, CHECKPOINT_FILE, RESOLVED_CONFIG_FILE] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert_eq!(a.rows.len(), 2 * 4 * 3);
    let mut other = cfg.clone();
    other.seed = 6;
    train(&other, &dir.path().join("c")).unwrap();
    assert_ne!(
        std::fs::read(dir.path().join("a").join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(dir.path().join("c").join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn resolved_config_spells_out_every_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(TINY).unwrap();
    train(&cfg, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(RESOLVED_CONFIG_FILE)).unwrap();
    for key in [
        "kd = true",
        "fix_first_fp = true",
        "q = 5",
        "inner_lr",
        "meta_train_classes = 2",
        "episodes = 600",
        "lr = 0.001",
        "kind = \"adam\"",
        "kind = \"constant\"",
        "tasks = [",
    ] {
        assert!(text.contains(key), "missing {key:?} in\n{text}");
    }
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg.resolve().unwrap());
}

#[test]
fn cost_report_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&RunConfig::from_toml(TINY).unwrap(), dir.path()).unwrap();
    let r = report_cost(&out.checkpoint).unwrap();
    assert_eq!(r.m, 3);
    assert_eq!(r.backprops_per_update, 3.0);
    assert_eq!(r.theta_params, out.learner.spec.param_count());
    assert_eq!(r.theta_bytes, 4 * r.theta_params);
    assert!(r.zeta > 0.0 && r.zeta < 1.0);
    assert_eq!(
        read_checkpoint(&out.checkpoint).unwrap().len(),
        out.learner.spec.param_shapes().len()
    );
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bitadapt"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("out");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let r = cli(&[
        "train",
        "--config",
        &s(&cfg_path),
        "--out",
        &s(&out),
        "--epochs",
        "1",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = s(&out.join(CHECKPOINT_FILE));

    let r = cli(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--tasks",
        "2,2",
        "--tasks",
        "FP,FP",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = String::from_utf8(r.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "b_w,b_a,accuracy");
    assert!(
        lines[1].starts_with("2,2,") && lines[2].starts_with("FP,FP,"),
        "{text}"
    );

    let r = cli(&["report-cost", "--checkpoint", &ckpt]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("\"backprops_per_update\": 3.0"));

    let r = cli(&["meta-eval", "--checkpoint", &ckpt, "--episodes", "2"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("engine.kind"));

    let synth = dir.path().join("synth");
    let r = cli(&[
        "make-synthetic",
        "--out",
        &s(&synth),
        "--classes",
        "3",
        "--per-class",
        "2",
        "--size",
        "12",
    ]);
    assert!(r.status.success());
    let imgs = std::fs::read(synth.join("glyphs-images-idx3-ubyte")).unwrap();
    assert_eq!(imgs.len(), 16 + 6 * 144);

    let r = cli(&["gradcheck", "--trials", "1", "--primitives-only"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stdout));
}

#[test]
fn cli_reports_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[engine]\nm = 0\n").unwrap();
    let r = cli(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("engine.m"));

    let ckpt = dir.path().join("broken.mbqt");
    let mut bytes = encode_checkpoint(&Params::new()).unwrap();
    bytes[4] = 9;
    std::fs::write(&ckpt, bytes).unwrap();
    let r = cli(&["report-cost", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("version"));
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::load(&path)
            .and_then(RunConfig::resolve)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 4);
}
