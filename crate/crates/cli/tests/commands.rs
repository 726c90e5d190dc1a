use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use oatflow_cli::commands::{load_checkpoint, REPORT_CSV, REPORT_JSON, TRAIN_LOG};
use oatflow_cli::{cmd_bench, cmd_eval, cmd_export_traj, cmd_refine, cmd_train, EvalReport, RunConfig};
use oatflow_core::bench::{BenchmarkReport, Phase};
use oatflow_core::flows::Phase1Trainer;
use oatflow_core::model::VelocityField;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 4

[data]
task = "8gs->moons"

[phase1]
batch_size = 32
n_batches = 20

[refine]
batch_size = 32
n_batches = 10

[eval]
n_test = 64
reference_n = 128

[bench]
tasks = ["8gs->moons"]
trials = 1
n_test = 64
reference_n = 128
control_batches = 40

[output]
dir = "out"
"#;

fn setup(text: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, text).unwrap();
    (dir, path)
}

fn oatflow(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_oatflow"))
        .args(args)
        .env_remove("OATFLOW_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let out = oatflow(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let (_d, cfg) = setup("[phase1]\nbatchsize = 12\n");
    let out = oatflow(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));
}

#[test]
fn zero_batches_gives_the_seeded_init() {
    let (d, cfg) = setup(&SMALL.replace("n_batches = 20", "n_batches = 0"));
    let cfg = RunConfig::load(&cfg).unwrap();
    let path = cmd_train(&cfg).unwrap();
    let fresh = Phase1Trainer::new(cfg.phase1.clone(), 2).unwrap();
    assert_eq!(fs::read(path).unwrap(), fresh.field().to_bytes());
    assert_eq!(fs::read_to_string(d.path().join("out").join(TRAIN_LOG)).unwrap(), "");
}

#[test]
fn refine_with_zero_batches_copies_the_input() {
    let (d, path) = setup(SMALL);
    let mut cfg = RunConfig::load(&path).unwrap();
    let p1 = cmd_train(&cfg).unwrap();
    cfg.refine.n_batches = 0;
    let refined = cmd_refine(&cfg, &p1).unwrap();
    assert_eq!(fs::read(p1).unwrap(), fs::read(refined).unwrap());
    drop(d);
}

#[test]
fn refine_log_has_one_record_per_step() {
    let (d, path) = setup(SMALL);
    let cfg = RunConfig::load(&path).unwrap();
    let p1 = cmd_train(&cfg).unwrap();
    cmd_refine(&cfg, &p1).unwrap();
    let log = fs::read_to_string(d.path().join("out/refine_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
}

#[test]
fn corrupted_checkpoint_exits_3_and_wrong_dimension_fails() {
    let (d, cfg) = setup(SMALL);
    let bad = d.path().join("bad.ckpt");
    let mut bytes = VelocityField::init(2, 0).unwrap().to_bytes();
    bytes[0] ^= 0xff;
    fs::write(&bad, bytes).unwrap();
    let out = oatflow(&["refine", "--config", s(&cfg), "--checkpoint", s(&bad)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let wide = d.path().join("wide.ckpt");
    VelocityField::init(3, 0).unwrap().save(&wide).unwrap();
    let out = oatflow(&["refine", "--config", s(&cfg), "--checkpoint", s(&wide)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(load_checkpoint(&wide).is_err());
}

#[test]
fn zero_field_eval_has_unit_npe_and_is_repeatable() {
    let (d, path) = setup(SMALL);
    let cfg = RunConfig::load(&path).unwrap();
    let zero = d.path().join("zero.ckpt");
    VelocityField::zeros(2, &[8, 8]).unwrap().save(&zero).unwrap();
    let report = cmd_eval(&cfg, &zero).unwrap();
    assert_eq!(report.npe, 1.0);
    assert!(report.nfe.is_none());
    let first = fs::read_to_string(cfg.output.dir.join("metrics.json")).unwrap();
    let parsed: EvalReport = serde_json::from_str(&first).unwrap();
    assert_eq!(parsed, report);
    cmd_eval(&cfg, &zero).unwrap();
    assert_eq!(fs::read_to_string(cfg.output.dir.join("metrics.json")).unwrap(), first);
}

#[test]
fn dopri5_eval_reports_nfe() {
    let (d, path) = setup(&SMALL.replace("[eval]\n", "[eval]\nintegrator = \"dopri5\"\n"));
    let cfg = RunConfig::load(&path).unwrap();
    let ckpt = d.path().join("f.ckpt");
    VelocityField::init(2, 1).unwrap().save(&ckpt).unwrap();
    let report = cmd_eval(&cfg, &ckpt).unwrap();
    assert!(report.nfe.unwrap() > 0);
    assert!(report.w2.is_finite() && report.npe.is_finite());
}

#[test]
fn bench_report_csv_matches_json() {
    let (_d, path) = setup(SMALL);
    let cfg = RunConfig::load(&path).unwrap();
    let report = cmd_bench(&cfg, None).unwrap();
    assert_eq!(report.rows.len(), 3);
    let json: BenchmarkReport =
        serde_json::from_str(&fs::read_to_string(cfg.output.dir.join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(json, report);
    let csv = fs::read_to_string(cfg.output.dir.join(REPORT_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("task,method,phase,metric,mean,std,n_trials"));
    let mut n = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let phase = match f[2] {
            "phase1" => Phase::Phase1,
            "refined" => Phase::Refined,
            "control" => Phase::Control,
            other => panic!("{other}"),
        };
        let row = json.row(&f[0].parse().unwrap(), f[1].parse().unwrap(), phase).unwrap();
        let (mean, std) = match f[3] {
            "w2" => (row.w2_mean, row.w2_std),
            "npe" => (row.npe_mean, row.npe_std),
            "straightness" => (row.straightness_mean, row.straightness_std),
            other => panic!("{other}"),
        };
        assert_eq!(f[4].parse::<f64>().unwrap(), mean);
        assert_eq!(f[5].parse::<f64>().ok(), std);
        assert_eq!(f[6].parse::<usize>().unwrap(), row.n_trials);
        n += 1;
    }
    assert_eq!(n, 9);
}

#[test]
fn export_traj_single_sample_layout() {
    let d = TempDir::new().unwrap();
    let ckpt = d.path().join("f.ckpt");
    VelocityField::init(2, 2).unwrap().save(&ckpt).unwrap();
    let out = d.path().join("traj.csv");
    cmd_export_traj(&ckpt, &"N->moons".parse().unwrap(), 1, 0, &out).unwrap();
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample_id,t,x_1,x_2");
    assert_eq!(lines.len(), 1 + 101);
    for (k, line) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], "0");
        assert!((f[1].parse::<f64>().unwrap() - k as f64 * 0.01).abs() < 1e-12);
    }
}

#[test]
fn seed_precedence() {
    let (d, cfg) = setup(SMALL);
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_oatflow"));
        c.args(args).env_remove("OATFLOW_SEED");
        if let Some(v) = env {
            c.env("OATFLOW_SEED", v);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let snap = |dir: &str| fs::read_to_string(d.path().join(dir).join("config.toml")).unwrap();
    let base = ["train", "--config", s(&cfg)];
    let out_a = d.path().join("a");
    run(&[&base[..], &["--out", s(&out_a)]].concat(), Some("11"));
    assert!(snap("a").contains("seed = 11"));
    let out_b = d.path().join("b");
    run(&[&base[..], &["--out", s(&out_b), "--seed", "12"]].concat(), Some("11"));
    assert!(snap("b").contains("seed = 12"));
    let out = oatflow(&["train", "--config", s(&cfg), "--out", s(&out_a), "--seed", "x"]);
    assert!(!out.status.success());
}
