use std::path::Path;
use std::process::{Command, Output};

use mmfuse::harness::commands::{ablation_variants, run_ablation, Axis, OUTPUT_ROOT_ENV};
use mmfuse::harness::config::RunConfig;
use mmfuse::harness::metrics::read_jsonl;
use mmfuse::mmqa::adapter_scalar_count;
use tempfile::tempdir;

const TINY: &str = "\
name = tiny
# eight training batches of eight
[bench]
train_size = 64
test_size = 24
[model]
d = 16
[train]
epochs = 2
batch_size = 8
";

fn mmfuse(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfuse"))
        .args(args)
        .env(OUTPUT_ROOT_ENV, root)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn train_eval_report_round_trip() {
    let root = tempdir().unwrap();
    let cfg = root.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();

    let text = stdout(&mmfuse(root.path(), &["train", cfg.to_str().unwrap()]));
    let run = root.path().join("tiny");
    let ckpt = run.join("model.crma");
    let metrics = run.join("metrics.jsonl");
    assert!(ckpt.is_file() && metrics.is_file(), "{text}");
    assert_eq!(read_jsonl(&metrics).unwrap().len(), 2);

    let text = stdout(&mmfuse(
        root.path(),
        &[
            "eval",
            ckpt.to_str().unwrap(),
            "--modalities",
            "video,audio",
            "--easy-hard",
        ],
    ));
    assert!(text.contains("easy:") && text.contains("hard:"), "{text}");
    let json = text.lines().last().unwrap();
    let rec: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(rec["visible"], serde_json::json!(["video", "audio"]));
    assert_eq!(rec["active"], serde_json::json!(["video", "audio"]));
    let (easy, hard) = (
        rec["easy"]["size"].as_u64().unwrap(),
        rec["hard"]["size"].as_u64().unwrap(),
    );
    assert_eq!(easy + hard, 24);

    let text = stdout(&mmfuse(root.path(), &["report", metrics.to_str().unwrap()]));
    assert!(text.contains("tiny"), "{text}");
}

#[test]
fn errors_are_reported_with_context() {
    let root = tempdir().unwrap();
    let cfg = root.path().join("bad.cfg");
    std::fs::write(
        &cfg,
        "name = bad\n[train]\nepochs = 2\nlearning_rate = 0.1\n",
    )
    .unwrap();
    let out = mmfuse(root.path(), &["train", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("line 4") && err.contains("learning_rate"),
        "{err}"
    );

    std::fs::write(&cfg, TINY).unwrap();
    let out = mmfuse(
        root.path(),
        &["ablate", cfg.to_str().unwrap(), "--axis", "colour"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("colour"), "{err}");

    let out = mmfuse(
        root.path(),
        &["eval", root.path().join("missing.crma").to_str().unwrap()],
    );
    assert!(!out.status.success());
    assert!(
        !root.path().join("tiny").exists(),
        "a failed command wrote output"
    );
}

#[test]
fn ablation_variants_are_named_and_placed() {
    let base = RunConfig::parse(TINY).unwrap();
    let v = ablation_variants(&base, Axis::Fusion).unwrap();
    let names: Vec<&str> = v.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["Concat", "Linear", "MoE", "CrossAttention", "SelfGated"]
    );
    for (label, cfg) in &v {
        assert_eq!(cfg.name, format!("tiny-fusion-{label}"));
        assert_eq!(cfg.output_dir, format!("tiny/ablate-fusion/{label}"));
        assert_eq!(cfg.model.strategy.to_string(), *label);
    }
    let order = ablation_variants(&base, Axis::Order).unwrap();
    assert_eq!(order[1].1.train.order, ["depth", "audio", "video"]);
}

#[test]
fn rank_sweep_census_follows_the_adapter_formula() {
    let base = RunConfig::parse(&TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    let rows = run_ablation(&base, Axis::Rank).unwrap();
    assert_eq!(rows.len(), 3);
    let bb = base.model.backbone;
    let adapters = |r| -> usize {
        base.model
            .modalities
            .iter()
            .map(|(_, f)| adapter_scalar_count(bb.d, r, bb.tokens, bb.layers, *f))
            .sum()
    };
    let shared = rows[0].trainable_params - adapters(2);
    for (row, r) in rows.iter().zip([2, 4, 8]) {
        assert_eq!(
            row.trainable_params,
            shared + adapters(r),
            "{}",
            row.variant
        );
        assert_eq!(
            row.total_params - row.trainable_params,
            rows[0].total_params - rows[0].trainable_params
        );
        assert_eq!(row.trajectory.len(), 1);
    }
}
