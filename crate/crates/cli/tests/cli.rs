use std::path::Path;
use std::process::{Command, Output};

fn emvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emvi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
d_model = 16
n_layers = 1
n_heads = 2
ffn_dim = 32
graph_hidden = 16
trunk_size = 120
stage1_min_trunks = 1
stage1_max_trunks = 2
stage2_trunks = 1
validation_size = 20
rank_items = 8
rank_candidates = 4
batch_size = 8
";

fn tiny_setup(dir: &Path) -> (String, String) {
    let corpus = dir.join("corpus.jsonl");
    let o = emvi(&["gen-corpus", "--dialogues", "100", "--seed", "3", "--out", corpus.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    (corpus.display().to_string(), cfg.display().to_string())
}

#[test]
fn help_lists_subcommands() {
    let o = emvi(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in ["gen-corpus", "ingest", "pretrain", "eval", "inspect"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn errors_carry_kind_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = emvi(&["pretrain", "--corpus", "nope.jsonl", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("error kind=io code=3"), "{}", stderr(&o));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = emvi(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error kind=config code=2"));
    assert!(stderr(&o).contains("line 1"));

    let o = emvi(&["pretrain", "--force-stage", "3", "--corpus", "x", "--out-dir", "y"]);
    assert_eq!(o.status.code(), Some(2));

    let o = emvi(&["ingest", "--in", "x", "--format", "xml", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_environment_override_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_emvi"))
        .args(["pretrain", "--corpus", "x", "--out-dir", "y"])
        .env("EMVI_NOT_A_KEY", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("EMVI_NOT_A_KEY"));
}

#[test]
fn ingest_converts_a_chat_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("chat.tsv");
    std::fs::write(&log, "dialogue_id\tspeaker\ttext\treply_to\nd1\tann\thello there\t\nd1\tbob\thi ann\t1\nd1\tann\thow are you\t2\n").unwrap();
    let out = dir.path().join("c.jsonl");
    let o = emvi(&["ingest", "--in", log.to_str().unwrap(), "--format", "tsv", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 1 dialogues"));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn pretrain_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, cfg) = tiny_setup(dir.path());
    let out = dir.path().join("run");
    let o = emvi(&["--threads", "1", "pretrain", "--corpus", &corpus, "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("trunk=1 stage=1"));
    assert!(text.contains("stage=2"));
    for f in ["metrics.csv", "metrics.histogram.csv", "trunks.json", "config.effective"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let header = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(header.starts_with("trunk,iter,stage,norm_choice,addr_acc,used_acc,mrr,recall_at_1,tv_distance,crm_loss,kl_loss,mlm_loss,tau"));

    let ckpt = out.join("trunk-003");
    let o = emvi(&["inspect", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("\"stage\": \"2\""));

    let m = dir.path().join("eval.csv");
    let o = emvi(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--corpus", &corpus, "--last", "20", "--rank-items", "8", "--metrics-out", m.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("dialogues=20"));
    for key in ["addr_acc=", "f1_g=", "mrr=", "tv_distance="] {
        assert!(text.contains(key));
    }
    assert!(m.exists());
}

#[test]
fn single_thread_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, cfg) = tiny_setup(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = emvi(&["--threads", "1", "pretrain", "--corpus", &corpus, "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--max-trunks", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(out);
    }
    for f in ["metrics.csv", "metrics.histogram.csv", "trunk-001/params.bin", "trunk-003/params.bin", "trunk-003/manifest.json"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        let b = std::fs::read(outputs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
