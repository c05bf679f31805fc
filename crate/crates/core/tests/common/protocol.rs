use std::collections::BTreeMap;
use std::path::Path;

use emvi::config::RunConfig;
use emvi::corpus::{generate_corpus, Corpus, GeneratorConfig};
use emvi::em::{run_pretraining, PretrainOutput};
use emvi::eval::export_metrics;
use emvi::vi::{anneal_tau, stage_switch};

pub fn tiny_corpus(n_dialogues: usize, seed: u64) -> Corpus {
    generate_corpus(&GeneratorConfig {
        n_dialogues,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

/// A run small enough to finish in seconds that still passes through both
/// stages.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("d_model", "16"),
        ("n_layers", "1"),
        ("n_heads", "2"),
        ("ffn_dim", "32"),
        ("graph_hidden", "16"),
        ("dtype", "f64"),
        ("trunk_size", "120"),
        ("max_trunks", "12"),
        ("stage1_min_trunks", "2"),
        ("stage1_max_trunks", "5"),
        ("stage2_trunks", "2"),
        ("validation_size", "20"),
        ("rank_items", "8"),
        ("rank_candidates", "4"),
        ("batch_size", "8"),
        ("seed", "5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

/// Runs on a private single-thread pool and writes the metrics next to the
/// checkpoints.
pub fn run_single_thread(corpus: &Corpus, cfg: &RunConfig, dir: &Path) -> PretrainOutput<f64> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let out = pool.install(|| run_pretraining::<f64>(corpus, cfg, Some(dir))).unwrap();
    export_metrics(&out.rows, &dir.join("metrics.csv")).unwrap();
    out
}

/// Every protocol rule the trunk summaries can witness; empty when all hold.
pub fn protocol_violations<T>(cfg: &RunConfig, out: &PretrainOutput<T>) -> Vec<String> {
    let mut bad = Vec::new();
    let mut history = Vec::new();
    let mut stage2_seen = 0;
    let mut prev_selected: Option<usize> = None;
    for (k, s) in out.trunks.iter().enumerate() {
        let tag = format!("trunk {}", s.index);
        if s.m_steps != cfg.em_iters || s.e_steps != cfg.em_iters {
            bad.push(format!("{tag}: {} M-steps and {} E-steps", s.m_steps, s.e_steps));
        }
        for &(selected, pool) in &s.selections {
            if selected != pool.div_ceil(2) {
                bad.push(format!("{tag}: selected {selected} of {pool}"));
            }
        }
        for (i, &size) in s.m_step_sizes.iter().enumerate() {
            let want = match (k, i, prev_selected) {
                (0, 0, _) => s.positives,
                (_, _, Some(p)) => p,
                _ => size,
            };
            if size != want {
                bad.push(format!("{tag}: M-step {} trained on {size} instances, expected {want}", i + 1));
            }
            prev_selected = s.selections.get(i).map(|x| x.0);
        }
        if s.reinit_preserved.len() != cfg.em_iters || s.reinit_preserved.iter().any(|p| !p) {
            bad.push(format!("{tag}: re-initialization touched body or graph parameters"));
        }
        match s.stage {
            1 => {
                if s.alpha != 0.0 || s.beta != 0.0 || s.tau.is_some() {
                    bad.push(format!("{tag}: stage one with alpha {} beta {}", s.alpha, s.beta));
                }
                if stage2_seen > 0 {
                    bad.push(format!("{tag}: stage one after stage two"));
                }
                history.push(s.addr_acc);
                let n = history.len();
                let should = n >= cfg.stage1_max_trunks || (n >= cfg.stage1_min_trunks && stage_switch(&history));
                let switched = out.trunks.get(k + 1).map(|t| t.stage == 2);
                match switched {
                    Some(true) if !should => bad.push(format!("{tag}: switched without the rule firing")),
                    Some(false) if should => bad.push(format!("{tag}: rule fired but stage one continued")),
                    _ => {}
                }
            }
            _ => {
                stage2_seen += 1;
                if s.alpha != cfg.alpha || s.beta != cfg.beta {
                    bad.push(format!("{tag}: stage two with alpha {} beta {}", s.alpha, s.beta));
                }
                if s.tau != Some(anneal_tau(stage2_seen)) {
                    bad.push(format!("{tag}: tau {:?}", s.tau));
                }
            }
        }
    }
    bad
}

/// Every file under `dir`, keyed by relative path.
pub fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
