use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::estep::{e_step, Stage};
use super::mstep::{m_step, MStepHyper, MStepItem};
use super::posterior::{cold_start, confidence_filter, PosteriorTable};
use crate::config::{ForceStage, RunConfig};
use crate::corpus::{AddresseeGraph, Conversation, Corpus, Dialogue};
use crate::encoder::{save_checkpoint, Encoder, Optimizer};
use crate::error::{Error, Result};
use crate::eval::{
    build_ranking_pool, crm_ranking, distance_histogram, rank_scores, tv_distance,
    zero_shot_graph_f1, MetricsRow,
};
use crate::rng::{derive, stream};
use crate::tensor::{Mat, Real};
use crate::vi::{anneal_tau, stage_switch};

const KEY_REINIT: u64 = 11;
const KEY_RANK: u64 = 12;
const KEY_MSTEP: u64 = 13;

/// What happened in one trunk, for logging and protocol checks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrunkSummary {
    pub index: usize,
    pub stage: u8,
    pub dialogues: usize,
    pub positives: usize,
    pub m_steps: usize,
    pub e_steps: usize,
    /// Instances fed to each M-step.
    pub m_step_sizes: Vec<usize>,
    /// Confident-half sizes chosen after each E-step, with the candidate
    /// pool size they were chosen from.
    pub selections: Vec<(usize, usize)>,
    pub norms: Vec<String>,
    /// Whether every non-head parameter (and the graph head) was bitwise
    /// unchanged by each re-initialization.
    pub reinit_preserved: Vec<bool>,
    pub alpha: f64,
    pub beta: f64,
    pub tau: Option<f64>,
    pub addr_acc: f64,
    pub used_acc: f64,
    pub tv_distance: f64,
    pub f1_g: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<T> {
    pub encoder: Encoder<T>,
    pub rows: Vec<MetricsRow>,
    pub trunks: Vec<TrunkSummary>,
    /// Validation accuracy under cold start.
    pub cold_start_acc: f64,
    pub gold_histogram: Vec<f64>,
}

/// Groups consecutive dialogues into trunks of at least `size` positive
/// instances. A short remainder joins the last trunk unless it has half a
/// trunk's worth.
pub fn split_trunks(conversations: &[Conversation], dialogues: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut cur = Vec::new();
    let mut n = 0;
    for &d in dialogues {
        cur.push(d);
        n += conversations[d].len() - 1;
        if n >= size {
            out.push(std::mem::take(&mut cur));
            n = 0;
        }
    }
    if !cur.is_empty() {
        match out.last_mut() {
            Some(last) if 2 * n < size => last.extend(cur),
            _ => out.push(cur),
        }
    }
    out
}

fn positives(conversations: &[Conversation], dialogues: &[usize]) -> Vec<(usize, usize)> {
    dialogues
        .iter()
        .flat_map(|&d| (2..=conversations[d].len()).map(move |t| (d, t)))
        .collect()
}

struct Validation<'a> {
    dialogues: Vec<usize>,
    gold: Vec<&'a AddresseeGraph>,
    refs: Vec<&'a Dialogue>,
    gold_hist: Vec<f64>,
}

impl Validation<'_> {
    /// `(predicted, gold)` addressees for every turn, in table order.
    fn pairs(&self, table: &PosteriorTable) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for (d, g) in self.dialogues.iter().zip(&self.gold) {
            for t in 2..=g.len() {
                let p = table.argmax(*d, t).ok_or_else(|| Error::MissingPosterior {
                    dialogue: d.to_string(),
                    turn: t,
                })?;
                out.push((p, g.parent(t).expect("non-root turn")));
            }
        }
        Ok(out)
    }

    fn histogram(&self, table: &PosteriorTable, max_distance: usize) -> Result<Vec<f64>> {
        let mut dist = Vec::new();
        for (d, g) in self.dialogues.iter().zip(&self.gold) {
            for t in 2..=g.len() {
                dist.push(t - table.argmax(*d, t).expect("checked by pairs"));
            }
        }
        Ok(distance_histogram(&dist, max_distance))
    }
}

fn split_table(table: PosteriorTable, validation: &[usize]) -> (PosteriorTable, PosteriorTable) {
    let (mut train, mut val) = (PosteriorTable::default(), PosteriorTable::default());
    for (&(d, t), p) in table.iter() {
        if validation.binary_search(&d).is_ok() {
            val.insert(d, t, p.clone());
        } else {
            train.insert(d, t, p.clone());
        }
    }
    (train, val)
}

fn preserved<T: Real>(enc: &Encoder<T>, before: &[Mat<T>]) -> bool {
    enc.specs
        .iter()
        .zip(enc.params.iter().zip(before))
        .filter(|(s, _)| !s.group.is_head())
        .all(|(_, (a, b))| {
            a.data.iter().zip(&b.data).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        })
}

/// Runs the full schedule: stage-one trunks until the switch rule fires (or
/// the stage-one bounds force it), then stage-two trunks. The last
/// `validation_size` dialogues are held out; their gold graphs are used only
/// for the normalization choice and for metrics.
pub fn run_pretraining<T: Real>(
    corpus: &Corpus,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutput<T>> {
    cfg.validate()?;
    let vocab = &corpus.vocab;
    let conversations = corpus.conversations();
    let n = conversations.len();
    if cfg.validation_size >= n {
        return Err(Error::Data(format!(
            "corpus has {n} dialogues, need more than validation_size {}",
            cfg.validation_size
        )));
    }
    let val_dialogues: Vec<usize> = (n - cfg.validation_size..n).collect();
    let mut gold = Vec::new();
    let mut refs = Vec::new();
    for &d in &val_dialogues {
        let dlg = &corpus.dialogues[d];
        gold.push(dlg.gold_graph().ok_or_else(|| {
            Error::Data(format!("validation dialogue {} has no gold graph", dlg.id()))
        })?);
        refs.push(dlg);
    }
    let ecfg = cfg.encoder_config(vocab.size());
    let max_distance = ecfg.max_turns - 1;
    let gold_dist: Vec<usize> = gold.iter().flat_map(|g| g.distances().collect::<Vec<_>>()).collect();
    let val = Validation {
        gold_hist: distance_histogram(&gold_dist, max_distance),
        dialogues: val_dialogues.clone(),
        gold,
        refs,
    };

    let train: Vec<usize> = (0..n - cfg.validation_size).collect();
    let trunks = split_trunks(&conversations, &train, cfg.trunk_size);
    log::info!("{} training dialogues in {} trunks; {} validation dialogues", train.len(), trunks.len(), val_dialogues.len());

    let mut enc: Encoder<T> = Encoder::init(&ecfg, cfg.seed)?;
    let clip = (cfg.clip_norm > 0.0).then_some(cfg.clip_norm);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, clip, &enc.params);
    let pool = build_ranking_pool(
        &conversations,
        &val_dialogues,
        cfg.rank_items,
        cfg.rank_candidates,
        &mut stream(cfg.seed, &[KEY_RANK]),
    );

    let mut stage = if cfg.force_stage == ForceStage::Two { Stage::Two } else { Stage::One };
    let first_lens: Vec<(usize, usize)> = trunks[0].iter().map(|&d| (d, conversations[d].len())).collect();
    let mut carried = cold_start(&first_lens);
    let mut selection = positives(&conversations, &trunks[0]);
    let val_lens: Vec<(usize, usize)> = val_dialogues.iter().map(|&d| (d, conversations[d].len())).collect();
    let mut val_table = cold_start(&val_lens);

    let cold_pairs = val.pairs(&val_table)?;
    let cold_start_acc = crate::eval::accuracy(&cold_pairs)?;
    let cold_hist = val.histogram(&val_table, max_distance)?;
    let mut rows = vec![MetricsRow {
        trunk: 1,
        iter: 0,
        stage: stage.number(),
        addr_acc: Some(cold_start_acc),
        tv_distance: Some(tv_distance(&cold_hist, &val.gold_hist)),
        histogram: cold_hist,
        ..Default::default()
    }];
    log::info!("cold start: validation accuracy {cold_start_acc:.4}");

    let mut summaries = Vec::new();
    let mut history = Vec::new();
    let mut stage1_trunks = 0usize;
    let mut stage2_trunks = 0usize;
    for index in 0..cfg.max_trunks {
        let dialogues = &trunks[index % trunks.len()];
        let next = &trunks[(index + 1) % trunks.len()];
        let (alpha, beta, tau) = match stage {
            Stage::One => (0.0, 0.0, None),
            Stage::Two => (cfg.alpha, cfg.beta, Some(anneal_tau(stage2_trunks + 1))),
        };
        let mut summary = TrunkSummary {
            index: index + 1,
            stage: stage.number(),
            dialogues: dialogues.len(),
            positives: positives(&conversations, dialogues).len(),
            m_steps: 0,
            e_steps: 0,
            m_step_sizes: Vec::new(),
            selections: Vec::new(),
            norms: Vec::new(),
            reinit_preserved: Vec::new(),
            alpha,
            beta,
            tau,
            addr_acc: 0.0,
            used_acc: 0.0,
            tv_distance: 0.0,
            f1_g: 0.0,
            checkpoint: None,
        };

        for iter in 1..=cfg.em_iters {
            let items: Vec<MStepItem> = selection
                .iter()
                .map(|&(d, t)| {
                    let addressee = carried.argmax(d, t).ok_or_else(|| Error::MissingPosterior {
                        dialogue: d.to_string(),
                        turn: t,
                    })?;
                    Ok(MStepItem { dialogue: d, turn: t, addressee })
                })
                .collect::<Result<_>>()?;
            let hyper = MStepHyper {
                stage,
                alpha,
                beta,
                tau: tau.unwrap_or(1.0),
                batch_size: cfg.batch_size,
                negatives: cfg.negatives(),
                seed: derive(cfg.seed, &[KEY_MSTEP]),
                pass_id: (index * 100 + iter) as u64,
            };
            let prior = (stage == Stage::Two).then_some(&carried);
            let report = m_step(&mut enc, &mut opt, vocab, &conversations, &items, prior, &hyper)?;
            summary.m_steps += 1;
            summary.m_step_sizes.push(items.len());

            let (mrr, r1) = if pool.is_empty() {
                (None, None)
            } else {
                let (m, r) = crm_ranking(&rank_scores(&enc, vocab, &conversations, &pool, stage, &val_table));
                (Some(m), Some(r))
            };

            let targets: &[usize] = if iter < cfg.em_iters { dialogues } else { next };
            let mut all: Vec<usize> = targets.to_vec();
            all.extend(&val_dialogues);
            let table = e_step(&enc, vocab, &conversations, &all, stage);
            summary.e_steps += 1;
            let (train_table, new_val) = split_table(table, &val_dialogues);
            let pairs = val.pairs(&new_val)?;
            let train_entries: Vec<_> = train_table.iter().map(|(k, p)| (*k, p)).collect();
            let val_entries: Vec<_> = val
                .dialogues
                .iter()
                .zip(&val.gold)
                .flat_map(|(&d, g)| (2..=g.len()).map(move |t| (d, t, g.parent(t).expect("non-root"))))
                .map(|(d, t, g)| (new_val.get(d, t).expect("checked by pairs"), g))
                .collect();
            let outcome = confidence_filter(&train_entries, &val_entries);
            debug_assert!((outcome.addr_acc - crate::eval::accuracy(&pairs)?).abs() < 1e-12);
            let hist = val.histogram(&new_val, max_distance)?;
            let tv = tv_distance(&hist, &val.gold_hist);

            let before: Vec<_> = enc.params.clone();
            let touched = enc.reinit_heads(derive(cfg.seed, &[KEY_REINIT, index as u64, iter as u64]));
            opt.reset(&touched);
            summary.reinit_preserved.push(preserved(&enc, &before));
            debug_assert!(touched.iter().all(|&i| enc.specs[i].group.is_head()));

            summary.selections.push((outcome.selected.len(), train_entries.len()));
            summary.norms.push(outcome.norm.as_str().to_string());
            summary.addr_acc = outcome.addr_acc;
            summary.used_acc = outcome.used_acc;
            summary.tv_distance = tv;
            log::info!(
                "trunk {} iter {iter} stage {}: acc {:.4} used {:.4} ({}) tv {:.4} crm {:.4} kl {:.4} mlm {:.4}",
                index + 1,
                stage.number(),
                outcome.addr_acc,
                outcome.used_acc,
                outcome.norm.as_str(),
                tv,
                report.mean.crm,
                report.mean.kl,
                report.mean.mlm
            );
            rows.push(MetricsRow {
                trunk: index + 1,
                iter,
                stage: stage.number(),
                norm_choice: Some(outcome.norm.as_str().to_string()),
                addr_acc: Some(outcome.addr_acc),
                used_acc: Some(outcome.used_acc),
                mrr,
                recall_at_1: r1,
                tv_distance: Some(tv),
                crm_loss: Some(report.mean.crm),
                kl_loss: (stage == Stage::Two).then_some(report.mean.kl),
                mlm_loss: (beta != 0.0).then_some(report.mean.mlm),
                tau,
                histogram: hist,
            });
            carried = train_table;
            selection = outcome.selected;
            val_table = new_val;
        }

        summary.f1_g = zero_shot_graph_f1(&enc, vocab, &val.refs)?;
        if let (Some(dir), true) = (out_dir, cfg.checkpoints) {
            let path = dir.join(format!("trunk-{:03}", index + 1));
            let mut meta = BTreeMap::new();
            meta.insert("trunk".to_string(), (index + 1).to_string());
            meta.insert("stage".to_string(), stage.number().to_string());
            save_checkpoint(&enc, &meta, &path)?;
            summary.checkpoint = Some(path);
        }
        log::info!("trunk {} done: graph F1 {:.4}", index + 1, summary.f1_g);
        history.push(summary.addr_acc);
        summaries.push(summary);

        match stage {
            Stage::One => {
                stage1_trunks += 1;
                let switch = match cfg.force_stage {
                    ForceStage::One => false,
                    _ => {
                        stage1_trunks >= cfg.stage1_max_trunks
                            || (stage1_trunks >= cfg.stage1_min_trunks && stage_switch(&history))
                    }
                };
                if switch {
                    log::info!("switching to stage two after {stage1_trunks} trunks");
                    stage = Stage::Two;
                }
            }
            Stage::Two => {
                stage2_trunks += 1;
                if stage2_trunks >= cfg.stage2_trunks {
                    break;
                }
            }
        }
    }

    Ok(PretrainOutput {
        encoder: enc,
        rows,
        trunks: summaries,
        cold_start_acc,
        gold_histogram: val.gold_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunks_cover_dialogues() {
        let convs: Vec<Conversation> = (0..10)
            .map(|i| Conversation {
                id: format!("c{i}"),
                utterances: (0..5)
                    .map(|_| crate::corpus::Utterance { speaker: 0, tokens: vec![5], turn: 1 })
                    .collect(),
            })
            .collect();
        let ds: Vec<usize> = (0..10).collect();
        let t = split_trunks(&convs, &ds, 8);
        assert_eq!(t, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]);
        let t = split_trunks(&convs, &ds, 12);
        assert_eq!(t.concat(), ds);
        assert_eq!(t.len(), 3);
    }
}
