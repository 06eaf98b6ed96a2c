//! Exact-match metrics, augmentation voting and the two-attempt ARC score.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{decode as decode_grid, Dataset, Grid, Task};
use crate::error::{Error, Result};
use crate::model::{decode, Model};
use crate::recursion::{self, LatentState, RecursionSchedule};
use crate::tensor::Scalar;
use crate::train::check_compatible;
use crate::train::losses::{halting_decision, sample_exact};

/// Fraction of samples of length `l` whose unmasked positions all match.
pub fn exact_match(pred: &[usize], target: &[usize], l: usize, mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != target.len() || l == 0 || pred.len() % l != 0 || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::Shape(format!(
            "{} predictions, {} targets, length {l}",
            pred.len(),
            target.len()
        )));
    }
    let b = pred.len() / l;
    if b == 0 {
        return Ok(0.0);
    }
    let hits = (0..b)
        .filter(|&i| {
            let s = i * l..(i + 1) * l;
            sample_exact(&pred[s.clone()], &target[s.clone()], mask.map(|m| &m[s]))
        })
        .count();
    Ok(hits as f64 / b as f64)
}

/// Distinct candidates with their counts, most frequent first; ties go to the
/// lexicographically smaller grid (height, width, then cells).
pub fn rank_candidates(candidates: &[Grid]) -> Vec<(Grid, usize)> {
    let mut counts: HashMap<&Grid, usize> = HashMap::new();
    for c in candidates {
        *counts.entry(c).or_default() += 1;
    }
    let mut ranked: Vec<(Grid, usize)> = counts.into_iter().map(|(g, n)| (g.clone(), n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Most common candidate and the fraction of candidates agreeing with it.
pub fn majority_vote(candidates: &[Grid]) -> Result<(Grid, f64)> {
    let ranked = rank_candidates(candidates);
    let (winner, n) = ranked
        .into_iter()
        .next()
        .ok_or_else(|| Error::Data("majority vote over no candidates".into()))?;
    Ok((winner, n as f64 / candidates.len() as f64))
}

/// Mean over test inputs of "one of the first `attempts` distinct ranked
/// candidates equals the target".
pub fn arc_score(predictions: &[(Vec<Grid>, Grid)], attempts: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .filter(|(ranked, target)| {
            let mut distinct: Vec<&Grid> = Vec::with_capacity(attempts);
            for g in ranked {
                if distinct.len() == attempts {
                    break;
                }
                if !distinct.contains(&g) {
                    distinct.push(g);
                }
            }
            distinct.contains(&target)
        })
        .count();
    hits as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub samples: usize,
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub samples: usize,
    pub exact_match: f64,
    pub per_cell_accuracy: f64,
    /// Supervision step at which the halting signal first fires (or `n_sup`).
    pub mean_sup_steps: f64,
    pub n_sup: usize,
    /// Full forward passes run per sample.
    pub forward_passes_per_sample: usize,
    pub per_task: BTreeMap<String, Breakdown>,
    /// ARC only: mean share of augmentations agreeing with the top vote.
    pub vote_agreement: Option<f64>,
    /// ARC only: top-2 voted score and its single-attempt counterpart.
    pub arc_score: Option<f64>,
    pub arc_score_top1: Option<f64>,
    pub params_digest: String,
    /// Run identity, filled in by callers that know it.
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
}

/// Outcome of one sample, for the optional CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub puzzle_id: usize,
    pub augmentation_id: usize,
    pub group: Option<String>,
    pub exact: bool,
    pub cell_accuracy: f64,
    pub halt_step: usize,
    pub prediction: Vec<usize>,
}

/// Runs every sample through all `schedule.n_sup` supervision steps (no early
/// exit), decodes after the last one and aggregates.
pub fn eval_run<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    schedule: &RecursionSchedule,
    batch_size: usize,
) -> Result<(EvalReport, Vec<SampleOutcome>)> {
    schedule.validate()?;
    check_compatible(model, data)?;
    let l = data.seq_len;
    let bs = batch_size.max(1);
    let mut outcomes = Vec::with_capacity(data.len());
    for (chunk_i, chunk) in data.records.chunks(bs).enumerate() {
        let b = chunk.len();
        let tokens: Vec<usize> = chunk.iter().flat_map(|r| r.input.iter().copied()).collect();
        let pids: Vec<usize> = chunk.iter().map(|r| r.puzzle_id).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false)?;
        let x = g.no_grad(|g| bound.embed_input(g, &tokens, &pids))?;
        let mut state = LatentState::initial(model, schedule, b);
        let mut halt_step = vec![schedule.n_sup; b];
        let mut logits = None;
        for s in 0..schedule.n_sup {
            let out = g.no_grad(|g| recursion::forward(g, &bound, &x, &state, schedule))?;
            let q = out.halt.value().data();
            let c = out.halt.shape()[1];
            for i in 0..b {
                let qi: Vec<f64> = q[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect();
                if halt_step[i] == schedule.n_sup && s + 1 < schedule.n_sup && halting_decision(schedule.variant, &qi) {
                    halt_step[i] = s + 1;
                }
            }
            state = out.state;
            logits = Some(out.logits);
        }
        let preds = decode(logits.expect("n_sup ≥ 1").value());
        for (i, r) in chunk.iter().enumerate() {
            let p = &preds[i * l..(i + 1) * l];
            let mask = r.mask();
            let counted = mask.iter().filter(|&&m| m).count();
            let right = (0..l).filter(|&j| mask[j] && p[j] == r.target[j]).count();
            outcomes.push(SampleOutcome {
                index: chunk_i * bs + i,
                puzzle_id: r.puzzle_id,
                augmentation_id: r.augmentation_id,
                group: r.group.clone(),
                exact: sample_exact(p, &r.target, Some(&mask)),
                cell_accuracy: if counted == 0 {
                    1.0
                } else {
                    right as f64 / counted as f64
                },
                halt_step: halt_step[i],
                prediction: p.to_vec(),
            });
        }
    }
    let report = summarize(model, data, schedule, &outcomes)?;
    Ok((report, outcomes))
}

fn summarize<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    schedule: &RecursionSchedule,
    outcomes: &[SampleOutcome],
) -> Result<EvalReport> {
    let n = outcomes.len();
    let mean = |f: &dyn Fn(&SampleOutcome) -> f64| {
        if n == 0 {
            0.0
        } else {
            outcomes.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        let key = match &o.group {
            Some(gr) => gr.split('#').next().unwrap_or(gr).to_string(),
            None => data.task.as_str().to_string(),
        };
        let e = per_task.entry(key).or_default();
        e.0 += 1;
        e.1 += usize::from(o.exact);
    }
    let (mut vote_agreement, mut score2, mut score1) = (None, None, None);
    if data.task == Task::Arc {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in data.records.iter().enumerate() {
            if let Some(gr) = &r.group {
                groups.entry(gr).or_default().push(i);
            }
        }
        let mut preds = Vec::new();
        let mut agreement = Vec::new();
        for idx in groups.values() {
            let first = &data.records[idx[0]];
            let inv = first
                .inverse
                .clone()
                .unwrap_or_else(crate::data::arc::ArcTransform::identity);
            let target = inv.invert(&decode_grid(&first.target, Task::Arc, data.grid_shape)?);
            let candidates: Vec<Grid> = idx
                .iter()
                .filter_map(|&i| {
                    let r = &data.records[i];
                    let g = decode_grid(&outcomes[i].prediction, Task::Arc, data.grid_shape).ok()?;
                    let inv = r
                        .inverse
                        .clone()
                        .unwrap_or_else(crate::data::arc::ArcTransform::identity);
                    Some(inv.invert(&g))
                })
                .collect();
            let ranked = rank_candidates(&candidates);
            agreement.push(ranked.first().map_or(0.0, |(_, c)| *c as f64 / idx.len() as f64));
            preds.push((ranked.into_iter().map(|(g, _)| g).collect::<Vec<_>>(), target));
        }
        if !preds.is_empty() {
            vote_agreement = Some(agreement.iter().sum::<f64>() / agreement.len() as f64);
            score2 = Some(arc_score(&preds, 2));
            score1 = Some(arc_score(&preds, 1));
        }
    }
    Ok(EvalReport {
        task: data.task,
        samples: n,
        exact_match: mean(&|o| if o.exact { 1.0 } else { 0.0 }),
        per_cell_accuracy: mean(&|o| o.cell_accuracy),
        mean_sup_steps: mean(&|o| o.halt_step as f64),
        n_sup: schedule.n_sup,
        forward_passes_per_sample: schedule.n_sup,
        per_task: per_task
            .into_iter()
            .map(|(k, (s, e))| {
                (
                    k,
                    Breakdown {
                        samples: s,
                        exact_match: e as f64 / s as f64,
                    },
                )
            })
            .collect(),
        vote_agreement,
        arc_score: score2,
        arc_score_top1: score1,
        params_digest: model.params.digest(),
        config_hash: None,
        seed: None,
    })
}

/// Per-sample outcomes as CSV.
pub fn outcomes_csv(outcomes: &[SampleOutcome]) -> String {
    let mut s = String::from("index,puzzle_id,augmentation_id,group,exact,cell_accuracy,halt_step\n");
    for o in outcomes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{}",
            o.index,
            o.puzzle_id,
            o.augmentation_id,
            o.group.as_deref().unwrap_or(""),
            u8::from(o.exact),
            o.cell_accuracy,
            o.halt_step
        );
    }
    s
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(cells: &[u8]) -> Grid {
        Grid::new(1, cells.len(), cells.to_vec()).unwrap()
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match(&[1, 2, 3, 4], &[1, 2, 3, 4], 2, None).unwrap(), 1.0);
        assert_eq!(exact_match(&[1, 2, 3, 5], &[1, 2, 3, 4], 2, None).unwrap(), 0.5);
        let mask = [true, true, true, false];
        assert_eq!(exact_match(&[1, 2, 3, 5], &[1, 2, 3, 0], 2, Some(&mask)).unwrap(), 1.0);
        assert!(exact_match(&[1], &[1, 2], 1, None).is_err());
    }

    #[test]
    fn vote_examples() {
        let (a, b) = (g(&[1, 2]), g(&[1, 3]));
        assert_eq!(majority_vote(&[a.clone(), b.clone(), a.clone()]).unwrap().0, a);
        assert_eq!(majority_vote(&[b.clone(), a.clone()]).unwrap().0, a);
        assert!(majority_vote(&[]).is_err());
        let mut cands = vec![a.clone(); 600];
        cands.extend(vec![b.clone(); 400]);
        let (w, agree) = majority_vote(&cands).unwrap();
        assert_eq!((w, agree), (a, 0.6));
    }

    #[test]
    fn arc_score_examples() {
        let (a, b, c) = (g(&[1]), g(&[2]), g(&[3]));
        assert_eq!(arc_score(&[(vec![a.clone(), b.clone()], b.clone())], 2), 1.0);
        assert_eq!(arc_score(&[(vec![a.clone(), b.clone()], c.clone())], 2), 0.0);
        assert_eq!(arc_score(&[(vec![a.clone(), a.clone(), c.clone()], c.clone())], 2), 1.0);
        assert_eq!(arc_score(&[(vec![a.clone(), b.clone()], b)], 1), 0.0);
    }
}
