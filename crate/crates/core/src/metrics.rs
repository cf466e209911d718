//! Accuracy traces and the evaluation metrics computed from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    #[serde(rename = "L")]
    Learn,
    #[serde(rename = "U")]
    Unlearn,
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Instruction::Learn => "L",
            Instruction::Unlearn => "U",
        })
    }
}

impl FromStr for Instruction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Instruction::Learn),
            "U" => Ok(Instruction::Unlearn),
            other => Err(Error::Trace(format!("unknown instruction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOp {
    pub op_index: usize,
    pub instruction: Instruction,
    pub task_id: TaskId,
}

/// `acc[t][u]`: test accuracy (percent) of task `t` after operation `u`, for
/// every task in the sequence at every operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTrace {
    pub ops: Vec<TraceOp>,
    pub acc: BTreeMap<TaskId, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    Retained,
    Forgotten,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    op_index: usize,
    instruction: Instruction,
    task_id: TaskId,
    measured_task: TaskId,
    accuracy: f64,
}

impl AccuracyTrace {
    pub fn new(tasks: impl IntoIterator<Item = TaskId>) -> Self {
        Self {
            ops: Vec::new(),
            acc: tasks.into_iter().map(|t| (t, Vec::new())).collect(),
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.acc.keys().copied()
    }

    /// Appends an operation and its full accuracy column.
    pub fn push(&mut self, instruction: Instruction, task_id: TaskId, column: &BTreeMap<TaskId, f64>) -> Result<()> {
        if column.len() != self.acc.len() || column.keys().any(|t| !self.acc.contains_key(t)) {
            return Err(Error::Trace(format!(
                "column covers {:?}, trace tracks {:?}",
                column.keys().collect::<Vec<_>>(),
                self.acc.keys().collect::<Vec<_>>()
            )));
        }
        self.ops.push(TraceOp {
            op_index: self.ops.len(),
            instruction,
            task_id,
        });
        for (t, a) in column {
            self.acc.get_mut(t).expect("checked").push(*a);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn accuracy(&self, task: TaskId, op: usize) -> Result<f64> {
        self.acc
            .get(&task)
            .and_then(|col| col.get(op).copied())
            .ok_or_else(|| Error::Trace(format!("no accuracy for task {task} at op {op}")))
    }

    /// Status of every task that was learned at some point, by its last operation.
    pub fn final_status(&self) -> BTreeMap<TaskId, FinalStatus> {
        let mut status = BTreeMap::new();
        for op in &self.ops {
            let s = match op.instruction {
                Instruction::Learn => FinalStatus::Retained,
                Instruction::Unlearn => FinalStatus::Forgotten,
            };
            status.insert(op.task_id, s);
        }
        status
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for op in &self.ops {
            for (t, col) in &self.acc {
                w.serialize(TraceRow {
                    op_index: op.op_index,
                    instruction: op.instruction,
                    task_id: op.task_id,
                    measured_task: *t,
                    accuracy: col[op.op_index],
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut ops: Vec<TraceOp> = Vec::new();
        let mut cells: BTreeMap<TaskId, BTreeMap<usize, f64>> = BTreeMap::new();
        for row in r.deserialize() {
            let row: TraceRow = row?;
            match ops.last() {
                Some(last) if last.op_index == row.op_index => {
                    if last.instruction != row.instruction || last.task_id != row.task_id {
                        return Err(Error::Trace(format!("op {} is inconsistent", row.op_index)));
                    }
                }
                _ => {
                    if row.op_index != ops.len() {
                        return Err(Error::Trace(format!("unexpected op index {}", row.op_index)));
                    }
                    ops.push(TraceOp {
                        op_index: row.op_index,
                        instruction: row.instruction,
                        task_id: row.task_id,
                    });
                }
            }
            if cells.entry(row.measured_task).or_default().insert(row.op_index, row.accuracy).is_some() {
                return Err(Error::Trace(format!(
                    "duplicate cell for task {} at op {}",
                    row.measured_task, row.op_index
                )));
            }
        }
        let mut acc = BTreeMap::new();
        for (t, col) in cells {
            if col.len() != ops.len() {
                return Err(Error::Trace(format!("task {t} is missing accuracies")));
            }
            acc.insert(t, col.into_values().collect());
        }
        Ok(Self { ops, acc })
    }
}

/// Mean final accuracy of retained and of forgotten tasks; `None` when a group is empty.
pub fn retain_forget_accuracy(
    trace: &AccuracyTrace,
    final_status: &BTreeMap<TaskId, FinalStatus>,
) -> Result<(Option<f64>, Option<f64>)> {
    if trace.is_empty() {
        return Err(Error::Trace("empty trace".into()));
    }
    let last = trace.len() - 1;
    let mut groups = [(0.0, 0usize), (0.0, 0usize)];
    for (t, s) in final_status {
        let g = &mut groups[(*s == FinalStatus::Forgotten) as usize];
        g.0 += trace.accuracy(*t, last)?;
        g.1 += 1;
    }
    let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
    Ok((mean(groups[0]), mean(groups[1])))
}

fn learned_before(trace: &AccuracyTrace, u: usize) -> BTreeSet<TaskId> {
    trace.ops[..u]
        .iter()
        .filter(|op| op.instruction == Instruction::Learn)
        .map(|op| op.task_id)
        .collect()
}

/// Sum of absolute accuracy changes across unlearning op `u` over every task
/// learned before `u` except the forget task `f`.
pub fn spill(trace: &AccuracyTrace, u: usize, f: TaskId) -> Result<f64> {
    let op = trace
        .ops
        .get(u)
        .ok_or_else(|| Error::Trace(format!("no op {u}")))?;
    if u == 0 || op.instruction != Instruction::Unlearn || op.task_id != f {
        return Err(Error::Trace(format!("op {u} is not the unlearning of task {f}")));
    }
    learned_before(trace, u)
        .into_iter()
        .filter(|t| *t != f)
        .map(|t| Ok((trace.accuracy(t, u - 1)? - trace.accuracy(t, u)?).abs()))
        .sum()
}

/// `|a_u − a_e|` for a task unlearned at op `u`.
pub fn relapse(trace: &AccuracyTrace, t: TaskId, u: usize, e: usize) -> Result<f64> {
    match trace.ops.get(u) {
        Some(op) if op.instruction == Instruction::Unlearn && op.task_id == t => {}
        _ => return Err(Error::Trace(format!("task {t} was not unlearned at op {u}"))),
    }
    if e < u {
        return Err(Error::Trace(format!("final op {e} precedes op {u}")));
    }
    Ok((trace.accuracy(t, u)? - trace.accuracy(t, e)?).abs())
}

/// Best balanced accuracy (percent) of the rule "loss < τ ⇒ member" over all
/// midpoint thresholds τ between distinct pooled losses.
pub fn mia_score(forget_losses: &[f64], heldout_losses: &[f64]) -> Result<f64> {
    if forget_losses.is_empty() || heldout_losses.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if forget_losses.iter().chain(heldout_losses).any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("membership losses"));
    }
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (members, others) = (sorted(forget_losses), sorted(heldout_losses));
    let (n, m) = (members.len() as u128, others.len() as u128);
    let mut pooled: Vec<f64> = members.iter().chain(&others).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();

    // Thresholds below every loss: no members flagged, balanced accuracy 1/2.
    let mut best = n * m;
    let (mut i, mut j) = (0usize, 0usize);
    for w in pooled.windows(2) {
        let tau = 0.5 * (w[0] + w[1]);
        while i < members.len() && members[i] < tau {
            i += 1;
        }
        while j < others.len() && others[j] < tau {
            j += 1;
        }
        // 2nm · ½(TPR + TNR) = i·m + (m − j)·n
        best = best.max(i as u128 * m + (m - j as u128) * n);
    }
    Ok(100.0 * best as f64 / (2 * n * m) as f64)
}

/// Monte-Carlo mean of `‖θ − z‖²` over `n` standard-normal draws.
pub fn mse_limit_check(theta: &[f64], n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let sq: f64 = theta
            .iter()
            .map(|t| {
                let d = t - rng.sample::<f64, _>(StandardNormal);
                d * d
            })
            .sum();
        total += sq;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpillEntry {
    pub op_index: usize,
    pub task_id: TaskId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelapseEntry {
    pub task_id: TaskId,
    pub unlearned_at: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ra: Option<f64>,
    pub fa: Option<f64>,
    pub spill: Vec<SpillEntry>,
    pub spill_mean: Option<f64>,
    pub relapse: Vec<RelapseEntry>,
    pub relapse_mean: Option<f64>,
    pub mia: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    /// Derives every trace-based metric; `mia` is measured separately since
    /// it needs per-sample losses.
    pub fn from_trace(trace: &AccuracyTrace, mia: Option<f64>) -> Result<Self> {
        let status = trace.final_status();
        let (ra, fa) = retain_forget_accuracy(trace, &status)?;
        let spill_entries = trace
            .ops
            .iter()
            .filter(|op| op.instruction == Instruction::Unlearn)
            .map(|op| {
                Ok(SpillEntry {
                    op_index: op.op_index,
                    task_id: op.task_id,
                    value: spill(trace, op.op_index, op.task_id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let last = trace.len() - 1;
        let relapse_entries = status
            .iter()
            .filter(|(_, s)| **s == FinalStatus::Forgotten)
            .map(|(t, _)| {
                let u = trace
                    .ops
                    .iter()
                    .rev()
                    .find(|op| op.task_id == *t && op.instruction == Instruction::Unlearn)
                    .expect("forgotten tasks have an unlearning op")
                    .op_index;
                Ok(RelapseEntry {
                    task_id: *t,
                    unlearned_at: u,
                    value: relapse(trace, *t, u, last)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ra,
            fa,
            spill_mean: mean(spill_entries.iter().map(|s| s.value)),
            spill: spill_entries,
            relapse_mean: mean(relapse_entries.iter().map(|r| r.value)),
            relapse: relapse_entries,
            mia,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(pairs: &[(TaskId, f64)]) -> BTreeMap<TaskId, f64> {
        pairs.iter().copied().collect()
    }

    /// L0 L1 L3 U1 with the spill example's columns around the unlearning op.
    fn spill_trace() -> AccuracyTrace {
        let mut tr = AccuracyTrace::new([0, 1, 3]);
        tr.push(Instruction::Learn, 0, &col(&[(0, 92.0), (1, 11.0), (3, 9.0)])).unwrap();
        tr.push(Instruction::Learn, 1, &col(&[(0, 91.0), (1, 85.0), (3, 10.0)])).unwrap();
        tr.push(Instruction::Learn, 3, &col(&[(0, 90.0), (1, 84.0), (3, 70.0)])).unwrap();
        tr.push(Instruction::Unlearn, 1, &col(&[(0, 88.0), (1, 10.0), (3, 71.0)])).unwrap();
        tr
    }

    #[test]
    fn retain_forget_examples() {
        let mut tr = AccuracyTrace::new([0, 1]);
        tr.push(Instruction::Learn, 0, &col(&[(0, 100.0), (1, 100.0)])).unwrap();
        tr.push(Instruction::Learn, 1, &col(&[(0, 100.0), (1, 100.0)])).unwrap();
        assert_eq!(retain_forget_accuracy(&tr, &tr.final_status()).unwrap(), (Some(100.0), None));

        let mut tr = AccuracyTrace::new([0, 1, 2]);
        tr.push(Instruction::Learn, 0, &col(&[(0, 80.0), (1, 60.0), (2, 10.0)])).unwrap();
        let status = [(0, FinalStatus::Retained), (1, FinalStatus::Retained), (2, FinalStatus::Forgotten)].into();
        assert_eq!(retain_forget_accuracy(&tr, &status).unwrap(), (Some(70.0), Some(10.0)));

        assert!(retain_forget_accuracy(&AccuracyTrace::new([0]), &BTreeMap::new()).is_err());
    }

    #[test]
    fn spill_examples() {
        let tr = spill_trace();
        assert_eq!(spill(&tr, 3, 1).unwrap(), 3.0);
        assert!(spill(&tr, 0, 0).is_err());
        assert!(spill(&tr, 2, 3).is_err());

        let mut flat = AccuracyTrace::new([0, 1]);
        flat.push(Instruction::Learn, 0, &col(&[(0, 50.0), (1, 50.0)])).unwrap();
        flat.push(Instruction::Learn, 1, &col(&[(0, 50.0), (1, 50.0)])).unwrap();
        flat.push(Instruction::Unlearn, 0, &col(&[(0, 50.0), (1, 50.0)])).unwrap();
        assert_eq!(spill(&flat, 2, 0).unwrap(), 0.0);
    }

    #[test]
    fn spill_ignores_tasks_not_yet_learned() {
        let mut tr = AccuracyTrace::new([0, 1]);
        tr.push(Instruction::Learn, 0, &col(&[(0, 90.0), (1, 12.0)])).unwrap();
        tr.push(Instruction::Unlearn, 0, &col(&[(0, 10.0), (1, 4.0)])).unwrap();
        assert_eq!(spill(&tr, 1, 0).unwrap(), 0.0);
    }

    #[test]
    fn relapse_examples() {
        let mut tr = AccuracyTrace::new([0]);
        tr.push(Instruction::Learn, 0, &col(&[(0, 95.0)])).unwrap();
        tr.push(Instruction::Unlearn, 0, &col(&[(0, 10.0)])).unwrap();
        tr.push(Instruction::Learn, 1, &col(&[(0, 10.0)])).unwrap();
        tr.push(Instruction::Learn, 2, &col(&[(0, 33.0)])).unwrap();
        assert_eq!(relapse(&tr, 0, 1, 1).unwrap(), 0.0);
        assert_eq!(relapse(&tr, 0, 1, 3).unwrap(), 23.0);
        assert!(relapse(&tr, 0, 0, 3).is_err());
    }

    #[test]
    fn mia_examples() {
        assert_eq!(mia_score(&[0.1, 0.2, 0.3], &[1.0, 2.0]).unwrap(), 100.0);
        assert_eq!(mia_score(&[1.0, 2.0], &[0.1, 0.2]).unwrap(), 50.0);
        assert!(mia_score(&[], &[1.0]).is_err());
        assert!(mia_score(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn mia_matches_brute_force() {
        let forget = [0.3, 1.2, 0.7, 2.5, 0.7, 0.1];
        let held = [0.9, 0.4, 3.0, 1.1];
        let mut best: f64 = 0.5;
        let pool: Vec<f64> = forget.iter().chain(&held).copied().collect();
        for a in &pool {
            for b in &pool {
                if a < b {
                    let tau = 0.5 * (a + b);
                    let tpr = forget.iter().filter(|l| **l < tau).count() as f64 / 6.0;
                    let tnr = held.iter().filter(|l| **l >= tau).count() as f64 / 4.0;
                    best = best.max(0.5 * (tpr + tnr));
                }
            }
        }
        assert!((mia_score(&forget, &held).unwrap() - 100.0 * best).abs() < 1e-12);
    }

    #[test]
    fn mse_limit_examples() {
        assert_eq!(mse_limit_check(&[1.0, 2.0], 50, 4).unwrap(), mse_limit_check(&[1.0, 2.0], 50, 4).unwrap());
        let zero = mse_limit_check(&[0.0; 5], 200_000, 1).unwrap();
        assert!((zero - 5.0).abs() < 0.05, "{zero}");
        let theta = [1.0, 1.0, 0.0];
        let v = mse_limit_check(&theta, 200_000, 2).unwrap();
        assert!((v - 5.0).abs() < 0.05, "{v}");
        assert!(mse_limit_check(&theta, 0, 2).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let tr = spill_trace();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("op_index,instruction,task_id,measured_task,accuracy\n"));
        assert_eq!(text.lines().count(), 1 + 4 * 3);
        let back = AccuracyTrace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
        let a = MetricsReport::from_trace(&tr, Some(51.0)).unwrap();
        let b = MetricsReport::from_trace(&back, Some(51.0)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn incomplete_csv_is_rejected() {
        let text = "op_index,instruction,task_id,measured_task,accuracy\n0,L,0,0,90\n0,L,0,1,10\n1,U,0,0,10\n";
        assert!(matches!(AccuracyTrace::read_csv(text.as_bytes()), Err(Error::Trace(_))));
    }

    #[test]
    fn report_collects_spill_and_relapse() {
        let tr = spill_trace();
        let r = MetricsReport::from_trace(&tr, None).unwrap();
        assert_eq!(r.ra, Some(79.5));
        assert_eq!(r.fa, Some(10.0));
        assert_eq!(r.spill_mean, Some(3.0));
        assert_eq!(r.relapse, vec![RelapseEntry { task_id: 1, unlearned_at: 3, value: 0.0 }]);
    }

    proptest! {
        #[test]
        fn mia_of_identical_populations_is_exactly_half(
            x in prop::collection::vec(-50.0f64..50.0, 1..60)
        ) {
            prop_assert_eq!(mia_score(&x, &x).unwrap(), 50.0);
        }

        #[test]
        fn mia_is_bounded(
            a in prop::collection::vec(0.0f64..10.0, 1..40),
            b in prop::collection::vec(0.0f64..10.0, 1..40),
        ) {
            let s = mia_score(&a, &b).unwrap();
            prop_assert!((50.0..=100.0).contains(&s));
        }

        #[test]
        fn spill_and_relapse_are_nonnegative_and_order_stable(
            cols in prop::collection::vec(prop::collection::vec(0.0f64..100.0, 3), 4),
        ) {
            let ops = [(Instruction::Learn, 0), (Instruction::Learn, 1), (Instruction::Learn, 2), (Instruction::Unlearn, 1)];
            let mut fwd = AccuracyTrace::new([0, 1, 2]);
            let mut rev = AccuracyTrace::new([2, 1, 0]);
            for ((ins, t), c) in ops.iter().zip(&cols) {
                let column: BTreeMap<TaskId, f64> = (0..3).map(|k| (k as TaskId, c[k])).collect();
                fwd.push(*ins, *t, &column).unwrap();
                let reversed: BTreeMap<TaskId, f64> = column.iter().rev().map(|(k, v)| (*k, *v)).collect();
                rev.push(*ins, *t, &reversed).unwrap();
            }
            let s = spill(&fwd, 3, 1).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert_eq!(s, spill(&rev, 3, 1).unwrap());
            prop_assert!(relapse(&fwd, 1, 3, 3).unwrap() >= 0.0);
        }
    }
}
