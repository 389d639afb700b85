//! Per-task transition storage.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::objective::TaskData;

/// One environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub task: usize,
    pub episode: usize,
    pub step: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, Default)]
struct TaskLog {
    records: Vec<TransitionRecord>,
    /// `(episode, steps)` in append order.
    episodes: Vec<(usize, usize)>,
}

/// Append-only transitions, grouped by task. Tasks listed as forbidden
/// (evaluation tasks) are rejected on append.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    state_dim: usize,
    action_dim: usize,
    tasks: BTreeMap<usize, TaskLog>,
    forbidden: BTreeSet<usize>,
}

impl ReplayBuffer {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self { state_dim, action_dim, tasks: BTreeMap::new(), forbidden: BTreeSet::new() }
    }

    pub fn forbid(&mut self, ids: impl IntoIterator<Item = usize>) {
        self.forbidden.extend(ids);
    }

    /// Appends one whole episode. All records must share the task and
    /// episode index and be numbered 0, 1, 2, ...
    pub fn append_episode(&mut self, records: Vec<TransitionRecord>) -> Result<()> {
        let Some(first) = records.first() else {
            return Err(Error::Empty("episode with no transitions".into()));
        };
        let (task, episode) = (first.task, first.episode);
        if self.forbidden.contains(&task) {
            return Err(Error::Invalid(format!("task {task} is reserved for evaluation and may not enter the buffer")));
        }
        for (i, r) in records.iter().enumerate() {
            if r.task != task || r.episode != episode || r.step != i {
                return Err(Error::Invalid(format!("record {i} of episode {episode} is out of sequence")));
            }
            if r.s.len() != self.state_dim || r.s_next.len() != self.state_dim || r.a.len() != self.action_dim {
                return Err(Error::shape("append_episode", format!("record {i} has wrong state or action width")));
            }
            let finite = r.s.iter().chain(&r.a).chain(&r.s_next).all(|v| v.is_finite()) && r.r.is_finite();
            if !finite {
                return Err(Error::NonFinite { context: format!("transition {i} of task {task}") });
            }
        }
        let log = self.tasks.entry(task).or_default();
        if log.episodes.iter().any(|&(e, _)| e == episode) {
            return Err(Error::Invalid(format!("episode {episode} of task {task} already stored")));
        }
        log.episodes.push((episode, records.len()));
        log.records.extend(records);
        Ok(())
    }

    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.keys().copied()
    }

    pub fn len(&self, task: usize) -> usize {
        self.tasks.get(&task).map_or(0, |l| l.records.len())
    }

    pub fn total_len(&self) -> usize {
        self.tasks.values().map(|l| l.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn records(&self, task: usize) -> &[TransitionRecord] {
        self.tasks.get(&task).map_or(&[], |l| &l.records)
    }

    /// `(episode, steps)` pairs for a task.
    pub fn episode_lengths(&self, task: usize) -> &[(usize, usize)] {
        self.tasks.get(&task).map_or(&[], |l| &l.episodes)
    }

    pub fn task_data(&self, task: usize) -> Result<TaskData<f64>> {
        records_to_data(self.state_dim, self.action_dim, self.records(task))
    }

    pub fn all_data(&self) -> Result<BTreeMap<usize, TaskData<f64>>> {
        self.tasks.keys().map(|&t| Ok((t, self.task_data(t)?))).collect()
    }
}

pub fn records_to_data(state_dim: usize, action_dim: usize, records: &[TransitionRecord]) -> Result<TaskData<f64>> {
    TaskData::from_transitions(
        state_dim,
        action_dim,
        records.iter().map(|r| (r.s.as_slice(), r.a.as_slice(), r.s_next.as_slice(), r.r)),
    )
}
