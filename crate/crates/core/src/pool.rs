//! In-process worker pool and the partition-to-worker assignment table.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Map,
    Reduce,
    PrimeMap,
    PrimeReduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub kind: TaskKind,
    pub index: usize,
    pub iteration: usize,
}

impl TaskId {
    pub fn new(kind: TaskKind, index: usize, iteration: usize) -> Self {
        TaskId {
            kind,
            index,
            iteration,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            TaskKind::Map => "map",
            TaskKind::Reduce => "reduce",
            TaskKind::PrimeMap => "prime-map",
            TaskKind::PrimeReduce => "prime-reduce",
        };
        write!(f, "{kind}-{}@{}", self.index, self.iteration)
    }
}

/// A fixed set of worker threads. Each call to [`WorkerPool::run`] spawns
/// one scoped thread per worker; a worker executes its assigned tasks in
/// order, so per-task work never runs concurrently with itself.
#[derive(Debug, Clone, Copy)]
pub struct WorkerPool {
    workers: usize,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Self {
        WorkerPool {
            workers: workers.max(1),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Round-robin assignment of `tasks` tasks.
    pub fn round_robin(&self, tasks: usize) -> Vec<usize> {
        (0..tasks).map(|t| t % self.workers).collect()
    }

    /// Runs `f(task_index, input)` for each input on the worker named by
    /// `assignment[task_index]`. Results come back in task order; a panic
    /// inside `f` becomes an `Err` carrying the panic message.
    pub fn run<T, R, F>(&self, assignment: &[usize], inputs: Vec<T>, f: F) -> Vec<Result<R, String>>
    where
        T: Send,
        R: Send,
        F: Fn(usize, T) -> R + Sync,
    {
        assert_eq!(assignment.len(), inputs.len());
        let mut per_worker: Vec<Vec<(usize, T)>> = (0..self.workers).map(|_| Vec::new()).collect();
        for (i, input) in inputs.into_iter().enumerate() {
            per_worker[assignment[i] % self.workers].push((i, input));
        }
        let n = assignment.len();
        let f = &f;
        let mut results: Vec<Option<Result<R, String>>> = (0..n).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = per_worker
                .into_iter()
                .filter(|tasks| !tasks.is_empty())
                .map(|tasks| {
                    scope.spawn(move || {
                        tasks
                            .into_iter()
                            .map(|(i, input)| {
                                let r = catch_unwind(AssertUnwindSafe(|| f(i, input)))
                                    .map_err(panic_message);
                                (i, r)
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("worker thread") {
                    results[i] = Some(r);
                }
            }
        });
        results.into_iter().map(|r| r.expect("every task ran")).collect()
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}
