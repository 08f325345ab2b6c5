//! Discrete-event scheduling of a task DAG over exclusive resources.
//!
//! A task becomes ready when its dependencies finish and starts once all
//! of its resources are free. Events are processed in time order with ties
//! broken by insertion sequence; tasks blocked on a resource retry in
//! readiness order whenever a resource is released.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    Dram,
    Sram,
    Noc,
    Link,
    Nlu,
}

impl Resource {
    const COUNT: usize = 5;

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskClass {
    Fc,
    Attention,
    Nonlinear,
    Collective,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: &'static str,
    pub class: TaskClass,
    pub resources: Vec<Resource>,
    pub duration: u64,
    pub deps: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Ready(usize),
    Finish(usize),
}

/// Queue entry; the heap pops the smallest `(time, seq)` first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub time: u64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Schedule {
    pub start: Vec<u64>,
    pub finish: Vec<u64>,
    pub makespan: u64,
    pub events: u64,
}

struct Queue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: u64, kind: EventKind) {
        self.heap.push(Event { time, seq: self.seq, kind });
        self.seq += 1;
    }
}

/// Run the DAG to completion. Dependencies must point at earlier tasks.
pub fn simulate(tasks: &[Task]) -> Schedule {
    let n = tasks.len();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pending: Vec<usize> = vec![0; n];
    for (i, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            assert!(d < i, "task {i} depends on later task {d}");
            dependents[d].push(i);
        }
        pending[i] = t.deps.len();
    }
    let mut q = Queue { heap: BinaryHeap::new(), seq: 0 };
    for (i, &p) in pending.iter().enumerate() {
        if p == 0 {
            q.push(0, EventKind::Ready(i));
        }
    }
    let mut busy = [false; Resource::COUNT];
    let mut blocked: Vec<usize> = Vec::new();
    let mut s = Schedule {
        start: vec![0; n],
        finish: vec![0; n],
        makespan: 0,
        events: 0,
    };
    let free = |busy: &[bool; Resource::COUNT], t: &Task| t.resources.iter().all(|r| !busy[r.index()]);
    let begin = |i: usize, now: u64, busy: &mut [bool; Resource::COUNT], q: &mut Queue, s: &mut Schedule| {
        for r in &tasks[i].resources {
            busy[r.index()] = true;
        }
        s.start[i] = now;
        q.push(now + tasks[i].duration, EventKind::Finish(i));
    };
    while let Some(ev) = q.heap.pop() {
        s.events += 1;
        let now = ev.time;
        match ev.kind {
            EventKind::Ready(i) => {
                if free(&busy, &tasks[i]) {
                    begin(i, now, &mut busy, &mut q, &mut s);
                } else {
                    blocked.push(i);
                }
            }
            EventKind::Finish(i) => {
                s.finish[i] = now;
                s.makespan = s.makespan.max(now);
                for r in &tasks[i].resources {
                    busy[r.index()] = false;
                }
                for &d in &dependents[i] {
                    pending[d] -= 1;
                    if pending[d] == 0 {
                        q.push(now, EventKind::Ready(d));
                    }
                }
                let mut k = 0;
                while k < blocked.len() {
                    let b = blocked[k];
                    if free(&busy, &tasks[b]) {
                        blocked.remove(k);
                        begin(b, now, &mut busy, &mut q, &mut s);
                    } else {
                        k += 1;
                    }
                }
            }
        }
    }
    assert!(blocked.is_empty(), "tasks left blocked");
    #[cfg(debug_assertions)]
    check_causality(tasks, &s);
    s
}

/// No task starts before every dependency has finished.
pub fn check_causality(tasks: &[Task], s: &Schedule) {
    for (i, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            assert!(s.start[i] >= s.finish[d], "task {i} ({}) starts at {} before dep {d} finishes at {}", t.name, s.start[i], s.finish[d]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn task(duration: u64, resources: Vec<Resource>, deps: Vec<usize>) -> Task {
        Task { name: "t", class: TaskClass::Fc, resources, duration, deps }
    }

    #[test]
    fn chain_adds_up() {
        let t = vec![task(3, vec![Resource::Dram], vec![]), task(4, vec![Resource::Noc], vec![0]), task(5, vec![Resource::Dram], vec![1])];
        let s = simulate(&t);
        assert_eq!(s.start, vec![0, 3, 7]);
        assert_eq!(s.makespan, 12);
    }

    #[test]
    fn independent_resources_overlap() {
        let t = vec![task(10, vec![Resource::Dram], vec![]), task(6, vec![Resource::Noc], vec![])];
        assert_eq!(simulate(&t).makespan, 10);
    }

    #[test]
    fn shared_resource_serializes_in_ready_order() {
        let t = vec![task(10, vec![Resource::Dram, Resource::Sram], vec![]), task(6, vec![Resource::Dram], vec![])];
        let s = simulate(&t);
        assert_eq!(s.start, vec![0, 10]);
        assert_eq!(s.makespan, 16);
    }

    #[test]
    fn heap_orders_by_time_then_sequence() {
        let mut h = BinaryHeap::new();
        h.push(Event { time: 5, seq: 0, kind: EventKind::Ready(0) });
        h.push(Event { time: 3, seq: 2, kind: EventKind::Ready(1) });
        h.push(Event { time: 3, seq: 1, kind: EventKind::Ready(2) });
        let order: Vec<u64> = std::iter::from_fn(|| h.pop()).map(|e| e.seq).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    proptest! {
        #[test]
        fn schedule_respects_dependencies_and_resources(spec in prop::collection::vec((0u64..20, 0u8..32, prop::collection::vec(any::<prop::sample::Index>(), 0..3)), 1..40)) {
            let all = [Resource::Dram, Resource::Sram, Resource::Noc, Resource::Link, Resource::Nlu];
            let tasks: Vec<Task> = spec.iter().enumerate().map(|(i, (d, mask, deps))| {
                let res = all.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, r)| *r).collect();
                let deps = if i == 0 { vec![] } else { deps.iter().map(|x| x.index(i)).collect() };
                task(*d, res, deps)
            }).collect();
            let s = simulate(&tasks);
            let crit: u64 = tasks.iter().map(|t| t.duration).sum();
            prop_assert!(s.makespan <= crit);
            for (i, t) in tasks.iter().enumerate() {
                prop_assert_eq!(s.finish[i], s.start[i] + t.duration);
                for j in 0..i {
                    let shared = t.resources.iter().any(|r| tasks[j].resources.contains(r));
                    let overlap = s.start[i] < s.finish[j] && s.start[j] < s.finish[i];
                    prop_assert!(!(shared && overlap && t.duration > 0 && tasks[j].duration > 0));
                }
            }
            prop_assert_eq!(simulate(&tasks), s);
        }
    }
}
