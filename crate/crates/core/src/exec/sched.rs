use super::instr::Instruction;
use super::machine::{ExecResult, Machine, Thread};

/// What a logical thread wants to do next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Exec(Instruction),
    /// Block until every live thread reaches a barrier of the same name.
    Barrier(&'static str),
    /// Idle until the shared cycle counter reaches the given value.
    WaitUntil(u64),
    Done,
}

/// A cooperative thread body. `last` carries the result of the previous
/// `Exec`, delivered exactly once.
pub trait Program {
    fn next(&mut self, now: u64, last: Option<&ExecResult>) -> Action;
}

/// Adapts a closure into a [`Program`].
pub struct FnProgram<F>(pub F);

impl<F: FnMut(u64, Option<&ExecResult>) -> Action> Program for FnProgram<F> {
    fn next(&mut self, now: u64, last: Option<&ExecResult>) -> Action {
        (self.0)(now, last)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedError {
    #[error("threads wait on different barriers: {0:?}")]
    Deadlock(Vec<&'static str>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    /// Cycle at which the last thread finished.
    pub end: u64,
    pub instructions: u64,
    pub barriers: u64,
}

enum State {
    Ready,
    /// Waiting for the cycle at which the instruction issues.
    Issuing(Instruction),
    Pending {
        instr: Instruction,
        issued: u64,
        effect: u64,
    },
    Blocked(&'static str),
    Done,
}

struct Slot<'a> {
    thread: Thread,
    program: &'a mut dyn Program,
    time: u64,
    state: State,
    last: Option<ExecResult>,
}

/// Runs `threads` to completion on `machine`. Instructions execute in order
/// of the cycle at which their effect lands; ties go to the lower index. The
/// delay until an effect lands is fixed from machine state at issue time.
pub fn run(
    machine: &mut Machine,
    threads: Vec<(Thread, &mut dyn Program)>,
    start: u64,
) -> Result<RunStats, SchedError> {
    let mut slots: Vec<Slot<'_>> = threads
        .into_iter()
        .map(|(thread, program)| Slot {
            thread,
            program,
            time: start,
            state: State::Ready,
            last: None,
        })
        .collect();
    let mut stats = RunStats {
        end: start,
        ..RunStats::default()
    };

    loop {
        for slot in slots.iter_mut() {
            while matches!(slot.state, State::Ready) {
                let last = slot.last.take();
                match slot.program.next(slot.time, last.as_ref()) {
                    Action::Exec(instr) => slot.state = State::Issuing(instr),
                    Action::WaitUntil(t) => slot.time = slot.time.max(t),
                    Action::Barrier(name) => slot.state = State::Blocked(name),
                    Action::Done => {
                        stats.end = stats.end.max(slot.time);
                        slot.state = State::Done;
                    }
                }
            }
        }

        // effects landing at a cycle are visible to issues at that cycle
        let next = slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s.state {
                State::Pending { effect, .. } => Some((effect, 0, i)),
                State::Issuing(_) => Some((s.time, 1, i)),
                _ => None,
            })
            .min();

        if let Some((_, phase, i)) = next {
            let slot = &mut slots[i];
            if phase == 1 {
                let State::Issuing(instr) = slot.state else {
                    unreachable!()
                };
                let issued = machine.effect_delay(slot.thread, &instr);
                slot.state = State::Pending {
                    instr,
                    issued,
                    effect: slot.time + issued,
                };
                continue;
            }
            let State::Pending { instr, issued, .. } =
                std::mem::replace(&mut slot.state, State::Ready)
            else {
                unreachable!()
            };
            let res = machine.execute_issued(slot.thread, instr, issued);
            slot.time += res.latency as u64;
            slot.last = Some(res);
            stats.instructions += 1;
            continue;
        }

        let waiting: Vec<&'static str> = slots
            .iter()
            .filter_map(|s| match s.state {
                State::Blocked(n) => Some(n),
                _ => None,
            })
            .collect();
        if waiting.is_empty() {
            return Ok(stats);
        }
        if waiting.iter().any(|n| *n != waiting[0]) {
            return Err(SchedError::Deadlock(waiting));
        }
        let release = slots
            .iter()
            .filter(|s| matches!(s.state, State::Blocked(_)))
            .map(|s| s.time)
            .max()
            .unwrap_or(start);
        for s in slots.iter_mut() {
            if matches!(s.state, State::Blocked(_)) {
                s.time = release;
                s.state = State::Ready;
            }
        }
        stats.barriers += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::MachineConfig;
    use crate::vm::{PageFlags, VirtualAddress};

    fn machine() -> (Machine, VirtualAddress) {
        let mut cfg = MachineConfig::default();
        cfg.latency.noise_sigma = 0.0;
        let mut m = Machine::new(cfg, 1).unwrap();
        let va = VirtualAddress::new(0x10_0000);
        m.map_region(va, 4096, PageFlags::user_rw()).unwrap();
        (m, va)
    }

    #[test]
    fn barrier_aligns_threads() {
        let (mut m, va) = machine();
        let mut times = Vec::new();
        let mut a_steps = 0;
        let mut a = FnProgram(|_now, _: Option<&ExecResult>| {
            a_steps += 1;
            match a_steps {
                1 => Action::Exec(Instruction::load(va)),
                2 => Action::Barrier("sync"),
                _ => Action::Done,
            }
        });
        let mut b_steps = 0;
        let mut b = FnProgram(|now, _: Option<&ExecResult>| {
            b_steps += 1;
            match b_steps {
                1 => Action::Barrier("sync"),
                2 => {
                    times.push(now);
                    Action::Done
                }
                _ => unreachable!(),
            }
        });
        let stats = run(
            &mut m,
            vec![(Thread::user(0, 0), &mut a), (Thread::user(0, 1), &mut b)],
            0,
        )
        .unwrap();
        assert_eq!(stats.barriers, 1);
        // memory-level load at 308 cycles
        assert_eq!(times, vec![308]);
    }

    #[test]
    fn mismatched_barriers_deadlock() {
        let (mut m, _) = machine();
        let mut a = FnProgram(|_, _: Option<&ExecResult>| Action::Barrier("x"));
        let mut b = FnProgram(|_, _: Option<&ExecResult>| Action::Barrier("y"));
        let err = run(
            &mut m,
            vec![(Thread::user(0, 0), &mut a), (Thread::user(0, 1), &mut b)],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, SchedError::Deadlock(_)));
    }

    #[test]
    fn effects_ordered_by_landing_time() {
        let (mut m, va) = machine();
        // thread 0 issues a load at 0 that lands at 308; thread 1 flushes at
        // 100. The flush goes first, so the line ends up cached.
        let mut sent = false;
        let mut a = FnProgram(|_, _: Option<&ExecResult>| {
            if sent {
                Action::Done
            } else {
                sent = true;
                Action::Exec(Instruction::load(va))
            }
        });
        let mut step = 0;
        let mut b = FnProgram(|_, _: Option<&ExecResult>| {
            step += 1;
            match step {
                1 => Action::WaitUntil(100),
                2 => Action::Exec(Instruction::clflush(va)),
                _ => Action::Done,
            }
        });
        run(
            &mut m,
            vec![(Thread::user(0, 0), &mut a), (Thread::user(0, 1), &mut b)],
            0,
        )
        .unwrap();
        assert!(!m.locate(va).unwrap().is_absent());
    }
}
