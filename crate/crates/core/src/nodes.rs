//! Node models below the task manager: processing elements driven by their
//! local controllers, and the message-serving shell of a GMN.
//!
//! An LC owns one PE. It executes the running task's trace step by step,
//! turns syscalls into messages for its GMN, and keeps the contexts of tasks
//! swapped out while they wait on a join barrier.

use std::collections::VecDeque;

use thiserror::Error;

use crate::kernel::SimTime;
use crate::protocol::{make_message, Message, MessageType, NodeAddress, PRIO_DEFAULT};
use crate::taskmgr::{TaskKind, TaskManager, TcbArena, TcbId};
use crate::traces::{Arg, SyscallKind, TraceLibrary, TraceProgram, TraceStep, NUM_REGS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NodeError {
    #[error("lc{lc}: task start for {tcb} while the PE is busy")]
    PeBusy { lc: u32, tcb: TcbId },
    #[error("lc{lc}: syscall reply with no syscall outstanding")]
    UnexpectedReply { lc: u32 },
    #[error("lc{lc}: no program for task {tcb}")]
    NoProgram { lc: u32, tcb: TcbId },
    #[error("lc{lc}: unknown trace label {label}")]
    UnknownLabel { lc: u32, label: String },
    #[error("lc{lc}: step completion for {tcb} which is not computing")]
    StrayCompletion { lc: u32, tcb: TcbId },
    #[error("lc{lc}: {source}")]
    Protocol {
        lc: u32,
        #[source]
        source: crate::protocol::ProtocolError,
    },
}

/// Execution context of one task on a PE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeContext {
    pub tcb: TcbId,
    pub imem: u32,
    pub ordinal: u32,
    pub pc: usize,
    pub regs: [u32; NUM_REGS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeState {
    Idle,
    Computing,
    AwaitingReply { kind: SyscallKind, ret: Option<u8> },
}

/// What the caller must do after an LC transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LcAction {
    /// Schedule a step completion for `tcb` after `ticks`.
    Compute { tcb: TcbId, ticks: u64 },
    Send(Message),
    /// The task released its PE for good.
    Finished(TcbId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LcCounters {
    pub tasks_started: u64,
    pub tasks_finished: u64,
    pub syscalls: u64,
    pub busy_ticks: u64,
    pub swaps: u64,
}

#[derive(Debug)]
pub struct LocalController {
    index: u32,
    gmn: u32,
    current: Option<PeContext>,
    state: PeState,
    /// Contexts parked on a join barrier, or released and not yet resumed.
    swapped: Vec<PeContext>,
    counters: LcCounters,
}

impl LocalController {
    pub fn new(index: u32, gmn: u32) -> Self {
        LocalController {
            index,
            gmn,
            current: None,
            state: PeState::Idle,
            swapped: Vec::new(),
            counters: LcCounters::default(),
        }
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn state(&self) -> PeState {
        self.state
    }

    pub fn current(&self) -> Option<&PeContext> {
        self.current.as_ref()
    }

    pub fn swapped_len(&self) -> usize {
        self.swapped.len()
    }

    pub fn counters(&self) -> LcCounters {
        self.counters
    }

    fn me(&self) -> NodeAddress {
        NodeAddress::lc(self.index)
    }

    fn blocked_on_join(&self) -> bool {
        matches!(
            self.state,
            PeState::AwaitingReply {
                kind: SyscallKind::JoinWait,
                ..
            }
        )
    }

    /// A task start names a new task, or a parked waiter whose barrier was
    /// satisfied.
    pub fn receive_task_start(
        &mut self,
        tcb: TcbId,
        sp: u32,
        tcbs: &TcbArena,
        lib: &TraceLibrary,
    ) -> Result<Vec<LcAction>, NodeError> {
        if self.current.as_ref().is_some_and(|c| c.tcb == tcb) {
            return self.complete_syscall(None, lib);
        }
        let lc = self.index;
        if let Some(i) = self.swapped.iter().position(|c| c.tcb == tcb) {
            // The GMN only resumes a context onto an idle or blocked PE.
            if self.current.is_some() && !self.blocked_on_join() {
                return Err(NodeError::PeBusy { lc, tcb });
            }
            let mut ctx = self.swapped.remove(i);
            if let Some(parked) = self.current.take() {
                self.swapped.push(parked);
                self.counters.swaps += 1;
            }
            ctx.pc += 1;
            self.current = Some(ctx);
            return self.advance(lib);
        }

        if self.current.is_some() {
            if !self.blocked_on_join() {
                return Err(NodeError::PeBusy { lc, tcb });
            }
            let parked = self.current.take().expect("checked above");
            self.swapped.push(parked);
            self.counters.swaps += 1;
        }
        let t = tcbs.get(tcb).ok_or(NodeError::NoProgram { lc, tcb })?;
        let ordinal = if t.kind == TaskKind::Child { t.ordinal } else { 0 };
        let mut regs = [0; NUM_REGS];
        regs[0] = sp;
        regs[1] = tcb;
        self.current = Some(PeContext {
            tcb,
            imem: t.imem,
            ordinal,
            pc: 0,
            regs,
        });
        self.counters.tasks_started += 1;
        self.advance(lib)
    }

    pub fn receive_reply(&mut self, value: u32, lib: &TraceLibrary) -> Result<Vec<LcAction>, NodeError> {
        self.complete_syscall(Some(value), lib)
    }

    fn complete_syscall(&mut self, value: Option<u32>, lib: &TraceLibrary) -> Result<Vec<LcAction>, NodeError> {
        let PeState::AwaitingReply { ret, .. } = self.state else {
            return Err(NodeError::UnexpectedReply { lc: self.index });
        };
        let ctx = self.current.as_mut().expect("awaiting implies a task");
        if let (Some(r), Some(v)) = (ret, value) {
            ctx.regs[r as usize] = v;
        }
        ctx.pc += 1;
        self.advance(lib)
    }

    /// The compute step of `tcb` finished.
    pub fn step_done(&mut self, tcb: TcbId, lib: &TraceLibrary) -> Result<Vec<LcAction>, NodeError> {
        let ok = self.state == PeState::Computing && self.current.as_ref().is_some_and(|c| c.tcb == tcb);
        if !ok {
            return Err(NodeError::StrayCompletion { lc: self.index, tcb });
        }
        self.advance(lib)
    }

    fn program<'l>(&self, lib: &'l TraceLibrary, ctx: &PeContext) -> Result<&'l TraceProgram, NodeError> {
        lib.program(ctx.imem, ctx.ordinal).ok_or(NodeError::NoProgram {
            lc: self.index,
            tcb: ctx.tcb,
        })
    }

    fn resolve(&self, arg: &Arg, regs: &[u32; NUM_REGS], lib: &TraceLibrary) -> Result<u32, NodeError> {
        match arg {
            Arg::Imm(v) => Ok(*v),
            Arg::Reg(r) => Ok(regs[*r as usize]),
            Arg::Trace(l) => lib.imem_of(l).ok_or_else(|| NodeError::UnknownLabel {
                lc: self.index,
                label: l.clone(),
            }),
        }
    }

    /// Run the current task until it computes, blocks on a syscall, or ends.
    fn advance(&mut self, lib: &TraceLibrary) -> Result<Vec<LcAction>, NodeError> {
        let mut out = Vec::new();
        loop {
            let Some(ctx) = self.current.clone() else {
                self.state = PeState::Idle;
                return Ok(out);
            };
            let step = self.program(lib, &ctx)?.steps[ctx.pc].clone();
            match step {
                TraceStep::Compute(t) | TraceStep::Mem(t) => {
                    self.current.as_mut().expect("present").pc += 1;
                    self.state = PeState::Computing;
                    self.counters.busy_ticks += t;
                    out.push(LcAction::Compute { tcb: ctx.tcb, ticks: t });
                    return Ok(out);
                }
                TraceStep::Syscall { kind, args, ret } => {
                    let data = args
                        .iter()
                        .map(|a| self.resolve(a, &ctx.regs, lib))
                        .collect::<Result<Vec<_>, _>>()?;
                    let msg = make_message(
                        syscall_message(kind),
                        self.me(),
                        NodeAddress::gmn(self.gmn),
                        PRIO_DEFAULT,
                        false,
                        data,
                    )
                    .map_err(|source| NodeError::Protocol { lc: self.index, source })?;
                    self.counters.syscalls += 1;
                    out.push(LcAction::Send(msg));
                    if kind.terminates() {
                        self.counters.tasks_finished += 1;
                        out.push(LcAction::Finished(ctx.tcb));
                        self.current = None;
                        continue;
                    }
                    self.state = PeState::AwaitingReply { kind, ret };
                    return Ok(out);
                }
            }
        }
    }
}

pub fn syscall_message(kind: SyscallKind) -> MessageType {
    match kind {
        SyscallKind::RcsvSpwn => MessageType::RcsvSpwn,
        SyscallKind::RcsvExit => MessageType::RcsvExit,
        SyscallKind::JoinInit => MessageType::JoinInit,
        SyscallKind::JoinFree => MessageType::JoinFree,
        SyscallKind::JoinWait => MessageType::JoinWait,
        SyscallKind::JoinExit => MessageType::JoinExit,
    }
}

/// A GMN: the task manager plus a receive queue served one message at a
/// time.
#[derive(Debug)]
pub struct GlobalManagementNode {
    pub tm: TaskManager,
    pub rx: VecDeque<Message>,
    pub busy_until: SimTime,
    pub busy: bool,
    pub busy_ticks: u64,
}

impl GlobalManagementNode {
    pub fn new(tm: TaskManager) -> Self {
        GlobalManagementNode {
            tm,
            rx: VecDeque::new(),
            busy_until: SimTime::ZERO,
            busy: false,
            busy_ticks: 0,
        }
    }
}
