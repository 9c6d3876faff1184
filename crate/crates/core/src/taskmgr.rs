//! Run-time task manager hosted by every global management node.
//!
//! Responsibilities:
//! - task control blocks and their lifecycle,
//! - the recursive fork tree: a spawn request either splits into two helper
//!   tasks placed on clusters (global stage) or, once a stop condition holds,
//!   places its working children on PEs of the own cluster (local stage),
//! - join barriers,
//! - FCFS dispatch of tasks waiting for a free PE,
//! - threshold-triggered status beacons.
//!
//! Helper tasks live on the GMN that hosts them; they never occupy a PE.
//! Every mapping decision is a min-search over an ordered index and is
//! charged `c_s * log2(candidates)` ticks of GMN time (at least one tick).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;

use log::warn;
use thiserror::Error;

use crate::kernel::SimTime;
use crate::protocol::{
    make_message, BeaconPayload, Message, MessageType, NodeAddress, NodeKind, ProtocolError,
    PRIO_DEFAULT,
};

pub type TcbId = u32;

const BARRIER_HANDLE_BITS: u32 = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("gmn{gmn}: unknown join barrier {addr:#x}")]
    UnknownBarrier { gmn: u32, addr: u32 },
    #[error("gmn{gmn}: barrier {addr:#x} misuse: {what}")]
    BarrierMisuse {
        gmn: u32,
        addr: u32,
        what: &'static str,
    },
    #[error("task {0} terminated twice")]
    DoubleExit(TcbId),
    #[error("gmn{gmn}: workload counter underflow on pe {pe}")]
    CounterUnderflow { gmn: u32, pe: u32 },
    #[error("gmn{gmn}: {from} reported a syscall but no task runs there")]
    NoRunningTask { gmn: u32, from: NodeAddress },
    #[error("gmn{gmn}: unknown task {tcb}")]
    UnknownTask { gmn: u32, tcb: TcbId },
    #[error("gmn{gmn}: unexpected {mtype} from {from}")]
    Unexpected {
        gmn: u32,
        mtype: MessageType,
        from: NodeAddress,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Parent,
    Helper,
    Child,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskState {
    Ready,
    Running,
    BlockedOnJoin,
    Terminated,
}

#[derive(Debug, Clone)]
pub struct Tcb {
    pub id: TcbId,
    pub app_id: u32,
    pub kind: TaskKind,
    pub imem: u32,
    pub dmem: u32,
    /// Index among the application's children (children) or first covered
    /// child index (helpers).
    pub ordinal: u32,
    /// Children still to be produced below a helper.
    pub cnt: u32,
    /// Clusters a helper may place its sub-helpers on.
    pub territory: Range<u32>,
    /// GMN managing the task (cluster GMN, or the hosting GMN for helpers).
    pub home: u32,
    /// Global LC index, set once.
    pub mapped_to: Option<u32>,
    pub state: TaskState,
    /// Helper directly responsible for this task.
    pub parent_helper: Option<TcbId>,
    /// Direct descendants of a helper not yet terminated.
    pub outstanding: u32,
    /// Level in the fork tree; the spawning parent sits at 0.
    pub depth: u32,
    /// Hosting already accounted at the placing GMN.
    pub hosted: bool,
    pub spawn_time: SimTime,
    pub start_time: Option<SimTime>,
    pub end_time: Option<SimTime>,
}

/// All task control blocks of a chip. A TCB id doubles as its address.
#[derive(Debug, Default)]
pub struct TcbArena {
    tcbs: Vec<Tcb>,
}

impl TcbArena {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn create(
        &mut self,
        app_id: u32,
        kind: TaskKind,
        imem: u32,
        dmem: u32,
        ordinal: u32,
        home: u32,
        now: SimTime,
    ) -> TcbId {
        let id = self.tcbs.len() as TcbId;
        self.tcbs.push(Tcb {
            id,
            app_id,
            kind,
            imem,
            dmem,
            ordinal,
            cnt: 0,
            territory: 0..0,
            home,
            mapped_to: None,
            state: TaskState::Ready,
            parent_helper: None,
            outstanding: 0,
            depth: 0,
            hosted: false,
            spawn_time: now,
            start_time: None,
            end_time: None,
        });
        id
    }

    pub fn get(&self, id: TcbId) -> Option<&Tcb> {
        self.tcbs.get(id as usize)
    }

    pub fn get_mut(&mut self, id: TcbId) -> Option<&mut Tcb> {
        self.tcbs.get_mut(id as usize)
    }

    pub fn len(&self) -> usize {
        self.tcbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tcbs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tcb> {
        self.tcbs.iter()
    }
}

/// Candidate set of the global mapping stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalScope {
    /// The helper's territory: its share of the parent helper's clusters.
    Territory,
    /// Every cluster of the chip.
    Chip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingParams {
    pub m: u32,
    pub k: u32,
    pub c_s: u64,
    pub delta_n_th: u32,
    /// Fixed GMN cost per handled message.
    pub base_cost: u64,
    pub global_scope: GlobalScope,
    pub join_policy: JoinPolicy,
    /// Root territories start at the root's own GMN instead of GMN 0.
    pub rooted_territory: bool,
}

impl MappingParams {
    pub fn pe_per_cluster(&self) -> u32 {
        self.m / self.k
    }
}

/// What happens to the PE of a task blocked in join-wait.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinPolicy {
    /// The waiter keeps its PE until it exits.
    Hold,
    /// The waiter is swapped out and its PE returns to the free pool.
    Yield,
    /// The waiter keeps its PE but lends it to tasks of its own application,
    /// or to anyone once every PE of the cluster is blocked; a released
    /// waiter takes its PE back from a blocked borrower.
    Lend,
}

/// Which PEs a local decision may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Free,
    SameApp,
    Any,
}

/// GMN busy time for one selection among `nu` candidates.
pub fn selection_ticks(nu: u32, c_s: u64) -> u64 {
    let cost = (c_s as f64 * (nu.max(1) as f64).log2()).ceil() as u64;
    cost.max(1)
}

/// Stop expanding the fork tree when the remaining children fit one cluster
/// or enough helpers are active. A helper blocks once it has spawned, so the
/// active ones are the current tree level: `2^depth` of them.
pub fn stop_condition(cnt: u32, depth: u32, params: &MappingParams) -> bool {
    let active = 1u64.checked_shl(depth).unwrap_or(u64::MAX);
    cnt <= params.pe_per_cluster() || active >= params.k as u64
}

/// Split `[lo, hi)` into two halves, the first one getting the extra
/// element. A single cluster is shared by both halves.
pub fn split_territory(t: &Range<u32>) -> (Range<u32>, Range<u32>) {
    let len = t.end - t.start;
    if len <= 1 {
        return (t.clone(), t.clone());
    }
    let mid = t.start + len.div_ceil(2);
    (t.start..mid, mid..t.end)
}

#[derive(Debug, Clone)]
pub struct JoinBarrier {
    pub addr: u32,
    pub count: i64,
    pub initial: i64,
    pub wait_list: Vec<(TcbId, u32)>,
}

pub fn barrier_home(addr: u32) -> u32 {
    addr >> BARRIER_HANDLE_BITS
}

/// One min-search as seen by the selector: the candidates' loads in index
/// order and the chosen index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionRecord {
    pub stage: Stage,
    pub gmn: u32,
    pub candidates: Vec<(u32, u32)>,
    pub chosen: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Global,
    Local,
}

/// Per-GMN workload bookkeeping.
#[derive(Debug, Clone)]
pub struct WorkloadTable {
    /// Mapped, non-terminated tasks per local PE.
    pub local: Vec<u32>,
    /// Task currently owning each PE's execution slot.
    pub running: Vec<Option<TcbId>>,
    /// Released waiters queued for their PE.
    pub resume: Vec<VecDeque<TcbId>>,
    /// The slot owner is blocked in join-wait.
    pub held: Vec<bool>,
    /// Believed totals of every GMN; the own entry is overwritten live.
    pub remote: Vec<u32>,
    pub remote_helpers: Vec<u32>,
    pub last_broadcast_total: u32,
    pub threshold: u32,
}

impl WorkloadTable {
    fn new(ppc: u32, k: u32, threshold: u32) -> Self {
        WorkloadTable {
            local: vec![0; ppc as usize],
            running: vec![None; ppc as usize],
            resume: vec![VecDeque::new(); ppc as usize],
            held: vec![false; ppc as usize],
            remote: vec![0; k as usize],
            remote_helpers: vec![0; k as usize],
            last_broadcast_total: 0,
            threshold,
        }
    }

    pub fn available(&self, pe: usize) -> bool {
        self.running[pe].is_none() && self.resume[pe].is_empty()
    }

    pub fn lendable(&self, pe: usize) -> bool {
        self.held[pe] && self.resume[pe].is_empty()
    }
}

/// Per-handler execution context: a cursor advanced by charged work, and
/// the messages produced, each stamped with the cursor at production time.
pub struct HandlerCtx<'a> {
    pub cursor: SimTime,
    pub tcbs: &'a mut TcbArena,
    pub out: Vec<(SimTime, Message)>,
    pub audit: Option<&'a mut Vec<DecisionRecord>>,
}

impl<'a> HandlerCtx<'a> {
    pub fn new(start: SimTime, tcbs: &'a mut TcbArena) -> Self {
        HandlerCtx {
            cursor: start,
            tcbs,
            out: Vec::new(),
            audit: None,
        }
    }

    pub fn charge(&mut self, ticks: u64) {
        self.cursor = self.cursor.after(ticks);
    }

    fn send(&mut self, msg: Message) {
        self.out.push((self.cursor, msg));
    }

    fn tcb(&self, id: TcbId) -> &Tcb {
        self.tcbs.get(id).expect("tcb ids come from the arena")
    }

    fn tcb_mut(&mut self, id: TcbId) -> &mut Tcb {
        self.tcbs.get_mut(id).expect("tcb ids come from the arena")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TaskMgrCounters {
    pub messages: u64,
    pub beacons_sent: u64,
    pub global_decisions: u64,
    pub local_decisions: u64,
    pub helpers_hosted: u64,
    pub children_spawned: u64,
}

#[derive(Debug)]
pub struct TaskManager {
    index: u32,
    params: MappingParams,
    table: WorkloadTable,
    /// Available PEs ordered by (counter, index).
    local_index: BTreeSet<(u32, u32)>,
    /// PEs whose owner is blocked, ordered by (counter, index).
    lend_index: BTreeSet<(u32, u32)>,
    /// Believed GMN loads ordered by (load, index).
    global_index: BTreeSet<(u32, u32)>,
    pending: VecDeque<TcbId>,
    helpers: u32,
    own_total: u32,
    barriers: BTreeMap<u32, JoinBarrier>,
    free_handles: Vec<u32>,
    next_handle: u32,
    counters: TaskMgrCounters,
}

impl TaskManager {
    pub fn new(index: u32, params: MappingParams) -> Self {
        let ppc = params.pe_per_cluster();
        let table = WorkloadTable::new(ppc, params.k, params.delta_n_th);
        TaskManager {
            index,
            params,
            local_index: (0..ppc).map(|p| (0, p)).collect(),
            lend_index: BTreeSet::new(),
            global_index: (0..params.k).map(|g| (0, g)).collect(),
            table,
            pending: VecDeque::new(),
            helpers: 0,
            own_total: 0,
            barriers: BTreeMap::new(),
            free_handles: Vec::new(),
            next_handle: 1,
            counters: TaskMgrCounters::default(),
        }
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn params(&self) -> &MappingParams {
        &self.params
    }

    pub fn table(&self) -> &WorkloadTable {
        &self.table
    }

    pub fn own_total(&self) -> u32 {
        self.own_total
    }

    pub fn helpers(&self) -> u32 {
        self.helpers
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn counters(&self) -> TaskMgrCounters {
        self.counters
    }

    pub fn barrier(&self, addr: u32) -> Option<&JoinBarrier> {
        self.barriers.get(&(addr & ((1 << BARRIER_HANDLE_BITS) - 1)))
    }

    pub fn live_barriers(&self) -> usize {
        self.barriers.len()
    }

    fn me(&self) -> NodeAddress {
        NodeAddress::gmn(self.index)
    }

    fn first_lc(&self) -> u32 {
        self.index * self.params.pe_per_cluster()
    }

    fn lc_addr(&self, pe: u32) -> NodeAddress {
        NodeAddress::lc(self.first_lc() + pe)
    }

    fn local_pe(&self, from: NodeAddress) -> Option<u32> {
        if from.kind != NodeKind::Lc {
            return None;
        }
        let first = self.first_lc();
        (from.index >= first && from.index < first + self.params.pe_per_cluster())
            .then(|| from.index - first)
    }

    fn reply(&self, ctx: &mut HandlerCtx, pe: u32, value: u32) -> Result<(), TaskError> {
        let m = make_message(
            MessageType::SyscallReply,
            self.me(),
            self.lc_addr(pe),
            PRIO_DEFAULT,
            false,
            vec![value],
        )?;
        ctx.send(m);
        Ok(())
    }

    // --- ordered-index maintenance -------------------------------------

    fn view_load(&self, g: u32) -> u32 {
        if g == self.index {
            self.own_total
        } else {
            self.table.remote[g as usize]
        }
    }

    fn set_view_load(&mut self, g: u32, load: u32) {
        let old = self.view_load(g);
        self.global_index.remove(&(old, g));
        if g == self.index {
            self.own_total = load;
        } else {
            self.table.remote[g as usize] = load;
        }
        self.table.remote[self.index as usize] = self.own_total;
        self.global_index.insert((load, g));
    }

    fn adjust_own_total(&mut self, delta: i64) -> Result<(), TaskError> {
        let new = self.own_total as i64 + delta;
        if new < 0 {
            return Err(TaskError::CounterUnderflow {
                gmn: self.index,
                pe: u32::MAX,
            });
        }
        self.set_view_load(self.index, new as u32);
        Ok(())
    }

    fn with_pe<F: FnOnce(&mut WorkloadTable)>(&mut self, pe: u32, f: F) {
        let p = pe as usize;
        let old = self.table.local[p];
        self.local_index.remove(&(old, pe));
        self.lend_index.remove(&(old, pe));
        f(&mut self.table);
        let new = self.table.local[p];
        if self.table.available(p) {
            self.local_index.insert((new, pe));
        } else if self.params.join_policy == JoinPolicy::Lend && self.table.lendable(p) {
            self.lend_index.insert((new, pe));
        }
    }

    // --- status communication ------------------------------------------

    /// Broadcast the own total once it moved by at least the threshold since
    /// the last beacon.
    pub fn maybe_broadcast_status(&mut self, ctx: &mut HandlerCtx) -> Result<bool, TaskError> {
        let diff = self.own_total.abs_diff(self.table.last_broadcast_total);
        if diff < self.table.threshold.max(1) {
            return Ok(false);
        }
        let payload = BeaconPayload {
            total: self.own_total,
            helpers: self.helpers,
        };
        let m = make_message(
            MessageType::StatusBeacon,
            self.me(),
            self.me(),
            PRIO_DEFAULT,
            true,
            vec![payload.pack()],
        )?;
        ctx.send(m);
        self.table.last_broadcast_total = self.own_total;
        self.counters.beacons_sent += 1;
        Ok(true)
    }

    fn on_beacon(&mut self, from: u32, word: u32) {
        if from == self.index || from >= self.params.k {
            return;
        }
        let p = BeaconPayload::unpack(word);
        self.set_view_load(from, p.total);
        self.table.remote_helpers[from as usize] = p.helpers;
    }

    // --- mapping ---------------------------------------------------------

    /// Global stage: choose the GMN with the smallest believed load among the
    /// candidates, lowest index on ties, and count the helper there.
    pub fn map_global(&mut self, territory: &Range<u32>, ctx: &mut HandlerCtx) -> u32 {
        let k = self.params.k;
        let cands = match self.params.global_scope {
            GlobalScope::Territory => territory.clone(),
            GlobalScope::Chip => 0..k,
        };
        let inside = |g: u32| cands.contains(&g) || cands.contains(&(g + k));
        let chosen = self
            .global_index
            .iter()
            .find(|(_, g)| inside(*g))
            .map(|(_, g)| *g)
            .expect("territories are non-empty");
        if let Some(audit) = ctx.audit.as_deref_mut() {
            audit.push(DecisionRecord {
                stage: Stage::Global,
                gmn: self.index,
                candidates: (0..k).filter(|g| inside(*g)).map(|g| (g, self.view_load(g))).collect(),
                chosen,
            });
        }
        ctx.charge(selection_ticks(k, self.params.c_s));
        self.counters.global_decisions += 1;
        if chosen != self.index {
            let load = self.view_load(chosen);
            self.set_view_load(chosen, load + 1);
        }
        chosen
    }

    fn holder_app(&self, pe: u32, tcbs: &TcbArena) -> Option<u32> {
        self.table.running[pe as usize].and_then(|h| tcbs.get(h)).map(|t| t.app_id)
    }

    fn eligible(&self, pe: u32, slot: Slot, app: u32, tcbs: &TcbArena) -> bool {
        let p = pe as usize;
        match slot {
            Slot::Free => self.table.available(p),
            Slot::SameApp => self.table.lendable(p) && self.holder_app(pe, tcbs) == Some(app),
            Slot::Any => self.table.lendable(p),
        }
    }

    /// Local stage: pick the available PE with the smallest counter. Failing
    /// that, a PE held by a blocked task of the same application is lent,
    /// since its owner cannot resume before this task ends. Any blocked PE
    /// is lent only once every PE of the cluster is blocked, since nothing
    /// queued could run otherwise. Returns `None` when every PE is busy.
    fn pick_pe(&self, app: u32, tcbs: &TcbArena) -> Option<(u32, Slot)> {
        if let Some((_, p)) = self.local_index.iter().next() {
            return Some((*p, Slot::Free));
        }
        if let Some((_, p)) = self
            .lend_index
            .iter()
            .find(|(_, p)| self.holder_app(*p, tcbs) == Some(app))
        {
            return Some((*p, Slot::SameApp));
        }
        if self.lend_index.len() < self.params.pe_per_cluster() as usize {
            return None;
        }
        self.lend_index.iter().next().map(|(_, p)| (*p, Slot::Any))
    }

    /// Place `tcb` on a local PE, or queue it FCFS when none is free. The
    /// task is already counted in the own total.
    fn place_on_pe(&mut self, tcb: TcbId, ctx: &mut HandlerCtx) -> Result<Option<u32>, TaskError> {
        let app = ctx.tcb(tcb).app_id;
        let Some((pe, slot)) = self.pick_pe(app, ctx.tcbs) else {
            self.pending.push_back(tcb);
            return Ok(None);
        };
        if ctx.audit.is_some() {
            let candidates = (0..self.params.pe_per_cluster())
                .filter(|p| self.eligible(*p, slot, app, ctx.tcbs))
                .map(|p| (p, self.table.local[p as usize]))
                .collect();
            ctx.audit.as_deref_mut().expect("checked").push(DecisionRecord {
                stage: Stage::Local,
                gmn: self.index,
                candidates,
                chosen: pe,
            });
        }
        ctx.charge(selection_ticks(self.params.pe_per_cluster(), self.params.c_s));
        self.counters.local_decisions += 1;
        self.with_pe(pe, |t| {
            t.local[pe as usize] += 1;
            t.running[pe as usize] = Some(tcb);
            t.held[pe as usize] = false;
        });
        let lc = self.first_lc() + pe;
        let start = ctx.cursor;
        {
            let t = ctx.tcb_mut(tcb);
            debug_assert!(t.mapped_to.is_none(), "no migration");
            t.mapped_to = Some(lc);
            t.home = self.index;
            t.state = TaskState::Running;
            t.start_time = Some(start);
        }
        let dmem = ctx.tcb(tcb).dmem;
        let m = make_message(
            MessageType::TaskStart,
            self.me(),
            NodeAddress::lc(lc),
            PRIO_DEFAULT,
            false,
            vec![tcb, dmem],
        )?;
        ctx.send(m);
        Ok(Some(pe))
    }

    /// Map a new PE task into this cluster.
    pub fn map_local(&mut self, tcb: TcbId, ctx: &mut HandlerCtx) -> Result<Option<u32>, TaskError> {
        ctx.tcb_mut(tcb).home = self.index;
        self.adjust_own_total(1)?;
        let placed = self.place_on_pe(tcb, ctx)?;
        self.maybe_broadcast_status(ctx)?;
        Ok(placed)
    }

    fn dispatch_pending(&mut self, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        while let Some(&head) = self.pending.front() {
            let app = ctx.tcb(head).app_id;
            if self.pick_pe(app, ctx.tcbs).is_none() {
                break;
            }
            self.pending.pop_front();
            self.place_on_pe(head, ctx)?;
        }
        Ok(())
    }

    // --- fork tree -------------------------------------------------------

    /// Expand a spawn request of `cnt` children owned by `owner`.
    #[allow(clippy::too_many_arguments)]
    fn spawn(
        &mut self,
        owner: TcbId,
        imem: u32,
        dmem: u32,
        cnt: u32,
        first_ordinal: u32,
        territory: Range<u32>,
        ctx: &mut HandlerCtx,
    ) -> Result<(), TaskError> {
        let app = ctx.tcb(owner).app_id;
        let owner_is_helper = ctx.tcb(owner).kind == TaskKind::Helper;
        let depth = ctx.tcb(owner).depth;
        if stop_condition(cnt, depth, &self.params) {
            for i in 0..cnt {
                let c = ctx.tcbs.create(
                    app,
                    TaskKind::Child,
                    imem,
                    dmem,
                    first_ordinal + i,
                    self.index,
                    ctx.cursor,
                );
                if owner_is_helper {
                    ctx.tcb_mut(c).parent_helper = Some(owner);
                }
                self.counters.children_spawned += 1;
                self.map_local(c, ctx)?;
            }
            if owner_is_helper {
                ctx.tcb_mut(owner).outstanding += cnt;
            }
            return Ok(());
        }

        let (ta, tb) = split_territory(&territory);
        let halves = [(cnt.div_ceil(2), ta, first_ordinal), (cnt / 2, tb, first_ordinal + cnt.div_ceil(2))];
        for (sub_cnt, sub_terr, ord) in halves {
            let h = ctx
                .tcbs
                .create(app, TaskKind::Helper, imem, dmem, ord, self.index, ctx.cursor);
            {
                let t = ctx.tcb_mut(h);
                t.cnt = sub_cnt;
                t.territory = sub_terr.clone();
                t.parent_helper = owner_is_helper.then_some(owner);
                t.depth = depth + 1;
            }
            let target = self.map_global(&sub_terr, ctx);
            if target == self.index {
                // Count the helper right away so the next decision sees it.
                self.host_helper_accounting(h, ctx)?;
            }
            let m = make_message(
                MessageType::TaskStart,
                self.me(),
                NodeAddress::gmn(target),
                PRIO_DEFAULT,
                false,
                vec![h, dmem],
            )?;
            ctx.send(m);
        }
        if owner_is_helper {
            ctx.tcb_mut(owner).outstanding += 2;
        }
        Ok(())
    }

    fn host_helper_accounting(&mut self, h: TcbId, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        let t = ctx.tcb_mut(h);
        if t.hosted {
            return Ok(());
        }
        t.hosted = true;
        t.home = self.index;
        self.helpers += 1;
        self.counters.helpers_hosted += 1;
        self.adjust_own_total(1)?;
        self.maybe_broadcast_status(ctx)?;
        Ok(())
    }

    fn start_helper(&mut self, h: TcbId, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        self.host_helper_accounting(h, ctx)?;
        let start = ctx.cursor;
        let (imem, dmem, cnt, ord, terr) = {
            let t = ctx.tcb_mut(h);
            t.state = TaskState::Running;
            t.start_time = Some(start);
            (t.imem, t.dmem, t.cnt, t.ordinal, t.territory.clone())
        };
        self.spawn(h, imem, dmem, cnt, ord, terr, ctx)?;
        if ctx.tcb(h).outstanding == 0 {
            self.terminate_helper(h, ctx)?;
        }
        Ok(())
    }

    fn terminate_helper(&mut self, h: TcbId, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        let end = ctx.cursor;
        let parent = {
            let t = ctx.tcb_mut(h);
            if t.state == TaskState::Terminated {
                return Err(TaskError::DoubleExit(h));
            }
            t.state = TaskState::Terminated;
            t.end_time = Some(end);
            t.parent_helper
        };
        self.helpers -= 1;
        self.adjust_own_total(-1)?;
        self.maybe_broadcast_status(ctx)?;
        if let Some(p) = parent {
            let host = ctx.tcb(p).home;
            if host == self.index {
                self.child_done(p, ctx)?;
            } else {
                let m = make_message(
                    MessageType::RcsvExit,
                    self.me(),
                    NodeAddress::gmn(host),
                    PRIO_DEFAULT,
                    false,
                    vec![h],
                )?;
                ctx.send(m);
            }
        }
        Ok(())
    }

    /// One direct descendant of helper `h` finished.
    fn child_done(&mut self, h: TcbId, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        let t = ctx.tcb_mut(h);
        t.outstanding = t
            .outstanding
            .checked_sub(1)
            .ok_or(TaskError::DoubleExit(h))?;
        if t.outstanding == 0 {
            self.terminate_helper(h, ctx)?;
        }
        Ok(())
    }

    // --- task exit -------------------------------------------------------

    /// Retire the PE task running on local `pe`.
    pub fn update_workload_on_exit(
        &mut self,
        pe: u32,
        tcb: TcbId,
        ctx: &mut HandlerCtx,
    ) -> Result<(), TaskError> {
        let end = ctx.cursor;
        {
            let t = ctx.tcb_mut(tcb);
            if t.state == TaskState::Terminated {
                return Err(TaskError::DoubleExit(tcb));
            }
            t.state = TaskState::Terminated;
            t.end_time = Some(end);
        }
        if self.table.local[pe as usize] == 0 {
            return Err(TaskError::CounterUnderflow {
                gmn: self.index,
                pe,
            });
        }
        let mut next = None;
        self.with_pe(pe, |t| {
            let p = pe as usize;
            t.local[p] -= 1;
            next = t.resume[p].pop_front();
            t.running[p] = next;
            t.held[p] = false;
        });
        if let Some(r) = next {
            self.resume_on(r, pe, ctx)?;
        }
        self.adjust_own_total(-1)?;
        self.dispatch_pending(ctx)?;
        self.maybe_broadcast_status(ctx)?;
        Ok(())
    }

    fn running_on(&self, from: NodeAddress) -> Result<(u32, TcbId), TaskError> {
        let pe = self.local_pe(from).ok_or(TaskError::NoRunningTask {
            gmn: self.index,
            from,
        })?;
        let tcb = self.table.running[pe as usize].ok_or(TaskError::NoRunningTask {
            gmn: self.index,
            from,
        })?;
        Ok((pe, tcb))
    }

    // --- barriers --------------------------------------------------------

    pub fn handle_join_init(&mut self, cnt: u32) -> u32 {
        let handle = self.free_handles.pop().unwrap_or_else(|| {
            let h = self.next_handle;
            self.next_handle += 1;
            h
        });
        let addr = (self.index << BARRIER_HANDLE_BITS) | handle;
        self.barriers.insert(
            handle,
            JoinBarrier {
                addr,
                count: cnt as i64,
                initial: cnt as i64,
                wait_list: Vec::new(),
            },
        );
        addr
    }

    fn barrier_mut(&mut self, addr: u32) -> Result<&mut JoinBarrier, TaskError> {
        let gmn = self.index;
        if barrier_home(addr) != gmn {
            return Err(TaskError::UnknownBarrier { gmn, addr });
        }
        self.barriers
            .get_mut(&(addr & ((1 << BARRIER_HANDLE_BITS) - 1)))
            .ok_or(TaskError::UnknownBarrier { gmn, addr })
    }

    /// Decrement a local barrier; releases every waiter at zero.
    pub fn handle_join_exit(&mut self, addr: u32, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        let gmn = self.index;
        let b = self.barrier_mut(addr)?;
        if b.count <= 0 {
            return Err(TaskError::BarrierMisuse {
                gmn,
                addr,
                what: "join-exit on a satisfied barrier",
            });
        }
        b.count -= 1;
        if b.count == 0 {
            let waiters = std::mem::take(&mut b.wait_list);
            for (w, pe) in waiters {
                self.release_waiter(w, pe, ctx)?;
            }
        }
        Ok(())
    }

    fn release_waiter(&mut self, w: TcbId, pe: u32, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        ctx.tcb_mut(w).state = TaskState::Running;
        let mut now = false;
        self.with_pe(pe, |t| {
            let p = pe as usize;
            if t.running[p] == Some(w) || t.running[p].is_none() || t.held[p] {
                // a blocked borrower is swapped out in favour of the owner
                t.running[p] = Some(w);
                t.held[p] = false;
                now = true;
            } else {
                t.resume[p].push_back(w);
            }
        });
        if now {
            self.resume_on(w, pe, ctx)?;
        }
        Ok(())
    }

    /// Tell the LC to continue `w`, which owns the PE again. The waiter may
    /// have been swapped out, so it is addressed by TCB rather than answered
    /// with a bare reply.
    fn resume_on(&mut self, w: TcbId, pe: u32, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        let dmem = ctx.tcb(w).dmem;
        let m = make_message(
            MessageType::TaskStart,
            self.me(),
            self.lc_addr(pe),
            PRIO_DEFAULT,
            false,
            vec![w, dmem],
        )?;
        ctx.send(m);
        Ok(())
    }

    pub fn handle_join_wait(
        &mut self,
        addr: u32,
        pe: u32,
        tcb: TcbId,
        ctx: &mut HandlerCtx,
    ) -> Result<(), TaskError> {
        let b = self.barrier_mut(addr)?;
        if b.count == 0 {
            return self.reply(ctx, pe, 0);
        }
        b.wait_list.push((tcb, pe));
        ctx.tcb_mut(tcb).state = TaskState::BlockedOnJoin;
        let mut next = None;
        self.with_pe(pe, |t| {
            let p = pe as usize;
            next = t.resume[p].pop_front();
            if next.is_some() {
                t.running[p] = next;
            }
        });
        // A released waiter queued behind this task takes the PE first.
        if let Some(r) = next {
            return self.resume_on(r, pe, ctx);
        }
        match self.params.join_policy {
            JoinPolicy::Hold => self.with_pe(pe, |t| t.held[pe as usize] = true),
            JoinPolicy::Yield => {
                self.with_pe(pe, |t| t.running[pe as usize] = None);
                self.dispatch_pending(ctx)?;
            }
            JoinPolicy::Lend => {
                self.with_pe(pe, |t| t.held[pe as usize] = true);
                self.dispatch_pending(ctx)?;
            }
        }
        Ok(())
    }

    pub fn handle_join_free(&mut self, addr: u32) -> Result<(), TaskError> {
        let gmn = self.index;
        let b = self.barrier_mut(addr)?;
        if !b.wait_list.is_empty() {
            return Err(TaskError::BarrierMisuse {
                gmn,
                addr,
                what: "join-free with parked waiters",
            });
        }
        if b.count > 0 {
            return Err(TaskError::BarrierMisuse {
                gmn,
                addr,
                what: "join-free before the count reached zero",
            });
        }
        let handle = addr & ((1 << BARRIER_HANDLE_BITS) - 1);
        self.barriers.remove(&handle);
        self.free_handles.push(handle);
        Ok(())
    }

    // --- message entry point --------------------------------------------

    /// Process one delivered message. `ctx.cursor` must already include the
    /// per-message base cost.
    pub fn handle(&mut self, msg: &Message, ctx: &mut HandlerCtx) -> Result<(), TaskError> {
        self.counters.messages += 1;
        let gmn = self.index;
        let unexpected = || TaskError::Unexpected {
            gmn,
            mtype: msg.mtype,
            from: msg.src,
        };
        match msg.mtype {
            MessageType::StatusBeacon => {
                if msg.src.kind != NodeKind::Gmn {
                    return Err(unexpected());
                }
                self.on_beacon(msg.src.index, msg.word(0));
            }
            MessageType::TaskStart => {
                let id = msg.word(0);
                let kind = ctx
                    .tcbs
                    .get(id)
                    .ok_or(TaskError::UnknownTask { gmn, tcb: id })?
                    .kind;
                match kind {
                    TaskKind::Helper => self.start_helper(id, ctx)?,
                    TaskKind::Parent | TaskKind::Child => {
                        self.map_local(id, ctx)?;
                    }
                }
            }
            MessageType::RcsvSpwn => {
                let (pe, owner) = self.running_on(msg.src)?;
                let (imem, dmem, cnt) = (msg.word(0), msg.word(1), msg.word(2));
                self.reply(ctx, pe, 0)?;
                if cnt == 0 {
                    warn!("gmn{gmn}: rcsv-spwn with zero count from {}", msg.src);
                } else {
                    let origin = if self.params.rooted_territory { self.index } else { 0 };
                    self.spawn(owner, imem, dmem, cnt, 0, origin..origin + self.params.k, ctx)?;
                }
            }
            MessageType::RcsvExit => match msg.src.kind {
                NodeKind::Lc => {
                    let (pe, tcb) = self.running_on(msg.src)?;
                    self.update_workload_on_exit(pe, tcb, ctx)?;
                }
                NodeKind::Gmn => {
                    // A helper placed elsewhere finished; its parent lives here.
                    let h = msg.word(0);
                    let parent = ctx
                        .tcbs
                        .get(h)
                        .and_then(|t| t.parent_helper)
                        .ok_or(TaskError::UnknownTask { gmn, tcb: h })?;
                    self.child_done(parent, ctx)?;
                }
                NodeKind::Host => return Err(unexpected()),
            },
            MessageType::JoinInit => {
                let pe = self.local_pe(msg.src).ok_or_else(unexpected)?;
                let addr = self.handle_join_init(msg.word(0));
                self.reply(ctx, pe, addr)?;
            }
            MessageType::JoinWait => {
                let (pe, tcb) = self.running_on(msg.src)?;
                self.handle_join_wait(msg.word(0), pe, tcb, ctx)?;
            }
            MessageType::JoinFree => {
                let pe = self.local_pe(msg.src).ok_or_else(unexpected)?;
                self.handle_join_free(msg.word(0))?;
                self.reply(ctx, pe, 0)?;
            }
            MessageType::JoinExit => {
                let addr = msg.word(0);
                match msg.src.kind {
                    NodeKind::Lc => {
                        let (pe, tcb) = self.running_on(msg.src)?;
                        let helper = ctx.tcb(tcb).parent_helper;
                        self.update_workload_on_exit(pe, tcb, ctx)?;
                        if let Some(h) = helper {
                            self.child_done(h, ctx)?;
                        }
                        let home = barrier_home(addr);
                        if home == self.index {
                            self.handle_join_exit(addr, ctx)?;
                        } else if home < self.params.k {
                            let m = make_message(
                                MessageType::JoinExit,
                                self.me(),
                                NodeAddress::gmn(home),
                                PRIO_DEFAULT,
                                false,
                                vec![addr],
                            )?;
                            ctx.send(m);
                        } else {
                            return Err(TaskError::UnknownBarrier { gmn, addr });
                        }
                    }
                    NodeKind::Gmn => self.handle_join_exit(addr, ctx)?,
                    NodeKind::Host => return Err(unexpected()),
                }
            }
            MessageType::SyscallReply => return Err(unexpected()),
        }
        Ok(())
    }
}
