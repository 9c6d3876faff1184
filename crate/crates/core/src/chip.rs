//! Whole-chip assembly: GMNs, LCs, the global bus and one local bus per
//! cluster, driven by the event kernel.
//!
//! Routing: the host port and GMNs talk over the global bus, a GMN and its
//! LCs over the cluster's local bus. Messages a GMN addresses to itself skip
//! the bus. A GMN serves its receive queue strictly in order; the busy time
//! of each message is the base cost plus whatever the task manager charges,
//! and every produced message leaves at the moment it was produced.

use std::fmt::Write as _;

use thiserror::Error;

use crate::interconnect::{Bus, RoutingError, TransferTiming};
use crate::kernel::{Kernel, SimTime};
use crate::nodes::{GlobalManagementNode, LcAction, LocalController, NodeError};
use crate::protocol::{
    make_message, message_word_count, Message, MessageType, NodeAddress, NodeKind, ProtocolError,
    PRIO_MAX,
};
use crate::taskmgr::{
    DecisionRecord, GlobalScope, JoinPolicy, HandlerCtx, MappingParams, TaskError, TaskKind, TaskManager,
    TcbArena, TcbId,
};
use crate::traces::{AppBundle, TraceLibrary};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{0}")]
    Task(#[from] TaskError),
    #[error("{0}")]
    Node(#[from] NodeError),
    #[error("{0}")]
    Routing(#[from] RoutingError),
    #[error("{0}")]
    Protocol(#[from] ProtocolError),
    #[error("invalid chip configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChipConfig {
    pub m: u32,
    pub k: u32,
    pub global_timing: TransferTiming,
    pub local_timing: TransferTiming,
    pub c_s: u64,
    pub delta_n_th: u32,
    pub base_cost: u64,
    pub global_scope: GlobalScope,
    pub join_policy: JoinPolicy,
    pub rooted_territory: bool,
    /// Keep every mapping decision for inspection.
    pub audit: bool,
    /// Keep one line per delivered message.
    pub log_messages: bool,
}

impl Default for ChipConfig {
    fn default() -> Self {
        ChipConfig {
            m: 256,
            k: 16,
            global_timing: TransferTiming::default(),
            local_timing: TransferTiming::default(),
            c_s: 8,
            delta_n_th: 4,
            base_cost: 1,
            global_scope: GlobalScope::Territory,
            join_policy: JoinPolicy::Lend,
            rooted_territory: false,
            audit: false,
            log_messages: false,
        }
    }
}

impl ChipConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.m == 0 || self.k == 0 {
            return Err(SimError::Config("m and k must be positive".into()));
        }
        if self.k > self.m || !self.m.is_multiple_of(self.k) {
            return Err(SimError::Config(format!(
                "k={} must divide m={}",
                self.k, self.m
            )));
        }
        if self.global_timing.width == 0 || self.local_timing.width == 0 {
            return Err(SimError::Config("bus width must be positive".into()));
        }
        if self.delta_n_th == 0 {
            return Err(SimError::Config("status threshold must be positive".into()));
        }
        Ok(())
    }

    fn mapping(&self) -> MappingParams {
        MappingParams {
            m: self.m,
            k: self.k,
            c_s: self.c_s,
            delta_n_th: self.delta_n_th,
            base_cost: self.base_cost,
            global_scope: self.global_scope,
            join_policy: self.join_policy,
            rooted_territory: self.rooted_territory,
        }
    }

    pub fn num_nodes(&self) -> u32 {
        self.k + self.m + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BusId {
    Global,
    Local(u32),
}

#[derive(Debug, Clone)]
enum Ev {
    Submit(Message),
    Arbitrate(BusId),
    Deliver(NodeAddress, Message),
    GmnDone(u32),
    StepDone(u32, TcbId),
}

/// One injected application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppRecord {
    pub id: u32,
    pub parent: TcbId,
    pub inject_tick: u64,
    pub target_gmn: u32,
    pub n_children: u32,
    pub t_seq: u64,
    pub end_tick: Option<u64>,
}

impl AppRecord {
    pub fn response_time(&self) -> Option<u64> {
        self.end_tick.map(|e| e - self.inject_tick)
    }

    pub fn speedup(&self) -> Option<f64> {
        self.response_time()
            .map(|t| self.t_seq as f64 / t.max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChipStats {
    pub end_tick: u64,
    pub events: u64,
    pub beacons_tx: u64,
    pub beacons_rx: u64,
    pub msgs_total: u64,
    pub global_bus_util: f64,
    pub local_bus_util_mean: f64,
    pub gmn_busy_ticks: u64,
}

pub struct Chip {
    cfg: ChipConfig,
    kernel: Kernel<Ev>,
    tcbs: TcbArena,
    lib: TraceLibrary,
    gmns: Vec<GlobalManagementNode>,
    lcs: Vec<LocalController>,
    global_bus: Bus,
    local_buses: Vec<Bus>,
    arb_global: bool,
    arb_local: Vec<bool>,
    apps: Vec<AppRecord>,
    audit: Vec<DecisionRecord>,
    msg_log: Vec<String>,
    beacons_tx: u64,
    beacons_rx: u64,
}

impl Chip {
    pub fn new(cfg: ChipConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let ppc = cfg.m / cfg.k;
        let nodes = cfg.num_nodes();
        let mapping = cfg.mapping();
        let gmns = (0..cfg.k)
            .map(|g| GlobalManagementNode::new(TaskManager::new(g, mapping)))
            .collect();
        let lcs = (0..cfg.m)
            .map(|l| LocalController::new(l, l / ppc))
            .collect();
        let mut members: Vec<_> = (0..cfg.k).map(NodeAddress::gmn).collect();
        members.push(NodeAddress::HOST);
        let global_bus = Bus::new("global", members, cfg.global_timing, nodes);
        let local_buses = (0..cfg.k)
            .map(|g| {
                let mut members = vec![NodeAddress::gmn(g)];
                members.extend((g * ppc..(g + 1) * ppc).map(NodeAddress::lc));
                Bus::new(format!("local{g}"), members, cfg.local_timing, nodes)
            })
            .collect();
        Ok(Chip {
            arb_local: vec![false; cfg.k as usize],
            cfg,
            kernel: Kernel::new(),
            tcbs: TcbArena::new(),
            lib: TraceLibrary::new(),
            gmns,
            lcs,
            global_bus,
            local_buses,
            arb_global: false,
            apps: Vec::new(),
            audit: Vec::new(),
            msg_log: Vec::new(),
            beacons_tx: 0,
            beacons_rx: 0,
        })
    }

    pub fn config(&self) -> &ChipConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.kernel.now()
    }

    pub fn apps(&self) -> &[AppRecord] {
        &self.apps
    }

    pub fn tcbs(&self) -> &TcbArena {
        &self.tcbs
    }

    pub fn gmn(&self, g: u32) -> &GlobalManagementNode {
        &self.gmns[g as usize]
    }

    pub fn lc(&self, l: u32) -> &LocalController {
        &self.lcs[l as usize]
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.audit
    }

    pub fn message_log(&self) -> &[String] {
        &self.msg_log
    }

    /// Register an application and schedule its stimulus: a top-priority
    /// task start from the host to `target_gmn` at `tick`.
    pub fn inject(&mut self, tick: u64, target_gmn: u32, bundle: &AppBundle) -> Result<u32, SimError> {
        if target_gmn >= self.cfg.k {
            return Err(SimError::Config(format!("no gmn{target_gmn}")));
        }
        let id = self.apps.len() as u32;
        let b = bundle.with_prefix(&format!("app{id}."));
        self.lib.add(b.parent.clone());
        for c in &b.children {
            self.lib.add(c.clone());
        }
        let imem = self.lib.imem_of(&b.parent.name).expect("just added");
        let parent = self
            .tcbs
            .create(id, TaskKind::Parent, imem, 0, 0, target_gmn, SimTime(tick));
        let msg = make_message(
            MessageType::TaskStart,
            NodeAddress::HOST,
            NodeAddress::gmn(target_gmn),
            PRIO_MAX,
            false,
            vec![parent, 0],
        )?;
        self.kernel.schedule(SimTime(tick), Ev::Submit(msg));
        self.apps.push(AppRecord {
            id,
            parent,
            inject_tick: tick,
            target_gmn,
            n_children: b.n_children,
            t_seq: b.t_seq(),
            end_tick: None,
        });
        Ok(id)
    }

    /// Process events up to and including `limit`, or until nothing is left.
    pub fn run_until(&mut self, limit: SimTime) -> Result<(), SimError> {
        while let Some(ev) = self.kernel.pop_until(limit) {
            let now = ev.fire_at;
            self.dispatch(now, ev.payload)?;
        }
        for app in &mut self.apps {
            if app.end_tick.is_none() {
                app.end_tick = self.tcbs.get(app.parent).and_then(|t| t.end_time).map(|t| t.0);
            }
        }
        Ok(())
    }

    pub fn is_quiescent(&self) -> bool {
        self.kernel.is_idle()
    }

    pub fn stats(&self) -> ChipStats {
        let end = self.kernel.now().0.max(1);
        let local_busy: u64 = self.local_buses.iter().map(|b| b.counters().busy_ticks).sum();
        let msgs = self.global_bus.counters().granted
            + self.local_buses.iter().map(|b| b.counters().granted).sum::<u64>();
        ChipStats {
            end_tick: self.kernel.now().0,
            events: self.kernel.events_processed(),
            beacons_tx: self.beacons_tx,
            beacons_rx: self.beacons_rx,
            msgs_total: msgs,
            global_bus_util: self.global_bus.counters().busy_ticks as f64 / end as f64,
            local_bus_util_mean: local_busy as f64 / (end as f64 * self.cfg.k as f64),
            gmn_busy_ticks: self.gmns.iter().map(|g| g.busy_ticks).sum(),
        }
    }

    fn dispatch(&mut self, now: SimTime, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Submit(msg) => self.submit(now, msg),
            Ev::Arbitrate(bus) => self.arbitrate(now, bus),
            Ev::Deliver(to, msg) => self.deliver(now, to, msg),
            Ev::GmnDone(g) => {
                self.gmns[g as usize].busy = false;
                self.serve_gmn(now, g)
            }
            Ev::StepDone(lc, tcb) => {
                let actions = self.lcs[lc as usize].step_done(tcb, &self.lib)?;
                self.apply_lc_actions(now, actions);
                Ok(())
            }
        }
    }

    fn route(&self, msg: &Message) -> Result<BusId, SimError> {
        let ppc = self.cfg.m / self.cfg.k;
        match msg.src.kind {
            NodeKind::Host => Ok(BusId::Global),
            NodeKind::Lc => Ok(BusId::Local(msg.src.index / ppc)),
            NodeKind::Gmn => match msg.dst.kind {
                _ if msg.broadcast => Ok(BusId::Global),
                NodeKind::Gmn => Ok(BusId::Global),
                NodeKind::Lc if msg.dst.index / ppc == msg.src.index => Ok(BusId::Local(msg.src.index)),
                _ => Err(RoutingError::Unreachable {
                    bus: format!("from gmn{}", msg.src.index),
                    dst: msg.dst,
                }
                .into()),
            },
        }
    }

    fn bus_mut(&mut self, id: BusId) -> &mut Bus {
        match id {
            BusId::Global => &mut self.global_bus,
            BusId::Local(g) => &mut self.local_buses[g as usize],
        }
    }

    fn arb_flag(&mut self, id: BusId) -> &mut bool {
        match id {
            BusId::Global => &mut self.arb_global,
            BusId::Local(g) => &mut self.arb_local[g as usize],
        }
    }

    fn submit(&mut self, now: SimTime, msg: Message) -> Result<(), SimError> {
        let id = self.route(&msg)?;
        let bus = self.bus_mut(id);
        bus.submit(msg)?;
        let at = bus.busy_until().max(now);
        let flag = self.arb_flag(id);
        if !*flag {
            *flag = true;
            self.kernel.schedule(at, Ev::Arbitrate(id));
        }
        Ok(())
    }

    fn arbitrate(&mut self, now: SimTime, id: BusId) -> Result<(), SimError> {
        *self.arb_flag(id) = false;
        let bus = self.bus_mut(id);
        let Some(grant) = bus.arbitrate_and_transfer(now) else {
            return Ok(());
        };
        let more = bus.pending() > 0;
        if grant.msg.mtype == MessageType::StatusBeacon {
            self.beacons_tx += 1;
        }
        for (to, at) in grant.deliveries {
            self.kernel.schedule(at, Ev::Deliver(to, grant.msg.clone()));
        }
        if more {
            *self.arb_flag(id) = true;
            self.kernel.schedule(grant.free_at, Ev::Arbitrate(id));
        }
        Ok(())
    }

    fn log_delivery(&mut self, now: SimTime, to: NodeAddress, msg: &Message) {
        if !self.cfg.log_messages {
            return;
        }
        let words = message_word_count(msg, self.cfg.num_nodes()).unwrap_or(0);
        let mut line = String::new();
        let _ = write!(
            line,
            "{},{},{},{},{},{},{}",
            now.0,
            msg.mtype.name(),
            msg.src,
            to,
            msg.prio,
            msg.broadcast as u8,
            words
        );
        self.msg_log.push(line);
    }

    fn deliver(&mut self, now: SimTime, to: NodeAddress, msg: Message) -> Result<(), SimError> {
        self.log_delivery(now, to, &msg);
        match to.kind {
            NodeKind::Gmn => {
                if msg.mtype == MessageType::StatusBeacon {
                    self.beacons_rx += 1;
                }
                let g = to.index;
                self.gmns[g as usize].rx.push_back(msg);
                if !self.gmns[g as usize].busy {
                    self.serve_gmn(now, g)?;
                }
                Ok(())
            }
            NodeKind::Lc => {
                let lc = &mut self.lcs[to.index as usize];
                let actions = match msg.mtype {
                    MessageType::TaskStart => {
                        lc.receive_task_start(msg.word(0), msg.word(1), &self.tcbs, &self.lib)?
                    }
                    MessageType::SyscallReply => lc.receive_reply(msg.word(0), &self.lib)?,
                    _ => {
                        return Err(RoutingError::Unreachable {
                            bus: "local".into(),
                            dst: to,
                        }
                        .into())
                    }
                };
                self.apply_lc_actions(now, actions);
                Ok(())
            }
            NodeKind::Host => Err(RoutingError::Unreachable {
                bus: "global".into(),
                dst: to,
            }
            .into()),
        }
    }

    fn apply_lc_actions(&mut self, now: SimTime, actions: Vec<LcAction>) {
        for a in actions {
            match a {
                LcAction::Compute { tcb, ticks } => {
                    let lc = self.tcbs.get(tcb).and_then(|t| t.mapped_to).expect("running tasks are mapped");
                    self.kernel.schedule(now.after(ticks), Ev::StepDone(lc, tcb));
                }
                LcAction::Send(m) => {
                    self.kernel.schedule(now, Ev::Submit(m));
                }
                LcAction::Finished(_) => {}
            }
        }
    }

    /// Start serving the next queued message of an idle GMN.
    fn serve_gmn(&mut self, now: SimTime, g: u32) -> Result<(), SimError> {
        let node = &mut self.gmns[g as usize];
        let Some(msg) = node.rx.pop_front() else {
            return Ok(());
        };
        let mut ctx = HandlerCtx::new(now.after(self.cfg.base_cost), &mut self.tcbs);
        if self.cfg.audit {
            ctx.audit = Some(&mut self.audit);
        }
        node.tm.handle(&msg, &mut ctx)?;
        let done = ctx.cursor;
        let out = std::mem::take(&mut ctx.out);
        node.busy = true;
        node.busy_until = done;
        node.busy_ticks += done.0 - now.0;
        let me = NodeAddress::gmn(g);
        for (at, m) in out {
            if m.dst == me && !m.broadcast {
                self.kernel.schedule(at, Ev::Deliver(me, m));
            } else {
                self.kernel.schedule(at, Ev::Submit(m));
            }
        }
        self.kernel.schedule(done, Ev::GmnDone(g));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::gen_independent;

    fn run_one(m: u32, k: u32, n: u32, len: u64) -> Chip {
        let mut chip = Chip::new(ChipConfig {
            m,
            k,
            audit: true,
            log_messages: true,
            ..Default::default()
        })
        .unwrap();
        chip.inject(0, 0, &gen_independent(n, len)).unwrap();
        chip.run_until(SimTime(u64::MAX)).unwrap();
        chip
    }

    #[test]
    fn rejects_bad_k() {
        assert!(Chip::new(ChipConfig { m: 256, k: 3, ..Default::default() }).is_err());
        assert!(Chip::new(ChipConfig { m: 8, k: 16, ..Default::default() }).is_err());
    }

    #[test]
    fn single_child_app_completes() {
        let chip = run_one(4, 1, 1, 1000);
        let app = &chip.apps()[0];
        let t = app.response_time().unwrap();
        assert!(t > 1000 && t < 1500, "t_r {t}");
        assert!(chip.is_quiescent());
        assert!(chip.tcbs().iter().all(|t| t.end_time.is_some()));
        assert_eq!(chip.gmn(0).tm.own_total(), 0);
        assert_eq!(chip.gmn(0).tm.live_barriers(), 0);
    }

    #[test]
    fn first_message_is_the_stimulus() {
        let chip = run_one(16, 4, 8, 100);
        let first = &chip.message_log()[0];
        assert!(first.starts_with("11,task-start,host,gmn0,15,0,3"), "{first}");
    }

    #[test]
    fn all_children_run_and_counters_drain() {
        for (m, k, n) in [(16, 1, 16), (16, 4, 16), (16, 16, 16), (16, 4, 40), (256, 16, 100)] {
            let chip = run_one(m, k, n, 2000);
            assert!(chip.apps()[0].end_tick.is_some(), "m={m} k={k} n={n}");
            let children = chip.tcbs().iter().filter(|t| t.kind == TaskKind::Child).count();
            assert_eq!(children, n as usize);
            for g in 0..k {
                let tm = &chip.gmn(g).tm;
                assert_eq!(tm.own_total(), 0);
                assert_eq!(tm.helpers(), 0);
                assert_eq!(tm.pending_len(), 0);
            }
            let s = chip.stats();
            assert_eq!(s.beacons_rx, s.beacons_tx * (k as u64 - 1));
        }
    }

    #[test]
    fn work_spreads_over_clusters() {
        let chip = run_one(256, 16, 256, 16000);
        let used: std::collections::BTreeSet<u32> = chip
            .tcbs()
            .iter()
            .filter(|t| t.kind == TaskKind::Child)
            .map(|t| t.home)
            .collect();
        assert_eq!(used.len(), 16);
        let s = chip.apps()[0].speedup().unwrap();
        assert!(s > 150.0, "speedup {s}");
    }
}
