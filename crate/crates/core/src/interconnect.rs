//! Shared-bus model.
//!
//! One global bus links the GMNs (plus the off-chip stimulus port); each
//! cluster has a local bus linking its GMN with its LCs. A bus carries one
//! transfer at a time. Arbitration picks the highest pending priority, breaks
//! ties round-robin over members, and keeps FIFO order within a member.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use thiserror::Error;

use crate::kernel::SimTime;
use crate::protocol::{message_word_count, Message, NodeAddress, NodeKind, WORD_BITS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoutingError {
    #[error("{src} is not attached to bus {bus}")]
    NotMember { bus: String, src: NodeAddress },
    #[error("{dst} is not reachable on bus {bus}")]
    Unreachable { bus: String, dst: NodeAddress },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferTiming {
    pub tx_delay: u64,
    pub rx_delay: u64,
    /// Bits moved per tick.
    pub width: u32,
}

impl Default for TransferTiming {
    fn default() -> Self {
        TransferTiming {
            tx_delay: 4,
            rx_delay: 4,
            width: 32,
        }
    }
}

impl TransferTiming {
    /// Ticks the bus is held for a message of `words` 32-bit words.
    pub fn occupancy(&self, words: usize) -> u64 {
        let bits = words as u64 * WORD_BITS as u64;
        bits.div_ceil(self.width as u64).max(1)
    }

    /// Grant-to-delivery latency.
    pub fn latency(&self, words: usize) -> u64 {
        self.tx_delay + self.occupancy(words) + self.rx_delay
    }
}

#[derive(Debug)]
struct Queued {
    prio: u8,
    seq: u64,
    msg: Message,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.prio == other.prio && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.prio
            .cmp(&other.prio)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Result of granting the bus to one message.
#[derive(Debug, Clone)]
pub struct Grant {
    pub msg: Message,
    pub words: usize,
    pub granted_at: SimTime,
    pub free_at: SimTime,
    pub deliveries: Vec<(NodeAddress, SimTime)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BusCounters {
    pub granted: u64,
    pub words: u64,
    pub busy_ticks: u64,
}

#[derive(Debug)]
pub struct Bus {
    name: String,
    timing: TransferTiming,
    num_nodes: u32,
    members: Vec<NodeAddress>,
    slot: HashMap<NodeAddress, usize>,
    queues: Vec<BinaryHeap<Queued>>,
    rr_next: usize,
    busy_until: SimTime,
    next_seq: u64,
    pending: usize,
    counters: BusCounters,
}

impl Bus {
    /// `num_nodes` is the chip-wide node count used to size message headers.
    pub fn new(
        name: impl Into<String>,
        members: Vec<NodeAddress>,
        timing: TransferTiming,
        num_nodes: u32,
    ) -> Self {
        let slot = members.iter().enumerate().map(|(i, a)| (*a, i)).collect();
        let queues = members.iter().map(|_| BinaryHeap::new()).collect();
        Bus {
            name: name.into(),
            timing,
            num_nodes,
            members,
            slot,
            queues,
            rr_next: 0,
            busy_until: SimTime::ZERO,
            next_seq: 0,
            pending: 0,
            counters: BusCounters::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn members(&self) -> &[NodeAddress] {
        &self.members
    }

    pub fn is_member(&self, a: NodeAddress) -> bool {
        self.slot.contains_key(&a)
    }

    pub fn timing(&self) -> TransferTiming {
        self.timing
    }

    pub fn counters(&self) -> BusCounters {
        self.counters
    }

    pub fn pending(&self) -> usize {
        self.pending
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    pub fn is_idle(&self, now: SimTime) -> bool {
        now >= self.busy_until
    }

    /// Receivers of a broadcast: every member except the sender and the
    /// transmit-only host port.
    fn broadcast_targets(&self, src: NodeAddress) -> impl Iterator<Item = NodeAddress> + '_ {
        self.members
            .iter()
            .copied()
            .filter(move |a| *a != src && a.kind != NodeKind::Host)
    }

    /// Enqueue `msg` in its source's transmit queue.
    pub fn submit(&mut self, msg: Message) -> Result<(), RoutingError> {
        let Some(&i) = self.slot.get(&msg.src) else {
            return Err(RoutingError::NotMember {
                bus: self.name.clone(),
                src: msg.src,
            });
        };
        if !msg.broadcast && !self.slot.contains_key(&msg.dst) {
            return Err(RoutingError::Unreachable {
                bus: self.name.clone(),
                dst: msg.dst,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queues[i].push(Queued {
            prio: msg.prio,
            seq,
            msg,
        });
        self.pending += 1;
        Ok(())
    }

    /// If the bus is idle and something is pending, grant it to the winning
    /// message and return the transfer with its delivery times.
    pub fn arbitrate_and_transfer(&mut self, now: SimTime) -> Option<Grant> {
        if !self.is_idle(now) || self.pending == 0 {
            return None;
        }
        let best = self
            .queues
            .iter()
            .filter_map(|q| q.peek().map(|m| m.prio))
            .max()?;
        let n = self.members.len();
        let winner = (0..n)
            .map(|off| (self.rr_next + off) % n)
            .find(|&i| self.queues[i].peek().is_some_and(|m| m.prio == best))?;
        self.rr_next = (winner + 1) % n;
        let Queued { msg, .. } = self.queues[winner].pop()?;
        self.pending -= 1;

        let words = message_word_count(&msg, self.num_nodes)
            .expect("messages are validated before submission");
        let occ = self.timing.occupancy(words);
        let deliver_at = now.after(self.timing.latency(words));
        self.busy_until = now.after(occ);
        self.counters.granted += 1;
        self.counters.words += words as u64;
        self.counters.busy_ticks += occ;

        let deliveries = if msg.broadcast {
            self.broadcast_targets(msg.src).map(|a| (a, deliver_at)).collect()
        } else {
            vec![(msg.dst, deliver_at)]
        };
        Some(Grant {
            msg,
            words,
            granted_at: now,
            free_at: self.busy_until,
            deliveries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{make_message, MessageType, PRIO_MAX};

    fn global_bus(k: u32) -> Bus {
        let mut members: Vec<_> = (0..k).map(NodeAddress::gmn).collect();
        members.push(NodeAddress::HOST);
        Bus::new("global", members, TransferTiming::default(), 272)
    }

    fn beacon(from: u32, total: u32) -> Message {
        let g = NodeAddress::gmn(from);
        make_message(MessageType::StatusBeacon, g, g, 0, true, vec![total]).unwrap()
    }

    #[test]
    fn task_start_latency_is_eleven_ticks() {
        let g = NodeAddress::gmn(0);
        let l = NodeAddress::lc(3);
        let mut bus = Bus::new("local0", vec![g, l], TransferTiming::default(), 272);
        let ts = make_message(MessageType::TaskStart, g, l, 0, false, vec![7, 0]).unwrap();
        bus.submit(ts).unwrap();
        let grant = bus.arbitrate_and_transfer(SimTime(100)).unwrap();
        assert_eq!(grant.words, 3);
        assert_eq!(grant.deliveries, vec![(l, SimTime(111))]);
        assert_eq!(grant.free_at, SimTime(103));
        assert!(bus.arbitrate_and_transfer(SimTime(101)).is_none());
    }

    #[test]
    fn lc_submit_joins_local_queue() {
        let g = NodeAddress::gmn(0);
        let l = NodeAddress::lc(3);
        let mut bus = Bus::new("local0", vec![g, l], TransferTiming::default(), 272);
        let je = make_message(MessageType::JoinExit, l, g, 0, false, vec![1]).unwrap();
        bus.submit(je).unwrap();
        assert_eq!(bus.pending(), 1);
    }

    #[test]
    fn lc_cannot_reach_global_bus() {
        let mut bus = global_bus(4);
        let l = NodeAddress::lc(0);
        let m = make_message(MessageType::JoinExit, l, NodeAddress::gmn(2), 0, false, vec![1]).unwrap();
        assert!(matches!(bus.submit(m), Err(RoutingError::NotMember { .. })));
    }

    #[test]
    fn broadcast_reaches_every_other_gmn_at_once() {
        let mut bus = global_bus(16);
        bus.submit(beacon(2, 9)).unwrap();
        let g = bus.arbitrate_and_transfer(SimTime(0)).unwrap();
        assert_eq!(g.deliveries.len(), 15);
        assert!(g.deliveries.iter().all(|(a, t)| *t == SimTime(10) && *a != NodeAddress::gmn(2)));
    }

    #[test]
    fn highest_priority_wins() {
        let mut bus = global_bus(4);
        bus.submit(beacon(0, 1)).unwrap();
        let stim = make_message(
            MessageType::TaskStart,
            NodeAddress::HOST,
            NodeAddress::gmn(1),
            PRIO_MAX,
            false,
            vec![1, 0],
        )
        .unwrap();
        bus.submit(stim).unwrap();
        let g = bus.arbitrate_and_transfer(SimTime(0)).unwrap();
        assert_eq!(g.msg.mtype, MessageType::TaskStart);
    }

    #[test]
    fn round_robin_between_equal_priority_sources() {
        let mut bus = global_bus(3);
        for _ in 0..2 {
            bus.submit(beacon(0, 1)).unwrap();
            bus.submit(beacon(1, 1)).unwrap();
        }
        let mut order = Vec::new();
        let mut now = SimTime(0);
        while let Some(g) = bus.arbitrate_and_transfer(now) {
            order.push(g.msg.src.index);
            now = g.free_at;
        }
        assert_eq!(order, vec![0, 1, 0, 1]);
    }

    #[test]
    fn fifo_within_source_at_equal_priority() {
        let g = NodeAddress::gmn(0);
        let l = NodeAddress::lc(0);
        let mut bus = Bus::new("local0", vec![g, l], TransferTiming::default(), 272);
        for i in 0..5 {
            bus.submit(make_message(MessageType::TaskStart, g, l, 0, false, vec![i, 0]).unwrap())
                .unwrap();
        }
        let mut now = SimTime(0);
        let mut seen = Vec::new();
        while let Some(gr) = bus.arbitrate_and_transfer(now) {
            seen.push(gr.msg.data[0]);
            now = gr.free_at;
        }
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(bus.counters().granted, 5);
        assert_eq!(bus.counters().busy_ticks, 15);
    }

    #[test]
    fn narrow_bus_takes_longer() {
        let t = TransferTiming {
            width: 16,
            ..Default::default()
        };
        assert_eq!(t.occupancy(3), 6);
        let wide = TransferTiming {
            width: 64,
            ..Default::default()
        };
        assert_eq!(wide.occupancy(3), 2);
        assert_eq!(wide.occupancy(1), 1);
    }
}
