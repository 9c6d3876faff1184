//! Tick-based discrete-event core.
//!
//! A single logical queue orders every event of a chip by `(fire_at, seq)`.
//! `seq` is the insertion counter, so events scheduled for the same tick
//! fire in the order they were scheduled.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

/// Simulation time in integer ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn after(self, delay: u64) -> SimTime {
        SimTime(self.0 + delay)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Handle returned by [`Kernel::schedule`]; equal to the event's sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

/// A queued event.
#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: P,
}

impl<P> PartialEq for Event<P> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<P> Eq for Event<P> {}

impl<P> PartialOrd for Event<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Event<P> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_at
            .cmp(&self.fire_at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub events_processed: u64,
    pub final_time: SimTime,
}

/// The event queue and simulation clock.
#[derive(Debug)]
pub struct Kernel<P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Event<P>>,
    processed: u64,
}

impl<P> Default for Kernel<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Kernel<P> {
    pub fn new() -> Self {
        Kernel {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    /// Enqueue `payload` to fire at `fire_at`.
    ///
    /// Panics if `fire_at` lies in the past: that is a model bug, not a
    /// recoverable condition.
    pub fn schedule(&mut self, fire_at: SimTime, payload: P) -> EventId {
        assert!(
            fire_at >= self.now,
            "event scheduled in the past: fire_at={} now={}",
            fire_at,
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Event {
            fire_at,
            seq,
            payload,
        });
        EventId(seq)
    }

    pub fn schedule_in(&mut self, delay: u64, payload: P) -> EventId {
        let at = self.now.after(delay);
        self.schedule(at, payload)
    }

    /// Pop the next event if it fires no later than `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event<P>> {
        if self.queue.peek()?.fire_at > limit {
            return None;
        }
        let ev = self.queue.pop()?;
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        self.processed += 1;
        Some(ev)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|e| e.fire_at)
    }

    /// Process events in order with `handler` until the queue drains or the
    /// next event would fire after `limit`.
    pub fn run_until<F>(&mut self, limit: SimTime, mut handler: F) -> RunStats
    where
        F: FnMut(&mut Kernel<P>, Event<P>),
    {
        let start = self.processed;
        while let Some(ev) = self.pop_until(limit) {
            handler(self, ev);
        }
        RunStats {
            events_processed: self.processed - start,
            final_time: self.now,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_queue_terminates_at_zero() {
        let mut k: Kernel<u32> = Kernel::new();
        let stats = k.run_until(SimTime(10_000_000), |_, _| {});
        assert_eq!(stats.events_processed, 0);
        assert_eq!(stats.final_time, SimTime::ZERO);
        assert_eq!(k.now(), SimTime::ZERO);
    }

    #[test]
    fn equal_time_events_fire_in_insertion_order() {
        let mut k = Kernel::new();
        k.schedule(SimTime(10), 'A');
        k.schedule(SimTime(10), 'B');
        k.schedule(SimTime(3), 'C');
        let mut seen = Vec::new();
        k.run_until(SimTime(100), |_, e| seen.push(e.payload));
        assert_eq!(seen, vec!['C', 'A', 'B']);
    }

    #[test]
    fn same_tick_schedule_fires_after_queued_events() {
        let mut k = Kernel::new();
        k.schedule(SimTime(5), 1);
        k.schedule(SimTime(5), 2);
        let mut seen = Vec::new();
        k.run_until(SimTime(100), |k, e| {
            if e.payload == 1 {
                assert_eq!(k.now(), SimTime(5));
                k.schedule(SimTime(5), 3);
            }
            seen.push(e.payload);
        });
        assert_eq!(seen, vec![1, 2, 3]);
    }

    #[test]
    #[should_panic(expected = "in the past")]
    fn scheduling_in_the_past_aborts() {
        let mut k = Kernel::new();
        k.schedule(SimTime(4), ());
        k.run_until(SimTime(4), |k, _| {
            k.schedule(SimTime(3), ());
        });
    }

    #[test]
    fn now_tracks_last_processed_event() {
        let mut k = Kernel::new();
        assert_eq!(k.now(), SimTime(0));
        k.schedule(SimTime(42), ());
        k.run_until(SimTime(50), |_, _| {});
        assert_eq!(k.now(), SimTime(42));

        let mut k = Kernel::new();
        k.schedule(SimTime(90), ());
        k.schedule(SimTime(150), ());
        let stats = k.run_until(SimTime(100), |_, _| {});
        assert_eq!(stats.final_time, SimTime(90));
        assert_eq!(stats.events_processed, 1);
        assert_eq!(k.pending(), 1);
    }

    #[test]
    fn identical_inputs_give_identical_order() {
        let run = || {
            let mut k = Kernel::new();
            for i in 0..50u64 {
                k.schedule(SimTime((i * 7919) % 13), i);
            }
            let mut out = Vec::new();
            k.run_until(SimTime(1000), |k, e| {
                if e.payload % 3 == 0 && e.fire_at.0 < 20 {
                    k.schedule_in(2, e.payload + 1000);
                }
                out.push((e.fire_at, e.payload));
            });
            out
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clock_never_decreases(times in proptest::collection::vec(0u64..1000, 1..200)) {
                let mut k = Kernel::new();
                for (i, t) in times.iter().enumerate() {
                    k.schedule(SimTime(*t), i);
                }
                let mut last = SimTime::ZERO;
                k.run_until(SimTime(u64::MAX), |k, e| {
                    assert!(e.fire_at >= last);
                    last = k.now();
                });
            }
        }
    }
}
