//! Broadcast message bus with seeded per-receiver loss and step-quantized
//! latency.
//!
//! Loss draws are keyed by (message sequence, receiver slot) rather than by
//! RNG stream position, so renaming stations or reordering agents never
//! changes which copies drop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::messages::StationId;
use crate::trust::SignedMessage;

/// One queued delivery.
#[derive(Debug, Clone)]
pub struct BusEvent {
    pub deliver_at_step: u64,
    /// Step the copy entered the queue; delivery happens on a later step's
    /// pass even at zero latency, which keeps the system independent of
    /// same-step tick order.
    pub enqueued_step: u64,
    pub seq: u64,
    pub msg: Arc<SignedMessage>,
    pub sender: StationId,
}

/// A copy the bus decided to drop, for tracing.
#[derive(Debug, Clone)]
pub struct DroppedCopy {
    pub receiver: StationId,
    pub sender: StationId,
    pub digest: [u8; 32],
}

#[derive(Debug)]
pub struct Bus {
    seed: u64,
    loss_probability: f64,
    latency_steps: u64,
    seq: u64,
    /// Per-receiver queues, keyed by receiver station.
    queues: BTreeMap<StationId, Vec<BusEvent>>,
}

impl Bus {
    pub fn new(seed: u64, loss_probability: f64, latency_steps: u64) -> Self {
        Self { seed, loss_probability, latency_steps, seq: 0, queues: BTreeMap::new() }
    }

    fn loss_draw(&self, msg_seq: u64, receiver_slot: u64) -> bool {
        if self.loss_probability <= 0.0 {
            return false;
        }
        // Counter-based draw: hash (seed, seq, slot) into an RNG seed.
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(b"bus-loss");
        h.update(msg_seq.to_le_bytes());
        h.update(receiver_slot.to_le_bytes());
        let digest = h.finalize();
        let s = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        rng.random::<f64>() < self.loss_probability
    }

    /// Broadcasts to every receiver except the sender. `receivers` must be
    /// passed in a stable slot order (spawn order, not station order) so the
    /// loss pattern is invariant under station-id permutations. Returns the
    /// copies dropped by the loss model.
    pub fn broadcast(
        &mut self,
        now_step: u64,
        msg: Arc<SignedMessage>,
        receivers: &[StationId],
    ) -> Vec<DroppedCopy> {
        let sender = msg.sender();
        let seq = self.seq;
        self.seq += 1;
        let digest = msg.digest();
        let mut dropped = Vec::new();
        for (slot, &rx) in receivers.iter().enumerate() {
            if rx == sender {
                continue;
            }
            if self.loss_draw(seq, slot as u64) {
                dropped.push(DroppedCopy { receiver: rx, sender, digest });
                continue;
            }
            self.queues.entry(rx).or_default().push(BusEvent {
                deliver_at_step: now_step + self.latency_steps,
                enqueued_step: now_step,
                seq,
                msg: Arc::clone(&msg),
                sender,
            });
        }
        dropped
    }

    /// Takes everything due for `station` at `step`: enqueued on an earlier
    /// step and past its latency. Ordered by (sender, sequence) for a
    /// canonical processing order.
    pub fn take_due(&mut self, station: StationId, step: u64) -> Vec<BusEvent> {
        let Some(queue) = self.queues.get_mut(&station) else {
            return Vec::new();
        };
        let mut due: Vec<BusEvent> = Vec::new();
        queue.retain(|e| {
            if e.deliver_at_step <= step && e.enqueued_step < step {
                due.push(e.clone());
                false
            } else {
                true
            }
        });
        due.sort_by_key(|e| (e.sender, e.seq));
        due
    }

    /// Number of undelivered copies across all queues.
    pub fn pending(&self) -> usize {
        self.queues.values().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::{encode, CamPayload, KinematicState, Payload};
    use crate::trust::{PermissionSet, Pki};

    fn signed(pki: &Pki, station: u32) -> Arc<SignedMessage> {
        let hsm = pki.issue_station(StationId(station), PermissionSet::SEND_CAM);
        let bytes = encode(&Payload::Cam(CamPayload {
            sender: StationId(station),
            state: KinematicState::new(0.0, 0.0, 0.0, 0.0, 0.0),
            gen_time_ms: 0,
        }))
        .unwrap();
        Arc::new(hsm.sign(&bytes).unwrap())
    }

    #[test]
    fn lossless_bus_delivers_to_everyone_but_sender() {
        let pki = Pki::new(1);
        let mut bus = Bus::new(1, 0.0, 1);
        let receivers = [StationId(1), StationId(2), StationId(3)];
        let dropped = bus.broadcast(5, signed(&pki, 1), &receivers);
        assert!(dropped.is_empty());
        assert!(bus.take_due(StationId(1), 6).is_empty(), "sender gets nothing");
        assert_eq!(bus.take_due(StationId(2), 6).len(), 1);
        assert_eq!(bus.take_due(StationId(3), 6).len(), 1);
        assert_eq!(bus.pending(), 0);
    }

    #[test]
    fn latency_holds_messages_back() {
        let pki = Pki::new(1);
        let mut bus = Bus::new(1, 0.0, 3);
        bus.broadcast(10, signed(&pki, 1), &[StationId(1), StationId(2)]);
        assert!(bus.take_due(StationId(2), 12).is_empty());
        assert_eq!(bus.take_due(StationId(2), 13).len(), 1);
    }

    #[test]
    fn certain_loss_delivers_nothing() {
        let pki = Pki::new(1);
        let mut bus = Bus::new(1, 1.0 - 1e-12, 0);
        let dropped = bus.broadcast(0, signed(&pki, 1), &[StationId(1), StationId(2), StationId(3)]);
        assert_eq!(dropped.len(), 2);
        assert_eq!(bus.pending(), 0);
    }

    #[test]
    fn loss_rate_matches_binomial_bound() {
        // p = 0.3, 10,000 broadcasts, one receiver: deliveries within
        // 3 sigma of 7,000 (sigma = sqrt(n p (1-p)) ~ 45.8).
        let pki = Pki::new(2);
        let mut bus = Bus::new(42, 0.3, 0);
        let msg = signed(&pki, 1);
        let mut delivered = 0u32;
        for step in 0..10_000u64 {
            let dropped = bus.broadcast(step, Arc::clone(&msg), &[StationId(2)]);
            if dropped.is_empty() {
                delivered += 1;
            }
        }
        assert!((6863..=7137).contains(&delivered), "delivered {delivered}");
    }

    #[test]
    fn loss_pattern_is_slot_keyed_not_order_keyed() {
        let pki = Pki::new(3);
        let msg = signed(&pki, 9);
        let mut bus_a = Bus::new(7, 0.5, 0);
        let mut bus_b = Bus::new(7, 0.5, 0);
        // Same slots, differently named stations: identical drop pattern by
        // slot index.
        let rx_a = [StationId(1), StationId(2), StationId(3)];
        let rx_b = [StationId(30), StationId(10), StationId(20)];
        for step in 0..200u64 {
            let da = bus_a.broadcast(step, Arc::clone(&msg), &rx_a);
            let db = bus_b.broadcast(step, Arc::clone(&msg), &rx_b);
            let slots_a: Vec<usize> =
                da.iter().map(|d| rx_a.iter().position(|r| *r == d.receiver).unwrap()).collect();
            let slots_b: Vec<usize> =
                db.iter().map(|d| rx_b.iter().position(|r| *r == d.receiver).unwrap()).collect();
            assert_eq!(slots_a, slots_b, "step {step}");
        }
    }

    #[test]
    fn due_messages_sorted_by_sender_then_seq() {
        let pki = Pki::new(4);
        let mut bus = Bus::new(1, 0.0, 0);
        let rx = [StationId(99)];
        bus.broadcast(0, signed(&pki, 5), &rx);
        bus.broadcast(0, signed(&pki, 2), &rx);
        bus.broadcast(0, signed(&pki, 5), &rx);
        // Nothing on the enqueue step itself, regardless of latency zero.
        assert!(bus.take_due(StationId(99), 0).is_empty());
        let due = bus.take_due(StationId(99), 1);
        let senders: Vec<u32> = due.iter().map(|e| e.sender.0).collect();
        assert_eq!(senders, vec![2, 5, 5]);
        assert!(due[1].seq < due[2].seq);
    }
}
