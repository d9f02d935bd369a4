use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LinkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Trajectory,
    DirectInput,
    State,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Trajectory, Channel::DirectInput, Channel::State];

    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::Trajectory => "trajectory",
            Channel::DirectInput => "direct_input",
            Channel::State => "state",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub send_step: u64,
    pub deliver_step: u64,
    pub payload: String,
}

/// Outcome of one send, as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendRecord {
    pub seq: u64,
    pub send_step: u64,
    /// `None` when the message was dropped.
    pub deliver_step: Option<u64>,
}

/// One FIFO link with latency, jitter and loss.
#[derive(Debug, Clone)]
pub struct Link {
    pub cfg: LinkConfig,
    queue: VecDeque<Envelope>,
    last_deliver: u64,
    next_seq: u64,
    rng: ChaCha8Rng,
}

impl Link {
    pub fn new(cfg: LinkConfig, rng: ChaCha8Rng) -> Self {
        Self {
            cfg,
            queue: VecDeque::new(),
            last_deliver: 0,
            next_seq: 0,
            rng,
        }
    }

    /// Queue `payload` sent at `step`. A message is delivered at
    /// `step + latency + J` with `J` uniform in `0..=jitter`, but never
    /// before an earlier message on the same link.
    pub fn send(&mut self, payload: String, step: u64) -> SendRecord {
        let seq = self.next_seq;
        self.next_seq += 1;
        let lost = self.rng.random::<f64>() < self.cfg.loss;
        let jitter = self.rng.random_range(0..=self.cfg.jitter_steps) as u64;
        if lost {
            return SendRecord {
                seq,
                send_step: step,
                deliver_step: None,
            };
        }
        let deliver = (step + self.cfg.latency_steps as u64 + jitter).max(self.last_deliver);
        self.last_deliver = deliver;
        self.queue.push_back(Envelope {
            seq,
            send_step: step,
            deliver_step: deliver,
            payload,
        });
        SendRecord {
            seq,
            send_step: step,
            deliver_step: Some(deliver),
        }
    }

    /// Messages due at or before `step`, in send order.
    pub fn deliver(&mut self, step: u64) -> Vec<Envelope> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|e| e.deliver_step <= step) {
            out.extend(self.queue.pop_front());
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}
