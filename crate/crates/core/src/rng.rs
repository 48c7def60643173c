//! Deterministic randomness, organized as purpose-keyed substreams.
//!
//! Every random decision in a run draws from its own stream, derived from the
//! master seed plus a purpose tag and up to four coordinates (step, layer,
//! sequence index, ...). Two consequences matter:
//!
//! * runs are reproducible bit-for-bit from the seed alone, and
//! * toggling one consumer (say, enabling token masking) cannot shift the
//!   draws seen by any other consumer.
//!
//! A `TrainRng` can carry an event trace so tests can count exactly how many
//! streams of each purpose were opened.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::{Arc, Mutex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamPurpose {
    /// Weight initialization, one stream per model.
    Init,
    /// Per-epoch shuffling of training example order.
    BatchOrder,
    /// The per-batch masking strategy draw.
    Strategy,
    /// Per-layer, per-sequence token mask selection.
    TokenMask,
    /// Per-layer, per-sequence mask selection over cross-attention keys.
    CrossMask,
    /// Post-softmax attention weight dropout.
    AttDropout,
    /// Whole-head dropout.
    DropHead,
    /// Hidden-state dropout between sublayers.
    HiddenDropout,
    /// Dataset generation.
    Data,
}

impl StreamPurpose {
    fn code(self) -> u64 {
        match self {
            StreamPurpose::Init => 1,
            StreamPurpose::BatchOrder => 2,
            StreamPurpose::Strategy => 3,
            StreamPurpose::TokenMask => 4,
            StreamPurpose::CrossMask => 5,
            StreamPurpose::AttDropout => 6,
            StreamPurpose::DropHead => 7,
            StreamPurpose::HiddenDropout => 8,
            StreamPurpose::Data => 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamEvent {
    pub purpose: StreamPurpose,
    pub coords: [u64; 4],
}

pub type StreamTrace = Arc<Mutex<Vec<StreamEvent>>>;

/// Root of all randomness for one run.
#[derive(Clone)]
pub struct TrainRng {
    master: u64,
    trace: Option<StreamTrace>,
}

impl TrainRng {
    pub fn new(master_seed: u64) -> Self {
        TrainRng {
            master: master_seed,
            trace: None,
        }
    }

    /// Same as `new`, but records every `stream` call for inspection.
    pub fn traced(master_seed: u64) -> (Self, StreamTrace) {
        let trace: StreamTrace = Arc::new(Mutex::new(Vec::new()));
        (
            TrainRng {
                master: master_seed,
                trace: Some(trace.clone()),
            },
            trace,
        )
    }

    pub fn seed(&self) -> u64 {
        self.master
    }

    /// Open the substream identified by `(purpose, coords)`.
    pub fn stream(&self, purpose: StreamPurpose, coords: [u64; 4]) -> ChaCha8Rng {
        if let Some(trace) = &self.trace {
            trace
                .lock()
                .expect("rng trace poisoned")
                .push(StreamEvent { purpose, coords });
        }
        let mut state = splitmix64(self.master ^ 0x9e37_79b9_7f4a_7c15);
        state = splitmix64(state ^ purpose.code());
        for c in coords {
            state = splitmix64(state ^ c);
        }
        ChaCha8Rng::seed_from_u64(state)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
