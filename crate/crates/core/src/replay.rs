//! Bounded FIFO replay of rollout segments, each transition carrying the
//! behavior policy's full action distribution.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Action, PolicySnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True terminal: the successor has value 0.
    pub terminal: bool,
    /// Episode cut by the time limit; the successor is bootstrapped.
    pub truncated: bool,
    pub behavior: PolicySnapshot,
    /// Advantage and value target computed when the segment was collected.
    pub collected_advantage: f64,
    pub collected_return: f64,
}

/// Ordered transitions from one rollout of `T` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory(pub Vec<Transition>);

impl Trajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.0
    }
}

/// Segments drawn from the buffer for one off-policy step.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub segments: Vec<Arc<Trajectory>>,
}

impl MiniBatch {
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.segments.iter().flat_map(|s| s.0.iter())
    }

    pub fn n_transitions(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    segments: VecDeque<Arc<Trajectory>>,
    stored: usize,
    total_stored: u64,
}

const DUMP_FORMAT: &str = "p3o-replay";
const DUMP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BufferDump {
    format: String,
    version: u32,
    capacity: usize,
    total_stored: u64,
    segments: Vec<Trajectory>,
}

impl ReplayBuffer {
    /// `capacity` counts transitions.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            segments: VecDeque::new(),
            stored: 0,
            total_stored: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Transitions currently held.
    pub fn len(&self) -> usize {
        self.stored
    }

    pub fn is_empty(&self) -> bool {
        self.stored == 0
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Transitions ever appended, including evicted ones.
    pub fn total_stored(&self) -> u64 {
        self.total_stored
    }

    pub fn segments(&self) -> impl Iterator<Item = &Trajectory> {
        self.segments.iter().map(|s| s.as_ref())
    }

    /// Stores a segment, evicting the oldest whole segments past capacity.
    pub fn append(&mut self, segment: Trajectory) -> Result<()> {
        if segment.is_empty() {
            return Err(Error::Input("cannot store an empty segment".into()));
        }
        if segment.len() > self.capacity {
            return Err(Error::Input(format!(
                "segment of {} transitions exceeds capacity {}",
                segment.len(),
                self.capacity
            )));
        }
        for t in segment.transitions() {
            t.behavior.check_consistent(&t.action)?;
        }
        self.stored += segment.len();
        self.total_stored += segment.len() as u64;
        self.segments.push_back(Arc::new(segment));
        while self.stored > self.capacity {
            let evicted = self.segments.pop_front().expect("stored > 0");
            self.stored -= evicted.len();
        }
        Ok(())
    }

    /// True once at least `burn_in` transitions have ever been stored.
    pub fn is_warm(&self, burn_in: u64) -> bool {
        self.total_stored >= burn_in
    }

    /// `n_segments` segments drawn uniformly with replacement.
    pub fn sample_minibatch<R: Rng + ?Sized>(&self, n_segments: usize, rng: &mut R) -> Result<MiniBatch> {
        if self.segments.is_empty() {
            return Err(Error::State("replay buffer is empty".into()));
        }
        if n_segments == 0 {
            return Err(Error::Input("mini-batch needs at least one segment".into()));
        }
        let segments = (0..n_segments)
            .map(|_| Arc::clone(&self.segments[rng.random_range(0..self.segments.len())]))
            .collect();
        Ok(MiniBatch { segments })
    }

    /// Like [`sample_minibatch`](Self::sample_minibatch), but refuses until
    /// the burn-in gate opens.
    pub fn sample_warm<R: Rng + ?Sized>(&self, burn_in: u64, n_segments: usize, rng: &mut R) -> Result<MiniBatch> {
        if !self.is_warm(burn_in) {
            return Err(Error::State(format!(
                "replay buffer is cold ({} of {burn_in} transitions)",
                self.total_stored
            )));
        }
        self.sample_minibatch(n_segments, rng)
    }

    /// Writes a versioned JSON dump with segments in insertion order.
    pub fn dump<W: Write>(&self, writer: W) -> Result<()> {
        let dump = BufferDump {
            format: DUMP_FORMAT.into(),
            version: DUMP_VERSION,
            capacity: self.capacity,
            total_stored: self.total_stored,
            segments: self.segments.iter().map(|s| (**s).clone()).collect(),
        };
        serde_json::to_writer(writer, &dump).map_err(|e| Error::Input(format!("buffer dump: {e}")))
    }

    pub fn restore<R: Read>(reader: R) -> Result<Self> {
        let dump: BufferDump =
            serde_json::from_reader(reader).map_err(|e| Error::Input(format!("buffer restore: {e}")))?;
        if dump.format != DUMP_FORMAT || dump.version != DUMP_VERSION {
            return Err(Error::Input(format!(
                "unsupported buffer dump {} v{}",
                dump.format, dump.version
            )));
        }
        let mut buffer = Self::new(dump.capacity)?;
        for segment in dump.segments {
            buffer.append(segment)?;
        }
        if buffer.total_stored > dump.total_stored {
            return Err(Error::Input("dump holds more transitions than it ever stored".into()));
        }
        buffer.total_stored = dump.total_stored;
        Ok(buffer)
    }
}

impl PartialEq for ReplayBuffer {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.stored == other.stored
            && self.total_stored == other.total_stored
            && self.segments.iter().zip(&other.segments).all(|(a, b)| a == b)
            && self.segments.len() == other.segments.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ActionDistribution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transition(tag: f64) -> Transition {
        let dist = ActionDistribution::categorical(vec![0.3, 0.7]).unwrap();
        let action = Action::Discrete(1);
        Transition {
            state: vec![tag],
            behavior: PolicySnapshot::record(dist, &action).unwrap(),
            action,
            reward: tag * 0.1,
            next_state: vec![tag + 1.0],
            terminal: false,
            truncated: false,
            collected_advantage: 0.0,
            collected_return: 0.0,
        }
    }

    fn segment(tag: f64, len: usize) -> Trajectory {
        Trajectory((0..len).map(|i| transition(tag + i as f64 / 100.0)).collect())
    }

    #[test]
    fn fifo_eviction_drops_oldest() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        for tag in [1.0, 2.0, 3.0] {
            buf.append(segment(tag, 4)).unwrap();
        }
        let tags: Vec<f64> = buf.segments().map(|s| s.0[0].state[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0]);
        assert_eq!(buf.len(), 8);
        assert_eq!(buf.total_stored(), 12);
    }

    #[test]
    fn empty_and_inconsistent_segments_are_rejected() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        assert!(matches!(buf.append(Trajectory(vec![])), Err(Error::Input(_))));
        let mut bad = segment(1.0, 2);
        bad.0[1].behavior.log_prob = -5.0;
        assert!(matches!(buf.append(bad), Err(Error::Input(_))));
        assert!(buf.is_empty());
    }

    #[test]
    fn append_within_capacity_keeps_content() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        buf.append(segment(1.0, 3)).unwrap();
        let before: Vec<Trajectory> = buf.segments().cloned().collect();
        buf.append(segment(2.0, 3)).unwrap();
        let after: Vec<Trajectory> = buf.segments().cloned().collect();
        assert_eq!(&after[..1], &before[..]);
    }

    #[test]
    fn burn_in_gate() {
        let mut buf = ReplayBuffer::new(10_000).unwrap();
        assert!(buf.is_warm(0));
        for i in 0..2499 {
            buf.append(segment(i as f64, 1)).unwrap();
        }
        assert!(!buf.is_warm(2500));
        assert!(buf.sample_warm(2500, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        buf.append(segment(0.0, 1)).unwrap();
        assert!(buf.is_warm(2500));
    }

    #[test]
    fn sampling_with_replacement_and_determinism() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        assert!(matches!(
            buf.sample_minibatch(1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::State(_))
        ));
        buf.append(segment(7.0, 2)).unwrap();
        let mb = buf.sample_minibatch(3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(mb.segments.len(), 3);
        assert!(mb.segments.iter().all(|s| s.0[0].state[0] == 7.0));

        for i in 0..9 {
            buf.append(segment(i as f64, 2)).unwrap();
        }
        let draw = |seed| {
            let mb = buf.sample_minibatch(20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            mb.segments.iter().map(|s| s.0[0].state[0]).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn uniform_segment_frequencies() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..10 {
            buf.append(segment(i as f64, 1)).unwrap();
        }
        let snapshot = buf.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n / 10 {
            for s in buf.sample_minibatch(10, &mut rng).unwrap().segments {
                counts[s.0[0].state[0] as usize] += 1;
            }
        }
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.1).abs() < 3.0 * sigma);
        }
        assert!(buf == snapshot, "sampling must not mutate the buffer");
    }

    #[test]
    fn dump_restore_round_trip() {
        let mut buf = ReplayBuffer::new(6).unwrap();
        for tag in [0.1, 0.2, 0.3] {
            buf.append(segment(tag, 3)).unwrap();
        }
        let mut bytes = Vec::new();
        buf.dump(&mut bytes).unwrap();
        let restored = ReplayBuffer::restore(bytes.as_slice()).unwrap();
        assert!(restored == buf);
        assert_eq!(restored.total_stored(), 9);
        assert!(ReplayBuffer::restore(&b"{\"format\":\"x\",\"version\":1,\"capacity\":1,\"total_stored\":0,\"segments\":[]}"[..]).is_err());
    }
}
