//! Whole-episode replay storage with hindsight ("future") goal relabeling at
//! sampling time.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;

use crate::maze::{sparse_reward, Action, Goal};

const SNAPSHOT_MAGIC: &[u8; 6] = b"VDSRB1";

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("episode protocol violation: {0}")]
    Protocol(String),
    #[error("replay buffer is empty")]
    Empty,
    #[error("invalid replay configuration: {0}")]
    Config(String),
    #[error("malformed buffer snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReplayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: [f64; 2],
    pub a: Action,
    pub r: f64,
    pub s_next: [f64; 2],
    pub g: Goal,
    pub t: usize,
    pub episode_id: u64,
}

/// Converts "relabeled : regular" into a per-transition relabel probability.
pub fn relabel_probability(relabel_ratio: f64) -> f64 {
    relabel_ratio / (1.0 + relabel_ratio)
}

/// A sampled mini-batch. `relabeled[i]` tells whether transition `i` had its
/// goal swapped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub transitions: Vec<Transition>,
    pub relabeled: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

impl From<Vec<Transition>> for Batch {
    fn from(transitions: Vec<Transition>) -> Self {
        let relabeled = vec![false; transitions.len()];
        Self {
            transitions,
            relabeled,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    success_radius: f64,
    episodes: VecDeque<Vec<Transition>>,
    /// `offsets[i]` is the number of transitions stored before episode `i`.
    offsets: Vec<usize>,
    size: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, success_radius: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(ReplayError::Config("capacity must be positive".into()));
        }
        if success_radius.is_nan() || success_radius <= 0.0 {
            return Err(ReplayError::Config(format!("success radius {success_radius} must be positive")));
        }
        Ok(Self {
            capacity,
            success_radius,
            episodes: VecDeque::new(),
            offsets: Vec::new(),
            size: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn episodes(&self) -> impl Iterator<Item = &[Transition]> {
        self.episodes.iter().map(Vec::as_slice)
    }

    pub fn recompute_reward(&self, s_next: [f64; 2], g: Goal) -> f64 {
        sparse_reward(s_next, g, self.success_radius)
    }

    /// Appends a whole episode, evicting the oldest episodes beyond capacity.
    pub fn push_episode(&mut self, transitions: Vec<Transition>) -> Result<()> {
        let Some(first) = transitions.first() else {
            return Err(ReplayError::Protocol("empty episode".into()));
        };
        let id = first.episode_id;
        for (i, tr) in transitions.iter().enumerate() {
            if tr.t != i {
                return Err(ReplayError::Protocol(format!(
                    "step index {} at position {i} (episode {id})",
                    tr.t
                )));
            }
            if tr.episode_id != id {
                return Err(ReplayError::Protocol(format!(
                    "mixed episode ids {} and {id}",
                    tr.episode_id
                )));
            }
        }
        if transitions.len() > self.capacity {
            return Err(ReplayError::Protocol(format!(
                "episode of {} transitions exceeds capacity {}",
                transitions.len(),
                self.capacity
            )));
        }
        self.size += transitions.len();
        self.episodes.push_back(transitions);
        while self.size > self.capacity {
            let old = self.episodes.pop_front().expect("size > 0 implies an episode");
            self.size -= old.len();
        }
        self.offsets.clear();
        let mut acc = 0;
        for ep in &self.episodes {
            self.offsets.push(acc);
            acc += ep.len();
        }
        Ok(())
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let ep = self.offsets.partition_point(|&o| o <= flat) - 1;
        (ep, flat - self.offsets[ep])
    }

    /// Uniform draws over stored transitions. Each draw is independently
    /// relabeled with probability `ratio / (1 + ratio)` using the achieved
    /// next position of a uniformly chosen step `j >= t` of the same episode.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, relabel_ratio: f64, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        if batch_size == 0 {
            return Err(ReplayError::Config("batch size must be positive".into()));
        }
        if !relabel_ratio.is_finite() || relabel_ratio < 0.0 {
            return Err(ReplayError::Config(format!("relabel ratio {relabel_ratio} must be >= 0")));
        }
        let p = relabel_probability(relabel_ratio);
        let mut batch = Batch {
            transitions: Vec::with_capacity(batch_size),
            relabeled: Vec::with_capacity(batch_size),
        };
        for _ in 0..batch_size {
            let (ep, idx) = self.locate(rng.random_range(0..self.size));
            let episode = &self.episodes[ep];
            let mut tr = episode[idx];
            let relabel = p > 0.0 && rng.random_bool(p);
            if relabel {
                let future = rng.random_range(idx..episode.len());
                tr.g = Goal(episode[future].s_next);
                tr.r = self.recompute_reward(tr.s_next, tr.g);
            }
            batch.transitions.push(tr);
            batch.relabeled.push(relabel);
        }
        Ok(batch)
    }

    /// Length-prefixed little-endian dump: episode count, then per episode its
    /// length and fixed-size transition records.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&(self.episodes.len() as u64).to_le_bytes())?;
        for ep in &self.episodes {
            w.write_all(&(ep.len() as u64).to_le_bytes())?;
            for tr in ep {
                let floats = [
                    tr.s[0],
                    tr.s[1],
                    tr.a.speed,
                    tr.a.heading,
                    tr.r,
                    tr.s_next[0],
                    tr.s_next[1],
                    tr.g.0[0],
                    tr.g.0[1],
                ];
                for v in floats {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&(tr.t as u64).to_le_bytes())?;
                w.write_all(&tr.episode_id.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R, capacity: usize, success_radius: f64) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(ReplayError::Snapshot("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let mut buffer = Self::new(capacity, success_radius)?;
        let episodes = next_u64(&mut r)?;
        for _ in 0..episodes {
            let len = next_u64(&mut r)? as usize;
            if len > capacity {
                return Err(ReplayError::Snapshot(format!("episode length {len} exceeds capacity")));
            }
            let mut ep = Vec::with_capacity(len);
            for _ in 0..len {
                let mut f = [0.0; 9];
                for v in f.iter_mut() {
                    *v = f64::from_bits(next_u64(&mut r)?);
                }
                let t = next_u64(&mut r)? as usize;
                let episode_id = next_u64(&mut r)?;
                ep.push(Transition {
                    s: [f[0], f[1]],
                    a: Action {
                        speed: f[2],
                        heading: f[3],
                    },
                    r: f[4],
                    s_next: [f[5], f[6]],
                    g: Goal([f[7], f[8]]),
                    t,
                    episode_id,
                });
            }
            buffer.push_episode(ep)?;
        }
        Ok(buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A walk along +x; transition t goes from x = t to x = t + 1.
    fn episode(id: u64, len: usize) -> Vec<Transition> {
        let g = Goal([100.0, 0.0]);
        (0..len)
            .map(|t| Transition {
                s: [t as f64, 0.0],
                a: Action::new(1.0, 0.0),
                r: -1.0,
                s_next: [t as f64 + 1.0, 0.0],
                g,
                t,
                episode_id: id,
            })
            .collect()
    }

    #[test]
    fn push_counts_and_evicts_whole_episodes() {
        let mut b = ReplayBuffer::new(100, 0.3).unwrap();
        b.push_episode(episode(0, 50)).unwrap();
        assert_eq!(b.len(), 50);
        b.push_episode(episode(1, 50)).unwrap();
        b.push_episode(episode(2, 50)).unwrap();
        assert_eq!(b.len(), 100);
        let ids: Vec<u64> = b.episodes().map(|e| e[0].episode_id).collect();
        assert_eq!(ids, [1, 2]);
    }

    #[test]
    fn push_rejects_gaps_and_mixed_ids() {
        let mut b = ReplayBuffer::new(100, 0.3).unwrap();
        let mut ep = episode(0, 5);
        ep.remove(2);
        assert!(matches!(b.push_episode(ep), Err(ReplayError::Protocol(_))));
        let mut ep = episode(0, 5);
        ep[3].episode_id = 9;
        assert!(matches!(b.push_episode(ep), Err(ReplayError::Protocol(_))));
        assert!(matches!(b.push_episode(vec![]), Err(ReplayError::Protocol(_))));
        assert!(b.is_empty());
    }

    #[test]
    fn sample_errors() {
        let b = ReplayBuffer::new(10, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_batch(4, 4.0, &mut rng), Err(ReplayError::Empty)));
        let mut b = b;
        b.push_episode(episode(0, 3)).unwrap();
        assert!(matches!(b.sample_batch(0, 4.0, &mut rng), Err(ReplayError::Config(_))));
        assert!(matches!(b.sample_batch(4, -1.0, &mut rng), Err(ReplayError::Config(_))));
        assert!(ReplayBuffer::new(0, 0.3).is_err());
    }

    #[test]
    fn zero_ratio_never_relabels() {
        let mut b = ReplayBuffer::new(1000, 0.3).unwrap();
        b.push_episode(episode(0, 50)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = b.sample_batch(2000, 0.0, &mut rng).unwrap();
        assert!(batch.relabeled.iter().all(|&r| !r));
        assert!(batch.transitions.iter().all(|t| t.g == Goal([100.0, 0.0])));
    }

    #[test]
    fn relabeled_goals_come_from_the_future() {
        let mut b = ReplayBuffer::new(1000, 0.3).unwrap();
        b.push_episode(episode(0, 20)).unwrap();
        b.push_episode(episode(1, 20)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = b.sample_batch(5000, 4.0, &mut rng).unwrap();
        for (tr, &rel) in batch.transitions.iter().zip(&batch.relabeled) {
            assert_eq!(tr.r, b.recompute_reward(tr.s_next, tr.g));
            if rel {
                assert!(tr.g.0[0] >= tr.s_next[0] && tr.g.0[0] <= 20.0);
                if tr.t == 19 {
                    assert_eq!(tr.r, 0.0);
                }
            }
        }
    }

    #[test]
    fn reward_rule_is_strict() {
        let b = ReplayBuffer::new(1, 0.3).unwrap();
        assert_eq!(b.recompute_reward([1.0, 1.0], Goal([1.0, 1.0])), 0.0);
        assert_eq!(b.recompute_reward([0.0, 0.0], Goal([0.3, 0.0])), -1.0);
        assert_eq!(b.recompute_reward([0.0, 0.0], Goal([10.0, 0.0])), -1.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut b = ReplayBuffer::new(100, 0.3).unwrap();
        b.push_episode(episode(4, 7)).unwrap();
        b.push_episode(episode(5, 3)).unwrap();
        let mut bytes = Vec::new();
        b.write_snapshot(&mut bytes).unwrap();
        let back = ReplayBuffer::read_snapshot(&bytes[..], 100, 0.3).unwrap();
        assert_eq!(back.len(), 10);
        let a: Vec<_> = b.episodes().flatten().copied().collect();
        let c: Vec<_> = back.episodes().flatten().copied().collect();
        assert_eq!(a, c);
        assert!(ReplayBuffer::read_snapshot(&bytes[..20], 100, 0.3).is_err());
    }
}
