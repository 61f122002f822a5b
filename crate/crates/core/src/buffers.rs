//! Fixed-capacity uniform subsampling of a stream by random priorities.
//!
//! Every offered item gets an i.i.d. standard-normal priority and the buffer keeps the
//! `capacity` highest priorities seen so far. Because the priorities are continuous and
//! exchangeable, the retained set is a uniform random subset of everything offered.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TameError};
use crate::tensor::Tensor;
use crate::wire::*;

#[derive(Debug, Clone)]
struct Entry<T> {
    priority: f32,
    seq: u64,
    payload: T,
}

impl<T> Entry<T> {
    /// Eviction order: the heap's maximum is the entry to drop next, i.e. the lowest priority
    /// and, among equal priorities, the latest insertion.
    fn evict_cmp(&self, other: &Self) -> Ordering {
        other
            .priority
            .total_cmp(&self.priority)
            .then(self.seq.cmp(&other.seq))
    }
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.evict_cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.evict_cmp(other)
    }
}

#[derive(Debug, Clone)]
pub struct ReservoirBuffer<T> {
    capacity: usize,
    heap: BinaryHeap<Entry<T>>,
    next_seq: u64,
    rng: ChaCha8Rng,
}

impl<T> ReservoirBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReservoirBuffer {
            capacity,
            heap: BinaryHeap::with_capacity(capacity + 1),
            next_seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Offers `payload` under a fresh `N(0, 1)` priority from the buffer's own generator.
    /// Returns whether it is retained.
    pub fn offer(&mut self, payload: T) -> bool {
        let priority: f32 = StandardNormal.sample(&mut self.rng);
        self.offer_with_priority(priority, payload)
    }

    pub fn offer_with_priority(&mut self, priority: f32, payload: T) -> bool {
        self.insert_with(priority, || payload)
    }

    /// Like [`ReservoirBuffer::offer_with_priority`] but only builds the payload when it would
    /// be retained.
    pub fn insert_with<F: FnOnce() -> T>(&mut self, priority: f32, make: F) -> bool {
        let seq = self.next_seq;
        self.next_seq += 1;
        if self.capacity == 0 {
            return false;
        }
        if self.heap.len() == self.capacity {
            let worst = self.heap.peek().expect("full buffer has entries");
            // Ties keep the incumbent.
            if priority <= worst.priority {
                return false;
            }
            self.heap.pop();
        }
        self.heap.push(Entry {
            priority,
            seq,
            payload: make(),
        });
        true
    }

    /// Retained payloads in insertion order; the buffer is unchanged.
    pub fn drain(&self) -> Vec<&T> {
        self.entries().into_iter().map(|(_, p)| p).collect()
    }

    /// Retained `(priority, payload)` pairs in insertion order.
    pub fn entries(&self) -> Vec<(f32, &T)> {
        let mut all: Vec<&Entry<T>> = self.heap.iter().collect();
        all.sort_by_key(|e| e.seq);
        all.into_iter().map(|e| (e.priority, &e.payload)).collect()
    }

    /// Total number of offers so far, accepted or not.
    pub fn offered(&self) -> u64 {
        self.next_seq
    }
}

impl<T: Clone> ReservoirBuffer<T> {
    /// The buffer a smaller capacity would have produced on the same offers: the `capacity`
    /// highest-priority entries of this one.
    pub fn truncated(&self, capacity: usize) -> ReservoirBuffer<T> {
        let mut sorted: Vec<&Entry<T>> = self.heap.iter().collect();
        // Ascending eviction order puts the best entries first.
        sorted.sort();
        sorted.truncate(capacity);
        ReservoirBuffer {
            capacity,
            heap: sorted.into_iter().cloned().collect(),
            next_seq: self.next_seq,
            rng: self.rng.clone(),
        }
    }
}

/// Payloads that can be written to a buffer snapshot as `tensor dims, f32 data, u32 label`.
pub trait SnapshotPayload: Sized {
    fn input(&self) -> &Tensor;
    fn label(&self) -> usize;
    fn from_parts(input: Tensor, label: usize) -> Self;
}

/// Selector training pair: an input and the id of the expert that was active when it arrived.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorSample {
    pub x: Tensor,
    pub expert_id: usize,
}

/// Expert retraining pair: an input and its class label within the task.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSample {
    pub x: Tensor,
    pub y: usize,
}

impl SnapshotPayload for SelectorSample {
    fn input(&self) -> &Tensor {
        &self.x
    }
    fn label(&self) -> usize {
        self.expert_id
    }
    fn from_parts(x: Tensor, expert_id: usize) -> Self {
        SelectorSample { x, expert_id }
    }
}

impl SnapshotPayload for PruneSample {
    fn input(&self) -> &Tensor {
        &self.x
    }
    fn label(&self) -> usize {
        self.y
    }
    fn from_parts(x: Tensor, y: usize) -> Self {
        PruneSample { x, y }
    }
}

impl<T: SnapshotPayload> ReservoirBuffer<T> {
    /// Writes `capacity:u32 count:u32` then, per entry in insertion order,
    /// `priority:f32 rank:u32 dims:u32* data:f32* label:u32`.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        write_len(w, self.capacity)?;
        write_len(w, self.len())?;
        for (priority, payload) in self.entries() {
            write_f32(w, priority)?;
            let x = payload.input();
            write_len(w, x.shape().len())?;
            for &d in x.shape() {
                write_len(w, d)?;
            }
            write_f32s(w, x.data())?;
            write_len(w, payload.label())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R, seed: u64) -> Result<Self> {
        let capacity = read_len(r)?;
        let count = read_len(r)?;
        if count > capacity {
            return Err(TameError::format(format!(
                "snapshot holds {count} entries but capacity is {capacity}"
            )));
        }
        let mut buf = ReservoirBuffer::new(capacity, seed);
        for _ in 0..count {
            let priority = read_f32(r)?;
            let rank = read_len(r)?;
            let shape = (0..rank).map(|_| read_len(r)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let x = Tensor::new(shape, read_f32s(r, n)?)?;
            let label = read_len(r)?;
            buf.offer_with_priority(priority, T::from_parts(x, label));
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn large_capacity_keeps_everything() {
        let mut buf = ReservoirBuffer::new(10, 0);
        for i in 0..7 {
            assert!(buf.offer(i));
        }
        assert_eq!(
            buf.drain(),
            (0..7).collect::<Vec<_>>().iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn capacity_one_keeps_highest_priority() {
        let mut buf = ReservoirBuffer::new(1, 0);
        assert!(buf.offer_with_priority(0.3, "a"));
        assert!(!buf.offer_with_priority(-1.2, "b"));
        assert!(buf.offer_with_priority(2.0, "c"));
        assert_eq!(buf.drain(), vec![&"c"]);
    }

    #[test]
    fn ties_keep_earlier_entry() {
        let mut buf = ReservoirBuffer::new(1, 0);
        buf.offer_with_priority(0.5, 1);
        assert!(!buf.offer_with_priority(0.5, 2));
        assert_eq!(buf.drain(), vec![&1]);
    }

    #[test]
    fn empty_and_counts() {
        let buf: ReservoirBuffer<u32> = ReservoirBuffer::new(5, 0);
        assert!(buf.drain().is_empty());

        let mut buf = ReservoirBuffer::new(100, 9);
        for i in 0..10_000 {
            buf.offer(i);
        }
        assert_eq!(buf.drain().len(), 100);
        assert_eq!(buf.offered(), 10_000);
    }

    #[test]
    fn zero_capacity_rejects() {
        let mut buf = ReservoirBuffer::new(0, 0);
        assert!(!buf.offer(1));
        assert!(buf.is_empty());
    }

    #[test]
    fn truncation_matches_smaller_buffer() {
        let mut big = ReservoirBuffer::new(50, 4);
        let mut small = ReservoirBuffer::new(10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for i in 0..500 {
            let p: f32 = StandardNormal.sample(&mut rng);
            big.offer_with_priority(p, i);
            small.offer_with_priority(p, i);
        }
        assert_eq!(big.truncated(10).drain(), small.drain());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut buf = ReservoirBuffer::new(3, 1);
        for i in 0..6 {
            let x = Tensor::new(vec![2], vec![i as f32, -(i as f32)]).unwrap();
            buf.offer(PruneSample { x, y: i % 2 });
        }
        let mut bytes = Vec::new();
        buf.write_snapshot(&mut bytes).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        let back: ReservoirBuffer<PruneSample> =
            ReservoirBuffer::read_snapshot(&mut bytes.as_slice(), 1).unwrap();
        assert_eq!(back.entries(), buf.entries());
    }

    proptest! {
        #[test]
        fn retains_top_priorities_within_capacity(
            priorities in prop::collection::vec(-5.0f32..5.0, 0..200),
            capacity in 0usize..30,
        ) {
            let mut buf = ReservoirBuffer::new(capacity, 0);
            for (i, &p) in priorities.iter().enumerate() {
                buf.offer_with_priority(p, i);
                prop_assert!(buf.len() <= capacity);
            }
            // Brute force: sort by priority descending, earlier index first on ties.
            let mut order: Vec<usize> = (0..priorities.len()).collect();
            order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]).then(a.cmp(&b)));
            let mut expected: Vec<usize> = order.into_iter().take(capacity).collect();
            expected.sort();
            let kept: Vec<usize> = buf.drain().into_iter().copied().collect();
            prop_assert_eq!(kept, expected);
        }

        #[test]
        fn same_seed_same_contents(seed in any::<u64>()) {
            let run = |seed| {
                let mut buf = ReservoirBuffer::new(8, seed);
                (0..100).for_each(|i| { buf.offer(i); });
                buf.drain().into_iter().copied().collect::<Vec<_>>()
            };
            prop_assert_eq!(run(seed), run(seed));
        }
    }
}
