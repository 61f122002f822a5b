//! Task streams: ordered segments of labelled batches whose task identity is kept beside the
//! batch, never inside it.

use std::collections::HashSet;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TameError};
use crate::experts::Batch;
use crate::tensor::Tensor;

use super::idx::Mnist;
use super::synthetic::{SyntheticSpec, SyntheticTasks};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    SplitMnist,
    PermutedMnist,
    SplitSynthetic,
}

impl StreamKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StreamKind::SplitMnist => "split_mnist",
            StreamKind::PermutedMnist => "permuted_mnist",
            StreamKind::SplitSynthetic => "split_synthetic",
        }
    }

    pub fn needs_mnist(&self) -> bool {
        matches!(self, StreamKind::SplitMnist | StreamKind::PermutedMnist)
    }
}

impl FromStr for StreamKind {
    type Err = TameError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split_mnist" => Ok(StreamKind::SplitMnist),
            "permuted_mnist" => Ok(StreamKind::PermutedMnist),
            "split_synthetic" => Ok(StreamKind::SplitSynthetic),
            other => Err(TameError::config(format!("unknown stream kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub kind: StreamKind,
    /// Class groups for split MNIST, one per task.
    pub class_groups: Vec<Vec<usize>>,
    pub permuted_tasks: usize,
    pub synthetic: SyntheticSpec,
    /// Order in which tasks are presented; tasks may repeat. Defaults to `0..tasks`.
    pub sequence: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the number of training samples per task (MNIST streams).
    pub train_limit: Option<usize>,
    /// Caps the number of test samples per task (MNIST streams).
    pub test_limit: Option<usize>,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            kind: StreamKind::SplitMnist,
            class_groups: (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect(),
            permuted_tasks: 5,
            synthetic: SyntheticSpec::default(),
            sequence: None,
            epochs: 10,
            batch_size: 128,
            train_limit: None,
            test_limit: None,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn task_count(&self) -> usize {
        match self.kind {
            StreamKind::SplitMnist => self.class_groups.len(),
            StreamKind::PermutedMnist => self.permuted_tasks,
            StreamKind::SplitSynthetic => self.synthetic.tasks,
        }
    }

    pub fn sequence(&self) -> Vec<usize> {
        self.sequence
            .clone()
            .unwrap_or_else(|| (0..self.task_count()).collect())
    }
}

/// Evaluation-side description of one task.
#[derive(Debug, Clone)]
pub struct TaskInfo {
    /// Local head index → global class.
    pub label_map: Vec<usize>,
    pub test_x: Tensor,
    /// Global class labels.
    pub test_y: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub task: usize,
    pub epochs: usize,
    inputs: Arc<Tensor>,
    rows: Vec<usize>,
    /// Local label of every entry in `rows`.
    labels: Vec<usize>,
    permutation: Option<Arc<Vec<usize>>>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn batch(&self, positions: &[usize]) -> Batch {
        let rows: Vec<usize> = positions.iter().map(|&p| self.rows[p]).collect();
        let mut x = self.inputs.select_rows(&rows);
        if let Some(perm) = &self.permutation {
            let n = x.row_len();
            let data = x.data_mut();
            let mut tmp = vec![0.0; n];
            for row in data.chunks_exact_mut(n) {
                for (t, &src) in tmp.iter_mut().zip(perm.iter()) {
                    *t = row[src];
                }
                row.copy_from_slice(&tmp);
            }
        }
        Batch {
            x,
            y: positions.iter().map(|&p| self.labels[p]).collect(),
        }
    }
}

/// A batch together with the evaluation-only metadata of where it came from.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub segment: usize,
    pub task: usize,
    pub batch: Batch,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskInfo>,
    pub segments: Vec<Segment>,
    pub batch_size: usize,
    pub input_shape: Vec<usize>,
    /// Size of every expert's output head.
    pub classes_per_task: usize,
    seed: u64,
}

impl TaskStream {
    /// Full batches per epoch of `segment`; the last partial batch is dropped.
    pub fn batches_per_epoch(&self, segment: usize) -> usize {
        self.segments[segment].len() / self.batch_size
    }

    pub fn total_batches(&self) -> usize {
        (0..self.segments.len())
            .map(|s| self.batches_per_epoch(s) * self.segments[s].epochs)
            .sum()
    }

    /// All batches in stream order. Each segment is reshuffled every epoch with a generator
    /// derived from the stream seed, the segment index and the epoch.
    pub fn batches(&self) -> impl Iterator<Item = LabeledBatch> + '_ {
        self.segments.iter().enumerate().flat_map(move |(si, seg)| {
            (0..seg.epochs).flat_map(move |epoch| {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed ^ ((si as u64) << 32) ^ (epoch as u64).wrapping_mul(0x9e37_79b9),
                );
                let mut order: Vec<usize> = (0..seg.len()).collect();
                order.shuffle(&mut rng);
                let full = seg.len() / self.batch_size;
                (0..full).map(move |b| LabeledBatch {
                    segment: si,
                    task: seg.task,
                    batch: seg.batch(&order[b * self.batch_size..(b + 1) * self.batch_size]),
                })
            })
        })
    }

    /// Task id of every segment.
    pub fn segment_tasks(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.task).collect()
    }
}

fn check_sequence(sequence: &[usize], tasks: usize) -> Result<()> {
    if sequence.is_empty() {
        return Err(TameError::config("task sequence is empty"));
    }
    if let Some(&t) = sequence.iter().find(|&&t| t >= tasks) {
        return Err(TameError::config(format!(
            "sequence refers to task {t} but only {tasks} tasks exist"
        )));
    }
    Ok(())
}

fn limited<R: Rng + ?Sized>(mut rows: Vec<usize>, limit: Option<usize>, rng: &mut R) -> Vec<usize> {
    if let Some(n) = limit.filter(|&n| n < rows.len()) {
        rows.shuffle(rng);
        rows.truncate(n);
        rows.sort_unstable();
    }
    rows
}

/// Builds the stream described by `spec`. MNIST streams require `mnist`.
pub fn build_stream(spec: &StreamSpec, mnist: Option<&Mnist>) -> Result<TaskStream> {
    if spec.batch_size == 0 || spec.epochs == 0 {
        return Err(TameError::config("batch_size and epochs must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sequence = spec.sequence();
    check_sequence(&sequence, spec.task_count())?;
    let need = || {
        mnist.ok_or_else(|| TameError::config(format!("{} needs MNIST data", spec.kind.as_str())))
    };
    match spec.kind {
        StreamKind::SplitMnist => split_mnist(spec, &sequence, need()?, &mut rng),
        StreamKind::PermutedMnist => permuted_mnist(spec, &sequence, need()?, &mut rng),
        StreamKind::SplitSynthetic => split_synthetic(spec, &sequence, &mut rng),
    }
}

fn split_mnist(
    spec: &StreamSpec,
    sequence: &[usize],
    data: &Mnist,
    rng: &mut ChaCha8Rng,
) -> Result<TaskStream> {
    let groups = &spec.class_groups;
    let mut seen = HashSet::new();
    for g in groups {
        if g.len() < 2 {
            return Err(TameError::config(
                "every class group needs at least 2 classes",
            ));
        }
        if g.len() != groups[0].len() {
            return Err(TameError::config("class groups must have equal sizes"));
        }
        for &c in g {
            if c > 9 {
                return Err(TameError::config(format!(
                    "class {c} is not an MNIST digit"
                )));
            }
            if !seen.insert(c) {
                return Err(TameError::config(format!(
                    "class {c} appears in more than one group"
                )));
            }
        }
    }
    let local = |group: &[usize], label: usize| group.iter().position(|&c| c == label);

    let train = Arc::new(data.train_x.clone());
    let mut per_task = Vec::new();
    let mut tasks = Vec::new();
    for g in groups {
        let rows: Vec<usize> = (0..data.train_y.len())
            .filter(|&i| local(g, data.train_y[i]).is_some())
            .collect();
        let rows = limited(rows, spec.train_limit, rng);
        let labels = rows
            .iter()
            .map(|&i| local(g, data.train_y[i]).expect("filtered"))
            .collect::<Vec<_>>();
        per_task.push((rows, labels));

        let test_rows: Vec<usize> = (0..data.test_y.len())
            .filter(|&i| local(g, data.test_y[i]).is_some())
            .collect();
        let test_rows = limited(test_rows, spec.test_limit, rng);
        tasks.push(TaskInfo {
            label_map: g.clone(),
            test_x: data.test_x.select_rows(&test_rows),
            test_y: test_rows.iter().map(|&i| data.test_y[i]).collect(),
        });
    }
    let segments = sequence
        .iter()
        .map(|&t| Segment {
            task: t,
            epochs: spec.epochs,
            inputs: Arc::clone(&train),
            rows: per_task[t].0.clone(),
            labels: per_task[t].1.clone(),
            permutation: None,
        })
        .collect();
    Ok(TaskStream {
        tasks,
        segments,
        batch_size: spec.batch_size,
        input_shape: data.train_x.item_shape().to_vec(),
        classes_per_task: groups[0].len(),
        seed: spec.seed,
    })
}

fn permuted_mnist(
    spec: &StreamSpec,
    sequence: &[usize],
    data: &Mnist,
    rng: &mut ChaCha8Rng,
) -> Result<TaskStream> {
    if spec.permuted_tasks == 0 {
        return Err(TameError::config("permuted_tasks must be >= 1"));
    }
    let pixels = data.train_x.row_len();
    let perms: Vec<Arc<Vec<usize>>> = (0..spec.permuted_tasks)
        .map(|_| {
            let mut p: Vec<usize> = (0..pixels).collect();
            p.shuffle(rng);
            Arc::new(p)
        })
        .collect();
    let train = Arc::new(data.train_x.clone());
    let rows = limited((0..data.train_y.len()).collect(), spec.train_limit, rng);
    let labels: Vec<usize> = rows.iter().map(|&i| data.train_y[i]).collect();
    let test_rows = limited((0..data.test_y.len()).collect(), spec.test_limit, rng);

    let tasks = perms
        .iter()
        .map(|perm| {
            let mut test_x = data.test_x.select_rows(&test_rows);
            let n = test_x.row_len();
            for row in test_x.data_mut().chunks_exact_mut(n) {
                let src = row.to_vec();
                for (dst, &s) in row.iter_mut().zip(perm.iter()) {
                    *dst = src[s];
                }
            }
            TaskInfo {
                label_map: (0..10).collect(),
                test_x,
                test_y: test_rows.iter().map(|&i| data.test_y[i]).collect(),
            }
        })
        .collect();
    let segments = sequence
        .iter()
        .map(|&t| Segment {
            task: t,
            epochs: spec.epochs,
            inputs: Arc::clone(&train),
            rows: rows.clone(),
            labels: labels.clone(),
            permutation: Some(Arc::clone(&perms[t])),
        })
        .collect();
    Ok(TaskStream {
        tasks,
        segments,
        batch_size: spec.batch_size,
        input_shape: data.train_x.item_shape().to_vec(),
        classes_per_task: 10,
        seed: spec.seed,
    })
}

fn split_synthetic(
    spec: &StreamSpec,
    sequence: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<TaskStream> {
    let gen = SyntheticTasks::new(spec.synthetic.clone(), rng)?;
    let s = gen.spec();
    let k = s.classes_per_task;
    let tasks = (0..s.tasks)
        .map(|t| {
            let (test_x, local) = gen.sample(t, s.test_per_task, false, rng);
            TaskInfo {
                label_map: (0..k).map(|c| t * k + c).collect(),
                test_x,
                test_y: local.iter().map(|&c| t * k + c).collect(),
            }
        })
        .collect();
    // Every segment, including a revisit, draws fresh samples from its task's distribution.
    let segments = sequence
        .iter()
        .map(|&t| {
            let (x, y) = gen.sample(t, s.train_per_task, true, rng);
            Segment {
                task: t,
                epochs: spec.epochs,
                inputs: Arc::new(x),
                rows: (0..y.len()).collect(),
                labels: y,
                permutation: None,
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        segments,
        batch_size: spec.batch_size,
        input_shape: vec![s.dim],
        classes_per_task: k,
        seed: spec.seed,
    })
}

/// Parses `"0-1,2-3"` style class groups.
pub fn parse_class_groups(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(',')
        .map(|g| {
            g.trim()
                .split('-')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .map_err(|_| TameError::config(format!("bad class '{c}' in '{s}'")))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_mnist() -> Mnist {
        // 4 samples per digit, pixel value = digit
        let n = 40;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let d = i % 10;
            x.extend(std::iter::repeat_n(d as f32, 4));
            y.push(d);
        }
        let t = Tensor::new(vec![n, 1, 2, 2], x).unwrap();
        Mnist {
            train_x: t.clone(),
            train_y: y.clone(),
            test_x: t,
            test_y: y,
        }
    }

    #[test]
    fn split_mnist_has_five_two_class_segments() {
        let spec = StreamSpec {
            batch_size: 2,
            epochs: 1,
            ..Default::default()
        };
        let stream = build_stream(&spec, Some(&fake_mnist())).unwrap();
        assert_eq!(stream.segments.len(), 5);
        assert_eq!(stream.classes_per_task, 2);
        for lb in stream.batches() {
            let group = &spec.class_groups[lb.task];
            for (i, &y) in lb.batch.y.iter().enumerate() {
                assert!(y < 2);
                assert_eq!(lb.batch.x.row(i)[0] as usize, group[y]);
            }
        }
        assert_eq!(stream.total_batches(), 5 * 4);
        assert_eq!(stream.tasks[3].label_map, vec![6, 7]);
    }

    #[test]
    fn overlapping_groups_are_rejected() {
        let spec = StreamSpec {
            class_groups: vec![vec![0, 1], vec![1, 2]],
            ..Default::default()
        };
        assert!(matches!(
            build_stream(&spec, Some(&fake_mnist())),
            Err(TameError::Config(_))
        ));
    }

    #[test]
    fn permuted_stream_applies_stored_permutation() {
        let spec = StreamSpec {
            kind: StreamKind::PermutedMnist,
            permuted_tasks: 20,
            batch_size: 4,
            epochs: 1,
            ..Default::default()
        };
        let stream = build_stream(&spec, Some(&fake_mnist())).unwrap();
        assert_eq!(stream.segments.len(), 20);
        let perm = stream.segments[7].permutation.clone().unwrap();
        let seg_batches: Vec<_> = stream.batches().filter(|b| b.segment == 7).collect();
        assert!(!seg_batches.is_empty());
        // Constant images stay constant under any permutation; check against test set instead.
        let original = fake_mnist().test_x;
        let permuted = &stream.tasks[7].test_x;
        for (j, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.row(0)[j], original.row(0)[src]);
        }
    }

    #[test]
    fn revisit_sequence_repeats_distributions() {
        let spec = StreamSpec {
            kind: StreamKind::SplitSynthetic,
            sequence: Some(vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]),
            synthetic: SyntheticSpec {
                train_per_task: 64,
                test_per_task: 10,
                ..Default::default()
            },
            batch_size: 32,
            epochs: 1,
            ..Default::default()
        };
        let stream = build_stream(&spec, None).unwrap();
        assert_eq!(stream.segments.len(), 10);
        let distinct: HashSet<_> = stream.segment_tasks().into_iter().collect();
        assert_eq!(distinct.len(), 5);
        // fresh samples for the revisit
        let a = stream.segments[0].inputs.row(0).to_vec();
        let b = stream.segments[5].inputs.row(0).to_vec();
        assert_ne!(a, b);
    }

    #[test]
    fn partial_batches_are_dropped_and_order_is_seeded() {
        let spec = StreamSpec {
            kind: StreamKind::SplitSynthetic,
            synthetic: SyntheticSpec {
                tasks: 1,
                train_per_task: 100,
                test_per_task: 10,
                ..Default::default()
            },
            batch_size: 32,
            epochs: 2,
            ..Default::default()
        };
        let stream = build_stream(&spec, None).unwrap();
        let batches: Vec<_> = stream.batches().collect();
        assert_eq!(batches.len(), 6);
        assert!(batches.iter().all(|b| b.batch.len() == 32));
        let again: Vec<_> = stream.batches().collect();
        assert_eq!(batches[4].batch, again[4].batch);
        assert_ne!(batches[0].batch, batches[3].batch);
    }

    #[test]
    fn parses_class_groups() {
        assert_eq!(
            parse_class_groups("0-1, 2-3").unwrap(),
            vec![vec![0, 1], vec![2, 3]]
        );
        assert!(parse_class_groups("0-x").is_err());
    }

    #[test]
    fn missing_mnist_is_a_config_error() {
        assert!(build_stream(&StreamSpec::default(), None).is_err());
    }
}
