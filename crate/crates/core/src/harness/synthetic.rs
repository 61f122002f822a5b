//! Gaussian-cluster classification tasks with per-task mean shifts.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

use crate::error::{Result, TameError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Norm of each task's centre.
    pub task_separation: f32,
    /// Norm of each class offset around its task centre.
    pub class_separation: f32,
    /// Per-coordinate standard deviation of the samples.
    pub noise: f32,
    /// Probability that a training label is replaced by a uniformly drawn wrong class.
    pub label_noise: f64,
    pub train_per_task: usize,
    pub test_per_task: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dim: 20,
            tasks: 5,
            classes_per_task: 2,
            task_separation: 4.0,
            class_separation: 2.0,
            noise: 0.5,
            label_noise: 0.0,
            train_per_task: 2560,
            test_per_task: 500,
        }
    }
}

/// Frozen cluster means: `means[task][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTasks {
    spec: SyntheticSpec,
    means: Vec<Vec<Vec<f32>>>,
}

fn random_direction<R: Rng + ?Sized>(dim: usize, norm: f32, rng: &mut R) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let len = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if len > 1e-6 {
            return v.into_iter().map(|x| x / len * norm).collect();
        }
    }
}

/// `count` unit vectors, mutually orthogonal when `dim >= count`, so that no task's class
/// structure is visible along another task's class directions.
fn class_directions<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f32>> {
    let mut basis: Vec<Vec<f32>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = random_direction(dim, 1.0, rng);
        if basis.len() < dim {
            for b in &basis {
                let dot: f32 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let len = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if len < 1e-3 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= len);
        }
        basis.push(v);
    }
    basis
}

impl SyntheticTasks {
    pub fn new<R: Rng + ?Sized>(spec: SyntheticSpec, rng: &mut R) -> Result<Self> {
        if spec.dim == 0 || spec.tasks == 0 || spec.classes_per_task < 2 {
            return Err(TameError::config(
                "synthetic tasks need dim >= 1, tasks >= 1 and classes_per_task >= 2",
            ));
        }
        if !(0.0..1.0).contains(&spec.label_noise) {
            return Err(TameError::config("label_noise must be in [0, 1)"));
        }
        let k = spec.classes_per_task;
        let offsets = class_directions(spec.dim, spec.tasks * k, rng);
        let means = (0..spec.tasks)
            .map(|t| {
                let centre = random_direction(spec.dim, spec.task_separation, rng);
                (0..k)
                    .map(|c| {
                        offsets[t * k + c]
                            .iter()
                            .zip(&centre)
                            .map(|(o, m)| o * spec.class_separation + m)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(SyntheticTasks { spec, means })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// `n` samples of `task` with balanced local labels in `0..classes_per_task`. Label noise is
    /// applied only when `noisy_labels` is set.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        task: usize,
        n: usize,
        noisy_labels: bool,
        rng: &mut R,
    ) -> (Tensor, Vec<usize>) {
        let k = self.spec.classes_per_task;
        let flip = Bernoulli::new(if noisy_labels {
            self.spec.label_noise
        } else {
            0.0
        })
        .expect("validated probability");
        let mut data = Vec::with_capacity(n * self.spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % k;
            for &m in &self.means[task][class] {
                let z: f32 = StandardNormal.sample(rng);
                data.push(m + self.spec.noise * z);
            }
            let label = if flip.sample(rng) {
                (class + rng.random_range(1..k)) % k
            } else {
                class
            };
            labels.push(label);
        }
        (
            Tensor::new(vec![n, self.spec.dim], data).expect("sized above"),
            labels,
        )
    }
}
