//! Task datasets: IDX parsing, pixel-permutation tasks, Gaussian-blob
//! tasks and class splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hypernet::TaskId;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major samples with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub dim: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Split {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        Split {
            x,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            dim: self.dim,
        }
    }

    fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            x: self.x[..n * self.dim].to_vec(),
            y: self.y[..n].to_vec(),
            dim: self.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: TaskId,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<()> {
        for s in [&self.train, &self.test] {
            if s.x.len() != s.len() * s.dim {
                return Err(Error::Dimension("split features/labels disagree".into()));
            }
            if let Some(&label) = s.y.iter().find(|&&y| y >= self.classes) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        if self.train.dim != self.test.dim {
            return Err(Error::Dimension("train/test feature dims differ".into()));
        }
        Ok(())
    }
}

/// A parsed IDX stream. Raw bytes are kept so serialization is exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

impl IdxData {
    /// Pixels scaled to [0, 1], one row per image.
    pub fn pixels_unit(&self) -> Option<Vec<f64>> {
        match self {
            IdxData::Images { pixels, .. } => {
                Some(pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
            }
            IdxData::Labels(_) => None,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::Idx(format!("bad magic 0x{other:08X}"))),
    };
    let sizes = (0..dims)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let payload_len = sizes
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Idx("dimension overflow".into()))?;
    let start = 4 + 4 * dims;
    let payload = &bytes[start..];
    if payload.len() < payload_len {
        return Err(Error::Idx(format!(
            "payload has {} bytes, header promises {payload_len}",
            payload.len()
        )));
    }
    if payload.len() > payload_len {
        return Err(Error::Idx("trailing bytes after payload".into()));
    }
    let payload = payload.to_vec();
    Ok(match dims {
        3 => IdxData::Images {
            count: sizes[0],
            rows: sizes[1],
            cols: sizes[2],
            pixels: payload,
        },
        _ => IdxData::Labels(payload),
    })
}

pub fn serialize_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => {
            out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
            for d in [count, rows, cols] {
                out.extend((*d as u32).to_be_bytes());
            }
            out.extend(pixels);
        }
        IdxData::Labels(labels) => {
            out.extend(IDX_LABELS_MAGIC.to_be_bytes());
            out.extend((labels.len() as u32).to_be_bytes());
            out.extend(labels);
        }
    }
    out
}

fn load_idx_split(images: &Path, labels: &Path) -> Result<Split> {
    let imgs = parse_idx(&fs::read(images)?)?;
    let labs = parse_idx(&fs::read(labels)?)?;
    let (count, rows, cols) = match &imgs {
        IdxData::Images { count, rows, cols, .. } => (*count, *rows, *cols),
        IdxData::Labels(_) => return Err(Error::Idx(format!("{} is not an image file", images.display()))),
    };
    let IdxData::Labels(y) = labs else {
        return Err(Error::Idx(format!("{} is not a label file", labels.display())));
    };
    if y.len() != count {
        return Err(Error::Idx(format!("{count} images but {} labels", y.len())));
    }
    Ok(Split {
        x: imgs.pixels_unit().expect("images"),
        y: y.into_iter().map(usize::from).collect(),
        dim: rows * cols,
    })
}

/// Loads `train-*` / `t10k-*` IDX files from `dir`, keeping the first
/// `n_train` / `n_test` samples.
pub fn load_mnist_dir(dir: &Path, n_train: usize, n_test: usize) -> Result<TaskDataset> {
    let train = load_idx_split(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx_split(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    if train.len() < n_train || test.len() < n_test {
        return Err(Error::Config(format!(
            "requested {n_train}/{n_test} samples, files hold {}/{}",
            train.len(),
            test.len()
        )));
    }
    let ds = TaskDataset {
        task_id: 0,
        classes: 10,
        train: train.head(n_train),
        test: test.head(n_test),
    };
    ds.validate()?;
    Ok(ds)
}

/// A bijection on feature indices: output feature `i` is input feature `perm[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSpec {
    pub seed: u64,
    pub permutation: Vec<usize>,
}

impl PermutationSpec {
    pub fn from_seed(dim: usize, seed: u64) -> Self {
        let mut permutation: Vec<usize> = (0..dim).collect();
        permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { seed, permutation }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            seed: 0,
            permutation: (0..dim).collect(),
        }
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.permutation.len()];
        self.permutation.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
    }

    fn apply(&self, split: &Split) -> Split {
        let mut x = Vec::with_capacity(split.x.len());
        for i in 0..split.len() {
            let row = split.row(i);
            x.extend(self.permutation.iter().map(|&j| row[j]));
        }
        Split {
            x,
            y: split.y.clone(),
            dim: split.dim,
        }
    }
}

pub fn make_permuted_with(base: &TaskDataset, spec: &PermutationSpec, task_id: TaskId) -> Result<TaskDataset> {
    if spec.permutation.len() != base.train.dim || !spec.is_valid() {
        return Err(Error::Dimension("permutation does not match feature dim".into()));
    }
    Ok(TaskDataset {
        task_id,
        classes: base.classes,
        train: spec.apply(&base.train),
        test: spec.apply(&base.test),
    })
}

pub fn make_permuted(base: &TaskDataset, seed: u64) -> TaskDataset {
    let spec = PermutationSpec::from_seed(base.train.dim, seed);
    make_permuted_with(base, &spec, base.task_id).expect("seeded permutation is valid")
}

/// `classes` unit-covariance Gaussian clusters whose means are pairwise
/// `separation` apart (exactly when `dim ≥ classes`), split 80/20.
pub fn make_synthetic(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<TaskDataset> {
    if classes < 2 || dim == 0 || n_per_class == 0 {
        return Err(Error::Config("synthetic task needs ≥2 classes, dim ≥1, samples ≥1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };

    // Orthonormal directions via Gram-Schmidt when there is room; otherwise
    // random unit vectors.
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while dirs.len() < classes {
        let mut v = gaussian(&mut rng, dim);
        if dim >= classes {
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        dirs.push(v.into_iter().map(|a| a / norm).collect());
    }
    let radius = separation / 2f64.sqrt();

    let mut samples: Vec<(Vec<f64>, usize)> = Vec::with_capacity(classes * n_per_class);
    for (c, dir) in dirs.iter().enumerate() {
        for _ in 0..n_per_class {
            let noise = gaussian(&mut rng, dim);
            samples.push((dir.iter().zip(noise).map(|(m, z)| radius * m + z).collect(), c));
        }
    }
    samples.shuffle(&mut rng);
    let n_train = (samples.len() * 4) / 5;
    let to_split = |part: &[(Vec<f64>, usize)]| Split {
        x: part.iter().flat_map(|(x, _)| x.iter().copied()).collect(),
        y: part.iter().map(|(_, y)| *y).collect(),
        dim,
    };
    Ok(TaskDataset {
        task_id: 0,
        classes,
        train: to_split(&samples[..n_train]),
        test: to_split(&samples[n_train..]),
    })
}

/// Splits contiguous class ranges into `n_tasks` tasks, remapping labels to
/// `0..classes / n_tasks`.
pub fn split_classes(dataset: &TaskDataset, n_tasks: usize) -> Result<Vec<TaskDataset>> {
    if n_tasks == 0 || !dataset.classes.is_multiple_of(n_tasks) {
        return Err(Error::Config(format!(
            "{} classes cannot be split into {n_tasks} tasks",
            dataset.classes
        )));
    }
    let per = dataset.classes / n_tasks;
    let pick = |split: &Split, t: usize| {
        let idx: Vec<usize> = (0..split.len()).filter(|&i| split.y[i] / per == t).collect();
        let mut s = split.subset(&idx);
        s.y.iter_mut().for_each(|y| *y -= t * per);
        s
    };
    Ok((0..n_tasks)
        .map(|t| TaskDataset {
            task_id: if n_tasks == 1 { dataset.task_id } else { t as TaskId },
            classes: per,
            train: pick(&dataset.train, t),
            test: pick(&dataset.test, t),
        })
        .collect())
}
