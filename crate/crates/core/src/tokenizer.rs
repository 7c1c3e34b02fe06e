//! k-means tokenization of continuous embeddings and discretization stats.
//!
//! Embedding files are little-endian binary: `u64` rows, `u64` cols, then
//! `rows × cols` row-major `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

/// Fitted centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Matrix,
    pub inertia: f64,
    pub seed: u64,
    /// Inertia after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Converged once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-8,
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_data(data: &Matrix) -> Result<()> {
    if !data.is_finite() {
        return Err(Error::DegenerateInput("embeddings contain non-finite values".into()));
    }
    Ok(())
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn fit(data: &Matrix, k: usize, seed: u64, opts: &KMeansOptions) -> Result<Codebook> {
    check_data(data)?;
    let n = data.rows();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { points: n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = seed_plus_plus(data, k, &mut rng);
    lloyd(data, centroids, seed, opts)
}

/// Continues Lloyd iterations from the given centroids.
pub fn refine(data: &Matrix, codebook: &Codebook, opts: &KMeansOptions) -> Result<Codebook> {
    check_data(data)?;
    if data.cols() != codebook.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has dim {}, codebook has dim {}",
            data.cols(),
            codebook.dim()
        )));
    }
    lloyd(data, codebook.centroids.clone(), codebook.seed, opts)
}

fn seed_plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut centroids = Matrix::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut d2: Vec<f64> = data.iter_rows().map(|x| sq_dist(x, data.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).copy_from_slice(data.row(pick));
        for (i, x) in data.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centroids.row(j)));
        }
    }
    centroids
}

fn inertia_of(data: &Matrix, centroids: &Matrix, labels: &[usize]) -> f64 {
    data.iter_rows()
        .zip(labels)
        .map(|(x, &l)| sq_dist(x, centroids.row(l)))
        .sum()
}

fn lloyd(data: &Matrix, mut centroids: Matrix, seed: u64, opts: &KMeansOptions) -> Result<Codebook> {
    let (n, dim) = data.shape();
    let k = centroids.rows();
    let mut labels: Vec<usize> = data.iter_rows().map(|x| nearest(&centroids, x).0).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut sums = Matrix::zeros(k, dim);
    let mut sizes = vec![0usize; k];

    while iterations < opts.max_iters {
        iterations += 1;
        sums.fill(0.0);
        sizes.iter_mut().for_each(|s| *s = 0);
        for (x, &l) in data.iter_rows().zip(&labels) {
            crate::linalg::axpy(1.0, x, sums.row_mut(l));
            sizes[l] += 1;
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if sizes[j] == 0 {
                continue;
            }
            let inv = 1.0 / sizes[j] as f64;
            let new: Vec<f64> = sums.row(j).iter().map(|s| s * inv).collect();
            shift = shift.max(sq_dist(&new, centroids.row(j)).sqrt());
            centroids.row_mut(j).copy_from_slice(&new);
        }
        // Reseed every empty cluster at the point farthest from its centroid.
        for j in 0..k {
            if sizes[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[labels[i]] > 1)
                .map(|i| (i, sq_dist(data.row(i), centroids.row(labels[i]))))
                .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                sizes[labels[i]] -= 1;
                labels[i] = j;
                sizes[j] = 1;
                centroids.row_mut(j).copy_from_slice(data.row(i));
                shift = f64::INFINITY;
            }
        }
        for (i, x) in data.iter_rows().enumerate() {
            labels[i] = nearest(&centroids, x).0;
        }
        let inertia = inertia_of(data, &centroids, &labels);
        if let Some(&prev) = history.last() {
            let slack = 1e-9 * f64::max(1.0, prev);
            assert!(
                inertia <= prev + slack,
                "k-means inertia increased from {prev} to {inertia}"
            );
        }
        history.push(inertia);
        if shift <= opts.tol {
            break;
        }
    }
    let inertia = inertia_of(data, &centroids, &labels);
    if !centroids.is_finite() {
        return Err(Error::NumericalFault {
            step: iterations,
            what: "non-finite centroid".into(),
        });
    }
    Ok(Codebook {
        centroids,
        inertia,
        seed,
        inertia_history: history,
        iterations,
    })
}

/// Nearest-centroid token for every row of `data`.
pub fn assign(codebook: &Codebook, data: &Matrix) -> Result<Vec<usize>> {
    if data.cols() != codebook.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has dim {}, codebook has dim {}",
            data.cols(),
            codebook.dim()
        )));
    }
    Ok(data
        .iter_rows()
        .map(|x| nearest(&codebook.centroids, x).0)
        .collect())
}

/// Statistics of one token sequence relative to a vocabulary of `num_states`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Distinct tokens as a percentage of `num_states`.
    pub coverage_pct: f64,
    /// Mean occurrence count over distinct tokens.
    pub avg_revisits: f64,
    /// Percentage of distinct tokens seen exactly once.
    pub singleton_pct: f64,
    pub distinct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.into_iter().collect();
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationStats {
    pub per_trajectory: Vec<TrajectoryStats>,
    pub coverage_pct: MeanStd,
    pub avg_revisits: MeanStd,
    pub singleton_pct: MeanStd,
}

pub fn trajectory_stats(tokens: &[usize], num_states: usize) -> Result<TrajectoryStats> {
    let mut counts = vec![0usize; num_states];
    for &t in tokens {
        *counts.get_mut(t).ok_or_else(|| {
            Error::Bounds(format!("token {t} >= num_states {num_states}"))
        })? += 1;
    }
    let distinct = counts.iter().filter(|&&c| c > 0).count();
    let singletons = counts.iter().filter(|&&c| c == 1).count();
    let (avg, single) = if distinct == 0 {
        (0.0, 0.0)
    } else {
        (
            tokens.len() as f64 / distinct as f64,
            100.0 * singletons as f64 / distinct as f64,
        )
    };
    Ok(TrajectoryStats {
        coverage_pct: 100.0 * distinct as f64 / num_states as f64,
        avg_revisits: avg,
        singleton_pct: single,
        distinct,
    })
}

pub fn discretization_stats(sequences: &[Vec<usize>], num_states: usize) -> Result<DiscretizationStats> {
    let per: Vec<TrajectoryStats> = sequences
        .iter()
        .map(|s| trajectory_stats(s, num_states))
        .collect::<Result<_>>()?;
    Ok(DiscretizationStats {
        coverage_pct: MeanStd::of(per.iter().map(|s| s.coverage_pct)),
        avg_revisits: MeanStd::of(per.iter().map(|s| s.avg_revisits)),
        singleton_pct: MeanStd::of(per.iter().map(|s| s.singleton_pct)),
        per_trajectory: per,
    })
}

/// Splits `tokens` into consecutive runs of the given lengths.
pub fn split_lengths(tokens: &[usize], lengths: &[usize]) -> Result<Vec<Vec<usize>>> {
    let total: usize = lengths.iter().sum();
    if total != tokens.len() {
        return Err(Error::DimensionMismatch(format!(
            "lengths sum to {total} but there are {} tokens",
            tokens.len()
        )));
    }
    let mut out = Vec::with_capacity(lengths.len());
    let mut at = 0;
    for &l in lengths {
        out.push(tokens[at..at + l].to_vec());
        at += l;
    }
    Ok(out)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let len = rows.checked_mul(cols).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "header size overflows".into(),
    })?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != len * 4 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("expected {} data bytes for {rows}x{cols}, found {}", len * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = Matrix::from_vec(rows, cols, data);
    check_data(&m)?;
    Ok(m)
}

/// Values are narrowed to `f32`.
pub fn write_embeddings(path: impl AsRef<Path>, data: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(data.rows() as u64).to_le_bytes())?;
    w.write_all(&(data.cols() as u64).to_le_bytes())?;
    for &x in data.as_slice() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(n: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let data = random_data(50, 3, 1);
        let cb = fit(&data, 1, 0, &KMeansOptions::default()).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..50).map(|i| data.get(i, j)).sum::<f64>() / 50.0;
            assert!((cb.centroids.get(0, j) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = 0.1;
        let n = 200;
        let means = [[-5.0, 0.0], [5.0, 1.0]];
        let mut data = Matrix::zeros(2 * n, 2);
        for b in 0..2 {
            for i in 0..n {
                for j in 0..2 {
                    // Sum of uniforms, std sigma.
                    let u: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
                    data.set(b * n + i, j, means[b][j] + sigma * u);
                }
            }
        }
        let cb = fit(&data, 2, 7, &KMeansOptions::default()).unwrap();
        let bound = 3.0 * sigma / (n as f64).sqrt();
        for m in means {
            let hit = cb.centroids.iter_rows().any(|c| {
                (c[0] - m[0]).abs() <= bound && (c[1] - m[1]).abs() <= bound
            });
            assert!(hit, "no centroid near {m:?}: {:?}", cb.centroids);
        }
    }

    #[test]
    fn exact_cover_has_zero_inertia() {
        let data = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 2.0]]);
        let cb = fit(&data, 4, 11, &KMeansOptions::default()).unwrap();
        assert_eq!(cb.inertia, 0.0);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let data = random_data(3, 2, 0);
        assert!(matches!(
            fit(&data, 4, 0, &KMeansOptions::default()),
            Err(Error::TooFewPoints { points: 3, k: 4 })
        ));
    }

    #[test]
    fn assignment_tie_goes_to_lowest_index() {
        let cb = Codebook {
            centroids: Matrix::from_rows(&[
                vec![10.0],
                vec![20.0],
                vec![-1.0],
                vec![30.0],
                vec![40.0],
                vec![1.0],
            ]),
            inertia: 0.0,
            seed: 0,
            inertia_history: vec![],
            iterations: 0,
        };
        let ids = assign(&cb, &Matrix::from_rows(&[vec![0.0], vec![20.0]])).unwrap();
        assert_eq!(ids, vec![2, 1]);
        assert!(matches!(
            assign(&cb, &Matrix::zeros(1, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn assignment_matches_exhaustive_scan() {
        let data = random_data(300, 4, 5);
        let cb = fit(&data, 7, 2, &KMeansOptions::default()).unwrap();
        let ids = assign(&cb, &data).unwrap();
        for (i, x) in data.iter_rows().enumerate() {
            let best = (0..7)
                .map(|j| sq_dist(x, cb.centroids.row(j)))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(sq_dist(x, cb.centroids.row(ids[i])), best);
        }
    }

    #[test]
    fn refit_with_zero_iterations_is_idempotent() {
        let data = random_data(120, 3, 8);
        let cb = fit(&data, 5, 4, &KMeansOptions::default()).unwrap();
        let again = refine(&data, &cb, &KMeansOptions { max_iters: 0, tol: 0.0 }).unwrap();
        assert_eq!(assign(&cb, &data).unwrap(), assign(&again, &data).unwrap());
        assert_eq!(again.centroids, cb.centroids);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = random_data(100, 2, 9);
        let a = fit(&data, 6, 1, &KMeansOptions::default()).unwrap();
        let b = fit(&data, 6, 1, &KMeansOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_counted_stats() {
        let s = trajectory_stats(&[0, 0, 0], 10).unwrap();
        assert_eq!(s.coverage_pct, 10.0);
        assert_eq!(s.avg_revisits, 3.0);
        assert_eq!(s.singleton_pct, 0.0);
        let d = trajectory_stats(&[4, 1, 7, 2], 8).unwrap();
        assert_eq!(d.avg_revisits, 1.0);
        assert_eq!(d.singleton_pct, 100.0);
        assert!(trajectory_stats(&[10], 10).is_err());
    }

    #[test]
    fn embedding_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let data = Matrix::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0], vec![1e-3, 7.0]]);
        write_embeddings(&path, &data).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.shape(), (3, 2));
        for (a, b) in back.as_slice().iter().zip(data.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(&path, [0u8; 12]).unwrap();
        assert!(read_embeddings(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn inertia_never_increases(seed in any::<u64>(), k in 1usize..8, n in 10usize..80) {
            let data = random_data(n, 3, seed);
            let cb = fit(&data, k, seed, &KMeansOptions::default()).unwrap();
            for w in cb.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
            }
        }

        #[test]
        fn coverage_counts_distinct_tokens(tokens in prop::collection::vec(0usize..20, 1..50)) {
            let s = trajectory_stats(&tokens, 20).unwrap();
            let scaled = s.coverage_pct * 20.0 / 100.0;
            prop_assert_eq!(scaled.round(), scaled);
            prop_assert_eq!(scaled as usize, s.distinct);
        }
    }
}
