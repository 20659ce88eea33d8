//! Precision, density, recall and coverage of generated samples against real
//! ones, using k-nearest-neighbour balls around each point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub density: f64,
    pub recall: f64,
    pub coverage: f64,
    pub k: usize,
    pub n_real: usize,
    pub n_generated: usize,
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:>10} {:>10} {:>10} {:>10}",
            "precision", "density", "recall", "coverage"
        )?;
        write!(
            f,
            "{:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            self.precision, self.density, self.recall, self.coverage
        )
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance from each row to its k-th nearest other row.
pub fn knn_radius(data: &DenseMatrix, k: usize) -> Result<Vec<f64>> {
    let n = data.rows();
    if k == 0 || n <= k {
        return Err(Error::InvalidArgument(format!(
            "need more than k={k} rows, got {n}"
        )));
    }
    Ok(sq_radii(data, k).into_iter().map(f64::sqrt).collect())
}

/// Squared radii compared against squared distances, so membership is exact
/// for duplicated points.
fn ball_counts(centers: &DenseMatrix, radii_sq: &[f64], points: &DenseMatrix) -> Vec<usize> {
    (0..points.rows())
        .into_par_iter()
        .map(|j| {
            (0..centers.rows())
                .filter(|&i| sq_dist(points.row(j), centers.row(i)) <= radii_sq[i])
                .count()
        })
        .collect()
}

fn sq_radii(data: &DenseMatrix, k: usize) -> Vec<f64> {
    let n = data.rows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(data.row(i), data.row(j)))
                .collect();
            *d.select_nth_unstable_by(k - 1, f64::total_cmp).1
        })
        .collect()
}

pub fn compute_metrics(
    real: &DenseMatrix,
    generated: &DenseMatrix,
    k: usize,
) -> Result<MetricReport> {
    if real.cols() != generated.cols() {
        return Err(Error::Dimension(format!(
            "real samples have {} columns, generated have {}",
            real.cols(),
            generated.cols()
        )));
    }
    let (n, m) = (real.rows(), generated.rows());
    if k == 0 || n <= k || m <= k {
        return Err(Error::InvalidArgument(format!(
            "both sample sets need more than k={k} rows"
        )));
    }
    let real_r = sq_radii(real, k);
    let gen_r = sq_radii(generated, k);

    // Generated points inside the real manifold.
    let gen_in_real = ball_counts(real, &real_r, generated);
    let precision = gen_in_real.iter().filter(|&&c| c > 0).count() as f64 / m as f64;
    let density = gen_in_real.iter().sum::<usize>() as f64 / (k * m) as f64;

    let real_in_gen = ball_counts(generated, &gen_r, real);
    let recall = real_in_gen.iter().filter(|&&c| c > 0).count() as f64 / n as f64;

    // Real balls containing at least one generated point.
    let coverage = (0..n)
        .into_par_iter()
        .filter(|&i| (0..m).any(|j| sq_dist(real.row(i), generated.row(j)) <= real_r[i]))
        .count() as f64
        / n as f64;

    Ok(MetricReport {
        precision,
        density,
        recall,
        coverage,
        k,
        n_real: n,
        n_generated: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn mat(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn random(seed: u64, n: usize, d: usize) -> DenseMatrix {
        let mut rng = stream(seed, "metrics", &[]);
        mat(&(0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect::<Vec<_>>())
    }

    #[test]
    fn knn_examples() {
        let line = mat(&[vec![0.0], vec![1.0], vec![3.0]]);
        assert_eq!(knn_radius(&line, 1).unwrap(), vec![1.0, 1.0, 2.0]);
        assert_eq!(knn_radius(&line, 2).unwrap(), vec![3.0, 2.0, 3.0]);
        let dup = mat(&[vec![0.0], vec![0.0], vec![5.0]]);
        assert_eq!(knn_radius(&dup, 1).unwrap()[0], 0.0);
        assert!(knn_radius(&line, 3).is_err());
    }

    /// Direct transcription of the four sums with a loop per indicator.
    fn oracle(real: &DenseMatrix, gen: &DenseMatrix, k: usize) -> [f64; 4] {
        let rr = knn_radius(real, k).unwrap();
        let gr = knn_radius(gen, k).unwrap();
        let d = |a: &[f64], b: &[f64]| sq_dist(a, b).sqrt();
        let (n, m) = (real.rows(), gen.rows());
        let mut p = 0.0;
        let mut den = 0.0;
        for j in 0..m {
            let mut any = false;
            for i in 0..n {
                if d(gen.row(j), real.row(i)) <= rr[i] {
                    any = true;
                    den += 1.0;
                }
            }
            p += f64::from(any);
        }
        let mut r = 0.0;
        for i in 0..n {
            r += f64::from((0..m).any(|j| d(real.row(i), gen.row(j)) <= gr[j]));
        }
        let mut c = 0.0;
        for i in 0..n {
            c += f64::from((0..m).any(|j| d(real.row(i), gen.row(j)) <= rr[i]));
        }
        [
            p / m as f64,
            den / (k * m) as f64,
            r / n as f64,
            c / n as f64,
        ]
    }

    #[test]
    fn identical_sets_are_perfect() {
        let a = random(1, 60, 3);
        let r = compute_metrics(&a, &a, 5).unwrap();
        assert_eq!((r.precision, r.recall, r.coverage), (1.0, 1.0, 1.0));
        assert!(r.density >= 1.0 / 5.0);
        let o = oracle(&a, &a, 5);
        assert_eq!(r.density, o[1]);
    }

    #[test]
    fn far_shift_scores_zero() {
        let a = random(2, 40, 2);
        let mut b = a.clone();
        for v in b.as_mut_slice() {
            *v += 1e6;
        }
        let r = compute_metrics(&a, &b, 5).unwrap();
        assert_eq!(
            (r.precision, r.density, r.recall, r.coverage),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn matches_direct_oracle() {
        for s in 0..5 {
            let a = random(10 + s, 50, 2);
            let b = random(20 + s, 70, 2);
            let r = compute_metrics(&a, &b, 3).unwrap();
            let o = oracle(&a, &b, 3);
            assert_eq!([r.precision, r.density, r.recall, r.coverage], o);
        }
    }

    #[test]
    fn swap_symmetry() {
        for s in 0..20 {
            let a = random(100 + s, 40, 2);
            let b = random(200 + s, 40, 2);
            let ab = compute_metrics(&a, &b, 5).unwrap();
            let ba = compute_metrics(&b, &a, 5).unwrap();
            assert_eq!(ab.precision, ba.recall);
            assert_eq!(ab.recall, ba.precision);
        }
    }

    #[test]
    fn rotation_invariant() {
        let a = random(7, 50, 2);
        let b = random(8, 50, 2);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |m: &DenseMatrix| {
            mat(&(0..m.rows())
                .map(|i| {
                    let r = m.row(i);
                    vec![c * r[0] - s * r[1] + 3.0, s * r[0] + c * r[1] - 1.0]
                })
                .collect::<Vec<_>>())
        };
        let r1 = compute_metrics(&a, &b, 5).unwrap();
        let r2 = compute_metrics(&rot(&a), &rot(&b), 5).unwrap();
        assert!((r1.precision - r2.precision).abs() < 0.03);
        assert!((r1.recall - r2.recall).abs() < 0.03);
        assert!((r1.coverage - r2.coverage).abs() < 0.03);
        assert!((r1.density - r2.density).abs() < 0.03);
        // Quarter turns are exact in floating point.
        let quarter = |m: &DenseMatrix| {
            mat(&(0..m.rows())
                .map(|i| vec![-m.row(i)[1], m.row(i)[0]])
                .collect::<Vec<_>>())
        };
        assert_eq!(compute_metrics(&quarter(&a), &quarter(&b), 5).unwrap(), r1);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(compute_metrics(&random(1, 10, 2), &random(1, 10, 3), 5).is_err());
    }
}
