use detlab_core::rank::{numerical_rank, singular_values, stage_ranks, Matrix, StageEntry};
use detlab_core::{Tensor, TensorArchive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Weight with exactly the given singular values: U diag(sigma) V^T.
fn planted(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: &[f64]) -> Matrix {
    let k = sigma.len();
    let u = Matrix::random_orthonormal(rows, k, &mut || rng.sample(StandardNormal)).unwrap();
    let v = Matrix::random_orthonormal(cols, k, &mut || rng.sample(StandardNormal)).unwrap();
    u.matmul(&Matrix::diag(sigma)).unwrap().matmul(&v.transpose()).unwrap()
}

#[test]
fn singular_values_reconstruct_planted_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sigma = [9.0, 7.5, 3.0, 1.0, 0.25];
    let m = planted(&mut rng, 12, 20, &sigma);
    let s = singular_values(&m).unwrap();
    for (a, b) in s.iter().zip(sigma) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    assert!(s[sigma.len()..].iter().all(|v| *v < 1e-10));
}

#[test]
fn scale_and_orthogonal_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let rows = rng.random_range(1..=24);
        let cols = rng.random_range(1..=24);
        let w = gaussian(&mut rng, rows, cols);
        let r = numerical_rank(&w, 0.5).unwrap();
        assert!(r >= 1 && r <= rows.min(cols));
        let c: f64 = rng.random_range(0.01..100.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        assert_eq!(numerical_rank(&w.scale(c), 0.5).unwrap(), r);
        let q = Matrix::random_orthonormal(rows, rows, &mut || rng.sample(StandardNormal)).unwrap();
        assert_eq!(numerical_rank(&q.matmul(&w).unwrap(), 0.5).unwrap(), r);
    }
}

#[test]
fn planted_stage_archive() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut archive = TensorArchive::new();
    let mut manifest = Vec::new();
    let planted_ranks = [(1u32, 3usize), (2, 8), (3, 1), (4, 5)];
    for &(stage, rank) in &planted_ranks {
        // `rank` values well above half of sigma_max, the rest well below
        let mut sigma: Vec<f64> = (0..rank).map(|i| 10.0 - i as f64 * 0.5).collect();
        sigma.extend((rank..8).map(|i| 3.0 - i as f64 * 0.2));
        let m = planted(&mut rng, 8, 4 * 9, &sigma);
        let name = format!("stage{stage}.cv2.weight");
        archive.insert(name.clone(), Tensor::new(vec![8, 4, 3, 3], m.data().to_vec()).unwrap());
        manifest.push(StageEntry {
            stage_id: stage,
            weight: name,
            c_out: 8,
        });
    }
    let report = stage_ranks(&archive, &manifest, 0.5).unwrap();
    for (s, &(stage, rank)) in report.stages.iter().zip(&planted_ranks) {
        assert_eq!(s.stage_id, stage);
        assert_eq!(s.numerical_rank, rank);
        assert_eq!(s.normalized_rank, rank as f64 / 8.0);
    }
}
