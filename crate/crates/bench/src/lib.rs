//! Shared fixtures for the criterion benches: a trained GP state-space
//! model on a small bioreactor dataset and a matching OCP specification.

use gpnmpc::linalg::Matrix;
use gpnmpc::plant::{generate_dataset_type1, BioreactorParams, NoiseSpec};
use gpnmpc::rng::RngStream;
use gpnmpc::statespace::GPStateSpace;

pub fn training_data(n: usize) -> (Matrix, Matrix) {
    let p = BioreactorParams::default();
    let noise = NoiseSpec::default();
    let mut rng = RngStream::new(11, 0);
    generate_dataset_type1(n, &p, &noise, &mut rng).unwrap()
}

pub fn fitted_model(n: usize) -> GPStateSpace {
    let (z, y) = training_data(n);
    let mut rng = RngStream::new(11, 1);
    let (gpss, _) =
        GPStateSpace::fit(&z, &y, NoiseSpec::default().sigma_omega_diag, 3, &mut rng).unwrap();
    gpss
}

pub fn random_psd(n: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 0);
    let rows: Vec<Vec<f64>> =
        (0..n).map(|_| (0..n).map(|_| rng.standard_normal()).collect()).collect();
    let a = Matrix::from_rows(&rows);
    let mut m = a.matmul(&a.transpose());
    for i in 0..n {
        m[(i, i)] += n as f64;
    }
    m
}
