#![allow(dead_code)]

pub mod oracles;

use fsmle::models::{Design, GlmKind, IidFamily, MeanSpec, Model, NoiseLaw, OracleOptions, TruthSpec};
use nalgebra::DVector;

pub fn in_family(theta: &[f64]) -> TruthSpec {
    TruthSpec::InFamily { theta: theta.to_vec() }
}

pub fn index_truth(theta: &[f64], noise: NoiseLaw) -> TruthSpec {
    TruthSpec::CustomMean {
        mean: MeanSpec::Index { theta: theta.to_vec(), curvature: 0.0, link: Default::default() },
        noise,
    }
}

pub fn orthonormal(p: usize, m: usize) -> Design {
    Design::orthonormal_replicated(p, m).unwrap()
}

pub fn normal_design(n: usize, p: usize, seed: u64) -> Design {
    Design::standard_normal(n, p, seed, true).unwrap()
}

pub fn glm(design: Design, kind: GlmKind, theta: &[f64]) -> Model {
    Model::glm(design, kind, in_family(theta), None).unwrap()
}

pub fn lad_laplace(design: Design, theta: &[f64]) -> Model {
    Model::lad(design, index_truth(theta, NoiseLaw::Laplace { scale: 1.0 }), OracleOptions::density_default()).unwrap()
}

pub fn iid(family: IidFamily, n: usize, theta: &[f64]) -> Model {
    Model::iid(family, n, in_family(theta), OracleOptions::expectation_default()).unwrap()
}

pub fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Wilson-free 3-sigma ceiling for a Bernoulli frequency.
pub fn three_sigma(bound: f64, n: usize) -> f64 {
    bound + 3.0 * (bound * (1.0 - bound) / n as f64).sqrt()
}
