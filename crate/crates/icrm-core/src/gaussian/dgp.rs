//! Label-conditional Gaussian environments and their parameter geometry.
//!
//! An environment is the vector `γ = [(p⁰, μ⁰, Σ⁰), (p¹, μ¹, Σ¹)]`: class
//! priors, class means, and class covariances for the two labels. Features
//! are drawn as `x | y ~ N(μ^y, Σ^y)` with the label a Bernoulli draw on the
//! priors. The label-swap permutation `δ` exchanges the two class triplets;
//! because an unlabeled sample cannot distinguish `γ` from `δ`, all
//! parameter-space matching happens over the union of the training vectors
//! and their swaps. A test environment sits "in the cell" of the training
//! set when its nearest neighbor in that union is an unswapped vector.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env_core::{EnvId, LabeledExample};
use crate::error::{Error, Result};
use crate::rng;

/// Minimum covariance eigenvalue accepted at construction.
pub const SPD_FLOOR: f64 = 1e-10;

/// Parameters of one binary-labeled Gaussian environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvParams {
    p: [f64; 2],
    mu: [DVector<f64>; 2],
    sigma: [DMatrix<f64>; 2],
    diagonal_only: bool,
    /// Cholesky factors cached at construction for sampling and densities.
    chol: [DMatrix<f64>; 2],
    log_det: [f64; 2],
}

impl EnvParams {
    /// Validate and build. Priors must be positive and sum to one within
    /// `1e-12`; covariances must be symmetric with eigenvalues above
    /// [`SPD_FLOOR`]; in diagonal-only mode off-diagonals must be exactly
    /// zero.
    pub fn new(
        p: [f64; 2],
        mu: [DVector<f64>; 2],
        sigma: [DMatrix<f64>; 2],
        diagonal_only: bool,
    ) -> Result<Self> {
        if (p[0] + p[1] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidEnvParams(format!(
                "class priors sum to {}",
                p[0] + p[1]
            )));
        }
        if p[0] <= 0.0 || p[1] <= 0.0 {
            return Err(Error::InvalidEnvParams("class priors must be positive".into()));
        }
        let d = mu[0].len();
        if mu[1].len() != d {
            return Err(Error::InvalidEnvParams("mean dimensions disagree".into()));
        }
        let mut chol = Vec::with_capacity(2);
        let mut log_det = [0.0; 2];
        for class in 0..2 {
            let s = &sigma[class];
            if s.nrows() != d || s.ncols() != d {
                return Err(Error::InvalidEnvParams(format!(
                    "covariance {class} is {}x{}, expected {d}x{d}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            if (s - s.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidEnvParams(format!(
                    "covariance {class} is not symmetric"
                )));
            }
            if diagonal_only {
                for i in 0..d {
                    for j in 0..d {
                        if i != j && s[(i, j)] != 0.0 {
                            return Err(Error::InvalidEnvParams(format!(
                                "diagonal-only covariance {class} has off-diagonal {}",
                                s[(i, j)]
                            )));
                        }
                    }
                }
            }
            let eigen = s.clone().symmetric_eigen();
            let min_eig = eigen.eigenvalues.min();
            if !(min_eig > SPD_FLOOR) {
                return Err(Error::NotSpd { class, min_eig });
            }
            let factor = s
                .clone()
                .cholesky()
                .ok_or(Error::NotSpd { class, min_eig })?;
            log_det[class] = 2.0 * factor.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            chol.push(factor.l());
        }
        let chol: [DMatrix<f64>; 2] = chol.try_into().unwrap();
        Ok(Self { p, mu, sigma, diagonal_only, chol, log_det })
    }

    /// Convenience constructor from plain vectors and row-major matrices.
    pub fn from_raw(
        p: [f64; 2],
        mu: [Vec<f64>; 2],
        sigma: [Vec<Vec<f64>>; 2],
        diagonal_only: bool,
    ) -> Result<Self> {
        let d = mu[0].len();
        let to_mat = |rows: &Vec<Vec<f64>>| {
            DMatrix::from_fn(d, d, |i, j| rows.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0))
        };
        Self::new(
            p,
            [DVector::from_vec(mu[0].clone()), DVector::from_vec(mu[1].clone())],
            [to_mat(&sigma[0]), to_mat(&sigma[1])],
            diagonal_only,
        )
    }

    /// Isotropic helper used by fixtures and tests: unit-variance classes at
    /// the two given means.
    pub fn isotropic(p1: f64, mu0: &[f64], mu1: &[f64]) -> Result<Self> {
        let d = mu0.len();
        Self::new(
            [1.0 - p1, p1],
            [DVector::from_row_slice(mu0), DVector::from_row_slice(mu1)],
            [DMatrix::identity(d, d), DMatrix::identity(d, d)],
            false,
        )
    }

    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }

    pub fn prior(&self, class: usize) -> f64 {
        self.p[class]
    }

    pub fn mean(&self, class: usize) -> &DVector<f64> {
        &self.mu[class]
    }

    pub fn covariance(&self, class: usize) -> &DMatrix<f64> {
        &self.sigma[class]
    }

    pub fn diagonal_only(&self) -> bool {
        self.diagonal_only
    }

    /// Log density of `x` under the class-conditional Gaussian.
    pub fn class_log_density(&self, class: usize, x: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        let maha = self.mahalanobis_sq(class, x);
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det[class] + maha)
    }

    /// Squared Mahalanobis distance `(x-μ)ᵀ Σ⁻¹ (x-μ)` for the class.
    pub fn mahalanobis_sq(&self, class: usize, x: &DVector<f64>) -> f64 {
        let centered = x - &self.mu[class];
        let solved = self.chol[class]
            .clone()
            .solve_lower_triangular(&centered)
            .expect("cached Cholesky factor is nonsingular");
        solved.norm_squared()
    }

    /// Exchange the two class triplets.
    pub fn swap(&self) -> Self {
        Self {
            p: [self.p[1], self.p[0]],
            mu: [self.mu[1].clone(), self.mu[0].clone()],
            sigma: [self.sigma[1].clone(), self.sigma[0].clone()],
            diagonal_only: self.diagonal_only,
            chol: [self.chol[1].clone(), self.chol[0].clone()],
            log_det: [self.log_det[1], self.log_det[0]],
        }
    }

    /// Draw `n` labeled examples, labels Bernoulli on the class-1 prior and
    /// features from the class-conditional Gaussian. Deterministic given
    /// `seed`.
    pub fn generate(&self, env: EnvId, n: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = rng::stream(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let y = usize::from(rng.random::<f64>() < self.p[1]);
            let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
            let x = &self.mu[y] + &self.chol[y] * z;
            out.push(LabeledExample { x: x.iter().copied().collect(), y, e: env });
        }
        out
    }

    /// Flatten to the canonical vector
    /// `(p⁰, μ⁰, triu Σ⁰, p¹, μ¹, triu Σ¹)`, upper triangles row-major and
    /// unscaled.
    pub fn flatten(&self) -> ParamVector {
        let d = self.dim();
        let mut flat = Vec::with_capacity(2 * block_len(d));
        for class in 0..2 {
            flat.push(self.p[class]);
            flat.extend(self.mu[class].iter());
            for i in 0..d {
                for j in i..d {
                    flat.push(self.sigma[class][(i, j)]);
                }
            }
        }
        ParamVector { flat, dim: d }
    }

    /// Inverse of [`EnvParams::flatten`]; errors on length mismatch and
    /// re-validates the reconstructed parameters.
    pub fn unflatten(vector: &ParamVector, diagonal_only: bool) -> Result<Self> {
        let d = vector.dim;
        let expected = 2 * block_len(d);
        if vector.flat.len() != expected {
            return Err(Error::FlatLengthMismatch { got: vector.flat.len(), expected });
        }
        let mut idx = 0;
        let mut take = |n: usize| {
            let s = &vector.flat[idx..idx + n];
            idx += n;
            s.to_vec()
        };
        let mut p = [0.0; 2];
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for class in 0..2 {
            p[class] = take(1)[0];
            mu.push(DVector::from_vec(take(d)));
            let triu = take(d * (d + 1) / 2);
            let mut m = DMatrix::zeros(d, d);
            let mut k = 0;
            for i in 0..d {
                for j in i..d {
                    m[(i, j)] = triu[k];
                    m[(j, i)] = triu[k];
                    k += 1;
                }
            }
            sigma.push(m);
        }
        Self::new(
            p,
            [mu[0].clone(), mu[1].clone()],
            [sigma[0].clone(), sigma[1].clone()],
            diagonal_only,
        )
    }
}

/// Serialized form of [`EnvParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvParamsData {
    pub p: [f64; 2],
    pub mu: [Vec<f64>; 2],
    pub sigma: [Vec<Vec<f64>>; 2],
    #[serde(default)]
    pub diagonal_only: bool,
}

impl From<&EnvParams> for EnvParamsData {
    fn from(params: &EnvParams) -> Self {
        let d = params.dim();
        let to_rows = |m: &DMatrix<f64>| {
            (0..d)
                .map(|i| (0..d).map(|j| m[(i, j)]).collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        };
        Self {
            p: params.p,
            mu: [
                params.mu[0].iter().copied().collect(),
                params.mu[1].iter().copied().collect(),
            ],
            sigma: [to_rows(&params.sigma[0]), to_rows(&params.sigma[1])],
            diagonal_only: params.diagonal_only,
        }
    }
}

impl TryFrom<EnvParamsData> for EnvParams {
    type Error = Error;

    fn try_from(data: EnvParamsData) -> Result<Self> {
        EnvParams::from_raw(data.p, data.mu, data.sigma, data.diagonal_only)
    }
}

impl Serialize for EnvParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        EnvParamsData::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EnvParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let data = EnvParamsData::deserialize(deserializer)?;
        EnvParams::try_from(data).map_err(serde::de::Error::custom)
    }
}

/// Flattened environment parameters: length `2 (1 + d + d(d+1)/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub dim: usize,
}

fn block_len(d: usize) -> usize {
    1 + d + d * (d + 1) / 2
}

impl ParamVector {
    pub fn from_flat(flat: Vec<f64>, dim: usize) -> Result<Self> {
        let expected = 2 * block_len(dim);
        if flat.len() != expected {
            return Err(Error::FlatLengthMismatch { got: flat.len(), expected });
        }
        Ok(Self { flat, dim })
    }

    /// Exchange the two class blocks.
    pub fn block_swap(&self) -> Self {
        let half = self.flat.len() / 2;
        let mut flat = Vec::with_capacity(self.flat.len());
        flat.extend_from_slice(&self.flat[half..]);
        flat.extend_from_slice(&self.flat[..half]);
        Self { flat, dim: self.dim }
    }

    /// Euclidean distance, optionally weighted per coordinate.
    pub fn distance(&self, other: &Self, weights: Option<&[f64]>) -> f64 {
        self.flat
            .iter()
            .zip(&other.flat)
            .enumerate()
            .map(|(i, (a, b))| {
                let w = weights.map_or(1.0, |w| w[i]);
                w * (a - b) * (a - b)
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Whether the unswapped vector or its block swap achieved a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Unswapped,
    Swapped,
}

/// Result of nearest-environment matching.
#[derive(Debug, Clone, PartialEq)]
pub struct VoronoiAssignment {
    pub env_index: usize,
    pub orientation: Orientation,
    pub distance: f64,
    /// True when another (environment, orientation) pair achieved exactly the
    /// same distance; ties resolve unswapped-first, then lowest index.
    pub tied: bool,
}

/// Nearest training environment to `theta` over both orientations:
/// the minimizing `e` of `min(‖θ − γ_e‖, ‖swap(θ) − γ_e‖)`.
pub fn voronoi_assign(theta: &ParamVector, train: &[EnvParams]) -> VoronoiAssignment {
    voronoi_assign_weighted(theta, train, None)
}

/// [`voronoi_assign`] with an optional diagonal weight vector on the
/// flattened coordinates (all-ones when absent).
pub fn voronoi_assign_weighted(
    theta: &ParamVector,
    train: &[EnvParams],
    weights: Option<&[f64]>,
) -> VoronoiAssignment {
    assert!(!train.is_empty(), "training set must be non-empty");
    let swapped = theta.block_swap();
    let mut best: Option<VoronoiAssignment> = None;
    // Unswapped candidates first, then swapped, each in env order, so that
    // strict `<` comparison implements the documented tie-break.
    for (orientation, candidate) in
        [(Orientation::Unswapped, theta), (Orientation::Swapped, &swapped)]
    {
        for (env_index, gamma) in train.iter().enumerate() {
            let distance = candidate.distance(&gamma.flatten(), weights);
            match &mut best {
                None => {
                    best = Some(VoronoiAssignment { env_index, orientation, distance, tied: false })
                }
                Some(b) => {
                    if distance < b.distance {
                        *b = VoronoiAssignment { env_index, orientation, distance, tied: false };
                    } else if distance == b.distance {
                        b.tied = true;
                    }
                }
            }
        }
    }
    best.unwrap()
}

/// True when the nearest point to `gamma_test` among the training vectors
/// and their swaps is an unswapped training vector (ties go to unswapped).
pub fn in_voronoi_cell(gamma_test: &EnvParams, train: &[EnvParams]) -> bool {
    in_voronoi_cell_weighted(gamma_test, train, None)
}

pub fn in_voronoi_cell_weighted(
    gamma_test: &EnvParams,
    train: &[EnvParams],
    weights: Option<&[f64]>,
) -> bool {
    assert!(!train.is_empty(), "training set must be non-empty");
    let theta = gamma_test.flatten();
    let mut best_unswapped = f64::INFINITY;
    let mut best_swapped = f64::INFINITY;
    for gamma in train {
        let flat = gamma.flatten();
        best_unswapped = best_unswapped.min(theta.distance(&flat, weights));
        best_swapped = best_swapped.min(theta.distance(&flat.block_swap(), weights));
    }
    best_unswapped <= best_swapped
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn env_1d(p1: f64, mu0: f64, mu1: f64, var0: f64, var1: f64) -> EnvParams {
        EnvParams::new(
            [1.0 - p1, p1],
            [DVector::from_vec(vec![mu0]), DVector::from_vec(vec![mu1])],
            [
                DMatrix::from_vec(1, 1, vec![var0]),
                DMatrix::from_vec(1, 1, vec![var1]),
            ],
            false,
        )
        .unwrap()
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        let id = DMatrix::identity(1, 1);
        assert!(EnvParams::new(
            [0.6, 0.6],
            [DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0])],
            [id.clone(), id.clone()],
            false,
        )
        .is_err());
        // Non-SPD covariance.
        let zero = DMatrix::from_vec(1, 1, vec![0.0]);
        assert!(matches!(
            EnvParams::new(
                [0.5, 0.5],
                [DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0])],
                [zero, id.clone()],
                false,
            ),
            Err(Error::NotSpd { class: 0, .. })
        ));
        // Diagonal-only with an off-diagonal entry.
        let full = DMatrix::from_vec(2, 2, vec![1.0, 0.3, 0.3, 1.0]);
        assert!(EnvParams::new(
            [0.5, 0.5],
            [DVector::zeros(2), DVector::zeros(2)],
            [full.clone(), full],
            true,
        )
        .is_err());
    }

    #[test]
    fn degenerate_prior_yields_single_label() {
        // p1 exactly 0 is rejected (both priors must be positive), so the
        // nearly-degenerate prior checks the Bernoulli wiring instead.
        let env = env_1d(1e-15, 0.0, 100.0, 1.0, 1.0);
        let data = env.generate(EnvId(0), 1000, 3);
        assert!(data.iter().all(|ex| ex.y == 0));
    }

    #[test]
    fn generated_moments_match_parameters() {
        // mu0 = 0, unit covariance, d = 2: CLT bounds on mean and covariance.
        let env = EnvParams::isotropic(0.5, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let n = 100_000;
        let data = env.generate(EnvId(0), n, 12345);
        let mut mean = [0.0f64; 2];
        for ex in &data {
            mean[0] += ex.x[0];
            mean[1] += ex.x[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        assert!(mean[0].abs() < 0.02 && mean[1].abs() < 0.02, "mean {mean:?}");
        let mut cov = [[0.0f64; 2]; 2];
        for ex in &data {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += (ex.x[i] - mean[i]) * (ex.x[j] - mean[j]);
                }
            }
        }
        for (i, row) in cov.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v /= n as f64;
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((*v - target).abs() < 0.03, "cov[{i}][{j}] = {v}");
            }
        }
    }

    #[test]
    fn empirical_class_frequency_tracks_prior() {
        let env = env_1d(0.3, -1.0, 1.0, 1.0, 1.0);
        let n = 50_000;
        let data = env.generate(EnvId(0), n, 9);
        let freq = data.iter().filter(|ex| ex.y == 1).count() as f64 / n as f64;
        let bound = 3.0 * (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((freq - 0.3).abs() < bound, "freq {freq}, bound {bound}");
    }

    #[test]
    fn generation_is_deterministic() {
        let env = env_1d(0.5, -1.0, 1.0, 1.0, 2.0);
        assert_eq!(env.generate(EnvId(7), 50, 11), env.generate(EnvId(7), 50, 11));
    }

    #[test]
    fn swap_is_an_involution_and_fixes_symmetric_envs() {
        let env = env_1d(0.3, -1.0, 2.0, 1.0, 4.0);
        assert_eq!(env.swap().swap(), env);
        let sym = env_1d(0.5, 1.5, 1.5, 2.0, 2.0);
        assert_eq!(sym.swap(), sym);
        // Means (-1, +1) swap to (+1, -1).
        let swapped = env_1d(0.5, -1.0, 1.0, 1.0, 1.0).swap();
        assert_eq!(swapped.mean(0)[0], 1.0);
        assert_eq!(swapped.mean(1)[0], -1.0);
    }

    #[test]
    fn flatten_layout_matches_field_order() {
        // d = 1, p = (.5, .5), means (0, 1), variances (1, 1).
        let env = env_1d(0.5, 0.0, 1.0, 1.0, 1.0);
        assert_eq!(env.flatten().flat, vec![0.5, 0.0, 1.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn flatten_round_trips_bit_exactly() {
        let mut rng = crate::rng::stream(4);
        for _ in 0..100 {
            let d = 1 + (rng.random::<u32>() % 3) as usize;
            let env = random_env(&mut rng, d);
            let back = EnvParams::unflatten(&env.flatten(), env.diagonal_only()).unwrap();
            assert_eq!(back.flatten().flat, env.flatten().flat);
            assert_eq!(back, env);
        }
    }

    #[test]
    fn flatten_of_swap_is_block_swap_of_flatten() {
        let mut rng = crate::rng::stream(5);
        for _ in 0..50 {
            let env = random_env(&mut rng, 2);
            assert_eq!(env.swap().flatten().flat, env.flatten().block_swap().flat);
        }
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        assert!(matches!(
            ParamVector::from_flat(vec![0.0; 5], 1),
            Err(Error::FlatLengthMismatch { got: 5, expected: 6 })
        ));
    }

    #[test]
    fn voronoi_assign_exact_matches() {
        let a = env_1d(0.5, -1.0, 1.0, 1.0, 1.0);
        let b = env_1d(0.5, -3.0, 3.0, 1.0, 1.0);
        let train = vec![a.clone(), b.clone()];
        let hit = voronoi_assign(&a.flatten(), &train);
        assert_eq!(hit.env_index, 0);
        assert_eq!(hit.orientation, Orientation::Unswapped);
        assert_abs_diff_eq!(hit.distance, 0.0);
        let hit = voronoi_assign(&a.swap().flatten(), &train);
        assert_eq!(hit.env_index, 0);
        assert_eq!(hit.orientation, Orientation::Swapped);
        assert_abs_diff_eq!(hit.distance, 0.0);
    }

    #[test]
    fn voronoi_assign_matches_brute_force_distance_table() {
        // 1-d layout: env A means (-1, +1), env B means (-3, +3), equal
        // priors and unit variances; theta has means (-1.2, +1.1).
        let a = env_1d(0.5, -1.0, 1.0, 1.0, 1.0);
        let b = env_1d(0.5, -3.0, 3.0, 1.0, 1.0);
        let theta = env_1d(0.5, -1.2, 1.1, 1.0, 1.0).flatten();
        let train = vec![a.clone(), b.clone()];

        // Brute-force table over the four (env, orientation) pairs.
        let mut table = Vec::new();
        for (i, gamma) in train.iter().enumerate() {
            table.push(((i, Orientation::Unswapped), theta.distance(&gamma.flatten(), None)));
            table.push((
                (i, Orientation::Swapped),
                theta.block_swap().distance(&gamma.flatten(), None),
            ));
        }
        let ((best_env, best_orient), best_dist) = table
            .iter()
            .cloned()
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        assert_eq!(best_env, 0);
        assert_eq!(best_orient, Orientation::Unswapped);

        let hit = voronoi_assign(&theta, &train);
        assert_eq!(hit.env_index, best_env);
        assert_eq!(hit.orientation, best_orient);
        assert_abs_diff_eq!(hit.distance, best_dist, epsilon = 1e-15);
    }

    #[test]
    fn orientation_flips_under_theta_swap_with_equal_distance() {
        let mut rng = crate::rng::stream(6);
        for _ in 0..50 {
            let train: Vec<EnvParams> = (0..3).map(|_| random_env(&mut rng, 1)).collect();
            let theta = random_env(&mut rng, 1).flatten();
            let direct = voronoi_assign(&theta, &train);
            let swapped = voronoi_assign(&theta.block_swap(), &train);
            assert_abs_diff_eq!(direct.distance, swapped.distance, epsilon = 1e-12);
            if !direct.tied {
                assert_eq!(direct.env_index, swapped.env_index);
                assert_ne!(direct.orientation, swapped.orientation);
            }
        }
    }

    #[test]
    fn appending_swap_duplicates_preserves_distance_value() {
        let mut rng = crate::rng::stream(13);
        for _ in 0..50 {
            let train: Vec<EnvParams> = (0..2).map(|_| random_env(&mut rng, 2)).collect();
            let theta = random_env(&mut rng, 2).flatten();
            let base = voronoi_assign(&theta, &train);
            let mut extended = train.clone();
            extended.extend(train.iter().map(EnvParams::swap));
            let ext = voronoi_assign(&theta, &extended);
            assert_abs_diff_eq!(base.distance, ext.distance, epsilon = 1e-12);
        }
    }

    #[test]
    fn in_cell_membership() {
        let a = env_1d(0.5, -1.0, 1.0, 1.0, 1.0);
        let b = env_1d(0.5, -3.0, 3.0, 1.0, 1.0);
        let train = vec![a.clone(), b.clone()];
        // A training vector is in its own cell.
        assert!(in_voronoi_cell(&a, &train));
        // A swap of a training vector with everything else far away is not.
        assert!(!in_voronoi_cell(&a.swap(), &train));
        // Means (-2.1, +1.9): nearest by the brute-force table below.
        let test = env_1d(0.5, -2.1, 1.9, 1.0, 1.0);
        let theta = test.flatten();
        let mut nearest_unswapped = f64::INFINITY;
        let mut nearest_swapped = f64::INFINITY;
        for gamma in &train {
            nearest_unswapped = nearest_unswapped.min(theta.distance(&gamma.flatten(), None));
            nearest_swapped =
                nearest_swapped.min(theta.distance(&gamma.flatten().block_swap(), None));
        }
        assert_eq!(in_voronoi_cell(&test, &train), nearest_unswapped <= nearest_swapped);
        // And membership agrees with the orientation voronoi_assign reports.
        let assignment = voronoi_assign(&theta, &train);
        assert_eq!(
            in_voronoi_cell(&test, &train),
            assignment.orientation == Orientation::Unswapped
        );
    }

    #[test]
    fn in_cell_is_invariant_under_global_swap() {
        let mut rng = crate::rng::stream(21);
        for _ in 0..50 {
            let train: Vec<EnvParams> = (0..3).map(|_| random_env(&mut rng, 1)).collect();
            let test = random_env(&mut rng, 1);
            let swapped_train: Vec<EnvParams> = train.iter().map(EnvParams::swap).collect();
            assert_eq!(
                in_voronoi_cell(&test, &train),
                in_voronoi_cell(&test.swap(), &swapped_train)
            );
        }
    }

    #[test]
    fn serde_round_trip() {
        let env = env_1d(0.25, -1.0, 2.0, 1.5, 0.5);
        let json = serde_json::to_string(&env).unwrap();
        let back: EnvParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, env);
    }

    fn random_env<R: Rng>(rng: &mut R, d: usize) -> EnvParams {
        let p1 = 0.2 + 0.6 * rng.random::<f64>();
        let mu = |rng: &mut R| DVector::from_fn(d, |_, _| 4.0 * rng.random::<f64>() - 2.0);
        let cov = |rng: &mut R| {
            // A = random, Sigma = A Aᵀ + 0.5 I keeps eigenvalues comfortably
            // above the floor.
            let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
            &a * a.transpose() + DMatrix::identity(d, d) * 0.5
        };
        EnvParams::new(
            [1.0 - p1, p1],
            [mu(rng), mu(rng)],
            [cov(rng), cov(rng)],
            false,
        )
        .unwrap()
    }
}
