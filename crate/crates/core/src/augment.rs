//! Center-of-mass augmentation for point sets in `R^{N×3}` and the
//! importance-sampling corrections that remove the augmentation noise.
//!
//! A centered configuration `x°` is shifted by `t ~ N(0, σ_t² I₃)` (after an
//! optional uniform rotation) so that training data has full-dimensional
//! support. At importance-sampling time the proposal is corrected either by
//! dividing out the COM Gaussian (`corrected_log_proposal_new`) or by the
//! older radial χ₃ factor (`corrected_log_proposal_old`).

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::flow::FlowModel;
use crate::targets::LogDensity;
use crate::{Error, Result, Scalar};

/// Tolerance on the COM norm of an input declared centered.
pub const CENTERED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub sigma_t: f64,
    pub apply_rotation: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sigma_t: 0.1,
            apply_rotation: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t > 0.0 && self.sigma_t.is_finite()) {
            return Err(Error::Config("sigma_t must be positive".into()));
        }
        Ok(())
    }
}

/// Column means of an `N × 3` point set.
pub fn center_of_mass<T: Scalar>(x: ArrayView2<T>) -> [T; 3] {
    let n = T::from_usize(x.nrows());
    let mut c = [T::zero(); 3];
    for r in x.rows() {
        for j in 0..3 {
            c[j] += r[j];
        }
    }
    c.map(|v| v / n)
}

/// Subtracts the center of mass; returns the centered set and the COM.
pub fn center<T: Scalar>(x: ArrayView2<T>) -> Result<(Array2<T>, [T; 3])> {
    check_points(x)?;
    let com = center_of_mass(x);
    let mut out = x.to_owned();
    for mut r in out.rows_mut() {
        for j in 0..3 {
            r[j] -= com[j];
        }
    }
    Ok((out, com))
}

fn check_points<T: Scalar>(x: ArrayView2<T>) -> Result<()> {
    if x.ncols() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: x.ncols(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::Config("point set needs at least one point".into()));
    }
    Ok(())
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix<T: Scalar>(q: [T; 4]) -> [[T; 3]; 3] {
    let norm = q.iter().map(|&v| v * v).sum::<T>().sqrt();
    let [w, x, y, z] = q.map(|v| v / norm);
    let two = T::lit(2.0);
    let one = T::one();
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Uniformly distributed rotation from a normalized Gaussian quaternion.
pub fn random_rotation<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> [[T; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    quaternion_to_matrix(q.map(T::lit))
}

/// Rotates a centered set (optional), then shifts every row by `t`.
pub fn augment<T: Scalar>(x_centered: ArrayView2<T>, t: [T; 3], rotation: Option<&[[T; 3]; 3]>) -> Result<Array2<T>> {
    check_points(x_centered)?;
    let com = center_of_mass(x_centered);
    let norm = com.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm.as_f64() > CENTERED_TOL {
        return Err(Error::Contract(format!(
            "augment expects a centered point set, COM norm is {norm}"
        )));
    }
    let mut out = x_centered.to_owned();
    for mut r in out.rows_mut() {
        let v = [r[0], r[1], r[2]];
        let v = match rotation {
            Some(m) => std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2]),
            None => v,
        };
        for j in 0..3 {
            r[j] = v[j] + t[j];
        }
    }
    Ok(out)
}

/// Draws `t ~ N(0, σ_t² I₃)` and (if configured) a uniform rotation, and
/// augments `x_centered` with them. Returns the augmented set and `t`.
pub fn sample_augmentation<T: Scalar, R: Rng + ?Sized>(
    x_centered: ArrayView2<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Array2<T>, [T; 3])> {
    cfg.validate()?;
    let rot = cfg.apply_rotation.then(|| random_rotation::<T, R>(rng));
    let t: [T; 3] = std::array::from_fn(|_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(cfg.sigma_t * z)
    });
    Ok((augment(x_centered, t, rot.as_ref())?, t))
}

/// `log N(c; 0, σ² I₃)`.
pub fn log_com_density<T: Scalar>(com: [T; 3], sigma_t: T) -> T {
    let r2: T = com.iter().map(|&v| v * v).sum();
    let s2 = sigma_t * sigma_t;
    -T::lit(1.5) * (T::TAU() * s2).ln() - r2 / (T::lit(2.0) * s2)
}

/// Proposal corrected by dividing out the COM Gaussian:
/// `log q - log N(com; 0, σ_t² I₃)`.
pub fn corrected_log_proposal_new<T: Scalar>(log_q: T, com: [T; 3], sigma_t: T) -> T {
    log_q - log_com_density(com, sigma_t)
}

/// The older radial correction
/// `log q + ‖c‖²/(2σ_t²) - log[‖c‖² / (√2 σ_t³ Γ(3/2))]`, singular at `c = 0`.
pub fn corrected_log_proposal_old<T: Scalar>(log_q: T, com: [T; 3], sigma_t: T) -> Result<T> {
    let r2: T = com.iter().map(|&v| v * v).sum();
    if r2 == T::zero() {
        return Err(Error::Singular(
            "χ₃ correction is undefined at zero center of mass (log of zero)".into(),
        ));
    }
    let log_gamma = T::lit(ln_gamma(1.5));
    let denom = T::SQRT_2().ln() + T::lit(3.0) * sigma_t.ln() + log_gamma;
    Ok(log_q + r2 / (T::lit(2.0) * sigma_t * sigma_t) - (r2.ln() - denom))
}

/// Augmented log weight
/// `log p̃_{X₀}(x°) + log N(t; 0, σ_t² I₃) - log q(augment(x°, t))`
/// with the proposal given as a function of the flattened `3N` coordinates.
pub fn augmented_f_theta_with<T: Scalar, Q>(
    x_centered: ArrayView2<T>,
    t: [T; 3],
    log_q: Q,
    target_centered: &dyn LogDensity<T>,
    sigma_t: T,
) -> Result<T>
where
    Q: FnOnce(&[T]) -> Result<T>,
{
    let x = augment(x_centered, t, None)?;
    let flat: Vec<T> = x.iter().copied().collect();
    let centered: Vec<T> = x_centered.iter().copied().collect();
    Ok(target_centered.log_density(&centered) + log_com_density(t, sigma_t) - log_q(&flat)?)
}

/// [`augmented_f_theta_with`] for a flow over the flattened coordinates.
pub fn augmented_f_theta<T: Scalar>(
    x_centered: ArrayView2<T>,
    t: [T; 3],
    model: &FlowModel<T>,
    target_centered: &dyn LogDensity<T>,
    sigma_t: T,
) -> Result<T> {
    augmented_f_theta_with(x_centered, t, |x| model.log_density(x), target_centered, sigma_t)
}

/// Isotropic Gaussian on the centered subspace of `N × 3` point sets,
/// normalized with respect to that `3(N-1)`-dimensional subspace. Inputs are
/// flattened row-major and assumed centered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenteredGaussian<T> {
    pub n_points: usize,
    pub scale: T,
}

impl<T: Scalar> CenteredGaussian<T> {
    pub fn new(n_points: usize, scale: T) -> Result<Self> {
        if n_points < 2 || !(scale > T::zero()) {
            return Err(Error::Config("centered Gaussian needs N >= 2 and scale > 0".into()));
        }
        Ok(Self { n_points, scale })
    }

    /// Exact draws: isotropic Gaussian points, then centered.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array2<T> {
        let x = Array2::from_shape_fn((self.n_points, 3), |_| {
            let z: f64 = StandardNormal.sample(rng);
            self.scale * T::lit(z)
        });
        center(x.view()).expect("valid shape").0
    }
}

impl<T: Scalar> LogDensity<T> for CenteredGaussian<T> {
    fn dim(&self) -> usize {
        3 * self.n_points
    }

    fn log_density(&self, x: &[T]) -> T {
        let r2: T = x.iter().map(|&v| v * v).sum();
        let s2 = self.scale * self.scale;
        let k = T::from_usize(3 * (self.n_points - 1));
        -r2 / (T::lit(2.0) * s2) - T::lit(0.5) * k * (T::TAU() * s2).ln()
    }

    fn log_density_grad(&self, x: &[T], grad: &mut [T]) -> T {
        let s2 = self.scale * self.scale;
        for (g, &v) in grad.iter_mut().zip(x) {
            *g = -v / s2;
        }
        self.log_density(x)
    }
}

/// Exact log-density of augmented configurations when the centered part is
/// `CenteredGaussian`: the centered density times the COM Gaussian, with the
/// Jacobian `N^{-3/2}` of `(x°, t) ↦ x° + 1tᵀ`.
pub fn exact_augmented_log_density<T: Scalar>(x: ArrayView2<T>, base: &CenteredGaussian<T>, sigma_t: T) -> Result<T> {
    let (xc, com) = center(x)?;
    let flat: Vec<T> = xc.iter().copied().collect();
    Ok(base.log_density(&flat) + log_com_density(com, sigma_t) - T::lit(1.5) * T::from_usize(base.n_points).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_examples() {
        let x = array![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let (c, com) = center(x.view()).unwrap();
        assert_eq!(com, [1.0, 0.0, 0.0]);
        assert_eq!(c, array![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let (c2, com2) = center(c.view()).unwrap();
        assert_eq!(c2, c);
        assert_eq!(com2, [0.0; 3]);
        let shifted = x.mapv(|v| v) + &array![[1.0, -2.0, 0.5]];
        let (c3, com3) = center(shifted.view()).unwrap();
        assert_eq!(c3, c);
        assert_eq!(com3, [2.0, -2.0, 0.5]);
    }

    #[test]
    fn augment_contract() {
        let x = array![[-1.0, 0.5, 0.0], [1.0, -0.5, 0.0]];
        assert_eq!(augment(x.view(), [0.0; 3], None).unwrap(), x);
        let y = augment(x.view(), [0.3, -0.1, 2.0], None).unwrap();
        let com = center_of_mass(y.view());
        assert_abs_diff_eq!(com[2], 2.0, epsilon = 1e-15);
        let bad = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert!(matches!(augment(bad.view(), [0.0; 3], None), Err(Error::Contract(_))));
    }

    #[test]
    fn rotation_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = CenteredGaussian::new(5, 1.0).unwrap();
        let x = g.sample(&mut rng);
        let r = random_rotation::<f64, _>(&mut rng);
        let y = augment(x.view(), [0.0; 3], Some(&r)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d = |a: &Array2<f64>| (0..3).map(|k| (a[[i, k]] - a[[j, k]]).powi(2)).sum::<f64>().sqrt();
                assert_abs_diff_eq!(d(&x), d(&y), epsilon = 1e-12);
            }
        }
        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        assert_abs_diff_eq!(g.log_density(&flat(&x)), g.log_density(&flat(&y)), epsilon = 1e-9);
    }

    #[test]
    fn new_correction_examples() {
        let s = 0.7;
        assert_abs_diff_eq!(
            corrected_log_proposal_new(-3.0, [0.0; 3], s),
            -3.0 + 1.5 * (std::f64::consts::TAU * s * s).ln(),
            epsilon = 1e-14
        );
        let c = [0.1, -0.2, 0.3];
        assert_abs_diff_eq!(
            corrected_log_proposal_new(2.5, c, s) - corrected_log_proposal_new(0.0, c, s),
            2.5,
            epsilon = 1e-14
        );
    }

    #[test]
    fn old_correction_term_by_term() {
        // ‖c‖ = σ = 1
        let v = corrected_log_proposal_old(-1.0, [1.0, 0.0, 0.0], 1.0).unwrap();
        let gamma_3_2 = std::f64::consts::PI.sqrt() / 2.0;
        let expected = -1.0 + 0.5 - (1.0 / (2f64.sqrt() * gamma_3_2)).ln();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-14);
        assert!(matches!(
            corrected_log_proposal_old(0.0, [0.0; 3], 1.0),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn augmented_f_matches_manual_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = CenteredGaussian::new(5, 0.8).unwrap();
        let xc = g.sample(&mut rng);
        let t = [0.05, -0.02, 0.11];
        let lq = |x: &[f64]| Ok(-0.3 * x.iter().map(|v| v * v).sum::<f64>());
        let f = augmented_f_theta_with(xc.view(), t, lq, &g, 0.1).unwrap();
        let flat_c: Vec<f64> = xc.iter().copied().collect();
        let x = augment(xc.view(), t, None).unwrap();
        let flat: Vec<f64> = x.iter().copied().collect();
        let manual = g.log_density(&flat_c) + log_com_density(t, 0.1) - lq(&flat).unwrap();
        assert_abs_diff_eq!(f, manual, epsilon = 1e-12);
    }

    fn oracle_ess(n: usize, old: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = CenteredGaussian::new(5, 1.0).unwrap();
        let cfg = AugmentConfig::default();
        let mut lw = Vec::with_capacity(n);
        for _ in 0..n {
            let xc = g.sample(&mut rng);
            let (x, t) = sample_augmentation(xc.view(), &cfg, &mut rng).unwrap();
            let lq = exact_augmented_log_density(x.view(), &g, cfg.sigma_t).unwrap();
            let lqc = if old {
                corrected_log_proposal_old(lq, t, cfg.sigma_t).unwrap()
            } else {
                corrected_log_proposal_new(lq, t, cfg.sigma_t)
            };
            let flat: Vec<f64> = xc.iter().copied().collect();
            lw.push(g.log_density(&flat) - lqc);
        }
        let ws = crate::impsampling::WeightedSamples::new(Array2::zeros((n, 1)), lw).unwrap();
        crate::impsampling::ess(&ws)
    }

    #[test]
    fn gaussian_oracle_corrections() {
        let new = oracle_ess(2000, false);
        let old = oracle_ess(2000, true);
        assert_abs_diff_eq!(new, 1.0, epsilon = 1e-6);
        assert!(old < new, "{old} vs {new}");
    }

    #[test]
    fn com_push_forward_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xc = CenteredGaussian::new(5, 1.0).unwrap().sample(&mut rng);
        let cfg = AugmentConfig {
            sigma_t: 0.1,
            apply_rotation: true,
        };
        let n = 100_000;
        let mut acc = [0.0f64; 3];
        for _ in 0..n {
            let (x, _) = sample_augmentation(xc.view(), &cfg, &mut rng).unwrap();
            let c = center_of_mass(x.view());
            for j in 0..3 {
                acc[j] += c[j] * c[j];
            }
        }
        for v in acc {
            assert!((v / n as f64 / 0.01 - 1.0).abs() < 0.02);
        }
    }
}
