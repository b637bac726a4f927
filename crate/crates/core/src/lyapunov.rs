//! Truncated piecewise-quadratic Lyapunov functions.
//!
//! `V^t(x) = Σ_{ℓ=0}^{t} β^{−2ℓ} max_{|σ|=ℓ} ‖A_σ x‖₂²` and `p(x) = √V^T(x)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jsr::{word_count, PRODUCT_CAP};
use crate::linalg::{image_norm_sq, spectral_norm, spectral_radius};
use crate::mdp::StochasticPolicy;
use crate::switching::{hull_combination, hull_weights, ModeFamily};
use crate::{Mat, Vect};

/// Relative slack for the drift inequalities.
pub const DRIFT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LyapunovCert {
    pub beta_eps: f64,
    pub depth: usize,
    /// `products[ℓ]` holds `A_σ` for every word of length ℓ in
    /// lexicographic order; `products[0] = [I]`.
    pub products: Vec<Vec<Mat>>,
    /// `n_ℓ = max_{|σ|=ℓ} ‖A_σ‖₂` for `ℓ = 0..=max(T,1)`.
    pub max_norms: Vec<f64>,
    /// `max_{|σ|=ℓ} ρ(A_σ)^{1/ℓ}` over `1 ≤ ℓ ≤ max(T,1)`.
    pub lower: f64,
    /// `Σ_{ℓ≤T} β^{−2ℓ} n_ℓ²`.
    pub c_eps_truncated: f64,
    /// Geometric tail bound for words longer than T; infinite when the
    /// growth estimate is not below β.
    pub tail: f64,
    /// `c_eps_truncated + tail`.
    pub c_eps_upper: f64,
    /// Growth rate used by the tail, `max(n_T^{1/T}, lower)`.
    pub growth: f64,
    /// Prefactor with `n_ℓ ≤ C₀ growth^ℓ` for `ℓ ≤ T`.
    pub c0: f64,
    /// The constant contains a tail term rather than an exact sum.
    pub estimate: bool,
    /// `β < 1` and some `max_{|σ|=k}‖A_σ‖₂^{1/k} < β` for `1 ≤ k ≤ max(T,1)`.
    pub valid: bool,
    /// Per-mode `ρ(A_i)`.
    pub mode_radii: Vec<f64>,
}

/// Serializable view of a certificate without the product cache.
#[derive(Debug, Clone, Serialize)]
pub struct CertSummary {
    pub beta_eps: f64,
    pub depth: usize,
    pub max_norms: Vec<f64>,
    pub lower: f64,
    pub c_eps_truncated: f64,
    pub tail: Option<f64>,
    pub c_eps_upper: Option<f64>,
    pub growth: f64,
    pub c0: f64,
    pub estimate: bool,
    pub valid: bool,
}

impl LyapunovCert {
    pub fn summary(&self) -> CertSummary {
        let finite = |v: f64| v.is_finite().then_some(v);
        CertSummary {
            beta_eps: self.beta_eps,
            depth: self.depth,
            max_norms: self.max_norms.clone(),
            lower: self.lower,
            c_eps_truncated: self.c_eps_truncated,
            tail: finite(self.tail),
            c_eps_upper: finite(self.c_eps_upper),
            growth: self.growth,
            c0: self.c0,
            estimate: self.estimate,
            valid: self.valid,
        }
    }

    pub fn dim(&self) -> usize {
        self.products[0][0].nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.products.get(1).map_or(0, |p| p.len())
    }

    /// Largest usable sandwich constant: `c_eps_upper` when finite, else the
    /// truncated sum.
    pub fn sandwich_constant(&self) -> f64 {
        if self.c_eps_upper.is_finite() {
            self.c_eps_upper
        } else {
            self.c_eps_truncated
        }
    }
}

/// Builds the certificate, refusing when `β` does not exceed the largest
/// single-mode spectral radius.
pub fn build_cert(family: &ModeFamily, beta_eps: f64, depth: usize) -> Result<LyapunovCert> {
    let cert = build_cert_unchecked(family, beta_eps, depth)?;
    let lower1 = cert.mode_radii.iter().copied().fold(0.0, f64::max);
    if beta_eps <= lower1 {
        return Err(Error::CertificateRefused(format!(
            "beta_eps {beta_eps} does not exceed the depth-1 lower bound {lower1}"
        )));
    }
    Ok(cert)
}

/// Same construction without the refusal; used to exhibit failing drift.
pub fn build_cert_unchecked(
    family: &ModeFamily,
    beta_eps: f64,
    depth: usize,
) -> Result<LyapunovCert> {
    if !(beta_eps > 0.0 && beta_eps.is_finite()) {
        return Err(Error::Invalid(format!("beta_eps {beta_eps} must be positive")));
    }
    if !(beta_eps < 1.0) {
        return Err(Error::Invalid(format!("beta_eps {beta_eps} outside (0,1)")));
    }
    let n = family.len();
    let levels = depth.max(1);
    let count = word_count(n, levels);
    if count > PRODUCT_CAP {
        return Err(Error::CapExceeded {
            count,
            cap: PRODUCT_CAP,
        });
    }
    let m = family.dim();
    let mut products: Vec<Vec<Mat>> = vec![vec![Mat::identity(m, m)]];
    let mut max_norms = vec![1.0];
    let mut lower: f64 = 0.0;
    let mut best_upper = f64::INFINITY;
    for l in 1..=levels {
        // Word σ·i (σ applied first) has product A_i A_σ.
        let prev = &products[l - 1];
        let mut level = Vec::with_capacity(prev.len() * n);
        for a in prev {
            for mode in &family.modes {
                level.push(mode * a);
            }
        }
        let mut nmax: f64 = 0.0;
        for a in &level {
            nmax = nmax.max(spectral_norm(a));
            lower = lower.max(spectral_radius(a).powf(1.0 / l as f64));
        }
        best_upper = best_upper.min(nmax.powf(1.0 / l as f64));
        max_norms.push(nmax);
        products.push(level);
    }
    let mode_radii = family.modes.iter().map(spectral_radius).collect();

    let b2 = beta_eps * beta_eps;
    let c_eps_truncated: f64 = (0..=depth)
        .map(|l| max_norms[l] * max_norms[l] / b2.powi(l as i32))
        .sum();
    let growth = if depth == 0 {
        max_norms[1].max(lower)
    } else {
        max_norms[depth].powf(1.0 / depth as f64).max(lower)
    };
    let c0 = if growth > 0.0 {
        (0..=depth)
            .map(|l| max_norms[l] / growth.powi(l as i32))
            .fold(1.0, f64::max)
    } else {
        1.0
    };
    let q = (growth / beta_eps).powi(2);
    let tail = if growth == 0.0 {
        0.0
    } else if q < 1.0 {
        c0 * c0 * q.powi(depth as i32 + 1) / (1.0 - q)
    } else {
        f64::INFINITY
    };
    products.truncate(depth + 1);
    Ok(LyapunovCert {
        beta_eps,
        depth,
        products,
        max_norms,
        lower,
        c_eps_truncated,
        tail,
        c_eps_upper: c_eps_truncated + tail,
        growth,
        c0,
        estimate: tail != 0.0,
        valid: best_upper < beta_eps,
        mode_radii,
    })
}

/// `V^t(x)` for `t ≤ T`.
pub fn lyap_value_at(cert: &LyapunovCert, x: &[f64], t: usize) -> f64 {
    assert!(t <= cert.depth, "depth {t} exceeds certificate depth {}", cert.depth);
    let b2 = cert.beta_eps * cert.beta_eps;
    let mut weight = 1.0;
    let mut total = 0.0;
    for level in &cert.products[..=t] {
        let best = level
            .iter()
            .map(|a| image_norm_sq(a, x))
            .fold(0.0, f64::max);
        total += weight * best;
        weight /= b2;
    }
    total
}

/// `(V^T(x), p(x))`.
pub fn lyap_value(cert: &LyapunovCert, x: &[f64]) -> (f64, f64) {
    let v = lyap_value_at(cert, x, cert.depth);
    (v, v.sqrt())
}

/// `p_{ε,t}(x) = √V^t(x)`.
pub fn lyap_norm_at(cert: &LyapunovCert, x: &[f64], t: usize) -> f64 {
    lyap_value_at(cert, x, t).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftCheck {
    /// `V^{T−1}(A_i x) ≤ β²(V^T(x) − ‖x‖²)`.
    CrossDepth,
    /// `V^t(x) ≤ V^{t+1}(x)`.
    Monotone,
    /// `V^T(λx) = λ²V^T(x)`.
    Homogeneity,
    /// `‖x‖² ≤ V^T(x)`.
    Sandwich,
    /// `ρ(A_i) < β`, necessary for any norm contracting mode i by β.
    ModeRadius,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftViolation {
    pub check: DriftCheck,
    pub mode: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct DriftReport {
    pub violations: Vec<DriftViolation>,
    /// Smallest `rhs − lhs` over the cross-depth checks.
    pub min_slack: f64,
}

impl DriftReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

const HOMOGENEITY_SCALE: f64 = 2.5;

pub fn check_drift(cert: &LyapunovCert, x: &[f64]) -> DriftReport {
    assert!(cert.depth >= 1, "drift checks need depth >= 1");
    let t = cert.depth;
    let b2 = cert.beta_eps * cert.beta_eps;
    let vt = lyap_value_at(cert, x, t);
    let x2: f64 = x.iter().map(|v| v * v).sum();
    let tol = DRIFT_TOL * vt;
    let mut report = DriftReport {
        violations: Vec::new(),
        min_slack: f64::INFINITY,
    };
    let rhs = b2 * (vt - x2);
    for (i, a) in cert.products[1].iter().enumerate() {
        let ax = a * Vect::from_column_slice(x);
        let lhs = lyap_value_at(cert, ax.as_slice(), t - 1);
        report.min_slack = report.min_slack.min(rhs - lhs);
        if lhs > rhs + tol {
            report.violations.push(DriftViolation {
                check: DriftCheck::CrossDepth,
                mode: Some(i),
                lhs,
                rhs,
            });
        }
    }
    let mut prev = x2;
    for s in 1..=t {
        let cur = lyap_value_at(cert, x, s);
        if prev > cur {
            report.violations.push(DriftViolation {
                check: DriftCheck::Monotone,
                mode: None,
                lhs: prev,
                rhs: cur,
            });
        }
        prev = cur;
    }
    let scaled: Vec<f64> = x.iter().map(|v| v * HOMOGENEITY_SCALE).collect();
    let vs = lyap_value_at(cert, &scaled, t);
    let expect = HOMOGENEITY_SCALE * HOMOGENEITY_SCALE * vt;
    if (vs - expect).abs() > 1e-12 * expect {
        report.violations.push(DriftViolation {
            check: DriftCheck::Homogeneity,
            mode: None,
            lhs: vs,
            rhs: expect,
        });
    }
    if x2 > vt {
        report.violations.push(DriftViolation {
            check: DriftCheck::Sandwich,
            mode: None,
            lhs: x2,
            rhs: vt,
        });
    }
    for (i, &r) in cert.mode_radii.iter().enumerate() {
        if !(r < cert.beta_eps) {
            report.violations.push(DriftViolation {
                check: DriftCheck::ModeRadius,
                mode: Some(i),
                lhs: r,
                rhs: cert.beta_eps,
            });
        }
    }
    report
}

/// Violations kept in a sampled report; the count is always exact.
const MAX_REPORTED: usize = 64;

/// Drift checks over pseudo-random points drawn uniformly from `[−1,1]^m`.
#[derive(Debug, Clone, Serialize)]
pub struct SampledDrift {
    pub points: usize,
    pub seed: u64,
    /// Number of points with at least one violation.
    pub failing_points: usize,
    pub violations: Vec<DriftViolation>,
    pub min_slack: f64,
}

pub fn check_drift_sampled(cert: &LyapunovCert, points: usize, seed: u64) -> SampledDrift {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cert.dim();
    let mut out = SampledDrift {
        points,
        seed,
        failing_points: 0,
        violations: Vec::new(),
        min_slack: f64::INFINITY,
    };
    for _ in 0..points {
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = check_drift(cert, &x);
        out.min_slack = out.min_slack.min(r.min_slack);
        if !r.ok() {
            out.failing_points += 1;
            let room = MAX_REPORTED.saturating_sub(out.violations.len());
            out.violations.extend(r.violations.into_iter().take(room));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct StochasticDrift {
    /// `V^{T−1}(A_μ x)`.
    pub lhs: f64,
    /// `β²(V^T(x) − ‖x‖²)`.
    pub rhs: f64,
    pub holds: bool,
}

/// Cross-depth drift for a stochastic-policy mode, with `A_μ` formed from the
/// certificate's single-mode products and the hull weights of μ.
pub fn check_stochastic_mode_drift(
    cert: &LyapunovCert,
    mu: &StochasticPolicy,
    x: &[f64],
) -> Result<StochasticDrift> {
    assert!(cert.depth >= 1, "drift checks need depth >= 1");
    let weights = hull_weights(mu)?;
    if weights.len() != cert.n_modes() {
        return Err(Error::Dimension(format!(
            "policy induces {} hull weights, certificate has {} modes",
            weights.len(),
            cert.n_modes()
        )));
    }
    let fam = ModeFamily::custom(cert.products[1].clone());
    let a_mu = hull_combination(&fam, &weights);
    let ax = a_mu * Vect::from_column_slice(x);
    let t = cert.depth;
    let lhs = lyap_value_at(cert, ax.as_slice(), t - 1);
    let vt = lyap_value_at(cert, x, t);
    let x2: f64 = x.iter().map(|v| v * v).sum();
    let rhs = cert.beta_eps * cert.beta_eps * (vt - x2);
    Ok(StochasticDrift {
        lhs,
        rhs,
        holds: lhs <= rhs + DRIFT_TOL * vt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    /// Uniform angles (m = 2) or a latitude-longitude grid (m = 3).
    Grid,
    /// Pseudo-random unit directions for other dimensions.
    Radial,
}

#[derive(Debug, Clone, Serialize)]
pub struct NormBallMesh {
    pub kind: MeshKind,
    pub points: Vec<Vec<f64>>,
}

/// Seed for the radial direction sampler.
pub const RADIAL_SEED: u64 = 0x5eed;

fn unit_directions(m: usize, resolution: usize, radial: bool) -> Result<(MeshKind, Vec<Vec<f64>>)> {
    use std::f64::consts::PI;
    match m {
        2 => Ok((
            MeshKind::Grid,
            (0..resolution)
                .map(|j| {
                    let t = 2.0 * PI * j as f64 / resolution as f64;
                    vec![t.cos(), t.sin()]
                })
                .collect(),
        )),
        3 => {
            let mut out = Vec::with_capacity(resolution * resolution);
            for i in 0..resolution {
                let polar = PI * (i as f64 + 0.5) / resolution as f64;
                for j in 0..resolution {
                    let az = 2.0 * PI * j as f64 / resolution as f64;
                    out.push(vec![polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos()]);
                }
            }
            Ok((MeshKind::Grid, out))
        }
        _ if !radial => Err(Error::Invalid(format!(
            "mesh output supports m = 2 or 3 (got m = {m}); request radial samples instead"
        ))),
        1 => Ok((MeshKind::Radial, vec![vec![1.0], vec![-1.0]])),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(RADIAL_SEED);
            let count = resolution * resolution;
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n2: f64 = v.iter().map(|x| x * x).sum();
                if n2 > 1e-4 && n2 <= 1.0 {
                    let n = n2.sqrt();
                    out.push(v.into_iter().map(|x| x / n).collect());
                }
            }
            Ok((MeshKind::Radial, out))
        }
    }
}

/// Points on the unit sphere of `p_{ε,T}`: each direction `u` becomes `u/p(u)`.
///
/// For `m ∉ {2, 3}` the call fails unless `radial` is set, in which case
/// `resolution²` pseudo-random directions are used instead of a grid.
pub fn normball_mesh(cert: &LyapunovCert, resolution: usize, radial: bool) -> Result<NormBallMesh> {
    if resolution == 0 {
        return Err(Error::Invalid("mesh resolution must be positive".into()));
    }
    let (kind, dirs) = unit_directions(cert.dim(), resolution, radial)?;
    let points = dirs
        .into_iter()
        .map(|u| {
            let (_, p) = lyap_value(cert, &u);
            u.into_iter().map(|v| v / p).collect()
        })
        .collect();
    Ok(NormBallMesh { kind, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::switching::build_family;

    fn scalars(v: &[f64]) -> ModeFamily {
        ModeFamily::custom(v.iter().map(|&x| Mat::from_element(1, 1, x)).collect())
    }

    #[test]
    fn single_mode_constant_is_geometric() {
        let fam = scalars(&[0.5]);
        let cert = build_cert(&fam, 0.6, 5).unwrap();
        let r: f64 = (0.5_f64 / 0.6).powi(2);
        let exact = 1.0 / (1.0 - r);
        assert!((cert.c_eps_upper - exact).abs() < 1e-12 * exact);
        let trunc: f64 = (0..=5).map(|l| r.powi(l)).sum();
        assert!((cert.c_eps_truncated - trunc).abs() < 1e-12);
        assert!(cert.valid);
    }

    #[test]
    fn depth_zero_is_euclidean() {
        let p = presets::problem("example-3d").unwrap();
        let fam = build_family(&p, p.alpha(), 0.0).unwrap();
        let cert = build_cert(&fam, 0.975, 0).unwrap();
        let x = [0.3, -0.4, 1.2];
        let (v, _) = lyap_value(&cert, &x);
        assert!((v - (0.09 + 0.16 + 1.44)).abs() < 1e-15);
        assert_eq!(cert.c_eps_truncated, 1.0);
        assert!(cert.tail > 0.0 && cert.tail.is_finite());
    }

    #[test]
    fn refuses_beta_below_mode_radius() {
        let fam = scalars(&[0.397, -1.304]);
        assert!(matches!(
            build_cert(&fam, 0.9, 2),
            Err(Error::CertificateRefused(_))
        ));
        assert!(build_cert(&scalars(&[0.5]), 1.2, 2).is_err());
    }

    #[test]
    fn example_3d_certificate() {
        let p = presets::problem("example-3d").unwrap();
        let fam = build_family(&p, p.alpha(), 0.0).unwrap();
        let cert = build_cert(&fam, 0.975, 4).unwrap();
        assert!(cert.valid);
        assert!(cert.c_eps_upper.is_finite() && cert.c_eps_upper >= 1.0);
        assert_eq!(cert.products[4].len(), 4096);
        let r = check_drift(&cert, &[1.0, 0.0, 0.0]);
        assert!(r.ok(), "{:?}", r.violations);
        assert!(check_drift(&cert, &[0.0, 0.0, 0.0]).ok());
    }

    #[test]
    fn unstable_mode_is_reported() {
        let fam = scalars(&[1.62]);
        let cert = build_cert_unchecked(&fam, 0.9, 3).unwrap();
        assert!(!cert.valid);
        assert!(cert.c_eps_upper.is_infinite());
        let r = check_drift(&cert, &[1.0]);
        assert!(r.violations.iter().any(|v| v.check == DriftCheck::ModeRadius));
    }

    #[test]
    fn zero_mode_mesh_is_unit_sphere() {
        let fam = ModeFamily::custom(vec![Mat::zeros(2, 2)]);
        let cert = build_cert(&fam, 0.5, 2).unwrap();
        let mesh = normball_mesh(&cert, 16, false).unwrap();
        for pt in &mesh.points {
            let r: f64 = pt.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mesh_needs_radial_flag_above_three_dims() {
        let fam = ModeFamily::custom(vec![Mat::identity(4, 4) * 0.5]);
        let cert = build_cert(&fam, 0.8, 1).unwrap();
        assert!(normball_mesh(&cert, 4, false).is_err());
        let mesh = normball_mesh(&cert, 4, true).unwrap();
        assert_eq!(mesh.kind, MeshKind::Radial);
        assert_eq!(mesh.points.len(), 16);
    }
}
