//! Decision boundaries and analytic envelopes for the modulation coefficient.
//!
//! For a sample at positive angle `theta`, the decision boundary against a
//! negative class is the negative cosine `c` at which the assembled target
//! logit equals the assembled negative logit: `T(theta) = N(c)`. Solving for
//! `c` per method (and per easy/hard branch where the method distinguishes
//! them) gives the curves usually shown in the target-logit comparison plots.

use crate::losses::{modulation_coefficient, LossConfig, LossError, Method};
use std::f64::consts::PI;

/// Which negative-branch form to solve against. Methods that never reweight
/// hard negatives give the same boundary for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Easy,
    Hard,
}

fn check_theta(theta: f64) -> Result<(), LossError> {
    if !theta.is_finite() || !(0.0..=PI).contains(&theta) {
        return Err(LossError::DomainError(format!(
            "positive angle {theta} outside [0, pi]"
        )));
    }
    Ok(())
}

/// The target logit `T(theta)` for the method, using `t` for the adaptive
/// coefficient where the method needs one.
fn target_logit(
    config: &LossConfig,
    t: f64,
    branch: Branch,
    theta: f64,
) -> Result<f64, LossError> {
    let arc = |margin: f64| (theta + margin).clamp(0.0, PI).cos();
    Ok(match config.method {
        Method::Softmax => theta.cos(),
        Method::CosFace => theta.cos() - config.m,
        Method::SphereFace => (config.m * theta).clamp(0.0, PI).cos(),
        Method::ArcFace | Method::MvArcSoftmax | Method::CurricularFace | Method::AdaSinN => {
            arc(config.m)
        }
        // The sine-modulated margin only engages on hard samples; the easy
        // branch keeps the plain additive margin.
        Method::AdaSin | Method::AdaSinT => match branch {
            Branch::Easy => arc(config.m),
            Branch::Hard => {
                let phi = modulation_coefficient(t, theta, config.h)?;
                arc(phi * config.m)
            }
        },
    })
}

/// Solve `T(theta) = N(c)` for the negative cosine `c`.
///
/// The easy branch always has `N(c) = c`, so the boundary is the target logit
/// itself. Hard branches invert the method's reweighting; CurricularFace's
/// quadratic keeps the larger root (the one continuous with the easy branch)
/// and reports [`LossError::NoRealRoot`] when no root lands in `[-1, 1]`,
/// as do the modulated methods when the division blows up.
pub fn decision_boundary(
    config: &LossConfig,
    t: f64,
    branch: Branch,
    theta: f64,
) -> Result<f64, LossError> {
    config.validate()?;
    check_theta(theta)?;
    let target = target_logit(config, t, branch, theta)?;

    if branch == Branch::Easy || !config.method.reweights_hard_negatives() {
        return Ok(target);
    }

    let boundary = match config.method {
        // (t_fixed + 1) c + t_fixed = T
        Method::MvArcSoftmax => (target - config.t_fixed) / (config.t_fixed + 1.0),
        // (t + c) c = T  =>  c^2 + t c - T = 0, larger root.
        Method::CurricularFace => {
            let disc = t * t + 4.0 * target;
            if disc < 0.0 {
                return Err(LossError::NoRealRoot(format!(
                    "discriminant {disc:.6} < 0 for t={t}, target {target:.6}"
                )));
            }
            (-t + disc.sqrt()) / 2.0
        }
        // phi c = T
        Method::AdaSin | Method::AdaSinN => {
            let phi = modulation_coefficient(t, theta, config.h)?;
            target / phi
        }
        _ => unreachable!("only hard-reweighting methods reach here"),
    };

    if !boundary.is_finite() || !(-1.0..=1.0).contains(&boundary) {
        return Err(LossError::NoRealRoot(format!(
            "boundary cosine {boundary:.6} outside [-1, 1]"
        )));
    }
    Ok(boundary)
}

/// Per-iteration envelope for the modulation coefficient.
///
/// `theta_history[j]` is iteration j's conservative positive angle: the
/// smaller of pi/2 and the batch's minimum positive angle. Every positive
/// cosine in batch j then lies in `[-1, cos(theta_history[j])]` and every
/// positive angle is at least `theta_history[k-1]`, which yields, for the
/// EMA `t_k = sum_j alpha (1-alpha)^{k-j} r_j` and any sample in batch k:
///
/// ```text
/// lower = -alpha * sum_j (1-alpha)^{k-j}                          + h * sin(theta_k / 2)
/// upper =  alpha * sum_j (1-alpha)^{k-j} * cos(theta_history[j])  + h
/// ```
///
/// Both bounds hold for every per-sample coefficient of iteration k.
pub fn phi_bounds(theta_history: &[f64], alpha: f64, h: f64) -> Result<(f64, f64), LossError> {
    if theta_history.is_empty() {
        return Err(LossError::EmptyHistory);
    }
    if !(alpha.is_finite() && alpha > 0.0 && alpha < 1.0) {
        return Err(LossError::InvalidConfig(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if !(h.is_finite() && h >= 0.0) {
        return Err(LossError::InvalidConfig(format!(
            "h must be finite and non-negative, got {h}"
        )));
    }
    const TOL: f64 = 1e-9;
    for &theta in theta_history {
        if !theta.is_finite() || theta <= 0.0 || theta > PI / 2.0 + TOL {
            return Err(LossError::DomainError(format!(
                "conservative angle {theta} outside (0, pi/2]"
            )));
        }
    }

    let k = theta_history.len();
    let mut weight_sum = 0.0;
    let mut upper_sum = 0.0;
    for (j, &theta) in theta_history.iter().enumerate() {
        // j is zero-based; exponent k - (j + 1).
        let w = alpha * (1.0 - alpha).powi((k - 1 - j) as i32);
        weight_sum += w;
        upper_sum += w * theta.min(PI / 2.0).cos();
    }
    let theta_last = theta_history[k - 1].min(PI / 2.0);
    let lower = -weight_sum + h * (theta_last / 2.0).sin();
    let upper = upper_sum + h;
    Ok((lower, upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{update_t, AdaptiveState};

    fn config(method: Method) -> LossConfig {
        LossConfig { method, ..LossConfig::default() }
    }

    #[test]
    fn arcface_boundary_is_the_shifted_cosine() {
        let b = decision_boundary(&config(Method::ArcFace), 0.0, Branch::Easy, 0.4).unwrap();
        assert!((b - 0.6216099682706644).abs() < 1e-15); // cos(0.9)
        // Hard branch identical: no hard reweighting.
        let hard = decision_boundary(&config(Method::ArcFace), 0.0, Branch::Hard, 0.4).unwrap();
        assert_eq!(b, hard);
    }

    #[test]
    fn softmax_cosface_sphereface_closed_forms() {
        let theta = 0.7f64;
        let softmax =
            decision_boundary(&config(Method::Softmax), 0.0, Branch::Easy, theta).unwrap();
        assert!((softmax - theta.cos()).abs() < 1e-15);
        let cosface =
            decision_boundary(&config(Method::CosFace), 0.0, Branch::Easy, theta).unwrap();
        assert!((cosface - (theta.cos() - 0.5)).abs() < 1e-15);
        let sphere_cfg = LossConfig { m: 2.0, ..config(Method::SphereFace) };
        let sphere = decision_boundary(&sphere_cfg, 0.0, Branch::Easy, theta).unwrap();
        assert!((sphere - (2.0 * theta).cos()).abs() < 1e-15);
    }

    /// Substituting the solved boundary back into the negative branch must
    /// reproduce the target logit.
    #[test]
    fn hard_boundaries_satisfy_their_equations() {
        let theta = 0.9f64;
        let t = 0.35;

        let mv_cfg = config(Method::MvArcSoftmax);
        let c = decision_boundary(&mv_cfg, t, Branch::Hard, theta).unwrap();
        let lhs = (mv_cfg.t_fixed + 1.0) * c + mv_cfg.t_fixed;
        assert!((lhs - (theta + mv_cfg.m).cos()).abs() < 1e-12);

        let cur_cfg = config(Method::CurricularFace);
        let c = decision_boundary(&cur_cfg, t, Branch::Hard, theta).unwrap();
        assert!(((t + c) * c - (theta + cur_cfg.m).cos()).abs() < 1e-12);

        let ada_cfg = config(Method::AdaSin);
        let c = decision_boundary(&ada_cfg, t, Branch::Hard, theta).unwrap();
        let phi = modulation_coefficient(t, theta, ada_cfg.h).unwrap();
        assert!((phi * c - (theta + phi * ada_cfg.m).cos()).abs() < 1e-12);

        let adan_cfg = config(Method::AdaSinN);
        let c = decision_boundary(&adan_cfg, t, Branch::Hard, theta).unwrap();
        assert!((phi * c - (theta + adan_cfg.m).cos()).abs() < 1e-12);

        // AdaSinT modulates the margin but not the negatives.
        let adat_cfg = config(Method::AdaSinT);
        let c = decision_boundary(&adat_cfg, t, Branch::Hard, theta).unwrap();
        assert!((c - (theta + phi * adat_cfg.m).cos()).abs() < 1e-12);
    }

    /// Easy samples keep the plain margin, so the easy-branch boundary of
    /// the modulated methods coincides with the additive-margin one.
    #[test]
    fn modulated_margin_only_engages_on_the_hard_branch() {
        let theta = 0.8;
        let t = 0.4;
        let arc = decision_boundary(&config(Method::ArcFace), t, Branch::Easy, theta).unwrap();
        for method in [Method::AdaSin, Method::AdaSinT, Method::AdaSinN] {
            let easy = decision_boundary(&config(method), t, Branch::Easy, theta).unwrap();
            assert_eq!(easy, arc, "{method} easy branch");
            let hard = decision_boundary(&config(method), t, Branch::Hard, theta).unwrap();
            assert_ne!(hard, arc, "{method} hard branch");
        }
    }

    #[test]
    fn curricular_reports_missing_roots() {
        // Deep target angle: cos(theta + m) near -1, discriminant negative.
        let cfg = config(Method::CurricularFace);
        assert!(matches!(
            decision_boundary(&cfg, 0.1, Branch::Hard, 2.7),
            Err(LossError::NoRealRoot(_))
        ));
        // Root exists but exceeds 1.
        assert!(matches!(
            decision_boundary(&LossConfig { m: 0.0, ..cfg }, -0.5, Branch::Hard, 0.0),
            Err(LossError::NoRealRoot(_))
        ));
    }

    #[test]
    fn boundary_rejects_bad_angles() {
        let cfg = config(Method::ArcFace);
        assert!(matches!(
            decision_boundary(&cfg, 0.0, Branch::Easy, -0.2),
            Err(LossError::DomainError(_))
        ));
        assert!(matches!(
            decision_boundary(&cfg, 0.0, Branch::Easy, f64::NAN),
            Err(LossError::DomainError(_))
        ));
    }

    #[test]
    fn phi_bounds_first_iteration_frozen_values() {
        let (lower, upper) = phi_bounds(&[PI / 2.0], 0.99, 0.85).unwrap();
        assert!((lower - (-0.38895923599143467)).abs() < 1e-15);
        assert!((upper - 0.8500000000000001).abs() < 1e-15);
        // h = 0 collapses the sine terms.
        let (lower0, upper0) = phi_bounds(&[PI / 2.0], 0.99, 0.0).unwrap();
        assert!((lower0 + 0.99).abs() < 1e-15);
        assert!(upper0.abs() < 1e-15);
    }

    #[test]
    fn phi_bounds_validates_inputs() {
        assert!(matches!(phi_bounds(&[], 0.99, 0.85), Err(LossError::EmptyHistory)));
        assert!(matches!(
            phi_bounds(&[0.5], 1.5, 0.85),
            Err(LossError::InvalidConfig(_))
        ));
        assert!(matches!(
            phi_bounds(&[0.0], 0.99, 0.85),
            Err(LossError::DomainError(_))
        ));
        assert!(matches!(
            phi_bounds(&[2.0], 0.99, 0.85),
            Err(LossError::DomainError(_))
        ));
    }

    /// The envelope must contain every per-sample coefficient produced by
    /// running the EMA over simulated batches, at every iteration.
    #[test]
    fn phi_bounds_contain_simulated_coefficients()
    {
        let alpha = 0.99;
        let h = 0.85;
        // Deterministic pseudo-random angles in (0.05, pi - 0.05).
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut state = AdaptiveState::new();
        let mut history = Vec::new();
        for _ in 0..40 {
            let angles: Vec<f64> =
                (0..16).map(|_| 0.05 + next() * (PI - 0.1)).collect();
            let cosines: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
            let theta_c = angles.iter().cloned().fold(f64::INFINITY, f64::min).min(PI / 2.0);
            history.push(theta_c);
            state = update_t(&state, &cosines, alpha).unwrap();
            let (lower, upper) = phi_bounds(&history, alpha, h).unwrap();
            for &theta in &angles {
                let phi = modulation_coefficient(state.t, theta, h).unwrap();
                assert!(
                    phi >= lower - 1e-12 && phi <= upper + 1e-12,
                    "iteration {}: phi {phi} outside [{lower}, {upper}]",
                    state.k
                );
            }
        }
    }
}
