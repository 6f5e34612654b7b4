//! Closed-form CRIB expressions for special structures.
//!
//! All functions return the bound in radians² and take `‖a₁‖` rather than `‖a₁‖²`.

use nalgebra::DMatrix;

use crate::crib::{crib_from_grams, Method};
use crate::error::{CribError, Result};
use crate::tensor::GramCache;

/// Denominators `cₙ² − hₙ²c₁²` below this are treated as zero.
pub const RANK2_SINGULAR_TOL: f64 = 1e-12;

fn scale(sigma2: f64, norm_a1: f64) -> f64 {
    sigma2 / (norm_a1 * norm_a1)
}

/// Rank-one tensor: `σ²(I₁−1)/‖a₁‖²`.
pub fn crib_rank1(i1: usize, sigma2: f64, norm_a1: f64) -> f64 {
    scale(sigma2, norm_a1) * (i1 as f64 - 1.0)
}

/// Rank-two tensor described by its column correlations.
///
/// `c[0]` is the correlation of the two columns of `A₁`; `c[n]` is the inner
/// product of the unit-norm columns of `A_{n+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank2Params {
    pub i1: usize,
    pub c: Vec<f64>,
    pub sigma2: f64,
    pub norm_a1: f64,
}

impl Rank2Params {
    pub fn new(i1: usize, c: Vec<f64>) -> Self {
        Self { i1, c, sigma2: 1.0, norm_a1: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        if self.c.len() < 3 {
            return Err(CribError::InvalidArgument(format!("need at least 3 correlations, got {}", self.c.len())));
        }
        if let Some(x) = self.c.iter().find(|x| !(x.abs() <= 1.0)) {
            return Err(CribError::InvalidArgument(format!("correlation {x} outside [-1, 1]")));
        }
        if !(self.sigma2 > 0.0) || !(self.norm_a1 > 0.0) {
            return Err(CribError::InvalidArgument("sigma2 and norm_a1 must be positive".into()));
        }
        Ok(())
    }

    /// `hₙ = ∏_{2≤k≠n} c_k`, indexed from 0 (so `h[0]` is `h₁ = c₂⋯c_N`).
    pub fn h(&self) -> Vec<f64> {
        (0..self.c.len())
            .map(|n| self.c.iter().enumerate().skip(1).filter(|&(k, _)| k != n).map(|(_, &x)| x).product())
            .collect()
    }

    /// Gram matrices with these correlations; `‖a₂⁽¹⁾‖ = 1`.
    pub fn grams(&self) -> GramCache {
        let c1 = DMatrix::from_row_slice(
            2,
            2,
            &[self.norm_a1 * self.norm_a1, self.c[0] * self.norm_a1, self.c[0] * self.norm_a1, 1.0],
        );
        let mut grams = vec![c1];
        grams.extend(self.c[1..].iter().map(|&x| DMatrix::from_row_slice(2, 2, &[1.0, x, x, 1.0])));
        GramCache::from_grams(grams).expect("2x2 grams")
    }
}

/// General-N rank-two formula evaluated as written.
///
/// Errors with [`CribError::DenominatorZero`] when some `|cₙ² − hₙ²c₁²|` is
/// below [`RANK2_SINGULAR_TOL`] or the outer denominator vanishes;
/// [`crib_rank2_robust`] handles those points.
pub fn crib_rank2(p: &Rank2Params) -> Result<f64> {
    p.validate()?;
    let c = &p.c;
    // order 3 does not depend on c₁
    let c1 = if c.len() == 3 { 0.0 } else { c[0] };
    let h = p.h();
    let h1 = h[0];
    let mut y = 0.0;
    let mut z = 0.0;
    for n in 1..c.len() {
        let den = c[n] * c[n] - h[n] * h[n] * c1 * c1;
        if den.abs() < RANK2_SINGULAR_TOL {
            return Err(CribError::DenominatorZero);
        }
        y += h[n] * h[n] * (1.0 - c[n] * c[n]) / den;
        z += (1.0 - c[n] * c[n]) / den;
    }
    y *= -c1;
    let h12 = h1 * h1;
    if h12 >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let outer = (1.0 - c1 * y - h12 * (z + 1.0)).powi(2) - h12 * (y + c1 * z).powi(2);
    let num = (1.0 - c1 * c1) * h12 * (y * y + z - h12 * z * (z + 1.0));
    if outer == 0.0 {
        if num == 0.0 {
            return Ok(scale(p.sigma2, p.norm_a1) / (1.0 - h12) * (p.i1 as f64 - 1.0));
        }
        return Err(CribError::DenominatorZero);
    }
    Ok(scale(p.sigma2, p.norm_a1) / (1.0 - h12) * (p.i1 as f64 - 1.0 + num / outer))
}

/// [`crib_rank2`], falling back at its singular points to the dense CRIB of a
/// model with these grams, or to its ε-limit when that model is singular.
pub fn crib_rank2_robust(p: &Rank2Params) -> Result<f64> {
    match crib_rank2(p) {
        Err(CribError::DenominatorZero) => {
            let grams = p.grams();
            let exact = crib_from_grams(&grams, p.i1, None, p.sigma2, Method::Oracle)?.crib_linear;
            if exact.is_finite() {
                return Ok(exact);
            }
            Ok(crib_from_grams(&grams, p.i1, None, p.sigma2, Method::EpsilonLimit)?.crib_linear)
        }
        other => other,
    }
}

/// Order-4 rank-two CRIB at `|c₁| = 1`, choosing the branch by which of
/// `|c₂|, |c₃|, |c₄|` equals one. Two or more unit correlations give `+∞`.
///
/// Each branch is the limit taken with the collinear mode first and `c₁ → ±1` second.
pub fn crib_rank2_n4_colinear(p: &Rank2Params) -> Result<f64> {
    p.validate()?;
    if p.c.len() != 4 {
        return Err(CribError::InvalidArgument(format!("order must be 4, got {}", p.c.len())));
    }
    if p.c[0].abs() != 1.0 {
        return Err(CribError::InvalidArgument(format!("|c1| must be 1, got {}", p.c[0])));
    }
    let (c2, c3, c4) = (p.c[1], p.c[2], p.c[3]);
    let h1 = c2 * c3 * c4;
    let base = scale(p.sigma2, p.norm_a1) / (1.0 - h1 * h1);
    let i = p.i1 as f64 - 1.0;
    let unit: Vec<bool> = [c2, c3, c4].iter().map(|x| x.abs() == 1.0).collect();
    let pair = |a: f64, b: f64| {
        let (a2, b2) = (a * a, b * b);
        (a2 + b2 - 2.0 * a2 * b2) / ((1.0 - a2) * (1.0 - b2))
    };
    Ok(match unit.iter().filter(|&&u| u).count() {
        0 => base * i,
        1 if unit[2] => base * (i + pair(c2, c3)),
        1 if unit[1] => base * (i + pair(c2, c4)),
        1 => base * (i + pair(c3, c4)),
        _ => f64::INFINITY,
    })
}

/// Two factor matrices with mutually orthogonal columns.
///
/// `gammas[k]` is `γ_{k+2} = ∏_{n≥3} (a₁⁽ⁿ⁾)ᵀ a_{k+2}⁽ⁿ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoCaseParams {
    pub i1: usize,
    pub gammas: Vec<f64>,
    pub sigma2: f64,
    pub norm_a1: f64,
}

impl OrthoCaseParams {
    pub fn new(i1: usize, gammas: Vec<f64>) -> Self {
        Self { i1, gammas, sigma2: 1.0, norm_a1: 1.0 }
    }
}

/// `(σ²/‖a₁‖²)[I₁ − 1 + Σᵣ γᵣ²/(1−γᵣ²)]`; [`CribError::GammaUnit`] carries the 1-based `r`.
pub fn crib_ortho(p: &OrthoCaseParams) -> Result<f64> {
    let mut sum = p.i1 as f64 - 1.0;
    for (k, &g) in p.gammas.iter().enumerate() {
        if g.abs() >= 1.0 {
            return Err(CribError::GammaUnit(k + 2));
        }
        sum += g * g / (1.0 - g * g);
    }
    Ok(scale(p.sigma2, p.norm_a1) * sum)
}

/// Order-4 rank-3 tensor with pairs of repeated columns in modes 2, 3 and 4:
/// `A₂ = [a, a, b]`, `A₃ = [a, b, a]`, `A₄ = [a, b, b]`, with `c₂, c₃, c₄` the
/// correlations of the distinct columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BrieParams {
    pub i1: usize,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub sigma2: f64,
    pub norm_a1: f64,
}

impl BrieParams {
    pub fn new(i1: usize, c2: f64, c3: f64, c4: f64) -> Self {
        Self { i1, c2, c3, c4, sigma2: 1.0, norm_a1: 1.0 }
    }

    /// Exact (singular) grams for modes 2–4 together with a given `C₁`.
    pub fn grams(&self, c1: DMatrix<f64>) -> Result<GramCache> {
        let (a, b, c) = (self.c2, self.c3, self.c4);
        let c2 = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, a, 1.0, 1.0, a, a, a, 1.0]);
        let c3 = DMatrix::from_row_slice(3, 3, &[1.0, b, 1.0, b, 1.0, b, 1.0, b, 1.0]);
        let c4 = DMatrix::from_row_slice(3, 3, &[1.0, c, c, c, 1.0, 1.0, c, 1.0, 1.0]);
        GramCache::from_grams(vec![c1, c2, c3, c4])
    }
}

/// Limit CRIB of the repeated-column structure; `+∞` when the leading denominator vanishes.
pub fn brie_crib(p: &BrieParams) -> Result<f64> {
    for x in [p.c2, p.c3, p.c4] {
        if !(x.abs() < 1.0) {
            return Err(CribError::InvalidArgument(format!("correlation {x} outside (-1, 1)")));
        }
    }
    let (a, b, c) = (p.c2 * p.c2, p.c3 * p.c3, p.c4 * p.c4);
    let den = 2.0 * a * b * c - a * b - a * c - b * c + 1.0;
    if den == 0.0 {
        return Ok(f64::INFINITY);
    }
    let bracket = (p.i1 as f64 - 1.0) * (1.0 - a * b) - (b * b * (a + 1.0) - 3.0 * b + 1.0) / (1.0 - b)
        - (a * a * (b + 1.0) - 3.0 * a + 1.0) / (1.0 - a)
        + (2.0 - a - b) / (1.0 - c);
    Ok(scale(p.sigma2, p.norm_a1) * bracket / den)
}

/// Printed order-3 specialization of the rank-two formula; independent of `c₁`.
pub fn crib_rank2_n3_printed(i1: usize, c2: f64, c3: f64, sigma2: f64, norm_a1: f64) -> f64 {
    let h1 = c2 * c3;
    scale(sigma2, norm_a1) / (1.0 - h1 * h1)
        * (i1 as f64 - 1.0 + c2 * c2 / (1.0 - c2 * c2) + c3 * c3 / (1.0 - c3 * c3))
}

/// Printed order-4 specialization of the rank-two formula at `c₁ = 0`.
pub fn crib_rank2_n4_c1_zero_printed(i1: usize, c2: f64, c3: f64, c4: f64, sigma2: f64, norm_a1: f64) -> f64 {
    let (a, b, c) = (c2 * c2, c3 * c3, c4 * c4);
    let h1 = c2 * c3 * c4;
    scale(sigma2, norm_a1) / (1.0 - h1 * h1)
        * (i1 as f64 - 1.0 + (a * b + a * c + b * c - 3.0 * a * b * c) / (2.0 * a * b * c - a * b - a * c - b * c + 1.0))
}

/// Printed general-N rank-two formula at `c₁ = 0`.
pub fn crib_rank2_c1_zero_printed(i1: usize, c: &[f64], sigma2: f64, norm_a1: f64) -> f64 {
    let p = Rank2Params::new(i1, c.to_vec());
    let h = p.h();
    let h12 = h[0] * h[0];
    let z: f64 = (1..c.len()).map(|n| (1.0 - c[n] * c[n]) / (c[n] * c[n])).sum();
    scale(sigma2, norm_a1) / (1.0 - h12) * (i1 as f64 - 1.0 + h12 * z / (1.0 - h12 * (z + 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn rank1_examples() {
        assert_eq!(crib_rank1(3, 1.0, 1.0), 2.0);
        assert_eq!(crib_rank1(1, 1.0, 1.0), 0.0);
        assert_eq!(crib_rank1(5, 2.0, 2.0), 2.0);
    }

    #[test]
    fn rank2_n3_matches_printed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-0.95..0.95)).collect();
            let v = crib_rank2(&Rank2Params::new(5, c.clone())).unwrap();
            assert!(rel(v, crib_rank2_n3_printed(5, c[1], c[2], 1.0, 1.0)) < 1e-10);
        }
    }

    #[test]
    fn rank2_n3_independent_of_c1() {
        let vals: Vec<f64> =
            [-0.9, 0.0, 0.9].iter().map(|&c1| crib_rank2(&Rank2Params::new(5, vec![c1, 0.6, 0.7])).unwrap()).collect();
        assert_eq!(vals[0], vals[1]);
        assert_eq!(vals[2], vals[1]);
    }

    #[test]
    fn rank2_specific_value() {
        let v = crib_rank2(&Rank2Params::new(5, vec![0.3, 0.6, 0.7])).unwrap();
        let h1: f64 = 0.42;
        let expected = (4.0 + 0.36 / 0.64 + 0.49 / 0.51) / (1.0 - h1 * h1);
        assert!(rel(v, expected) < 1e-14);
    }

    #[test]
    fn rank2_n4_c1_zero_matches_printed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
            let v = crib_rank2(&Rank2Params::new(4, vec![0.0, c[0], c[1], c[2]])).unwrap();
            assert!(rel(v, crib_rank2_n4_c1_zero_printed(4, c[0], c[1], c[2], 1.0, 1.0)) < 1e-10);
            assert!(rel(v, crib_rank2_c1_zero_printed(4, &[0.0, c[0], c[1], c[2]], 1.0, 1.0)) < 1e-10);
        }
    }

    #[test]
    fn rank2_symmetric_in_trailing_correlations() {
        let a = crib_rank2(&Rank2Params::new(4, vec![0.4, 0.2, 0.5, -0.7, 0.3])).unwrap();
        let b = crib_rank2(&Rank2Params::new(4, vec![0.4, -0.7, 0.3, 0.2, 0.5])).unwrap();
        assert!(rel(a, b) < 1e-12);
    }

    #[test]
    fn rank2_singular_denominator() {
        // c1 = c2 = 0: two orthogonal factors, gamma_2 = c3 c4
        let p = Rank2Params::new(4, vec![0.0, 0.0, 0.5, 0.5]);
        assert_eq!(crib_rank2(&p), Err(CribError::DenominatorZero));
        let robust = crib_rank2_robust(&p).unwrap();
        let ortho = crib_ortho(&OrthoCaseParams::new(4, vec![0.25])).unwrap();
        assert!(rel(robust, ortho) < 1e-10, "{robust}");
    }

    #[test]
    fn colinear_first_branch() {
        let p = Rank2Params::new(5, vec![1.0, 0.3, 0.6, 0.4]);
        let h1: f64 = 0.3 * 0.6 * 0.4;
        assert!(rel(crib_rank2_n4_colinear(&p).unwrap(), 4.0 / (1.0 - h1 * h1)) < 1e-15);
    }

    #[test]
    fn colinear_branch_with_vanishing_bracket() {
        let p = Rank2Params::new(5, vec![-1.0, 0.0, 0.0, 1.0]);
        assert_eq!(crib_rank2_n4_colinear(&p).unwrap(), 4.0);
    }

    #[test]
    fn colinear_two_unit_is_infinite() {
        let p = Rank2Params::new(5, vec![1.0, 1.0, 0.5, -1.0]);
        assert!(crib_rank2_n4_colinear(&p).unwrap().is_infinite());
        assert!(crib_rank2_n4_colinear(&Rank2Params::new(5, vec![0.5, 0.1, 0.2, 0.3])).is_err());
    }

    #[test]
    fn ortho_examples() {
        assert_eq!(crib_ortho(&OrthoCaseParams::new(4, vec![0.0, 0.0])).unwrap(), 3.0);
        assert!(rel(crib_ortho(&OrthoCaseParams::new(4, vec![0.5])).unwrap(), 10.0 / 3.0) < 1e-15);
        assert_eq!(crib_ortho(&OrthoCaseParams::new(4, vec![0.2, -1.0])), Err(CribError::GammaUnit(3)));
    }

    #[test]
    fn brie_zero_correlations() {
        let v = brie_crib(&BrieParams::new(6, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(v, 5.0);
        assert!(brie_crib(&BrieParams::new(6, 1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn brie_matches_epsilon_limit() {
        let p = BrieParams::new(4, 0.5, 0.5, 0.5);
        let c1 = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.2, 0.3, 1.0, 0.4, 0.2, 0.4, 1.0]);
        let g = p.grams(c1).unwrap();
        let lim = crib_from_grams(&g, 4, None, 1.0, Method::Auto).unwrap();
        assert!(lim.epsilon_applied);
        assert!(rel(lim.crib_linear, brie_crib(&p).unwrap()) < 1e-3);
    }
}
