//! Per-coordinate prediction metrics.
//!
//! Metrics whose denominator is the spread of `y` (R², NRMSE, FI) are
//! undefined for a constant series and return `None` in that case.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Dimension {
            what: "prediction length",
            expected: y.len(),
            actual: yhat.len(),
        });
    }
    if y.len() < 2 {
        return Err(Error::Data(format!("metrics need at least 2 samples, got {}", y.len())));
    }
    Ok(())
}

fn mean(y: &[f64]) -> f64 {
    y.iter().sum::<f64>() / y.len() as f64
}

/// `Σ (y − ȳ)²`, or `None` when `y` is constant up to rounding.
fn spread(y: &[f64]) -> Option<f64> {
    let m = mean(y);
    let ss: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let tol = 1e-12 * m.abs().max(1.0);
    (ss / y.len() as f64 > tol * tol).then_some(ss)
}

fn sse(y: &[f64], yhat: &[f64]) -> f64 {
    y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum()
}

pub fn r2(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check(y, yhat)?;
    Ok(spread(y).map(|ss| 1.0 - sse(y, yhat) / ss))
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok((sse(y, yhat) / y.len() as f64).sqrt())
}

/// RMSE over the population standard deviation of `y`, evaluated as
/// `sqrt(SSE / SS_tot)`.
pub fn nrmse(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check(y, yhat)?;
    Ok(spread(y).map(|ss| (sse(y, yhat) / ss).sqrt()))
}

/// `100 · (1 − ‖y − ŷ‖₂ / ‖y − ȳ‖₂)`: 100 for a perfect fit, 0 for the mean
/// predictor.
pub fn fit_index(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check(y, yhat)?;
    Ok(spread(y).map(|ss| 100.0 * (1.0 - (sse(y, yhat) / ss).sqrt())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FiBand {
    #[serde(rename = ">=90")]
    Excellent,
    #[serde(rename = "80-89.99")]
    Good,
    #[serde(rename = "60-79.99")]
    Fair,
    #[serde(rename = "30-59.99")]
    Poor,
    #[serde(rename = "<30")]
    Bad,
}

impl FiBand {
    pub fn of(fi: f64) -> FiBand {
        if fi >= 90.0 {
            FiBand::Excellent
        } else if fi >= 80.0 {
            FiBand::Good
        } else if fi >= 60.0 {
            FiBand::Fair
        } else if fi >= 30.0 {
            FiBand::Poor
        } else {
            FiBand::Bad
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FiBand::Excellent => ">=90",
            FiBand::Good => "80-89.99",
            FiBand::Fair => "60-79.99",
            FiBand::Poor => "30-59.99",
            FiBand::Bad => "<30",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordMetrics {
    pub r2: Option<f64>,
    pub rmse: f64,
    pub nrmse: Option<f64>,
    pub fi: Option<f64>,
}

impl CoordMetrics {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self> {
        Ok(CoordMetrics {
            r2: r2(y, yhat)?,
            rmse: rmse(y, yhat)?,
            nrmse: nrmse(y, yhat)?,
            fi: fit_index(y, yhat)?,
        })
    }

    pub fn band(&self) -> Option<FiBand> {
        self.fi.map(FiBand::of)
    }

    pub fn is_sentinel(&self) -> bool {
        self.r2.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const Y: [f64; 3] = [1.0, 2.0, 3.0];
    const YHAT: [f64; 3] = [1.0, 2.0, 4.0];

    #[test]
    fn hand_computed_fixture() {
        assert_eq!(r2(&Y, &YHAT).unwrap(), Some(0.5));
        assert_eq!(rmse(&Y, &YHAT).unwrap(), (1.0f64 / 3.0).sqrt());
        assert_eq!(nrmse(&Y, &YHAT).unwrap(), Some(0.5f64.sqrt()));
        let fi = fit_index(&Y, &YHAT).unwrap().unwrap();
        assert!((fi - 100.0 * (1.0 - 1.0 / 2.0f64.sqrt())).abs() < 1e-12);
        assert!((fi - 29.29).abs() < 5e-3);
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let y = [0.3, -1.0, 2.5, 0.7];
        assert_eq!(r2(&y, &y).unwrap(), Some(1.0));
        assert_eq!(fit_index(&y, &y).unwrap(), Some(100.0));
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let m = [mean(&y); 4];
        assert!(r2(&y, &m).unwrap().unwrap().abs() < 1e-15);
        assert!(fit_index(&y, &m).unwrap().unwrap().abs() < 1e-12);
        let shifted: Vec<f64> = y.iter().map(|v| v - 0.25).collect();
        assert!((rmse(&y, &shifted).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_series_is_a_sentinel() {
        let y = [0.4; 5];
        let c = CoordMetrics::compute(&y, &[0.5; 5]).unwrap();
        assert!(c.is_sentinel() && c.nrmse.is_none() && c.fi.is_none());
        assert!((c.rmse - 0.1).abs() < 1e-12);
    }

    #[test]
    fn malformed_inputs() {
        assert!(r2(&[1.0, 2.0], &[1.0]).is_err());
        assert!(rmse(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn band_boundaries() {
        assert_eq!(FiBand::of(90.0), FiBand::Excellent);
        assert_eq!(FiBand::of(89.99), FiBand::Good);
        assert_eq!(FiBand::of(80.0), FiBand::Good);
        assert_eq!(FiBand::of(79.99), FiBand::Fair);
        assert_eq!(FiBand::of(60.0), FiBand::Fair);
        assert_eq!(FiBand::of(59.99), FiBand::Poor);
        assert_eq!(FiBand::of(30.0), FiBand::Poor);
        assert_eq!(FiBand::of(29.99), FiBand::Bad);
        assert_eq!(FiBand::of(-250.0), FiBand::Bad);
    }

    /// Independent textbook implementations, written as explicit loops.
    fn brute(y: &[f64], yhat: &[f64]) -> (f64, f64, f64, f64) {
        let n = y.len() as f64;
        let mut ybar = 0.0;
        for v in y {
            ybar += v / n;
        }
        let (mut res, mut tot) = (0.0, 0.0);
        for i in 0..y.len() {
            res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
            tot += (y[i] - ybar) * (y[i] - ybar);
        }
        let rmse = (res / n).sqrt();
        let sigma = (tot / n).sqrt();
        (1.0 - res / tot, rmse, rmse / sigma, 100.0 * (1.0 - res.sqrt() / tot.sqrt()))
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn match_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let n = rng.gen_range(2..200);
            let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let yhat: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-0.5..0.5) * scale).collect();
            let (br2, brmse, bnrmse, bfi) = brute(&y, &yhat);
            assert!(rel(r2(&y, &yhat).unwrap().unwrap(), br2) < 1e-9);
            assert!(rel(rmse(&y, &yhat).unwrap(), brmse) < 1e-9);
            assert!(rel(nrmse(&y, &yhat).unwrap().unwrap(), bnrmse) < 1e-9);
            assert!(rel(fit_index(&y, &yhat).unwrap().unwrap(), bfi) < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn affine_invariance(seed in 0u64..10_000, a in 0.01f64..100.0, b in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let yhat: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
            let ty: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            let tyhat: Vec<f64> = yhat.iter().map(|v| a * v + b).collect();
            let (r, rt) = (r2(&y, &yhat).unwrap().unwrap(), r2(&ty, &tyhat).unwrap().unwrap());
            prop_assert!((r - rt).abs() < 1e-9);
            let (f, ft) = (fit_index(&y, &yhat).unwrap().unwrap(), fit_index(&ty, &tyhat).unwrap().unwrap());
            prop_assert!((f - ft).abs() < 1e-7);
            prop_assert!(rel(rmse(&ty, &tyhat).unwrap(), a * rmse(&y, &yhat).unwrap()) < 1e-9);
        }

        #[test]
        fn r2_and_fi_are_sign_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let plus: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a + b).collect();
            let minus: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a - b).collect();
            prop_assert!((r2(&y, &plus).unwrap().unwrap() - r2(&y, &minus).unwrap().unwrap()).abs() < 1e-12);
        }
    }
}
