//! Paired two-sided t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;

use crate::error::{arg_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_difference: f64,
    /// The differences have zero variance: `t` is 0 (all equal to zero) or
    /// infinite and `p` is 1 or 0 accordingly.
    pub degenerate: bool,
}

impl TTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

/// Paired t-test of `a - b` with `n - 1` degrees of freedom.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(arg_err!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(arg_err!("a paired t-test needs at least 2 pairs, got {n}"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite score in paired t-test".into()));
    }
    let mean = d.iter().mean();
    let sd = d.iter().std_dev();
    let df = n - 1;
    if sd == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest {
            t,
            p,
            df,
            mean_difference: mean,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(TTest {
        t,
        p: (2.0 * dist.sf(t.abs())).min(1.0),
        df,
        mean_difference: mean,
        degenerate: false,
    })
}
