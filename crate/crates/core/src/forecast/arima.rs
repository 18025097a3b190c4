//! Univariate ARIMA(p, d, q) fitted by Hannan–Rissanen two-stage least
//! squares.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted ratio of the smallest to the largest singular value
/// of a regression design matrix.
const CONDITION_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub p: usize,
    pub d: usize,
    pub q: usize,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub intercept: f64,
    pub sigma2: f64,
}

impl ArimaModel {
    pub fn new(d: usize, ar: Vec<f64>, ma: Vec<f64>, intercept: f64, sigma2: f64) -> Result<Self> {
        let finite = ar.iter().chain(&ma).chain([&intercept, &sigma2]).all(|v| v.is_finite());
        if !finite || sigma2 < 0.0 {
            return Err(Error::InvalidConfig("ARIMA coefficients must be finite, variance >= 0".into()));
        }
        Ok(Self {
            p: ar.len(),
            d,
            q: ma.len(),
            ar,
            ma,
            intercept,
            sigma2,
        })
    }

    /// One-step prediction of the differenced series at `t` from its past
    /// and past innovations.
    fn predict_at(&self, y: &[f64], e: &[f64], t: usize) -> f64 {
        let mut v = self.intercept;
        for (i, phi) in self.ar.iter().enumerate() {
            v += phi * y[t - 1 - i];
        }
        for (j, theta) in self.ma.iter().enumerate() {
            if t > j {
                v += theta * e[t - 1 - j];
            }
        }
        v
    }
}

pub fn difference(x: &[f64], d: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for _ in 0..d {
        y = y.windows(2).map(|w| w[1] - w[0]).collect();
    }
    y
}

/// Ordinary least squares via SVD. Fails on rank-deficient designs.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min / max < CONDITION_FLOOR {
        return Err(Error::Singular(format!(
            "design matrix {}x{} has condition ratio {:.3e}",
            x.nrows(),
            x.ncols(),
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    svd.solve(y, 0.0).map_err(|e| Error::Singular(e.to_string()))
}

/// Regresses `y[t]` on an intercept and `cols(t)` for `t` in `rows`.
fn regress(
    y: &[f64],
    rows: std::ops::Range<usize>,
    k: usize,
    cols: impl Fn(usize, &mut [f64]),
) -> Result<(DVector<f64>, Vec<f64>)> {
    let n = rows.len();
    let mut x = DMatrix::zeros(n, k + 1);
    let mut target = DVector::zeros(n);
    let mut buf = vec![0.0; k];
    for (r, t) in rows.clone().enumerate() {
        x[(r, 0)] = 1.0;
        cols(t, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            x[(r, c + 1)] = *v;
        }
        target[r] = y[t];
    }
    let beta = least_squares(&x, &target)?;
    let resid = (&target - &x * &beta).iter().copied().collect();
    Ok((beta, resid))
}

/// Reflects the MA polynomial into its invertible form, which has the same
/// autocovariances. Roots of `w^q + θ₁w^{q−1} + … + θ_q` outside the unit
/// circle move to `1/w̄`; the innovation variance scales by `∏|w|²` over the
/// moved roots. Returns the new coefficients and that factor.
pub fn invertible_ma(ma: &[f64]) -> (Vec<f64>, f64) {
    let q = ma.iter().rposition(|t| *t != 0.0).map_or(0, |i| i + 1);
    if q == 0 {
        return (ma.to_vec(), 1.0);
    }
    let mut companion = DMatrix::zeros(q, q);
    for j in 0..q {
        companion[(0, j)] = -ma[j];
    }
    for i in 1..q {
        companion[(i, i - 1)] = 1.0;
    }
    let roots = companion.complex_eigenvalues();
    if roots.iter().all(|w| w.norm() <= 1.0) {
        return (ma.to_vec(), 1.0);
    }
    let mut factor = 1.0;
    // coefficients of ∏(w − rᵢ), highest power first
    let mut poly = vec![Complex::new(1.0, 0.0)];
    for w in roots.iter() {
        let r = if w.norm() > 1.0 {
            factor *= w.norm_sqr();
            w.conj().inv()
        } else {
            *w
        };
        let mut next = poly.clone();
        next.push(Complex::new(0.0, 0.0));
        for (k, c) in poly.iter().enumerate() {
            next[k + 1] -= c * r;
        }
        poly = next;
    }
    let mut out: Vec<f64> = poly[1..].iter().map(|c| c.re).collect();
    out.resize(ma.len(), 0.0);
    (out, factor)
}

/// Fits ARIMA(p, d, q). The series is differenced `d` times; when `q > 0`
/// innovations are estimated from a long autoregression of order
/// ⌈10·log₁₀ T⌉ before regressing on `p` lags and `q` lagged innovations.
/// The MA part is returned in invertible form.
pub fn arima_fit(series: &[f64], p: usize, d: usize, q: usize) -> Result<ArimaModel> {
    let need = 10 * (p + q + d + 1);
    if series.len() < need {
        return Err(Error::Insufficient(format!(
            "ARIMA({p},{d},{q}) needs {need} observations, got {}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset("non-finite value in ARIMA input".into()));
    }
    let y = difference(series, d);
    let t_len = y.len();

    if q == 0 {
        let (beta, resid) = regress(&y, p..t_len, p, |t, buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = y[t - 1 - i];
            }
        })?;
        let sigma2 = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
        return ArimaModel::new(d, beta.iter().skip(1).copied().collect(), Vec::new(), beta[0], sigma2);
    }

    let m = ((10.0 * (t_len as f64).log10()).ceil() as usize).max(p.max(q) + 1);
    if t_len < 2 * m + p + q + 2 {
        return Err(Error::Insufficient(format!("long autoregression of order {m} needs more data")));
    }
    let (_, long_resid) = regress(&y, m..t_len, m, |t, buf| {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = y[t - 1 - i];
        }
    })?;
    // e[t] defined for t >= m
    let mut e = vec![0.0; t_len];
    e[m..].copy_from_slice(&long_resid);
    let start = m + p.max(q);
    let (beta, resid) = regress(&y, start..t_len, p + q, |t, buf| {
        for i in 0..p {
            buf[i] = y[t - 1 - i];
        }
        for j in 0..q {
            buf[p + j] = e[t - 1 - j];
        }
    })?;
    let sigma2 = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
    let ma: Vec<f64> = beta.iter().skip(1 + p).copied().collect();
    let (ma, factor) = invertible_ma(&ma);
    ArimaModel::new(d, beta.iter().skip(1).take(p).copied().collect(), ma, beta[0], sigma2 * factor)
}

/// Recursive `h`-step forecast continuing `history`. Innovations over the
/// history are reconstructed with pre-sample values taken as zero; future
/// innovations are zero. Forecasts are integrated back `d` times.
pub fn arima_forecast(model: &ArimaModel, history: &[f64], h: usize) -> Result<Vec<f64>> {
    if history.len() < model.p + model.d + 1 {
        return Err(Error::Insufficient(format!(
            "ARIMA forecast needs at least {} history values",
            model.p + model.d + 1
        )));
    }
    // last value of each differencing level, level 0 first
    let mut levels = Vec::with_capacity(model.d);
    let mut y = history.to_vec();
    for _ in 0..model.d {
        levels.push(*y.last().expect("length checked"));
        y = difference(&y, 1);
    }
    let n = y.len();
    let mut e = vec![0.0; n + h];
    y.resize(n + h, 0.0);
    for t in model.p..n {
        e[t] = y[t] - model.predict_at(&y, &e, t);
    }
    for t in n..n + h {
        y[t] = model.predict_at(&y, &e, t);
    }
    let mut out = y[n..].to_vec();
    for last in levels.into_iter().rev() {
        let mut acc = last;
        for v in out.iter_mut() {
            acc += *v;
            *v = acc;
        }
    }
    Ok(out)
}
