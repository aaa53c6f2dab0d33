//! Symmetric InfoNCE over cosine similarities with a learnable temperature.
//!
//! Given `n` matched pairs `(a_i, b_i)`, the loss averages two cross-entropy
//! terms: rows of `sim / τ` scored against their diagonal, and columns scored
//! against theirs. With this normalisation a uniform similarity matrix scores
//! exactly `ln n`, and `ln n - loss` lower-bounds the mutual information
//! between the two views.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::{Error, Result};

/// Effective temperature at initialisation.
pub const INITIAL_TEMPERATURE: f64 = 0.07;
/// Upper bound on the logit scale `1 / τ`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// `n × n` cosine similarities; row `i` is view one of pair `i`, column `j`
/// is view two of pair `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix(Array2<f64>);

impl SimMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() || values.nrows() == 0 {
            return Err(Error::Shape(format!("similarity matrix must be square and non-empty, got {:?}", values.dim())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity matrix entry".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.t().to_owned())
    }
}

/// Temperature stored as `log_scale = ln(1/τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub log_scale: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self { log_scale: (1.0 / INITIAL_TEMPERATURE).ln() }
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Self {
        Self { log_scale: -tau.ln() }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.scale()
    }
}

/// Clamp a log scale so that `exp(log_scale)` lies in `[1, MAX_LOGIT_SCALE]`.
pub fn clamp_log_scale(log_scale: f64) -> f64 {
    log_scale.clamp(0.0, MAX_LOGIT_SCALE.ln())
}

fn unit_rows(x: ArrayView2<'_, f64>, side: &'static str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(index) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm { index, side });
    }
    let unit = &x / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

pub fn cosine_sim_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<SimMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("views differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (ua, _) = unit_rows(a, "first view")?;
    let (ub, _) = unit_rows(b, "second view")?;
    let sims = ua.dot(&ub.t()).mapv(|v| v.clamp(-1.0, 1.0));
    SimMatrix::new(sims)
}

fn log_sum_exp(xs: ArrayView1<'_, f64>) -> f64 {
    let max = xs.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn pia_loss(m: &SimMatrix, t: Temperature) -> Result<f64> {
    if !t.log_scale.is_finite() {
        return Err(Error::NonFinite("temperature".into()));
    }
    let logits = m.values().mapv(|v| v * t.scale());
    let n = m.n() as f64;
    let rows: f64 = logits
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| log_sum_exp(r) - r[i])
        .sum();
    let cols: f64 = logits
        .columns()
        .into_iter()
        .enumerate()
        .map(|(j, c)| log_sum_exp(c) - c[j])
        .sum();
    // Rounding can leave a tiny negative value when the diagonal dominates.
    Ok(((rows + cols) / (2.0 * n)).max(0.0))
}

/// Loss and its gradients with respect to both views and the log scale.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub sims: SimMatrix,
    pub d_first: Array2<f64>,
    pub d_second: Array2<f64>,
    pub d_log_scale: f64,
}

pub fn pia_loss_and_grad(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, t: Temperature) -> Result<LossGrad> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("views differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (ua, na) = unit_rows(a, "first view")?;
    let (ub, nb) = unit_rows(b, "second view")?;
    let sims = ua.dot(&ub.t());
    let scale = t.scale();
    let logits = sims.mapv(|v| v * scale);
    let n = logits.nrows();
    let nf = n as f64;

    let mut row_soft = logits.clone();
    for mut r in row_soft.rows_mut() {
        let lse = log_sum_exp(r.view());
        r.mapv_inplace(|v| (v - lse).exp());
    }
    let mut col_soft = logits.clone();
    for mut c in col_soft.columns_mut() {
        let lse = log_sum_exp(c.view());
        c.mapv_inplace(|v| (v - lse).exp());
    }

    let sim_matrix = SimMatrix::new(sims.mapv(|v| v.clamp(-1.0, 1.0)))?;
    let loss = pia_loss(&sim_matrix, t)?;

    // dL/dlogits = (row_soft + col_soft - 2I) / 2n
    let mut d_logits = (&row_soft + &col_soft) / (2.0 * nf);
    for i in 0..n {
        d_logits[[i, i]] -= 1.0 / nf;
    }
    let d_log_scale = (&d_logits * &logits).sum();
    let d_sims = d_logits * scale;

    let d_ua = d_sims.dot(&ub);
    let d_ub = d_sims.t().dot(&ua);
    let d_first = unit_backward(&ua, &na, d_ua);
    let d_second = unit_backward(&ub, &nb, d_ub);

    Ok(LossGrad { loss, sims: sim_matrix, d_first, d_second, d_log_scale })
}

/// Back-propagate through `x -> x / |x|` row by row.
fn unit_backward(unit: &Array2<f64>, norms: &Array1<f64>, mut d_unit: Array2<f64>) -> Array2<f64> {
    Zip::from(d_unit.rows_mut())
        .and(unit.rows())
        .and(norms)
        .for_each(|mut g, u, &norm| {
            let radial = g.dot(&u);
            g.scaled_add(-radial, &u);
            g.mapv_inplace(|v| v / norm);
        });
    d_unit
}

/// `ln n - loss`, the InfoNCE lower bound on mutual information.
pub fn mi_lower_bound(loss: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !loss.is_finite() || loss < 0.0 {
        return Err(Error::InvalidArgument(format!("loss must be finite and non-negative, got {loss}")));
    }
    Ok((n as f64).ln() - loss)
}
