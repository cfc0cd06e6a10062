//! Bias-corrected temperature scaling: `p = softmax(z / T + b)` with a
//! temperature and one free bias per class, fitted by minimizing held-out
//! negative log-likelihood. Also the expected calibration error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Label, RawScore, ScorerError};

pub const ECE_BINS: usize = 10;

const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub temperature: f64,
    pub b_neg: f64,
    pub b_pos: f64,
}

impl Default for CalibrationModel {
    fn default() -> Self {
        Self::identity()
    }
}

impl CalibrationModel {
    pub fn new(temperature: f64, b_neg: f64, b_pos: f64) -> Result<Self, ScorerError> {
        if !(temperature.is_finite() && temperature > 0.0)
            || !b_neg.is_finite()
            || !b_pos.is_finite()
        {
            return Err(ScorerError::InvalidModel(format!(
                "calibration T={temperature}, b=({b_neg}, {b_pos})"
            )));
        }
        Ok(Self {
            temperature,
            b_neg,
            b_pos,
        })
    }

    pub fn identity() -> Self {
        Self {
            temperature: 1.0,
            b_neg: 0.0,
            b_pos: 0.0,
        }
    }

    fn adjusted(&self, s: &RawScore) -> [f64; 2] {
        [
            s.z_neg / self.temperature + self.b_neg,
            s.z_pos / self.temperature + self.b_pos,
        ]
    }
}

fn softmax2(u: [f64; 2]) -> [f64; 2] {
    let m = u[0].max(u[1]);
    let e = [(u[0] - m).exp(), (u[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Calibrated `(p_neg, p_pos)`.
pub fn apply_calibration(m: &CalibrationModel, s: &RawScore) -> (f64, f64) {
    let p = softmax2(m.adjusted(s));
    (p[0], p[1])
}

fn nll_one(m: &CalibrationModel, s: &RawScore, y: Label) -> f64 {
    let u = m.adjusted(s);
    let mx = u[0].max(u[1]);
    let lse = mx + ((u[0] - mx).exp() + (u[1] - mx).exp()).ln();
    lse - u[y.index()]
}

/// Mean negative log-likelihood of the calibrated posteriors.
pub fn calibration_nll(m: &CalibrationModel, data: &[(RawScore, Label)]) -> f64 {
    data.iter().map(|(s, y)| nll_one(m, s, *y)).sum::<f64>() / data.len() as f64
}

/// Gradient of [`calibration_nll`] with respect to `(T, b_neg, b_pos)`.
pub fn calibration_nll_gradient(m: &CalibrationModel, data: &[(RawScore, Label)]) -> [f64; 3] {
    let mut g = [0.0; 3];
    let t2 = m.temperature * m.temperature;
    for (s, y) in data {
        let p = softmax2(m.adjusted(s));
        let z = s.logits();
        for k in 0..2 {
            let r = p[k] - if y.index() == k { 1.0 } else { 0.0 };
            g[0] += r * (-z[k] / t2);
            g[1 + k] += r;
        }
    }
    let n = data.len() as f64;
    g.map(|v| v / n)
}

/// Outcome of a calibration fit, including the objective after every
/// accepted optimizer step.
#[derive(Debug, Clone)]
pub struct BctsFit {
    pub model: CalibrationModel,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub objective_trace: Vec<f64>,
}

/// Fits temperature and both class biases on held-out scores.
pub fn fit_bcts(held_out: &[(RawScore, Label)]) -> Result<CalibrationModel, ScorerError> {
    fit_bcts_traced(held_out).map(|f| f.model)
}

/// Damped Newton minimization in `(1/T, b_neg, b_pos)`, where the objective is
/// convex. The biases enter only through their difference, so the Hessian is
/// singular along `(0, 1, 1)`; the damping keeps steps orthogonal to it.
pub fn fit_bcts_traced(held_out: &[(RawScore, Label)]) -> Result<BctsFit, ScorerError> {
    if held_out.is_empty() {
        return Err(ScorerError::Empty("held-out set"));
    }
    let has = |l: Label| held_out.iter().any(|(_, y)| *y == l);
    if !has(Label::Positive) || !has(Label::Negative) {
        return Err(ScorerError::SingleClass);
    }
    let n = held_out.len() as f64;
    let to_model = |th: &Vector3<f64>| CalibrationModel {
        temperature: 1.0 / th[0],
        b_neg: th[1],
        b_pos: th[2],
    };

    let mut theta = Vector3::new(1.0, 0.0, 0.0);
    let mut current = calibration_nll(&to_model(&theta), held_out);
    let mut trace = vec![current];
    let mut mu = 1e-6;
    let mut iterations = 0;
    let mut gnorm = f64::INFINITY;

    while iterations < MAX_ITERS {
        let model = to_model(&theta);
        gnorm = Vector3::from(calibration_nll_gradient(&model, held_out)).norm();
        if gnorm < GRAD_TOL {
            break;
        }
        iterations += 1;
        let mut g = Vector3::zeros();
        let mut h = Matrix3::zeros();
        for (s, y) in held_out {
            let z = s.logits();
            let p = softmax2([theta[0] * z[0] + theta[1], theta[0] * z[1] + theta[2]]);
            // Jacobian rows: d u_k / d(theta) = (z_k, [k==0], [k==1])
            let j = [Vector3::new(z[0], 1.0, 0.0), Vector3::new(z[1], 0.0, 1.0)];
            for k in 0..2 {
                g += j[k] * (p[k] - if y.index() == k { 1.0 } else { 0.0 });
            }
            let jbar = j[0] * p[0] + j[1] * p[1];
            for k in 0..2 {
                h += j[k] * j[k].transpose() * p[k];
            }
            h -= jbar * jbar.transpose();
        }
        g /= n;
        h /= n;

        let mut accepted = false;
        while mu < 1e12 {
            let damped = h + Matrix3::identity() * mu;
            let Some(step) = damped.cholesky().map(|c| c.solve(&g)) else {
                mu *= 10.0;
                continue;
            };
            let cand = theta - step;
            if cand[0] > 0.0 {
                let val = calibration_nll(&to_model(&cand), held_out);
                if val < current {
                    theta = cand;
                    current = val;
                    trace.push(val);
                    mu = (mu * 0.1).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !accepted {
            // no descent direction left at machine precision
            break;
        }
    }

    let model = to_model(&theta);
    CalibrationModel::new(model.temperature, model.b_neg, model.b_pos)?;
    Ok(BctsFit {
        model,
        iterations,
        gradient_norm: gnorm,
        objective_trace: trace,
    })
}

/// Expected calibration error with equal-width confidence bins, where
/// confidence is the larger of the two class probabilities and a prediction
/// is correct when that class matches the label.
pub fn ece(preds: &[(f64, Label)], n_bins: usize) -> Result<f64, ScorerError> {
    if preds.is_empty() {
        return Err(ScorerError::Empty("prediction list"));
    }
    if n_bins == 0 {
        return Err(ScorerError::InvalidModel(
            "ECE needs at least one bin".into(),
        ));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for &(p_pos, y) in preds {
        if !(0.0..=1.0).contains(&p_pos) {
            return Err(ScorerError::InvalidModel(format!(
                "probability {p_pos} outside [0, 1]"
            )));
        }
        let (conf, predicted) = if p_pos >= 0.5 {
            (p_pos, Label::Positive)
        } else {
            (1.0 - p_pos, Label::Negative)
        };
        let b = ((conf * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        if predicted == y {
            correct[b] += 1;
        }
    }
    let n = preds.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}
