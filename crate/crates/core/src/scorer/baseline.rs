use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::calibration::CalibrationModel;
use super::features::{
    window_features, FeatureVector, FEATURE_COUNT, FEATURE_NAMES, FEATURE_SET_VERSION,
};
use super::{check_shape, LabeledWindow, RawScore, ScorerError, WindowScorer};
use crate::raster::{Patch, DEFAULT_WINDOW_SIZE};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Ridge penalty on standardized weights, applied to the mean log-loss.
const RIDGE: f64 = 1e-4;
const MAX_NEWTON_ITERS: usize = 100;

/// Logistic model over standardized window features. Emits raw logits of the
/// form `(0, w·x + c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScorerModel {
    pub feature_set_version: u32,
    pub window_size: usize,
    pub feature_names: Vec<String>,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl BaselineScorerModel {
    /// A model that scores every window `(0, 0)`.
    pub fn null(window_size: usize) -> Self {
        Self {
            feature_set_version: FEATURE_SET_VERSION,
            window_size,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            feature_means: vec![0.0; FEATURE_COUNT],
            feature_scales: vec![1.0; FEATURE_COUNT],
            weights: vec![0.0; FEATURE_COUNT],
            intercept: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.feature_set_version != FEATURE_SET_VERSION {
            return Err(ScorerError::InvalidModel(format!(
                "feature set v{} (this build uses v{FEATURE_SET_VERSION})",
                self.feature_set_version
            )));
        }
        let n = FEATURE_COUNT;
        if self.feature_means.len() != n
            || self.feature_scales.len() != n
            || self.weights.len() != n
        {
            return Err(ScorerError::InvalidModel(format!("expected {n} features")));
        }
        if self.window_size == 0 {
            return Err(ScorerError::InvalidModel("window size 0".into()));
        }
        let all = self
            .feature_means
            .iter()
            .chain(&self.feature_scales)
            .chain(&self.weights)
            .chain(std::iter::once(&self.intercept));
        if all.into_iter().any(|v| !v.is_finite()) || self.feature_scales.iter().any(|&s| s <= 0.0)
        {
            return Err(ScorerError::InvalidModel(
                "non-finite parameter or nonpositive scale".into(),
            ));
        }
        Ok(())
    }

    pub fn logit(&self, f: &FeatureVector) -> f64 {
        self.intercept
            + f.iter()
                .zip(&self.feature_means)
                .zip(&self.feature_scales)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>()
    }

    pub fn score_features(&self, f: &FeatureVector) -> Result<RawScore, ScorerError> {
        RawScore::new(0.0, self.logit(f))
    }
}

impl WindowScorer for BaselineScorerModel {
    fn window_size(&self) -> usize {
        self.window_size
    }

    fn score_window(&self, window: &Patch) -> Result<RawScore, ScorerError> {
        check_shape(self.window_size, window)?;
        self.score_features(&window_features(window))
    }

    fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("model serializes"),
        ))
    }
}

/// Fits `P(positive | x) = σ(w·x + c)` by damped Newton iterations on the
/// mean log-loss plus a small ridge term. Features are standardized first.
pub fn fit_logistic(
    features: &[FeatureVector],
    labels: &[bool],
    window_size: usize,
) -> Result<BaselineScorerModel, ScorerError> {
    if features.len() != labels.len() {
        return Err(ScorerError::Dataset(
            "features/labels length mismatch".into(),
        ));
    }
    if features.is_empty() {
        return Err(ScorerError::Empty("training set"));
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(ScorerError::SingleClass);
    }
    let n = features.len() as f64;
    let d = FEATURE_COUNT;
    let mut means = vec![0.0; d];
    for f in features {
        for j in 0..d {
            means[j] += f[j] / n;
        }
    }
    let mut scales = vec![0.0; d];
    for f in features {
        for j in 0..d {
            scales[j] += (f[j] - means[j]).powi(2) / n;
        }
    }
    for s in &mut scales {
        *s = if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            (0..d)
                .map(|j| (f[j] - means[j]) / scales[j])
                .chain(std::iter::once(1.0))
                .collect()
        })
        .collect();

    let objective = |theta: &DVector<f64>| -> f64 {
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            let u: f64 = x.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
            // log(1 + e^u) - y u, computed stably
            loss += softplus(u) - if y { u } else { 0.0 };
        }
        loss / n + 0.5 * RIDGE * theta.iter().take(d).map(|w| w * w).sum::<f64>()
    };

    let mut theta = DVector::<f64>::zeros(d + 1);
    let mut current = objective(&theta);
    for _ in 0..MAX_NEWTON_ITERS {
        let mut grad = DVector::<f64>::zeros(d + 1);
        let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
        for (x, &y) in xs.iter().zip(labels) {
            let u: f64 = x.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
            let p = sigmoid(u);
            let r = p - if y { 1.0 } else { 0.0 };
            let wgt = p * (1.0 - p);
            for i in 0..=d {
                grad[i] += r * x[i] / n;
                for j in 0..=i {
                    hess[(i, j)] += wgt * x[i] * x[j] / n;
                }
            }
        }
        for i in 0..=d {
            for j in 0..i {
                hess[(j, i)] = hess[(i, j)];
            }
        }
        for i in 0..d {
            grad[i] += RIDGE * theta[i];
            hess[(i, i)] += RIDGE;
        }
        if grad.norm() < 1e-10 {
            break;
        }
        let Some(step) = hess.clone().cholesky().map(|c| c.solve(&grad)) else {
            return Err(ScorerError::InvalidModel(
                "singular Hessian in logistic fit".into(),
            ));
        };
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-8 {
            let cand = &theta - &step * t;
            let val = objective(&cand);
            if val <= current {
                theta = cand;
                current = val;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.norm() * t < 1e-12 {
            break;
        }
    }

    let model = BaselineScorerModel {
        feature_set_version: FEATURE_SET_VERSION,
        window_size,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        feature_means: means,
        feature_scales: scales,
        weights: theta.iter().take(d).copied().collect(),
        intercept: theta[d],
    };
    model.validate()?;
    Ok(model)
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Trains the baseline on labeled windows (all must share one square size).
pub fn train_baseline(train: &[LabeledWindow]) -> Result<BaselineScorerModel, ScorerError> {
    let size = train
        .first()
        .map(|w| w.pixels.width)
        .ok_or(ScorerError::Empty("training set"))?;
    let mut feats = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for w in train {
        check_shape(size, &w.pixels)?;
        feats.push(window_features(&w.pixels));
        labels.push(w.label.is_positive());
    }
    fit_logistic(&feats, &labels, size)
}

/// On-disk model: scorer parameters plus the fitted calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub scorer: BaselineScorerModel,
    pub calibration: CalibrationModel,
}

impl ModelFile {
    pub fn new(scorer: BaselineScorerModel, calibration: CalibrationModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            scorer,
            calibration,
        }
    }

    pub fn read(path: &Path) -> Result<Self, ScorerError> {
        let m: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(ScorerError::InvalidModel(format!(
                "model format v{}",
                m.format_version
            )));
        }
        m.scorer.validate()?;
        CalibrationModel::new(
            m.calibration.temperature,
            m.calibration.b_neg,
            m.calibration.b_pos,
        )?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), ScorerError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl Default for BaselineScorerModel {
    fn default() -> Self {
        Self::null(DEFAULT_WINDOW_SIZE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn separable(n: usize, seed: u64) -> (Vec<FeatureVector>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let pos = i % 2 == 0;
            let mut x = [0.0; FEATURE_COUNT];
            for v in &mut x {
                *v = rng.random_range(-1.0..1.0);
            }
            // margin of 0.2 along the first feature
            x[0] = if pos {
                rng.random_range(0.1..1.0)
            } else {
                rng.random_range(-1.0..-0.1)
            };
            f.push(x);
            y.push(pos);
        }
        (f, y)
    }

    fn accuracy(m: &BaselineScorerModel, f: &[FeatureVector], y: &[bool]) -> f64 {
        f.iter()
            .zip(y)
            .filter(|(x, &l)| (m.logit(x) > 0.0) == l)
            .count() as f64
            / f.len() as f64
    }

    #[test]
    fn separable_data_is_learned() {
        let (f, y) = separable(400, 1);
        let m = fit_logistic(&f, &y, 300).unwrap();
        assert!(accuracy(&m, &f, &y) >= 0.99);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (f, _) = separable(400, seed);
            let y: Vec<bool> = (0..400).map(|_| rng.random_bool(0.5)).collect();
            let (train_f, test_f) = f.split_at(300);
            let (train_y, test_y) = y.split_at(300);
            let m = fit_logistic(train_f, train_y, 300).unwrap();
            accs.push(accuracy(&m, test_f, test_y));
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(mean < 0.55, "mean held-out accuracy {mean}");
    }

    #[test]
    fn duplication_does_not_change_the_fit() {
        let (f, y) = separable(200, 3);
        let (mut f2, mut y2) = (f.clone(), y.clone());
        f2.extend_from_slice(&f);
        y2.extend_from_slice(&y);
        let a = fit_logistic(&f, &y, 300).unwrap();
        let b = fit_logistic(&f2, &y2, 300).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert!((wa - wb).abs() < 1e-7 * wa.abs().max(1.0), "{wa} vs {wb}");
        }
        assert!((a.intercept - b.intercept).abs() < 1e-7 * a.intercept.abs().max(1.0));
    }

    #[test]
    fn single_class_rejected() {
        let (f, _) = separable(10, 0);
        assert!(matches!(
            fit_logistic(&f, &[true; 10], 300),
            Err(ScorerError::SingleClass)
        ));
    }

    #[test]
    fn null_model_scores_zero() {
        let m = BaselineScorerModel::null(300);
        let s = m.score_window(&Patch::filled(300, 300, 0.3)).unwrap();
        assert_eq!(
            s,
            RawScore {
                z_neg: 0.0,
                z_pos: 0.0
            }
        );
        assert!(matches!(
            m.score_window(&Patch::filled(299, 300, 0.3)),
            Err(ScorerError::WindowShape { .. })
        ));
    }

    #[test]
    fn scoring_is_deterministic() {
        let (f, y) = separable(100, 9);
        let m = fit_logistic(&f, &y, 300).unwrap();
        let p = Patch::filled(300, 300, 0.5);
        assert_eq!(m.score_window(&p).unwrap(), m.score_window(&p).unwrap());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (f, y) = separable(50, 4);
        let mf = ModelFile::new(
            fit_logistic(&f, &y, 300).unwrap(),
            CalibrationModel::new(1.51, -0.05, 0.26).unwrap(),
        );
        let path = dir.path().join("model.json");
        mf.write(&path).unwrap();
        assert_eq!(ModelFile::read(&path).unwrap(), mf);
    }
}
