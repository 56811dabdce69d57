//! Closed-form ridge regression and the multi-horizon forecasting protocol.

use super::{series_features, EvalError, Result, TaskMetrics, TaskReport};
use crate::data::{Split, TimeSeriesDataset};
use crate::model::Model;
use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// `y ≈ x·coef + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// `[features × targets]`.
    pub coef: Array2<f64>,
    /// One entry per target; zero when fitted without intercept.
    pub intercept: Array1<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.coef) + &self.intercept
    }
}

/// Minimizes `Σ_i w_i‖y_i − x_i·β − c‖² + λ‖β‖²` in closed form. With
/// `fit_intercept`, `c` is the weighted mean residual and is not penalized;
/// otherwise `c = 0`.
pub fn ridge_fit(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    sample_weights: Option<&[f64]>,
    lambda: f64,
    fit_intercept: bool,
) -> Result<RidgeModel> {
    let (n, f) = x.dim();
    if y.nrows() != n {
        return Err(EvalError::Invalid(format!("{n} inputs but {} targets", y.nrows())));
    }
    if n == 0 {
        return Err(EvalError::EmptySplit { split: "train" });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EvalError::Invalid(format!("ridge strength must be finite and >= 0, got {lambda}")));
    }
    let w: Vec<f64> = match sample_weights {
        Some(w) if w.len() != n => {
            return Err(EvalError::Invalid(format!("{} weights for {n} samples", w.len())));
        }
        Some(w) if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) => {
            return Err(EvalError::Invalid("sample weights must be finite and >= 0".into()));
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(EvalError::Invalid("sample weights sum to zero".into()));
    }
    let weighted_mean = |a: ArrayView2<'_, f64>| -> Array1<f64> {
        a.rows()
            .into_iter()
            .zip(&w)
            .fold(Array1::zeros(a.ncols()), |acc, (r, wi)| acc + &r * *wi)
            / total
    };
    let (x_mean, y_mean) = if fit_intercept {
        (weighted_mean(x), weighted_mean(y))
    } else {
        (Array1::zeros(f), Array1::zeros(y.ncols()))
    };
    let xc = &x - &x_mean;
    let yc = &y - &y_mean;
    let sw = Array1::from(w.iter().map(|v| v.sqrt()).collect::<Vec<_>>()).insert_axis(Axis(1));
    let xw = &xc * &sw;
    let yw = &yc * &sw;
    let gram = xw.t().dot(&xw) + Array2::<f64>::eye(f) * lambda;
    let rhs = xw.t().dot(&yw);
    let a = DMatrix::from_row_iterator(f, f, gram.iter().copied());
    let chol = a.cholesky().ok_or(EvalError::Singular("ridge normal equations"))?;
    let mut coef = Array2::zeros((f, y.ncols()));
    for (j, col) in rhs.columns().into_iter().enumerate() {
        let sol = chol.solve(&DVector::from_iterator(f, col.iter().copied()));
        coef.column_mut(j).assign(&Array1::from(sol.as_slice().to_vec()));
    }
    let intercept = if fit_intercept {
        &y_mean - &x_mean.dot(&coef)
    } else {
        Array1::zeros(y.ncols())
    };
    Ok(RidgeModel { coef, intercept })
}

/// Representations of input windows with their future targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastData {
    /// `[windows × features]`.
    pub reps: Array2<f64>,
    pub horizons: Vec<usize>,
    /// One `[windows × (D·h)]` block per horizon, variable-major.
    pub targets: Vec<Array2<f64>>,
    pub splits: Vec<Split>,
}

/// Slides an input window of `input_len` over every instance with `stride`
/// and pairs its representation with the next `h` steps for each horizon.
/// The dataset is expected to be normalized already.
pub fn forecast_dataset(
    model: &Model,
    dataset: &TimeSeriesDataset,
    input_len: usize,
    horizons: &[usize],
    stride: usize,
) -> Result<ForecastData> {
    let t = dataset.n_steps();
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(EvalError::Invalid("horizons must be non-empty and positive".into()));
    }
    if stride == 0 || input_len == 0 {
        return Err(EvalError::Invalid("input length and stride must be positive".into()));
    }
    let max_h = *horizons.iter().max().expect("non-empty");
    if input_len + max_h > t {
        return Err(EvalError::HorizonExceedsData {
            horizon: max_h,
            input: input_len,
            t,
        });
    }
    let per = (t - input_len - max_h) / stride + 1;
    let d = dataset.n_vars();
    let mut reps = Vec::new();
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); horizons.len()];
    let mut splits = Vec::new();
    for i in 0..dataset.len() {
        let series = dataset.instance(i);
        for w in 0..per {
            let start = w * stride;
            let end = start + input_len;
            let f = series_features(model, series.slice(s![.., start..end]))?;
            reps.extend(f.flat.iter().copied());
            for (block, &h) in targets.iter_mut().zip(horizons) {
                block.extend(series.slice(s![.., end..end + h]).iter().copied());
            }
            splits.push(dataset.splits[i]);
        }
    }
    let n = splits.len();
    let width = reps.len() / n.max(1);
    Ok(ForecastData {
        reps: Array2::from_shape_vec((n, width), reps).expect("uniform width"),
        horizons: horizons.to_vec(),
        targets: targets
            .into_iter()
            .zip(horizons)
            .map(|(v, &h)| Array2::from_shape_vec((n, d * h), v).expect("uniform width"))
            .collect(),
        splits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub horizons: Vec<HorizonMetrics>,
    pub ridge_strength: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Ridge regression per horizon on the train split; MSE and MAE on test.
pub fn forecast_eval(data: &ForecastData, ridge_strength: f64) -> Result<TaskReport> {
    let pick = |split: Split| -> Vec<usize> { (0..data.splits.len()).filter(|&i| data.splits[i] == split).collect() };
    let (train, test) = (pick(Split::Train), pick(Split::Test));
    if train.is_empty() {
        return Err(EvalError::EmptySplit { split: "train" });
    }
    if test.is_empty() {
        return Err(EvalError::EmptySplit { split: "test" });
    }
    let x_train = data.reps.select(Axis(0), &train);
    let x_test = data.reps.select(Axis(0), &test);
    let mut rows = Vec::with_capacity(data.horizons.len());
    for (&h, y) in data.horizons.iter().zip(&data.targets) {
        let model = ridge_fit(x_train.view(), y.select(Axis(0), &train).view(), None, ridge_strength, true)?;
        let err = model.predict(x_test.view()) - y.select(Axis(0), &test);
        let count = err.len() as f64;
        rows.push(HorizonMetrics {
            horizon: h,
            mse: err.iter().map(|e| e * e).sum::<f64>() / count,
            mae: err.iter().map(|e| e.abs()).sum::<f64>() / count,
        });
    }
    Ok(TaskReport {
        metrics: TaskMetrics::Forecast(ForecastMetrics {
            horizons: rows,
            ridge_strength,
            n_train: train.len(),
            n_test: test.len(),
        }),
        warnings: vec![],
        config: serde_json::json!({ "ridge_strength": ridge_strength, "horizons": data.horizons }),
    })
}
