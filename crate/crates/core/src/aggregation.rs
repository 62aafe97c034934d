//! Server-side model aggregation.
//!
//! Three aggregators combine the models returned by the selected clients:
//! sample-weighted averaging, coordinate-wise median and the geometric
//! median computed per tensor with Weiszfeld iterations. The pre-merge blend
//! used by noisy clients lives here too since it is the same elementwise
//! combination.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelParams;

pub const DEFAULT_GM_EPS: f64 = 1e-5;
pub const DEFAULT_GM_MAX_ITER: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Average,
    CoordMedian,
    #[default]
    GeometricMedian,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 3] = [
        AggregationMethod::GeometricMedian,
        AggregationMethod::Average,
        AggregationMethod::CoordMedian,
    ];
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMethod::Average => "average",
            AggregationMethod::CoordMedian => "coord_median",
            AggregationMethod::GeometricMedian => "geometric_median",
        })
    }
}

impl FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "coord_median" => Ok(Self::CoordMedian),
            "geometric_median" => Ok(Self::GeometricMedian),
            other => Err(Error::Config(format!("unknown aggregation '{other}'"))),
        }
    }
}

/// Weiszfeld settings; one `eps` serves as both weight floor and stopping
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricMedianOptions {
    pub eps: f64,
    pub max_iter: usize,
}

impl Default for GeometricMedianOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_GM_EPS,
            max_iter: DEFAULT_GM_MAX_ITER,
        }
    }
}

fn check_models(models: &[ModelParams]) -> Result<()> {
    let Some(first) = models.first() else {
        return Err(Error::Aggregation("no models to aggregate".into()));
    };
    for m in &models[1..] {
        first.check_layout(m)?;
    }
    Ok(())
}

/// Build a model whose tensor `t` is `f(t, columns)` where `columns[i]` is
/// client `i`'s values of that tensor.
fn per_tensor<F>(models: &[ModelParams], mut f: F) -> ModelParams
where
    F: FnMut(&[&[f64]]) -> Vec<f64>,
{
    let mut out = models[0].clone();
    for (t, tensor) in out.tensors_mut().iter_mut().enumerate() {
        let columns: Vec<&[f64]> = models
            .iter()
            .map(|m| m.tensors()[t].values.as_slice())
            .collect();
        tensor.values = f(&columns);
    }
    out
}

/// `sum_k (n_k / sum n) w_k`.
pub fn weighted_average(models: &[ModelParams], data_weights: &[f64]) -> Result<ModelParams> {
    check_models(models)?;
    if data_weights.len() != models.len() {
        return Err(Error::Aggregation(format!(
            "{} weights for {} models",
            data_weights.len(),
            models.len()
        )));
    }
    if data_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Aggregation("weights must be finite and >= 0".into()));
    }
    let total: f64 = data_weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Aggregation("weights sum to zero".into()));
    }
    let coeffs: Vec<f64> = data_weights.iter().map(|w| w / total).collect();
    Ok(per_tensor(models, |cols| {
        let mut acc = vec![0.0; cols[0].len()];
        for (col, a) in cols.iter().zip(&coeffs) {
            for (o, v) in acc.iter_mut().zip(col.iter()) {
                *o += a * v;
            }
        }
        acc
    }))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Unweighted per-coordinate median; even counts average the middle pair.
pub fn coordinate_median(models: &[ModelParams]) -> Result<ModelParams> {
    check_models(models)?;
    Ok(per_tensor(models, |cols| {
        let mut buf = vec![0.0; cols.len()];
        (0..cols[0].len())
            .map(|j| {
                for (b, col) in buf.iter_mut().zip(cols) {
                    *b = col[j];
                }
                median(&mut buf)
            })
            .collect()
    }))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Weiszfeld iterations on a set of equal-length points, starting from the
/// mean. On convergence the iterate *before* the final update is returned,
/// as in the reference pseudocode.
pub fn weiszfeld(points: &[&[f64]], opts: GeometricMedianOptions) -> Vec<f64> {
    let n = points.len() as f64;
    let dim = points[0].len();
    // Mean as an offset from the first point, exact when all points coincide.
    let origin = points[0];
    let mut offset = vec![0.0; dim];
    for p in &points[1..] {
        for ((o, v), x0) in offset.iter_mut().zip(p.iter()).zip(origin) {
            *o += v - x0;
        }
    }
    let mut mu: Vec<f64> = origin.iter().zip(&offset).map(|(x0, o)| x0 + o / n).collect();
    for _ in 0..opts.max_iter {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| 1.0 / distance(p, &mu).max(opts.eps))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut next = vec![0.0; dim];
        for (p, w) in points.iter().zip(&weights) {
            let w = w / total;
            for (m, v) in next.iter_mut().zip(p.iter()) {
                *m += w * v;
            }
        }
        if distance(&next, &mu) < opts.eps {
            break;
        }
        mu = next;
    }
    mu
}

/// Geometric median of each named tensor independently, unweighted by data
/// counts.
pub fn geometric_median(models: &[ModelParams], opts: GeometricMedianOptions) -> Result<ModelParams> {
    check_models(models)?;
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(Error::Aggregation(format!("eps must be positive, got {}", opts.eps)));
    }
    Ok(per_tensor(models, |cols| weiszfeld(cols, opts)))
}

/// Dispatch on `method`; `data_weights` only matter for averaging.
pub fn aggregate(
    method: AggregationMethod,
    models: &[ModelParams],
    data_weights: &[f64],
    gm: GeometricMedianOptions,
) -> Result<ModelParams> {
    match method {
        AggregationMethod::Average => weighted_average(models, data_weights),
        AggregationMethod::CoordMedian => coordinate_median(models),
        AggregationMethod::GeometricMedian => geometric_median(models, gm),
    }
}

/// `zeta * local + (1 - zeta) * global`.
pub fn pre_merge(local: &ModelParams, global: &ModelParams, zeta: f64) -> Result<ModelParams> {
    local.check_layout(global)?;
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::Config(format!("zeta must lie in [0, 1], got {zeta}")));
    }
    if zeta == 1.0 {
        return Ok(local.clone());
    }
    if zeta == 0.0 {
        return Ok(global.clone());
    }
    let mut out = local.clone();
    for (t, g) in out.tensors_mut().iter_mut().zip(global.tensors()) {
        for (v, gv) in t.values.iter_mut().zip(&g.values) {
            *v = zeta * *v + (1.0 - zeta) * gv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn scalar_model(v: f64) -> ModelParams {
        // 1 -> 1 linear layer: weight and bias both set to v
        let mut m = ModelParams::zeros(&Architecture::new(1, vec![], 1));
        for t in m.tensors_mut() {
            t.values = vec![v];
        }
        m
    }

    fn value(m: &ModelParams) -> f64 {
        m.tensors()[0].values[0]
    }

    #[test]
    fn average_examples() {
        let a = ModelParams::init(&Architecture::new(3, vec![4], 2), 1);
        let b = ModelParams::init(&Architecture::new(3, vec![4], 2), 2);
        assert_eq!(weighted_average(std::slice::from_ref(&a), &[17.0]).unwrap(), a);
        let avg = weighted_average(&[a.clone(), b.clone()], &[5.0, 5.0]).unwrap();
        for ((x, y), z) in a.flatten().iter().zip(b.flatten()).zip(avg.flatten()) {
            assert!((z - (x + y) / 2.0).abs() < 1e-15);
        }
        let m = weighted_average(&[scalar_model(0.0), scalar_model(4.0)], &[1.0, 3.0]).unwrap();
        assert_eq!(value(&m), 3.0);
        assert!(weighted_average(&[scalar_model(1.0)], &[0.0]).is_err());
        assert!(weighted_average(&[], &[]).is_err());
    }

    #[test]
    fn median_examples() {
        let a = ModelParams::init(&Architecture::new(3, vec![4], 2), 1);
        assert_eq!(coordinate_median(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        let m = coordinate_median(&[scalar_model(0.0), scalar_model(0.0), scalar_model(10.0)]).unwrap();
        assert_eq!(value(&m), 0.0);
        let m = coordinate_median(&[0.0, 2.0, 4.0, 100.0].map(scalar_model)).unwrap();
        assert_eq!(value(&m), 3.0);
    }

    #[test]
    fn geometric_median_identical() {
        let a = ModelParams::init(&Architecture::new(3, vec![4], 2), 1);
        let gm = geometric_median(&[a.clone(), a.clone(), a.clone()], Default::default()).unwrap();
        assert_eq!(gm, a);
    }

    #[test]
    fn geometric_median_triangle() {
        let s3 = 3f64.sqrt();
        let pts: [&[f64]; 3] = [&[0.0, 0.0], &[2.0, 0.0], &[1.0, s3]];
        let gm = weiszfeld(&pts, Default::default());
        assert!((gm[0] - 1.0).abs() < 1e-3 && (gm[1] - s3 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn geometric_median_scalars() {
        let pts: [&[f64]; 4] = [&[0.0], &[0.0], &[0.0], &[10.0]];
        let gm = weiszfeld(&pts, Default::default());
        assert!(gm[0].abs() < 1e-3, "{gm:?}");
    }

    #[test]
    fn outlier_moves_median_little() {
        for delta in [1.0, 10.0, 100.0, 1000.0] {
            let mut models = vec![scalar_model(0.5); 9];
            models.push(scalar_model(0.5 + delta));
            let gm = geometric_median(&models, Default::default()).unwrap();
            // both coordinates of the tensor move together; per tensor each is 1-d
            let shift = (value(&gm) - 0.5).abs();
            assert!(shift < delta / 2.0, "delta {delta}: shift {shift}");
            let avg = weighted_average(&models, &[1.0; 10]).unwrap();
            assert!(((value(&avg) - 0.5) - delta / 10.0).abs() < 1e-9 * delta.max(1.0));
        }
    }

    #[test]
    fn pre_merge_examples() {
        let l = scalar_model(1.0);
        let g = scalar_model(0.0);
        assert_eq!(pre_merge(&l, &g, 1.0).unwrap(), l);
        assert_eq!(pre_merge(&l, &g, 0.0).unwrap(), g);
        assert!((value(&pre_merge(&l, &g, 0.8).unwrap()) - 0.8).abs() < 1e-15);
        let other = ModelParams::zeros(&Architecture::new(2, vec![], 1));
        assert!(matches!(pre_merge(&l, &other, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn mismatched_layouts_rejected() {
        let a = ModelParams::zeros(&Architecture::new(2, vec![], 1));
        let b = ModelParams::zeros(&Architecture::new(3, vec![], 1));
        assert!(coordinate_median(&[a.clone(), b.clone()]).is_err());
        assert!(geometric_median(&[a, b], Default::default()).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in AggregationMethod::ALL {
            assert_eq!(m.to_string().parse::<AggregationMethod>().unwrap(), m);
        }
        assert!("krum".parse::<AggregationMethod>().is_err());
    }
}
