//! NRMSE evaluation, forecasting and gap imputation with a trained
//! generator, and the scenario evaluation protocol.

use psagan_tensor::{no_grad, SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{
    context_for, time_features, MinMaxScaler, ScenarioDataset, SeriesPanel, HORIZON, TIME_FEATURES,
};
use crate::error::{Error, Result};
use crate::model::{Generator, GeneratorInput};

pub const MOVING_AVERAGE_WINDOW: usize = 10;
pub const SEASON: usize = 24;
pub const SEASONS: usize = 6;

/// `sqrt(mean((f − y)²)) / mean(|y|)`.
pub fn nrmse(forecast: &[f64], target: &[f64]) -> Result<f64> {
    if forecast.len() != target.len() || target.is_empty() {
        return Err(Error::Contract(format!(
            "forecast has {} values, target {}",
            forecast.len(),
            target.len()
        )));
    }
    let n = target.len() as f64;
    let scale = target.iter().map(|y| y.abs()).sum::<f64>() / n;
    if scale == 0.0 {
        return Err(Error::UndefinedMetric("target is identically zero".into()));
    }
    let mse = forecast
        .iter()
        .zip(target)
        .map(|(f, y)| (f - y).powi(2))
        .sum::<f64>()
        / n;
    Ok(mse.sqrt() / scale)
}

/// Generator samples `[pairs, 1, τ]` for windows starting at the given
/// `(series, start)` pairs. Context, when the model uses it, is read from
/// `history` with `observed` marking usable values.
pub fn generate(
    gen: &Generator,
    history: &SeriesPanel,
    observed: Option<&[Vec<bool>]>,
    pairs: &[(usize, usize)],
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let cfg = gen.config();
    let tau = cfg.target_length;
    if gen.output_length() != tau {
        return Err(Error::Contract(format!(
            "generator emits length {} at stage {}, not the full window {tau}",
            gen.output_length(),
            gen.growth_stage()
        )));
    }
    let mut out = Vec::with_capacity(pairs.len() * tau);
    no_grad(|| -> Result<()> {
        for chunk in pairs.chunks(256) {
            let b = chunk.len();
            let series: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let mut feats = Vec::with_capacity(b * TIME_FEATURES * tau);
            for &(_, t) in chunk {
                feats.extend(time_features(history.start, t, tau));
            }
            let features = Tensor::from_vec(feats, &[b, TIME_FEATURES, tau])?;
            let noise = Tensor::randn(&[b, 1, tau], 1.0, rng);
            let context = (cfg.context_length > 0)
                .then(|| context_for(history, observed, chunk, cfg.context_length))
                .transpose()?;
            let y = gen.forward(&GeneratorInput {
                noise: &noise,
                series: &series,
                features: &features,
                context: context.as_ref(),
            })?;
            out.extend(y.to_vec());
        }
        Ok(())
    })?;
    Ok(Tensor::from_vec(out, &[pairs.len(), 1, tau])?)
}

/// Point forecast of `[t, t + 32)` in raw units: the per-step mean of
/// `n_samples` generated windows starting at `t`.
pub fn gan_forecast(
    gen: &Generator,
    scaler: &MinMaxScaler,
    history: &SeriesPanel,
    observed: Option<&[Vec<bool>]>,
    series: usize,
    t: usize,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let tau = gen.config().target_length;
    if tau < HORIZON {
        return Err(Error::Contract(format!(
            "window length {tau} is shorter than the horizon {HORIZON}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::Contract("n_samples must be positive".into()));
    }
    let pairs = vec![(series, t); n_samples];
    let y = generate(gen, history, observed, &pairs, rng)?.to_vec();
    Ok((0..HORIZON)
        .map(|h| {
            let m = (0..n_samples).map(|s| y[s * tau + h] as f64).sum::<f64>() / n_samples as f64;
            scaler.inverse_value(series, m)
        })
        .collect())
}

/// Maximal runs `[a, b)` of `false` in `mask`.
pub fn gaps(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < mask.len() {
        if mask[t] {
            t += 1;
            continue;
        }
        let a = t;
        while t < mask.len() && !mask[t] {
            t += 1;
        }
        out.push((a, t));
    }
    out
}

/// Fills unobserved positions of `panel` (scaled units) with the mean of
/// `n_samples` generated windows. `observed[i]` may be shorter than the
/// series; positions past it are left alone. Observed values are never
/// touched; positions covered by several windows get their average.
pub fn gan_impute(
    gen: &Generator,
    panel: &SeriesPanel,
    observed: &[Vec<bool>],
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<SeriesPanel> {
    let tau = gen.config().target_length;
    if n_samples == 0 {
        return Err(Error::Contract("n_samples must be positive".into()));
    }
    let mut rounds: Vec<Vec<(usize, usize)>> = Vec::new();
    for (i, mask) in observed.iter().enumerate() {
        let mut k = 0;
        for (a, b) in gaps(mask) {
            if panel.len() < tau {
                return Err(Error::Coverage(format!(
                    "gap [{a}, {b}) of series {i}: panel of {} points holds no window of {tau}",
                    panel.len()
                )));
            }
            let mut s = a;
            loop {
                let start = s.min(panel.len() - tau);
                if rounds.len() <= k {
                    rounds.push(Vec::new());
                }
                rounds[k].push((i, start));
                k += 1;
                if start + tau >= b {
                    break;
                }
                s = start + tau;
            }
        }
    }
    let mut out = panel.clone();
    let mut known: Vec<Vec<bool>> = observed.to_vec();
    for round in rounds {
        let pairs: Vec<(usize, usize)> = round
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, n_samples))
            .collect();
        let y = generate(gen, &out, Some(&known), &pairs, rng)?.to_vec();
        let mut acc: std::collections::BTreeMap<(usize, usize), (f64, usize)> = Default::default();
        for (w, &(i, s)) in round.iter().enumerate() {
            for j in 0..tau {
                let t = s + j;
                if t >= observed[i].len() || observed[i][t] {
                    continue;
                }
                let m = (0..n_samples)
                    .map(|r| y[(w * n_samples + r) * tau + j] as f64)
                    .sum::<f64>()
                    / n_samples as f64;
                let e = acc.entry((i, t)).or_insert((0.0, 0));
                e.0 += m;
                e.1 += 1;
            }
        }
        for ((i, t), (sum, count)) in acc {
            let v = sum / count as f64;
            if known[i][t] {
                out.values[i][t] = (out.values[i][t] + v) / 2.0;
            } else {
                out.values[i][t] = v;
                known[i][t] = true;
            }
        }
    }
    Ok(out)
}

/// Each unobserved value becomes the mean of the previous `window` values
/// (observed or already imputed); with no history it takes the next
/// observed value. Positions past `observed.len()` are left alone.
pub fn moving_average_impute(values: &[f64], observed: &[bool], window: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    for t in 0..observed.len() {
        if observed[t] {
            continue;
        }
        if t == 0 {
            out[t] = observed.iter().position(|&o| o).map_or(0.0, |k| values[k]);
            continue;
        }
        let lo = t.saturating_sub(window);
        out[t] = out[lo..t].iter().sum::<f64>() / (t - lo) as f64;
    }
    out
}

/// Forecast of `[start, start + horizon)` from `history[..start]`: for each
/// step, the mean of the `seasons` most recent same-phase values strictly
/// before `start`.
pub fn seasonal_average_forecast(
    history: &[f64],
    start: usize,
    horizon: usize,
    season: usize,
    seasons: usize,
) -> Result<Vec<f64>> {
    if start < season {
        return Err(Error::Contract(format!(
            "need at least {season} points of history, got {start}"
        )));
    }
    Ok((0..horizon)
        .map(|h| {
            let k0 = h / season + 1;
            let lags: Vec<f64> = (k0..k0 + seasons)
                .filter_map(|k| (start + h).checked_sub(k * season).map(|t| history[t]))
                .collect();
            lags.iter().sum::<f64>() / lags.len() as f64
        })
        .collect())
}

/// How a model completes hidden history and produces window forecasts.
pub enum Method<'a> {
    /// Moving-average gap filling, seasonal-average forecast.
    MovingAverage,
    /// Generator gap filling, seasonal-average forecast.
    GanImpute {
        generator: &'a Generator,
        n_samples: usize,
    },
    /// Generator forecast of each window directly.
    GanForecast {
        generator: &'a Generator,
        n_samples: usize,
    },
}

pub struct ModelEntry<'a> {
    pub name: String,
    pub method: Method<'a>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub scenario: String,
    pub scenario_seed: u64,
    pub per_window: Vec<f64>,
    pub aggregate: f64,
    /// NRMSE of filled-in values against the hidden truth, when any.
    pub imputation_nrmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub runs: Vec<EvalReport>,
    pub models: Vec<ModelSummary>,
}

impl EvalSummary {
    /// Per-window NRMSE as CSV (`model,seed,window,nrmse`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,seed,window,nrmse\n");
        for r in &self.runs {
            for (w, v) in r.per_window.iter().enumerate() {
                s.push_str(&format!("{},{},{w},{v}\n", r.model, r.seed));
            }
        }
        s
    }
}

/// Evaluates one model under one seed on a scaled panel.
pub fn evaluate(
    panel: &SeriesPanel,
    scaler: &MinMaxScaler,
    scenario: &ScenarioDataset,
    entry: &ModelEntry<'_>,
    seed: u64,
) -> Result<EvalReport> {
    let raw = scaler.inverse(panel)?;
    let root = SeededRng::new(seed).fork("eval");
    let mut per_window = Vec::with_capacity(scenario.windows.len());
    let (mut imp_f, mut imp_y) = (Vec::new(), Vec::new());
    for (k, w) in scenario.windows.iter().enumerate() {
        let mut rng = root.fork_indexed("window", k as u64);
        let mask = scenario.input_mask(k);
        let (mut f, mut y) = (Vec::new(), Vec::new());
        let completed: Option<Vec<Vec<f64>>> = match &entry.method {
            Method::MovingAverage => Some(
                (0..panel.n_series())
                    .map(|i| {
                        moving_average_impute(
                            &raw.values[i][..w.start],
                            &mask[i],
                            MOVING_AVERAGE_WINDOW,
                        )
                    })
                    .collect(),
            ),
            Method::GanImpute {
                generator,
                n_samples,
            } => {
                let filled = gan_impute(generator, panel, &mask, *n_samples, &mut rng)?;
                Some(
                    (0..panel.n_series())
                        .map(|i| {
                            (0..w.start)
                                .map(|t| {
                                    if mask[i][t] {
                                        raw.values[i][t]
                                    } else {
                                        scaler.inverse_value(i, filled.values[i][t])
                                    }
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
            Method::GanForecast { .. } => None,
        };
        for i in 0..panel.n_series() {
            let target = &raw.values[i][w.start..w.start + w.len];
            let forecast = match (&entry.method, &completed) {
                (
                    Method::GanForecast {
                        generator,
                        n_samples,
                    },
                    _,
                ) => {
                    let mut fc = gan_forecast(
                        generator,
                        scaler,
                        panel,
                        Some(&mask),
                        i,
                        w.start,
                        *n_samples,
                        &mut rng,
                    )?;
                    fc.truncate(w.len);
                    fc
                }
                (_, Some(hist)) => {
                    for t in 0..w.start {
                        if !mask[i][t] {
                            imp_f.push(hist[i][t]);
                            imp_y.push(raw.values[i][t]);
                        }
                    }
                    seasonal_average_forecast(&hist[i], w.start, w.len, SEASON, SEASONS)?
                }
                _ => unreachable!(),
            };
            f.extend(forecast);
            y.extend_from_slice(target);
        }
        per_window.push(nrmse(&f, &y)?);
    }
    let aggregate = per_window.iter().sum::<f64>() / per_window.len() as f64;
    let imputation_nrmse = if imp_y.is_empty() {
        None
    } else {
        Some(nrmse(&imp_f, &imp_y)?)
    };
    Ok(EvalReport {
        model: entry.name.clone(),
        seed,
        scenario: scenario.kind.name().into(),
        scenario_seed: scenario.seed,
        per_window,
        aggregate,
        imputation_nrmse,
    })
}

/// Every (model, seed) combination, with mean and sample standard deviation
/// of the aggregate per model.
pub fn run_scenario_eval(
    panel: &SeriesPanel,
    scaler: &MinMaxScaler,
    scenario: &ScenarioDataset,
    models: &[ModelEntry<'_>],
    seeds: &[u64],
) -> Result<EvalSummary> {
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for m in models {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let r = evaluate(panel, scaler, scenario, m, s)?;
            per_seed.push(r.aggregate);
            runs.push(r);
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let std = if per_seed.len() > 1 {
            (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        summaries.push(ModelSummary {
            model: m.name.clone(),
            mean,
            std,
            per_seed,
        });
    }
    Ok(EvalSummary {
        runs,
        models: summaries,
    })
}
