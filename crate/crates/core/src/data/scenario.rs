use psagan_tensor::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use super::SeriesPanel;
use crate::error::{Error, Result};

/// Forecast length of every evaluation window.
pub const HORIZON: usize = 32;
/// Observed training points kept for cold-start series.
pub const COLD_START_KEEP: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioKind {
    FarForecast {
        window: usize,
        n_windows: usize,
    },
    Stretch {
        stretch_len: usize,
        target_fraction: f64,
        n_windows: usize,
    },
    ColdStart {
        fraction: f64,
    },
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::FarForecast { .. } => "far_forecast",
            ScenarioKind::Stretch { .. } => "stretch",
            ScenarioKind::ColdStart { .. } => "cold_start",
        }
    }
}

/// Forecast window `[start, start + len)`; inputs at `[gap_start, start)`
/// are hidden in addition to the scenario mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalWindow {
    pub start: usize,
    pub len: usize,
    pub gap_start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioDataset {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// Per series and position over the whole panel; `false` hides the
    /// value from model inputs. Ground truth is never altered.
    pub observed: Vec<Vec<bool>>,
    pub cold_start: Vec<usize>,
    pub windows: Vec<EvalWindow>,
    /// Share of training-range values hidden by `observed`.
    pub missing_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    #[serde(flatten)]
    pub kind: ScenarioKind,
    pub seed: u64,
    pub n_series: usize,
    pub length: usize,
    pub train_len: usize,
    pub missing_fraction: f64,
    pub cold_start_ids: Vec<String>,
    pub windows: Vec<EvalWindow>,
    pub masked_points_per_window: Vec<usize>,
}

impl ScenarioDataset {
    /// Input visibility for window `k`, covering positions `0..start`.
    pub fn input_mask(&self, k: usize) -> Vec<Vec<bool>> {
        let w = self.windows[k];
        self.observed
            .iter()
            .map(|m| {
                let mut row = m[..w.start].to_vec();
                row[w.gap_start..w.start]
                    .iter_mut()
                    .for_each(|x| *x = false);
                row
            })
            .collect()
    }

    /// Hidden input positions of window `k` in one series.
    pub fn masked_points(&self, k: usize, series: usize) -> usize {
        let w = self.windows[k];
        (0..w.start)
            .filter(|&t| !self.observed[series][t] || t >= w.gap_start)
            .count()
    }

    pub fn manifest(&self, panel: &SeriesPanel) -> ScenarioManifest {
        ScenarioManifest {
            kind: self.kind.clone(),
            seed: self.seed,
            n_series: panel.n_series(),
            length: panel.len(),
            train_len: panel.train_len,
            missing_fraction: self.missing_fraction,
            cold_start_ids: self
                .cold_start
                .iter()
                .map(|&i| panel.ids[i].clone())
                .collect(),
            windows: self.windows.clone(),
            masked_points_per_window: (0..self.windows.len())
                .map(|k| self.masked_points(k, 0))
                .collect(),
        }
    }

    fn finish(
        kind: ScenarioKind,
        seed: u64,
        panel: &SeriesPanel,
        observed: Vec<Vec<bool>>,
        cold_start: Vec<usize>,
        windows: Vec<EvalWindow>,
    ) -> Self {
        let hidden: usize = observed
            .iter()
            .map(|m| m[..panel.train_len].iter().filter(|&&o| !o).count())
            .sum();
        ScenarioDataset {
            kind,
            seed,
            missing_fraction: hidden as f64 / (panel.n_series() * panel.train_len) as f64,
            observed,
            cold_start,
            windows,
        }
    }
}

fn rolling_windows(panel: &SeriesPanel, n_windows: usize) -> Result<Vec<EvalWindow>> {
    let test = panel.len() - panel.train_len;
    if test < HORIZON * n_windows {
        return Err(Error::Config(format!(
            "test range of {test} points cannot hold {n_windows} windows of {HORIZON}"
        )));
    }
    Ok((0..n_windows)
        .map(|w| {
            let start = panel.train_len + HORIZON * w;
            EvalWindow {
                start,
                len: HORIZON,
                gap_start: start,
            }
        })
        .collect())
}

/// Window `w` starts `window·w` points after the training end and nothing
/// after the training end is observed before it.
pub fn make_far_forecast_scenario(
    panel: &SeriesPanel,
    window: usize,
    n_windows: usize,
) -> Result<ScenarioDataset> {
    let test = panel.len() - panel.train_len;
    if window == 0 || n_windows == 0 || test < window * n_windows {
        return Err(Error::Config(format!(
            "test range of {test} points cannot hold {n_windows} windows of {window}"
        )));
    }
    let windows = (0..n_windows)
        .map(|w| EvalWindow {
            start: panel.train_len + window * w,
            len: window,
            gap_start: panel.train_len,
        })
        .collect();
    let observed = vec![vec![true; panel.len()]; panel.n_series()];
    Ok(ScenarioDataset::finish(
        ScenarioKind::FarForecast { window, n_windows },
        0,
        panel,
        observed,
        Vec::new(),
        windows,
    ))
}

/// Default missing share aimed for by the stretch scenario.
pub fn stretch_target_fraction(stretch_len: usize) -> Option<f64> {
    match stretch_len {
        50 => Some((0.054 + 0.077) / 2.0),
        110 => Some((0.099 + 0.169) / 2.0),
        _ => None,
    }
}

/// Hides non-overlapping runs of `stretch_len` values in the second half of
/// the training range until `target_fraction` of training values is hidden.
pub fn make_stretch_scenario(
    panel: &SeriesPanel,
    stretch_len: usize,
    target_fraction: Option<f64>,
    n_windows: usize,
    seed: u64,
) -> Result<ScenarioDataset> {
    let target_fraction = target_fraction
        .or_else(|| stretch_target_fraction(stretch_len))
        .ok_or_else(|| {
            Error::Config(format!(
                "stretch length {stretch_len} needs an explicit target fraction"
            ))
        })?;
    if !(0.0..1.0).contains(&target_fraction) {
        return Err(Error::Config(format!(
            "target fraction {target_fraction} outside [0, 1)"
        )));
    }
    let half = panel.train_len / 2;
    let second = panel.train_len - half;
    if stretch_len == 0 || stretch_len > second {
        return Err(Error::Config(format!(
            "stretch of {stretch_len} does not fit the {second}-point second half of the training range"
        )));
    }
    let windows = rolling_windows(panel, n_windows)?;
    let n = panel.n_series();
    let target = (target_fraction * (n * panel.train_len) as f64).round() as usize;
    let mut observed = vec![vec![true; panel.len()]; n];
    let mut placed: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut rng = SeededRng::new(seed).fork("stretch");
    let mut hidden = 0;
    let mut attempts = 0usize;
    let max_attempts = 1000 * (target / stretch_len + 1);
    while hidden + stretch_len / 2 < target {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "could not place enough stretches of {stretch_len} to hide {target_fraction:.4} of the training range"
            )));
        }
        let i = rng.below(n);
        let s = rng.range_inclusive(half, panel.train_len - stretch_len);
        let e = s + stretch_len;
        if placed[i].iter().any(|&(a, b)| s <= b && a <= e) {
            continue;
        }
        placed[i].push((s, e));
        observed[i][s..e].iter_mut().for_each(|o| *o = false);
        hidden += stretch_len;
    }
    Ok(ScenarioDataset::finish(
        ScenarioKind::Stretch {
            stretch_len,
            target_fraction,
            n_windows,
        },
        seed,
        panel,
        observed,
        Vec::new(),
        windows,
    ))
}

/// Picks ⌈fraction·N⌉ series that keep only their last 24 training values.
pub fn make_cold_start_scenario(
    panel: &SeriesPanel,
    fraction: f64,
    seed: u64,
) -> Result<ScenarioDataset> {
    let n = panel.n_series();
    if !(fraction > 0.0 && fraction <= 1.0) || fraction * (n as f64) < 1.0 {
        return Err(Error::Config(format!(
            "cold-start fraction {fraction} selects no series out of {n}"
        )));
    }
    if panel.train_len < COLD_START_KEEP {
        return Err(Error::Config(format!(
            "training range of {} is shorter than {COLD_START_KEEP}",
            panel.train_len
        )));
    }
    let windows = rolling_windows(panel, 1)?;
    let k = ((fraction * n as f64) - 1e-9).ceil() as usize;
    let mut rng = SeededRng::new(seed).fork("cold_start");
    let mut cold = rng.sample_indices(n, k);
    cold.sort_unstable();
    let mut observed = vec![vec![true; panel.len()]; n];
    for &i in &cold {
        observed[i][..panel.train_len - COLD_START_KEEP]
            .iter_mut()
            .for_each(|o| *o = false);
    }
    Ok(ScenarioDataset::finish(
        ScenarioKind::ColdStart { fraction },
        seed,
        panel,
        observed,
        cold,
        windows,
    ))
}

/// Elementwise mean of aligned real and synthetic batches.
pub fn augmentation_mix(real: &Tensor, synth: &Tensor) -> Result<Tensor> {
    if real.shape() != synth.shape() {
        return Err(Error::Contract(format!(
            "cannot mix batches of shape {:?} and {:?}",
            real.shape(),
            synth.shape()
        )));
    }
    Ok(real.add(synth)?.scale(0.5))
}
