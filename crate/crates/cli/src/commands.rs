use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Subcommand, ValueEnum};
use psagan::data::{
    load_panel, make_cold_start_scenario, make_far_forecast_scenario, make_stretch_scenario,
    minmax_scale, parse_timestamp, real_batch, synthetic_panel, write_csv, MinMaxScaler,
    ScenarioDataset, SeriesPanel, SyntheticSpec, WindowSampler, HORIZON,
};
use psagan::eval::{gan_impute, generate, nrmse, run_scenario_eval, Method, ModelEntry};
use psagan::fid::{
    context_fid, embed, frechet_distance, gaussian_stats, train_encoder, CausalEncoder, FidReport,
};
use psagan::model::{load_checkpoint, ModelPair};
use psagan::train::{
    self, stage_checkpoint_name, EpochRecord, Observer, TrainOutput, FINAL_CHECKPOINT, METRICS_FILE,
};
use psagan_tensor::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ModelSpec, RunConfig};
use crate::manifest::{sha256_file, Manifest};
use crate::samples::SampleFile;
use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Fresh real windows from the training range.
    Real,
    /// Standard normal white noise.
    Noise,
    /// A fully grown generator at initialisation.
    Untrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train a model; writes checkpoints and the metrics log.
    Train,
    /// Draw windows from a checkpoint into a sample file.
    Sample {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write white noise instead of generator output.
        #[arg(long)]
        noise: bool,
    },
    /// Context-FID of a checkpoint, a sample file or a baseline.
    Score {
        #[arg(long, conflicts_with_all = ["samples", "baseline"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "baseline")]
        samples: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Train the embedding encoder into `<out>/encoder.ckpt` first.
        #[arg(long)]
        train_encoder: bool,
    },
    /// Fill the scenario's hidden training values with a checkpoint.
    Impute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Build the configured scenario and write its manifest.
    Scenario,
    /// Evaluate the configured models over the configured seeds.
    Eval,
    /// Re-run a manifest and check its outputs are reproduced exactly.
    Replay {
        manifest: PathBuf,
        /// Output directory for the re-run; defaults to `replay` beside the
        /// manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sample { .. } => "sample",
            Command::Score { .. } => "score",
            Command::Impute { .. } => "impute",
            Command::Scenario => "scenario",
            Command::Eval => "eval",
            Command::Replay { .. } => "replay",
        }
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    tags: BTreeMap<String, String>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out)?;
        Ok(Run {
            cfg,
            out,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tags: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn finish(self, command: Command) -> Result<Manifest> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), sha256_file(&self.out.join(name))?);
        }
        let manifest = Manifest {
            config: self.cfg.to_pairs().into_iter().collect(),
            seed: self.cfg.seed,
            tags: self.tags,
            inputs: self.inputs,
            outputs,
            command,
        };
        manifest.save(&self.out.join(Manifest::file_name(&manifest.command)))?;
        Ok(manifest)
    }
}

/// Runs one command under `cfg` and returns the manifest it wrote.
pub fn execute(command: &Command, cfg: &RunConfig) -> Result<Manifest> {
    if let Command::Replay { manifest, out } = command {
        return replay(manifest, out.as_deref());
    }
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if matches!(
        command,
        Command::Score {
            train_encoder: false,
            ..
        }
    ) && cfg.encoder.is_empty()
    {
        cfg.encoder = cfg.encoder_path().display().to_string();
    }
    let cfg = &cfg;
    let mut run = Run::new(cfg)?;
    let mut command = command.clone();
    match &mut command {
        Command::Train => cmd_train(&mut run)?,
        Command::Sample { checkpoint, noise } => {
            if !*noise {
                checkpoint.get_or_insert_with(|| cfg.out_dir().join(FINAL_CHECKPOINT));
            }
            cmd_sample(&mut run, checkpoint.as_deref())?
        }
        Command::Score {
            checkpoint,
            samples,
            baseline,
            train_encoder,
        } => {
            if checkpoint.is_none() && samples.is_none() && baseline.is_none() {
                *checkpoint = Some(cfg.out_dir().join(FINAL_CHECKPOINT));
            }
            cmd_score(
                &mut run,
                checkpoint.as_deref(),
                samples.as_deref(),
                *baseline,
                *train_encoder,
            )?
        }
        Command::Impute { checkpoint } => {
            let path = checkpoint
                .get_or_insert_with(|| cfg.out_dir().join(FINAL_CHECKPOINT))
                .clone();
            cmd_impute(&mut run, &path)?
        }
        Command::Scenario => cmd_scenario(&mut run)?,
        Command::Eval => cmd_eval(&mut run)?,
        Command::Replay { .. } => unreachable!(),
    }
    run.finish(command)
}

fn load_data(run: &mut Run<'_>) -> Result<(SeriesPanel, MinMaxScaler)> {
    let cfg = run.cfg;
    let panel = if cfg.data.is_empty() {
        synthetic_panel(&SyntheticSpec {
            n_series: cfg.synthetic_series,
            len: cfg.synthetic_length,
            noise: cfg.synthetic_noise,
            trend: cfg.synthetic_trend,
            seed: cfg.synthetic_seed,
        })?
    } else {
        let path = PathBuf::from(&cfg.data);
        if !path.is_file() {
            return Err(CliError::MissingArtifact(format!(
                "dataset {} not found",
                path.display()
            )));
        }
        run.input(&path)?;
        load_panel(&path, cfg.format()?)?
    };
    let panel = if cfg.split.is_empty() {
        let n = (cfg.train_fraction * panel.len() as f64).round() as usize;
        panel.with_train_len(n)?
    } else {
        let t = parse_timestamp(&cfg.split).ok_or_else(|| {
            CliError::Config(format!("split: cannot parse timestamp `{}`", cfg.split))
        })?;
        panel.with_split(t)?
    };
    Ok(minmax_scale(&panel, cfg.per_series_scaling)?)
}

fn load_model(run: &mut Run<'_>, path: &Path, panel: &SeriesPanel) -> Result<ModelPair> {
    if !path.is_file() {
        return Err(CliError::MissingArtifact(format!(
            "checkpoint {} not found; run `psagan train` first",
            path.display()
        )));
    }
    run.input(path)?;
    let (pair, _) = load_checkpoint(path)?;
    if pair.config().n_series != panel.n_series() {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained on {} series, the dataset has {}",
            path.display(),
            pair.config().n_series,
            panel.n_series()
        )));
    }
    Ok(pair)
}

fn build_scenario(cfg: &RunConfig, panel: &SeriesPanel) -> Result<ScenarioDataset> {
    Ok(match cfg.scenario.as_str() {
        "far_forecast" => make_far_forecast_scenario(panel, cfg.far_window, cfg.n_windows)?,
        "stretch" => make_stretch_scenario(
            panel,
            cfg.stretch_len,
            cfg.stretch_fraction()?,
            cfg.n_windows,
            cfg.scenario_seed,
        )?,
        "cold_start" => {
            make_cold_start_scenario(panel, cfg.cold_start_fraction, cfg.scenario_seed)?
        }
        other => {
            return Err(CliError::Config(format!(
                "scenario: unknown scenario `{other}`"
            )))
        }
    })
}

fn bool_tags(cfg: &RunConfig) -> BTreeMap<String, String> {
    [
        ("self_attention", cfg.self_attention),
        ("fade_in", cfg.fade_in),
        ("moment_loss", cfg.moment_loss),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .chain([("context_length".to_string(), cfg.context_length.to_string())])
    .collect()
}

struct Progress {
    every: usize,
}

impl Observer for Progress {
    fn after_grow(&mut self, epoch: usize, pair: &ModelPair) {
        eprintln!(
            "epoch {epoch}: grew to stage {} ({} parameters)",
            pair.growth_stage(),
            pair.parameter_count()
        );
    }

    fn on_epoch(&mut self, r: &EpochRecord, _pair: &ModelPair) {
        if r.epoch % self.every == 0 {
            eprintln!(
                "epoch {} stage {} alpha {:.2}: d {:.4} g {:.4} moment {:.4}",
                r.epoch, r.stage, r.alpha, r.d_loss, r.g_loss, r.ml
            );
        }
    }
}

fn cmd_train(run: &mut Run<'_>) -> Result<()> {
    let (panel, scaler) = load_data(run)?;
    let cfg = run.cfg.train_config();
    run.tags = bool_tags(run.cfg);
    let mut extra = scaler.to_pairs();
    extra.extend(
        run.tags
            .iter()
            .map(|(k, v)| (format!("run_{k}"), v.clone())),
    );
    let out = TrainOutput {
        dir: Some(run.out.clone()),
        extra,
    };
    let levels = cfg.levels();
    let mut progress = Progress {
        every: (cfg.epochs / 20).max(1),
    };
    train::train(&panel, None, cfg.clone(), &out, &mut progress)?;
    run.output(METRICS_FILE);
    run.output(FINAL_CHECKPOINT);
    for s in 1..levels {
        if s * cfg.stage_epochs < cfg.epochs {
            run.output(&stage_checkpoint_name(s));
        }
    }
    Ok(())
}

fn cmd_sample(run: &mut Run<'_>, checkpoint: Option<&Path>) -> Result<()> {
    let (panel, _) = load_data(run)?;
    let pair = checkpoint.map(|p| load_model(run, p, &panel)).transpose()?;
    let tau = pair
        .as_ref()
        .map_or(run.cfg.target_length, |p| p.config().target_length);
    let sampler = WindowSampler::new(&panel, tau, panel.train_len, None)?;
    let mut rng = SeededRng::new(run.cfg.seed).fork("sample");
    let pairs = sampler.sample_distinct(run.cfg.sample_count, &mut rng);
    let values = match &pair {
        Some(p) => generate(&p.generator, &panel, None, &pairs, &mut rng)?,
        None => Tensor::randn(&[pairs.len(), 1, tau], 1.0, &mut rng),
    }
    .to_vec();
    let path = run.output("samples.bin");
    SampleFile { tau, pairs, values }.save(&path)?;
    eprintln!(
        "wrote {} windows of {tau} to {}",
        run.cfg.sample_count,
        path.display()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub source: String,
    pub target_length: usize,
    #[serde(flatten)]
    pub fid: FidReport,
}

fn cmd_score(
    run: &mut Run<'_>,
    checkpoint: Option<&Path>,
    samples: Option<&Path>,
    baseline: Option<Baseline>,
    train_new_encoder: bool,
) -> Result<()> {
    let cfg = run.cfg;
    let (panel, _) = load_data(run)?;
    let pair = checkpoint.map(|p| load_model(run, p, &panel)).transpose()?;
    let file = match samples {
        Some(p) => {
            let f = SampleFile::load(p)?;
            run.input(p)?;
            Some(f)
        }
        None => None,
    };
    let tau = match (&pair, &file) {
        (Some(p), _) => p.config().target_length,
        (_, Some(f)) => f.tau,
        _ => cfg.target_length,
    };
    let encoder = if train_new_encoder {
        eprintln!("training encoder ({} steps)", cfg.encoder_steps);
        let (enc, _) = train_encoder(&panel, tau, cfg.encoder_config())?;
        enc.save(&run.output("encoder.ckpt"))?;
        enc
    } else {
        let path = cfg.encoder_path();
        if !path.is_file() {
            return Err(CliError::MissingArtifact(format!(
                "encoder {} not found; rerun with --train-encoder or set encoder=<path>",
                path.display()
            )));
        }
        run.input(&path)?;
        CausalEncoder::load(&path)?
    };
    let (source, report) = if let Some(f) = file {
        (
            format!("samples:{}", samples.expect("set").display()),
            score_sample_file(&encoder, &panel, &f, cfg)?,
        )
    } else {
        let untrained = match baseline {
            Some(Baseline::Untrained) => {
                let mut p =
                    ModelPair::new(cfg.train_config().model_config(panel.n_series())?, cfg.seed)?;
                for s in 2..=p.config().levels() {
                    p.grow(s)?;
                }
                p.set_alpha(1.0)?;
                Some(p)
            }
            _ => None,
        };
        let sampler = WindowSampler::new(&panel, tau, panel.train_len, None)?;
        let mut source =
            |pairs: &[(usize, usize)], rng: &mut SeededRng| -> psagan::Result<Tensor> {
                match (&pair, &untrained, baseline) {
                    (Some(p), _, _) | (None, Some(p), _) => {
                        generate(&p.generator, &panel, None, pairs, rng)
                    }
                    (None, None, Some(Baseline::Noise)) => {
                        Ok(Tensor::randn(&[pairs.len(), 1, tau], 1.0, rng))
                    }
                    _ => real_batch(&panel, &sampler.sample_distinct(pairs.len(), rng), tau),
                }
            };
        let name = match (checkpoint, baseline) {
            (Some(p), _) => format!("checkpoint:{}", p.display()),
            (None, Some(b)) => format!("{b:?}").to_lowercase(),
            _ => unreachable!(),
        };
        let r = context_fid(
            &encoder,
            &panel,
            tau,
            cfg.score_windows,
            cfg.score_draws,
            cfg.score_seed,
            &mut source,
        )?;
        (name, r)
    };
    eprintln!(
        "context-fid {:.4} ± {:.4} over {} windows × {} draws (seed {})",
        report.mean,
        report.std,
        report.n_windows,
        report.scores.len(),
        report.seed
    );
    let out = ScoreReport {
        source,
        target_length: tau,
        fid: report,
    };
    std::fs::write(
        run.output("score.json"),
        serde_json::to_string_pretty(&out)? + "\n",
    )?;
    Ok(())
}

/// Splits the file into `score_draws` consecutive chunks and scores each
/// against the real windows named by its row headers.
fn score_sample_file(
    encoder: &CausalEncoder,
    panel: &SeriesPanel,
    f: &SampleFile,
    cfg: &RunConfig,
) -> Result<FidReport> {
    let tau = f.tau;
    if let Some(&(s, t)) = f
        .pairs
        .iter()
        .find(|&&(s, t)| s >= panel.n_series() || t + tau > panel.train_len)
    {
        return Err(CliError::Config(format!(
            "sample row ({s}, {t}) lies outside the training range"
        )));
    }
    let draws = cfg.score_draws;
    let n = f.count() / draws;
    if n < 2 {
        return Err(CliError::Config(format!(
            "{} samples cannot fill {draws} draws of at least two windows",
            f.count()
        )));
    }
    let mut scores = Vec::with_capacity(draws);
    for d in 0..draws {
        let pairs = &f.pairs[d * n..(d + 1) * n];
        let synth = Tensor::from_vec(
            f.values[d * n * tau..(d + 1) * n * tau].to_vec(),
            &[n, 1, tau],
        )
        .map_err(psagan::Error::from)?;
        let real = real_batch(panel, pairs, tau)?;
        let a = gaussian_stats(&embed(encoder, &real)?)?;
        let b = gaussian_stats(&embed(encoder, &synth)?)?;
        scores.push(frechet_distance(&a, &b)?);
    }
    let mean = scores.iter().sum::<f64>() / draws as f64;
    let std = if draws > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(FidReport {
        mean,
        std,
        scores,
        n_windows: n,
        seed: cfg.score_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    pub scenario: String,
    pub hidden: usize,
    pub nrmse: Option<f64>,
}

fn cmd_impute(run: &mut Run<'_>, checkpoint: &Path) -> Result<()> {
    let (panel, scaler) = load_data(run)?;
    let pair = load_model(run, checkpoint, &panel)?;
    let scenario = build_scenario(run.cfg, &panel)?;
    let observed: Vec<Vec<bool>> = scenario
        .observed
        .iter()
        .map(|m| m[..panel.train_len].to_vec())
        .collect();
    let mut rng = SeededRng::new(run.cfg.seed).fork("impute");
    let filled = gan_impute(
        &pair.generator,
        &panel,
        &observed,
        run.cfg.n_samples,
        &mut rng,
    )?;
    let raw_filled = scaler.inverse(&filled)?;
    let raw = scaler.inverse(&panel)?;
    let (mut f, mut y) = (Vec::new(), Vec::new());
    for (i, m) in observed.iter().enumerate() {
        for (t, &o) in m.iter().enumerate() {
            if !o {
                f.push(raw_filled.values[i][t]);
                y.push(raw.values[i][t]);
            }
        }
    }
    let report = ImputeReport {
        scenario: scenario.kind.name().into(),
        hidden: y.len(),
        nrmse: if y.is_empty() {
            None
        } else {
            Some(nrmse(&f, &y)?)
        },
    };
    eprintln!("imputed {} hidden values", report.hidden);
    write_csv(
        &raw_filled,
        std::fs::File::create(run.output("imputed.csv"))?,
    )?;
    std::fs::write(
        run.output("impute.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(())
}

fn cmd_scenario(run: &mut Run<'_>) -> Result<()> {
    let (panel, _) = load_data(run)?;
    let scenario = build_scenario(run.cfg, &panel)?;
    let manifest = scenario.manifest(&panel);
    eprintln!(
        "{} scenario: {:.2}% of training values hidden, {} windows",
        scenario.kind.name(),
        100.0 * scenario.missing_fraction,
        scenario.windows.len()
    );
    std::fs::write(
        run.output("scenario.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

fn cmd_eval(run: &mut Run<'_>) -> Result<()> {
    let cfg = run.cfg;
    let specs = cfg.models()?;
    let missing: Vec<String> = specs
        .iter()
        .filter_map(|m| match m {
            ModelSpec::Checkpoint { path, .. } if !path.is_file() => {
                Some(path.display().to_string())
            }
            _ => None,
        })
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingRun(format!(
            "checkpoints not found: {}",
            missing.join(", ")
        )));
    }
    let (panel, scaler) = load_data(run)?;
    let scenario = build_scenario(cfg, &panel)?;
    let mut pairs = Vec::new();
    for m in &specs {
        if let ModelSpec::Checkpoint { path, .. } = m {
            let pair = load_model(run, path, &panel)?;
            let tau = pair.config().target_length;
            if cfg.eval_method == "forecast" && tau < HORIZON {
                return Err(CliError::Config(format!(
                    "eval_method: {} emits windows of {tau}, shorter than the {HORIZON}-step horizon",
                    path.display()
                )));
            }
            pairs.push(pair);
        }
    }
    let mut loaded = pairs.iter();
    let entries: Vec<ModelEntry<'_>> = specs
        .iter()
        .map(|m| match m {
            ModelSpec::MovingAverage => ModelEntry {
                name: "moving_average".into(),
                method: Method::MovingAverage,
            },
            ModelSpec::Checkpoint { name, .. } => {
                let generator = &loaded.next().expect("one pair per checkpoint").generator;
                let n_samples = cfg.n_samples;
                ModelEntry {
                    name: name.clone(),
                    method: if cfg.eval_method == "forecast" {
                        Method::GanForecast {
                            generator,
                            n_samples,
                        }
                    } else {
                        Method::GanImpute {
                            generator,
                            n_samples,
                        }
                    },
                }
            }
        })
        .collect();
    let summary = run_scenario_eval(&panel, &scaler, &scenario, &entries, &cfg.eval_seeds()?)?;
    for m in &summary.models {
        eprintln!("{}: NRMSE {:.4} ± {:.4}", m.model, m.mean, m.std);
    }
    std::fs::write(
        run.output("eval.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    std::fs::write(run.output("eval.csv"), summary.to_csv())?;
    Ok(())
}

fn replay(path: &Path, out: Option<&Path>) -> Result<Manifest> {
    let original = Manifest::load(path)?;
    let mut cfg = RunConfig::from_pairs(&original.config)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        path.parent()
            .unwrap_or_else(|| Path::new("."))
            .join("replay")
    });
    let old_out = cfg.out_dir();
    cfg.out = out.display().to_string();
    for (input, hash) in &original.inputs {
        let p = Path::new(input);
        if !p.is_file() {
            return Err(CliError::MissingArtifact(format!(
                "replay input {input} not found"
            )));
        }
        if &sha256_file(p)? != hash {
            return Err(CliError::Mismatch(format!(
                "input {input} changed since the recorded run"
            )));
        }
    }
    if out == old_out {
        return Err(CliError::Config(
            "replay must write to a different output directory".into(),
        ));
    }
    if matches!(original.command, Command::Replay { .. }) {
        return Err(CliError::Config("cannot replay a replay".into()));
    }
    let replayed = execute(&original.command, &cfg)?;
    let differing: Vec<&String> = original
        .outputs
        .iter()
        .filter(|(name, hash)| replayed.outputs.get(*name) != Some(*hash))
        .map(|(name, _)| name)
        .collect();
    if !differing.is_empty() {
        return Err(CliError::Mismatch(format!(
            "outputs differ: {}",
            differing
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    eprintln!(
        "replayed {}: {} outputs identical",
        original.command.name(),
        original.outputs.len()
    );
    Ok(replayed)
}
