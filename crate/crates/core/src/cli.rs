//! The `prdet` command line: a flat `key = value` configuration, overridable
//! by `--key value` flags, driving training, scoring, evaluation and sweeps.
//!
//! Every key lives in [`SCHEMA`] with its default; anything else is an
//! error. Each command writes the resolved configuration to
//! `<out>/config.txt`, headed by the code version.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;

use crate::checkpoint::{load_consistency, load_denoiser, save_consistency, save_denoiser};
use crate::consistency::{train_consistency, ConsistencyFn, ConsistencyModel, ConsistencyTrainConfig};
use crate::data::toy::{gen_toy_dataset, ToySpec};
use crate::data::{load_image_dir, ImageBatch};
use crate::diffusion::{train_diffusion, Denoiser, DenoiserModel, DiffusionTrainConfig, LossWeighting, TrainLog};
use crate::distances::{FeatureExtractor, Metric, MetricContext};
use crate::error::{Error, Result};
use crate::evaluation::{
    auroc, report_rows, run_benchmark, select_hparams_rotated, sweep_timesteps, tnr_at_tpr, BenchmarkSpec, Method,
    MetricRow, SweepVariant, Task, DEFAULT_TPR,
};
use crate::network::UNetConfig;
use crate::projection::{CmFull, OdeFull, Projector, SingleStep};
use crate::scoring::{
    batch_score, sha256_hex, MsmaScorer, PrConfig, PrScorer, ProjectionScorer, ScoreVector, Scorer,
};
use crate::CODE_VERSION;

pub const COMMANDS: [&str; 6] = ["train-diffusion", "distill", "score", "evaluate", "sweep", "select-hparams"];

/// Overrides `seed` when set.
pub const SEED_ENV: &str = "PR_SEED";

/// `(key, default, description)`. An empty default means unset.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for initialisation, minibatches and scoring noise"),
    ("out", "", "output directory"),
    ("data", "", "images: a directory, a .prtc container, or toy:<classes>:<start>..<end>"),
    ("id_data", "", "in-distribution images (sweep, evaluate)"),
    ("ood_data", "", "out-of-distribution images (sweep, evaluate)"),
    ("channels", "3", "channels when reading an image directory"),
    ("resolution", "24", "side length when reading an image directory or generating toy data"),
    ("toy_classes", "3", "toy data: number of shape classes"),
    ("toy_textures", "4", "toy data: background texture pool size"),
    ("toy_samples_per_class", "128", "toy data: images per class"),
    ("toy_seed", "100", "toy data: generator seed"),
    ("base_channels", "8", "U-Net width"),
    ("channel_multipliers", "1,2", "U-Net width multiplier per resolution stage"),
    ("n_res_blocks", "1", "residual blocks per stage"),
    ("schedule_n", "17", "number of schedule intervals N"),
    ("eps", "0.002", "smallest noise level"),
    ("t_max", "80", "largest noise level"),
    ("rho", "7", "schedule curvature"),
    ("sigma_data", "0.5", "data standard deviation used by the preconditioning"),
    ("steps", "1000", "optimiser steps"),
    ("batch_size", "16", "minibatch size"),
    ("lr", "0.001", "Adam learning rate"),
    ("weighting", "edm", "denoising loss weighting: edm or unweighted"),
    ("denoiser", "", "denoiser checkpoint: distillation teacher, single/ode projection, msma"),
    ("model", "", "consistency checkpoint"),
    ("ema_mu", "0.99", "target EMA rate"),
    ("train_metric", "l2", "consistency training distance: l2 or perceptual"),
    ("init_from_teacher", "true", "start a distilled student from the teacher's weights"),
    ("method", "pr-ensemble", "score: pr, pr-ensemble, proj or msma"),
    ("metric", "perceptual", "distance: l2, ssim, perceptual or unet"),
    ("projector", "cm", "projection: cm (consistency), single (one denoiser step) or ode (Heun)"),
    ("extractor", "", "feature extractor directory for the perceptual metric"),
    ("gamma", "3", "unet metric: schedule index of the feature noise level"),
    ("n_z", "1", "unet metric: noise draws"),
    ("alpha", "9", "Projection Regret first projection index"),
    ("beta", "8", "Projection Regret second projection index"),
    ("n_alpha", "40", "first projection draws"),
    ("n_beta", "10", "second projection draws per first projection"),
    ("ensemble", "7:6,7:7,8:7,8:8,9:8,9:9,10:9,10:10", "index pairs summed by pr-ensemble"),
    ("index", "8", "proj: schedule index"),
    ("n_proj", "4", "proj, sweep and msma: draws per image"),
    ("msma_indices", "1,3,5,7,9", "msma: schedule indices"),
    ("msma_fit_data", "", "msma: images the aggregator is fitted on"),
    ("id_scores", "", "evaluate: comma-separated in-distribution score files"),
    ("ood_scores", "", "evaluate: comma-separated out-of-distribution score files"),
    ("task", "id-vs-ood", "evaluate: task name in the report"),
    ("variants", "cm-l2,cm-perceptual", "sweep: <projector>-<metric> list"),
    ("svg", "false", "sweep: also write sweep.svg"),
    ("grid", "7:6,7:7,8:7,8:8,9:8,9:9,10:9,10:10", "select-hparams: candidate index pairs"),
];

/// A fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> Result<()> {
    if SCHEMA.iter().any(|(k, _, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key '{}'", key)))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        known(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `PR_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{}='{}' is not an unsigned integer", SEED_ENV, v)))?;
            self.set("seed", v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        known(key)?;
        Ok(self.values.get(key).map(|s| s.as_str()).unwrap_or(""))
    }

    /// The value, or an error naming the key when it is unset.
    pub fn require(&self, key: &str) -> Result<&str> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Err(Error::Config(format!("'{}' must be set", key)));
        }
        Ok(v)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("'{}' = '{}' is not {}", key, v, what)))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parsed(key, "a number")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key, "true or false")
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.require(key)?;
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("'{}' = '{}' is not an integer list", key, v)))
            })
            .collect()
    }

    /// `a:b,a:b,...`
    pub fn pairs(&self, key: &str) -> Result<Vec<(usize, usize)>> {
        let v = self.require(key)?;
        let bad = || Error::Config(format!("'{}' = '{}' is not a list of a:b pairs", key, v));
        v.split(',')
            .map(|p| {
                let (a, b) = p.trim().split_once(':').ok_or_else(bad)?;
                Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
            })
            .collect()
    }

    pub fn list(&self, key: &str) -> Result<Vec<String>> {
        Ok(self
            .require(key)?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect())
    }

    /// Every key in schema order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in SCHEMA {
            let _ = writeln!(s, "{} = {}", k, self.values.get(*k).map(|v| v.as_str()).unwrap_or(""));
        }
        s
    }

    /// Hash of the resolved configuration, `out` excluded so that the same
    /// run written to two places hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.values.insert("out".into(), String::new());
        sha256_hex(c.to_text().as_bytes())
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = PathBuf::from(self.require("out")?);
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(out)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(
        &dir.join("config.txt"),
        &format!("# {}\n# config_hash {}\n{}", CODE_VERSION, cfg.hash(), cfg.to_text()),
    )
}

/// Loads images from a directory, a `.prtc` container or a toy selector
/// `toy:<class,class,...>:<start>..<end>` (sample range within each class).
pub fn load_data(spec: &str, cfg: &RunConfig) -> Result<ImageBatch> {
    if let Some(sel) = spec.strip_prefix("toy:") {
        let bad = || Error::Config(format!("bad toy selector '{}'", spec));
        let (classes, range) = sel.split_once(':').ok_or_else(bad)?;
        let classes: Vec<usize> = classes
            .split(',')
            .map(|c| c.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (a, b) = range.split_once("..").ok_or_else(bad)?;
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        let toy = ToySpec {
            resolution: cfg.usize("resolution")?,
            n_semantic_classes: cfg.usize("toy_classes")?,
            n_background_textures: cfg.usize("toy_textures")?,
            samples_per_class: cfg.usize("toy_samples_per_class")?,
            seed: cfg.u64("toy_seed")?,
        };
        if a >= b || b > toy.samples_per_class || classes.iter().any(|&c| c >= toy.n_semantic_classes) {
            return Err(bad());
        }
        let d = gen_toy_dataset(&toy)?;
        let idx: Vec<usize> = classes
            .iter()
            .flat_map(|&c| (a..b).map(move |s| c * toy.samples_per_class + s))
            .collect();
        return Ok(d.images.select(&idx));
    }
    let p = Path::new(spec);
    if p.is_file() {
        ImageBatch::load(p)
    } else {
        load_image_dir(p, cfg.usize("resolution")?, cfg.usize("channels")?)
    }
}

fn unet_config(cfg: &RunConfig) -> Result<UNetConfig> {
    Ok(UNetConfig {
        base_channels: cfg.usize("base_channels")?,
        channel_multipliers: cfg.usize_list("channel_multipliers")?,
        n_res_blocks_per_stage: cfg.usize("n_res_blocks")?,
        in_channels: cfg.usize("channels")?,
        resolution: cfg.usize("resolution")?,
        seed: cfg.u64("seed")?,
    })
}

fn write_log(dir: &Path, log: &TrainLog) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i, l);
    }
    write_text(&dir.join("train_log.csv"), &csv)
}

pub fn cmd_train_diffusion(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_data(cfg.require("data")?, cfg)?;
    let weighting = match cfg.get("weighting")? {
        "edm" => LossWeighting::Edm,
        "unweighted" => LossWeighting::Unweighted,
        w => return Err(Error::Config(format!("unknown weighting '{}'", w))),
    };
    let tc = DiffusionTrainConfig {
        unet: unet_config(cfg)?,
        schedule_n: cfg.usize("schedule_n")?,
        eps: cfg.f64("eps")?,
        t_max: cfg.f64("t_max")?,
        rho: cfg.f64("rho")?,
        sigma_data: cfg.f64("sigma_data")?,
        steps: cfg.usize("steps")?,
        batch_size: cfg.usize("batch_size")?,
        lr: cfg.f64("lr")?,
        weighting,
        seed: cfg.u64("seed")?,
    };
    let (model, log) = train_diffusion(&tc, &data)?;
    let out = cfg.out_dir()?;
    save_denoiser(&out, &model)?;
    write_log(&out, &log)?;
    write_config(&out, cfg)?;
    info!("denoiser written to {}", out.display());
    Ok(out)
}

pub fn cmd_distill(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_data(cfg.require("data")?, cfg)?;
    let teacher = match cfg.get("denoiser")? {
        "" => None,
        p => Some(load_denoiser(p)?),
    };
    let tc = ConsistencyTrainConfig {
        unet: unet_config(cfg)?,
        schedule_n: cfg.usize("schedule_n")?,
        eps: cfg.f64("eps")?,
        t_max: cfg.f64("t_max")?,
        rho: cfg.f64("rho")?,
        sigma_data: cfg.f64("sigma_data")?,
        steps: cfg.usize("steps")?,
        batch_size: cfg.usize("batch_size")?,
        lr: cfg.f64("lr")?,
        ema_mu: cfg.f64("ema_mu")?,
        metric: cfg.get("train_metric")?.to_string(),
        init_from_teacher: cfg.bool("init_from_teacher")?,
        seed: cfg.u64("seed")?,
    };
    let (model, log) = train_consistency(&tc, &data, teacher.as_ref())?;
    let out = cfg.out_dir()?;
    save_consistency(&out, &model)?;
    write_log(&out, &log)?;
    write_config(&out, cfg)?;
    info!("consistency model written to {}", out.display());
    Ok(out)
}

/// Checkpoints and the distance a scoring command needs.
struct Models {
    cm: Option<Arc<ConsistencyModel>>,
    den: Option<DenoiserModel>,
    extractor: Option<FeatureExtractor>,
}

impl Models {
    fn load(cfg: &RunConfig) -> Result<Models> {
        Ok(Models {
            cm: match cfg.get("model")? {
                "" => None,
                p => Some(Arc::new(load_consistency(p)?)),
            },
            den: match cfg.get("denoiser")? {
                "" => None,
                p => Some(load_denoiser(p)?),
            },
            extractor: match cfg.get("extractor")? {
                "" => None,
                p => Some(FeatureExtractor::load(p)?),
            },
        })
    }

    fn metric(&self, name: &str, cfg: &RunConfig) -> Result<Metric> {
        Metric::from_name(
            name,
            &MetricContext {
                in_channels: cfg.usize("channels")?,
                resolution: cfg.usize("resolution")?,
                extractor: self.extractor.clone(),
                consistency: self.cm.clone(),
                gamma: Some(cfg.usize("gamma")?),
                n_z: Some(cfg.usize("n_z")?),
            },
        )
    }

    fn denoiser(&self) -> Result<&dyn Denoiser> {
        self.den
            .as_ref()
            .map(|d| d as &dyn Denoiser)
            .ok_or_else(|| Error::Config("'denoiser' must be set".into()))
    }

    fn projector(&self, kind: &str) -> Result<Box<dyn Projector + '_>> {
        Ok(match kind {
            "cm" => {
                let m = self.cm.as_ref().ok_or_else(|| Error::Config("'model' must be set".into()))?;
                Box::new(CmFull(m.as_ref() as &dyn ConsistencyFn))
            }
            "single" => Box::new(SingleStep(self.denoiser()?)),
            "ode" => Box::new(OdeFull(self.denoiser()?)),
            k => return Err(Error::Config(format!("unknown projector '{}'", k))),
        })
    }
}

/// Builds the configured scorer and hands it to `f`.
fn with_scorer<T>(cfg: &RunConfig, f: impl FnOnce(&dyn Scorer, &ScoreVector) -> Result<T>) -> Result<T> {
    let models = Models::load(cfg)?;
    let method = cfg.get("method")?;
    let mut meta = ScoreVector::new(Vec::new());
    meta.seed = cfg.u64("seed")?;
    meta.method = method.to_string();
    meta.config_hash = cfg.hash();
    if method == "msma" {
        let fit = load_data(cfg.require("msma_fit_data")?, cfg)?;
        let scorer = MsmaScorer::fit(
            models.denoiser()?,
            cfg.usize_list("msma_indices")?,
            cfg.usize("n_proj")?,
            &fit,
            meta.seed,
        )?;
        meta.metric = "l2".into();
        return f(&scorer, &meta);
    }
    let metric = models.metric(cfg.get("metric")?, cfg)?;
    meta.metric = cfg.get("metric")?.to_string();
    let projector = models.projector(cfg.get("projector")?)?;
    let pr = PrConfig {
        alpha: cfg.usize("alpha")?,
        beta: cfg.usize("beta")?,
        n_alpha: cfg.usize("n_alpha")?,
        n_beta: cfg.usize("n_beta")?,
        ensemble: cfg.pairs("ensemble")?,
    };
    match method {
        "proj" => {
            let scorer = ProjectionScorer {
                projector: projector.as_ref(),
                distance: &metric,
                index: cfg.usize("index")?,
                n: cfg.usize("n_proj")?,
            };
            projector.schedule().check_index(scorer.index)?;
            f(&scorer, &meta)
        }
        "pr" | "pr-ensemble" => {
            let ensemble = method == "pr-ensemble";
            if ensemble {
                meta.ensemble = pr.ensemble.clone();
            } else {
                meta.ensemble = vec![(pr.alpha, pr.beta)];
            }
            pr.validate(projector.schedule())?;
            let scorer = PrScorer {
                projector: projector.as_ref(),
                distance: &metric,
                cfg: pr,
                ensemble,
            };
            f(&scorer, &meta)
        }
        m => Err(Error::Config(format!("unknown method '{}'", m))),
    }
}

/// Scores `data` and writes `<out>/scores.prtc` (with its manifest) and
/// `<out>/scores.csv`. Returns the score file path.
pub fn cmd_score(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_data(cfg.require("data")?, cfg)?;
    let out = cfg.out_dir()?;
    let path = out.join("scores.prtc");
    with_scorer(cfg, |scorer, meta| {
        let mut sv = meta.clone();
        sv.scores = batch_score(&data, scorer, meta.seed)?;
        sv.save(&path)?;
        let mut csv = String::from("index,score\n");
        for (i, s) in sv.scores.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", i, s);
        }
        write_text(&out.join("scores.csv"), &csv)
    })?;
    write_config(&out, cfg)?;
    Ok(path)
}

/// With `id_scores`/`ood_scores` set, reports on those files (paired in
/// order); otherwise scores `id_data` and `ood_data` with the configured
/// method. `out` must not exist yet.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let out = PathBuf::from(cfg.require("out")?);
    let seed = cfg.u64("seed")?;
    if !cfg.get("id_scores")?.is_empty() || !cfg.get("ood_scores")?.is_empty() {
        let ids = cfg.list("id_scores")?;
        let oods = cfg.list("ood_scores")?;
        if ids.len() != oods.len() {
            return Err(Error::Config(format!(
                "{} id score files but {} ood score files",
                ids.len(),
                oods.len()
            )));
        }
        let mut rows = Vec::new();
        let mut seeds = Vec::new();
        for (i, o) in ids.iter().zip(&oods) {
            let si = ScoreVector::load(i)?;
            let so = ScoreVector::load(o)?;
            // paths are recorded relative to the report so reruns elsewhere match
            let hash = |p: &str| -> Result<String> {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                let abs = |q: &Path| std::path::absolute(q).map_err(|e| Error::io(q, e));
                let rel = pathdiff::diff_paths(abs(Path::new(p))?, abs(&out)?)
                    .unwrap_or_else(|| PathBuf::from(p));
                Ok(format!("{}@{}", rel.display(), sha256_hex(&bytes)))
            };
            rows.push(MetricRow {
                method: if si.method.is_empty() { "scores".into() } else { si.method.clone() },
                task: cfg.get("task")?.to_string(),
                seed: si.seed,
                auroc: auroc(&si.scores, &so.scores)?,
                tnr95: tnr_at_tpr(&si.scores, &so.scores, DEFAULT_TPR)?,
                id_scores: hash(i)?,
                ood_scores: hash(o)?,
            });
            seeds.push(si.seed);
        }
        seeds.sort();
        seeds.dedup();
        report_rows(rows, &cfg.hash(), &seeds, &out)?;
    } else {
        let task = Task {
            name: cfg.get("task")?.to_string(),
            id: load_data(cfg.require("id_data")?, cfg)?,
            ood: load_data(cfg.require("ood_data")?, cfg)?,
        };
        with_scorer(cfg, |scorer, meta| {
            let spec = BenchmarkSpec {
                methods: vec![Method {
                    name: format!("{}-{}", meta.method, meta.metric),
                    seed,
                    scorer,
                    metric: meta.metric.clone(),
                    ensemble: meta.ensemble.clone(),
                }],
                tasks: vec![task],
                config_hash: cfg.hash(),
                sweeps: Vec::new(),
            };
            run_benchmark(&spec, &out).map(|_| ())
        })?;
    }
    write_config(&out, cfg)?;
    Ok(out)
}

/// AUROC per variant and schedule index, written to `<out>/sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<PathBuf> {
    let id = load_data(cfg.require("id_data")?, cfg)?;
    let ood = load_data(cfg.require("ood_data")?, cfg)?;
    let models = Models::load(cfg)?;
    let names = cfg.list("variants")?;
    let mut parts = Vec::new();
    for name in &names {
        let (kind, metric) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("variant '{}' is not <projector>-<metric>", name)))?;
        parts.push((models.projector(kind)?, models.metric(metric, cfg)?));
    }
    let variants: Vec<SweepVariant> = names
        .iter()
        .zip(&parts)
        .map(|(name, (p, m))| SweepVariant {
            name: name.clone(),
            projector: p.as_ref(),
            distance: m,
        })
        .collect();
    let table = sweep_timesteps(&variants, &id, &ood, cfg.usize("n_proj")?, cfg.u64("seed")?)?;
    let out = cfg.out_dir()?;
    let path = out.join("sweep.csv");
    write_text(&path, &table.to_csv())?;
    if cfg.bool("svg")? {
        write_text(&out.join("sweep.svg"), &table.to_svg())?;
    }
    for name in &names {
        if let Some((i, a)) = table.best(name) {
            info!("{}: best index {} (AUROC {:.4})", name, i, a);
        }
    }
    write_config(&out, cfg)?;
    Ok(path)
}

/// Picks `(alpha, beta)` from `grid` on ID data against its rotations.
/// Writes `<out>/selection.csv` and `<out>/manifest.txt`.
pub fn cmd_select_hparams(cfg: &RunConfig) -> Result<(usize, usize)> {
    let id = load_data(cfg.require("data")?, cfg)?;
    let models = Models::load(cfg)?;
    let metric = models.metric(cfg.get("metric")?, cfg)?;
    let projector = models.projector(cfg.get("projector")?)?;
    let grid = cfg.pairs("grid")?;
    for &(a, b) in &grid {
        projector.schedule().check_index(a)?;
        projector.schedule().check_index(b)?;
    }
    let (best, table) = select_hparams_rotated(
        projector.as_ref(),
        &metric,
        &id,
        &grid,
        cfg.usize("n_alpha")?,
        cfg.usize("n_beta")?,
        cfg.u64("seed")?,
    )?;
    let out = cfg.out_dir()?;
    let mut csv = String::from("alpha,beta,auroc\n");
    for ((a, b), v) in &table {
        let _ = writeln!(csv, "{},{},{}", a, b, v);
    }
    write_text(&out.join("selection.csv"), &csv)?;
    write_text(
        &out.join("manifest.txt"),
        &format!(
            "alpha={}\nbeta={}\nconfig_hash={}\ncode_version={}\n",
            best.0,
            best.1,
            cfg.hash(),
            CODE_VERSION
        ),
    )?;
    write_config(&out, cfg)?;
    Ok(best)
}

/// Runs `command`, returning a one-line summary of what was written.
pub fn run(command: &str, cfg: &RunConfig) -> Result<String> {
    Ok(match command {
        "train-diffusion" => format!("denoiser: {}", cmd_train_diffusion(cfg)?.display()),
        "distill" => format!("consistency model: {}", cmd_distill(cfg)?.display()),
        "score" => format!("scores: {}", cmd_score(cfg)?.display()),
        "evaluate" => format!("report: {}", cmd_evaluate(cfg)?.display()),
        "sweep" => format!("sweep: {}", cmd_sweep(cfg)?.display()),
        "select-hparams" => {
            let (a, b) = cmd_select_hparams(cfg)?;
            format!("alpha={} beta={}", a, b)
        }
        c => return Err(Error::Config(format!("unknown command '{}' (expected one of {:?})", c, COMMANDS))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut c = RunConfig::parse("# run\nseed = 4\nmetric=l2  # trailing\n\n").unwrap();
        assert_eq!(c.u64("seed").unwrap(), 4);
        assert_eq!(c.get("metric").unwrap(), "l2");
        assert_eq!(c.get("method").unwrap(), "pr-ensemble");
        c.set("alpha", "5").unwrap();
        assert_eq!(c.usize("alpha").unwrap(), 5);
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("seed").is_err());
        assert!(c.set("nope", "1").is_err());
    }

    #[test]
    fn typed_getters() {
        let c = RunConfig::parse("ensemble = 7:6, 8:8\nlr = 1e-3\nseed = x").unwrap();
        assert_eq!(c.pairs("ensemble").unwrap(), vec![(7, 6), (8, 8)]);
        assert_eq!(c.f64("lr").unwrap(), 1e-3);
        assert!(c.u64("seed").is_err());
        assert!(c.require("model").is_err());
        assert_eq!(c.usize_list("channel_multipliers").unwrap(), vec![1, 2]);
    }

    #[test]
    fn resolved_text_roundtrips_and_hash_ignores_out() {
        let mut c = RunConfig::default();
        c.set("steps", "7").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let mut d = c.clone();
        d.set("out", "/elsewhere").unwrap();
        assert_eq!(c.hash(), d.hash());
        d.set("seed", "9").unwrap();
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn toy_selector() {
        let mut c = RunConfig::default();
        c.set("toy_samples_per_class", "6").unwrap();
        c.set("resolution", "8").unwrap();
        let b = load_data("toy:0,2:1..4", &c).unwrap();
        assert_eq!(b.len(), 6);
        assert!(load_data("toy:3:0..2", &c).is_err());
        assert!(load_data("toy:0:4..2", &c).is_err());
        assert!(load_data("toy:0", &c).is_err());
    }
}
