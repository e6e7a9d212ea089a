//! Training loop, evaluation, inference and the ablation runner.

use std::path::Path;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use teocc_core::camnet::LiftGeometry;
use teocc_core::fusionhead::OccupancyPrediction;
use teocc_core::model::{Model, ModelConfig, Sample};
use teocc_core::scenesim::{generate_episode, CameraModel, Episode};
use teocc_core::train::{evaluate_samples, StepLosses, Trainer};
use teocc_core::ConfusionMatrix;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::load_dataset;
use crate::error::{io_err, Error, Result};
use crate::memory;

const TRAINER_SALT: u64 = 0x7472_6169_6e65_7201;
const BATCH_SALT: u64 = 0x6261_7463_6865_7302;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
}

impl Dataset {
    /// The last `val` episodes become the validation split.
    pub fn split(mut episodes: Vec<Episode>, val: usize) -> Result<Self> {
        if val >= episodes.len() {
            return Err(Error::EmptyDataset(format!("{} episodes leave nothing to train on after {} validation episodes", episodes.len(), val)));
        }
        let val = episodes.split_off(episodes.len() - val);
        Ok(Self { train: episodes, val })
    }

    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        Self::split(load_dataset(Path::new(&cfg.data_dir))?, cfg.val_episodes)
    }

    /// Camera rig shared by every episode.
    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        shared_cameras(self.train.iter().chain(&self.val))
    }
}

/// Episode `i` uses seed `seed + i`.
pub fn generate_episodes(cfg: &TrainConfig, count: usize, seed: u64) -> Result<Vec<Episode>> {
    let sim = cfg.sim_config()?;
    (0..count).map(|i| Ok(generate_episode(&sim, seed.wrapping_add(i as u64))?)).collect()
}

fn shared_cameras<'a>(mut episodes: impl Iterator<Item = &'a Episode>) -> Result<Vec<CameraModel>> {
    let first = episodes.next().ok_or_else(|| Error::EmptyDataset("no episodes".into()))?;
    if episodes.any(|e| e.cameras != first.cameras) {
        return Err(Error::Config("episodes use different camera rigs".into()));
    }
    Ok(first.cameras.clone())
}

fn num_classes(episodes: &[Episode]) -> Result<usize> {
    let ep = episodes.first().ok_or_else(|| Error::EmptyDataset("no episodes".into()))?;
    Ok(ep.config.labels().num_classes())
}

/// Every `(episode, t)` with a full history.
pub fn sample_index(episodes: &[Episode], history: usize) -> Vec<(usize, usize)> {
    episodes.iter().enumerate().flat_map(|(e, ep)| (history..ep.frames.len()).map(move |t| (e, t))).collect()
}

pub fn build_samples(episodes: &[Episode], cfg: &ModelConfig) -> Result<Vec<Sample>> {
    sample_index(episodes, cfg.history).into_iter().map(|(e, t)| Ok(Sample::from_episode(&episodes[e], t, cfg)?)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub name: String,
    pub wall_ms: f64,
    pub peak_mem_bytes: u64,
}

/// One NDJSON line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<StepLosses>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_iou: Option<Vec<Option<f64>>>,
    pub wall_ms: f64,
    pub peak_mem_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub loss_curve: Vec<StepLosses>,
    pub phases: Vec<PhaseStats>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self { per_class_iou: cm.per_class_iou(), miou: cm.miou(), loss_curve: Vec::new(), phases: Vec::new() }
    }

    pub fn phase(&self, name: &str) -> Option<&PhaseStats> {
        self.phases.iter().find(|p| p.name == name)
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub cameras: Vec<CameraModel>,
    pub geometry: LiftGeometry,
    pub report: MetricsReport,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::capture(cfg, &self.trainer.model, self.trainer.step, &self.trainer.rng, &self.cameras)
    }
}

/// Pooled confusion counts over every full-history frame of `episodes`.
pub fn evaluate(model: &Model, geometry: &LiftGeometry, episodes: &[Episode]) -> Result<MetricsReport> {
    let index = sample_index(episodes, model.config.history);
    if index.is_empty() {
        return Err(Error::EmptyDataset("no frame with a full history to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (e, t) in index {
        let s = Sample::from_episode(&episodes[e], t, &model.config)?;
        cm.merge(&evaluate_samples(model, geometry, &[&s])?)?;
    }
    Ok(MetricsReport::from_confusion(&cm))
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, episodes: &[Episode]) -> Result<MetricsReport> {
    let model = ckpt.inference_model()?;
    let geometry = model.lift_geometry(&ckpt.cameras);
    evaluate(&model, &geometry, episodes)
}

/// Main-branch prediction for frame `frame` of `episode`.
pub fn infer(ckpt: &Checkpoint, episode: &Episode, frame: usize) -> Result<OccupancyPrediction> {
    let model = ckpt.inference_model()?;
    let geometry = model.lift_geometry(&episode.cameras);
    let sample = Sample::from_episode(episode, frame, &model.config)?;
    Ok(model.infer(&geometry, &sample)?)
}

/// Trains on `data.train`, validating on `data.val`. Every record is
/// passed to `sink` as soon as it exists. The train phase covers batch
/// assembly and optimizer steps only.
pub fn train(cfg: &TrainConfig, data: &Dataset, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = num_classes(&data.train)?;
    let model_cfg = cfg.model_config(classes)?;
    let cameras = data.cameras()?;
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    let geometry = model.lift_geometry(&cameras);
    let mut trainer = Trainer::new(model, cfg.train_settings(), cfg.seed ^ TRAINER_SALT);
    let index = sample_index(&data.train, model_cfg.history);
    if index.is_empty() {
        return Err(Error::EmptyDataset("no training frame with a full history".into()));
    }
    let mut batch_rng = teocc_core::Rng::seed_from_u64(cfg.seed ^ BATCH_SALT);

    let mut curve = Vec::with_capacity(cfg.steps);
    let mut train_ms = 0.0;
    let mut train_peak = 0usize;
    let mut val_ms = 0.0;
    let mut val_peak = 0usize;
    let mut last_val = None;
    for step in 1..=cfg.steps {
        let base = memory::reset_peak();
        let start = Instant::now();
        let samples = (0..cfg.batch_size)
            .map(|_| {
                let (e, t) = index[batch_rng.random_range(0..index.len())];
                Sample::from_episode(&data.train[e], t, &model_cfg)
            })
            .collect::<teocc_core::Result<Vec<Sample>>>()?;
        let refs: Vec<&Sample> = samples.iter().collect();
        let losses = trainer.train_step(&geometry, &refs)?;
        drop(samples);
        train_ms += start.elapsed().as_secs_f64() * 1e3;
        train_peak = train_peak.max(memory::peak_bytes().saturating_sub(base));
        curve.push(losses);
        if step % cfg.log_every == 0 || step == cfg.steps {
            sink(&MetricsRecord {
                step,
                phase: "train".into(),
                losses: Some(losses),
                miou: None,
                per_class_iou: None,
                wall_ms: train_ms,
                peak_mem_bytes: train_peak as u64,
            })?;
        }
        let validate = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps;
        if validate && !data.val.is_empty() {
            let base = memory::reset_peak();
            let start = Instant::now();
            let r = evaluate(&trainer.model, &geometry, &data.val)?;
            val_ms += start.elapsed().as_secs_f64() * 1e3;
            val_peak = val_peak.max(memory::peak_bytes().saturating_sub(base));
            sink(&MetricsRecord {
                step,
                phase: "val".into(),
                losses: None,
                miou: Some(r.miou),
                per_class_iou: Some(r.per_class_iou.clone()),
                wall_ms: val_ms,
                peak_mem_bytes: val_peak as u64,
            })?;
            last_val = Some(r);
        }
    }
    let mut report = last_val.unwrap_or(MetricsReport { per_class_iou: Vec::new(), miou: f64::NAN, loss_curve: Vec::new(), phases: Vec::new() });
    report.loss_curve = curve;
    report.phases = vec![
        PhaseStats { name: "train".into(), wall_ms: train_ms, peak_mem_bytes: train_peak as u64 },
        PhaseStats { name: "val".into(), wall_ms: val_ms, peak_mem_bytes: val_peak as u64 },
    ];
    Ok(TrainOutcome { trainer, cameras, geometry, report })
}

/// Loads the dataset named by `cfg`, trains, and writes `metrics.ndjson`,
/// `report.json`, `config.toml` and the checkpoint into `out`.
pub fn run_training(cfg: &TrainConfig, out: &Path) -> Result<(Checkpoint, MetricsReport)> {
    let data = Dataset::load(cfg)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    let log_path = out.join("metrics.ndjson");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let outcome = {
        use std::io::Write;
        let mut sink = |r: &MetricsRecord| -> Result<()> {
            let line = serde_json::to_string(r).expect("metrics records serialize");
            writeln!(log, "{}", line).and_then(|_| log.flush()).map_err(io_err(&log_path))
        };
        train(cfg, &data, &mut sink)?
    };
    let ckpt = outcome.checkpoint(cfg);
    ckpt.save(out)?;
    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&outcome.report).expect("report serializes")).map_err(io_err(&report_path))?;
    Ok((ckpt, outcome.report))
}

/// Ablation variants. The temporal ones build on each other; the last
/// three modify the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Long,
    LongShort,
    LongShortRandom,
    FusedDecoders,
    SeparateHead,
    NoRadar,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Long,
        Variant::LongShort,
        Variant::LongShortRandom,
        Variant::FusedDecoders,
        Variant::SeparateHead,
        Variant::NoRadar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Long => "long",
            Variant::LongShort => "long+short",
            Variant::LongShortRandom => "long+short+random",
            Variant::FusedDecoders => "fused-decoders",
            Variant::SeparateHead => "separate-head",
            Variant::NoRadar => "no-radar",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = TrainConfig {
            use_long: true,
            use_short: true,
            random_mask: true,
            shared_head: true,
            fused_decoders: false,
            use_radar: true,
            ..base.clone()
        };
        match self {
            Variant::Baseline => {
                c.use_long = false;
                c.use_short = false;
                c.random_mask = false;
            }
            Variant::Long => {
                c.use_short = false;
                c.random_mask = false;
            }
            Variant::LongShort => c.random_mask = false,
            Variant::LongShortRandom => {}
            Variant::FusedDecoders => c.fused_decoders = true,
            Variant::SeparateHead => c.shared_head = false,
            Variant::NoRadar => c.use_radar = false,
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{}`; expected one of {:?}", s, Variant::ALL.map(|v| v.name()))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub miou: f64,
    pub train: PhaseStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: Variant,
    pub runs: Vec<RunSummary>,
}

impl VariantStats {
    pub fn mious(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.miou).collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.mious())
    }

    /// Sample standard deviation across seeds.
    pub fn std(&self) -> f64 {
        sample_std(&self.mious())
    }

    pub fn median_train_ms(&self) -> f64 {
        median(self.runs.iter().map(|r| r.train.wall_ms).collect())
    }

    pub fn median_peak_mem(&self) -> f64 {
        median(self.runs.iter().map(|r| r.train.peak_mem_bytes as f64).collect())
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub te_on: PhaseStats,
    pub te_off: PhaseStats,
    pub memory_ratio: f64,
    pub time_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<VariantStats>,
}

/// Largest tolerated shortfall, in mIoU fraction, for the
/// non-inferiority checks.
pub const NON_INFERIORITY_MARGIN: f64 = 0.005;

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&VariantStats> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Component ordering over the temporal variants.
    pub fn component_check(&self) -> Option<TrendCheck> {
        let [b, l, ls, lsr] = [Variant::Baseline, Variant::Long, Variant::LongShort, Variant::LongShortRandom].map(|v| self.row(v));
        let (b, l, ls, lsr) = (b?, l?, ls?, lsr?);
        let m = [b.mean(), l.mean(), ls.mean(), lsr.mean()];
        let spread = b.std().max(l.std());
        let gain = m[1] - m[0];
        let passed = m[0] < m[1] && m[1] < m[2] && m[2] <= m[3] && gain > spread;
        Some(TrendCheck {
            name: "baseline < long < long+short <= long+short+random".into(),
            passed,
            detail: format!(
                "means {:.4} / {:.4} / {:.4} / {:.4}; long gain {:+.4} vs seed spread {:.4}",
                m[0], m[1], m[2], m[3], gain, spread
            ),
        })
    }

    fn non_inferior(&self, name: &str, better: Variant, worse: Variant) -> Option<TrendCheck> {
        let (a, b) = (self.row(better)?, self.row(worse)?);
        let d = a.mean() - b.mean();
        Some(TrendCheck {
            name: name.into(),
            passed: d > -NON_INFERIORITY_MARGIN,
            detail: format!("{} {:.4} vs {} {:.4}: {:+.4} ({})", better.name(), a.mean(), worse.name(), b.mean(), d, if d > 0.0 { "expected direction" } else { "against expected direction" }),
        })
    }

    pub fn decoder_check(&self) -> Option<TrendCheck> {
        self.non_inferior("independent decoders >= fused decoders", Variant::LongShortRandom, Variant::FusedDecoders)
    }

    pub fn head_check(&self) -> Option<TrendCheck> {
        self.non_inferior("shared head >= separate head", Variant::LongShortRandom, Variant::SeparateHead)
    }

    pub fn radar_check(&self) -> Option<TrendCheck> {
        let (a, b) = (self.row(Variant::LongShortRandom)?, self.row(Variant::NoRadar)?);
        Some(TrendCheck {
            name: "radar on > radar off".into(),
            passed: a.mean() > b.mean(),
            detail: format!("with radar {:.4}, without {:.4}", a.mean(), b.mean()),
        })
    }

    pub fn checks(&self) -> Vec<TrendCheck> {
        [self.component_check(), self.decoder_check(), self.head_check(), self.radar_check()].into_iter().flatten().collect()
    }

    /// Train-phase cost of the full model against the baseline, which
    /// differ only in the temporal-enhancement switches.
    pub fn overhead(&self) -> Option<OverheadReport> {
        let (on, off) = (self.row(Variant::LongShortRandom)?, self.row(Variant::Baseline)?);
        let stats = |v: &VariantStats, name: &str| PhaseStats { name: name.into(), wall_ms: v.median_train_ms(), peak_mem_bytes: v.median_peak_mem() as u64 };
        let (te_on, te_off) = (stats(on, "te_on"), stats(off, "te_off"));
        Some(OverheadReport {
            memory_ratio: te_on.peak_mem_bytes as f64 / te_off.peak_mem_bytes as f64,
            time_ratio: te_on.wall_ms / te_off.wall_ms,
            te_on,
            te_off,
        })
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<20} {:>8} {:>8}  {}\n", "variant", "mean", "std", "per-seed mIoU");
        for r in &self.rows {
            let per: Vec<String> = r.mious().iter().map(|m| format!("{:.4}", m)).collect();
            s += &format!("{:<20} {:>8.4} {:>8.4}  {}\n", r.variant.name(), r.mean(), r.std(), per.join(" "));
        }
        s
    }
}

/// Trains every variant with seeds `base.seed .. base.seed + seeds` and
/// records the final validation mIoU. `progress` sees each finished run.
pub fn run_ablation(
    base: &TrainConfig,
    data: &Dataset,
    variants: &[Variant],
    seeds: usize,
    progress: &mut dyn FnMut(Variant, &RunSummary),
) -> Result<AblationReport> {
    if data.val.is_empty() {
        return Err(Error::EmptyDataset("ablation needs validation episodes".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut runs = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let cfg = TrainConfig { seed: base.seed.wrapping_add(s as u64), eval_every: 0, ..v.apply(base) };
            let out = train(&cfg, data, &mut |_| Ok(()))?;
            let train = out.report.phase("train").cloned().expect("train phase is always recorded");
            let run = RunSummary { seed: cfg.seed, miou: out.report.miou, train };
            progress(v, &run);
            runs.push(run);
        }
        rows.push(VariantStats { variant: v, runs });
    }
    Ok(AblationReport { rows })
}
