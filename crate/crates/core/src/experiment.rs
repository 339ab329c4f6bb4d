//! Training runs: configuration, run manifest, per-epoch metrics and plots.
//!
//! Metrics CSV layout (`#` lines carry the run constants):
//!
//! ```text
//! # model cnn2 method topk schedule schedule2 seed 7 batch_size 128 ...
//! epoch,step,train_loss,val_accuracy,wall_seconds
//! 1,39,2.013377,0.3120,41.207
//! ```
//!
//! `step` is the number of optimizer steps taken so far, `train_loss` the
//! mean batch loss over the epoch, and `wall_seconds` the time since
//! training started.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{MethodKind, MethodParams};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{augment, build_model, checkpoint, AdamConfig, ModelName, Trainer};
use crate::schedule::Schedule;

// Independent seed derivations, so weight init, data order and augmentation
// never share a generator stream with the approximation noise.
const INIT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const DATA_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const AUGMENT_SALT: u64 = 0x8CB9_2BA7_2F3D_8DD7;

pub const METRICS_HEADER: &str = "epoch,step,train_loss,val_accuracy,wall_seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Cifar10 { dir: PathBuf },
    Mnist { dir: PathBuf },
    /// Seeded class-prototype images; see [`data::synthetic`].
    Synthetic {
        train: usize,
        test: usize,
        channels: usize,
        size: usize,
        noise: f64,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Cifar10 { dir } => data::load_cifar10(dir),
            DatasetSpec::Mnist { dir } => data::load_mnist(dir),
            DatasetSpec::Synthetic { train, test, channels, size, noise, seed } => {
                data::synthetic(*train, *test, (*channels, *size, *size), *noise, *seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelName,
    pub method: MethodKind,
    /// `full`, a built-in schedule name, or a schedule file path.
    pub schedule: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub dataset: DatasetSpec,
    /// Train on this many images (a seeded-shuffle prefix).
    pub subset: Option<usize>,
    /// Evaluate on the first this-many test images.
    pub eval_limit: Option<usize>,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(model: ModelName, dataset: DatasetSpec) -> Self {
        TrainConfig {
            model,
            method: MethodKind::Full,
            schedule: "full".into(),
            epochs: 1,
            batch_size: 128,
            seed: 0,
            augment: true,
            dataset,
            subset: None,
            eval_limit: None,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn resolve_schedule(&self, num_layers: usize) -> Result<Schedule> {
        match self.schedule.as_str() {
            "full" | "none" => Schedule::full(num_layers, 1),
            name if name.starts_with("schedule") && !Path::new(name).exists() => {
                Schedule::named(name, num_layers, self.method)
            }
            path => {
                let text = fs::read_to_string(path).map_err(|e| Error::Data {
                    path: path.into(),
                    message: format!("cannot read schedule: {e}"),
                })?;
                Schedule::parse(&text, num_layers)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub epochs_completed: usize,
    pub steps: u64,
    pub best_val_accuracy: f64,
    pub final_train_loss: f64,
    /// Time inside training steps only (no data loading or evaluation).
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub code_version: String,
    /// The resolved schedule in file syntax.
    pub schedule_text: String,
    pub approx_fraction: f64,
    pub conv_layers: usize,
    pub approximated_layers: Vec<usize>,
    /// Approximated layers whose geometry sends `topk` to the exact path.
    pub topk_fallback_layers: Vec<usize>,
    pub param_count: usize,
    pub train_images: usize,
    pub steps_per_epoch: usize,
    pub results: Option<RunResults>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.into(),
            message: format!("cannot read manifest: {e}"),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.3}",
            self.epoch, self.step, self.train_loss, self.val_accuracy, self.wall_seconds
        )
    }
}

/// Where a run writes its files; `None` skips that output.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub manifest: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub plot: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub epochs: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    /// Validation accuracy of the untrained network.
    pub initial_val_accuracy: f64,
}

impl RunOutcome {
    pub fn results(&self) -> &RunResults {
        self.manifest.results.as_ref().expect("completed run has results")
    }

    /// One-line report, with accuracy delta (percentage points) and
    /// wall-clock speedup against `baseline` when given.
    pub fn summary(&self, baseline: Option<&RunManifest>) -> String {
        let r = self.results();
        let mut line = format!(
            "best_val_accuracy {:.4} train_seconds {:.1}",
            r.best_val_accuracy, r.train_seconds
        );
        if let Some(b) = baseline.and_then(|b| b.results.as_ref()) {
            let delta = 100.0 * (r.best_val_accuracy - b.best_val_accuracy);
            let speedup = b.train_seconds / r.train_seconds;
            write!(line, " accuracy_delta_pp {delta:+.2} speedup {speedup:.3}").expect("string write");
        }
        line
    }
}

fn constants_comment(cfg: &TrainConfig, schedule: &Schedule) -> String {
    let a = &cfg.adam;
    format!(
        "# model {} method {} schedule {} approx_fraction {:.4} seed {} batch_size {} epochs {} augment {} subset {}\n\
         # adam beta1 {} beta2 {} eps {:e} lr0 {:e} lr_decay_per_epoch {}\n",
        cfg.model,
        cfg.method,
        cfg.schedule,
        schedule.approx_fraction(),
        cfg.seed,
        cfg.batch_size,
        cfg.epochs,
        cfg.augment,
        cfg.subset.map_or("all".to_string(), |s| s.to_string()),
        a.beta1,
        a.beta2,
        a.eps,
        a.lr,
        a.decay,
    )
}

/// Runs training as configured. The manifest is written before the first
/// step and rewritten with results at the end.
pub fn run(cfg: &TrainConfig, out: &RunOutputs) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, mut test) = cfg.dataset.load()?;
    if let Some(limit) = cfg.eval_limit {
        let idx: Vec<usize> = (0..limit.min(test.len())).collect();
        test = test.select(&idx);
    }
    let shape = train.image_shape();
    let mut net = build_model::<f32>(cfg.model, shape, data::NUM_CLASSES, cfg.seed ^ INIT_SALT)?;
    let schedule = cfg.resolve_schedule(net.conv_count())?;
    let convs = net.convs();
    let approximated = schedule.approximated_layers();
    let fallbacks: Vec<usize> = approximated
        .iter()
        .copied()
        .filter(|&l| {
            let topk = (0..schedule.period()).any(|p| schedule.cell(l, p) == MethodKind::TopK);
            topk && !convs[l].sparse_capable
        })
        .collect();
    let train_images = cfg.subset.unwrap_or(train.len());
    let data_seed = cfg.seed ^ DATA_SALT;
    // validates batch_size <= subset <= N before anything is written
    let steps_per_epoch = data::batch_indices(train.len(), cfg.batch_size, data_seed, 0, cfg.subset)?.len();

    let mut manifest = RunManifest {
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        schedule_text: schedule.emit(),
        approx_fraction: schedule.approx_fraction(),
        conv_layers: convs.len(),
        approximated_layers: approximated,
        topk_fallback_layers: fallbacks,
        param_count: net.param_count(),
        train_images,
        steps_per_epoch,
        results: None,
    };
    if let Some(p) = &out.manifest {
        manifest.write(p)?;
    }
    let mut metrics = match &out.metrics {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            write!(w, "{}", constants_comment(cfg, &schedule))?;
            writeln!(w, "{METRICS_HEADER}")?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };

    let eval_batch = 256;
    let initial_val_accuracy = crate::nn::evaluate(&mut net, &test.images, &test.labels, eval_batch)?;
    let params = MethodParams::for_batch(cfg.batch_size);
    let mut trainer = Trainer::new(net, schedule, params, cfg.adam, cfg.seed)?;
    let started = Instant::now();
    let mut train_seconds = 0.0;
    let mut step: u64 = 0;
    let mut step_losses = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_SALT);
        aug_rng.set_stream(epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in data::batches(&train, cfg.batch_size, data_seed, epoch as u64, cfg.subset)? {
            let images = if cfg.augment {
                augment(&batch.images, &mut aug_rng)
            } else {
                batch.images
            };
            let t0 = Instant::now();
            let stats = trainer.train_step(images, &batch.labels, step, epoch)?;
            train_seconds += t0.elapsed().as_secs_f64();
            step += 1;
            batches += 1;
            epoch_loss += stats.loss;
            step_losses.push(stats.loss);
        }
        let val_accuracy = trainer.evaluate(&test.images, &test.labels, eval_batch)?;
        best = best.max(val_accuracy);
        let m = EpochMetrics {
            epoch: epoch + 1,
            step,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} step {} loss {:.4} val_acc {:.4} ({:.1}s)",
            m.epoch,
            m.step,
            m.train_loss,
            m.val_accuracy,
            m.wall_seconds
        );
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", m.csv_row())?;
            w.flush()?;
        }
        epochs.push(m);
    }

    manifest.results = Some(RunResults {
        epochs_completed: epochs.len(),
        steps: step,
        best_val_accuracy: best,
        final_train_loss: epochs.last().map_or(f64::NAN, |e| e.train_loss),
        train_seconds,
    });
    if let Some(p) = &out.manifest {
        manifest.write(p)?;
    }
    if let Some(p) = &out.plot {
        fs::write(p, render_svg(&epochs, &format!("{} / {} / {}", cfg.model, cfg.method, cfg.schedule)))?;
    }
    if let Some(p) = &out.checkpoint {
        checkpoint::save(&mut trainer.net, p)?;
    }
    Ok(RunOutcome {
        manifest,
        epochs,
        step_losses,
        initial_val_accuracy,
    })
}

/// Metrics CSV text with the wall-clock column removed, for comparing runs.
pub fn strip_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            if l.starts_with('#') {
                l.to_string()
            } else {
                l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Two-panel SVG: training loss and validation accuracy per epoch.
pub fn render_svg(epochs: &[EpochMetrics], title: &str) -> String {
    const W: f64 = 360.0;
    const H: f64 = 240.0;
    const M: f64 = 40.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"10\" y=\"16\">{}</text>\n",
        2.0 * W,
        H + 20.0,
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    let panels: [(&str, Vec<f64>, &str); 2] = [
        ("train loss", epochs.iter().map(|e| e.train_loss).collect(), "#c0392b"),
        ("val accuracy", epochs.iter().map(|e| e.val_accuracy).collect(), "#2c7fb8"),
    ];
    for (i, (label, ys, color)) in panels.iter().enumerate() {
        let x0 = i as f64 * W;
        let (lo, hi) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
        let px = |j: usize| x0 + M + (W - 2.0 * M) * j as f64 / (ys.len().max(2) - 1) as f64;
        let py = |y: f64| 20.0 + H - M - (H - 2.0 * M) * (y - lo) / (hi - lo);
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
            x0 + M,
            20.0 + M,
            W - 2.0 * M,
            H - 2.0 * M
        );
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{label}</text>", x0 + M, 20.0 + M - 6.0);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{hi:.3}</text>", x0 + 2.0, 20.0 + M + 4.0);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{lo:.3}</text>", x0 + 2.0, 20.0 + H - M);
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(j, &y)| format!("{:.1},{:.1}", px(j), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}
