use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use kpf_core::classical::{estimate_classical_masked, EstimatorConfig, Method};
use kpf_core::cluster::{spectral_cluster, ClusterConfig};
use kpf_core::confidence::LevelStatistic;
use kpf_core::eval::{
    error_stats, format_table, make_folds, random_scene_illuminants, summarize, synth_scene,
    DatasetIndex, ErrorStats, EvalItem, Prediction, SynthSpec,
};
use kpf_core::fitting::{fit_local, FitConfig, Mode};
use kpf_core::image_io::{read_linear, write_pgm, write_ppm};
use kpf_core::kernel::{illumination_vector_map, ReferenceImage};
use kpf_core::net::{
    confidence_training_mean, gradient_check, read_checkpoint, train, write_checkpoint,
    GradCheckConfig, Network, NetworkSpec, Sidecar, SourceScene, TrainConfig,
};
use kpf_core::pipeline::{
    correct_image, estimate_with_network, EstimateConfig, EstimateJson, DEFAULT_TRAINING_MEAN,
};
use kpf_core::{apply_diagonal, gains_from_illuminant, Error, IlluminantVector};

#[derive(Parser)]
#[command(
    name = "kpf",
    version,
    about = "Kernel-field illuminant estimation toolkit"
)]
struct Cli {
    /// Seed for every random stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file whose keys mirror the long flag names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the illuminant(s) of one image.
    Estimate(EstimateArgs),
    /// Train the kernel network on a dataset index.
    Train(TrainArgs),
    /// Score an estimator on a dataset index.
    Eval(EvalArgs),
    /// Generate synthetic one- or two-illuminant scenes.
    Synth(SynthArgs),
    /// Cluster an illumination map and fit each region.
    Cluster(ClusterArgs),
    /// Compare analytic and numeric gradients of the training loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Default)]
struct LocalArgs {
    /// Number of spectral clusters.
    #[arg(long)]
    clusters: Option<usize>,
    /// Regions closer than this (degrees) are merged into one.
    #[arg(long)]
    merge_threshold: Option<f64>,
    /// Largest clustering graph before downsampling.
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Pixels darker than this are ignored by fitting and clustering.
    #[arg(long)]
    dark_threshold: Option<f64>,
}

#[derive(Args)]
struct EstimateArgs {
    image: PathBuf,
    /// Classical estimator name or checkpoint path.
    #[arg(long)]
    method: Option<String>,
    /// Also write the corrected, display-gamma image.
    #[arg(long)]
    correct: bool,
    /// Fit one global illuminant instead of clustering.
    #[arg(long)]
    global: bool,
    #[command(flatten)]
    local: LocalArgs,
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    kernel_order: Option<usize>,
    /// Comma-separated encoder widths.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset index CSV.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Leave this fold out of training.
    #[arg(long)]
    fold: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    p_concat: Option<f64>,
    /// Save the checkpoint every N steps (0: only at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    /// Classical name, `oracle`, or a checkpoint path.
    #[arg(long)]
    method: Option<String>,
    /// Only score this fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Summarize precomputed errors (a list, or the five statistics).
    #[arg(long)]
    errors_file: Option<PathBuf>,
    #[arg(long)]
    global: bool,
    #[command(flatten)]
    local: LocalArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// `r,g,b`; give twice for a two-illuminant scene.
    #[arg(long = "illuminant")]
    illuminants: Vec<String>,
    /// Draw this many (1 or 2) random illuminants per scene instead.
    #[arg(long, conflicts_with = "illuminants")]
    random_illuminants: Option<usize>,
    /// Fraction of rows lit by the first illuminant.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// `r,g,b` relative mean of the reflectance texture.
    #[arg(long)]
    texture_mean: Option<String>,
}

#[derive(Args)]
struct ClusterArgs {
    image: PathBuf,
    /// Checkpoint that predicts the reference image.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Precomputed reference image of the same size.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    local: LocalArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[command(flatten)]
    spec: SpecArgs,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Flag > config file > default.
struct Settings {
    file: Map<String, Value>,
    seed: u64,
    out: PathBuf,
    jobs: usize,
}

impl Settings {
    fn load(cli: &Cli) -> Outcome<Self> {
        let file = match &cli.config {
            Some(p) => match serde_json::from_str(&fs::read_to_string(p)?)? {
                Value::Object(m) => m,
                _ => {
                    return Err(usage(format!(
                        "{}: config must be a JSON object",
                        p.display()
                    )))
                }
            },
            None => Map::new(),
        };
        let mut s = Settings {
            file,
            seed: 0,
            out: PathBuf::from("."),
            jobs: 1,
        };
        s.seed = s.pick(cli.seed, "seed", 0)?;
        s.out = s.pick(cli.out.clone(), "out", PathBuf::from("."))?;
        s.jobs = s.pick(cli.jobs, "jobs", 1)?;
        if s.jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        Ok(s)
    }

    fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Outcome<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| usage(format!("config key '{key}': {e}"))),
            None => Ok(default),
        }
    }

    fn pick_opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Outcome<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| usage(format!("config key '{key}': {e}")))
            })
            .transpose()
    }

    fn out_path(&self, name: &str) -> Outcome<PathBuf> {
        fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }

    fn pool(&self) -> Outcome<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| usage(e.to_string()))
    }

    fn estimate_config(&self, local: LocalArgs, global: bool) -> Outcome<EstimateConfig> {
        let d = EstimateConfig::default();
        let cfg = EstimateConfig {
            fit: FitConfig {
                dark_threshold: self.pick(
                    local.dark_threshold,
                    "dark-threshold",
                    d.fit.dark_threshold,
                )?,
                ..d.fit
            },
            cluster: ClusterConfig {
                n_clusters: self.pick(local.clusters, "clusters", d.cluster.n_clusters)?,
                merge_threshold: self.pick(
                    local.merge_threshold,
                    "merge-threshold",
                    d.cluster.merge_threshold,
                )?,
                max_nodes: self.pick(local.max_nodes, "max-nodes", d.cluster.max_nodes)?,
                seed: self.seed,
                ..d.cluster
            },
            local: !self.pick(global.then_some(true), "global", false)?,
            level_statistic: self.pick(None, "level-statistic", d.level_statistic)?,
        };
        cfg.cluster.validate()?;
        Ok(cfg)
    }

    fn network_spec(&self, spec: SpecArgs) -> Outcome<NetworkSpec> {
        let d = NetworkSpec::default();
        let s = NetworkSpec {
            input_size: self.pick(spec.input_size, "input-size", d.input_size)?,
            kernel_order: self.pick(spec.kernel_order, "kernel-order", d.kernel_order)?,
            encoder_widths: self.pick(spec.widths, "widths", d.encoder_widths)?,
            seed: self.seed,
        };
        s.validate()?;
        Ok(s)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn parse_triple(s: &str) -> Outcome<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(format!("'{s}': {e}")))?;
    <[f64; 3]>::try_from(v).map_err(|_| usage(format!("'{s}': expected r,g,b")))
}

/// A classical estimator, the ground truth, or a trained network.
enum Estimator {
    Classical(EstimatorConfig),
    Oracle,
    Network {
        network: Box<Network>,
        training_mean: f64,
    },
}

impl Estimator {
    fn resolve(method: &str, allow_oracle: bool) -> Outcome<Self> {
        if let Ok(m) = method.parse::<Method>() {
            return Ok(Estimator::Classical(EstimatorConfig::new(m)));
        }
        if method == "oracle" && allow_oracle {
            return Ok(Estimator::Oracle);
        }
        let path = Path::new(method);
        if !path.exists() {
            return Err(usage(format!(
                "'{method}' is neither an estimator name nor a checkpoint file"
            )));
        }
        let ckpt = read_checkpoint(path)?;
        let training_mean = ckpt
            .sidecar
            .as_ref()
            .and_then(|s| s.confidence_training_mean)
            .unwrap_or(DEFAULT_TRAINING_MEAN);
        Ok(Estimator::Network {
            network: Box::new(ckpt.network),
            training_mean,
        })
    }

    fn predict(&self, item: &EvalItem, cfg: &EstimateConfig) -> kpf_core::Result<Prediction> {
        match self {
            Estimator::Classical(c) => {
                estimate_classical_masked(&item.image, item.valid.as_deref(), c)
                    .map(Prediction::global)
            }
            Estimator::Oracle => {
                let per_pixel = (item.regions.len() > 1).then(|| {
                    (0..item.image.pixel_count())
                        .map(|p| {
                            item.regions
                                .iter()
                                .find(|r| r.mask.as_ref().is_none_or(|m| m[p]))
                                .map(|r| r.illuminant)
                        })
                        .collect()
                });
                Ok(Prediction {
                    global: item.regions[0].illuminant,
                    per_pixel,
                })
            }
            Estimator::Network {
                network,
                training_mean,
            } => {
                let out = estimate_with_network(network, &item.image, cfg, *training_mean)?;
                let e = &out.estimate;
                let global = IlluminantVector::from_gains(e.regions[0].gains);
                let per_pixel = (e.mode == Mode::Multi).then(|| {
                    let (h, w) = (item.image.height(), item.image.width());
                    let size = network.spec().input_size;
                    (0..h * w)
                        .map(|p| e.illuminant_at((p / w) * size / h * size + (p % w) * size / w))
                        .collect()
                });
                Ok(Prediction { global, per_pixel })
            }
        }
    }
}

fn cmd_estimate(s: &Settings, a: EstimateArgs) -> Outcome<()> {
    let method = s.pick(a.method, "method", "gray_world".to_string())?;
    let correct = s.pick(a.correct.then_some(true), "correct", false)?;
    let image = read_linear(&a.image)?;
    let cfg = s.estimate_config(a.local, a.global)?;
    let (json, corrected) = match Estimator::resolve(&method, false)? {
        Estimator::Classical(c) => {
            let l = estimate_classical_masked(&image, None, &c)?;
            let g = gains_from_illuminant(l)?;
            let json = json!({
                "mode": Mode::Single,
                "regions": [{ "gains": g.to_array(), "illuminant": l.to_array(), "pixels": image.pixel_count() }],
                "confidence": null,
            });
            (
                json,
                correct.then(|| apply_diagonal(&image, g)).transpose()?,
            )
        }
        Estimator::Network {
            network,
            training_mean,
        } => {
            let out = estimate_with_network(&network, &image, &cfg, training_mean)?;
            if let Some(mask) = out
                .estimate
                .mask
                .as_ref()
                .filter(|_| out.estimate.mode == Mode::Multi)
            {
                write_pgm(
                    &s.out_path("mask.pgm")?,
                    mask.width,
                    mask.height,
                    &mask.to_pgm_values(),
                )?;
            }
            let corrected = correct
                .then(|| correct_image(&image, &out.estimate, network.spec().input_size))
                .transpose()?;
            (
                serde_json::to_value(EstimateJson::from(&out.estimate))?,
                corrected,
            )
        }
        Estimator::Oracle => unreachable!(),
    };
    write_json(&s.out_path("estimate.json")?, &json)?;
    if let Some(img) = corrected {
        write_ppm(&s.out_path("corrected.ppm")?, &img.to_display())?;
    }
    println!("{}", serde_json::to_string(&json)?);
    Ok(())
}

fn load_index(s: &Settings, index: Option<PathBuf>) -> Outcome<DatasetIndex> {
    let path = s
        .pick_opt(index, "index")?
        .ok_or_else(|| usage("--index is required"))?;
    Ok(DatasetIndex::load(&path, s.seed)?)
}

fn cmd_train(s: &Settings, a: TrainArgs) -> Outcome<()> {
    let index = load_index(s, a.index)?;
    let fold = s.pick_opt(a.fold, "fold")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: s.pick(a.batch_size, "batch-size", d.batch_size)?,
        learning_rate: s.pick(a.learning_rate, "learning-rate", d.learning_rate)?,
        lambda1: s.pick(a.lambda1, "lambda1", d.lambda1)?,
        lambda2: s.pick(a.lambda2, "lambda2", d.lambda2)?,
        lambda3: s.pick(a.lambda3, "lambda3", d.lambda3)?,
        max_steps: s.pick(a.max_steps, "max-steps", d.max_steps)?,
        p_concat: s.pick(a.p_concat, "p-concat", d.p_concat)?,
        checkpoint_every: s.pick(a.checkpoint_every, "checkpoint-every", d.checkpoint_every)?,
        ..d
    };
    cfg.validate()?;
    let pool = s.pool()?;
    let chosen: Vec<_> = index
        .entries
        .iter()
        .filter(|e| Some(e.fold) != fold)
        .collect();
    if chosen.is_empty() {
        return Err(usage(
            "no training images left after excluding the held-out fold",
        ));
    }
    let scenes: Vec<SourceScene> = pool.install(|| {
        chosen
            .par_iter()
            .map(|e| e.load_scene())
            .collect::<kpf_core::Result<_>>()
    })?;

    let (network, adam) = match s.pick_opt(a.resume, "resume")? {
        Some(p) => {
            let c = read_checkpoint(&p)?;
            (c.network, Some(c.adam))
        }
        None => (Network::new(s.network_spec(a.spec)?)?, None),
    };
    let spec = network.spec().clone();
    let ckpt = s.out_path("model.kwb")?;
    let sidecar = |step: u64, mean: Option<f64>| Sidecar {
        step,
        seed: s.seed,
        spec: spec.clone(),
        config: cfg.clone(),
        confidence_training_mean: mean,
        level_statistic: LevelStatistic::default(),
    };
    let mut log = csv_log(&s.out_path("loss.csv")?)?;
    let out = train(network, adam, &scenes, &cfg, s.seed, |net, adam, row| {
        writeln!(
            log,
            "{},{},{},{},{}",
            row.step, row.l1, row.l2, row.penalty, row.total
        )?;
        if cfg.checkpoint_every > 0 && adam.step % cfg.checkpoint_every as u64 == 0 {
            write_checkpoint(&ckpt, net, adam, &sidecar(adam.step, None))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let mean = confidence_training_mean(&out.network, &scenes, LevelStatistic::default(), 64)?;
    write_checkpoint(
        &ckpt,
        &out.network,
        &out.adam,
        &sidecar(out.adam.step, mean),
    )?;
    let last = out.log.last();
    println!(
        "trained {} steps on {} images; final loss {}",
        out.adam.step,
        scenes.len(),
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.total))
    );
    Ok(())
}

fn csv_log(path: &Path) -> Outcome<std::io::BufWriter<fs::File>> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step,l1,l2,penalty,total")?;
    Ok(w)
}

/// A bare list of errors (JSON array or one number per line), or an object
/// with the five summary statistics.
fn read_errors_file(path: &Path) -> Outcome<ErrorStats> {
    let text = fs::read_to_string(path)?;
    if let Ok(v) = serde_json::from_str::<Value>(&text) {
        if let Value::Array(_) = v {
            let errs: Vec<f64> = serde_json::from_value(v)?;
            return Ok(error_stats(&errs)?);
        }
        let field = |k: &str| {
            v.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| usage(format!("{}: missing number '{k}'", path.display())))
        };
        return Ok(ErrorStats::from_summary(
            field("mean")?,
            field("median")?,
            field("trimean")?,
            field("best25")?,
            field("worst25")?,
        ));
    }
    let errs: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(error_stats(&errs)?)
}

fn cmd_eval(s: &Settings, a: EvalArgs) -> Outcome<()> {
    if let Some(p) = s.pick_opt(a.errors_file, "errors-file")? {
        let stats = read_errors_file(&p)?;
        let name = p
            .file_stem()
            .map_or("errors".into(), |n| n.to_string_lossy().into_owned());
        print!("{}", format_table(&[(name, stats)]));
        write_json(
            &s.out_path("eval.json")?,
            &json!({ "per_fold": [], "pooled": stats, "failures": 0 }),
        )?;
        return Ok(());
    }
    let index = load_index(s, a.index)?;
    let method = s
        .pick_opt(a.method, "method")?
        .ok_or_else(|| usage("--method is required"))?;
    let fold = s.pick_opt(a.fold, "fold")?;
    let estimator = Estimator::resolve(&method, true)?;
    let cfg = s.estimate_config(a.local, a.global)?;
    let entries: Vec<(usize, _)> = index
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| fold.is_none_or(|f| e.fold == f))
        .collect();
    if entries.is_empty() {
        return Err(usage("no images selected"));
    }
    let items: Vec<EvalItem> = s.pool()?.install(|| {
        entries
            .par_iter()
            .map(|(i, e)| {
                let id = e
                    .path
                    .file_name()
                    .map_or(format!("{i}"), |n| n.to_string_lossy().into_owned());
                e.load_item(format!("{i:05}_{id}"))
            })
            .collect::<kpf_core::Result<_>>()
    })?;
    let predictions: Vec<kpf_core::Result<Prediction>> = s.pool()?.install(|| {
        items
            .par_iter()
            .map(|it| estimator.predict(it, &cfg))
            .collect()
    });
    let name = match &estimator {
        Estimator::Network { .. } => "kernel_field".to_string(),
        _ => method.clone(),
    };
    let report = summarize(&name, items.iter().zip(predictions).collect())?;
    let rows: Vec<(String, ErrorStats)> =
        report.pooled.iter().map(|p| (name.clone(), *p)).collect();
    print!("{}", format_table(&rows));
    if report.failures > 0 {
        eprintln!("{} image(s) failed", report.failures);
    }
    write_json(&s.out_path("eval.json")?, &report)?;
    Ok(())
}

fn cmd_synth(s: &Settings, a: SynthArgs) -> Outcome<()> {
    let d = SynthSpec::default();
    let count = s.pick(a.count, "count", 1)?;
    let raw_ills = if a.illuminants.is_empty() {
        s.pick(None, "illuminant", Vec::<String>::new())?
    } else {
        a.illuminants
    };
    let illuminants = if raw_ills.is_empty() {
        d.illuminants.clone()
    } else {
        raw_ills
            .iter()
            .map(|t| IlluminantVector::from_array(parse_triple(t)?).map_err(Failure::from))
            .collect::<Outcome<Vec<_>>>()?
    };
    let random = s.pick_opt(a.random_illuminants, "random-illuminants")?;
    if random.is_some() && !raw_ills.is_empty() {
        return Err(usage("give either --illuminant or --random-illuminants"));
    }
    let texture_mean = match s.pick_opt(a.texture_mean, "texture-mean")? {
        Some(t) => parse_triple(&t)?,
        None => d.texture_mean,
    };
    let base = SynthSpec {
        height: s.pick(a.height, "height", d.height)?,
        width: s.pick(a.width, "width", d.width)?,
        illuminants,
        split: s.pick(a.split, "split", d.split)?,
        seed: s.seed,
        noise_sigma: s.pick(a.noise, "noise", d.noise_sigma)?,
        texture_mean,
    };
    let folds = if count >= 5 {
        Some(make_folds(count, 5, s.seed)?)
    } else {
        None
    };
    fs::create_dir_all(&s.out)?;
    let rows: Vec<String> = s.pool()?.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| -> Outcome<String> {
                let illuminants = match random {
                    Some(n) => random_scene_illuminants(s.seed, i as u64, n)?,
                    None => base.illuminants.clone(),
                };
                let spec = SynthSpec { seed: s.seed.wrapping_add(i as u64), illuminants, ..base.clone() };
                let scene = synth_scene(&spec)?;
                let stem = format!("scene_{i:04}");
                write_ppm(&s.out.join(format!("{stem}.ppm")), &scene.image)?;
                let labels: Vec<u8> = scene.labels.iter().map(|&l| if l == 0 { 0 } else { 128 }).collect();
                write_pgm(&s.out.join(format!("{stem}_regions.pgm")), spec.width, spec.height, &labels)?;
                let truth = json!({
                    "image": format!("{stem}.ppm"),
                    "regions": format!("{stem}_regions.pgm"),
                    "height": spec.height,
                    "width": spec.width,
                    "split": spec.split,
                    "seed": spec.seed,
                    "noise_sigma": spec.noise_sigma,
                    "illuminants": scene.illuminants.iter().map(|l| l.to_array()).collect::<Vec<_>>(),
                });
                write_json(&s.out.join(format!("{stem}.json")), &truth)?;
                let l = scene.illuminants[0].to_array();
                let fold = folds.as_ref().map_or(String::new(), |f| f[i].to_string());
                let second = match scene.illuminants.get(1) {
                    Some(m) => {
                        let m = m.to_array();
                        format!("{},{},{},{stem}_regions.pgm", m[0], m[1], m[2])
                    }
                    None => ",,,".to_string(),
                };
                Ok(format!("{stem}.ppm,{},{},{},0,65535,{fold},,{second}", l[0], l[1], l[2]))
            })
            .collect::<Outcome<_>>()
    })?;
    let mut index = String::from("path,r,g,b,black,sat,fold,mask,r2,g2,b2,regions\n");
    for r in rows {
        index.push_str(&r);
        index.push('\n');
    }
    fs::write(s.out.join("index.csv"), index)?;
    println!("wrote {count} scene(s) to {}", s.out.display());
    Ok(())
}

fn cmd_cluster(s: &Settings, a: ClusterArgs) -> Outcome<()> {
    let image = read_linear(&a.image)?;
    let cfg = s.estimate_config(a.local, false)?;
    let (input, reference) = match (
        s.pick_opt(a.model, "model")?,
        s.pick_opt(a.reference, "reference")?,
    ) {
        (Some(m), None) => {
            let net = read_checkpoint(&m)?.network;
            let n = net.spec().input_size;
            let input = kpf_core::resample::resize_area(&image, n, n);
            let field = net.forward(&input)?;
            let reference = kpf_core::kernel::apply_kernels(&input, &field)?;
            (input, reference)
        }
        (None, Some(r)) => {
            let r = read_linear(&r)?;
            if (r.height(), r.width()) != (image.height(), image.width()) {
                return Err(usage("reference and image sizes differ"));
            }
            (image, ReferenceImage::from_linear(&r))
        }
        _ => return Err(usage("give exactly one of --model or --reference")),
    };
    let map = illumination_vector_map(&input, &reference, cfg.fit.dark_threshold)?;
    let mask = spectral_cluster(&map, &cfg.cluster)?;
    write_pgm(
        &s.out_path("mask.pgm")?,
        mask.width,
        mask.height,
        &mask.to_pgm_values(),
    )?;
    let estimate = fit_local(
        &input,
        &reference,
        &mask,
        &cfg.fit,
        cfg.cluster.merge_threshold,
    )?;
    let json = json!({
        "n_clusters": mask.n_clusters,
        "merged": mask.merged,
        "cluster_sizes": mask.cluster_sizes(),
        "fit": EstimateJson::from(&estimate),
    });
    write_json(&s.out_path("clusters.json")?, &json)?;
    println!("{}", serde_json::to_string(&json)?);
    Ok(())
}

fn cmd_gradcheck(s: &Settings, a: GradcheckArgs) -> Outcome<Value> {
    let d = GradCheckConfig::default();
    let spec = kpf_core::net::NetworkSpec {
        input_size: s.pick(a.spec.input_size, "input-size", d.spec.input_size)?,
        kernel_order: s.pick(a.spec.kernel_order, "kernel-order", d.spec.kernel_order)?,
        encoder_widths: s.pick(a.spec.widths, "widths", d.spec.encoder_widths.clone())?,
        seed: s.seed,
    };
    let cfg = GradCheckConfig {
        spec,
        samples: s.pick(a.samples, "samples", d.samples)?,
        step: s.pick(a.step, "step", d.step)?,
        tolerance: s.pick(a.tolerance, "tolerance", d.tolerance)?,
        seed: s.seed,
        ..d
    };
    let report = gradient_check(&cfg)?;
    let json = serde_json::to_value(&report)?;
    println!("{}", serde_json::to_string(&json)?);
    Ok(json)
}

fn run(cli: Cli) -> Outcome<()> {
    let s = Settings::load(&cli)?;
    match cli.command {
        Command::Estimate(a) => cmd_estimate(&s, a),
        Command::Train(a) => cmd_train(&s, a),
        Command::Eval(a) => cmd_eval(&s, a),
        Command::Synth(a) => cmd_synth(&s, a),
        Command::Cluster(a) => cmd_cluster(&s, a),
        Command::Gradcheck(a) => {
            let report = cmd_gradcheck(&s, a)?;
            if report["passed"] == Value::Bool(true) {
                Ok(())
            } else {
                Err(Failure {
                    code: 1,
                    message: format!(
                        "max relative error {} exceeds tolerance",
                        report["max_rel_error"]
                    ),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("kpf: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
