//! `biolip`: command-line front end for landmark-trajectory lip-sync detection.
//!
//! Exit status: 0 on success, 1 on a domain error (bad data, bad config,
//! failed I/O), 2 on a usage error.

mod manifest;

use std::error::Error as StdError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use biolip::checkpoint::Checkpoint;
use biolip::dataset::Dataset;
use biolip::evaluation::{evaluate, order_stat_reports, region_stat_reports, trajectory_psd, StatReport};
use biolip::kinematics::{extract, write_cache, Axis, FeatureConfig, WindowFeatures};
use biolip::network::{predict, Batch, ModelConfig};
use biolip::perturbation::{DropMode, PerturbSpec};
use biolip::synthetic::{gen_dataset, gen_smooth, SynthConfig};
use biolip::training::{train_with, TrainConfig};
use biolip::trajectory::{filter_all, load_dir, save_trajectory, write_atomic, NormalizedSequence, RegionMap, MIN_VALID_RUN};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use manifest::Recorder;

type Fallible<T = ()> = Result<T, Box<dyn StdError>>;

#[derive(Parser)]
#[command(name = "biolip", version, about = "Lip-sync deepfake detection from perioral landmark kinematics")]
struct Cli {
    /// Run manifest file; defaults to `runs.jsonl` beside the main output
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract window features from Landmark JSONL into a feature cache
    Extract {
        /// Directory of Landmark JSONL files
        #[arg(long = "in")]
        input: PathBuf,
        /// Output feature cache
        #[arg(long)]
        cache: PathBuf,
        /// Feature configuration (TOML)
        #[arg(long)]
        features: Option<PathBuf>,
        /// Region map (TOML)
        #[arg(long)]
        region_map: Option<PathBuf>,
    },
    /// Train a detector and write the best-validation checkpoint
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Run configuration (TOML with optional [train], [features], [model] tables)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history CSV; defaults to `<out>.history.csv`
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        region_map: Option<PathBuf>,
    },
    /// Score a labelled dataset and report video-level AUC
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// AUC report CSV
        #[arg(long)]
        report: PathBuf,
        /// Optional per-video score CSV
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long)]
        region_map: Option<PathBuf>,
    },
    /// Apply landmark noise or frame drops to every sequence of a directory
    Perturb {
        #[arg(long, value_enum)]
        kind: PerturbKind,
        /// Noise standard deviation in normalized units
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Noise axes
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [AxisArg::X, AxisArg::Y, AxisArg::Z])]
        axes: Vec<AxisArg>,
        /// Frame-drop probability
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        #[arg(long, value_enum, default_value_t = DropArg::HoldLast)]
        drop_mode: DropArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Fake-versus-real kinematic statistics and mean spectra
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Per-order and per-region statistics CSV
        #[arg(long)]
        report: PathBuf,
        /// Optional mean y-axis spectrum per class
        #[arg(long)]
        psd: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        region_map: Option<PathBuf>,
    },
    /// Generate a synthetic smooth/jittery Landmark JSONL dataset
    Synth {
        /// Generator configuration (TOML)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_real: usize,
        #[arg(long, default_value_t = 200)]
        n_fake: usize,
    },
    /// Single-window forward latency of a checkpoint
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Take the benchmark window from this dataset instead of a synthetic clip
        #[arg(long)]
        data: Option<PathBuf>,
        /// Include feature extraction in every timed call
        #[arg(long)]
        with_features: bool,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        #[arg(long, default_value_t = 10_000)]
        iters: usize,
        /// Optional latency CSV
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbKind {
    Noise,
    FrameDrop,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DropArg {
    HoldLast,
    Delete,
}

/// Contents of `train --config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    train: TrainConfig,
    features: FeatureConfig,
    /// Defaults to the standard model sized for `features`.
    model: Option<ModelConfig>,
}

fn read_toml<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Fallible<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?)
        }
    }
}

fn region_map(path: Option<&Path>) -> Fallible<RegionMap> {
    Ok(match path {
        Some(p) => RegionMap::load(p)?,
        None => RegionMap::default(),
    })
}

fn load_dataset(dir: &Path, features: &FeatureConfig, map: &RegionMap) -> Fallible<Dataset> {
    let data = Dataset::load(dir, features, map)?;
    for (id, reason) in &data.skipped {
        eprintln!("skipped {id}: {reason}");
    }
    for id in &data.off_nominal_fps {
        eprintln!("warning: {id} is not at the nominal frame rate");
    }
    Ok(data)
}

fn write_csv(path: &Path, text: &str) -> Fallible {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

fn run(cli: Cli) -> Fallible {
    let (rec, manifest_path) = match cli.command {
        Command::Extract { input, cache, features, region_map: map_path } => {
            let mut rec = Recorder::new("extract");
            let features: FeatureConfig = read_toml(features.as_deref())?;
            let map = region_map(map_path.as_deref())?;
            rec.config(json!({ "features": features, "region_map": map }), None);
            rec.input(&input);
            let data = load_dataset(&input, &features, &map)?;
            rec.phase("extract");
            let mut per_video: Vec<Vec<WindowFeatures>> = Vec::new();
            let mut last: Option<&str> = None;
            for w in &data.windows {
                if last != Some(w.video_id.as_str()) {
                    per_video.push(Vec::new());
                    last = Some(w.video_id.as_str());
                }
                per_video.last_mut().unwrap().push(w.clone());
            }
            let mut bytes = Vec::new();
            write_cache(&mut bytes, &features, &per_video)?;
            write_atomic(&cache, &bytes)?;
            rec.output(&cache);
            rec.phase("write");
            let ids: Vec<&str> = data.sequences.iter().map(|s| s.video_id.as_str()).collect();
            rec.summary(json!({ "videos": ids, "windows": data.windows.len(), "skipped": data.skipped }));
            println!("{} windows from {} videos -> {}", data.windows.len(), ids.len(), cache.display());
            (rec, manifest::beside(&cache))
        }
        Command::Train { train, val, config, out, history, region_map: map_path } => {
            let mut rec = Recorder::new("train");
            let mut cfg: RunConfig = read_toml(config.as_deref())?;
            let model = cfg.model.take().unwrap_or_else(|| ModelConfig::for_features(&cfg.features));
            let map = region_map(map_path.as_deref())?;
            rec.config(json!({ "train": cfg.train, "features": cfg.features, "model": model, "region_map": map }), Some(cfg.train.seed));
            rec.input(&train);
            rec.input(&val);
            let tr = load_dataset(&train, &cfg.features, &map)?;
            let va = load_dataset(&val, &cfg.features, &map)?;
            rec.phase("load");
            let outcome = train_with(&tr.windows, &va.windows, &cfg.features, &model, &cfg.train, |r| {
                eprintln!("epoch {:>3}  loss {:.5}  val_auc {:.4}  lr {:.3e}", r.epoch, r.loss, r.val_auc, r.lr);
            })?;
            rec.phase("train");
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            outcome.checkpoint.save(&out)?;
            let history_path = history.unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", out.display())));
            write_csv(&history_path, &outcome.history.to_csv())?;
            rec.output(&out);
            rec.output(&history_path);
            let best = &outcome.history.epochs[outcome.history.best_epoch - 1];
            rec.summary(json!({
                "train_windows": tr.windows.len(),
                "val_windows": va.windows.len(),
                "epochs_run": outcome.history.epochs.len(),
                "best_epoch": best.epoch,
                "best_val_auc": best.val_auc,
            }));
            println!("best epoch {} (val AUC {:.4}) -> {}", best.epoch, best.val_auc, out.display());
            (rec, manifest::beside(&out))
        }
        Command::Eval { ckpt, data, report, scores, batch_size, region_map: map_path } => {
            let mut rec = Recorder::new("eval");
            let checkpoint = Checkpoint::load(&ckpt)?;
            let map = region_map(map_path.as_deref())?;
            rec.config(json!({ "features": checkpoint.features, "batch_size": batch_size, "region_map": map }), None);
            rec.input(&ckpt);
            rec.input(&data);
            let dataset = load_dataset(&data, &checkpoint.features, &map)?;
            rec.phase("load");
            let videos = dataset.score(&checkpoint.params, batch_size)?;
            let result = evaluate(&videos)?;
            rec.phase("score");
            write_csv(&report, &result.to_csv())?;
            rec.output(&report);
            if let Some(path) = &scores {
                let mut text = String::from("video_id,label,generator_tag,score\n");
                for v in &videos {
                    let label = v.label.map_or(String::new(), |l| l.bit().to_string());
                    text.push_str(&format!("{},{label},{},{}\n", v.video_id, v.generator_tag.as_deref().unwrap_or(""), v.score));
                }
                write_csv(path, &text)?;
                rec.output(path);
            }
            rec.summary(serde_json::to_value(&result)?);
            println!("overall AUC {:.4} over {} videos", result.overall.auc, result.overall.n_videos);
            for row in &result.per_generator {
                println!("  {}: AUC {:.4} ({} videos)", row.scope, row.auc, row.n_videos);
            }
            (rec, manifest::beside(&report))
        }
        Command::Perturb { kind, sigma, axes, rate, drop_mode, input, out, seed } => {
            let mut rec = Recorder::new("perturb");
            let spec = match kind {
                PerturbKind::Noise => PerturbSpec::Noise { sigma, axes: axes.into_iter().map(Axis::from).collect(), seed },
                PerturbKind::FrameDrop => PerturbSpec::FrameDrop {
                    rate,
                    drop_mode: match drop_mode {
                        DropArg::HoldLast => DropMode::HoldLast,
                        DropArg::Delete => DropMode::Delete,
                    },
                    seed,
                },
            };
            rec.config(&spec, Some(seed));
            rec.input(&input);
            let raw = load_dir(&input)?;
            let filtered = filter_all(&raw, MIN_VALID_RUN);
            for (id, reason) in &filtered.rejected {
                eprintln!("skipped {id}: {reason}");
            }
            std::fs::create_dir_all(&out)?;
            let provenance = serde_json::to_value(&spec)?;
            for seq in &filtered.accepted {
                let commissures = raw.iter().find(|r| r.video_id == seq.video_id).map(|r| r.commissure_ids).unwrap();
                let mut traj = spec.apply(seq)?.to_trajectory(commissures);
                traj.perturb = Some(provenance.clone());
                save_trajectory(&traj, &out.join(format!("{}.jsonl", seq.video_id)))?;
            }
            rec.phase("perturb");
            rec.output(&out);
            rec.summary(json!({ "written": filtered.accepted.len(), "skipped": filtered.rejected }));
            println!("perturbed {} sequences -> {}", filtered.accepted.len(), out.display());
            (rec, manifest::beside(&out))
        }
        Command::Stats { data, report, psd, features, region_map: map_path } => {
            let mut rec = Recorder::new("stats");
            let features: FeatureConfig = read_toml(features.as_deref())?;
            let map = region_map(map_path.as_deref())?;
            rec.config(json!({ "features": features, "region_map": map }), None);
            rec.input(&data);
            let dataset = load_dataset(&data, &features, &map)?;
            let seqs = &dataset.sequences;
            let idx = map.resolve(&seqs.first().ok_or("no usable sequences")?.landmark_ids)?;
            let mut rows = order_stat_reports(seqs, &features)?;
            rows.extend(region_stat_reports(seqs, &features, &idx)?);
            let mut text = format!("{}\n", StatReport::CSV_HEADER);
            for r in &rows {
                text.push_str(&r.csv_row());
                text.push('\n');
            }
            write_csv(&report, &text)?;
            rec.output(&report);
            if let Some(path) = &psd {
                write_csv(path, &class_psd_csv(seqs)?)?;
                rec.output(path);
            }
            rec.phase("stats");
            rec.summary(serde_json::to_value(&rows)?);
            for r in &rows {
                println!("{:<13} d {:>8.3}  U p {:.2e}  F p {:.2e}", r.name, r.cohens_d, r.u_p, r.f_p);
            }
            (rec, manifest::beside(&report))
        }
        Command::Synth { config, out, n_real, n_fake } => {
            let mut rec = Recorder::new("synth");
            let cfg: SynthConfig = read_toml(config.as_deref())?;
            rec.config(json!({ "synth": cfg, "n_real": n_real, "n_fake": n_fake }), Some(cfg.seed));
            let paths = gen_dataset(&cfg, n_real, n_fake, cfg.seed, &out)?;
            rec.phase("generate");
            rec.output(&out);
            rec.summary(json!({ "files": paths.len() }));
            println!("wrote {} sequences -> {}", paths.len(), out.display());
            (rec, manifest::beside(&out))
        }
        Command::Bench { ckpt, data, with_features, warmup, iters, report } => {
            let mut rec = Recorder::new("bench");
            rec.config(json!({ "with_features": with_features, "warmup": warmup, "iters": iters }), None);
            rec.input(&ckpt);
            let checkpoint = Checkpoint::load(&ckpt)?;
            let features = &checkpoint.features;
            let map = RegionMap::default();
            let seq = match &data {
                Some(dir) => {
                    rec.input(dir);
                    load_dataset(dir, features, &map)?.sequences.into_iter().next().ok_or("no usable sequences")?
                }
                None => gen_smooth(&SynthConfig::default(), 0)?,
            };
            let clip = NormalizedSequence {
                frames: seq.frames[..features.window_len].to_vec(),
                retained_indices: seq.retained_indices[..features.window_len].to_vec(),
                ..seq
            };
            let idx = map.resolve(&clip.landmark_ids)?;
            let window = extract(&clip, features, &idx)?.remove(0);
            let batch = Batch::from_windows(&[&window])?;
            let call = || -> Fallible<f64> {
                if with_features {
                    let w = extract(&clip, features, &idx)?;
                    Ok(predict(&Batch::from_windows(&[&w[0]])?, &checkpoint.params)?[0])
                } else {
                    Ok(predict(&batch, &checkpoint.params)?[0])
                }
            };
            for _ in 0..warmup {
                std::hint::black_box(call()?);
            }
            let mut times = Vec::with_capacity(iters);
            for _ in 0..iters.max(1) {
                let t = Instant::now();
                std::hint::black_box(call()?);
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            rec.phase("bench");
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            times.sort_by(f64::total_cmp);
            let pct = |q: f64| times[((times.len() - 1) as f64 * q).round() as usize];
            let (p50, p99) = (pct(0.5), pct(0.99));
            let csv = format!(
                "mode,iters,mean_ms,p50_ms,p99_ms\n{},{},{mean},{p50},{p99}\n",
                if with_features { "features+model" } else { "model" },
                times.len()
            );
            rec.summary(json!({ "mean_ms": mean, "p50_ms": p50, "p99_ms": p99 }));
            print!("{csv}");
            let manifest_path = match &report {
                Some(path) => {
                    write_csv(path, &csv)?;
                    rec.output(path);
                    manifest::beside(path)
                }
                None => manifest::beside(&ckpt),
            };
            (rec, manifest_path)
        }
    };
    rec.finish(cli.manifest.as_deref().unwrap_or(&manifest_path))?;
    Ok(())
}

/// Mean y-axis spectrum per class over every landmark, using the leading
/// frames of each sequence up to the shortest sequence length.
fn class_psd_csv(seqs: &[NormalizedSequence]) -> Fallible<String> {
    let len = seqs.iter().map(|s| s.len()).min().ok_or("no sequences")?;
    let mut acc: [Option<(Vec<f64>, usize)>; 2] = [None, None];
    let mut freqs = Vec::new();
    for s in seqs {
        let Some(label) = s.label else { continue };
        for lm in 0..s.landmark_ids.len() {
            let series = s.series(lm, Axis::Y.index());
            let p = trajectory_psd(&series[..len], s.fps)?;
            freqs = p.freqs;
            let slot = acc[label.is_fake() as usize].get_or_insert_with(|| (vec![0.0; p.power.len()], 0));
            slot.0.iter_mut().zip(&p.power).for_each(|(a, b)| *a += b);
            slot.1 += 1;
        }
    }
    let mean = |i: usize, k: usize| acc[i].as_ref().map_or(String::new(), |(sum, n)| (sum[k] / *n as f64).to_string());
    let mut text = String::from("frequency_hz,power_real,power_fake\n");
    for (k, f) in freqs.iter().enumerate() {
        text.push_str(&format!("{f},{},{}\n", mean(0, k), mean(1, k)));
    }
    Ok(text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
