//! Command-line entry point. Human-readable logging goes to standard
//! error; machine-readable output goes to standard out or to files, never
//! mixed. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::synthworld::{make_dataset, Background, SceneConfig};
use crate::trainrun::{
    bench_sampling, evaluate, export_attention, load_train_checkpoint, run_training, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "icon",
    version,
    about = "Agent-centric contrastive learning on ViT token features"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| format!("expected AxB, got {s:?}"))?;
    let a = a.trim().parse().map_err(|e| format!("bad first number in {s:?}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("bad second number in {s:?}: {e}"))?;
    Ok((a, b))
}

fn parse_background(s: &str) -> std::result::Result<Background, String> {
    match s {
        "noise" => Ok(Background::Noise),
        "checker" => Ok(Background::Checker),
        "gradient" => Ok(Background::Gradient),
        other => Err(format!(
            "unknown background {other:?} (expected noise, checker, or gradient)"
        )),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (ICDS file).
    GenData {
        /// Number of scenes.
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Give distractors the agent's colors.
        #[arg(long)]
        hard: bool,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Arm links (2 or 3).
        #[arg(long, default_value_t = 3)]
        links: usize,
        /// Clutter objects per scene (0 to 3).
        #[arg(long, default_value_t = 2)]
        distractors: usize,
        /// Background style: noise, checker, or gradient.
        #[arg(long, default_value = "noise", value_parser = parse_background)]
        background: Background,
    },
    /// Train the encoder; flags override config-file values override defaults.
    Train {
        /// JSON config file mirroring the TrainConfig fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_metrics: Option<PathBuf>,
        /// Override the dataset path from the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the contrastive loss weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Override the token-mask dominance threshold.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset; writes one JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report file; standard out when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time both key samplers across key-count pairs.
    BenchFps {
        /// Token grid as HxW.
        #[arg(long, default_value = "14x14", value_parser = parse_pair)]
        grid: (usize, usize),
        /// Comma-separated (agent)x(environment) key counts.
        #[arg(long, default_value = "5x25,10x50,20x100", value_delimiter = ',', value_parser = parse_pair)]
        keys: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (one JSON record per line); standard out when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one image's [CLS] attention grid (raw f32 + PGM preview).
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Index of the image within the dataset.
        #[arg(long)]
        image_index: usize,
        /// 1-based encoder layer.
        #[arg(long)]
        layer: usize,
        /// Output base path; writes <out>.f32 and <out>.pgm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

/// Parse `argv` and run the selected subcommand, mapping every outcome to a
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                // requested output, not an error
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            n,
            seed,
            out,
            hard,
            height,
            width,
            links,
            distractors,
            background,
        } => {
            let cfg = SceneConfig {
                height,
                width,
                links,
                distractors,
                background,
                hard,
                ..SceneConfig::default()
            };
            make_dataset(n, &cfg, seed, &out)?;
            eprintln!("wrote {n} scenes ({height}x{width}) to {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            out_checkpoint,
            out_metrics,
            dataset,
            seed,
            epochs,
            lambda,
            beta,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str::<TrainConfig>(&text)
                        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
                }
                None => TrainConfig::default(),
            };
            if let Some(v) = dataset {
                cfg.dataset = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = lambda {
                cfg.lambda = v;
            }
            if let Some(v) = beta {
                cfg.beta = v;
            }
            cfg.validate()?;
            eprintln!(
                "resolved config: {}",
                serde_json::to_string(&cfg).map_err(|e| Error::Malformed(e.to_string()))?
            );
            let out = run_training(&cfg, out_checkpoint.as_deref(), out_metrics.as_deref())?;
            if let Some(last) = out.records.last() {
                eprintln!(
                    "epoch {}: task {:.6} total {:.6} probe {:.3}",
                    last.epoch, last.task_loss, last.total_loss, last.probe_accuracy
                );
            }
            if out.degenerate_skips > 0 {
                eprintln!(
                    "note: {} sample passes had a single-class token mask (contrast skipped)",
                    out.degenerate_skips
                );
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => {
            let (cfg, params, head_w, head_b) = load_train_checkpoint(&checkpoint)?;
            let samples = crate::synthworld::load_dataset(&dataset)?;
            let report = evaluate(&cfg, &params, &head_w, &head_b, &samples)?;
            let line =
                serde_json::to_string(&report).map_err(|e| Error::Malformed(e.to_string()))?;
            match out {
                Some(path) => {
                    std::fs::write(&path, format!("{line}\n")).map_err(|e| Error::io(&path, e))?
                }
                None => println!("{line}"),
            }
            Ok(())
        }
        Command::BenchFps {
            grid,
            keys,
            reps,
            seed,
            out,
        } => {
            let records = bench_sampling(grid.0, grid.1, &keys, reps, seed)?;
            let mut text = String::new();
            for r in &records {
                text.push_str(
                    &serde_json::to_string(r).map_err(|e| Error::Malformed(e.to_string()))?,
                );
                text.push('\n');
            }
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::ExportAttn {
            checkpoint,
            dataset,
            image_index,
            layer,
            out,
        } => {
            let (raw, pgm) = export_attention(&checkpoint, &dataset, image_index, layer, &out)?;
            eprintln!("wrote {} and {}", raw.display(), pgm.display());
            Ok(())
        }
        Command::Selftest => selftest(),
    }
}

/// Fast in-process oracle checks covering each stage of the pipeline.
fn selftest() -> Result<()> {
    use crate::contrast::info_nce_raw;
    use crate::maskgrid::{patchify, threshold_tokens, PixelMask};
    use crate::numerics::seeded_rng;
    use crate::sampler::{fps2d_from, fps_oracle, GridIndex};
    use crate::trainrun::{adam_step, AdamConfig, AdamState};
    use crate::vit::{vit_forward, ViTConfig, ViTParams};

    let fail = |what: &str| Error::InvalidConfig(format!("selftest failed: {what}"));

    // farthest point sampling agrees with the recompute-everything oracle on
    // every 3x3 mask, every feasible budget, every start cell
    for bits in 1u32..512 {
        let data: Vec<u8> = (0..9).map(|i| ((bits >> i) & 1) as u8).collect();
        let mask = crate::maskgrid::TokenMask::new(3, 3, data.clone())?;
        let region: Vec<GridIndex> = (0..9)
            .filter(|&i| data[i] == 1)
            .map(|i| GridIndex::new(i / 3 + 1, i % 3 + 1))
            .collect();
        for n in 1..=region.len() {
            for &start in &region {
                if fps2d_from(&mask, n, start)? != fps_oracle(&mask, n, start)? {
                    return Err(fail("fps incremental vs oracle"));
                }
            }
        }
    }
    eprintln!("ok: fps oracle equivalence (3x3 exhaustive)");

    // identical query-key dots make the contrastive loss exactly ln(1 + |negatives|)
    let q = vec![1.0, 0.0];
    let pos = vec![vec![1.0, 0.0]];
    for n_neg in [1usize, 4, 9] {
        let neg = vec![vec![1.0, 0.0]; n_neg];
        let loss = info_nce_raw(&q, &pos, &neg, 0.5, true)?;
        if (loss - (1.0 + n_neg as f64).ln()).abs() > 1e-12 {
            return Err(fail("info_nce closed form"));
        }
    }
    eprintln!("ok: contrastive closed form");

    // token thresholding matches brute-force pixel counting
    let mut rng = seeded_rng(17);
    for _ in 0..50 {
        let data: Vec<u8> = (0..8 * 12).map(|_| (rng.next_u64() & 1) as u8).collect();
        let mask = PixelMask::new(8, 12, data)?;
        let grid = patchify(&mask, 4)?;
        for beta in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let tokens = threshold_tokens(&grid, beta)?;
            for k in 0..2 {
                for l in 0..3 {
                    let mut count = 0usize;
                    for r in 0..4 {
                        for c in 0..4 {
                            count += mask.get(k * 4 + r, l * 4 + c) as usize;
                        }
                    }
                    let want = (count as f64 > beta * 16.0) as u8;
                    if tokens.get(k, l) != want {
                        return Err(fail("token threshold vs brute force"));
                    }
                }
            }
        }
    }
    eprintln!("ok: token threshold oracle");

    // encoder forward is deterministic and attention rows are stochastic
    let cfg = ViTConfig {
        height: 16,
        width: 16,
        channels: 3,
        patch: 4,
        dim: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2.0,
    };
    let params = ViTParams::init(&cfg, &mut seeded_rng(1))?;
    let img = crate::maskgrid::ImageTensor::from_u8(
        16,
        16,
        3,
        &(0..16 * 16 * 3).map(|i| (i * 37 % 256) as u8).collect::<Vec<_>>(),
    )?;
    let a = vit_forward(&img, &params, &cfg)?;
    let b = vit_forward(&img, &params, &cfg)?;
    let fa = a.features(cfg.layers)?;
    let fb = b.features(cfg.layers)?;
    if fa.data() != fb.data() {
        return Err(fail("encoder determinism"));
    }
    let t = cfg.seq_len();
    for layer in 1..=cfg.layers {
        let attn = a.attention(layer)?;
        for row in attn.chunks(t) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(fail("attention row normalization"));
            }
        }
    }
    eprintln!("ok: encoder determinism and attention normalization");

    // Adam against a hand-traced first step: m_hat = g, v_hat = g^2
    let adam = AdamConfig::default();
    let mut state = AdamState::new(1);
    let mut p = vec![2.0];
    adam_step(&mut state, &mut p, &[0.3], &adam)?;
    let want = 2.0 - adam.lr * 0.3 / (0.3f64 + adam.eps);
    if (p[0] - want).abs() > 1e-12 {
        return Err(fail("adam first step"));
    }
    eprintln!("ok: optimizer first-step identity");

    // scene rendering is deterministic and survives a dataset round trip
    let scene_cfg = SceneConfig::default();
    let dir = std::env::temp_dir().join(format!(
        "icon-selftest-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("selftest.icds");
    let written = make_dataset(3, &scene_cfg, 5, &path)?;
    let loaded = crate::synthworld::load_dataset(&path)?;
    let round_trip_ok = written == loaded;
    let _ = std::fs::remove_dir_all(&dir);
    if !round_trip_ok {
        return Err(fail("dataset round trip"));
    }
    eprintln!("ok: scene generation round trip");

    println!("selftest ok (6 checks)");
    Ok(())
}
