use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevsync::augment::AugMode;
use bevsync::pipeline::{
    self, bench, compare_sync, prepare, run_pipeline, run_stage, viz_attn, PipelineError, RunConfig, RunDir, Stage,
};
use bevsync::tensor::save_btf;
use bevsync::warp::WarpMode;
use bevsync::{Error, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bevsync", version, about = "Pose-synchronized BEV occupancy and flow prediction on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration; defaults to the run directory's config.ini, then
    /// the desk configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "pyramid-depth", global = true, value_parser = clap::value_parser!(u8).range(1..=4))]
    pyramid_depth: Option<u8>,
    #[arg(long, global = true, value_enum)]
    aug: Option<Aug>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aug {
    None,
    Img,
    Bev,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    Bilinear,
    Nearest,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and its ground truth.
    Synth(Common),
    /// Encode the scenario into the temporal BEV map.
    Encode(Common),
    /// Run the pyramid and the task heads.
    Predict(Common),
    /// Decode instances and score them against the ground truth.
    Eval(Common),
    /// Every stage in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip stages whose artifacts already exist.
        #[arg(long)]
        resume: bool,
    },
    /// Parameter count and median stage timings.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Render the cached first-layer attention of one window.
    VizAttn {
        #[command(flatten)]
        common: Common,
        /// Only the first encoder layer is cached.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Window id (row-major); its centre cell becomes the query.
        #[arg(long)]
        window: Option<usize>,
        /// Query cell `ix,iy`; overrides `--window`.
        #[arg(long, value_parser = parse_cell)]
        query: Option<(usize, usize)>,
        #[arg(long = "top-k", default_value_t = 3)]
        top_k: usize,
    },
    /// Warp baseline against pose synchronization on a static scene.
    CompareSync {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "bilinear")]
        mode: Sampling,
    },
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected `ix,iy`")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{v}` is not a cell index"));
    Ok((n(a)?, n(b)?))
}

fn config_error(e: Error) -> PipelineError {
    PipelineError::Config(e)
}

fn stage_error(stage: Stage) -> impl Fn(Error) -> PipelineError {
    move |source| match source {
        Error::Config(_) => PipelineError::Config(source),
        source => PipelineError::Stage { stage, source },
    }
}

fn resolve(c: &Common) -> Result<(RunConfig, RunDir), PipelineError> {
    let dir = RunDir::new(&c.out);
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(config_error)?,
        None if dir.has(pipeline::CONFIG_FILE) => dir.config().map_err(config_error)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = c.pyramid_depth {
        cfg.stpt.depth = d as usize;
    }
    if let Some(a) = c.aug {
        cfg.aug.mode = match a {
            Aug::None => AugMode::None,
            Aug::Img => AugMode::Img,
            Aug::Bev => AugMode::Bev,
            Aug::Both => AugMode::Both,
        };
    }
    cfg.validate().map_err(config_error)?;
    Ok((cfg, dir))
}

fn stages(common: &Common, list: &[Stage]) -> Result<(), PipelineError> {
    let (cfg, dir) = resolve(common)?;
    prepare(&cfg, &dir)?;
    for &s in list {
        run_stage(s, &cfg, &dir)?;
        eprintln!("{s}: done");
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8], stage: Stage) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| stage_error(stage)(Error::Io { path: parent.into(), source: e }))?;
    }
    fs::write(path, bytes).map_err(|e| stage_error(stage)(Error::Io { path: path.into(), source: e }))
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(c) => stages(&c, &[Stage::Synth]),
        Command::Encode(c) => stages(&c, &[Stage::Encode]),
        Command::Predict(c) => stages(&c, &[Stage::Predict, Stage::Heads]),
        Command::Eval(c) => {
            stages(&c, &[Stage::Decode, Stage::Eval])?;
            let report = RunDir::new(&c.out).report().map_err(stage_error(Stage::Eval))?;
            print!("{}", report.to_json());
            Ok(())
        }
        Command::Run { common, resume } => {
            let (cfg, dir) = resolve(&common)?;
            for s in run_pipeline(&cfg, &dir, resume)? {
                eprintln!("{s}: done");
            }
            print!("{}", dir.report().map_err(stage_error(Stage::Eval))?.to_json());
            Ok(())
        }
        Command::Bench { common, repeats } => {
            let (cfg, dir) = resolve(&common)?;
            let report = bench(&cfg, repeats).map_err(stage_error(Stage::Predict))?;
            write(&dir.path("bench.json"), report.to_json().as_bytes(), Stage::Predict)?;
            println!("parameters: {} (manifest {})", report.param_count, report.manifest_params);
            for s in &report.stages {
                println!("{:>8}: {:.3} ms", s.stage, s.median_ms);
            }
            println!("end-to-end: {:.3} ms (median of {repeats})", report.end_to_end_ms);
            println!("{}", report.reference);
            Ok(())
        }
        Command::VizAttn { common, layer, window, query, top_k } => {
            let (cfg, dir) = resolve(&common)?;
            if layer != 0 {
                return Err(PipelineError::Config(Error::Config(format!(
                    "layer {layer} has no cached attention; only layer 0 is recorded"
                ))));
            }
            let cache = dir.attention(&cfg).map_err(stage_error(Stage::Predict))?;
            let (wh, ww) = cache.window;
            let query = match (query, window) {
                (Some(q), _) => q,
                (None, Some(w)) => {
                    if w >= cache.probs.len() {
                        return Err(PipelineError::Config(Error::Config(format!(
                            "window {w} of {}",
                            cache.probs.len()
                        ))));
                    }
                    ((w / cache.windows.1) * wh + wh / 2, (w % cache.windows.1) * ww + ww / 2)
                }
                (None, None) => (cfg.grid.x_cells / 2, cfg.grid.y_cells / 2),
            };
            let background = match dir.temporal_map() {
                Ok(m) => {
                    let [f, x, y, c] = [m.maps.dims()[0], m.maps.dims()[1], m.maps.dims()[2], m.maps.dims()[3]];
                    let norms = m.maps.data().chunks(c).map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
                    Some(Tensor::new(vec![f, x, y], norms).map_err(stage_error(Stage::Predict))?)
                }
                Err(_) => None,
            };
            let v = viz_attn(&cache, cfg.grid.x_cells, cfg.grid.y_cells, query, top_k, background.as_ref())
                .map_err(stage_error(Stage::Predict))?;
            let stem = format!("attn_w{}", v.window);
            write(&dir.path(&format!("{stem}.pgm")), &v.matrix_image.encode(), Stage::Predict)?;
            write(&dir.path(&format!("{stem}_overlay.ppm")), &v.overlay.encode(), Stage::Predict)?;
            save_btf(&v.matrix, dir.path(&format!("{stem}.btf"))).map_err(stage_error(Stage::Predict))?;
            println!("window {} query {:?}", v.window, v.query);
            for (f, cells) in v.top.iter().enumerate() {
                let list: Vec<String> = cells.iter().map(|(x, y, w)| format!("({x},{y}):{w:.4}")).collect();
                println!("frame -{f}: {}", list.join(" "));
            }
            Ok(())
        }
        Command::CompareSync { common, mode } => {
            let (cfg, dir) = resolve(&common)?;
            let mode = match mode {
                Sampling::Bilinear => WarpMode::Bilinear,
                Sampling::Nearest => WarpMode::Nearest,
            };
            let csv = compare_sync(&cfg, mode).map_err(stage_error(Stage::Encode))?;
            write(&dir.path("compare_sync.csv"), csv.as_bytes(), Stage::Encode)?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
