use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use ehsg_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ehsg_core::data::{encode_rgb, load_dataset, synth_generate, write_atomic, Dataset, SynthSpec};
use ehsg_core::deform::deform_cloud;
use ehsg_core::gradcheck::{check_scene, GradcheckSettings};
use ehsg_core::motion::deformed_count;
use ehsg_core::raster::{rasterize, RasterSettings};
use ehsg_core::train::{evaluate, render_flags, render_model, static_fraction, train_with, TrainConfig};
use ehsg_core::{Error, ErrorKind};

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

fn emit(text: &str) {
    use std::io::Write as _;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "ehsg",
    version,
    about = "Deformable Gaussian splatting with an adaptive motion hierarchy"
)]
struct Cli {
    /// Worker threads; falls back to EHSG_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground-truth trajectories.
    Synth(SynthArgs),
    /// Optimize a model on a dataset.
    Train(TrainArgs),
    /// Render a trained model at chosen timestamps.
    Render(RenderArgs),
    /// PSNR and SSIM on the test split.
    Eval(EvalArgs),
    /// Rendering throughput with and without the motion mask.
    Bench(BenchArgs),
    /// Finite-difference check of the analytic gradients on random scenes.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Spec file of key=value lines.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Named preset: static, cut or half_static.
    #[arg(long)]
    preset: Option<String>,
    /// Extra spec lines applied last, e.g. `--set frames=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint, log and effective config.
    #[arg(long)]
    out: PathBuf,
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every N iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    progress: usize,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file or a run directory containing `checkpoint.ehsg`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Deform every Gaussian, ignoring the motion mask.
    #[arg(long)]
    all_dynamic: bool,
    /// Divide rendered depth by accumulated opacity.
    #[arg(long)]
    normalize_depth: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated timestamps in [0, 1]; defaults to every frame.
    #[arg(long, value_delimiter = ',')]
    t: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory for `eval.csv`; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Timed passes over all frames per mode.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Directory for `bench.txt`; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    gaussians: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    basis: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Directory for the report and effective config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cmd = Cli::command().after_long_help(format!(
        "Training config keys (train --set KEY=VALUE):\n{}",
        TrainConfig::help_text()
    ));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            })
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let threads = resolve_threads(cli.threads)?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Synth(a) => synth(a, threads),
        Command::Train(a) => train_cmd(a, threads),
        Command::Render(a) => render(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Bench(a) => bench(a, threads),
        Command::Gradcheck(a) => gradcheck(a, threads),
    }
}

fn resolve_threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("EHSG_THREADS") {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Failure::Usage(format!("EHSG_THREADS={v} is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if n == Some(0) {
        return Err(Failure::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| {
        Failure::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn split_assignment(s: &str) -> CliResult<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Failure::Usage(format!("--set {s}: expected KEY=VALUE")))
}

fn synth(a: SynthArgs, threads: usize) -> CliResult {
    let mut text = match (&a.spec, &a.preset) {
        (Some(p), _) => read_text(p)?,
        (None, Some(name)) => format!("preset={name}\n"),
        (None, None) => String::new(),
    };
    for s in &a.set {
        let (k, v) = split_assignment(s)?;
        let _ = writeln!(text, "{k}={v}");
    }
    if let Some(seed) = a.seed {
        let _ = writeln!(text, "seed={seed}");
    }
    let spec = SynthSpec::parse(&text)?;
    let (d, _) = synth_generate(&spec, &a.out)?;
    write_text(
        &a.out.join("effective-config.txt"),
        &format!("{}threads={threads}\n", spec.to_text()),
    )?;
    say!(
        "wrote {} frames ({} train, {} test) of {}x{} to {}",
        d.frames.len(),
        d.train.len(),
        d.test.len(),
        d.camera.width,
        d.camera.height,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs, threads: usize) -> CliResult {
    let mut config = TrainConfig::default();
    if let Some(p) = &a.config {
        config.apply_text(&read_text(p)?)?;
    }
    for s in &a.set {
        let (k, v) = split_assignment(s)?;
        config.set(k, v)?;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let dataset = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    write_text(
        &a.out.join("effective-config.txt"),
        &format!("{}data={}\nthreads={threads}\n", config.to_text(), a.data.display()),
    )?;
    let start = Instant::now();
    let every = a.progress;
    let total = config.iterations;
    let state = train_with(&dataset, &config, |r| {
        if every > 0 && (r.iteration % every == 0 || r.iteration == total) {
            eprintln!(
                "iter {:>6}/{total}  loss {:.5}  color {:.5}  depth {:.5}  deformed {}",
                r.iteration, r.total, r.color, r.depth, r.deformed
            );
        }
    })?;
    save_checkpoint(
        a.out.join("checkpoint.ehsg"),
        &state.model,
        &state.mask,
        Some(&state.optimizer),
    )?;
    write_text(&a.out.join("train.log"), &state.log.to_text())?;
    say!(
        "trained {} iterations in {:.1}s: {} gaussians, {}/{} regions static",
        total,
        start.elapsed().as_secs_f64(),
        state.model.count(),
        state.mask.static_count(),
        state.mask.regions.len()
    );
    Ok(())
}

struct Loaded {
    dataset: Dataset,
    ckpt: Checkpoint,
    run_dir: PathBuf,
    settings: RasterSettings,
}

fn load_model(a: &ModelArgs) -> CliResult<Loaded> {
    let (path, run_dir) = if a.ckpt.is_dir() {
        (a.ckpt.join("checkpoint.ehsg"), a.ckpt.clone())
    } else {
        let dir = a
            .ckpt
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        (a.ckpt.clone(), dir)
    };
    let ckpt = load_checkpoint(&path)?;
    let dataset = load_dataset(&a.data)?;
    let mask = &ckpt.mask;
    if mask.width != dataset.camera.width || mask.height != dataset.camera.height {
        return Err(Failure::Core(Error::Shape(format!(
            "checkpoint mask is {}x{} but the dataset is {}x{}",
            mask.width, mask.height, dataset.camera.width, dataset.camera.height
        ))));
    }
    Ok(Loaded {
        dataset,
        ckpt,
        run_dir,
        settings: RasterSettings {
            normalize_depth: a.normalize_depth,
            track_gates: false,
        },
    })
}

fn model_config_text(a: &ModelArgs, threads: usize) -> String {
    format!(
        "data={}\nckpt={}\nall_dynamic={}\nnormalize_depth={}\nthreads={threads}\n",
        a.data.display(),
        a.ckpt.display(),
        a.all_dynamic,
        a.normalize_depth
    )
}

fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|source| {
        Failure::Core(Error::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

/// Piecewise-linear near-to-far colormap; pixels without coverage stay black.
fn colorize_depth(depth: &[f64], transmittance: &[f64]) -> Vec<[f64; 3]> {
    const STOPS: [[f64; 3]; 5] = [
        [0.99, 0.91, 0.15],
        [0.95, 0.45, 0.10],
        [0.75, 0.15, 0.35],
        [0.35, 0.10, 0.55],
        [0.05, 0.05, 0.30],
    ];
    let covered = |i: usize| transmittance[i] < 0.5 && depth[i] > 0.0;
    let (lo, hi) = (0..depth.len())
        .filter(|&i| covered(i))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(depth[i]), hi.max(depth[i]))
        });
    let span = (hi - lo).max(1e-12);
    (0..depth.len())
        .map(|i| {
            if !covered(i) {
                return [0.0; 3];
            }
            let x = ((depth[i] - lo) / span).clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
            let k = (x.floor() as usize).min(STOPS.len() - 2);
            let f = x - k as f64;
            std::array::from_fn(|c| STOPS[k][c] * (1.0 - f) + STOPS[k + 1][c] * f)
        })
        .collect()
}

fn render(a: RenderArgs, threads: usize) -> CliResult {
    let l = load_model(&a.model)?;
    let cam = &l.dataset.camera;
    let times: Vec<f64> = if a.t.is_empty() {
        l.dataset.frames.iter().map(|f| f.timestamp).collect()
    } else {
        a.t.clone()
    };
    ensure_dir(&a.out)?;
    let active = render_flags(cam, &l.ckpt.model, &l.ckpt.mask, !a.model.all_dynamic);
    for (k, &t) in times.iter().enumerate() {
        let out = render_model(cam, &l.ckpt.model, &active, t, &l.settings)?;
        let color = encode_rgb(cam.width, cam.height, &out.color)?;
        let depth = encode_rgb(
            cam.width,
            cam.height,
            &colorize_depth(&out.depth, &out.final_transmittance),
        )?;
        write_atomic(&a.out.join(format!("color_{k:04}.png")), &color)?;
        write_atomic(&a.out.join(format!("depth_{k:04}.png")), &depth)?;
    }
    let ts: Vec<String> = times.iter().map(|t| t.to_string()).collect();
    write_text(
        &a.out.join("effective-config.txt"),
        &format!("{}t={}\n", model_config_text(&a.model, threads), ts.join(",")),
    )?;
    say!("rendered {} timestamps to {}", times.len(), a.out.display());
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn eval(a: EvalArgs, threads: usize) -> CliResult {
    let l = load_model(&a.model)?;
    let rows = evaluate(
        &l.dataset,
        &l.ckpt.model,
        &l.ckpt.mask,
        !a.model.all_dynamic,
        &l.settings,
    )?;
    if rows.is_empty() {
        return Err(Failure::Core(Error::Domain("dataset has no test frames".into())));
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;

    say!("{:>8}  {:>12}  {:>10}", "frame", "psnr", "ssim");
    for (i, p, s) in &rows {
        say!("{i:>8}  {:>12}  {:>10}", fmt_metric(*p), fmt_metric(*s));
    }
    say!(
        "{:>8}  {:>12}  {:>10}",
        "mean",
        fmt_metric(mean_psnr),
        fmt_metric(mean_ssim)
    );

    let mut csv = String::from("frame,psnr,ssim\n");
    for (i, p, s) in &rows {
        let _ = writeln!(csv, "{i},{},{}", fmt_metric(*p), fmt_metric(*s));
    }
    let _ = writeln!(csv, "mean,{},{}", fmt_metric(mean_psnr), fmt_metric(mean_ssim));
    let out = a.out.unwrap_or_else(|| l.run_dir.clone());
    ensure_dir(&out)?;
    write_text(&out.join("eval.csv"), &csv)?;
    write_text(&out.join("effective-config.txt"), &model_config_text(&a.model, threads))?;
    say!("static regions: {:.1}%", 100.0 * static_fraction(&l.ckpt.mask));
    Ok(())
}

struct BenchRow {
    fps: f64,
    deformed: usize,
}

fn bench(a: BenchArgs, threads: usize) -> CliResult {
    if a.repeats == 0 {
        return Err(Failure::Usage("--repeats must be at least 1".into()));
    }
    let l = load_model(&a.model)?;
    let cam = &l.dataset.camera;
    let model = &l.ckpt.model;
    let modes = [
        ("amhs", render_flags(cam, model, &l.ckpt.mask, true)),
        ("all-dynamic", vec![true; model.count()]),
    ];
    let frames = &l.dataset.frames;
    let mut best = [f64::INFINITY; 2];
    // Modes alternate within each repeat so drift affects both equally.
    for _ in 0..=a.repeats {
        for (m, (_, active)) in modes.iter().enumerate() {
            let start = Instant::now();
            for f in frames {
                let attrs = deform_cloud(&model.cloud, &model.field, f.timestamp, active)?;
                rasterize(cam, &attrs, &l.settings)?;
            }
            best[m] = best[m].min(start.elapsed().as_secs_f64());
        }
    }
    let rows: Vec<BenchRow> = modes
        .iter()
        .zip(best)
        .map(|((_, active), secs)| BenchRow {
            fps: frames.len() as f64 / secs.max(1e-9),
            deformed: deformed_count(active),
        })
        .collect();
    let mut text = String::new();
    for ((name, _), r) in modes.iter().zip(&rows) {
        let _ = writeln!(
            text,
            "mode={name} frames={} gaussians={} deformed={} fps={:.3}",
            frames.len(),
            model.count(),
            r.deformed,
            r.fps
        );
    }
    let _ = writeln!(
        text,
        "speedup={:.4} deformed_reduction={:.4}",
        rows[0].fps / rows[1].fps,
        1.0 - rows[0].deformed as f64 / rows[1].deformed.max(1) as f64
    );
    emit(&text);
    let out = a.out.unwrap_or_else(|| l.run_dir.clone());
    ensure_dir(&out)?;
    write_text(&out.join("bench.txt"), &text)?;
    write_text(
        &out.join("effective-config.txt"),
        &format!("{}repeats={}\n", model_config_text(&a.model, threads), a.repeats),
    )?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, threads: usize) -> CliResult {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let settings = GradcheckSettings {
        gaussians: a.gaussians,
        size: a.size,
        basis: a.basis,
        step: a.step,
        tolerance: a.tolerance,
    };
    let mut text = String::new();
    let mut failed = 0;
    for seed in a.seed..a.seed + a.seeds {
        let r = check_scene(seed, &settings)?;
        let worst = r.worst().map(|w| (w.path.clone(), w.rel_error)).unwrap_or_default();
        let status = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        let _ = writeln!(
            text,
            "seed={seed} checked={} skipped_gate={} skipped_small={} max_rel={:.3e} worst={} {status}",
            r.checked(),
            r.skipped_gate,
            r.skipped_small,
            worst.1,
            worst.0
        );
    }
    let _ = writeln!(text, "seeds={} failed={failed} tolerance={:e}", a.seeds, a.tolerance);
    emit(&text);
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_text(&out.join("gradcheck.txt"), &text)?;
        write_text(
            &out.join("effective-config.txt"),
            &format!(
                "seed={}\nseeds={}\ngaussians={}\nsize={}\nbasis={}\nstep={:e}\ntolerance={:e}\nthreads={threads}\n",
                a.seed, a.seeds, a.gaussians, a.size, a.basis, a.step, a.tolerance
            ),
        )?;
    }
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} seeds exceeded the tolerance",
            a.seeds
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn set_requires_equals() {
        assert!(split_assignment("seed").is_err());
        assert_eq!(split_assignment(" a = b ").unwrap(), ("a", "b"));
    }

    #[test]
    fn depth_colormap_spans_near_and_far() {
        let c = colorize_depth(&[1.0, 2.0, 3.0, 0.0], &[0.0, 0.0, 0.0, 1.0]);
        assert_ne!(c[0], c[2]);
        assert_eq!(c[3], [0.0; 3]);
        assert!((c[0][0] - 0.99).abs() < 1e-12);
    }
}
