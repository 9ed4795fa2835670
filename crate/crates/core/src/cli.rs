//! Command-line front end. Every subcommand returns a process exit code:
//! 0 success, 1 usage, 2 data or format problems, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::geometry::LandmarkSet3D;
use crate::gradcheck;
use crate::image::Image;
use crate::pipeline::data::{generate_records, read_split, write_dataset};
use crate::pipeline::{edit, evaluate, prepare, run_schedule, Config, EvalMetrics, TrainState};
use crate::synthdata::Split;

#[derive(Debug, Parser)]
#[command(name = "poseforge", version, about = "Style-preserving face pose editing on synthetic faces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic paired dataset into `<out>/train` and `<out>/test`.
    GenData(GenDataArgs),
    /// Pretrain the inpainting GAN, then train sampler and GAN jointly.
    Train(TrainArgs),
    /// Move a face to the pose of a target landmark set.
    Edit(EditArgs),
    /// Finite-difference check of every analytic backward pass.
    Gradcheck(GradcheckArgs),
    /// Train with and without the sampler on the same budget and compare.
    Ablate(AblateArgs),
    /// Held-out metrics of a trained state.
    Eval(EvalArgs),
}

/// Configuration flags shared by the data and training commands.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Configuration file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured image side length.
    #[arg(long)]
    pub resolution: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.resolution {
            cfg.resolution = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory written by `gen-data`; generated in memory if omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the metrics log, checkpoints and final state.
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of steps (pretraining first, the rest joint).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint; its embedded configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Trained state (checkpoint file).
    #[arg(long)]
    pub state: PathBuf,
    /// Source face image (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Landmarks of the source face (68 rows of `x y z`).
    #[arg(long)]
    pub src_ldmk: PathBuf,
    /// Landmarks of the target pose (68 rows of `x y z`).
    #[arg(long)]
    pub tgt_ldmk: PathBuf,
    /// Output image path (PNG).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Base seed of the random test tensors.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of seeds per layer.
    #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
    pub seeds: usize,
    /// Skew the analytic gradient of one layer (self-test of the checker).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory; generated in memory per seed if omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the comparison table and per-run logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of steps per run.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of consecutive seeds, starting at the configured one.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained state (checkpoint file).
    #[arg(long)]
    pub state: PathBuf,
    /// Dataset directory; its `test` split is used. Generated if omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write the metrics line to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => run_gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Edit(a) => run_edit(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sets the schedule so that it runs `steps` steps in total.
pub fn apply_steps(cfg: &mut Config, steps: usize) {
    if steps <= cfg.pretrain_steps {
        cfg.pretrain_steps = steps;
        cfg.joint_steps = 0;
    } else {
        cfg.joint_steps = steps - cfg.pretrain_steps;
    }
}

pub fn run_gen_data(args: &GenDataArgs) -> Result<i32> {
    let cfg = args.cfg.resolve()?;
    create_dir(&args.out)?;
    write_dataset(&cfg.dataset(), &args.out, cfg.n_pairs, cfg.n_test_pairs)?;
    write_file(&args.out.join("config.txt"), &cfg.to_text())?;
    println!(
        "wrote {} train and {} test records to {}",
        cfg.n_pairs,
        cfg.n_test_pairs,
        args.out.display()
    );
    Ok(0)
}

fn load_split(data: Option<&Path>, cfg: &Config, split: Split) -> Result<Vec<crate::pipeline::PairRecord>> {
    let n = match split {
        Split::Train => cfg.n_pairs,
        Split::Test => cfg.n_test_pairs,
    };
    match data {
        Some(dir) => read_split(dir, split),
        None => generate_records(&cfg.dataset(), split, n),
    }
}

/// Keeps the first `n` lines of an existing log (used when resuming).
fn truncated_log(path: &Path, n: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .take(n as usize)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    Ok(lines)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.ckpt")
}

pub fn run_train(args: &TrainArgs) -> Result<i32> {
    let mut state = match &args.resume {
        Some(p) => TrainState::load(p)?,
        None => TrainState::new(args.cfg.resolve()?)?,
    };
    if let Some(s) = args.steps {
        apply_steps(&mut state.cfg, s);
    }
    let cfg = state.cfg.clone();
    create_dir(&args.out)?;
    write_file(&args.out.join("config.txt"), &cfg.to_text())?;
    let records = load_split(args.data.as_deref(), &cfg, Split::Train)?;
    let data = prepare(&state, &records)?;

    let log_path = args.out.join("metrics.log");
    let existed = log_path.exists();
    let kept = truncated_log(&log_path, state.step)?;
    if existed && (kept.len() as u64) < state.step {
        eprintln!(
            "warning: {} holds {} of the {} lines before the checkpoint",
            log_path.display(),
            kept.len(),
            state.step
        );
    }
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    for l in &kept {
        writeln!(log, "{l}").map_err(|e| Error::io(&log_path, e))?;
    }
    let total = cfg.total_steps() as u64;
    let every = cfg.checkpoint_every as u64;
    run_schedule(&mut state, &data, total, |st, l| {
        writeln!(log, "{}", l.to_line()).map_err(|e| Error::io(&log_path, e))?;
        if st.step % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            st.save(&args.out.join(checkpoint_name(st.step)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    state.save(&args.out.join("final.ckpt"))?;
    println!("trained {} steps; state in {}", state.step, args.out.display());
    Ok(0)
}

pub fn run_edit(args: &EditArgs) -> Result<i32> {
    let state = TrainState::load(&args.state)?;
    let img = Image::load_png(&args.image)?;
    let src = LandmarkSet3D::load(&args.src_ldmk)?;
    let tgt = LandmarkSet3D::load(&args.tgt_ldmk)?;
    let out = edit(&state, &img, &src, &tgt)?;
    out.save_png(&args.out)?;
    Ok(0)
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    if let Some(l) = &args.corrupt {
        if !gradcheck::LAYERS.contains(&l.as_str()) {
            return Err(Error::InvalidInput(format!("unknown layer {l}")));
        }
    }
    let start = std::time::Instant::now();
    let results = gradcheck::run_all(args.seed, args.seeds, args.corrupt.as_deref())?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<16} worst_rel={:.3e} checked={} kinks={} {}",
            r.layer,
            r.worst_rel,
            r.checked,
            r.kinks,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{} layers, {} seeds, tolerance {:.0e}, {:.2}s",
        results.len(),
        args.seeds,
        gradcheck::TOLERANCE,
        start.elapsed().as_secs_f64()
    );
    if ok {
        Ok(0)
    } else {
        eprintln!("error: gradient check failed");
        Ok(3)
    }
}

/// Trains one configuration and evaluates it; writes its log to `log_path`.
fn train_eval(cfg: &Config, data: Option<&Path>, log_path: &Path) -> Result<EvalMetrics> {
    let mut state = TrainState::new(cfg.clone())?;
    let train = prepare(&state, &load_split(data, cfg, Split::Train)?)?;
    let test = prepare(&state, &load_split(data, cfg, Split::Test)?)?;
    let file = File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let mut log = BufWriter::new(file);
    run_schedule(&mut state, &train, cfg.total_steps() as u64, |_, l| {
        writeln!(log, "{}", l.to_line()).map_err(|e| Error::io(log_path, e))
    })?;
    log.flush().map_err(|e| Error::io(log_path, e))?;
    evaluate(&state, &test)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Comparison rows of one ablation: per seed, with and without sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub with_pas: Vec<EvalMetrics>,
    pub without_pas: Vec<EvalMetrics>,
}

impl AblationTable {
    pub fn median_l1(&self) -> (f64, f64) {
        (
            median(self.with_pas.iter().map(|m| m.l1_edit).collect()),
            median(self.without_pas.iter().map(|m| m.l1_edit).collect()),
        )
    }

    pub fn median_dice(&self) -> (f64, f64) {
        (
            median(self.with_pas.iter().map(|m| m.dice_sampled).collect()),
            median(self.without_pas.iter().map(|m| m.dice_sampled).collect()),
        )
    }

    /// Tab-separated table: one row per seed and a median row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("seed\tl1_with_pas\tl1_without_pas\tdice_with_pas\tdice_without_pas\n");
        for (k, seed) in self.seeds.iter().enumerate() {
            let (a, b) = (&self.with_pas[k], &self.without_pas[k]);
            let _ = writeln!(
                s,
                "{seed}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
                a.l1_edit, b.l1_edit, a.dice_sampled, b.dice_sampled
            );
        }
        let (la, lb) = self.median_l1();
        let (da, db) = self.median_dice();
        let _ = writeln!(s, "median\t{la:.6e}\t{lb:.6e}\t{da:.6e}\t{db:.6e}");
        s
    }
}

/// Runs the ablation for `runs` consecutive seeds, writing per-run metrics
/// logs into `out`.
pub fn ablate(base: &Config, data: Option<&Path>, out: &Path, runs: usize) -> Result<AblationTable> {
    create_dir(out)?;
    let mut table = AblationTable {
        seeds: Vec::new(),
        with_pas: Vec::new(),
        without_pas: Vec::new(),
    };
    for k in 0..runs as u64 {
        let seed = base.seed + k;
        for use_pas in [true, false] {
            let cfg = Config {
                seed,
                use_pas,
                ..base.clone()
            };
            let tag = if use_pas { "with_pas" } else { "without_pas" };
            let m = train_eval(&cfg, data, &out.join(format!("seed{seed}_{tag}.log")))?;
            if use_pas {
                table.with_pas.push(m);
            } else {
                table.without_pas.push(m);
            }
        }
        table.seeds.push(seed);
    }
    Ok(table)
}

pub fn run_ablate(args: &AblateArgs) -> Result<i32> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(s) = args.steps {
        apply_steps(&mut cfg, s);
    }
    if args.runs == 0 {
        return Err(Error::InvalidInput("--runs must be positive".into()));
    }
    let table = ablate(&cfg, args.data.as_deref(), &args.out, args.runs)?;
    let tsv = table.to_tsv();
    write_file(&args.out.join("ablation.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(0)
}

pub fn run_eval(args: &EvalArgs) -> Result<i32> {
    let state = TrainState::load(&args.state)?;
    let records = load_split(args.data.as_deref(), &state.cfg, Split::Test)?;
    let m = evaluate(&state, &prepare(&state, &records)?)?;
    let line = m.to_line();
    println!("{line}");
    if let Some(p) = &args.out {
        write_file(p, &format!("{line}\n"))?;
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["poseforge", "--help"]), 0);
        for sub in ["gen-data", "train", "edit", "gradcheck", "ablate", "eval"] {
            assert_eq!(run(["poseforge", sub, "--help"]), 0, "{sub}");
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["poseforge"]), 1);
        assert_eq!(run(["poseforge", "frobnicate"]), 1);
        assert_eq!(run(["poseforge", "train", "--bogus"]), 1);
    }

    #[test]
    fn steps_split_between_phases() {
        let mut cfg = Config::default();
        apply_steps(&mut cfg, 50);
        assert_eq!((cfg.pretrain_steps, cfg.joint_steps), (50, 0));
        let mut cfg = Config::default();
        apply_steps(&mut cfg, 800);
        assert_eq!((cfg.pretrain_steps, cfg.joint_steps), (500, 300));
    }

    #[test]
    fn median_of_three_and_four() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
