//! Subcommands of the `clnet` binary, callable in-process.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use clnet::config::{ModelConfig, Variant};
use clnet::gradcheck::{finite_diff_check, GradCheckOptions};
use clnet::inference::{attention_csvs, evaluate, predict_case, EvalOptions, EvalReport};
use clnet::losses::{total_loss, CaseTargets};
use clnet::model::forward;
use clnet::synth::{self, generate_case, generate_dataset, PairedSample};
use clnet::train::{self, batch_indices, load_checkpoint, save_checkpoint, TrainState};
use clnet::{eval, Error};
use serde::Serialize;

pub use config::RunConfig;

/// Offset between the base seeds of the train and test splits.
pub const TEST_SPLIT_OFFSET: u64 = 1_000_000;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or missing inputs; exit code 2.
    Usage(String),
    /// Everything else; exit code 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type Res<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "clnet", about = "Cross-view lesion detection with learned correspondence")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.variant=vild_only`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Res<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.sets)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired-view dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// `train` or `test`; the splits use disjoint case seeds.
        #[arg(long, default_value = "train")]
        split: String,
        /// Also write the labels without pixels.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// FROC table, curve CSV and pair metrics for one or more checkpoints.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Row labels, one per checkpoint.
        #[arg(long = "label")]
        labels: Vec<String>,
        /// Directory for one `{label}.csv` curve per checkpoint.
        #[arg(long)]
        curve_dir: Option<PathBuf>,
        /// Full reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        iou_thr: f64,
        #[arg(long, default_value_t = 0.1)]
        det_thr: f64,
    },
    /// Extracted cross-view pairs as JSON lines.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Entries checked per parameter; 0 checks all.
        #[arg(long, default_value_t = 8)]
        max_entries: usize,
        /// Scale the backward rule of this op (negative control).
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long, default_value_t = 1.5)]
        corrupt_factor: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Head-averaged attention matrices of one case as CSV files.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Case index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Primary output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match dispatch(cli.cmd, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Res<()> {
    match cmd {
        Command::GenData {
            cfg,
            out: path,
            n,
            split,
            annotations,
        } => gen_data(&cfg.load()?, &path, n, &split, annotations.as_deref(), err),
        Command::Train {
            cfg,
            data,
            checkpoint,
            log,
            resume,
        } => {
            let mut c = cfg.load()?;
            if let Some(d) = data {
                c.paths.data = d;
            }
            if let Some(p) = checkpoint {
                c.paths.checkpoint = p;
            }
            if let Some(p) = log {
                c.paths.log = p;
            }
            c.validate()?;
            train_cmd(&c, resume.as_deref(), err)
        }
        Command::Eval {
            checkpoints,
            data,
            labels,
            curve_dir,
            json,
            iou_thr,
            det_thr,
        } => eval_cmd(
            &checkpoints,
            &data,
            &labels,
            curve_dir.as_deref(),
            json.as_deref(),
            EvalOptions { iou_thr, det_thr },
            out,
        ),
        Command::Match { checkpoint, data, out: path } => match_cmd(&checkpoint, &data, path.as_deref(), out),
        Command::Gradcheck {
            cfg,
            max_entries,
            corrupt,
            corrupt_factor,
            out: path,
        } => gradcheck_cmd(&cfg.load()?, max_entries, corrupt, corrupt_factor, path.as_deref(), out),
        Command::DumpAttention {
            checkpoint,
            data,
            index,
            out: dir,
        } => dump_attention_cmd(&checkpoint, &data, index, &dir, out),
    }
}

fn require_file(path: &Path, what: &str) -> Res<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn load_run(path: &Path) -> Res<(ModelConfig, TrainState)> {
    require_file(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn load_data(path: &Path) -> Res<Vec<PairedSample>> {
    require_file(path, "dataset")?;
    Ok(synth::read_dataset(path)?)
}

pub fn split_seed(seed: u64, split: &str) -> Res<u64> {
    match split {
        "train" => Ok(seed),
        "test" => Ok(seed.wrapping_add(TEST_SPLIT_OFFSET)),
        other => Err(CliError::Usage(format!("unknown split `{other}` (expected train or test)"))),
    }
}

fn gen_data(c: &RunConfig, path: &Path, n: usize, split: &str, ann: Option<&Path>, err: &mut dyn Write) -> Res<()> {
    let samples = generate_dataset(split_seed(c.seed, split)?, n, &c.data)?;
    synth::write_dataset(path, &samples)?;
    if let Some(a) = ann {
        let anns: Vec<_> = samples.iter().map(PairedSample::annotation).collect();
        synth::write_annotations(a, &anns)?;
    }
    writeln!(err, "wrote {n} {split} cases to {}", path.display())?;
    Ok(())
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    error: String,
    batch: Vec<synth::Annotation>,
    config: &'a RunConfig,
}

fn step_path(base: &Path, step: usize) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(format!(".step{step}"));
    PathBuf::from(s)
}

/// Where the diagnostic dump of a non-finite loss goes.
pub fn nan_dump_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".nan.json");
    PathBuf::from(s)
}

fn train_cmd(c: &RunConfig, resume: Option<&Path>, err: &mut dyn Write) -> Res<()> {
    let data = load_data(&c.paths.data)?;
    let mut state = match resume {
        Some(p) => {
            let (model, state) = load_run(p)?;
            if model != c.model {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different model config",
                    p.display()
                )));
            }
            state
        }
        None => TrainState::init(&c.model, c.seed)?,
    };
    let log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&c.paths.log)?
    } else {
        File::create(&c.paths.log)?
    };
    let mut log = BufWriter::new(log_file);
    let res = train::train(&mut state, &c.model, &c.train, &data, |st, entry| {
        let line = serde_json::to_string(entry).map_err(|e| Error::contract(e.to_string()))?;
        writeln!(log, "{line}")?;
        let every = c.train.checkpoint_every;
        if every > 0 && st.step % every == 0 && st.step < c.train.steps {
            save_checkpoint(&step_path(&c.paths.checkpoint, st.step), &c.model, st)?;
        }
        Ok(())
    });
    log.flush()?;
    if let Err(e) = res {
        if let Error::NonFinite(_) = e {
            let idx = batch_indices(data.len(), c.train.batch_size, c.train.seed, state.step);
            let dump = NanDump {
                step: state.step,
                error: e.to_string(),
                batch: idx.iter().map(|&i| data[i].annotation()).collect(),
                config: c,
            };
            let path = nan_dump_path(&c.paths.checkpoint);
            fs::write(&path, serde_json::to_string_pretty(&dump).expect("dump serializes"))?;
            return Err(CliError::Runtime(format!("{e}; batch dumped to {}", path.display())));
        }
        return Err(e.into());
    }
    save_checkpoint(&c.paths.checkpoint, &c.model, &state)?;
    writeln!(err, "trained {} steps; checkpoint {}", state.step, c.paths.checkpoint.display())?;
    Ok(())
}

/// Default table label: the variant, plus the cost form where it matters.
pub fn default_label(m: &ModelConfig) -> String {
    let mut s = m.variant.name().to_string();
    if m.variant.uses_linker() {
        s.push_str(match m.cost_form {
            clnet::config::CostForm::Mul => "-mul",
            clnet::config::CostForm::Add => "-add",
        });
    }
    if !m.inter_attention && m.variant == Variant::VildOnly {
        s = "plain".to_string();
    }
    s
}

/// Pair-metric table printed under the recall table.
pub fn format_pair_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$} {:>9} {:>9} {:>9} {:>9}\n", "Method", "PairPrec", "PairRec", "ExactAcc", "Locality");
    for (label, r) in rows {
        let loc = r.locality.map_or("-".to_string(), |l| format!("{:.1}", 100.0 * l));
        s.push_str(&format!(
            "{:<width$} {:>9.1} {:>9.1} {:>9.1} {:>9}\n",
            label,
            100.0 * r.pairs.precision,
            100.0 * r.pairs.recall,
            100.0 * r.pairs.exact_pair_accuracy,
            loc
        ));
    }
    s
}

fn eval_cmd(
    checkpoints: &[PathBuf],
    data: &Path,
    labels: &[String],
    curve_dir: Option<&Path>,
    json: Option<&Path>,
    opts: EvalOptions,
    out: &mut dyn Write,
) -> Res<()> {
    if !labels.is_empty() && labels.len() != checkpoints.len() {
        return Err(CliError::Usage(format!(
            "{} labels for {} checkpoints",
            labels.len(),
            checkpoints.len()
        )));
    }
    let cases = load_data(data)?;
    let mut reports = Vec::new();
    for (k, p) in checkpoints.iter().enumerate() {
        let (model, state) = load_run(p)?;
        let label = labels.get(k).cloned().unwrap_or_else(|| default_label(&model));
        reports.push((label, evaluate(&state.params, &model, &cases, opts)?));
    }
    let rows: Vec<(String, [f64; 5])> = reports.iter().map(|(l, r)| (l.clone(), r.recalls)).collect();
    write!(out, "{}", eval::format_table(&rows))?;
    writeln!(out)?;
    let pair_rows: Vec<(String, &EvalReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    write!(out, "{}", format_pair_table(&pair_rows))?;
    if let Some(dir) = curve_dir {
        fs::create_dir_all(dir)?;
        for (l, r) in &reports {
            fs::write(dir.join(format!("{l}.csv")), eval::curve_csv(&r.curve))?;
        }
    }
    if let Some(j) = json {
        let named: Vec<_> = reports.iter().map(|(l, r)| serde_json::json!({"label": l, "report": r})).collect();
        fs::write(j, serde_json::to_string_pretty(&named).expect("report serializes") + "\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MatchLine<'a> {
    sample: usize,
    seed: u64,
    #[serde(flatten)]
    pair: &'a clnet::linker::ExtractedPair,
}

fn match_cmd(checkpoint: &Path, data: &Path, path: Option<&Path>, out: &mut dyn Write) -> Res<()> {
    let (model, state) = load_run(checkpoint)?;
    let cases = load_data(data)?;
    let mut text = String::new();
    for (i, s) in cases.iter().enumerate() {
        let p = predict_case(&state.params, &model, s, false)?;
        for pair in &p.pairs {
            let line = MatchLine {
                sample: i,
                seed: s.seed,
                pair,
            };
            text.push_str(&serde_json::to_string(&line).expect("pair serializes"));
            text.push('\n');
        }
    }
    match path {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Case used by the gradient check: two lesions at the model resolution,
/// at least one of them visible in a single view when the seed allows.
pub fn gradcheck_case(c: &RunConfig) -> Res<PairedSample> {
    let gen = synth::GenConfig {
        image_size: c.model.image_size,
        min_lesions: 2,
        max_lesions: 2,
        p_occ: c.data.p_occ.max(0.5),
        min_radius: (c.model.image_size as f64 / 10.0).max(1.5),
        max_radius: (c.model.image_size as f64 / 7.0).max(2.5),
        ..c.data.clone()
    };
    let mut first = None;
    for k in 0..200 {
        let s = generate_case(c.seed.wrapping_add(k), &gen)?;
        if s.pairs.iter().any(|p| p.0.is_none() || p.1.is_none()) {
            return Ok(s);
        }
        first.get_or_insert(s);
    }
    Ok(first.expect("at least one case generated"))
}

fn gradcheck_cmd(
    c: &RunConfig,
    max_entries: usize,
    corrupt: Option<String>,
    factor: f64,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Res<()> {
    let model = ModelConfig {
        detach_sim_targets: false,
        ..c.model.clone()
    };
    if let Some(op) = &corrupt {
        if !clnet::tape::OP_NAMES.contains(&op.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown op `{op}` for --corrupt (one of {})",
                clnet::tape::OP_NAMES.join(", ")
            )));
        }
    }
    let params = clnet::model::init_parameters(&model, c.seed)?;
    let case = gradcheck_case(c)?;
    let (img_c, img_m) = (case.img_c.to_tensor(), case.img_m.to_tensor());
    let opts = GradCheckOptions {
        max_entries: (max_entries > 0).then_some(max_entries),
        corrupt: corrupt.map(|op| (&*Box::leak(op.into_boxed_str()), factor)),
        ..GradCheckOptions::default()
    };
    let report = finite_diff_check(
        &params,
        |g| {
            let f = forward(g, &model, &img_c, &img_m, false)?;
            let t = CaseTargets {
                gt_c: &case.gt_c,
                gt_m: &case.gt_m,
                pairs: &case.pairs,
            };
            Ok(total_loss(g, &f, &t, &model)?.total)
        },
        &opts,
    )?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "passed": report.passed(),
        "max_rel_error": report.max_rel_error(),
        "report": report,
    }))
    .expect("report serializes")
        + "\n";
    match path {
        Some(p) => fs::write(p, &text)?,
        None => out.write_all(text.as_bytes())?,
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed for: {}",
            report.failures.join(", ")
        )))
    }
}

fn dump_attention_cmd(checkpoint: &Path, data: &Path, index: usize, dir: &Path, out: &mut dyn Write) -> Res<()> {
    let (model, state) = load_run(checkpoint)?;
    let cases = load_data(data)?;
    let s = cases
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("index {index} out of range for {} cases", cases.len())))?;
    let p = predict_case(&state.params, &model, s, true)?;
    fs::create_dir_all(dir)?;
    for (name, csv) in attention_csvs(&p) {
        fs::write(dir.join(&name), csv)?;
        writeln!(out, "{}", dir.join(&name).display())?;
    }
    Ok(())
}
