//! Command-line surface. Exit codes: 0 success, 2 config, 3 I/O, 4 divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gazeward_core::cues::{CueBank, CueMode, CueProviderConfig, PromptTemplate, SyntheticCueProvider};
use gazeward_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use gazeward_core::eval::{
    evaluate, evaluate_with_oracle, run_ablation, AblationData, AblationGrid, AblationTable, ReportRow, Verdict,
};
use gazeward_core::geometry::SphericalGaze;
use gazeward_core::nets::GazeEstimator;
use gazeward_core::pipeline::{
    derive_seed, generate_pseudo_labels, score_pool, self_train, train_teacher, PseudoLabelSet, SslData, SslState,
    TrainConfig, TrainHistory, TrainObserver,
};
use gazeward_core::reward::RewardModel;
use gazeward_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_model, Provenance};
use crate::config::{Overrides, RunConfigFile};
use crate::error::{AppError, AppResult};
use crate::io::{
    load_jsonl, load_labels, oracle_path, read_json, save_jsonl, save_labels, write_json, LABELED_FILE, UNLABELED_FILE,
};
use crate::mock::{MockBehavior, MockEmbedServer, MockReply};
use crate::remote::RemoteCueProvider;
use crate::report::{write_report, ReportFormat};

const AFTER_HELP: &str = "\
Configuration precedence: command-line flag > environment > --config file > built-in defaults.
Environment: OMNIGAZE_SEED (u64 run seed), OMNIGAZE_EMBED_URL (embedding service base URL).
Exit codes: 0 success, 2 configuration error, 3 I/O or data error, 4 training diverged.";

#[derive(Debug, Parser)]
#[command(name = "gazeward", version, about = "Reward-gated self-training for gaze estimation", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled pool, a shifted unlabeled pool and its oracle.
    Datagen(DatagenArgs),
    /// Train the teacher on labeled data.
    TrainTeacher(TrainTeacherArgs),
    /// Label an unlabeled pool with a teacher checkpoint.
    PseudoLabel(PseudoLabelArgs),
    /// Joint student/reward self-training.
    TrainSsl(TrainSslArgs),
    /// Mean angular error of a model on a labeled (or oracle-backed) file.
    Eval(EvalArgs),
    /// Reward confidences for (sample, label) pairs.
    Score(ScoreArgs),
    /// Train and evaluate a grid of configurations over several seeds.
    Ablate(AblateArgs),
    /// Serve the loopback embedding service used in tests.
    MockServer(MockServerArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CueModeArg {
    Synthetic,
    Remote,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// JSON run configuration (unknown keys rejected)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed [env: OMNIGAZE_SEED] [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Confidence threshold below which pseudo-labels are dropped [default: 0.5]
    #[arg(long)]
    pub tau: Option<f32>,
    /// Teacher epochs [default: 30]
    #[arg(long)]
    pub teacher_epochs: Option<u32>,
    /// Self-training epochs [default: 30]
    #[arg(long)]
    pub ssl_epochs: Option<u32>,
    /// Minibatch size, split evenly between pools [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cue source [default: synthetic]
    #[arg(long, value_enum)]
    pub cues: Option<CueModeArg>,
    /// Embedding service base URL for remote cues [env: OMNIGAZE_EMBED_URL]
    #[arg(long)]
    pub embed_url: Option<String>,
}

impl TrainFlags {
    fn resolve(&self) -> AppResult<RunConfigFile> {
        RunConfigFile::resolve(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                tau: self.tau,
                teacher_epochs: self.teacher_epochs,
                ssl_epochs: self.ssl_epochs,
                batch_size: self.batch_size,
                embed_url: self.embed_url.clone(),
                cue_mode: self.cues.map(|m| match m {
                    CueModeArg::Synthetic => CueMode::Synthetic,
                    CueModeArg::Remote => CueMode::Remote,
                }),
            },
        )
    }
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Synthetic task description (JSON); defaults when omitted
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory for labeled.jsonl, unlabeled.jsonl and its oracle
    #[arg(long)]
    pub out: PathBuf,
    /// Labeled samples (source domain)
    #[arg(long, default_value_t = 500)]
    pub n_labeled: usize,
    /// Unlabeled samples (shifted target domain)
    #[arg(long, default_value_t = 2000)]
    pub n_unlabeled: usize,
    /// Generator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Directory holding labeled.jsonl
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path; history goes next to it as <stem>.history.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    /// Teacher checkpoint
    #[arg(long)]
    pub teacher: PathBuf,
    /// Unlabeled JSONL file
    #[arg(long)]
    pub unlabeled: PathBuf,
    /// Pseudo-label JSONL output
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSslArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Directory holding labeled.jsonl and unlabeled.jsonl
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Teacher checkpoint; trained from the labeled pool when omitted
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Run directory for checkpoints, history and pseudo-labels
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gaze estimator checkpoint (teacher or student)
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL file to evaluate
    #[arg(long)]
    pub data: PathBuf,
    /// Labels for an unlabeled data file
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Report path; format from the extension (.json, .csv, .md)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Reward model checkpoint
    #[arg(long)]
    pub reward: PathBuf,
    /// Student checkpoint the reward model was trained with
    #[arg(long)]
    pub student: PathBuf,
    /// JSONL file with the samples to score
    #[arg(long)]
    pub data: PathBuf,
    /// Candidate labels ({id, yaw, pitch} per line); the file's own labels otherwise
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Labeled files the synthetic description generator may look at
    /// [default: the data file and its oracle, when present]
    #[arg(long)]
    pub view: Vec<PathBuf>,
    /// JSON output, one record per sample
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Grid of named overrides (JSON); the standard grid when omitted
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Directory holding labeled.jsonl, unlabeled.jsonl and its oracle
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated training seeds [default: the run seed]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Seeds trained concurrently
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory for table.json and report.{json,csv,md}
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MockServerArgs {
    #[arg(long, default_value = "127.0.0.1:8765")]
    pub addr: String,
    /// Answer the first N requests with HTTP 500
    #[arg(long, default_value_t = 0)]
    pub fail_first: usize,
}

/// Parses `args` and runs the command, mapping failures to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(&e)
        }
    }
}

pub fn dispatch(command: Command) -> AppResult<()> {
    match command {
        Command::Datagen(a) => cmd_datagen(&a),
        Command::TrainTeacher(a) => cmd_train_teacher(&a),
        Command::PseudoLabel(a) => cmd_pseudo_label(&a),
        Command::TrainSsl(a) => cmd_train_ssl(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::MockServer(a) => cmd_mock_server(&a),
    }
}

// ---- shared plumbing ----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerationRecord {
    spec: SyntheticSpec,
    seed: u64,
    n_labeled: usize,
    n_unlabeled: usize,
    spec_hash: String,
}

fn data_dir(arg: &Option<PathBuf>, cfg: &RunConfigFile) -> AppResult<PathBuf> {
    arg.clone()
        .or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| AppError::config("no data directory (pass --data or set data.dir)"))
}

fn load_optional_oracle(unlabeled: &Path) -> AppResult<Option<Dataset>> {
    let p = oracle_path(unlabeled);
    if p.exists() {
        load_jsonl(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Seed of the cue encoders for a run.
pub fn cue_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, "cues")
}

/// Cue banks for `sets`. Synthetic descriptions look up gaze in `views`
/// (the description generator sees the sample, not the training code).
pub fn build_cue_banks(
    cues: &CueProviderConfig,
    seed: u64,
    feature_width: usize,
    views: &[&Dataset],
    sets: &[&Dataset],
) -> AppResult<Vec<CueBank>> {
    let prompt = PromptTemplate::default();
    let banks = match cues.mode {
        CueMode::Synthetic => {
            let mut p = SyntheticCueProvider::new(cues.clone(), feature_width, seed)?;
            for v in views {
                p.add_dataset_view(v);
            }
            sets.iter()
                .map(|ds| CueBank::build(&p, ds, &prompt))
                .collect::<Result<Vec<_>, _>>()?
        }
        CueMode::Remote => {
            let p = RemoteCueProvider::new(cues)?;
            for ds in sets {
                p.prefetch(ds.samples(), &prompt)?;
            }
            sets.iter()
                .map(|ds| CueBank::build(&p, ds, &prompt))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(banks)
}

fn history_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ckpt.with_file_name(format!("{stem}.history.json"))
}

/// Writes teacher checkpoints at the phase boundary and at every refresh.
struct CheckpointWriter {
    dir: PathBuf,
    provenance: Provenance,
    failure: Option<AppError>,
}

impl CheckpointWriter {
    fn save(&mut self, model: &GazeEstimator, path: PathBuf, epoch: Option<u32>) -> gazeward_core::Result<()> {
        let prov = Provenance {
            epoch,
            ..self.provenance.clone()
        };
        save_model(model, prov, &path).map_err(|e| {
            let msg = e.to_string();
            self.failure = Some(e);
            CoreError::invalid(msg)
        })
    }
}

impl TrainObserver for CheckpointWriter {
    fn on_teacher_trained(&mut self, teacher: &GazeEstimator) -> gazeward_core::Result<()> {
        let p = self.dir.join("teacher.ogzc");
        self.save(teacher, p, Some(0))
    }

    fn on_refresh(
        &mut self,
        epoch: u32,
        teacher: &GazeEstimator,
        _pseudo: &PseudoLabelSet,
    ) -> gazeward_core::Result<()> {
        let p = self
            .dir
            .join("checkpoints")
            .join(format!("teacher-epoch-{epoch:03}.ogzc"));
        self.save(teacher, p, Some(epoch))
    }
}

// ---- commands -----------------------------------------------------------------

pub fn cmd_datagen(a: &DatagenArgs) -> AppResult<()> {
    let spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json(p).map_err(|e| match e {
            AppError::Parse { path, message, .. } => AppError::config(format!("{}: {message}", path.display())),
            other => other,
        })?,
        None => SyntheticSpec::default(),
    };
    spec.validate().map_err(|e| AppError::config(e.to_string()))?;
    let seed = RunConfigFile::resolve(
        None,
        &Overrides {
            seed: a.seed,
            ..Default::default()
        },
    )?
    .train
    .seed;
    let data = generate_synthetic(&spec, a.n_labeled, a.n_unlabeled, seed)?;
    let unlabeled = a.out.join(UNLABELED_FILE);
    save_jsonl(&data.labeled, &a.out.join(LABELED_FILE))?;
    save_jsonl(&data.unlabeled, &unlabeled)?;
    save_jsonl(&data.oracle, &oracle_path(&unlabeled))?;
    write_json(
        &GenerationRecord {
            spec_hash: spec.hash_hex(seed),
            spec,
            seed,
            n_labeled: a.n_labeled,
            n_unlabeled: a.n_unlabeled,
        },
        &a.out.join("spec.json"),
    )?;
    println!("labeled {}", data.labeled.len());
    println!("unlabeled {}", data.unlabeled.len());
    Ok(())
}

pub fn cmd_train_teacher(a: &TrainTeacherArgs) -> AppResult<()> {
    let cfg = a.flags.resolve()?;
    let dir = data_dir(&a.data, &cfg)?;
    let labeled = load_jsonl(&dir.join(LABELED_FILE))?;
    let t0 = Instant::now();
    let (teacher, history) = train_teacher(&labeled, &cfg.train)?;
    eprintln!("teacher trained in {:.1}s", t0.elapsed().as_secs_f32());
    let prov = Provenance {
        config_hash: Some(cfg.train.hash_hex()),
        epoch: Some(cfg.train.teacher_epochs),
        seed: Some(cfg.train.seed),
        context: serde_json::Value::Null,
    };
    save_model(&teacher, prov, &a.out)?;
    write_json(&history, &history_path(&a.out))?;
    if let Some(r) = history.last() {
        println!(
            "epochs {} train_error_deg {:.4}",
            history.records.len(),
            r.train_error_deg
        );
    }
    Ok(())
}

pub fn cmd_pseudo_label(a: &PseudoLabelArgs) -> AppResult<()> {
    let (teacher, _) = load_model::<GazeEstimator>(&a.teacher)?;
    let unlabeled = load_jsonl(&a.unlabeled)?;
    if unlabeled.is_empty() {
        save_labels(&PseudoLabelSet::new(Vec::new(), Vec::new(), 0)?, &a.out)?;
    } else {
        save_labels(&generate_pseudo_labels(&teacher, &unlabeled, 0)?, &a.out)?;
    }
    println!("pseudo_labels {}", unlabeled.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct RewardContext<'a> {
    cues: &'a CueProviderConfig,
    cue_seed: u64,
}

#[derive(Debug, Deserialize)]
struct RewardContextOwned {
    cues: CueProviderConfig,
    cue_seed: u64,
}

pub fn cmd_train_ssl(a: &TrainSslArgs) -> AppResult<()> {
    let cfg = a.flags.resolve()?;
    let dir = data_dir(&a.data, &cfg)?;
    let labeled = load_jsonl(&dir.join(LABELED_FILE))?;
    let unlabeled_path = dir.join(UNLABELED_FILE);
    let unlabeled = load_jsonl(&unlabeled_path)?;
    let oracle = load_optional_oracle(&unlabeled_path)?;
    let seed = cfg.train.seed;
    let cues_seed = cue_seed(seed);

    let mut views = vec![&labeled];
    if cfg.cues.mode == CueMode::Synthetic {
        views.push(oracle.as_ref().ok_or_else(|| {
            AppError::format(
                &oracle_path(&unlabeled_path),
                "synthetic cues need the generator's gaze view for the unlabeled pool",
            )
        })?);
    }
    let t0 = Instant::now();
    let banks = build_cue_banks(
        &cfg.cues,
        cues_seed,
        labeled.feature_width,
        &views,
        &[&labeled, &unlabeled],
    )?;
    eprintln!("cues ready in {:.1}s", t0.elapsed().as_secs_f32());

    let config_hash = cfg.train.hash_hex();
    let provenance = Provenance {
        config_hash: Some(config_hash.clone()),
        epoch: None,
        seed: Some(seed),
        context: serde_json::Value::Null,
    };
    let mut writer = CheckpointWriter {
        dir: a.out.clone(),
        provenance: provenance.clone(),
        failure: None,
    };
    let data = SslData {
        labeled: &labeled,
        unlabeled: &unlabeled,
        labeled_cues: &banks[0],
        unlabeled_cues: &banks[1],
        validation: None,
    };
    let t0 = Instant::now();
    let result = (|| {
        let (teacher, teacher_history) = match &a.teacher {
            Some(p) => (load_model::<GazeEstimator>(p)?.0, TrainHistory::default()),
            None => {
                let (t, h) = train_teacher(&labeled, &cfg.train)?;
                writer.on_teacher_trained(&t)?;
                (t, h)
            }
        };
        Ok::<_, AppError>(self_train(teacher, teacher_history, &data, &cfg.train, &mut writer)?)
    })();
    let out = match (result, writer.failure.take()) {
        (Err(_), Some(io)) => return Err(io),
        (r, _) => r?,
    };
    eprintln!("self-training finished in {:.1}s", t0.elapsed().as_secs_f32());

    let SslState { student, reward, .. } = &out.state;
    let final_prov = Provenance {
        epoch: Some(cfg.train.ssl_epochs),
        ..provenance
    };
    save_model(student, final_prov.clone(), &a.out.join("student.ogzc"))?;
    save_model(
        reward,
        Provenance {
            context: serde_json::to_value(RewardContext {
                cues: &cfg.cues,
                cue_seed: cues_seed,
            })
            .expect("context serializes"),
            ..final_prov
        },
        &a.out.join("reward.ogzc"),
    )?;
    write_json(&out.history, &a.out.join("history.json"))?;
    save_labels(&out.pseudo, &a.out.join("pseudo_labels.jsonl"))?;
    let retained = out.history.last().and_then(|r| r.retained_fraction);
    match &oracle {
        Some(o) => {
            let report = evaluate_with_oracle(student, &unlabeled, o)?;
            let row = ReportRow {
                config: config_hash,
                seed,
                mean_deg: report.mean_deg as f32,
                sd_deg: None,
                n: report.n,
                retained_fraction_final: retained,
            };
            write_json(&row, &a.out.join("report.json"))?;
            println!("mean_deg {:.4} n {}", row.mean_deg, row.n);
        }
        None => eprintln!(
            "no oracle next to {}; skipping the final report",
            unlabeled_path.display()
        ),
    }
    println!(
        "ssl_epochs {}",
        out.history.phase(gazeward_core::pipeline::Phase::Ssl).count()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> AppResult<()> {
    let (model, meta) = load_model::<GazeEstimator>(&a.model)?;
    let ds = load_jsonl(&a.data)?;
    let report = match &a.oracle {
        Some(p) => evaluate_with_oracle(&model, &ds, &load_jsonl(p)?)?,
        None => evaluate(&model, &ds)?,
    };
    let config = meta.config_hash.unwrap_or_else(|| {
        a.model
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string()
    });
    let row = ReportRow {
        config,
        seed: meta.seed.unwrap_or(0),
        mean_deg: report.mean_deg as f32,
        sd_deg: None,
        n: report.n,
        retained_fraction_final: None,
    };
    match ReportFormat::for_path(&a.out) {
        ReportFormat::Json => write_json(&row, &a.out)?,
        other => write_report(std::slice::from_ref(&row), &a.out, other)?,
    }
    println!("mean_deg {:.4} n {}", report.mean_deg, report.n);
    let deciles: Vec<String> = report.deciles.iter().map(|d| format!("{d:.2}")).collect();
    println!("deciles {}", deciles.join(" "));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub initial: f32,
    #[serde(rename = "final")]
    pub final_score: f32,
}

pub fn cmd_score(a: &ScoreArgs) -> AppResult<()> {
    let (reward, meta) = load_model::<RewardModel>(&a.reward)?;
    let (student, _) = load_model::<GazeEstimator>(&a.student)?;
    let ctx: RewardContextOwned = serde_json::from_value(meta.context.clone())
        .map_err(|e| AppError::format(&a.reward, format!("reward checkpoint lacks its cue context: {e}")))?;
    let mut cues = ctx.cues;
    if let Some(url) = crate::remote::resolve_endpoint(&cues) {
        cues.endpoint = Some(url);
    }
    let ds = load_jsonl(&a.data)?;
    let labels: Vec<SphericalGaze> = match &a.labels {
        Some(p) => {
            let set = load_labels(p)?;
            ds.samples()
                .iter()
                .map(|s| {
                    set.get(&s.id)
                        .ok_or_else(|| AppError::format(p, format!("no label for {}", s.id)))
                })
                .collect::<AppResult<_>>()?
        }
        None => ds
            .samples()
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| AppError::config(format!("{} is unlabeled; pass --labels", s.id)))
            })
            .collect::<AppResult<_>>()?,
    };
    let mut views = Vec::new();
    if a.view.is_empty() {
        views.push(ds.clone());
        if let Some(o) = load_optional_oracle(&a.data)? {
            views.push(o);
        }
    } else {
        for p in &a.view {
            views.push(load_jsonl(p)?);
        }
    }
    let view_refs: Vec<&Dataset> = views.iter().collect();
    let bank = build_cue_banks(&cues, ctx.cue_seed, ds.feature_width, &view_refs, &[&ds])?.remove(0);
    let scores = score_pool(&reward, &student, &ds, &bank, &labels)?;
    let records: Vec<ScoreRecord> = ds
        .samples()
        .iter()
        .zip(&scores)
        .map(|(s, c)| ScoreRecord {
            id: s.id.clone(),
            initial: c.initial,
            final_score: c.final_score,
        })
        .collect();
    write_json(&records, &a.out)?;
    println!("scored {}", records.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationOutput<'a> {
    table: &'a gazeward_core::eval::AblationTable,
    verdicts: Vec<Verdict>,
}

pub fn cmd_ablate(a: &AblateArgs) -> AppResult<()> {
    let cfg = a.flags.resolve()?;
    let grid: AblationGrid = match &a.grid {
        Some(p) => read_json(p).map_err(|e| match e {
            AppError::Parse { path, message, .. } => AppError::config(format!("{}: {message}", path.display())),
            other => other,
        })?,
        None => AblationGrid::standard(),
    };
    grid.validate().map_err(|e| AppError::config(e.to_string()))?;
    let seeds = if a.seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        a.seeds.clone()
    };
    let dir = data_dir(&a.data, &cfg)?;
    let labeled = load_jsonl(&dir.join(LABELED_FILE))?;
    let unlabeled_path = dir.join(UNLABELED_FILE);
    let unlabeled = load_jsonl(&unlabeled_path)?;
    let oracle = load_optional_oracle(&unlabeled_path)?.ok_or_else(|| {
        AppError::format(
            &oracle_path(&unlabeled_path),
            "ablation needs the oracle for evaluation",
        )
    })?;
    let mut views = vec![&labeled];
    if cfg.cues.mode == CueMode::Synthetic {
        views.push(&oracle);
    }
    let mut banks = build_cue_banks(
        &cfg.cues,
        cue_seed(cfg.train.seed),
        labeled.feature_width,
        &views,
        &[&labeled, &unlabeled],
    )?;
    let unlabeled_cues = banks.pop().expect("two banks");
    let labeled_cues = banks.pop().expect("two banks");
    let data = AblationData {
        labeled,
        unlabeled,
        labeled_cues,
        unlabeled_cues,
        eval: oracle,
    };
    let t0 = Instant::now();
    let table = ablate_seeds(&grid, &cfg.train, &seeds, a.jobs, &data)?;
    eprintln!("ablation finished in {:.1}s", t0.elapsed().as_secs_f32());
    for f in &table.failures {
        eprintln!("cell {} seed {} failed: {}", f.config, f.seed, f.message);
    }
    let verdicts = table.verdicts();
    write_json(
        &AblationOutput {
            table: &table,
            verdicts: verdicts.clone(),
        },
        &a.out.join("table.json"),
    )?;
    let mut rows = table.rows.clone();
    rows.extend(table.summary.iter().cloned());
    write_report(&rows, &a.out.join("report.json"), ReportFormat::Json)?;
    write_report(&rows, &a.out.join("report.csv"), ReportFormat::Csv)?;
    write_report(&table.summary, &a.out.join("report.md"), ReportFormat::Markdown)?;
    for r in &table.summary {
        println!(
            "{} mean_deg {:.4} sd_deg {:.4}",
            r.config,
            r.mean_deg,
            r.sd_deg.unwrap_or(0.0)
        );
    }
    for v in &verdicts {
        println!(
            "{} {} ({})",
            if v.holds { "HOLDS" } else { "VIOLATED" },
            v.name,
            v.detail
        );
    }
    if table.rows.is_empty() {
        return Err(match table.failures.first() {
            Some(f) => AppError::config(format!("every ablation cell failed; first: {}", f.message)),
            None => AppError::config("ablation produced no rows"),
        });
    }
    Ok(())
}

/// Runs each seed's cells on one of up to `jobs` threads. Seeds share no
/// state, so the merged table does not depend on `jobs`.
fn ablate_seeds(
    grid: &AblationGrid,
    base: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
    data: &AblationData,
) -> AppResult<AblationTable> {
    if jobs == 0 {
        return Err(AppError::config("jobs must be at least 1"));
    }
    if jobs == 1 {
        return Ok(run_ablation(grid, base, seeds, |_| Ok(data.clone()))?);
    }
    let chunk = seeds.len().div_ceil(jobs).max(1);
    let parts = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || run_ablation(grid, base, part, |_| Ok(data.clone()))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(AblationTable::merge(parts))
}

pub fn cmd_mock_server(a: &MockServerArgs) -> AppResult<()> {
    let dims = CueProviderConfig::default().dims();
    let behavior = MockBehavior::new(MockReply::Seeded {
        visual_len: dims.visual_len(),
        text_len: dims.text_len(),
    })
    .failing_first(a.fail_first);
    let server = MockEmbedServer::start(&a.addr, behavior).map_err(|e| AppError::io(Path::new(&a.addr), e))?;
    println!("listening on {}", server.endpoint());
    server.join();
    Ok(())
}
