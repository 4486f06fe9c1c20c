//! Angular-error evaluation, reward discrimination (AUC), and the ablation
//! harness with seed-mean/sd tables and ordering verdicts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cues::CueBank;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::gaze_error_deg;
use crate::nets::GazeEstimator;
use crate::pipeline::{self_train, train_teacher, NoObserver, ScoreKind, Selection, SslData, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: u64,
    pub mean_deg: f64,
    /// Error at the 10th, 20th, …, 100th percentile (nearest rank).
    pub deciles: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn with_run(mut self, config_hash: impl Into<String>, seed: u64) -> Self {
        self.config_hash = config_hash.into();
        self.seed = seed;
        self
    }
}

/// Mean angular error of `model` on a labeled dataset.
pub fn evaluate(model: &GazeEstimator, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let preds = model.predict(&ds.feature_matrix())?;
    let mut errors = Vec::with_capacity(ds.len());
    for (p, s) in preds.iter().zip(ds.samples()) {
        let y = s
            .label
            .ok_or_else(|| Error::invalid(format!("sample {} is unlabeled; supply an oracle", s.id)))?;
        errors.push(gaze_error_deg(*p, y)?);
    }
    // sorted summation keeps the mean independent of sample order
    errors.sort_by(f64::total_cmp);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let deciles = (1..=10)
        .map(|k| {
            let rank = (k * errors.len()).div_ceil(10).max(1);
            errors[rank - 1]
        })
        .collect();
    Ok(EvalReport {
        dataset: ds.name.clone(),
        n: ds.len() as u64,
        mean_deg: mean,
        deciles,
        config_hash: String::new(),
        seed: 0,
    })
}

/// Evaluates an unlabeled dataset against an oracle holding its labels.
pub fn evaluate_with_oracle(model: &GazeEstimator, ds: &Dataset, oracle: &Dataset) -> Result<EvalReport> {
    let labels: BTreeMap<&str, _> = oracle
        .samples()
        .iter()
        .filter_map(|s| s.label.map(|g| (s.id.as_str(), g)))
        .collect();
    let mut samples = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        let mut s = s.clone();
        if s.label.is_none() {
            s.label = Some(
                *labels
                    .get(s.id.as_str())
                    .ok_or_else(|| Error::invalid(format!("oracle has no label for {}", s.id)))?,
            );
        }
        samples.push(s);
    }
    let mut joined = Dataset::new(ds.name.clone(), samples)?;
    joined.feature_width = ds.feature_width;
    evaluate(model, &joined)
}

/// Probability that a clean sample outscores a corrupted one (ties count
/// one half). `corrupted[i]` marks the negatives.
pub fn discrimination_auc(scores: &[f32], corrupted: &[bool]) -> Result<f64> {
    if scores.len() != corrupted.len() {
        return Err(Error::shape("discrimination_auc", &[scores.len()], &[corrupted.len()]));
    }
    let n_neg = corrupted.iter().filter(|c| **c).count();
    let n_pos = corrupted.len() - n_neg;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "discrimination_auc needs both clean and corrupted samples",
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if !corrupted[k] {
                pos_rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

// ---- ablation ---------------------------------------------------------------

/// Switches a cell changes relative to the base configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigOverrides {
    pub objective_weights: Option<(f32, f32)>,
    pub selection: Option<Selection>,
    pub score: Option<ScoreKind>,
    /// `Some(None)` disables refresh.
    #[serde(with = "double_option")]
    pub refresh_interval: Option<Option<u32>>,
    pub tau: Option<f32>,
}

mod double_option {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Option<u32>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(inner) => inner.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<u32>>, D::Error> {
        Option::<u32>::deserialize(d).map(Some)
    }
}

impl ConfigOverrides {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if let Some(w) = self.objective_weights {
            cfg.objective_weights = w;
        }
        if let Some(s) = self.selection {
            cfg.selection = s;
        }
        if let Some(s) = self.score {
            cfg.score = s;
        }
        if let Some(k) = self.refresh_interval {
            cfg.refresh_interval = k;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub overrides: ConfigOverrides,
}

impl AblationCell {
    fn new(name: &str, overrides: ConfigOverrides) -> Self {
        Self {
            name: name.to_string(),
            overrides,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

const NO_SELECTION: Selection = Selection {
    filter: false,
    reweight: false,
};

impl AblationGrid {
    pub fn baseline() -> AblationCell {
        AblationCell::new(
            "baseline",
            ConfigOverrides {
                objective_weights: Some((1.0, 0.0)),
                ..Default::default()
            },
        )
    }

    pub fn nofilter() -> AblationCell {
        AblationCell::new(
            "nofilter",
            ConfigOverrides {
                selection: Some(NO_SELECTION),
                ..Default::default()
            },
        )
    }

    pub fn full() -> AblationCell {
        AblationCell::new("full", ConfigOverrides::default())
    }

    /// Labeled-only, unlabeled without selection, unlabeled with selection.
    pub fn core() -> Self {
        Self {
            cells: alloc::vec![Self::baseline(), Self::nofilter(), Self::full()],
        }
    }

    /// Filtering and reweighting in isolation.
    pub fn selection() -> Self {
        let only = |name: &str, filter: bool, reweight: bool| {
            AblationCell::new(
                name,
                ConfigOverrides {
                    selection: Some(Selection { filter, reweight }),
                    ..Default::default()
                },
            )
        };
        Self {
            cells: alloc::vec![
                Self::nofilter(),
                only("filter_only", true, false),
                only("reweight_only", false, true),
                Self::full()
            ],
        }
    }

    /// Gating on the initial versus the final confidence.
    pub fn score() -> Self {
        Self {
            cells: alloc::vec![
                AblationCell::new(
                    "initial_score",
                    ConfigOverrides {
                        score: Some(ScoreKind::Initial),
                        ..Default::default()
                    },
                ),
                Self::full()
            ],
        }
    }

    /// Refresh every epoch, every 10 epochs, never.
    pub fn refresh() -> Self {
        let every = |name: &str, k: Option<u32>| {
            AblationCell::new(
                name,
                ConfigOverrides {
                    refresh_interval: Some(k),
                    ..Default::default()
                },
            )
        };
        Self {
            cells: alloc::vec![
                every("refresh_1", Some(1)),
                every("refresh_10", Some(10)),
                every("no_refresh", None)
            ],
        }
    }

    /// Union of all grids, deduplicated by name.
    pub fn standard() -> Self {
        let mut cells: Vec<AblationCell> = Vec::new();
        for g in [Self::core(), Self::selection(), Self::score(), Self::refresh()] {
            for c in g.cells {
                if !cells.iter().any(|x| x.name == c.name) {
                    cells.push(c);
                }
            }
        }
        Self { cells }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::invalid("ablation grid has no cells"));
        }
        for (i, c) in self.cells.iter().enumerate() {
            if self.cells[..i].iter().any(|x| x.name == c.name) {
                return Err(Error::invalid(format!("duplicate ablation cell {}", c.name)));
            }
        }
        Ok(())
    }
}

/// Everything a seed's cells train and evaluate on.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub labeled_cues: CueBank,
    pub unlabeled_cues: CueBank,
    /// Labeled evaluation set (e.g. the unlabeled pool joined with its oracle).
    pub eval: Dataset,
}

/// One row of the report schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub seed: u64,
    pub mean_deg: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sd_deg: Option<f32>,
    pub n: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retained_fraction_final: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub config: String,
    pub seed: u64,
    pub message: String,
}

/// Per-seed rows, per-config summaries (`sd_deg` set, `seed` = number of
/// seeds aggregated), and failures.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<ReportRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

impl AblationTable {
    pub fn summary_of(&self, config: &str) -> Option<&ReportRow> {
        self.summary.iter().find(|r| r.config == config)
    }

    /// Joins tables computed for disjoint seed sets and recomputes the summary.
    pub fn merge(parts: impl IntoIterator<Item = AblationTable>) -> Self {
        let mut table = AblationTable::default();
        for p in parts {
            table.rows.extend(p.rows);
            table.failures.extend(p.failures);
        }
        table
            .rows
            .sort_by(|a, b| a.config.cmp(&b.config).then(a.seed.cmp(&b.seed)));
        table
            .failures
            .sort_by(|a, b| a.seed.cmp(&b.seed).then(a.config.cmp(&b.config)));
        table.summarize();
        table
    }

    fn mean(&self, config: &str) -> Option<f64> {
        self.summary_of(config).map(|r| r.mean_deg as f64)
    }

    fn summarize(&mut self) {
        let mut by: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            by.entry(r.config.as_str()).or_default().push(r);
        }
        self.summary = by
            .into_iter()
            .map(|(config, rows)| {
                let errs: Vec<f64> = rows.iter().map(|r| r.mean_deg as f64).collect();
                let (m, sd) = mean_sd(&errs);
                let retained: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r.retained_fraction_final.map(f64::from))
                    .collect();
                ReportRow {
                    config: config.to_string(),
                    seed: rows.len() as u64,
                    mean_deg: m as f32,
                    sd_deg: Some(sd as f32),
                    n: rows.iter().map(|r| r.n).sum(),
                    retained_fraction_final: (!retained.is_empty()).then(|| mean_sd(&retained).0 as f32),
                }
            })
            .collect();
    }

    /// Directional checks for every grid whose cells are all present.
    pub fn verdicts(&self) -> Vec<Verdict> {
        let mut out = Vec::new();
        let m = |c: &str| self.mean(c);
        if let (Some(b), Some(n), Some(f)) = (m("baseline"), m("nofilter"), m("full")) {
            out.push(Verdict {
                name: "core_components".into(),
                holds: f < n && n < b && n - f > 0.2 && b - n > 0.2,
                detail: format!(
                    "full {f:.3}, nofilter {n:.3}, baseline {b:.3} (want full < nofilter < baseline, gaps > 0.2)"
                ),
            });
        }
        if let (Some(n), Some(fo), Some(ro), Some(f)) = (m("nofilter"), m("filter_only"), m("reweight_only"), m("full"))
        {
            out.push(Verdict {
                name: "selection_strategy".into(),
                holds: fo < n && ro < n && f < fo && f < ro,
                detail: format!("full {f:.3}, filter_only {fo:.3}, reweight_only {ro:.3}, nofilter {n:.3} (want full < each single strategy < nofilter)"),
            });
        }
        if let (Some(i), Some(f)) = (m("initial_score"), m("full")) {
            out.push(Verdict {
                name: "confidence_score".into(),
                holds: f <= i,
                detail: format!("final {f:.3}, initial {i:.3} (want final <= initial)"),
            });
        }
        if let (Some(k1), Some(k10), Some(none)) = (
            self.summary_of("refresh_1"),
            self.summary_of("refresh_10"),
            self.summary_of("no_refresh"),
        ) {
            let sd = |r: &ReportRow| r.sd_deg.unwrap_or(0.0);
            out.push(Verdict {
                name: "refresh_interval".into(),
                holds: k10.mean_deg <= none.mean_deg,
                detail: format!(
                    "refresh_10 {:.3}, no_refresh {:.3} (want refresh_10 <= no_refresh)",
                    k10.mean_deg, none.mean_deg
                ),
            });
            out.push(Verdict {
                name: "refresh_every_epoch_variance".into(),
                holds: sd(k1) >= sd(k10) && sd(k1) >= sd(none),
                detail: format!(
                    "sd: refresh_1 {:.3}, refresh_10 {:.3}, no_refresh {:.3}",
                    sd(k1),
                    sd(k10),
                    sd(none)
                ),
            });
        }
        out
    }
}

/// Trains every cell for every seed and evaluates the student on
/// `data(seed).eval`. The teacher is trained once per seed and shared.
/// Failing cells are recorded and do not affect the others.
pub fn run_ablation<F>(grid: &AblationGrid, base: &TrainConfig, seeds: &[u64], data: F) -> Result<AblationTable>
where
    F: Fn(u64) -> Result<AblationData>,
{
    grid.validate()?;
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("run_ablation needs at least one seed"));
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        let seeded = TrainConfig { seed, ..base.clone() };
        let fail_all = |table: &mut AblationTable, e: &Error| {
            for c in &grid.cells {
                table.failures.push(CellFailure {
                    config: c.name.clone(),
                    seed,
                    message: format!("{e}"),
                });
            }
        };
        let d = match data(seed) {
            Ok(d) => d,
            Err(e) => {
                fail_all(&mut table, &e);
                continue;
            }
        };
        let (teacher, th) = match train_teacher(&d.labeled, &seeded) {
            Ok(t) => t,
            Err(e) => {
                fail_all(&mut table, &e);
                continue;
            }
        };
        let ssl = SslData {
            labeled: &d.labeled,
            unlabeled: &d.unlabeled,
            labeled_cues: &d.labeled_cues,
            unlabeled_cues: &d.unlabeled_cues,
            validation: None,
        };
        for cell in &grid.cells {
            let cfg = cell.overrides.apply(&seeded);
            let result = cfg
                .validate()
                .and_then(|_| self_train(teacher.clone(), th.clone(), &ssl, &cfg, &mut NoObserver))
                .and_then(|out| {
                    let report = evaluate(&out.state.student, &d.eval)?;
                    Ok((report, out.history.last().and_then(|r| r.retained_fraction)))
                });
            match result {
                Ok((report, retained)) => table.rows.push(ReportRow {
                    config: cell.name.clone(),
                    seed,
                    mean_deg: report.mean_deg as f32,
                    sd_deg: None,
                    n: report.n,
                    retained_fraction_final: retained,
                }),
                Err(e) => table.failures.push(CellFailure {
                    config: cell.name.clone(),
                    seed,
                    message: format!("{e}"),
                }),
            }
        }
    }
    table
        .rows
        .sort_by(|a, b| a.config.cmp(&b.config).then(a.seed.cmp(&b.seed)));
    table.summarize();
    Ok(table)
}

const CSV_HEADER: &str = "config,seed,mean_deg,sd_deg,n,retained_fraction_final";

fn opt(v: Option<f32>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// CSV with a header and one line per row.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.config,
            r.seed,
            r.mean_deg,
            opt(r.sd_deg),
            r.n,
            opt(r.retained_fraction_final)
        ));
    }
    s
}

/// Markdown table with one row per report row.
pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut s = String::from("| config | seed | mean error (deg) | n | retained |\n|---|---|---|---|---|\n");
    for r in rows {
        let err = match r.sd_deg {
            Some(sd) => format!("{:.3} ± {:.3}", r.mean_deg, sd),
            None => format!("{:.3}", r.mean_deg),
        };
        let retained = r
            .retained_fraction_final
            .map(|x| format!("{x:.3}"))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.config, r.seed, err, r.n, retained
        ));
    }
    s
}
