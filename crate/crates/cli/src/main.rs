//! `grood` command-line interface.

mod config;
mod error;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grood::eval::{population_std, score_histogram, EvalResult};
use grood::feature_io::{read_feature_set, Manifest, OodGroup};
use grood::index::IndexMode;
use grood::pipeline::{
    ablate, evaluate, oracle, Dataset, Detector, OracleMode, RunConfig, ScoreVariant,
};
use grood::prototype::{EnergyOrder, Strategy};
use grood::synth::{generate, SynthParams};
use grood::SavedDetector;
use serde::Serialize;

use crate::config::FileConfig;

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}
use crate::error::{CliError, Result};
use crate::report::{ensure_dir, write_csv, write_json};

#[derive(Debug, Parser)]
#[command(name = "grood", version, about = "Gradient-based OOD detection from exported embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build prototypes, the gradient corpus and the index; write a bundle.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        /// Bundle directory to (re)create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a feature file with a fitted bundle.
    Score {
        #[arg(long)]
        bundle: PathBuf,
        /// Penultimate `.grfd` file to score.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit (or load a bundle) and evaluate on the manifest's test sets.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle experiments with OOD prototypes built from real OOD rows.
    Oracle {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        mode: OracleMode,
        /// Rows sampled per OOD set in local mode.
        #[arg(short = 'm', long = "samples")]
        samples: Option<usize>,
        /// Validation portion of each other OOD set in global mode.
        #[arg(long)]
        global_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score variants and the uniform-noise prototype against GROOD.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic neural-collapse benchmark.
    SynthBench {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        synth: SynthArgs,
        /// Seeded repetitions (seed, seed+1, ...) for the stability metric.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic benchmark as feature files plus a manifest.
    SynthData {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Proximity-filter quantile in [0, 1).
    #[arg(long)]
    filter_quantile: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    energy_order: Option<EnergyOrder>,
    #[arg(long)]
    energy_count: Option<usize>,
    #[arg(long)]
    aux_count: Option<usize>,
    #[arg(long)]
    index: Option<IndexMode>,
    #[arg(long)]
    nlist: Option<usize>,
    #[arg(long)]
    nprobe: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Defaults to $GROOD_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_tpr: Option<f64>,
    #[arg(long)]
    variant: Option<ScoreVariant>,
}

#[derive(Debug, Clone, Args)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    n_ood: Option<usize>,
}

struct Resolved {
    manifest: Option<PathBuf>,
    run: RunConfig,
    synth: SynthParams,
}

impl RunArgs {
    fn resolve(&self) -> Result<Resolved> {
        let FileConfig {
            manifest,
            mut run,
            synth,
        } = config::load(self.config.as_deref())?;
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    run.$($field)+ = v;
                }
            };
        }
        set!(strategy => strategy);
        set!(lambda => lambda);
        set!(energy_order => energy_order);
        set!(energy_count => energy_count);
        set!(index => index.mode);
        set!(nprobe => index.nprobe);
        set!(k => index.k);
        set!(seed => seed);
        set!(target_tpr => target_tpr);
        set!(variant => variant);
        if self.filter_quantile.is_some() {
            run.filter_quantile = self.filter_quantile;
        }
        if self.aux_count.is_some() {
            run.aux_count = self.aux_count;
        }
        if self.nlist.is_some() {
            run.index.nlist = self.nlist;
        }
        Ok(Resolved {
            manifest: self.manifest.clone().or(manifest),
            run,
            synth,
        })
    }
}

impl SynthArgs {
    fn apply(&self, p: &mut SynthParams) {
        if let Some(v) = self.classes {
            p.num_classes = v;
        }
        if let Some(v) = self.dim {
            p.dim = v;
        }
        if let Some(v) = self.sigma {
            p.sigma = v;
        }
        if let Some(v) = self.n_per_class {
            p.n_per_class = v;
        }
        if let Some(v) = self.n_ood {
            p.n_ood = v;
        }
    }
}

impl Resolved {
    fn dataset(&self) -> Result<Dataset> {
        let path = self.manifest.as_ref().ok_or_else(|| {
            CliError::Usage("no manifest: pass --manifest or set it in the config file".into())
        })?;
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Dataset::from_manifest(&manifest, base)?)
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

fn group_name(g: Option<OodGroup>) -> &'static str {
    match g {
        Some(OodGroup::Near) => "near",
        Some(OodGroup::Far) => "far",
        None => "",
    }
}

fn eval_rows(result: &EvalResult, groups: &BTreeMap<String, Option<OodGroup>>) -> Vec<Vec<String>> {
    result
        .per_dataset
        .iter()
        .map(|(name, m)| {
            vec![
                name.clone(),
                group_name(groups.get(name).copied().flatten()).to_string(),
                m.n_ood.to_string(),
                f(m.auroc),
                f(m.fpr),
            ]
        })
        .collect()
}

const EVAL_HEADER: [&str; 5] = ["dataset", "group", "n_ood", "auroc", "fpr_at_tpr"];

fn groups_of(dataset: &Dataset) -> BTreeMap<String, Option<OodGroup>> {
    dataset
        .ood_tests
        .iter()
        .map(|o| (o.name.clone(), o.group))
        .collect()
}

#[derive(Serialize)]
struct FitSummary<'a> {
    bundle: &'a Path,
    config: &'a RunConfig,
    tau: f64,
    num_classes: usize,
    dim: usize,
    corpus_rows: usize,
    nlist: usize,
    ood_source_rows: usize,
    degenerate_rows: usize,
}

fn fit_saved(dataset: &Dataset, run: &RunConfig) -> Result<SavedDetector> {
    let detector = Detector::fit(dataset, run)?;
    let tau = detector.calibrate(&dataset.train.features, run.variant, run.target_tpr)?;
    Ok(SavedDetector {
        detector,
        variant: run.variant,
        tau,
        target_tpr: run.target_tpr,
    })
}

fn cmd_fit(run: &RunArgs, out: &Path) -> Result<()> {
    let r = run.resolve()?;
    let dataset = r.dataset()?;
    let saved = fit_saved(&dataset, &r.run)?;
    saved.save(out)?;
    let d = &saved.detector;
    let summary = FitSummary {
        bundle: out,
        config: &r.run,
        tau: saved.tau,
        num_classes: d.model.num_classes(),
        dim: d.model.dim(),
        corpus_rows: d.index.len(),
        nlist: d.index.nlist(),
        ood_source_rows: d.notes.ood_source_rows,
        degenerate_rows: d.notes.degenerate_rows.len(),
    };
    say!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    Ok(())
}

#[derive(Serialize)]
struct ScoreSummary {
    variant: ScoreVariant,
    tau: f64,
    n: usize,
    n_id: usize,
    n_ood: usize,
}

fn cmd_score(bundle: &Path, input: &Path, out: &Path) -> Result<()> {
    let saved = SavedDetector::load(bundle)?;
    let set = read_feature_set(input)?;
    let report = saved
        .detector
        .report(&set.features, saved.variant, saved.tau)?;
    ensure_dir(out)?;
    write_csv(
        &out.join("scores.csv"),
        &["row", "score", "verdict"],
        report
            .scores
            .iter()
            .zip(&report.verdicts)
            .enumerate()
            .map(|(i, (s, v))| vec![i.to_string(), f(*s), v.to_string()]),
    )?;
    let n_ood = report
        .verdicts
        .iter()
        .filter(|v| **v == grood::index::Verdict::Ood)
        .count();
    let summary = ScoreSummary {
        variant: saved.variant,
        tau: saved.tau,
        n: report.scores.len(),
        n_id: report.scores.len() - n_ood,
        n_ood,
    };
    write_json(&out.join("summary.json"), &summary)?;
    say!("scored {} rows, {} flagged OOD", summary.n, summary.n_ood);
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    variant: ScoreVariant,
    tau: f64,
    ncp_accuracy: Option<f64>,
    result: &'a EvalResult,
}

fn cmd_eval(run: &RunArgs, bundle: Option<&Path>, out: &Path) -> Result<()> {
    let r = run.resolve()?;
    let dataset = r.dataset()?;
    let saved = match bundle {
        Some(b) => SavedDetector::load(b)?,
        None => fit_saved(&dataset, &r.run)?,
    };
    let e = evaluate(
        &saved.detector,
        &dataset.id_test,
        &dataset.ood_tests,
        saved.variant,
        r.run.target_tpr,
    )?;
    ensure_dir(out)?;
    write_csv(&out.join("eval.csv"), &EVAL_HEADER, eval_rows(&e.result, &groups_of(&dataset)))?;
    let accuracy = match dataset.id_test.labels {
        Some(_) => Some(
            saved
                .detector
                .ncp_accuracy(&dataset.id_test, r.run.include_ood_in_accuracy)?,
        ),
        None => None,
    };
    write_json(
        &out.join("summary.json"),
        &EvalSummary {
            variant: saved.variant,
            tau: saved.tau,
            ncp_accuracy: accuracy,
            result: &e.result,
        },
    )?;
    say!("AUROC {:.4}  FPR@{} {:.4}", e.result.auroc, e.result.target_tpr, e.result.fpr_at_tpr);
    Ok(())
}

fn cmd_oracle(
    run: &RunArgs,
    mode: OracleMode,
    samples: Option<usize>,
    global_fraction: Option<f64>,
    out: &Path,
) -> Result<()> {
    let mut r = run.resolve()?;
    if let Some(m) = samples {
        r.run.oracle_samples = m;
    }
    if let Some(g) = global_fraction {
        r.run.global_fraction = g;
    }
    r.run.oracle = mode;
    let dataset = r.dataset()?;
    let report = oracle(&dataset, &r.run, mode)?;
    ensure_dir(out)?;
    write_csv(
        &out.join("oracle.csv"),
        &[
            "dataset",
            "prototype_rows",
            "eval_rows",
            "oracle_auroc",
            "oracle_fpr_at_tpr",
            "baseline_auroc",
            "baseline_fpr_at_tpr",
        ],
        report.runs.iter().map(|x| {
            vec![
                x.dataset.clone(),
                x.prototype_rows.values().map(Vec::len).sum::<usize>().to_string(),
                x.eval_rows.len().to_string(),
                f(x.oracle.auroc),
                f(x.oracle.fpr_at_tpr),
                f(x.baseline.auroc),
                f(x.baseline.fpr_at_tpr),
            ]
        }),
    )?;
    write_json(&out.join("summary.json"), &report)?;
    say!(
        "{mode:?} oracle mean AUROC {:.4} (baseline {} {:.4})",
        report.mean_auroc, report.baseline_strategy, report.baseline_mean_auroc
    );
    Ok(())
}

fn cmd_ablate(run: &RunArgs, out: &Path) -> Result<()> {
    let r = run.resolve()?;
    let dataset = r.dataset()?;
    let rows = ablate(&dataset, &r.run)?;
    let names: Vec<&str> = dataset.ood_tests.iter().map(|o| o.name.as_str()).collect();
    let mut header = vec!["variant"];
    header.extend(names.iter().copied());
    header.extend(["near", "far", "mean"]);
    let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
    ensure_dir(out)?;
    write_csv(
        &out.join("ablation.csv"),
        &header,
        rows.iter().map(|row| {
            let mut cells = vec![row.variant.clone()];
            cells.extend(names.iter().map(|n| opt(row.result.dataset_auroc(n))));
            cells.push(opt(row.result.group_auroc(OodGroup::Near)));
            cells.push(opt(row.result.group_auroc(OodGroup::Far)));
            cells.push(f(row.result.auroc));
            cells
        }),
    )?;
    write_json(&out.join("summary.json"), &rows)?;
    for row in &rows {
        say!("{:28} {:.4}", row.variant, row.result.auroc);
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRun {
    seed: u64,
    result: EvalResult,
}

#[derive(Serialize)]
struct BenchSummary<'a> {
    params: &'a SynthParams,
    config: &'a RunConfig,
    runs: Vec<BenchRun>,
    mean_auroc: f64,
    auroc_std: Option<f64>,
}

fn cmd_synth_bench(run: &RunArgs, synth: &SynthArgs, repeats: usize, bins: usize, out: &Path) -> Result<()> {
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let mut r = run.resolve()?;
    synth.apply(&mut r.synth);
    ensure_dir(out)?;
    let mut runs = Vec::with_capacity(repeats);
    let mut csv_rows = Vec::new();
    let mut hist_rows = Vec::new();
    for i in 0..repeats as u64 {
        let seed = r.run.seed.wrapping_add(i);
        let params = SynthParams {
            seed,
            ..r.synth.clone()
        };
        let config = RunConfig {
            seed,
            ..r.run.clone()
        };
        let dataset = generate(&params)?;
        let det = Detector::fit(&dataset, &config)?;
        let e = evaluate(&det, &dataset.id_test, &dataset.ood_tests, config.variant, config.target_tpr)?;
        for mut row in eval_rows(&e.result, &groups_of(&dataset)) {
            row.insert(0, seed.to_string());
            csv_rows.push(row);
        }
        if i == 0 {
            let sets = std::iter::once(("id", &e.id_scores))
                .chain(e.ood_scores.iter().map(|(n, s)| (n.as_str(), s)));
            for (name, scores) in sets {
                let h = score_histogram(scores, bins)?;
                for (c, d) in h.centers.iter().zip(&h.densities) {
                    hist_rows.push(vec![name.to_string(), f(*c), f(*d)]);
                }
            }
        }
        runs.push(BenchRun { seed, result: e.result });
    }
    let aurocs: Vec<f64> = runs.iter().map(|x| x.result.auroc).collect();
    let summary = BenchSummary {
        params: &r.synth,
        config: &r.run,
        mean_auroc: aurocs.iter().sum::<f64>() / aurocs.len() as f64,
        auroc_std: if aurocs.len() >= 2 { Some(population_std(&aurocs)?) } else { None },
        runs,
    };
    let mut header = vec!["seed"];
    header.extend(EVAL_HEADER);
    write_csv(&out.join("synth_bench.csv"), &header, csv_rows)?;
    write_csv(&out.join("histograms.csv"), &["set", "bin_center", "density"], hist_rows)?;
    write_json(&out.join("summary.json"), &summary)?;
    match summary.auroc_std {
        Some(s) => say!("mean AUROC {:.4}, std {:.4} over {repeats} seeds", summary.mean_auroc, s),
        None => say!("AUROC {:.4}", summary.mean_auroc),
    }
    Ok(())
}

fn cmd_synth_data(run: &RunArgs, synth: &SynthArgs, out: &Path) -> Result<()> {
    let mut r = run.resolve()?;
    synth.apply(&mut r.synth);
    r.synth.seed = r.run.seed;
    let dataset = generate(&r.synth)?;
    let manifest = dataset.write(out)?;
    say!(
        "wrote {} records to {}",
        manifest.records.len(),
        out.join("manifest.json").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Fit { run, out } => cmd_fit(run, out),
        Command::Score { bundle, input, out } => cmd_score(bundle, input, out),
        Command::Eval { run, bundle, out } => cmd_eval(run, bundle.as_deref(), out),
        Command::Oracle {
            run,
            mode,
            samples,
            global_fraction,
            out,
        } => cmd_oracle(run, *mode, *samples, *global_fraction, out),
        Command::Ablate { run, out } => cmd_ablate(run, out),
        Command::SynthBench {
            run,
            synth,
            repeats,
            bins,
            out,
        } => cmd_synth_bench(run, synth, *repeats, *bins, out),
        Command::SynthData { run, synth, out } => cmd_synth_data(run, synth, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let err = CliError::Usage(first.to_string());
            eprintln!("error[{}]: {err}", err.category());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
