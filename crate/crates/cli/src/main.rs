use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use iconometer::calibration::{calibrate, default_grid, read_pairs_csv};
use iconometer::embedding::{ids_path, read_ids};
use iconometer::model::validate_manifest;
use iconometer::pipeline::{run_stages, RunError, Stage};
use iconometer::report::write_json;
use iconometer::synthetic::{
    gaps_table, plan_validation, read_pair_scores_csv, read_reference_dir, run_planted, run_validation, score_plans,
    validation_table, write_composites, PatchLibrary, PixelPatchEmbedder, ValidationConfig,
};
use iconometer::{read_embeddings, Error, EmbeddingMatrix, Manifest, RunConfig, Thresholds, Variant};

#[derive(Parser)]
#[command(name = "iconometer", version)]
#[command(about = "Evaluate how text-to-image models recognize and reproduce iconic imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the header of an EMB1 embedding file
    InspectEmb { path: PathBuf },
    /// Check a manifest against every structural invariant
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        tau: TauArgs,
    },
    /// Sweep the alignment threshold over labelled similarity pairs
    Calibrate {
        /// CSV with `sim,label` columns, label `same` or `different`
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated thresholds (default 0.50 to 0.90 in steps of 0.05)
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Recognition and realization metrics plus per-level breakdowns
    Evaluate(RunArgs),
    /// Controlled-overlap composites scored with VR
    ValidateSynthetic(SyntheticArgs),
    /// Retention and metric deltas under synonym and description prompts
    Perturb(RunArgs),
    /// Spearman correlations between CRA and reference features
    Correlate(RunArgs),
    /// Every artifact in one run
    Report(RunArgs),
}

#[derive(Args, Clone)]
struct TauArgs {
    #[arg(long)]
    tau_align: Option<f64>,
    #[arg(long)]
    tau_reuse: Option<f64>,
    #[arg(long)]
    tau_coherence: Option<f64>,
}

impl TauArgs {
    fn thresholds(&self) -> Thresholds {
        let mut t = Thresholds::default();
        if let Some(v) = self.tau_align {
            t.tau_align = v;
        }
        if let Some(v) = self.tau_reuse {
            t.tau_reuse = v;
        }
        if let Some(v) = self.tau_coherence {
            t.tau_coherence = v;
        }
        t
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tau: TauArgs,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Comma-separated model names; all models when omitted
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Comma-separated prompt variants; all variants when omitted
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Largest tolerated share of unresolvable images
    #[arg(long, default_value_t = 0.10)]
    fail_threshold: f64,
    /// Permutations per Spearman test
    #[arg(long, default_value_t = 10_000)]
    permutations: usize,
    /// Per-reference feature table overriding manifest values
    #[arg(long)]
    features: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        let mut c = RunConfig::new(&self.manifest, &self.out);
        c.thresholds = self.tau.thresholds();
        c.seed = self.seed;
        c.models = self.models.clone();
        c.variants = self.variants.clone();
        c.fail_threshold = self.fail_threshold;
        c.permutations = self.permutations;
        c.features_path = self.features.clone();
        c
    }
}

#[derive(Args)]
struct SyntheticArgs {
    /// Directory of reference PNGs; ids are file stems
    #[arg(long, required_unless_present = "planted")]
    refs: Option<PathBuf>,
    /// Use planted patch embeddings for this many references instead of images
    #[arg(long, conflicts_with_all = ["refs", "embeddings"])]
    planted: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pairs_per_reference: usize,
    #[arg(long)]
    tau_reuse: Option<f64>,
    #[arg(long, default_value_t = 4)]
    grid_side: usize,
    /// EMB1 patch file with a `.ids.txt` sidecar covering references and
    /// composites; without it cells are embedded from pixels
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// CSV of `condition,reference_id,pair_index,sscd,pdfe_level`
    #[arg(long)]
    pair_scores: Option<PathBuf>,
}

/// 1 for invalid input, 2 for I/O.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        _ => 1,
    }
}

fn fail(e: &anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    let code = e
        .chain()
        .find_map(|c| {
            c.downcast_ref::<RunError>()
                .map(|r| r.exit_code() as u8)
                .or_else(|| c.downcast_ref::<Error>().map(exit_code))
        })
        .unwrap_or(2);
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::InspectEmb { path } => inspect(&path),
        Command::Validate { manifest, tau } => validate(&manifest, &tau.thresholds()),
        Command::Calibrate { pairs, out, grid } => {
            let samples = read_pairs_csv(&pairs)?;
            let grid = if grid.is_empty() { default_grid() } else { grid };
            let report = calibrate(&samples, &grid)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join("calibration.json"), &report)?;
            println!(
                "tau {:.2}: retention {:.4}, false positive rate {:.4}, F1 {:.4}",
                report.chosen_tau, report.true_match_retention, report.false_positive_rate, report.f1
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate(args) => stages(&args, &[Stage::Evaluate, Stage::Breakdowns]),
        Command::Perturb(args) => stages(&args, &[Stage::Perturb]),
        Command::Correlate(args) => stages(&args, &[Stage::Correlate]),
        Command::Report(args) => stages(&args, &Stage::ALL),
        Command::ValidateSynthetic(args) => synthetic(&args),
    }
}

fn inspect(path: &Path) -> anyhow::Result<ExitCode> {
    let m = read_embeddings(path)?;
    let norms: Vec<f64> = m
        .iter_rows()
        .map(|r| r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
        .collect();
    let (lo, hi) = norms
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &n| (lo.min(n), hi.max(n)));
    println!("magic: EMB1");
    println!("version: {}", iconometer::embedding::VERSION);
    println!("rows: {}", m.rows());
    println!("dim: {}", m.dim());
    println!("kind: {}", m.kind());
    println!("source_tag: {}", m.source_tag());
    if !norms.is_empty() {
        println!("norm_range: {lo:.6} {hi:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(path: &Path, thresholds: &Thresholds) -> anyhow::Result<ExitCode> {
    thresholds.validate()?;
    let manifest = Manifest::from_path(path)?;
    let report = validate_manifest(&manifest, thresholds);
    for v in &report.violations {
        println!("{}\t{}\t{}", v.kind, v.subject, v.detail);
    }
    if report.is_valid() {
        println!(
            "ok: {} references, {} generation sets, {} images",
            manifest.references.len(),
            manifest.generation_sets.len(),
            manifest.image_registry.len()
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} violation(s)", report.violations.len());
        Ok(ExitCode::from(1))
    }
}

fn stages(args: &RunArgs, stages: &[Stage]) -> anyhow::Result<ExitCode> {
    let summary = run_stages(&args.config(), stages)?;
    println!(
        "{} cells, {}/{} images unresolved, wrote {}",
        summary.cells,
        summary.images_failed,
        summary.images_total,
        summary.files.join(", ")
    );
    Ok(ExitCode::SUCCESS)
}

fn synthetic(args: &SyntheticArgs) -> anyhow::Result<ExitCode> {
    let mut thresholds = Thresholds {
        grid_side: args.grid_side,
        ..Thresholds::default()
    };
    if let Some(t) = args.tau_reuse {
        thresholds.tau_reuse = t;
    }
    thresholds.validate()?;
    let config = ValidationConfig {
        pairs_per_reference: args.pairs_per_reference,
        seed: args.seed,
        thresholds,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let (ids, outcome) = if let Some(n) = args.planted {
        let ids: Vec<String> = (0..n).map(|i| format!("ref{i:04}")).collect();
        (ids, run_planted(n, &config)?)
    } else {
        let dir = args.refs.as_ref().expect("required by clap");
        let (ids, refs) = read_reference_dir(dir)?;
        let external = args
            .pair_scores
            .as_ref()
            .map(|p| read_pair_scores_csv(p, &ids))
            .transpose()?;
        let plans = plan_validation(refs.len(), &config)?;
        write_composites(&refs, &ids, &plans, &args.out.join("composites"))?;
        let outcome = match &args.embeddings {
            Some(path) => {
                let matrix = read_embeddings(path)?;
                let sidecar = ids_path(path);
                let names = read_ids(&sidecar).with_context(|| format!("id list for {}", path.display()))?;
                let library = PatchLibrary::new(matrix, names, args.grid_side)?;
                score_plans(&plans, &thresholds, external.as_ref(), |plan| {
                    let composite: Option<EmbeddingMatrix> = library.get(&plan.stem(&ids));
                    Ok(composite.zip(library.get(&ids[plan.source])))
                })
            }
            None => run_validation(&refs, &config, &PixelPatchEmbedder::default(), external.as_ref())?,
        };
        (ids, outcome)
    };

    validation_table(&outcome).write(&args.out.join("validation_table.csv"))?;
    gaps_table(&outcome, &ids).write(&args.out.join("validation_gaps.csv"))?;
    for row in &outcome.rows {
        match row.vr {
            Some(s) => println!(
                "{:<17} true {:.4}  vr {:.4} ± {:.4}  (n={})",
                row.condition.to_string(),
                row.true_overlap,
                s.mean,
                s.sd,
                row.n_references
            ),
            None => println!("{:<17} no scored pairs", row.condition.to_string()),
        }
    }
    if !outcome.gaps.is_empty() {
        log::warn!("{} pair(s) lacked embeddings, see validation_gaps.csv", outcome.gaps.len());
    }
    Ok(ExitCode::SUCCESS)
}
