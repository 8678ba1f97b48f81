use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cfran_isac::channel;
use cfran_isac::classifier::{self, DatasetConfig, Hyperparams, ModelKind};
use cfran_isac::harness::{self, CampaignConfig, ClassifierMode, GridPoint, IdleCheck, SensingMode, TrialResult};
use cfran_isac::localization::{self, FusedReflector, MatchReport};
use cfran_isac::scenario::{self, Scenario, ScenarioConfig};
use cfran_isac::sensing;
use cfran_isac::signal_chain;

#[derive(Parser)]
#[command(name = "cfran-isac", version, about = "Passive sensing simulator for cell-free RAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scenario and write it as TOML.
    GenScenario(GenScenarioArgs),
    /// Run one trial and write its intermediate results.
    Simulate(SimulateArgs),
    /// Build a fingerprint dataset, train a classifier and report test accuracy.
    TrainClassifier(TrainArgs),
    /// Perception error over the sigma_range x accuracy grid.
    Sweep(CampaignArgs),
    /// Multi-RRU against single-downlink sensing on the same trials.
    Compare(CampaignArgs),
    /// Print and save a plain-text summary of a sweep or compare run.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenScenarioArgs {
    /// Scenario configuration TOML; defaults apply to missing keys.
    /// Without one, reflectors are placed within 250 m of an RRU.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    num_rrus: Option<usize>,
    #[arg(long)]
    downlink: Option<usize>,
    #[arg(long)]
    static_reflectors: Option<usize>,
    #[arg(long)]
    mobile_reflectors: Option<usize>,
    /// Output path.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Multi,
    Single,
}

impl From<ModeArg> for SensingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Multi => SensingMode::MultiRru,
            ModeArg::Single => SensingMode::SingleDownlink,
        }
    }
}

#[derive(Args)]
struct CampaignArgs {
    /// Campaign configuration TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the generating configuration of this scenario file for every trial.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated sigma_range grid, m.
    #[arg(long, value_delimiter = ',')]
    sigma_range: Option<Vec<f64>>,
    /// Comma-separated synthetic classifier accuracies.
    #[arg(long, value_delimiter = ',')]
    accuracy: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Run directory.
    /// Output path.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Campaign configuration TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run on this scenario instead of sampling one.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    trial: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma_range: f64,
    /// Synthetic classifier accuracy; ignored with a trained classifier.
    #[arg(long, default_value_t = 0.9)]
    accuracy: f64,
    #[arg(long, value_enum, default_value = "multi")]
    mode: ModeArg,
    /// Also write the ground-truth channel paths as JSON.
    #[arg(long)]
    dump_paths: bool,
    /// Also write every uplink frame as cf32 files with JSON sidecars.
    #[arg(long)]
    export_frames: bool,
    /// Output path.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration TOML (dataset, model, hyperparameters, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario file; a default scenario is sampled when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples_per_rru: Option<usize>,
    #[arg(long)]
    symbols: Option<usize>,
    #[arg(long)]
    impairment_scale: Option<f64>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Also write the full dataset as JSON.
    #[arg(long)]
    save_dataset: bool,
    /// Output path.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Centroid,
    Mlp,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `sweep` or `compare`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainConfig {
    seed: u64,
    model: ModelKind,
    dataset: DatasetConfig,
    hyperparams: Hyperparams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 1, model: ModelKind::NearestCentroid, dataset: DatasetConfig::default(), hyperparams: Hyperparams::default() }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenScenario(a) => gen_scenario(a),
        Command::Simulate(a) => simulate(a),
        Command::TrainClassifier(a) => train_classifier(a),
        Command::Sweep(a) => campaign(a, false),
        Command::Compare(a) => campaign(a, true),
        Command::Report(a) => report(a),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_scenario(a: GenScenarioArgs) -> Result<()> {
    let mut config: ScenarioConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => CampaignConfig::default().scenario,
    };
    if let Some(n) = a.num_rrus {
        config.num_rrus = n;
    }
    if let Some(n) = a.downlink {
        config.initial_downlink = n;
    }
    if let Some(n) = a.static_reflectors {
        config.num_static_reflectors = n;
    }
    if let Some(n) = a.mobile_reflectors {
        config.num_mobile_reflectors = n;
    }
    let scenario = scenario::generate_scenario(&config, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    scenario.save_toml(&config, &a.out)?;
    println!(
        "wrote {}: {} RRUs ({} downlink), {} reflectors, seed {}",
        a.out.display(),
        scenario.rrus.len(),
        scenario.downlink_ids().len(),
        scenario.reflectors.len(),
        a.seed
    );
    Ok(())
}

fn load_campaign(config: &Option<PathBuf>) -> Result<CampaignConfig> {
    Ok(match config {
        Some(p) => CampaignConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => CampaignConfig::default(),
    })
}

fn campaign(a: CampaignArgs, compare: bool) -> Result<()> {
    let mut config = load_campaign(&a.config)?;
    if let Some(p) = &a.scenario {
        config.scenario = Scenario::load_toml(p)?.0;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(t) = a.trials {
        config.trials = t;
    }
    if let Some(g) = a.sigma_range {
        config.sigma_range = g;
    }
    if let Some(acc) = a.accuracy {
        config.classifier = ClassifierMode::Synthetic { accuracies: acc };
    }
    if let Some(m) = a.mode {
        config.mode = m.into();
    }
    config.validate()?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), config.to_toml()?)?;
    let report = if compare { harness::run_comparison(&config)? } else { harness::run_campaign(&config)? };
    harness::write_report(&a.out, &report)?;
    print!("{}", harness::format_report(&report));
    println!("results in {}", a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let report = harness::read_report(&a.run).with_context(|| format!("reading run {}", a.run.display()))?;
    let text = harness::format_report(&report);
    fs::write(a.run.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct TrialOutput<'a> {
    result: &'a TrialResult,
    idle_checks: &'a [IdleCheck],
    matching: &'a MatchReport,
    fused: &'a [FusedReflector],
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut config = load_campaign(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let (scenario_config, scenario) = match &a.scenario {
        Some(p) => Scenario::load_toml(p)?,
        None => {
            let s = scenario::generate_scenario(&config.scenario, config.trial_seed(a.trial))?;
            (config.scenario.clone(), s)
        }
    };
    config.scenario = scenario_config.clone();
    config.validate()?;
    let trained = match &config.classifier {
        ClassifierMode::Trained { model, fingerprints } => Some(harness::TrainedClassifier::load(model, fingerprints)?),
        ClassifierMode::Synthetic { .. } => None,
    };
    let mode: SensingMode = a.mode.into();
    let point = GridPoint {
        sigma_range: a.sigma_range,
        accuracy: trained.is_none().then_some(a.accuracy),
        mode,
    };
    let seed = config.trial_seed(a.trial);
    let obs = harness::observe_scenario(&config, &scenario, mode, a.trial, seed, trained.as_ref())?;
    let detail = harness::score_slot(&config, &obs, point)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), config.to_toml()?)?;
    scenario.save_toml(&scenario_config, &a.out.join("scenario.toml"))?;
    sensing::write_params_csv(&a.out.join("params.csv"), &detail.extracted)?;
    localization::write_fused_csv(&a.out.join("fused.csv"), &detail.fused)?;
    let output = TrialOutput {
        result: &detail.result,
        idle_checks: &obs.idle_checks,
        matching: &detail.report,
        fused: &detail.fused,
    };
    fs::write(a.out.join("trial.json"), serde_json::to_string_pretty(&output)?)?;
    if a.dump_paths {
        fs::write(a.out.join("paths.json"), channel::realize_channel(&scenario)?.to_json()?)?;
    }
    if a.export_frames {
        let dir = a.out.join("frames");
        fs::create_dir_all(&dir)?;
        for frame in harness::received_frames(&config, &scenario, seed, trained.as_ref())? {
            signal_chain::export_frame(&dir, &format!("sink-{}", frame.sink), &frame)?;
        }
    }

    let r = &detail.result;
    println!("trial {} seed {:#018x} mode {}", a.trial, seed, mode.name());
    println!(
        "scenario: {} RRUs, downlink {:?}, uplink {:?}, {} reflectors",
        scenario.rrus.len(),
        scenario.downlink_ids(),
        scenario.uplink_ids(),
        scenario.reflectors.len()
    );
    for c in &obs.idle_checks {
        println!(
            "  sink {:>3}: idle statistic {:.3e} W, threshold {:.3e} W -> {}",
            c.sink,
            c.statistic,
            c.threshold,
            if c.idle { "idle" } else { "UE active" }
        );
    }
    if !r.idle {
        println!("uplink busy: sensing skipped");
    }
    println!(
        "classified {} paths ({} correct), LOS-rejected {}, solved {}, outliers {}",
        r.classified, r.correct, r.los_rejected, r.estimates, r.outliers_rejected
    );
    println!("fused {} clusters, {} misses, {} false alarms", detail.fused.len(), r.misses, r.false_alarms);
    for (id, e) in &r.errors {
        println!("  reflector {id}: eps_p {e:.4} m");
    }
    println!("results in {}", a.out.display());
    Ok(())
}

fn train_classifier(a: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.samples_per_rru {
        config.dataset.n_samples_per_rru = n;
    }
    if let Some(n) = a.symbols {
        config.dataset.n_symbols = n;
    }
    if let Some(k) = a.impairment_scale {
        config.dataset.impairment_scale = k;
    }
    if let Some(s) = a.snr_db {
        config.dataset.noise.snr_db = s;
    }
    if let Some(m) = a.model {
        config.model = match m {
            ModelArg::Centroid => ModelKind::NearestCentroid,
            ModelArg::Mlp => ModelKind::Mlp,
        };
    }
    let scenario = match &a.scenario {
        Some(p) => Scenario::load_toml(p)?.1,
        None => scenario::generate_scenario(&CampaignConfig::default().scenario, config.seed)?,
    };
    if config.dataset.n_samples_per_rru == 0 {
        bail!("samples per RRU must be >= 1");
    }

    let dataset = classifier::build_dataset(&scenario, &config.dataset, config.seed)?;
    let library = classifier::dataset_library(&scenario, &config.dataset, config.seed)?;
    let model = classifier::train(&dataset, config.model, &config.hyperparams, config.seed)?;
    let accuracy = classifier::evaluate(&model, &dataset)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), toml::to_string(&config)?)?;
    fs::write(a.out.join("model.json"), model.to_json()?)?;
    fs::write(a.out.join("fingerprints.json"), library.to_json()?)?;
    fs::write(a.out.join("accuracy.json"), serde_json::to_string_pretty(&accuracy)?)?;
    fs::write(a.out.join("accuracy.txt"), accuracy.table())?;
    if a.save_dataset {
        fs::write(a.out.join("dataset.json"), dataset.to_json()?)?;
    }
    println!(
        "{} samples ({} train / {} test), {} symbols, impairment scale {}, SNR {} dB",
        dataset.samples.len(),
        dataset.train.len(),
        dataset.test.len(),
        config.dataset.n_symbols,
        config.dataset.impairment_scale,
        config.dataset.noise.snr_db
    );
    print!("{}", accuracy.table());
    println!("results in {}", a.out.display());
    Ok(())
}
