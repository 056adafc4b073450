//! Command-line front end: verify robustness properties, repair violations,
//! attack regions, and evaluate repaired networks.
//!
//! Exit codes: 0 on success (for `verify`, all properties Verified; a
//! completed repair without a provable guarantee still exits 0), 1 when
//! verification leaves any property Unknown, 2 on parse or validation
//! errors, 3 when training diverges (the message names the patch).

use clap::{Args, Parser, Subcommand, ValueEnum};
use relurepair::attacks::AttackConfig;
use relurepair::deeppoly::{self, Verdict};
use relurepair::demo;
use relurepair::formats::{self, PropertyEntry};
use relurepair::metrics::{self, EvalConfig, MetricsReport};
use relurepair::net::{Dnn, Network};
use relurepair::patched::RepairedDnn;
use relurepair::repair::{self, Anchor, PatchInit, PatchSpec, RepairConfig, RepairMode};
use relurepair::Error;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "relurepair",
    about = "Provable repair of local-robustness violations in feed-forward ReLU networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check each property against the network; exit 0 only if all verify.
    Verify(VerifyArgs),
    /// Train patches until the properties hold, then write report + bundle.
    Repair(RepairArgs),
    /// Attack each property's box and record the adversarial points found.
    Attack(AttackArgs),
    /// Score a repaired bundle: repair success, generalization, drawdown.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LabelSource {
    /// Enforce the network's own prediction at each property center.
    Base,
    /// Enforce the label field of the property file (must be present).
    File,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct VerifyArgs {
    /// Network JSON file.
    #[arg(long, value_name = "FILE")]
    net: PathBuf,
    /// Property JSON file (centers, radii, optional labels).
    #[arg(long, value_name = "FILE")]
    props: PathBuf,
    /// Override every property's radius.
    #[arg(long, value_name = "R")]
    radius: Option<f64>,
    /// Where the enforced class of each property comes from.
    #[arg(long, value_enum, default_value_t = LabelSource::Base)]
    label_source: LabelSource,
    /// Verify against the suffix network from this layer on (property
    /// centers are then feature vectors of that layer).
    #[arg(long, value_name = "N")]
    split_layer: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct RepairArgs {
    /// Network JSON file.
    #[arg(long, value_name = "FILE", required_unless_present = "example")]
    net: Option<PathBuf>,
    /// Property JSON file; all entries must share one radius.
    #[arg(long, value_name = "FILE", required_unless_present = "example")]
    props: Option<PathBuf>,
    /// Override every property's radius.
    #[arg(long, value_name = "R")]
    radius: Option<f64>,
    /// Where the enforced class of each property comes from.
    #[arg(long, value_enum, default_value_t = LabelSource::Base)]
    label_source: LabelSource,
    /// Engine configuration JSON; explicit flags override its fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Certify boxes in input space, or train in feature space instead.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Feature-space split layer (requires --mode feature).
    #[arg(long, value_name = "N")]
    split_layer: Option<usize>,
    /// Outer (train + bisect) iterations per patch.
    #[arg(long = "M", value_name = "N")]
    max_iterations: Option<usize>,
    /// Gradient steps per training call.
    #[arg(long = "R", value_name = "N")]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long = "eta", value_name = "F")]
    learning_rate: Option<f64>,
    /// How many positive-loss boxes may be bisected per iteration.
    #[arg(long = "K", value_name = "N")]
    selection: Option<usize>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    /// Directory to write the repaired-network bundle into.
    #[arg(long, value_name = "DIR")]
    out_bundle: Option<PathBuf>,
    /// Report format: the full repair report, or the metrics CSV row
    /// computed against the properties' stored adversarials.
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    report: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Run the built-in worked example instead of reading files
    /// (value: appendix-b).
    #[arg(long, value_name = "NAME")]
    example: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Provable,
    Feature,
}

#[derive(Args)]
struct AttackArgs {
    /// Network JSON file.
    #[arg(long, value_name = "FILE")]
    net: PathBuf,
    /// Property JSON file naming the boxes to attack.
    #[arg(long, value_name = "FILE")]
    props: PathBuf,
    /// Override every property's radius.
    #[arg(long, value_name = "R")]
    radius: Option<f64>,
    /// Where the attacked class of each property comes from.
    #[arg(long, value_enum, default_value_t = LabelSource::Base)]
    label_source: LabelSource,
    /// Where to write the properties with found adversarial points.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Absolute per-step perturbation.
    #[arg(long, value_name = "F")]
    step_size: Option<f64>,
    /// Gradient steps per restart.
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Independent restarts per box.
    #[arg(long, value_name = "N")]
    restarts: Option<usize>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Repaired-network bundle directory.
    #[arg(long, value_name = "DIR")]
    bundle: PathBuf,
    /// Property JSON file with the repaired anchors and their adversarials.
    #[arg(long, value_name = "FILE")]
    props: PathBuf,
    /// Cross-check: the base network the bundle must match.
    #[arg(long, value_name = "FILE")]
    net: Option<PathBuf>,
    /// Override every property's radius.
    #[arg(long, value_name = "R")]
    radius: Option<f64>,
    /// Where each anchor's enforced class comes from.
    #[arg(long, value_enum, default_value_t = LabelSource::Base)]
    label_source: LabelSource,
    /// Held-out labeled test set, CSV rows of `label, feature, ...`.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Skip the first line of the CSV test set.
    #[arg(long)]
    data_header: bool,
    /// Held-out test images in IDX format (requires --idx-labels).
    #[arg(long, value_name = "FILE", requires = "idx_labels", conflicts_with = "data")]
    idx_images: Option<PathBuf>,
    /// Labels for --idx-images, IDX format.
    #[arg(long, value_name = "FILE")]
    idx_labels: Option<PathBuf>,
    /// Name stamped into the report's model column (default: bundle dir).
    #[arg(long, value_name = "NAME")]
    model: Option<String>,
    /// Attack seed for the defense and generalization metrics.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    report: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Engine configuration file: every field optional, defaults as in the
/// library.  `init` is "zero", {"constant": c}, or {"uniform": scale}.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    mode: Option<String>,
    split_layer: Option<usize>,
    max_iterations: Option<usize>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    selection: Option<usize>,
    epsilon_verify: Option<f64>,
    depth_cap: Option<usize>,
    seed: Option<u64>,
    gradient_clip: Option<f64>,
    patch: Option<PatchFile>,
    attack: Option<AttackFile>,
    fgsm_samples: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchFile {
    #[serde(default)]
    hidden: Vec<usize>,
    #[serde(default = "default_true")]
    bias: bool,
    #[serde(default)]
    init: InitFile,
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "lowercase")]
enum InitFile {
    #[default]
    Zero,
    #[serde(untagged)]
    Constant {
        constant: f64,
    },
    #[serde(untagged)]
    Uniform {
        uniform: f64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackFile {
    step_size: Option<f64>,
    steps: Option<usize>,
    restarts: Option<usize>,
    seed: Option<u64>,
}

/// A failure carrying the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Failure {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Failure {
        let code = match err {
            Error::DivergentLoss { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Verify(args) => run_verify(args),
        Command::Repair(args) => run_repair(args),
        Command::Attack(args) => run_attack(args),
        Command::Eval(args) => run_eval(args),
    }
}

fn init_jobs(jobs: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Failure::invalid("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::invalid(format!("cannot set --jobs: {e}")))?;
    }
    Ok(())
}

/// Loads properties, applies the radius override, and resolves each
/// entry's enforced class per the label source.
fn load_properties(
    net: &Dnn,
    path: &Path,
    radius: Option<f64>,
    label_source: LabelSource,
) -> Result<Vec<PropertyEntry>, Failure> {
    let mut entries = formats::read_properties(path)?;
    if entries.is_empty() {
        return Err(Failure::invalid(format!(
            "{}: property file is empty",
            path.display()
        )));
    }
    for (i, entry) in entries.iter_mut().enumerate() {
        if let Some(r) = radius {
            entry.radius = r;
        }
        entry.validate(net.input_dim())?;
        match label_source {
            LabelSource::Base => entry.label = Some(net.classify(&entry.center)?),
            LabelSource::File => {
                if entry.label.is_none() {
                    return Err(Failure::invalid(format!(
                        "property {i} has no label field but --label-source file was given"
                    )));
                }
            }
        }
    }
    Ok(entries)
}

/// The shared radius the repair and eval engines require.
fn common_radius(entries: &[PropertyEntry]) -> Result<f64, Failure> {
    let r = entries[0].radius;
    if entries.iter().any(|e| e.radius != r) {
        return Err(Failure::invalid(
            "properties have differing radii; pass --radius to unify them",
        ));
    }
    if r <= 0.0 {
        return Err(Failure::invalid("repair needs a positive radius"));
    }
    Ok(r)
}

fn anchors_from(entries: &[PropertyEntry]) -> Vec<Anchor> {
    entries
        .iter()
        .map(|e| Anchor {
            center: e.center.clone(),
            label: e.label,
            adversarial: e.adversarial.clone(),
        })
        .collect()
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| {
            Failure::invalid(format!("cannot write {}: {e}", path.display()))
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run_verify(args: VerifyArgs) -> Result<u8, Failure> {
    init_jobs(args.jobs)?;
    let full = formats::read_network(&args.net)?;
    let target: Dnn = match args.split_layer {
        Some(boundary) => full.split(boundary)?.suffix().clone(),
        None => full,
    };
    let entries = load_properties(&target, &args.props, args.radius, args.label_source)?;

    println!("{:>8}  {:>5}  {:>10}  verdict", "property", "label", "radius");
    let mut unverified = 0usize;
    for (i, entry) in entries.iter().enumerate() {
        let verdict = deeppoly::verify(&target, &entry.region()?, entry.label.unwrap())?;
        if verdict != Verdict::Verified {
            unverified += 1;
        }
        println!(
            "{i:>8}  {:>5}  {:>10}  {verdict:?}",
            entry.label.unwrap(),
            entry.radius
        );
    }
    println!(
        "verified {}/{} properties",
        entries.len() - unverified,
        entries.len()
    );
    Ok(if unverified == 0 { 0 } else { 1 })
}

fn build_repair_config(args: &RepairArgs) -> Result<RepairConfig, Failure> {
    let mut config = RepairConfig::default();

    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", path.display())))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
        if let Some(mode) = &file.mode {
            config.mode = match mode.as_str() {
                "provable" => RepairMode::Provable,
                "feature" => RepairMode::Feature {
                    boundary: file.split_layer,
                },
                other => {
                    return Err(Failure::invalid(format!(
                        "config mode must be \"provable\" or \"feature\", got {other:?}"
                    )))
                }
            };
        } else if file.split_layer.is_some() {
            return Err(Failure::invalid(
                "config sets split_layer without mode \"feature\"",
            ));
        }
        if let Some(v) = file.max_iterations {
            config.max_iterations = v;
        }
        if let Some(v) = file.epochs {
            config.epochs = v;
        }
        if let Some(v) = file.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = file.selection {
            config.selection = v;
        }
        if let Some(v) = file.epsilon_verify {
            config.epsilon_verify = v;
        }
        if let Some(v) = file.depth_cap {
            config.depth_cap = v;
        }
        if let Some(v) = file.seed {
            config.seed = v;
        }
        if file.gradient_clip.is_some() {
            config.gradient_clip = file.gradient_clip;
        }
        if let Some(patch) = file.patch {
            config.patch = PatchSpec {
                hidden: patch.hidden,
                bias: patch.bias,
                init: match patch.init {
                    InitFile::Zero => PatchInit::Zero,
                    InitFile::Constant { constant } => PatchInit::Constant(constant),
                    InitFile::Uniform { uniform } => PatchInit::Uniform { scale: uniform },
                },
            };
        }
        if let Some(attack) = file.attack {
            if let Some(v) = attack.step_size {
                config.attack.step_size = v;
            }
            if let Some(v) = attack.steps {
                config.attack.steps = v;
            }
            if let Some(v) = attack.restarts {
                config.attack.restarts = v;
            }
            if let Some(v) = attack.seed {
                config.attack.seed = v;
            }
        }
        if let Some(v) = file.fgsm_samples {
            config.sampling.fgsm_samples = v;
        }
    }

    match args.mode {
        Some(ModeArg::Provable) => config.mode = RepairMode::Provable,
        Some(ModeArg::Feature) => {
            config.mode = RepairMode::Feature {
                boundary: args.split_layer,
            }
        }
        None => {
            if let Some(boundary) = args.split_layer {
                match &mut config.mode {
                    RepairMode::Feature { boundary: b } => *b = Some(boundary),
                    RepairMode::Provable => {
                        return Err(Failure::invalid(
                            "--split-layer requires --mode feature",
                        ))
                    }
                }
            }
        }
    }
    if let Some(v) = args.max_iterations {
        config.max_iterations = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.selection {
        config.selection = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    Ok(config)
}

fn run_repair(args: RepairArgs) -> Result<u8, Failure> {
    init_jobs(args.jobs)?;

    if let Some(example) = &args.example {
        if example != "appendix-b" {
            return Err(Failure::invalid(format!(
                "unknown example {example:?}; available: appendix-b"
            )));
        }
        let worked = demo::worked_example()?;
        emit(args.out.as_deref(), &demo::describe(&worked))?;
        if let Some(dir) = &args.out_bundle {
            worked.repaired.save_bundle(dir, false)?;
            eprintln!("bundle written to {}", dir.display());
        }
        return Ok(0);
    }

    let net = formats::read_network(args.net.as_ref().unwrap())?;
    let entries = load_properties(
        &net,
        args.props.as_ref().unwrap(),
        args.radius,
        args.label_source,
    )?;
    let radius = common_radius(&entries)?;
    let anchors = anchors_from(&entries);
    let config = build_repair_config(&args)?;

    let (repaired, report) = repair::repair(&net, &anchors, radius, &config)?;
    eprintln!(
        "repair finished: provable={}, {} anchors, {:.3} s",
        report.provable,
        report.anchors.len(),
        report.timing.total_seconds
    );

    if let Some(dir) = &args.out_bundle {
        repaired.save_bundle(dir, false)?;
        eprintln!("bundle written to {}", dir.display());
    }

    let text = match args.report {
        ReportFormat::Json => serde_json::to_string_pretty(&report)
            .map_err(|e| Failure::invalid(format!("cannot serialize report: {e}")))?,
        ReportFormat::Csv => {
            let model = args
                .net
                .as_ref()
                .unwrap()
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "net".into());
            let mut eval_config = EvalConfig::new(model, radius);
            if let Some(seed) = args.seed {
                eval_config.attack.seed = seed;
            }
            let metrics = metrics::evaluate_repair(&repaired, &anchors, None, &eval_config)?;
            format!("{}\n{}", MetricsReport::csv_header(), metrics.csv_row())
        }
    };
    emit(args.out.as_deref(), &text)?;
    Ok(0)
}

fn run_attack(args: AttackArgs) -> Result<u8, Failure> {
    init_jobs(args.jobs)?;
    let net = formats::read_network(&args.net)?;
    let mut entries = load_properties(&net, &args.props, args.radius, args.label_source)?;

    let mut attack = AttackConfig::default();
    if let Some(v) = args.step_size {
        attack.step_size = v;
    }
    if let Some(v) = args.steps {
        attack.steps = v;
    }
    if let Some(v) = args.restarts {
        attack.restarts = v;
    }
    if let Some(v) = args.seed {
        attack.seed = v;
    }

    let mut found = 0usize;
    for entry in entries.iter_mut() {
        let result = relurepair::attacks::pgd(
            &net,
            &entry.region()?,
            &entry.center,
            entry.label.unwrap(),
            &attack,
        )?;
        entry.adversarial = result.adversarial;
        if entry.adversarial.is_some() {
            found += 1;
        }
    }
    formats::write_properties(&args.out, &entries)?;
    println!(
        "found adversarial points in {found}/{} boxes; written to {}",
        entries.len(),
        args.out.display()
    );
    Ok(0)
}

fn run_eval(args: EvalArgs) -> Result<u8, Failure> {
    init_jobs(args.jobs)?;
    let repaired = RepairedDnn::load_bundle(&args.bundle)?;

    if let Some(path) = &args.net {
        let net = formats::read_network(path)?;
        let base = repaired.base();
        if net.input_dim() != base.input_dim() || net.output_dim() != base.output_dim() {
            return Err(Failure::invalid(format!(
                "bundle base is {}→{} but {} is {}→{}",
                base.input_dim(),
                base.output_dim(),
                path.display(),
                net.input_dim(),
                net.output_dim()
            )));
        }
    }

    let entries = load_properties(
        repaired.base(),
        &args.props,
        args.radius,
        args.label_source,
    )?;
    let radius = common_radius(&entries)?;
    let anchors = anchors_from(&entries);

    let test = match (&args.data, &args.idx_images) {
        (Some(path), _) => Some(relurepair::dataset::load_csv_dataset(
            path,
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "test".into()),
            args.data_header,
        )?),
        (None, Some(images)) => Some(relurepair::dataset::load_idx_dataset(
            images,
            args.idx_labels.as_ref().unwrap(),
            "test",
        )?),
        (None, None) => None,
    };

    let model = args.model.clone().unwrap_or_else(|| {
        args.bundle
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "bundle".into())
    });
    let mut eval_config = EvalConfig::new(model, radius);
    if let Some(seed) = args.seed {
        eval_config.attack.seed = seed;
    }
    let report = metrics::evaluate_repair(&repaired, &anchors, test.as_ref(), &eval_config)?;

    let text = match args.report {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => format!("{}\n{}", MetricsReport::csv_header(), report.csv_row()),
    };
    emit(args.out.as_deref(), &text)?;
    Ok(0)
}
