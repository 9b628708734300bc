use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hcbiquad::data::{generate_dataset, ingest_wav_pairs, synth_source_clips, to_examples, write_dataset, TeacherSpec};
use hcbiquad::document::{load_model, load_spec, save_model, SpecDocument};
use hcbiquad::dsp::AudioClip;
use hcbiquad::export::{response_sweep_csv, sweep_values};
use hcbiquad::model::{count_params, forward_time, param_names, realize_stage, ModelSpec, ModelState};
use hcbiquad::reps::{eq_sections, Representation};
use hcbiquad::train::{
    batch_loss_freq, batch_loss_time, fit_from, grad_check, load_checkpoint, save_checkpoint, write_loss_csv, Example,
    TrainConfig,
};
use hcbiquad::wav::{read_wav, write_wav, WavEncoding};
use hcbiquad::Error;

const DEFAULT_SEED: u64 = 0;

#[derive(Parser)]
#[command(name = "hcbiquad", version, about = "Train and run hyperconditioned biquad cascades")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic teacher dataset and write WAVs plus a manifest
    GenData(GenDataArgs),
    /// Fit a model to a dataset
    Train(TrainArgs),
    /// Report a model's MSE on a dataset
    Eval(EvalArgs),
    /// Run a model over a WAV file
    Render(RenderArgs),
    /// Print realized stage parameters
    Inspect(InspectArgs),
    /// Write a stage's response across a sweep of one control as CSV
    ExportResponse(ExportArgs),
    /// Compare analytic gradients with finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoding {
    Float32,
    Pcm16,
}

impl From<Encoding> for WavEncoding {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Float32 => WavEncoding::Float32,
            Encoding::Pcm16 => WavEncoding::Pcm16,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// The five-stage reference topology used for generated data
    Teacher,
    /// Ten-stage MT-2 topology, parametric EQ stages
    Mt2Eq,
    /// Ten-stage MT-2 topology, coefficient stages
    Mt2Coefficient,
    /// Ten-stage MT-2 topology, pole/zero stages
    Mt2PoleZero,
}

impl Preset {
    fn spec(self) -> ModelSpec {
        match self {
            Preset::Teacher => TeacherSpec::reference().spec,
            Preset::Mt2Eq => ModelSpec::mt2(Representation::ParametricEq),
            Preset::Mt2Coefficient => ModelSpec::mt2(Representation::Coefficient),
            Preset::Mt2PoleZero => ModelSpec::mt2(Representation::PoleZero),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of synthesized source clips
    #[arg(long, default_value_t = 64)]
    clips: usize,
    /// Source WAV files to use instead of synthesized clips
    #[arg(long = "source")]
    sources: Vec<PathBuf>,
    /// Random settings rendered per clip
    #[arg(long, default_value_t = 8)]
    settings_per_clip: usize,
    #[arg(long, default_value_t = 1.0)]
    clip_seconds: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "float32")]
    encoding: Encoding,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest
    #[arg(long)]
    dataset: PathBuf,
    /// Topology file (JSON with f_SR, representation, S, K, sites)
    #[arg(long, conflicts_with_all = ["preset", "resume"])]
    spec: Option<PathBuf>,
    /// Built-in topology
    #[arg(long, value_enum, conflicts_with = "resume")]
    preset: Option<Preset>,
    /// Continue from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output model document
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV (default: next to the model)
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Checkpoint with optimizer state (default: next to the model)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    fft_size: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop once the held-out MSE falls to this value
    #[arg(long)]
    target_mse: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Also report the frequency-sampled loss at this FFT size
    #[arg(long)]
    fft_size: Option<usize>,
}

#[derive(Args)]
struct SettingsArgs {
    /// Control setting NAME=VALUE with VALUE in [0, 1]; repeatable
    #[arg(long = "set", value_name = "NAME=VALUE", value_parser = parse_setting)]
    settings: Vec<(String, f64)>,
}

impl SettingsArgs {
    fn map(&self) -> BTreeMap<String, f64> {
        self.settings.iter().cloned().collect()
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
    #[arg(long, value_enum, default_value = "float32")]
    encoding: Encoding,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Only this stage
    #[arg(long)]
    stage: Option<usize>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stage: usize,
    /// Control to sweep from 0 to 1
    #[arg(long)]
    sweep: String,
    /// Number of sweep values
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long, default_value_t = 4096)]
    fft_size: usize,
    /// Values of the other controls
    #[command(flatten)]
    settings: SettingsArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Model to check; a random state of --preset is used otherwise
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mt2-eq")]
    preset: Preset,
    /// Input WAV; white noise otherwise
    #[arg(long)]
    input: Option<PathBuf>,
    /// Length of generated input and target, in samples
    #[arg(long, default_value_t = 2048)]
    length: usize,
    #[arg(long, default_value_t = 512)]
    fft_size: usize,
    #[command(flatten)]
    settings: SettingsArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Print every parameter, not only failures
    #[arg(long)]
    verbose: bool,
}

fn parse_setting(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.rsplit_once('=').ok_or_else(|| format!("`{s}` is not NAME=VALUE"))?;
    let value: f64 = value.trim().parse().map_err(|_| format!("`{value}` is not a number"))?;
    if !(0.0..=1.0).contains(&value) {
        return Err(format!("{name}={value} is outside [0, 1]"));
    }
    Ok((name.to_string(), value))
}

/// Failure with its exit code: 2 for bad input, 1 for runtime errors.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn seed_or_default(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        println!("seed: {DEFAULT_SEED} (default)");
        DEFAULT_SEED
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Inspect(a) => inspect(a),
        Command::ExportResponse(a) => export_response(a),
        Command::GradCheck(a) => run_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let seed = seed_or_default(a.seed);
    let teacher = TeacherSpec::reference();
    let sources = if a.sources.is_empty() {
        synth_source_clips(a.clips, a.clip_seconds, teacher.spec.sample_rate, seed)
    } else {
        a.sources
            .iter()
            .map(|p| {
                require_file(p, "source")?;
                Ok(read_wav(p)?)
            })
            .collect::<Result<_, Failure>>()?
    };
    let records = generate_dataset(&teacher, &sources, a.settings_per_clip, a.clip_seconds, seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| {
        Failure::from(Error::Io {
            path: a.out.clone(),
            source: e,
        })
    })?;
    let manifest = write_dataset(&a.out, &records, a.encoding.into())?;
    save_model(&a.out.join("teacher.json"), &teacher.spec, &teacher.state)?;
    let spec_text =
        serde_json::to_string_pretty(&SpecDocument::from_spec(&teacher.spec)).expect("spec documents always serialize");
    let spec_path = a.out.join("teacher_spec.json");
    std::fs::write(&spec_path, spec_text).map_err(|e| {
        Failure::from(Error::Io {
            path: spec_path.clone(),
            source: e,
        })
    })?;
    println!("wrote {} records to {}", records.len(), manifest.display());
    println!("teacher model: {}", a.out.join("teacher.json").display());
    Ok(())
}

fn load_examples(spec: &ModelSpec, manifest: &Path) -> Result<Vec<Example>, Failure> {
    require_file(manifest, "dataset manifest")?;
    let records = ingest_wav_pairs(manifest)?;
    if records.is_empty() {
        return Err(usage(format!("dataset `{}` lists no records", manifest.display())));
    }
    if let Some(r) = records.iter().find(|r| r.input.sample_rate != spec.sample_rate) {
        return Err(usage(format!(
            "dataset audio is at {} Hz, model runs at {} Hz",
            r.input.sample_rate, spec.sample_rate
        )));
    }
    Ok(to_examples(spec, &records)?)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    require_file(&a.dataset, "dataset manifest")?;
    let (spec, state, optimizer) = match (&a.resume, &a.spec, a.preset) {
        (Some(path), _, _) => {
            require_file(path, "checkpoint")?;
            let (spec, state, opt) = load_checkpoint(path)?;
            (spec, Some(state), Some(opt))
        }
        (None, Some(path), _) => {
            require_file(path, "spec file")?;
            (load_spec(path)?, None, None)
        }
        (None, None, Some(preset)) => (preset.spec(), None, None),
        (None, None, None) => return Err(usage("one of --spec, --preset or --resume is required")),
    };
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        fft_size: a.fft_size.unwrap_or(defaults.fft_size),
        val_fraction: a.val_fraction.unwrap_or(defaults.val_fraction),
        seed: seed_or_default(a.seed),
        ..defaults
    };
    config.validate()?;
    let examples = load_examples(&spec, &a.dataset)?;
    let initial = state.unwrap_or_else(|| ModelState::init(&spec, config.seed));
    println!("parameters: {}", count_params(&spec));
    println!("examples: {}", examples.len());

    let target = a.target_mse;
    let mut on_epoch = |e: &hcbiquad::train::EpochLoss, _: &ModelState| {
        match e.val_mse {
            Some(v) => println!("epoch {:>4}  train {:.6e}  val {:.6e}", e.epoch, e.train_mse, v),
            None => println!("epoch {:>4}  train {:.6e}", e.epoch, e.train_mse),
        }
        !matches!((target, e.val_mse), (Some(t), Some(v)) if v <= t)
    };
    let result = match fit_from(&spec, &examples, &config, initial, optimizer, &mut on_epoch) {
        Ok(r) => r,
        Err(Error::Diverged { epoch, last_good }) => {
            let rescue = a.out.with_extension("diverged.json");
            save_model(&rescue, &spec, &last_good)?;
            return Err(Failure {
                code: 1,
                message: format!(
                    "training diverged at epoch {epoch}; last good model saved to {}",
                    rescue.display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    save_model(&a.out, &spec, &result.state)?;
    let csv = a.loss_csv.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_loss_csv(&csv, &result.history)?;
    let ckpt = a.checkpoint.unwrap_or_else(|| a.out.with_extension("ckpt.json"));
    save_checkpoint(&ckpt, &spec, &result.state, &result.optimizer)?;

    let val: Vec<Example> = result.val_indices.iter().map(|&i| examples[i].clone()).collect();
    if val.is_empty() {
        println!("held-out MSE: n/a (no held-out clips)");
    } else {
        println!("held-out MSE: {:.6e}", batch_loss_time(&spec, &result.state, &val)?);
    }
    println!("count_params: {}", count_params(&spec));
    println!("model: {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    require_file(&a.model, "model")?;
    let (spec, state) = load_model(&a.model)?;
    let examples = load_examples(&spec, &a.dataset)?;
    println!("examples: {}", examples.len());
    println!("time-domain MSE: {:.6e}", batch_loss_time(&spec, &state, &examples)?);
    if let Some(n) = a.fft_size {
        println!(
            "frequency-sampled MSE (N={n}): {:.6e}",
            batch_loss_freq(&spec, &state, &examples, n)?
        );
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<(), Failure> {
    require_file(&a.model, "model")?;
    require_file(&a.input, "input")?;
    let (spec, state) = load_model(&a.model)?;
    let c = spec.conditioning_from_settings(&a.settings.map())?;
    let x = read_wav(&a.input)?;
    let y = forward_time(&spec, &state, &x, &c)?;
    write_wav(&a.output, &y, a.encoding.into())?;
    println!("wrote {} samples to {}", y.len(), a.output.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), Failure> {
    require_file(&a.model, "model")?;
    let (spec, state) = load_model(&a.model)?;
    let c = spec.conditioning_from_settings(&a.settings.map())?;
    let stages: Vec<usize> = match a.stage {
        Some(s) if s >= spec.stages => {
            return Err(usage(format!(
                "stage {s} out of range (model has {} stages)",
                spec.stages
            )))
        }
        Some(s) => vec![s],
        None => (0..spec.stages).collect(),
    };
    let mut out = String::new();
    writeln!(out, "representation: {}", spec.representation).unwrap();
    writeln!(
        out,
        "stages: {}  biquads per stage: {}  f_SR: {} Hz",
        spec.stages, spec.biquads, spec.sample_rate
    )
    .unwrap();
    writeln!(out, "count_params: {}", count_params(&spec)).unwrap();
    writeln!(
        out,
        "delay: {:.6} samples  delay gain: {:.6}",
        state.delay_samples(),
        state.delay_gain
    )
    .unwrap();
    let settings = spec.settings_from_conditioning(&c);
    if !settings.is_empty() {
        let list: Vec<String> = settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(out, "settings: {}", list.join(", ")).unwrap();
    }
    for s in stages {
        let raw = state.stage_raw(&spec, s, &c)?;
        let controls = spec
            .site_index(s)
            .map(|i| format!("  controls: {}", spec.sites[i].names.join(", ")))
            .unwrap_or_default();
        let nl = if s + 1 == spec.stages { "none" } else { "tanh" };
        writeln!(
            out,
            "\nstage {s}  gain {:+.4} dB  nonlinearity {nl}{controls}",
            raw.gain_db
        )
        .unwrap();
        match spec.representation {
            Representation::ParametricEq => {
                for (k, sec) in eq_sections(&raw, spec.sample_rate)?.iter().enumerate() {
                    writeln!(
                        out,
                        "  biquad {k}: {:<10}  f {:>10.2} Hz  g {:+8.3} dB  Q {:.4}",
                        sec.kind.name(),
                        sec.freq_hz,
                        sec.gain_db,
                        sec.q
                    )
                    .unwrap();
                }
            }
            _ => {
                let realized = realize_stage(&spec, &state, s, &c)?;
                for (k, sec) in realized.sections.iter().enumerate() {
                    writeln!(
                        out,
                        "  biquad {k}: b [{:+.6}, {:+.6}, {:+.6}]  a [1, {:+.6}, {:+.6}]  pole radius {:.4}",
                        sec.b0,
                        sec.b1,
                        sec.b2,
                        sec.a1,
                        sec.a2,
                        sec.pole_radius()
                    )
                    .unwrap();
                }
            }
        }
    }
    print!("{out}");
    Ok(())
}

fn export_response(a: ExportArgs) -> Result<(), Failure> {
    require_file(&a.model, "model")?;
    let (spec, state) = load_model(&a.model)?;
    if a.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let values = sweep_values(a.steps);
    let csv = response_sweep_csv(&spec, &state, a.stage, &a.sweep, &values, &a.settings.map(), a.fft_size)?;
    std::fs::write(&a.out, &csv).map_err(|e| {
        Failure::from(Error::Io {
            path: a.out.clone(),
            source: e,
        })
    })?;
    println!("wrote {} rows to {}", csv.lines().count() - 1, a.out.display());
    Ok(())
}

fn run_grad_check(a: GradCheckArgs) -> Result<(), Failure> {
    let seed = seed_or_default(a.seed);
    let (spec, state) = match &a.model {
        Some(path) => {
            require_file(path, "model")?;
            load_model(path)?
        }
        None => {
            let spec = a.preset.spec();
            let state = ModelState::random(&spec, seed);
            (spec, state)
        }
    };
    let c = spec.conditioning_from_settings(&a.settings.map())?;
    let noise = |salt: u64| {
        let clip = &synth_noise(a.length, seed ^ salt);
        AudioClip::new(clip.clone(), spec.sample_rate)
    };
    let input = match &a.input {
        Some(p) => {
            require_file(p, "input")?;
            read_wav(p)?
        }
        None => noise(1)?,
    };
    let target = input.with_samples(synth_noise(input.len(), seed ^ 2));
    let config = TrainConfig {
        fft_size: a.fft_size,
        ..TrainConfig::default()
    };
    config.validate()?;
    let example = Example {
        input,
        target,
        conditioning: c,
        group: 0,
    };
    let report = grad_check(&spec, &state, &[example], &config)?;
    let names = param_names(&spec);
    println!("parameters: {}  loss: {:.6e}", names.len(), report.loss);
    for e in &report.entries {
        let failed = e.smooth && !(e.rel_error <= report.tolerance);
        if a.verbose || failed || !e.smooth {
            let tag = if !e.smooth {
                "kink"
            } else if failed {
                "FAIL"
            } else {
                "ok"
            };
            println!(
                "{tag:>4}  {:<40} analytic {:+.6e}  numeric {:+.6e}  rel {:.2e}",
                e.name, e.analytic, e.numeric, e.rel_error
            );
        }
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e}); {} non-smooth parameters excluded",
        report.max_error(),
        report.tolerance,
        report.excluded()
    );
    if report.passed() {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("gradient check failed for {} parameters", report.failures().count()),
        })
    }
}

fn synth_noise(len: usize, seed: u64) -> Vec<f64> {
    // xorshift keeps the CLI free of extra dependencies
    let mut s = seed.wrapping_mul(0x2545_f491_4f6c_dd1d) | 1;
    (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse() {
        assert_eq!(parse_setting("MID FREQ=0.25").unwrap(), ("MID FREQ".to_string(), 0.25));
        assert!(parse_setting("DIST").is_err());
        assert!(parse_setting("DIST=1.5").is_err());
        assert!(parse_setting("DIST=x").is_err());
    }

    #[test]
    fn presets_have_expected_counts() {
        assert_eq!(count_params(&Preset::Mt2Eq.spec()), 210);
        assert_eq!(count_params(&Preset::Mt2Coefficient.spec()), 274);
        assert_eq!(count_params(&Preset::Mt2PoleZero.spec()), 274);
        assert_eq!(Preset::Teacher.spec().stages, 5);
    }

    #[test]
    fn noise_is_centered_and_bounded() {
        let n = synth_noise(10_000, 3);
        assert!(n.iter().all(|v| (-0.5..0.5).contains(v)));
        assert!((n.iter().sum::<f64>() / n.len() as f64).abs() < 0.02);
    }
}
