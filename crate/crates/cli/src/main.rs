use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use amsloc::audio::{read_wav, write_wav, MultichannelAudio, SampleEncoding};
use amsloc::classification::LdaEnsemble;
use amsloc::config::PipelineConfig;
use amsloc::evaluation::{
    estimate_rows, evaluate_set, run_benchmark, train_from_corpus, tune_filterbank,
    write_estimates_csv, Corpus, Pipeline,
};
use amsloc::hash::hex_u64;
use amsloc::mbo::SearchSpace;
use amsloc::music::{music_localize, SteeringGrid};
use amsloc::scene::{render_corpus, render_direction, NoiseType, SceneSpec};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "amsloc",
    version,
    about = "Azimuth estimation for behind-the-ear microphone arrays"
)]
struct Cli {
    /// JSON configuration; defaults are used for missing sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Render the synthetic corpus, or a single scene with --azimuth.
    Render(RenderArgs),
    /// Write per-frame feature vectors to CSV.
    Extract(ExtractArgs),
    /// Train the classifier ensemble on a corpus.
    Train(TrainArgs),
    /// Tune the filterbank edges with model-based optimization.
    Tune(TuneArgs),
    /// Estimate the azimuth of each recording.
    Localize(LocalizeArgs),
    /// Localize a labelled corpus and report errors.
    Evaluate(EvaluateArgs),
    /// Compare runtime against the MUSIC baseline.
    Bench(BenchArgs),
    /// Localize with the MUSIC baseline.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct RenderArgs {
    /// Output directory for a corpus, or a WAV path with --azimuth.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    files_per_direction: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    azimuth: Option<f64>,
    #[arg(long, default_value_t = 10.0)]
    snr: f64,
    #[arg(long, default_value = "white")]
    noise: NoiseType,
    #[arg(long, default_value_t = 0)]
    speaker: usize,
}

#[derive(Args)]
struct ExtractArgs {
    /// Recordings to process.
    #[arg(long = "in", num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Corpus directory; azimuths come from its manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Filterbank JSON overriding the configured one, e.g. from `tune`.
    #[arg(long)]
    filterbank: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Search space JSON; the default filterbank space when omitted.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    init: Option<usize>,
    /// Where to write the best filterbank JSON.
    #[arg(long, default_value = "filterbank.json")]
    out: PathBuf,
    #[arg(long, default_value = "history.csv")]
    history: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Estimates CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in", num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Corpus directory; every file listed in its manifest is timed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use at most this many corpus files.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::Config => {
            println!("{}", config.to_json());
            Ok(ExitCode::SUCCESS)
        }
        Command::Render(a) => render(&config, seed, a),
        Command::Extract(a) => extract(&config, a),
        Command::Train(a) => train(&config, seed, a),
        Command::Tune(a) => tune(&config, seed, a),
        Command::Localize(a) => localize(&config, a),
        Command::Evaluate(a) => evaluate(&config, a),
        Command::Bench(a) => bench(&config, a),
        Command::Baseline(a) => baseline(&config, a),
    }
}

fn render(config: &PipelineConfig, seed: u64, a: RenderArgs) -> anyhow::Result<ExitCode> {
    let mut renderer = config.renderer;
    if let Some(n) = a.files_per_direction {
        renderer.files_per_direction = n;
    }
    if let Some(d) = a.duration {
        renderer.duration_s = d;
    }
    if let Some(az) = a.azimuth {
        let mut spec = SceneSpec::synthetic(az, a.snr, a.speaker, a.noise, seed);
        spec.duration_s = renderer.duration_s;
        let audio = render_direction(&spec, &renderer.head)?;
        write_wav(&a.out, &audio, SampleEncoding::Float32)?;
        println!(
            "wrote {} ({:.1} s at {} Hz)",
            a.out.display(),
            audio.duration_s(),
            audio.sample_rate()
        );
        return Ok(ExitCode::SUCCESS);
    }
    let t0 = Instant::now();
    let rows = render_corpus(&a.out, &renderer.head, &renderer.corpus(seed))?;
    println!(
        "rendered {} recordings into {} in {:.1} s",
        rows.len(),
        a.out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

fn extract(config: &PipelineConfig, a: ExtractArgs) -> anyhow::Result<ExitCode> {
    let mut items: Vec<(String, PathBuf, Option<f64>)> = a
        .inputs
        .iter()
        .map(|p| (p.display().to_string(), p.clone(), None))
        .collect();
    if let Some(dir) = &a.data {
        let corpus = Corpus::open(dir)?;
        items.extend(
            corpus
                .rows
                .iter()
                .map(|r| (r.path.clone(), corpus.path(r), Some(r.azimuth_deg))),
        );
    }
    if items.is_empty() {
        bail!("nothing to extract: pass --in or --data");
    }
    let pipeline = Pipeline::new(config)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    let count = config.filterbank.feature_count();
    let mut header = vec![
        "recording".to_string(),
        "azimuth_deg".into(),
        "frame_index".into(),
        "config_hash".into(),
    ];
    header.extend((0..count).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    let mut frames_written = 0usize;
    for (id, path, azimuth) in &items {
        let audio = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
        for f in pipeline.features(&audio)? {
            let mut rec = vec![
                id.clone(),
                azimuth.map(|v| v.to_string()).unwrap_or_default(),
                f.frame_index.to_string(),
                hex_u64(f.config_hash),
            ];
            rec.extend(f.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
            frames_written += 1;
        }
    }
    w.flush()?;
    println!(
        "wrote {frames_written} frames from {} recordings to {}",
        items.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(config: &PipelineConfig, seed: u64, a: TrainArgs) -> anyhow::Result<ExitCode> {
    let config = match &a.filterbank {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            config.with_filterbank(amsloc::features::FilterbankConfig::from_json(&text)?)
        }
        None => config.clone(),
    };
    let pipeline = Pipeline::new(&config)?;
    let corpus = Corpus::open(&a.data)?;
    let t0 = Instant::now();
    let ensemble = train_from_corpus(&pipeline, &corpus, seed)?;
    ensemble.save(&a.model)?;
    println!(
        "trained {} models on {} recordings in {:.1} s; cross-validated error {:.4}; model hash {}",
        ensemble.model_count(),
        corpus.rows.len(),
        t0.elapsed().as_secs_f64(),
        ensemble.cv_error,
        ensemble.content_hash()
    );
    Ok(ExitCode::SUCCESS)
}

fn tune(config: &PipelineConfig, seed: u64, a: TuneArgs) -> anyhow::Result<ExitCode> {
    let space = match &a.space {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let space: SearchSpace = serde_json::from_str(&text)?;
            space.validate()?;
            space
        }
        None => SearchSpace::filterbank(
            config.filterbank.spectral_edges.len(),
            config.filterbank.modulation_edges.len(),
        ),
    };
    let budget = a.budget.unwrap_or(config.mbo.settings.budget);
    let init = a.init.unwrap_or(config.mbo.settings.init_n.min(budget));
    let corpus = Corpus::open(&a.data)?;
    let t0 = Instant::now();
    let result = tune_filterbank(config, &corpus, &space, budget, init, seed)?;
    let best = result.best_config(&space, config.filterbank.filter_order)?;
    std::fs::write(&a.out, best.to_json())?;
    result.write_history_csv(&space, &a.history)?;
    println!(
        "best error {:.4} after {} evaluations in {:.1} s; wrote {} and {}",
        result.best_error,
        result.budget_used,
        t0.elapsed().as_secs_f64(),
        a.out.display(),
        a.history.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// The model's filterbank replaces the configured one so that tuned models
/// run without editing the config; audio and geometry must still match.
fn pipeline_for_model(
    config: &PipelineConfig,
    model: &Path,
) -> anyhow::Result<(Pipeline, LdaEnsemble)> {
    let ensemble =
        LdaEnsemble::load(model).with_context(|| format!("loading model {}", model.display()))?;
    let pipeline = Pipeline::new(&config.with_filterbank(ensemble.filterbank_config.clone()))?;
    pipeline.check_model(&ensemble)?;
    Ok((pipeline, ensemble))
}

fn localize(config: &PipelineConfig, a: LocalizeArgs) -> anyhow::Result<ExitCode> {
    let (pipeline, ensemble) = pipeline_for_model(config, &a.model)?;
    let mut rows = Vec::new();
    let mut failed = 0usize;
    for path in &a.inputs {
        let id = path.display().to_string();
        match read_wav(path)
            .map_err(anyhow::Error::from)
            .and_then(|x| Ok(pipeline.localize(&ensemble, &x)?))
        {
            Ok(loc) => {
                println!(
                    "{id}: azimuth {:.1} deg, confidence {:.3}, {} frames, RTF {:.4}",
                    loc.estimate.azimuth_deg,
                    loc.estimate.confidence,
                    loc.timestamps_s.len(),
                    loc.rtf
                );
                rows.extend(estimate_rows(&id, &loc));
            }
            Err(e) => {
                eprintln!("{id}: failed: {e:#}");
                failed += 1;
            }
        }
    }
    if let Some(out) = &a.out {
        write_estimates_csv(out, &rows)?;
    }
    Ok(if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn evaluate(config: &PipelineConfig, a: EvaluateArgs) -> anyhow::Result<ExitCode> {
    let (pipeline, ensemble) = pipeline_for_model(config, &a.model)?;
    let corpus = Corpus::open(&a.data)?;
    let report = evaluate_set(&pipeline, &ensemble, &corpus)?;
    print!("{}", report.table());
    if let Some(out) = &a.report {
        report.write_csv(out)?;
    }
    Ok(if report.has_failures() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn bench(config: &PipelineConfig, a: BenchArgs) -> anyhow::Result<ExitCode> {
    let (pipeline, ensemble) = pipeline_for_model(config, &a.model)?;
    let mut paths: Vec<(String, PathBuf)> = a
        .inputs
        .iter()
        .map(|p| (p.display().to_string(), p.clone()))
        .collect();
    if let Some(dir) = &a.data {
        let corpus = Corpus::open(dir)?;
        paths.extend(corpus.rows.iter().map(|r| (r.path.clone(), corpus.path(r))));
    }
    if let Some(n) = a.limit {
        paths.truncate(n);
    }
    let recordings = paths
        .into_iter()
        .map(|(id, p)| {
            Ok((
                id,
                read_wav(&p).with_context(|| format!("reading {}", p.display()))?,
            ))
        })
        .collect::<anyhow::Result<Vec<(String, MultichannelAudio)>>>()?;
    let grid = SteeringGrid::for_head(&config.renderer.head, config.audio.processing_rate)?;
    let report = run_benchmark(&pipeline, &ensemble, &grid, &recordings, a.runs)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        report.write_csv(out)?;
    }
    if !report.pipeline_faster() {
        eprintln!("pipeline is not faster than the MUSIC baseline on this machine");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn baseline(config: &PipelineConfig, a: BaselineArgs) -> anyhow::Result<ExitCode> {
    let audio = read_wav(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let rate = config.audio.processing_rate;
    let grid = SteeringGrid::for_head(&config.renderer.head, rate)?;
    let t0 = Instant::now();
    let audio = if audio.sample_rate() == rate {
        audio
    } else {
        amsloc::audio::decimate(&audio, rate)?
    };
    let est = music_localize(&audio, &grid)?;
    let elapsed = t0.elapsed().as_secs_f64();
    println!(
        "{}: azimuth {:.0} deg, runtime {:.4} s, RTF {:.5}",
        a.input.display(),
        est.azimuth_deg,
        elapsed,
        elapsed / audio.duration_s()
    );
    Ok(ExitCode::SUCCESS)
}
