//! End-to-end pipeline, corpus-level training and tuning, evaluation
//! reports and the runtime benchmark against MUSIC.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{decimate, read_wav, MultichannelAudio};
use crate::beamforming::{make_cardioids, CardioidSet};
use crate::classification::{train_ensemble, LabeledFrame, LdaEnsemble};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureFrame};
use crate::fusion::{
    mean_absolute_error, signed_circular_error, AzimuthEstimate, AzimuthHistogram,
};
use crate::hash::mix_seed;
use crate::mbo::{optimize, MboResult, SearchSpace};
use crate::music::{music_localize, SteeringGrid};
use crate::scene::{read_manifest, ManifestRow, MANIFEST_NAME};

/// Decimate, beamform, frame, extract, classify and pool.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    extractor: FeatureExtractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub estimate: AzimuthEstimate,
    pub histogram: AzimuthHistogram,
    /// Start time of every analysed frame.
    pub timestamps_s: Vec<f64>,
    pub compute_s: f64,
    pub duration_s: f64,
    pub rtf: f64,
}

impl Pipeline {
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let extractor = FeatureExtractor::new(&config.filterbank, config.audio.processing_rate)?
            .with_stamp(config.feature_hash());
        Ok(Self {
            config: config.clone(),
            extractor,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn stamp(&self) -> u64 {
        self.extractor.stamp()
    }

    pub fn check_model(&self, ensemble: &LdaEnsemble) -> Result<()> {
        if ensemble.config_hash != self.stamp() {
            return Err(Error::Compatibility(format!(
                "model trained with feature configuration {:016x}, current configuration is {:016x}",
                ensemble.config_hash,
                self.stamp()
            )));
        }
        Ok(())
    }

    fn to_processing_rate<'a>(
        &self,
        audio: &'a MultichannelAudio,
    ) -> Result<Cow<'a, MultichannelAudio>> {
        if audio.sample_rate() == self.config.audio.processing_rate {
            Ok(Cow::Borrowed(audio))
        } else {
            Ok(Cow::Owned(decimate(
                audio,
                self.config.audio.processing_rate,
            )?))
        }
    }

    /// Cardioid signals of a whole recording at the processing rate.
    pub fn prepare(&self, audio: &MultichannelAudio) -> Result<CardioidSet> {
        let audio = self.to_processing_rate(audio)?;
        make_cardioids(&audio, &self.config.geometry)
    }

    fn frame_starts(&self, len: usize) -> Result<Vec<usize>> {
        self.config.audio.frame.validate()?;
        let starts = self
            .config
            .audio
            .frame
            .frame_starts(len, self.config.audio.processing_rate);
        if starts.is_empty() {
            return Err(Error::EmptyResult(format!(
                "recording shorter than one {} s frame",
                self.config.audio.frame.frame_length_s
            )));
        }
        Ok(starts)
    }

    pub fn frame_features(&self, cards: &CardioidSet) -> Result<Vec<FeatureFrame>> {
        let n = self.config.audio.frame.frame_samples(cards.sample_rate);
        self.frame_starts(cards.len())?
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let slice = |x: &[f64]| x[s..s + n].to_vec();
                let frame = CardioidSet {
                    front_left: slice(&cards.front_left),
                    front_right: slice(&cards.front_right),
                    back_left: slice(&cards.back_left),
                    back_right: slice(&cards.back_right),
                    sample_rate: cards.sample_rate,
                };
                self.extractor.extract(&frame, i)
            })
            .collect()
    }

    pub fn features(&self, audio: &MultichannelAudio) -> Result<Vec<FeatureFrame>> {
        self.frame_features(&self.prepare(audio)?)
    }

    pub fn histogram(
        &self,
        ensemble: &LdaEnsemble,
        audio: &MultichannelAudio,
    ) -> Result<AzimuthHistogram> {
        self.check_model(ensemble)?;
        let mut hist = AzimuthHistogram::new();
        for frame in self.features(audio)? {
            hist.add_all(&ensemble.predict(&frame)?);
        }
        Ok(hist)
    }

    /// One pooled estimate for the whole recording, with timing.
    pub fn localize(
        &self,
        ensemble: &LdaEnsemble,
        audio: &MultichannelAudio,
    ) -> Result<Localization> {
        let t0 = Instant::now();
        let histogram = self.histogram(ensemble, audio)?;
        let estimate = histogram.estimate()?;
        let compute_s = t0.elapsed().as_secs_f64();
        let rate = self.config.audio.processing_rate;
        let len = (audio.len() as f64 * rate as f64 / audio.sample_rate() as f64).ceil() as usize;
        let timestamps_s = self
            .config
            .audio
            .frame
            .frame_starts(len, rate)
            .into_iter()
            .map(|s| s as f64 / rate as f64)
            .collect();
        let duration_s = audio.duration_s();
        Ok(Localization {
            estimate,
            histogram,
            timestamps_s,
            compute_s,
            duration_s,
            rtf: compute_s / duration_s,
        })
    }

    pub fn labeled_frames(
        &self,
        audio: &MultichannelAudio,
        azimuth_deg: f64,
    ) -> Result<Vec<LabeledFrame>> {
        Ok(self
            .features(audio)?
            .into_iter()
            .map(|features| LabeledFrame {
                features,
                azimuth_deg,
            })
            .collect())
    }
}

pub fn run_localize(
    pipeline: &Pipeline,
    ensemble: &LdaEnsemble,
    recording: &Path,
) -> Result<Localization> {
    let audio = read_wav(recording)?;
    pipeline.localize(ensemble, &audio)
}

/// A corpus directory: WAV files plus `manifest.csv`.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            rows: read_manifest(&dir.join(MANIFEST_NAME))?,
        })
    }

    pub fn path(&self, row: &ManifestRow) -> PathBuf {
        self.dir.join(&row.path)
    }

    /// Up to `per_direction` rows for every azimuth, chosen by a seeded shuffle.
    pub fn subset(&self, per_direction: usize, seed: u64) -> Self {
        let mut by_dir: std::collections::BTreeMap<i64, Vec<&ManifestRow>> = Default::default();
        for r in &self.rows {
            by_dir
                .entry((r.azimuth_deg * 1000.0).round() as i64)
                .or_default()
                .push(r);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = by_dir
            .into_values()
            .flat_map(|mut v| {
                v.shuffle(&mut rng);
                v.truncate(per_direction);
                v.into_iter().cloned().collect::<Vec<_>>()
            })
            .collect();
        Self {
            dir: self.dir.clone(),
            rows,
        }
    }
}

fn map_rows<T: Send>(rows: &[ManifestRow], f: impl Fn(&ManifestRow) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        rows.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        rows.iter().map(f).collect()
    }
}

pub fn corpus_frames(pipeline: &Pipeline, corpus: &Corpus) -> Result<Vec<LabeledFrame>> {
    let per_file = map_rows(&corpus.rows, |r| {
        let audio = read_wav(corpus.path(r))?;
        pipeline.labeled_frames(&audio, r.azimuth_deg)
    });
    let mut out = Vec::new();
    for frames in per_file {
        out.extend(frames?);
    }
    Ok(out)
}

pub fn train_from_frames(
    pipeline: &Pipeline,
    frames: &[LabeledFrame],
    seed: u64,
) -> Result<LdaEnsemble> {
    let cfg = pipeline.config();
    train_ensemble(frames, &cfg.filterbank, &cfg.classifier.options(seed))
}

pub fn train_from_corpus(pipeline: &Pipeline, corpus: &Corpus, seed: u64) -> Result<LdaEnsemble> {
    train_from_frames(pipeline, &corpus_frames(pipeline, corpus)?, seed)
}

/// Cross-validated ensemble error of a candidate filterbank on a corpus.
pub fn tuning_error(config: &PipelineConfig, corpus: &Corpus, seed: u64) -> Result<f64> {
    let pipeline = Pipeline::new(config)?;
    Ok(train_from_corpus(&pipeline, corpus, seed)?.cv_error)
}

/// Tune the filterbank edges on a per-direction subset of the corpus.
pub fn tune_filterbank(
    config: &PipelineConfig,
    corpus: &Corpus,
    space: &SearchSpace,
    budget: usize,
    init_n: usize,
    seed: u64,
) -> Result<MboResult> {
    let subset = corpus.subset(config.mbo.files_per_direction, mix_seed(seed, 7));
    let order = config.filterbank.filter_order;
    optimize(
        |x| {
            let fb = space.to_filterbank(x, order)?;
            tuning_error(&config.with_filterbank(fb), &subset, seed)
        },
        space,
        budget,
        init_n,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub recording_id: String,
    pub truth_deg: f64,
    pub estimate_deg: Option<f64>,
    pub signed_error_deg: Option<f64>,
    pub confidence: Option<f64>,
    pub rtf: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub mae_deg: Option<f64>,
    pub mean_rtf: Option<f64>,
    pub failed: usize,
    pub hardware: String,
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!(
        "{}-{}, {threads} hardware threads",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

impl EvaluationReport {
    pub fn from_rows(rows: Vec<ReportRow>) -> Self {
        let errors: Vec<f64> = rows.iter().filter_map(|r| r.signed_error_deg).collect();
        let rtfs: Vec<f64> = rows.iter().filter_map(|r| r.rtf).collect();
        let mean_rtf = (!rtfs.is_empty()).then(|| rtfs.iter().sum::<f64>() / rtfs.len() as f64);
        Self {
            mae_deg: mean_absolute_error(&errors),
            mean_rtf,
            failed: rows.iter().filter(|r| r.estimate_deg.is_none()).count(),
            rows,
            hardware: hardware_note(),
        }
    }

    pub fn has_failures(&self) -> bool {
        self.failed > 0
    }

    /// Share of successful estimates within `tolerance_deg` of the truth.
    pub fn hit_rate(&self, tolerance_deg: f64) -> f64 {
        let ok: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| r.signed_error_deg)
            .collect();
        if ok.is_empty() {
            return 0.0;
        }
        ok.iter().filter(|e| e.abs() <= tolerance_deg).count() as f64 / ok.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>9} {:>9} {:>7}  status",
            "recording", "truth", "estimate", "error", "rtf"
        );
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>8.2} {:>9} {:>9} {:>7}  {}",
                r.recording_id,
                r.truth_deg,
                fmt(r.estimate_deg, 2),
                fmt(r.signed_error_deg, 2),
                fmt(r.rtf, 3),
                r.status
            );
        }
        let _ = writeln!(s, "MAE: {} deg", fmt(self.mae_deg, 2));
        let _ = writeln!(s, "mean RTF: {}", fmt(self.mean_rtf, 4));
        if self.has_failures() {
            let _ = writeln!(
                s,
                "WARNING: {} recording(s) failed; MAE covers successes only",
                self.failed
            );
        }
        let _ = writeln!(s, "hardware: {}", self.hardware);
        s
    }
}

/// Localize every `(id, truth)` pair, loading audio lazily. Failures become
/// rows without an estimate.
pub fn evaluate_with<F>(
    pipeline: &Pipeline,
    ensemble: &LdaEnsemble,
    items: &[(String, f64)],
    load: F,
) -> Result<EvaluationReport>
where
    F: Fn(&str) -> Result<MultichannelAudio>,
{
    if items.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    pipeline.check_model(ensemble)?;
    let rows = items
        .iter()
        .map(
            |(id, truth)| match load(id).and_then(|a| pipeline.localize(ensemble, &a)) {
                Ok(loc) => ReportRow {
                    recording_id: id.clone(),
                    truth_deg: *truth,
                    estimate_deg: Some(loc.estimate.azimuth_deg),
                    signed_error_deg: Some(signed_circular_error(loc.estimate.azimuth_deg, *truth)),
                    confidence: Some(loc.estimate.confidence),
                    rtf: Some(loc.rtf),
                    status: "ok".into(),
                },
                Err(e) => ReportRow {
                    recording_id: id.clone(),
                    truth_deg: *truth,
                    estimate_deg: None,
                    signed_error_deg: None,
                    confidence: None,
                    rtf: None,
                    status: e.to_string(),
                },
            },
        )
        .collect();
    Ok(EvaluationReport::from_rows(rows))
}

pub fn evaluate_set(
    pipeline: &Pipeline,
    ensemble: &LdaEnsemble,
    corpus: &Corpus,
) -> Result<EvaluationReport> {
    let items: Vec<(String, f64)> = corpus
        .rows
        .iter()
        .map(|r| (r.path.clone(), r.azimuth_deg))
        .collect();
    evaluate_with(pipeline, ensemble, &items, |p| read_wav(corpus.dir.join(p)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRow {
    pub recording_id: String,
    pub timestamp_s: f64,
    pub azimuth_deg: f64,
    pub confidence: f64,
}

/// The pooled estimate repeated at every frame timestamp.
pub fn estimate_rows(recording_id: &str, loc: &Localization) -> Vec<EstimateRow> {
    loc.timestamps_s
        .iter()
        .map(|&t| EstimateRow {
            recording_id: recording_id.to_string(),
            timestamp_s: t,
            azimuth_deg: loc.estimate.azimuth_deg,
            confidence: loc.estimate.confidence,
        })
        .collect()
}

pub fn write_estimates_csv(path: &Path, rows: &[EstimateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub recording_id: String,
    pub duration_s: f64,
    pub pipeline_rtf: f64,
    pub music_rtf: f64,
    pub pipeline_azimuth_deg: f64,
    pub music_azimuth_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub runs: usize,
    pub mean_pipeline_rtf: f64,
    pub mean_music_rtf: f64,
    /// Baseline RTF over pipeline RTF.
    pub speedup: f64,
    pub hardware: String,
}

impl BenchmarkReport {
    pub fn pipeline_faster(&self) -> bool {
        self.mean_pipeline_rtf < self.mean_music_rtf
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>12} {:>12} {:>10} {:>10}",
            "recording", "pipeline_rtf", "music_rtf", "pipe_az", "music_az"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>12.5} {:>12.5} {:>10.2} {:>10.2}",
                r.recording_id,
                r.pipeline_rtf,
                r.music_rtf,
                r.pipeline_azimuth_deg,
                r.music_azimuth_deg
            );
        }
        let _ = writeln!(
            s,
            "mean RTF (median of {} runs): pipeline {:.5}, MUSIC {:.5}, speedup {:.2}x",
            self.runs, self.mean_pipeline_rtf, self.mean_music_rtf, self.speedup
        );
        let _ = writeln!(s, "hardware: {}", self.hardware);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
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

/// Time the pipeline and MUSIC on the same recordings; each RTF is the
/// median over `runs` repetitions.
pub fn run_benchmark(
    pipeline: &Pipeline,
    ensemble: &LdaEnsemble,
    grid: &SteeringGrid,
    recordings: &[(String, MultichannelAudio)],
    runs: usize,
) -> Result<BenchmarkReport> {
    if recordings.is_empty() {
        return Err(Error::Argument(
            "benchmark needs at least one recording".into(),
        ));
    }
    if runs == 0 {
        return Err(Error::Argument("benchmark needs at least one run".into()));
    }
    let rate = pipeline.config().audio.processing_rate;
    let mut rows = Vec::with_capacity(recordings.len());
    for (id, audio) in recordings {
        let duration = audio.duration_s();
        let mut p_times = Vec::with_capacity(runs);
        let mut m_times = Vec::with_capacity(runs);
        let mut p_az = 0.0;
        let mut m_az = 0.0;
        for _ in 0..runs {
            let loc = pipeline.localize(ensemble, audio)?;
            p_az = loc.estimate.azimuth_deg;
            p_times.push(loc.compute_s);

            let t0 = Instant::now();
            let input = if audio.sample_rate() == rate {
                Cow::Borrowed(audio)
            } else {
                Cow::Owned(decimate(audio, rate)?)
            };
            let est = music_localize(&input, grid)?;
            m_times.push(t0.elapsed().as_secs_f64());
            m_az = est.azimuth_deg;
        }
        rows.push(BenchmarkRow {
            recording_id: id.clone(),
            duration_s: duration,
            pipeline_rtf: median(p_times) / duration,
            music_rtf: median(m_times) / duration,
            pipeline_azimuth_deg: p_az,
            music_azimuth_deg: m_az,
        });
    }
    let n = rows.len() as f64;
    let mean_pipeline_rtf = rows.iter().map(|r| r.pipeline_rtf).sum::<f64>() / n;
    let mean_music_rtf = rows.iter().map(|r| r.music_rtf).sum::<f64>() / n;
    Ok(BenchmarkReport {
        rows,
        runs,
        mean_pipeline_rtf,
        mean_music_rtf,
        speedup: mean_music_rtf / mean_pipeline_rtf,
        hardware: hardware_note(),
    })
}
