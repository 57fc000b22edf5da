//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test -p amsloc --test acceptance -- --nocapture`.

use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use amsloc::audio::{decimate, MultichannelAudio};
use amsloc::beamforming::{make_cardioids, ArrayGeometry, CardioidSet};
use amsloc::classification::{ClassGrid, LabeledFrame, LdaEnsemble, Prediction};
use amsloc::config::PipelineConfig;
use amsloc::evaluation::{evaluate_with, run_benchmark, train_from_frames, Pipeline};
use amsloc::features::{extract_features, FeatureExtractor, FilterbankConfig, LOG_FLOOR};
use amsloc::fusion::{
    arc_bins, bin_center_deg, bin_of, mean_absolute_error, signed_circular_error, AzimuthHistogram,
};
use amsloc::hash::mix_seed;
use amsloc::mbo::{branin, optimize, SearchSpace};
use amsloc::music::{music_localize, simulate_plane_wave, SteeringGrid};
use amsloc::scene::{
    corpus_scenes, render_direction, CorpusOptions, HeadModel, NoiseType, SceneSpec,
    DIRECTION_COUNT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Criteria run one at a time so the timing criterion is not disturbed.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n} [{name}]: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Frames of a rendered corpus, computed once and shared.
fn corpus_frames(pipeline: &Pipeline, opts: &CorpusOptions) -> Vec<LabeledFrame> {
    let head = HeadModel::default();
    let mut frames = Vec::new();
    for (_, spec) in corpus_scenes(opts) {
        let audio = render_direction(&spec, &head).expect("corpus scene renders");
        frames.extend(
            pipeline
                .labeled_frames(&audio, spec.azimuth_deg)
                .expect("corpus frames"),
        );
    }
    frames
}

fn mini_corpus() -> &'static (Pipeline, Vec<LabeledFrame>) {
    static CELL: OnceLock<(Pipeline, Vec<LabeledFrame>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let pipeline = Pipeline::new(&PipelineConfig::default()).unwrap();
        let opts = CorpusOptions {
            files_per_direction: 1,
            duration_s: 10.0,
            seed: 0,
        };
        let frames = corpus_frames(&pipeline, &opts);
        (pipeline, frames)
    })
}

fn mini_ensemble() -> &'static LdaEnsemble {
    static CELL: OnceLock<LdaEnsemble> = OnceLock::new();
    CELL.get_or_init(|| {
        let (pipeline, frames) = mini_corpus();
        train_from_frames(pipeline, frames, 0).unwrap()
    })
}

#[test]
fn criterion_1_table_mae() {
    let _g = serial();
    let mae = mean_absolute_error(&[-9.86, -2.61, 2.39]).unwrap();
    let pass = (mae - 4.95).abs() <= 0.01;
    verdict(
        1,
        "Table MAE arithmetic",
        pass,
        &format!("MAE {mae:.4} deg, target 4.95 +- 0.01"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_feature_contract() {
    let _g = serial();
    let cfg = FilterbankConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ex = FeatureExtractor::new(&cfg, 20_000).unwrap();
    let (mut worst, mut checked) = (0.0f64, 0usize);
    let mut shape_ok = true;
    for _ in 0..100 {
        let scale: f64 = rng.random_range(1.0..10.0);
        let chans: Vec<Vec<f64>> = (0..4)
            .map(|_| noise(40_000, &mut rng).iter().map(|v| v * scale).collect())
            .collect();
        let cards =
            CardioidSet::from_audio(MultichannelAudio::new(chans, 20_000).unwrap()).unwrap();
        let gain: f64 = rng.random_range(0.25..4.0);
        let scaled = CardioidSet::from_audio(cards.clone().into_audio().scaled(gain)).unwrap();
        let a = extract_features(&cards, &cfg).unwrap();
        let b = extract_features(&scaled, &cfg).unwrap();
        let single: Vec<f64> = cards
            .channels()
            .iter()
            .flat_map(|c| ex.channel_features(c))
            .collect();
        shape_ok &= a.len() == 36 && a.values == single && a.values.iter().all(|v| v.is_finite());
        let shift = 2.0 * gain.log10();
        // Energies a million times the floor keep its contribution below the tolerance.
        let above = LOG_FLOOR.log10() + 6.0;
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > above && *y > above {
                worst = worst.max((y - x - shift).abs());
                checked += 1;
            }
        }
    }
    let pass = shape_ok && worst <= 1e-6 && checked >= 3000;
    verdict(
        2,
        "feature contract",
        pass,
        &format!("36 ordered values: {shape_ok}; homogeneity max deviation {worst:.2e} over {checked} features"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_grid_intersection() {
    let _g = serial();
    let mut bad = Vec::new();
    for d in 0..DIRECTION_COUNT {
        let az = 5.0 * d as f64;
        let mut common: Vec<usize> = (0..72).collect();
        for grid in ClassGrid::all() {
            let p = Prediction {
                set_index: grid.set_index(),
                class_index: grid.class_of(az).unwrap(),
            };
            let arc: Vec<usize> = arc_bins(p).collect();
            common.retain(|b| arc.contains(b));
        }
        if common != [bin_of(az)] {
            bad.push(az);
        }
    }
    let pass = bad.is_empty();
    verdict(
        3,
        "grid intersection",
        pass,
        &format!("{} of 72 azimuths resolve to their own bin", 72 - bad.len()),
    );
    assert!(pass, "{bad:?}");
}

#[test]
fn criterion_4_ensemble_shape() {
    let _g = serial();
    let t0 = Instant::now();
    let (pipeline, frames) = mini_corpus();
    let a = mini_ensemble();
    let b = train_from_frames(pipeline, frames, 0).unwrap();
    let pass =
        a.model_count() == 120 && b.model_count() == 120 && a.content_hash() == b.content_hash();
    verdict(
        4,
        "ensemble shape",
        pass,
        &format!(
            "{} models, hashes {} / {}, {:.0} s",
            a.model_count(),
            &a.content_hash()[..12],
            &b.content_hash()[..12],
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_end_to_end_localization() {
    let _g = serial();
    let t0 = Instant::now();
    let pipeline = Pipeline::new(&PipelineConfig::default()).unwrap();
    let frames = corpus_frames(&pipeline, &CorpusOptions::default());
    let ensemble = train_from_frames(&pipeline, &frames, 0).unwrap();
    let head = HeadModel::default();
    // Held-out scenes use a separate master seed and every other azimuth.
    let held_out_seed = 0x00C0_FFEE;
    let snrs = [10.0, 15.0, 20.0];
    let scenes: Vec<SceneSpec> = (0..36)
        .map(|i| {
            SceneSpec::synthetic(
                10.0 * i as f64,
                snrs[i % 3],
                (i / 3) % 3,
                NoiseType::CORPUS[(i / 9) % 3],
                mix_seed(held_out_seed, i as u64),
            )
        })
        .collect();
    let items: Vec<(String, f64)> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (i.to_string(), s.azimuth_deg))
        .collect();
    let report = evaluate_with(&pipeline, &ensemble, &items, |id| {
        render_direction(&scenes[id.parse::<usize>().expect("numeric id")], &head)
    })
    .unwrap();
    let mae = report.mae_deg.unwrap_or(f64::INFINITY);
    let hits = report.hit_rate(15.0);
    let pass = !report.has_failures() && mae <= 10.0 && hits >= 0.9;
    verdict(
        5,
        "end-to-end localization",
        pass,
        &format!(
            "MAE {mae:.2} deg (<= 10), {:.1}% within 15 deg (>= 90%), cv error {:.3}, {:.0} s",
            100.0 * hits,
            ensemble.cv_error,
            t0.elapsed().as_secs_f64()
        ),
    );
    if !pass {
        print!("{}", report.table());
    }
    assert!(pass);
}

#[test]
fn criterion_6_pooling_oracle() {
    let _g = serial();
    let mut worst = 0.0f64;
    for d in 0..DIRECTION_COUNT {
        let az = 5.0 * d as f64;
        let mut hist = AzimuthHistogram::new();
        for grid in ClassGrid::all() {
            for _ in 0..20 {
                hist.add(Prediction {
                    set_index: grid.set_index(),
                    class_index: grid.class_of(az).unwrap(),
                });
            }
        }
        let est = hist.estimate().unwrap();
        worst = worst.max(signed_circular_error(est.azimuth_deg, bin_center_deg(bin_of(az))).abs());
    }
    let pass = worst <= 2.5 + 1e-9;
    verdict(
        6,
        "pooling oracle",
        pass,
        &format!("largest distance to bin centre {worst:.3} deg over 72 azimuths"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_mbo_convergence() {
    let _g = serial();
    let space = SearchSpace::boxed(&[(-5.0, 10.0), (0.0, 15.0)]).unwrap();
    let objective = |x: &[f64]| Ok(branin(x));
    let a = optimize(objective, &space, 40, 8, 11).unwrap();
    let b = optimize(objective, &space, 40, 8, 11).unwrap();
    let n = 1501;
    let mut grid_min = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let x = [
                -5.0 + 15.0 * i as f64 / (n - 1) as f64,
                15.0 * j as f64 / (n - 1) as f64,
            ];
            grid_min = grid_min.min(branin(&x));
        }
    }
    let monotone = [&a, &b]
        .iter()
        .all(|r| r.incumbent_trace().windows(2).all(|w| w[1] <= w[0]));
    let pass = a == b && monotone && a.best_error <= 1.05 * grid_min;
    verdict(
        7,
        "MBO convergence",
        pass,
        &format!(
            "best {:.5} vs grid minimum {grid_min:.5}, reproducible {}, monotone {monotone}",
            a.best_error,
            a == b
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_music_baseline() {
    let _g = serial();
    let head = HeadModel::default();
    let grid = SteeringGrid::for_head(&head, 20_000).unwrap();
    let positions = head.mic_azimuths_deg().map(|a| {
        let (s, c) = a.to_radians().sin_cos();
        (head.head_radius_m * c, head.head_radius_m * s)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mics = simulate_plane_wave(
        &noise(60_000, &mut rng),
        positions,
        45.0,
        head.speed_of_sound_mps,
        20_000,
    )
    .unwrap();
    let music_az = music_localize(&mics, &grid).unwrap().azimuth_deg;
    let sanity = signed_circular_error(music_az, 45.0).abs() <= 2.0;

    let (pipeline, _) = mini_corpus();
    let recordings: Vec<(String, MultichannelAudio)> = [30.0, 150.0, 270.0]
        .iter()
        .enumerate()
        .map(|(i, &az)| {
            let spec = SceneSpec::synthetic(az, 10.0, i, NoiseType::Pink, mix_seed(88, i as u64));
            (format!("az{az}"), render_direction(&spec, &head).unwrap())
        })
        .collect();
    let bench = run_benchmark(pipeline, mini_ensemble(), &grid, &recordings, 3).unwrap();
    let faster = bench.pipeline_faster();
    let realtime = bench.mean_pipeline_rtf < 1.0;
    let pass = sanity && faster && realtime;
    verdict(
        8,
        "MUSIC baseline",
        pass,
        &format!(
            "45 deg source at {music_az} deg; pipeline RTF {:.5} vs MUSIC RTF {:.5} (speedup {:.2}x), real time {realtime}",
            bench.mean_pipeline_rtf, bench.mean_music_rtf, bench.speedup
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_dsp_oracles() {
    let _g = serial();

    // Decimator: DFT peak of a 1 kHz tone after 48 kHz -> 20 kHz.
    let tone: Vec<f64> = (0..48_000)
        .map(|n| (2.0 * PI * 1000.0 * n as f64 / 48_000.0).sin())
        .collect();
    let down = decimate(&MultichannelAudio::new(vec![tone], 48_000).unwrap(), 20_000).unwrap();
    let x = &down.channel(0)[4000..8000];
    let dft = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * (k * n) as f64 / x.len() as f64;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        re * re + im * im
    };
    let peak = (1..x.len() / 2)
        .max_by(|&a, &b| dft(a).total_cmp(&dft(b)))
        .unwrap();
    let bin_hz = 20_000.0 / x.len() as f64;
    let peak_hz = peak as f64 * bin_hz;
    let decimator_ok = (peak_hz - 1000.0).abs() <= bin_hz;

    // Envelope of a steady tone settles at the rectified-sine mean.
    let amp = 0.7;
    let ex = FeatureExtractor::new(&FilterbankConfig::default(), 20_000).unwrap();
    let tone: Vec<f64> = (0..20_000)
        .map(|n| amp * (2.0 * PI * 1000.0 * n as f64 / 20_000.0).sin())
        .collect();
    let env = ex.envelope(&tone);
    let settled = &env[200..];
    let mean = settled.iter().sum::<f64>() / settled.len() as f64;
    let expected = 2.0 * amp / PI;
    let envelope_err = (mean - expected).abs() / expected;

    // Cardioid nulls: the rear mic hears the frontal wave exactly tau later.
    let geom = ArrayGeometry::default();
    let tau = geom.delay_s();
    let partials: Vec<(f64, f64)> = (0..12)
        .map(|i| (300.0 + 310.0 * i as f64, 0.37 * i as f64))
        .collect();
    let wave = |delay: f64| -> Vec<f64> {
        (0..20_000)
            .map(|n| {
                let t = n as f64 / 20_000.0 - delay;
                partials
                    .iter()
                    .map(|&(f, ph)| (2.0 * PI * f * t + ph).sin())
                    .sum()
            })
            .collect()
    };
    let (early, late) = (wave(0.0), wave(tau));
    // Left device faces a frontal source, right device a rear one.
    let mics =
        MultichannelAudio::new(vec![early.clone(), late.clone(), late, early], 20_000).unwrap();
    let cards = make_cardioids(&mics, &geom).unwrap();
    let rms = |v: &[f64]| {
        (v[100..v.len() - 100].iter().map(|x| x * x).sum::<f64>() / (v.len() - 200) as f64).sqrt()
    };
    let front_null = rms(&cards.back_left) / rms(&cards.front_left);
    let rear_null = rms(&cards.front_right) / rms(&cards.back_right);

    let pass = decimator_ok && envelope_err <= 0.05 && front_null < 0.02 && rear_null < 0.02;
    verdict(
        9,
        "DSP oracles",
        pass,
        &format!(
            "tone peak {peak_hz:.1} Hz; envelope {mean:.4} vs 2A/pi {expected:.4} ({:.2}%); null ratios {front_null:.4} / {rear_null:.4}",
            100.0 * envelope_err
        ),
    );
    assert!(pass);
}
