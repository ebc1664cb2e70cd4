use davad::data::synth::{synthesize_file, SynthSpec};
use davad::data::{generate_synthetic_corpus, load_training_files, make_splits, SplitMode};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Power-weighted mean frequency of a chunk, from 512-point frames.
fn spectral_centroid(x: &[f32], sample_rate: u32) -> f64 {
    let n = 512;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut num = 0.0;
    let mut den = 0.0;
    for frame in x.chunks_exact(n) {
        let mut buf: Vec<Complex<f64>> =
            frame.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(n / 2 + 1).enumerate() {
            let p = c.norm_sqr();
            num += p * k as f64 * sample_rate as f64 / n as f64;
            den += p;
        }
    }
    num / den
}

fn chunk_centroids(audio: &[f32], sample_rate: u32) -> Vec<f64> {
    audio
        .chunks_exact(2 * sample_rate as usize)
        .map(|c| spectral_centroid(c, sample_rate).ln())
        .collect()
}

#[test]
fn speech_fraction_within_five_percent() {
    let spec = SynthSpec {
        file_duration: 30.0,
        ..SynthSpec::default()
    };
    for k in [0, 5] {
        let (mut speech, mut total) = (0.0, 0.0);
        for i in 0..10 {
            let (w, t) = synthesize_file(&spec, k, &format!("probe_{k}_{i}"));
            speech += t.duration();
            total += w.duration();
        }
        let f = speech / total;
        assert!((f - spec.speech_fraction).abs() <= 0.05, "domain {k}: {f}");
    }
}

#[test]
fn spectral_centroid_nearest_neighbour_separates_domains() {
    let spec = SynthSpec {
        file_duration: 20.0,
        train_files: 2,
        dev_files: 0,
        test_files: 1,
        noise_bank_files: 0,
        ..SynthSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_corpus(&spec, dir.path()).unwrap();
    let domains = manifest.domains();
    let splits = make_splits(&manifest, &SplitMode::InDomain).unwrap();
    let reference: Vec<(f64, usize)> = load_training_files(&splits.train, &domains)
        .unwrap()
        .iter()
        .flat_map(|f| {
            chunk_centroids(f.audio.samples(), spec.sample_rate)
                .into_iter()
                .map(move |c| (c, f.domain))
        })
        .collect();
    let (mut hits, mut total) = (0, 0);
    for f in load_training_files(&splits.test, &domains).unwrap() {
        for c in chunk_centroids(f.audio.samples(), spec.sample_rate) {
            let nearest = reference
                .iter()
                .min_by(|a, b| (a.0 - c).abs().total_cmp(&(b.0 - c).abs()))
                .unwrap()
                .1;
            hits += usize::from(nearest == f.domain);
            total += 1;
        }
    }
    let accuracy = hits as f64 / total as f64;
    println!("centroid 1-NN accuracy: {accuracy:.3} over {total} chunks");
    assert!(accuracy > 0.6, "{accuracy}");
}
