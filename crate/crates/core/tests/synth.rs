mod common;
use common::at_20db;
use std::f64::consts::PI;

use cardioalign::signal::{detect_r_peaks, wavelet_denoise, zscore_normalize, RPeakConfig};
use cardioalign::synth::{
    gen_dataset, gen_subject, read_dataset, sample_latent, write_dataset, PhenotypeVector, SubjectLatent, SynthConfig,
    CONTRACTION_RANGE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ef_mean_matches_latent_distribution() {
    let subjects = gen_dataset(256, 7).unwrap();
    let mean = subjects.iter().map(|s| s.phenotypes.ef).sum::<f64>() / 256.0;

    // Monte-Carlo over the latent distribution, independent of the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 200_000;
    let mc = (0..trials)
        .map(|_| {
            let c: f64 = rng.random_range(CONTRACTION_RANGE.0..CONTRACTION_RANGE.1);
            1.0 - (1.0 - c).powi(2)
        })
        .sum::<f64>()
        / trials as f64;
    // Closed form: 1 - E[(1-c)^2] with 1-c ~ U[0.5, 0.8].
    let analytic = 1.0 - (0.8f64.powi(3) - 0.5f64.powi(3)) / (3.0 * 0.3);
    assert!((mc - analytic).abs() < 2e-3, "{mc} vs {analytic}");
    assert!((mean - mc).abs() <= 0.05, "sample mean {mean} vs {mc}");
}

#[test]
fn phenotype_invariants_hold_for_every_subject() {
    for s in gen_dataset(64, 3).unwrap() {
        let p = s.phenotypes;
        assert_eq!(p.sv, p.edv - p.esv);
        assert!(p.edv > p.esv && p.esv >= 0.0);
        assert!(p.ef > 0.0 && p.ef < 1.0);
        assert_eq!(p, PhenotypeVector::from_latent(&s.latent));
        let area = |f: usize| s.cmr.frame(f).iter().sum::<f64>();
        if s.latent.noise_level == 0.0 {
            for f in 1..s.cmr.n_frames() {
                assert!(area(0) >= area(f));
            }
        }
    }
}

#[test]
fn frame_zero_has_largest_disc() {
    for i in 0..16 {
        let mut l = sample_latent(5, i);
        l.noise_level = 0.0;
        let s = gen_subject(&l).unwrap();
        let bright = |f: usize| s.cmr.frame(f).iter().filter(|&&v| v > 0.5).count();
        for f in 1..s.cmr.n_frames() {
            assert!(bright(0) >= bright(f), "subject {i} frame {f}");
        }
    }
}

#[test]
fn pixel_count_area_matches_analytic() {
    for r in [8.0, 9.5, 11.0, 13.3, 16.0] {
        let l = SubjectLatent { heart_rate_bpm: 60.0, base_radius: r, contraction_frac: 0.3, noise_level: 0.0, phase_offset: 0.0, seed: 1 };
        let s = gen_subject(&l).unwrap();
        let count = s.cmr.frame(0).iter().filter(|&&v| v > 0.5).count() as f64;
        let want = PI * r * r;
        assert!((count - want).abs() / want < 0.05, "r={r}: {count} vs {want}");
    }
}

#[test]
fn true_r_peak_spacing_matches_heart_rate() {
    for i in 0..32 {
        let s = gen_subject(&sample_latent(21, i)).unwrap();
        let expect = 60.0 / s.latent.heart_rate_bpm * s.ecg.rate_hz();
        for w in s.true_r_peaks.indices().windows(2) {
            assert!(((w[1] - w[0]) as f64 - expect).abs() <= 1.0);
        }
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let subjects = gen_dataset(3, 42).unwrap();
    write_dataset(dir.path(), &subjects, 42, &cfg).unwrap();
    let (m, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m.n, 3);
    assert_eq!(m.master_seed, 42);
    for (a, b) in subjects.iter().zip(&back) {
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.phenotypes, b.phenotypes);
        assert_eq!(a.true_r_peaks, b.true_r_peaks);
        for (x, y) in a.cmr.data().iter().zip(b.cmr.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("phenotypes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(gen_dataset(3, 42).unwrap(), subjects);
}

#[test]
fn detector_recovers_generator_peaks() {
    for i in 0..20 {
        let mut l = sample_latent(1234, i);
        l.noise_level = 0.0;
        let s = gen_subject(&l).unwrap();
        let sig = zscore_normalize(&wavelet_denoise(&at_20db(&s.ecg, i as u64), 8).unwrap()).unwrap();
        let found = detect_r_peaks(&sig, "II", &RPeakConfig::default()).unwrap();
        let truth = s.true_r_peaks.indices();
        assert_eq!(found.len(), truth.len(), "subject {i}: {:?} vs {:?}", found.indices(), truth);
        for (f, t) in found.indices().iter().zip(truth) {
            assert!((*f as i64 - *t as i64).abs() <= 5, "subject {i}: {f} vs {t}");
        }
    }
}
