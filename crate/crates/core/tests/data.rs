use bite_core::data::{
    band_power, load_weights, read_archive, read_trials, read_trials_from, save_weights, synth_mi, synth_ssvep,
    write_trials, write_trials_to, Alignment, MiSynth, SsvepSynth, Trial, TrialSet, WeightArchive, HEADER_LEN,
    TRIAL_OVERHEAD,
};
use bite_core::model::{BiteConfig, BiteModel};
use bite_core::signal::{stft_magnitude, StftPlan};
use bite_core::tensor::Tensor;
use bite_core::BiteError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_set() -> impl Strategy<Value = TrialSet> {
    (1usize..5, 1usize..24, 1usize..6, prop::sample::select(vec![100.0f64, 128.0, 250.0, 256.0, 333.3]))
        .prop_flat_map(|(c, t, k, fs)| {
            let trial = (
                any::<u16>(),
                prop::option::of("[a-zA-Z0-9_]{0,12}"),
                0..k,
                prop::collection::vec(-1e4f64..1e4, c * t),
            )
                .prop_map(move |(subject, session, label, data)| Trial {
                    subject,
                    session,
                    label,
                    signal: Tensor::new([c, t], data).unwrap(),
                });
            prop::collection::vec(trial, 1..8).prop_map(move |trials| TrialSet { fs, n_classes: k, trials })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trial_sets_roundtrip_at_f32_precision(set in arb_set()) {
        let mut bytes = Vec::new();
        write_trials_to(&mut bytes, &set).unwrap();
        let tags: usize = set.trials.iter().map(|t| t.session.as_ref().map_or(0, String::len)).sum();
        let payload = set.len() * 4 * set.channels() * set.samples();
        prop_assert_eq!(bytes.len(), HEADER_LEN + set.len() * TRIAL_OVERHEAD + tags + payload);
        let back = read_trials_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &set.quantized());
        // a second trip is exact
        let mut again = Vec::new();
        write_trials_to(&mut again, &back).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn corrupted_headers_are_rejected_with_offsets(set in arb_set(), cut in 0usize..HEADER_LEN) {
        let mut bytes = Vec::new();
        write_trials_to(&mut bytes, &set).unwrap();
        match read_trials_from(&bytes[..cut]).unwrap_err() {
            BiteError::BadMagic { offset, .. } => prop_assert_eq!(offset, 0),
            BiteError::Truncated { offset, .. } => prop_assert!(offset as usize <= cut),
            other => prop_assert!(false, "unexpected {other}"),
        }
        let mut wrong = bytes.clone();
        wrong[1] ^= 0x20;
        let is_bad_magic = matches!(read_trials_from(wrong.as_slice()), Err(BiteError::BadMagic { offset: 0, .. }));
        prop_assert!(is_bad_magic);
        let mut future = bytes.clone();
        future[4] = 2;
        let is_bad_version = matches!(read_trials_from(future.as_slice()), Err(BiteError::UnsupportedVersion { offset: 4, version: 2 }));
        prop_assert!(is_bad_version);
    }
}

fn small_set() -> TrialSet {
    let trials = (0..3)
        .map(|i| Trial {
            subject: i as u16,
            session: None,
            label: i % 2,
            signal: Tensor::from_fn([2, 5], |j| (i * 10 + j) as f64 * 0.25),
        })
        .collect();
    TrialSet::new(128.0, 2, trials).unwrap()
}

#[test]
fn tagless_layout_and_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bite");
    let set = small_set();
    write_trials(&path, &set).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(HEADER_LEN, 22);
    assert_eq!(bytes.len(), 22 + 3 * (5 + 40));
    assert_eq!(read_trials(&path).unwrap(), set);

    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let err = read_trials(&path).unwrap_err();
    assert!(matches!(err, BiteError::Truncated { expected: 40, actual: 30, .. }), "{err}");
    assert!(err.to_string().contains("offset"));

    let mut bad_label = bytes.clone();
    let label_at = HEADER_LEN + TRIAL_OVERHEAD + 40 + 2;
    bad_label[label_at] = 7;
    std::fs::write(&path, &bad_label).unwrap();
    match read_trials(&path).unwrap_err() {
        BiteError::LabelOutOfRange { offset, label: 7, n_classes: 2 } => assert_eq!(offset as usize, label_at),
        other => panic!("{other}"),
    }

    let missing = dir.path().join("nope.bite");
    let err = read_trials(&missing).unwrap_err();
    assert!(err.is_data_error() && err.to_string().contains("nope.bite"));
}

fn tiny_model(seed: u64) -> BiteModel {
    BiteModel::new(bite_core::verify::tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn weights_roundtrip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bitw");
    let mut model = tiny_model(1);
    // make the running statistics non-trivial
    model.params_mut()[0].value.data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
    let whitener = Tensor::from_fn([3, 3], |i| 1.0 / (i as f64 + 1.5));
    save_weights(&path, &model, Alignment::Whitener(whitener.clone())).unwrap();
    let (loaded, alignment) = load_weights(&path, model.config()).unwrap();
    assert_eq!(alignment, Alignment::Whitener(whitener));
    for (a, b) in model.params().iter().zip(loaded.params()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(model.running_stats(), loaded.running_stats());
    let archive = read_archive(&path).unwrap();
    assert_eq!(archive.params.len(), model.params().len());

    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn([3, 64], |_| r.random_range(-1.0..1.0));
    let batch = model.prepare_batch(&[&x]).unwrap();
    let before = model.predict_logits(&batch).unwrap();
    let after = loaded.predict_logits(&batch).unwrap();
    assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn archive_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bitw");
    let model = tiny_model(3);
    save_weights(&path, &model, Alignment::FitOnInput).unwrap();
    let other = BiteConfig { n_classes: 5, ..model.config().clone() };
    match load_weights(&path, &other).unwrap_err() {
        BiteError::ConfigMismatch { field, .. } => assert_eq!(field, "n-classes"),
        e => panic!("{e}"),
    }
    let other = BiteConfig { tcn_kernel: 4, dropout: 0.1, ..model.config().clone() };
    let err = load_weights(&path, &other).unwrap_err().to_string();
    assert!(err.contains("tcn-kernel"), "{err}");
}

#[test]
fn damaged_archives_are_data_errors() {
    let model = tiny_model(4);
    let bytes = WeightArchive::from_model(&model, Alignment::None).encode().unwrap();
    assert_eq!(&bytes[..4], b"BITW");
    assert_eq!(WeightArchive::decode(&bytes).unwrap().into_model().unwrap().0.params(), model.params());
    for cut in [0, 3, 7, 40, bytes.len() - 1] {
        assert!(WeightArchive::decode(&bytes[..cut]).unwrap_err().is_data_error());
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(WeightArchive::decode(&extra), Err(BiteError::Malformed { .. })));
}

#[test]
fn ssvep_counts_and_determinism() {
    let p = SsvepSynth { subjects: 2, trials_per_class: 5, ..Default::default() };
    let a = synth_ssvep(&p).unwrap();
    assert_eq!(a.len(), 120);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    write_trials_to(&mut x, &a).unwrap();
    write_trials_to(&mut y, &synth_ssvep(&p).unwrap()).unwrap();
    assert_eq!(x, y);
    let mut z = Vec::new();
    write_trials_to(&mut z, &synth_ssvep(&SsvepSynth { seed: 7, ..p }).unwrap()).unwrap();
    assert_ne!(x, z);
}

#[test]
fn ssvep_high_snr_peaks_at_class_bin() {
    // frequencies on the 8 Hz grid of a 32-sample window at 256 Hz
    let freqs: Vec<f64> = (2..=7).map(|k| 8.0 * k as f64).collect();
    let p = SsvepSynth { subjects: 1, trials_per_class: 3, class_freqs: freqs.clone(), snr: 1e6, ..Default::default() };
    let set = synth_ssvep(&p).unwrap();
    let plan = StftPlan::new(256.0, 32, (8.0, 64.0)).unwrap();
    let (mut hits, mut frames) = (0, 0);
    for trial in &set.trials {
        let spec = stft_magnitude(&trial.signal, &plan).unwrap().values;
        let want = (freqs[trial.label] / 8.0) as usize;
        for ch in 0..set.channels() {
            for t in 16..set.samples() - 16 {
                let best = (0..plan.n_bins()).max_by(|&a, &b| spec.get(&[a, ch, t]).total_cmp(&spec.get(&[b, ch, t]))).unwrap();
                hits += usize::from(plan.bins()[best] == want);
                frames += 1;
            }
        }
    }
    assert!(hits as f64 / frames as f64 > 0.99, "{hits}/{frames}");
}

/// Classifies each trial by the class frequency with the largest full-trial
/// DFT magnitude summed over channels.
fn argmax_accuracy(set: &TrialSet, freqs: &[f64]) -> f64 {
    let t = set.samples();
    let score = |trial: &Trial, f: f64| -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / set.fs;
        (0..set.channels())
            .map(|c| {
                let row = &trial.signal.data()[c * t..(c + 1) * t];
                let (re, im) = row.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &x)| {
                    (re + x * (w * n as f64).cos(), im - x * (w * n as f64).sin())
                });
                re.hypot(im)
            })
            .sum()
    };
    let correct = set
        .trials
        .iter()
        .filter(|trial| {
            let best = (0..freqs.len()).max_by(|&a, &b| score(trial, freqs[a]).total_cmp(&score(trial, freqs[b]))).unwrap();
            best == trial.label
        })
        .count();
    correct as f64 / set.len() as f64
}

#[test]
fn ssvep_is_separable_by_spectral_argmax() {
    let p = SsvepSynth::default();
    let set = synth_ssvep(&p).unwrap();
    let acc = argmax_accuracy(&set, &p.class_freqs);
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn ssvep_rejects_unresolvable_frequencies() {
    let above = SsvepSynth { class_freqs: vec![10.0, 130.0], ..Default::default() };
    assert!(matches!(synth_ssvep(&above), Err(BiteError::Config(_))));
    let close = SsvepSynth { class_freqs: vec![10.0, 10.4, 20.0], ..Default::default() };
    assert!(synth_ssvep(&close).is_err());
}

#[test]
fn mi_boosted_channels_carry_more_band_power() {
    let p = MiSynth::default();
    let set = synth_mi(&p).unwrap();
    let (mut boosted, mut idle, mut nb, mut ni) = (0.0, 0.0, 0, 0);
    for trial in &set.trials {
        for ch in 0..p.channels {
            let row = &trial.signal.data()[ch * p.samples..(ch + 1) * p.samples];
            let power = band_power(row, p.fs, 8.0, 30.0);
            if ch % p.n_classes == trial.label {
                boosted += power;
                nb += 1;
            } else {
                idle += power;
                ni += 1;
            }
        }
    }
    let ratio = (boosted / nb as f64) / (idle / ni as f64);
    assert!(ratio > 2.0, "ratio {ratio}");
}

#[test]
fn mi_determinism_and_preconditions() {
    let p = MiSynth { subjects: 1, trials_per_class: 2, ..Default::default() };
    assert_eq!(synth_mi(&p).unwrap(), synth_mi(&p).unwrap());
    assert_ne!(synth_mi(&p).unwrap(), synth_mi(&MiSynth { seed: 1, ..p.clone() }).unwrap());
    assert!(synth_mi(&MiSynth { trials_per_class: 0, ..p.clone() }).is_err());
    assert!(synth_mi(&MiSynth { channels: 3, n_classes: 4, ..p }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generators_are_finite(seed in any::<u64>()) {
        let s = synth_ssvep(&SsvepSynth { subjects: 1, trials_per_class: 1, seed, ..Default::default() }).unwrap();
        let m = synth_mi(&MiSynth { subjects: 1, trials_per_class: 1, seed, ..Default::default() }).unwrap();
        prop_assert!(s.trials.iter().chain(&m.trials).all(|t| t.signal.is_finite()));
    }
}
