mod common;

use common::rng;
use kgamc::dataio::{read_dataset, split, write_dataset, Dataset, SignalFrame};
use kgamc::sigsyn::{
    add_awgn, frame_rng, mean_power, modulate_len, synth_dataset, synth_frame, ModulationClass, SynthConfig,
    SNR_NOISELESS,
};
use num_complex::Complex64;
use proptest::prelude::*;

fn frame_power(f: &SignalFrame) -> f64 {
    f.iq.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / (f.iq.len() / 2) as f64
}

#[test]
fn noiseless_frames_have_unit_power_per_class() {
    let cfg = SynthConfig {
        snr_grid: vec![SNR_NOISELESS],
        seed: 3,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg, 400).unwrap();
    for (k, name) in ds.classes.iter().enumerate() {
        let frames: Vec<&SignalFrame> = ds.frames.iter().filter(|f| f.label as usize == k).collect();
        let p = frames.iter().map(|f| frame_power(f)).sum::<f64>() / frames.len() as f64;
        assert!((0.95..=1.05).contains(&p), "{name}: {p}");
    }
}

#[test]
fn measured_snr_tracks_the_grid() {
    let cfg = SynthConfig::default();
    for &snr in &cfg.snr_grid {
        let mut r = rng((snr + 100) as u64);
        let clean = modulate_len(ModulationClass::Qam16, &cfg, 200_000, &mut r).unwrap();
        let noisy = add_awgn(&clean, snr as f64, &mut r).unwrap();
        let noise: Vec<Complex64> = noisy.iter().zip(&clean).map(|(a, b)| a - b).collect();
        let measured = 10.0 * (mean_power(&clean) / mean_power(&noise)).log10();
        assert!((measured - snr as f64).abs() < 0.5, "{snr}: {measured}");
    }
}

#[test]
fn frames_do_not_depend_on_generation_order() {
    let cfg = SynthConfig {
        snr_grid: vec![-4, 8],
        classes: vec![ModulationClass::Psk8, ModulationClass::Wbfm],
        seed: 17,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg, 6).unwrap();
    assert_eq!(ds.len(), 24);
    assert_eq!(ds.class_counts(), vec![12, 12]);
    let f = 6 * 3 + 2;
    let (label, class, snr) = (1u8, ModulationClass::Wbfm, 8);
    let again = synth_frame(class, label, snr, &cfg, &mut frame_rng(17, f as u64)).unwrap();
    assert_eq!(again, ds.frames[f]);
    assert_eq!(synth_dataset(&cfg, 6).unwrap(), ds);
    let other = synth_dataset(&SynthConfig { seed: 18, ..cfg }, 6).unwrap();
    assert_ne!(other.frames[0], ds.frames[0]);
}

#[test]
fn dataset_file_round_trip_is_bit_exact() {
    let cfg = SynthConfig {
        snr_grid: vec![-20, 0, 18],
        seed: 2,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.amcd");
    write_dataset(&ds, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), ds.encoded_len());
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.classes, ds.classes);
    assert_eq!(back.frames, ds.frames);
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 1usize..20, 0usize..12).prop_flat_map(|(m, l, n)| {
        let frame = (
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 2 * l),
            0..m as u8,
            -20i16..=18,
        )
            .prop_map(|(iq, label, snr_db)| SignalFrame { iq, label, snr_db });
        prop::collection::vec(frame, n).prop_map(move |frames| {
            let classes = (0..m).map(|i| format!("class_{i}")).collect();
            Dataset::new(classes, l, frames).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn encoding_round_trips(ds in arb_dataset()) {
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        for (a, b) in back.frames.iter().zip(&ds.frames) {
            prop_assert_eq!(a.iq.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.iq.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!((a.label, a.snr_db), (b.label, b.snr_db));
        }
    }

    #[test]
    fn split_partitions_every_cell(seed in 0u64..500, frac in 0.1f64..0.9) {
        let cfg = SynthConfig {
            frame_len: 16,
            samples_per_symbol: 4,
            snr_grid: vec![-2, 6],
            classes: vec![ModulationClass::Bpsk, ModulationClass::AmDsb],
            seed,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&cfg, 10).unwrap();
        let (tr, te) = split(&ds, frac, seed).unwrap();
        prop_assert_eq!(tr.len() + te.len(), ds.len());
        let want = (10.0 * frac).round() as usize;
        for label in 0..2u8 {
            for snr in [-2, 6] {
                let n = tr.frames.iter().filter(|f| f.label == label && f.snr_db == snr).count();
                prop_assert_eq!(n, want);
            }
        }
        for f in &te.frames {
            prop_assert!(!tr.frames.contains(f));
        }
    }
}
