use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfslam::filter::{Snapshot, StateEstimates};
use rfslam::io::*;
use rfslam::models::MtState;
use rfslam::neural::{AdamState, MapArchitecture, NeuralMap};
use rfslam::scenario::MeasurementFrame;
use rfslam::signal::{Calibration, SignalConfig};

fn c(rng: &mut ChaCha8Rng) -> Complex64 {
    // raw bit patterns include subnormals and signed zeros
    Complex64::new(f64::from_bits(rng.random()).clamp(-1e300, 1e300), rng.random_range(-1e3..1e3))
}

fn mt(rng: &mut ChaCha8Rng) -> MtState {
    MtState { position: [rng.random(), rng.random()], velocity: [rng.random(), -0.0], orientation: rng.random_range(-3.0..3.0) }
}

fn estimate(rng: &mut ChaCha8Rng, k: usize, j: usize) -> StateEstimates {
    StateEstimates {
        k,
        mt: mt(rng),
        los_gamma: (0..j).map(|i| if i % 2 == 0 { Some(rng.random::<f64>() * 1e-9) } else { None }).collect(),
        eta: (0..j).map(|_| rng.random()).collect(),
        visibility: (0..j).map(|_| rng.random()).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn measurements_round_trip(seed in any::<u64>(), j in 1usize..4, k in 0usize..6, mf in 1usize..5, ma in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let header = MeasurementHeader { bs_count: j, steps: k, freq_count: mf, antenna_count: ma };
        let frames: Vec<MeasurementFrame> = (1..=k).map(|k| MeasurementFrame { k, z: (0..j).map(|_| (0..mf * ma).map(|_| c(&mut rng)).collect()).collect() }).collect();
        let buf = encode_measurements(&header, &frames).unwrap();
        let (h2, f2) = decode_measurements(&buf).unwrap();
        prop_assert_eq!(h2, header);
        prop_assert_eq!(encode_measurements(&h2, &f2).unwrap(), buf.clone());
        // any truncation is rejected
        let cut = rng.random_range(0..buf.len());
        prop_assert!(decode_measurements(&buf[..cut]).is_err());
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), with_adam in any::<bool>(), with_cal in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = MapArchitecture { features: rng.random_range(1..4), encodings: rng.random_range(0..3), hidden1: 5, hidden2: 3, extent: 31.5, gamma_scale: 2.5e-9 };
        let map = NeuralMap::from_params(arch, (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let adam = with_adam.then(|| {
            let mut a = AdamState::with_lr(map.params.len(), 3e-4);
            let g: Vec<f64> = (0..map.params.len()).map(|_| rng.random()).collect();
            let mut p = map.params.clone();
            a.step(&mut p, &g).unwrap();
            a
        });
        let calibration = with_cal.then(|| {
            let cfg = SignalConfig::new(6e9, 20e6, 2e6, 2).unwrap();
            let mut cal = Calibration::identity(&cfg);
            let p: Vec<f64> = cal.to_params().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            cal.set_params(&p).unwrap();
            cal
        });
        let ck = Checkpoint { map, adam, calibration };
        let buf = encode_checkpoint(&ck);
        let back = decode_checkpoint(&buf).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back), buf);
    }

    #[test]
    fn snapshots_round_trip(seed in any::<u64>(), j in 1usize..4, k in 0usize..5, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snaps: Vec<Snapshot> = (1..=k)
            .map(|k| Snapshot {
                k,
                mt: (0..p).map(|_| mt(&mut rng)).collect(),
                los_gamma: (0..j).map(|_| (0..p).map(|_| rng.random()).collect()).collect(),
                eta: (0..j).map(|_| (0..p).map(|_| rng.random()).collect()).collect(),
                visibility: (0..j).map(|_| rng.random()).collect(),
                estimate: estimate(&mut rng, k, j),
            })
            .collect();
        let buf = encode_snapshots(j, &snaps).unwrap();
        let (j2, back) = decode_snapshots(&buf).unwrap();
        prop_assert_eq!(j2, j);
        prop_assert_eq!(back, snaps);
    }

    #[test]
    fn track_csv_round_trip(seed in any::<u64>(), j in 1usize..4, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<StateEstimates> = (0..k).map(|k| estimate(&mut rng, k, j)).collect();
        let text = track_csv(&rows);
        prop_assert_eq!(text.lines().count(), k + 1);
        prop_assert_eq!(parse_track_csv(&text).unwrap(), rows);
    }
}

#[test]
fn wrong_magic_and_version_are_rejected() {
    let header = MeasurementHeader { bs_count: 1, steps: 0, freq_count: 2, antenna_count: 1 };
    let buf = encode_measurements(&header, &[]).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(decode_measurements(&bad).is_err());
    let mut bad = buf.clone();
    bad[4] = 99;
    assert!(decode_measurements(&bad).is_err());
    assert!(decode_truth(&buf).is_err());
    let mut long = buf;
    long.push(0);
    assert!(decode_measurements(&long).is_err());
}
