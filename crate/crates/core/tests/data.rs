use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use proptest::prelude::*;
use psagan::data::*;
use psagan::Error;
use psagan_tensor::{SeededRng, Tensor};

fn stamp(y: i32, m: u32, d: u32, h: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(y, m, d)
        .unwrap()
        .and_hms_opt(h, 0, 0)
        .unwrap()
}

fn panel(n: usize, len: usize, train_len: usize) -> SeriesPanel {
    synthetic_panel(&SyntheticSpec {
        n_series: n,
        len,
        ..Default::default()
    })
    .unwrap()
    .with_train_len(train_len)
    .unwrap()
}

#[test]
fn calendar_features_at_known_stamps() {
    let monday = stamp(2021, 1, 4, 0);
    let c = time_feature_column(monday, 0);
    assert_eq!(c[0], -0.5);
    assert_eq!(c[1], -0.5);
    assert!((c[4] - std::f32::consts::LN_2).abs() < 1e-6);
    assert!((c[4] - 0.6931).abs() < 1e-4);
    assert_eq!(time_feature_column(monday, 23)[0], 0.5);
    let sunday = time_feature_column(monday, 6 * 24);
    assert_eq!(sunday[1], 0.5);
    let jan1 = time_feature_column(stamp(2021, 1, 1, 5), 0);
    assert_eq!(jan1[2], -0.5);
    assert_eq!(jan1[3], -0.5);
    let dec31_leap = time_feature_column(stamp(2020, 12, 31, 0), 0);
    assert_eq!(dec31_leap[3], 0.5);
    assert_eq!(time_feature_column(stamp(2021, 1, 31, 0), 0)[2], 0.5);
}

#[test]
fn calendar_rows_stay_in_range_for_ten_years() {
    let start = stamp(2015, 3, 7, 13);
    let hours = 10 * 366 * 24;
    let mut last_age = f32::NEG_INFINITY;
    for t in 0..hours {
        let c = time_feature_column(start, t);
        assert!(
            c[..4].iter().all(|v| (-0.5..=0.5).contains(v)),
            "{t}: {c:?}"
        );
        assert!(c[4] > last_age);
        last_age = c[4];
    }
}

#[test]
fn feature_matrix_is_row_major() {
    let start = stamp(2021, 1, 4, 0);
    let m = time_features(start, 10, 7);
    assert_eq!(m.len(), TIME_FEATURES * 7);
    for j in 0..7 {
        let col = time_feature_column(start, 10 + j);
        for d in 0..TIME_FEATURES {
            assert_eq!(m[d * 7 + j], col[d]);
        }
    }
}

fn two_series_jsonl() -> String {
    let mut s = String::new();
    for k in 0..2 {
        let target: Vec<f64> = (0..48).map(|t| (t * (k + 1)) as f64 * 0.5).collect();
        s += &serde_json::json!({"item_id": format!("s{k}"), "start": "2021-01-04 00:00:00", "target": target}).to_string();
        s.push('\n');
    }
    s
}

#[test]
fn json_lines_and_csv_agree() {
    let p = load_json_lines(two_series_jsonl().as_bytes()).unwrap();
    assert_eq!((p.n_series(), p.len()), (2, 48));
    assert_eq!(p.start, stamp(2021, 1, 4, 0));
    let mut csv = Vec::new();
    write_csv(&p, &mut csv).unwrap();
    let q = load_csv(csv.as_slice()).unwrap();
    assert_eq!(p, q);
    let mut jl = Vec::new();
    write_json_lines(&q, &mut jl).unwrap();
    assert_eq!(load_json_lines(jl.as_slice()).unwrap(), p);
}

#[test]
fn load_panel_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    std::fs::write(&path, two_series_jsonl()).unwrap();
    let p = load_panel(&path, "jsonl".parse().unwrap()).unwrap();
    assert_eq!(p.n_series(), 2);
    assert!("parquet".parse::<Format>().is_err());
    assert!(load_panel(&dir.path().join("absent.csv"), Format::Csv).is_err());
}

#[test]
fn missing_hour_names_the_timestamp() {
    let csv = "series_id,timestamp,value\na,2021-01-01 00:00:00,1\na,2021-01-01 01:00:00,2\na,2021-01-01 03:00:00,3\n";
    let err = load_csv(csv.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("2021-01-01 02:00:00"), "{err}");
}

#[test]
fn duplicate_and_non_numeric_rows_are_rejected() {
    let dup = "series_id,timestamp,value\na,2021-01-01 00:00:00,1\na,2021-01-01 00:00:00,2\n";
    assert!(matches!(load_csv(dup.as_bytes()), Err(Error::Ingest(m)) if m.contains("duplicate")));
    let bad = "series_id,timestamp,value\na,2021-01-01 00:00:00,1\na,2021-01-01 01:00:00,abc\n";
    match load_csv(bad.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let bad_json = "{\"start\": \"2021-01-01\", \"target\": [1, \"x\"]}\n";
    assert!(matches!(
        load_json_lines(bad_json.as_bytes()),
        Err(Error::Parse { line: 1, .. })
    ));
    let mismatched =
        "series_id,timestamp,value\na,2021-01-01 00:00:00,1\nb,2021-01-01 01:00:00,2\n";
    assert!(load_csv(mismatched.as_bytes()).is_err());
}

#[test]
fn minmax_maps_endpoints() {
    let p = SeriesPanel::new(
        vec!["a".into()],
        stamp(2021, 1, 1, 0),
        vec![vec![0.0, 5.0, 10.0, 20.0]],
    )
    .unwrap()
    .with_train_len(3)
    .unwrap();
    let (s, scaler) = minmax_scale(&p, false).unwrap();
    assert_eq!(s.values[0], [0.0, 0.5, 1.0, 2.0]);
    assert_eq!(scaler.inverse(&s).unwrap(), p);
    let flat =
        SeriesPanel::new(vec!["a".into()], stamp(2021, 1, 1, 0), vec![vec![3.0; 4]]).unwrap();
    assert!(matches!(
        minmax_scale(&flat, false),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn global_and_per_series_scaling_differ() {
    let p = panel(3, 200, 150);
    let (g, gs) = minmax_scale(&p, false).unwrap();
    let (s, ss) = minmax_scale(&p, true).unwrap();
    assert!(!gs.per_series() && ss.per_series());
    let lo = |v: &[f64]| v[..150].iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v[..150].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in &s.values {
        assert!(lo(v).abs() < 1e-12 && (hi(v) - 1.0).abs() < 1e-12);
    }
    assert!(
        g.values
            .iter()
            .map(|v| lo(v))
            .fold(f64::INFINITY, f64::min)
            .abs()
            < 1e-12
    );
    let pairs: std::collections::BTreeMap<_, _> = ss.to_pairs().into_iter().collect();
    let back = MinMaxScaler::from_pairs(|k| pairs.get(k).cloned()).unwrap();
    assert_eq!(back, ss);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_round_trips(values in prop::collection::vec(-1e4f64..1e4, 3..40)) {
        let n = values.len();
        prop_assume!(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > values.iter().cloned().fold(f64::INFINITY, f64::min) + 1e-3);
        let p = SeriesPanel::new(vec!["a".into()], stamp(2021, 1, 1, 0), vec![values.clone()]).unwrap();
        let (s, scaler) = minmax_scale(&p, false).unwrap();
        prop_assert!(s.values[0].iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        let back = scaler.inverse(&s).unwrap();
        for (a, b) in back.values[0].iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        prop_assert_eq!(back.values[0].len(), n);
    }

    #[test]
    fn mix_is_linear(seed in 0u64..500, a in 0.1f32..5.0) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::rand_uniform(&[2, 1, 8], -1.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(&[2, 1, 8], -1.0, 1.0, &mut rng);
        let lhs = augmentation_mix(&x.scale(a), &y.scale(a)).unwrap().to_vec();
        let rhs = augmentation_mix(&x, &y).unwrap().scale(a).to_vec();
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() <= 1e-5 * r.abs().max(1.0));
        }
    }
}

#[test]
fn mix_examples() {
    let mut rng = SeededRng::new(0);
    let x = Tensor::rand_uniform(&[3, 1, 16], 0.0, 1.0, &mut rng);
    assert_eq!(augmentation_mix(&x, &x).unwrap().to_vec(), x.to_vec());
    let m = augmentation_mix(&Tensor::zeros(&[2, 1, 4]), &Tensor::full(&[2, 1, 4], 1.0)).unwrap();
    assert!(m.to_vec().iter().all(|&v| v == 0.5));
    assert!(augmentation_mix(&x, &Tensor::zeros(&[3, 1, 8])).is_err());
}

#[test]
fn far_forecast_masks_thirty_two_per_window() {
    let p = panel(4, 400, 400 - 7 * 32);
    let sc = make_far_forecast_scenario(&p, 32, 7).unwrap();
    assert_eq!(sc.windows.len(), 7);
    for w in 0..7 {
        for i in 0..4 {
            assert_eq!(sc.masked_points(w, i), 32 * w);
        }
        let mask = sc.input_mask(w);
        assert_eq!(mask[0].len(), sc.windows[w].start);
        assert!(mask[0][..p.train_len].iter().all(|&o| o));
    }
    assert_eq!(sc.masked_points(6, 0), 192);
    assert_eq!(sc.missing_fraction, 0.0);
    assert!(make_far_forecast_scenario(&panel(2, 300, 200), 32, 7).is_err());
}

#[test]
fn stretch_fractions_land_in_bands() {
    let p = panel(20, 2400 + 7 * 32, 2400);
    for (len, lo, hi) in [(50, 0.054, 0.077), (110, 0.099, 0.169)] {
        for seed in 0..3 {
            let sc = make_stretch_scenario(&p, len, None, 7, seed).unwrap();
            assert!(
                (lo..=hi).contains(&sc.missing_fraction),
                "len {len}: {}",
                sc.missing_fraction
            );
            for m in &sc.observed {
                assert!(m[..1200].iter().all(|&o| o));
                assert!(m[2400..].iter().all(|&o| o));
                let mut t = 0;
                while t < m.len() {
                    if !m[t] {
                        let run = m[t..].iter().take_while(|&&o| !o).count();
                        assert_eq!(run, len);
                        t += run;
                    } else {
                        t += 1;
                    }
                }
            }
            assert_eq!(sc, make_stretch_scenario(&p, len, None, 7, seed).unwrap());
        }
    }
    assert!(make_stretch_scenario(&panel(2, 400, 150), 110, None, 7, 0).is_err());
    assert!(make_stretch_scenario(&p, 70, None, 7, 0).is_err());
}

#[test]
fn cold_start_keeps_last_day() {
    let p = panel(10, 500, 400);
    for (fraction, k) in [(0.1, 1), (0.2, 2), (0.3, 3)] {
        let sc = make_cold_start_scenario(&p, fraction, 4).unwrap();
        assert_eq!(sc.cold_start.len(), k);
        assert_eq!(sc.windows.len(), 1);
        for (i, m) in sc.observed.iter().enumerate() {
            let seen = m[..400].iter().filter(|&&o| o).count();
            if sc.cold_start.contains(&i) {
                assert_eq!(seen, COLD_START_KEEP);
                assert!(m[400 - COLD_START_KEEP..400].iter().all(|&o| o));
            } else {
                assert_eq!(seen, 400);
            }
        }
        assert_eq!(sc.manifest(&p).cold_start_ids.len(), k);
    }
    assert!(make_cold_start_scenario(&p, 0.05, 0).is_err());
}

#[test]
fn scenario_manifest_serialises() {
    let p = panel(10, 500, 400);
    let sc = make_cold_start_scenario(&p, 0.2, 1).unwrap();
    let json = serde_json::to_value(sc.manifest(&p)).unwrap();
    assert_eq!(json["kind"], "cold_start");
    assert_eq!(json["cold_start_ids"].as_array().unwrap().len(), 2);
    let back: ScenarioManifest = serde_json::from_value(json).unwrap();
    assert_eq!(back, sc.manifest(&p));
}

#[test]
fn sampler_skips_hidden_windows() {
    let p = panel(2, 100, 100);
    let mut observed = vec![vec![true; 100]; 2];
    observed[0][40] = false;
    let s = WindowSampler::new(&p, 16, 100, Some(&observed)).unwrap();
    assert_eq!(s.admissible(), 2 * 85 - 16);
    assert!(s
        .pairs()
        .iter()
        .all(|&(i, t)| i == 1 || t + 16 <= 40 || t > 40));
    let mut rng = SeededRng::new(3);
    let d = s.sample_distinct(50, &mut rng);
    let mut sorted = d.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 50);
    assert!(WindowSampler::new(&p, 128, 100, None).is_err());
}

#[test]
fn aligned_batch_shares_indices_and_features() {
    let p = panel(3, 300, 300);
    let s = WindowSampler::new(&p, 32, 300, None).unwrap();
    let mut rng = SeededRng::new(1);
    let b = AlignedBatch::draw(&p, &s, 5, 0, None, &mut rng).unwrap();
    assert_eq!(b.real.shape(), [5, 1, 32]);
    assert_eq!(b.features.shape(), [5, TIME_FEATURES, 32]);
    assert_eq!(b.noise.shape(), [5, 1, 32]);
    let real = b.real.to_vec();
    let feats = b.features.to_vec();
    for k in 0..5 {
        let (i, t) = (b.series[k], b.starts[k]);
        for j in 0..32 {
            assert_eq!(real[k * 32 + j], p.values[i][t + j] as f32);
        }
        assert_eq!(
            &feats[k * TIME_FEATURES * 32..(k + 1) * TIME_FEATURES * 32],
            &p.features(t, 32)[..]
        );
    }
}

#[test]
fn context_is_left_padded() {
    let p = panel(1, 200, 200);
    let ctx = context_for(&p, None, &[(0, 10), (0, 100)], 64).unwrap();
    let (v, m) = (ctx.values.to_vec(), ctx.mask.to_vec());
    assert!(m[..54].iter().all(|&x| x == 0.0) && m[54..64].iter().all(|&x| x == 1.0));
    assert!(v[..54].iter().all(|&x| x == 0.0));
    assert_eq!(v[63], p.values[0][9] as f32);
    assert!(m[64..].iter().all(|&x| x == 1.0));
    assert_eq!(v[64], p.values[0][36] as f32);
}

#[test]
fn synthetic_panel_is_seeded() {
    let spec = SyntheticSpec::default();
    let a = synthetic_panel(&spec).unwrap();
    assert_eq!(a, synthetic_panel(&spec).unwrap());
    assert_eq!((a.n_series(), a.len()), (20, 2000));
    assert_eq!(a.start.weekday(), chrono::Weekday::Mon);
    assert_eq!(a.timestamp(25), a.start + Duration::hours(25));
    assert_eq!(a.timestamp(25).hour(), 1);
    let b = synthetic_panel(&SyntheticSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.values, b.values);
}

#[test]
fn split_by_timestamp() {
    let p = panel(2, 100, 100);
    let q = p.clone().with_split(p.start + Duration::hours(60)).unwrap();
    assert_eq!(q.train_len, 60);
    assert!(p
        .clone()
        .with_split(p.start + Duration::hours(500))
        .is_err());
    assert!(p.with_train_len(0).is_err());
}
