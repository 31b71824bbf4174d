use std::collections::BTreeSet;
use std::fs;

use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("P{i:02}")).collect()
}

#[test]
fn hu_window_endpoints() {
    assert_eq!(normalize_hu_value(-1024.0), 0.0);
    assert_eq!(normalize_hu_value(3072.0), 1.0);
    assert_eq!(normalize_hu_value(1024.0), 0.5);
    assert_eq!(normalize_hu_value(-3000.0), 0.0);
    assert_eq!(normalize_hu_value(5000.0), 1.0);
    let t = Tensor::new(&[3], vec![-1024.0, 0.0, 3072.0]).unwrap();
    assert_eq!(normalize_hu(&t).data(), &[0.0, 0.25, 1.0]);
}

#[test]
fn anchors_drop_trailing_margin() {
    assert_eq!(patch_anchors(128, 128, 96, 96).unwrap(), vec![(0, 0)]);
    assert_eq!(patch_anchors(64, 64, 32, 32).unwrap(), vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
    assert_eq!(patch_anchors(10, 7, 4, 3).unwrap(), vec![(0, 0), (0, 3), (3, 0), (3, 3), (6, 0), (6, 3)]);
    assert!(patch_anchors(10, 10, 11, 1).is_err());
    assert!(patch_anchors(10, 10, 4, 0).is_err());
}

#[test]
fn patches_cover_the_right_pixels() {
    let slices = Tensor::from_fn(&[2, 1, 6, 6], |i| i as f64 / 72.0);
    let vol = PatientVolume::new("A", slices.clone(), Dose::Normal, Provenance::Phantom).unwrap();
    let patches = extract_patches(&vol, 3, 3).unwrap();
    assert_eq!(patches.len(), 8);
    // second slice, anchor (3, 0): rows 3..6, cols 0..3
    let p = &patches[6];
    let want: Vec<f64> = (3..6).flat_map(|r| (0..3).map(move |c| (36 + r * 6 + c) as f64 / 72.0)).collect();
    assert_eq!(p.data(), &want[..]);
}

#[test]
fn ten_patients_split_seven_one_two() {
    let s = assign_splits(&ids(10), SplitFractions::default(), 5).unwrap();
    assert_eq!(s.patients(Split::Train).len(), 7);
    assert_eq!(s.patients(Split::Validation).len(), 1);
    assert_eq!(s.patients(Split::Test).len(), 2);
    s.assert_no_leakage().unwrap();
    let six = assign_splits(&ids(6), SplitFractions::default(), 5).unwrap();
    assert_eq!(
        [Split::Train, Split::Validation, Split::Test].map(|x| six.patients(x).len()),
        [4, 1, 1]
    );
}

#[test]
fn split_rejects_tiny_or_duplicate_cohorts() {
    assert!(assign_splits(&ids(2), SplitFractions::default(), 0).is_err());
    let mut dup = ids(5);
    dup[4] = dup[0].clone();
    assert!(assign_splits(&dup, SplitFractions::default(), 0).is_err());
}

#[test]
fn overlapping_manifest_is_leakage() {
    let m = SplitManifest {
        train: vec!["A".into(), "B".into()],
        validation: vec!["C".into()],
        test: vec!["B".into()],
    };
    let err = SplitAssignment::from_manifest(&m).unwrap_err();
    assert!(matches!(err, Error::Leakage(_)));
    assert_eq!(err.exit_code(), 4);
    let empty = SplitManifest { train: vec!["A".into()], validation: vec![], test: vec!["B".into()] };
    assert!(matches!(SplitAssignment::from_manifest(&empty), Err(Error::Config(_))));
}

#[test]
fn phantom_is_deterministic_and_paired() {
    let d = DoseParams::default();
    let (lo1, hi1) = generate_phantom_patient("P00", 11, 3, 32, 32, d).unwrap();
    let (lo2, hi2) = generate_phantom_patient("P00", 11, 3, 32, 32, d).unwrap();
    assert_eq!(lo1, lo2);
    assert_eq!(hi1, hi2);
    let (lo3, _) = generate_phantom_patient("P00", 12, 3, 32, 32, d).unwrap();
    assert_ne!(lo1, lo3);
    assert_eq!(lo1.slices.shape(), &[3, 1, 32, 32]);
    assert_ne!(lo1.slices, hi1.slices);

    let (lo, hi) = generate_phantom_patient("P00", 11, 3, 32, 32, DoseParams::noiseless()).unwrap();
    assert_eq!(lo.slices, hi.slices);
    assert_eq!(hi.slices, hi1.slices);
}

#[test]
fn phantom_noise_grows_with_dose_reduction() {
    let mse = |kappa: f64, sigma_g: f64| {
        let (lo, hi) = generate_phantom_patient("P", 3, 2, 48, 48, DoseParams { kappa, sigma_g }).unwrap();
        crate::loss::mse_value(&lo.slices, &hi.slices).unwrap()
    };
    let (a, b, c) = (mse(1e-3, 0.005), mse(3e-3, 0.012), mse(1e-2, 0.03));
    assert!(0.0 < a && a < b && b < c);
}

#[test]
fn phantom_argument_checks() {
    assert!(generate_phantom_patient("P", 0, 1, 16, 32, DoseParams::default()).is_err());
    assert!(generate_phantom_patient("P", 0, 0, 32, 32, DoseParams::default()).is_err());
    assert!(generate_phantom_patient("P", 0, 1, 32, 32, DoseParams { kappa: -1.0, sigma_g: 0.0 }).is_err());
}

#[test]
fn volume_round_trip_and_bad_bytes() {
    let (lo, _) = generate_phantom_patient("P07", 1, 2, 32, 32, DoseParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.pvol");
    write_volume(&path, &lo).unwrap();
    assert_eq!(read_volume(&path).unwrap().slices, lo.slices);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], VOLUME_MAGIC);
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(read_volume(&path), Err(Error::Format { .. })));
}

#[test]
fn raw_import_normalizes_hu() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("a.raw");
    let meta = dir.path().join("a.json");
    let hu: Vec<i16> = vec![-1024, 0, 1024, 3072, -2000, 4000];
    fs::write(&data, hu.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
    let m = RawMeta { patient_id: "X".into(), dose: Dose::Low, extents: [1, 2, 3], dtype: "int16".into(), values_are_hu: true };
    fs::write(&meta, serde_json::to_vec(&m).unwrap()).unwrap();
    let vol = import_raw_volume(&data, &meta).unwrap();
    assert_eq!(vol.slices.shape(), &[1, 1, 2, 3]);
    assert_eq!(vol.slices.data(), &[0.0, 0.25, 0.5, 1.0, 0.0, 1.0]);
    assert_eq!(vol.provenance, Provenance::Imported);

    let short = RawMeta { extents: [1, 2, 4], ..m.clone() };
    fs::write(&meta, serde_json::to_vec(&short).unwrap()).unwrap();
    assert!(matches!(import_raw_volume(&data, &meta), Err(Error::Format { .. })));

    let bad_dtype = RawMeta { dtype: "int8".into(), ..m.clone() };
    fs::write(&meta, serde_json::to_vec(&bad_dtype).unwrap()).unwrap();
    assert!(matches!(import_raw_volume(&data, &meta), Err(Error::Format { .. })));

    let f64s: Vec<f64> = vec![0.1, 0.2, 1.5];
    fs::write(&data, f64s.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
    let normalized = RawMeta { extents: [1, 1, 3], dtype: "float64".into(), values_are_hu: false, ..m };
    fs::write(&meta, serde_json::to_vec(&normalized).unwrap()).unwrap();
    assert!(matches!(import_raw_volume(&data, &meta), Err(Error::Format { .. })));
}

#[test]
fn dataset_save_load_and_override() {
    let ds = Dataset::phantom(5, 2, 32, 32, DoseParams::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path(), None).unwrap();
    assert_eq!(back.splits, ds.splits);
    assert_eq!(back.patients, ds.patients);

    let manifest = SplitManifest {
        train: vec!["P00".into(), "P01".into(), "P02".into()],
        validation: vec!["P03".into()],
        test: vec!["P04".into()],
    };
    let mpath = dir.path().join("custom.json");
    fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let custom = Dataset::load(dir.path(), Some(&mpath)).unwrap();
    assert_eq!(custom.splits.patients(Split::Test), vec!["P04"]);

    let leaky = SplitManifest { test: vec!["P00".into()], ..manifest };
    fs::write(&mpath, serde_json::to_vec(&leaky).unwrap()).unwrap();
    assert!(matches!(Dataset::load(dir.path(), Some(&mpath)), Err(Error::Leakage(_))));
}

#[test]
fn patch_pairs_stay_inside_their_split() {
    let ds = Dataset::phantom(6, 2, 64, 64, DoseParams::default(), 5).unwrap();
    for split in [Split::Train, Split::Validation, Split::Test] {
        let members: BTreeSet<&str> = ds.splits.patients(split).into_iter().collect();
        let pairs = ds.patch_pairs(split, 32, 32).unwrap();
        assert_eq!(pairs.len(), members.len() * 2 * 4);
        for p in &pairs {
            assert!(members.contains(p.patient_id.as_str()));
            let full = ds.patients.iter().find(|q| q.patient_id == p.patient_id).unwrap();
            let want = crop(&full.normal.slice(p.slice).unwrap(), p.anchor.0, p.anchor.1, 32);
            assert_eq!(p.ndct, want);
        }
        let slices = ds.slice_pairs(split).unwrap();
        assert_eq!(slices.len(), members.len() * 2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_cohort(n in 3usize..60, seed in any::<u64>()) {
        let all = ids(n);
        let s = assign_splits(&all, SplitFractions::default(), seed).unwrap();
        s.assert_no_leakage().unwrap();
        let mut seen: Vec<&str> = [Split::Train, Split::Validation, Split::Test]
            .iter()
            .flat_map(|&x| s.patients(x))
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, all.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(assign_splits(&all, SplitFractions::default(), seed).unwrap(), s.clone());
        // input order does not matter
        let mut rev = all.clone();
        rev.reverse();
        prop_assert_eq!(assign_splits(&rev, SplitFractions::default(), seed).unwrap(), s);
    }

    #[test]
    fn normalized_values_stay_in_unit_interval(v in -1e5f64..1e5) {
        let x = normalize_hu_value(v);
        prop_assert!((0.0..=1.0).contains(&x));
    }
}
