use banis::dataset::{ImagePair, Split};
use banis::gmi::{compute_gmi, dsc, gmi_from_dscs, Binarize, BinaryMask, GmiReport};
use banis::imaging::Grid;
use banis::networks::toy;
use proptest::prelude::*;

fn mask(side: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), side * side)
        .prop_map(move |bits| BinaryMask::new(side, side, bits).unwrap())
}

proptest! {
    #[test]
    fn dsc_is_symmetric_and_bounded(x in mask(8), y in mask(8)) {
        let d = dsc(&x, &y).unwrap();
        prop_assert_eq!(d, dsc(&y, &x).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn dsc_of_self_is_one_unless_empty(x in mask(8)) {
        let d = dsc(&x, &x).unwrap();
        prop_assert_eq!(d, if x.count() == 0 { 0.0 } else { 1.0 });
    }

    #[test]
    fn matched_fraction_is_monotone_in_threshold(
        dscs in proptest::collection::vec(0.0f64..=1.0, 1..40),
        mut ts in proptest::collection::vec(0.01f64..=1.0, 1..6),
    ) {
        ts.sort_by(f64::total_cmp);
        let named = dscs.iter().enumerate().map(|(i, &d)| (format!("{i:03}"), d)).collect();
        let r = gmi_from_dscs(named, &ts).unwrap();
        for w in r.matched_fraction.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(r.matched_fraction.iter().all(|f| (0.0..=1.0).contains(f)));
    }
}

#[test]
fn threshold_is_strict() {
    let r = gmi_from_dscs(vec![("a".into(), 0.2), ("b".into(), 0.1)], &[0.2]).unwrap();
    assert_eq!(r.matched_fraction, vec![0.5]);
    assert!(gmi_from_dscs(vec![("a".into(), 0.2)], &[0.0]).is_err());
    assert!(gmi_from_dscs(vec![], &[0.2]).is_err());
}

#[test]
fn identical_successor_outputs_give_full_overlap() {
    let mut bits = vec![false; 64];
    for b in bits.iter_mut().take(20) {
        *b = true;
    }
    let m = BinaryMask::new(8, 8, bits).unwrap();
    let img = Grid::new(
        8,
        8,
        m.bits()
            .iter()
            .map(|&b| if b { 1.0 } else { -1.0 })
            .collect(),
    )
    .unwrap();
    let pair = ImagePair {
        id: "same".into(),
        split: Split::Test,
        a: img.clone(),
        b: img,
        mask_a: None,
        mask_b: None,
    };
    let bundle = toy::identity_bundle::<f32>(8).unwrap();
    let r = compute_gmi(&[pair], &bundle, &[0.1, 1.0], Binarize::default()).unwrap();
    assert_eq!(r.dscs[0].1, 1.0);
    assert_eq!(r.matched_fraction, vec![0.0, 0.0]);
}

#[test]
fn report_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = gmi_from_dscs(vec![("p1".into(), 0.25), ("p0".into(), 0.05)], &[0.1, 0.3]).unwrap();
    let path = dir.path().join("gmi.csv");
    r.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(
        text.starts_with("pair_id,dsc\np0,0.05\np1,0.25\n"),
        "{text}"
    );
    assert_eq!(GmiReport::read_csv(&path).unwrap(), r);
}
