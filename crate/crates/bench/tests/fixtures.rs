use xsense_bench::{bundle, windows};
use xsense_core::model::Net;

#[test]
fn fixture_windows_are_normalized_and_paired() {
    let set = windows();
    assert_eq!(set.subjects().len(), 2);
    assert_eq!(set.n_w, 40);
    for v in [&set.src, &set.dst] {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(m.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn fixture_bundle_has_every_network() {
    let set = windows();
    let b = bundle(&set, 16, 1);
    assert_eq!(b.nets(), Net::ALL.to_vec());
    assert_eq!(b.classes(), 6);
}
