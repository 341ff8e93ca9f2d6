mod support;

use proptest::prelude::*;
use rr_core::protocols::{
    attitude_class, gen_blobs, load_dataset, make_b0, make_b50, make_split, write_dataset,
    BlobSpec, SampleFormat,
};
use rr_core::Error;
use std::collections::HashSet;
use support::*;

#[test]
fn attitude_grid_matches_table_oracle() {
    let (points, bad) = attitude_grid_check();
    assert_eq!(points, 121 * 121);
    assert_eq!(bad, 0);
}

#[test]
fn attitude_boundaries() {
    assert_eq!(attitude_class(3.0, 0.0, 3.0).unwrap(), 8);
    assert_eq!(attitude_class(3.0001, 0.0, 3.0).unwrap(), 0);
    assert_eq!(attitude_class(-3.0, -3.0, 3.0).unwrap(), 8);
    assert_eq!(attitude_class(-3.1, 3.1, 3.0).unwrap(), 6);
    assert!(attitude_class(f64::NAN, 0.0, 3.0).is_err());
    assert!(attitude_class(0.0, 0.0, 0.0).is_err());
}

proptest! {
    #[test]
    fn attitude_is_a_partition(p in -1e3f64..1e3, r in -1e3f64..1e3, a in 0.01f64..50.0) {
        let want = attitude_matches(p, r, a);
        prop_assert_eq!(want.len(), 1);
        prop_assert_eq!(attitude_class(p, r, a).unwrap(), want[0]);
    }

    #[test]
    fn split_tasks_are_disjoint_and_cover(tasks in 1usize..8, per in 1usize..6, seed: u64) {
        let classes = tasks * per;
        let seq = make_split(classes, tasks, None, seed).unwrap();
        prop_assert_eq!(seq.tasks.len(), tasks);
        let all: Vec<usize> = seq.classes();
        let set: HashSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), classes);
        prop_assert_eq!(set.len(), classes);
        prop_assert!(set.iter().all(|&c| c < classes));
        prop_assert_eq!(make_split(classes, tasks, None, seed).unwrap(), seq);
    }
}

#[test]
fn protocol_shapes() {
    assert_eq!(make_b0(100, 10, 0).unwrap().sizes(), vec![10; 10]);
    assert_eq!(make_b50(100, 5, 0).unwrap().sizes().len(), 11);
    assert_eq!(make_b50(100, 5, 0).unwrap().sizes()[0], 50);
    assert_eq!(make_split(10, 2, None, 0).unwrap().sizes(), vec![5, 5]);
    assert_eq!(make_split(10, 4, Some(4), 0).unwrap().sizes(), vec![4, 2, 2, 2]);
    assert!(matches!(make_split(10, 3, None, 0), Err(Error::Protocol(_))));
    assert!(make_b0(10, 3, 0).is_err());
}

#[test]
fn blobs_are_seeded_and_round_trip_through_disk() {
    let spec = BlobSpec::new(3, 10, 6, 3.0, 7);
    let a = gen_blobs(&spec).unwrap();
    let b = gen_blobs(&spec).unwrap();
    assert_eq!(a.train.samples.len(), 18);
    assert_eq!(a.test.samples.len(), 6);
    for (x, y) in a.train.samples.iter().zip(&b.train.samples) {
        assert!(x.x.bit_eq(&y.x));
    }
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&a, dir.path(), SampleFormat::Raw).unwrap();
    let back = load_dataset(dir.path(), Some(3)).unwrap();
    assert_eq!(back.train.samples.len(), a.train.samples.len());
    for (x, y) in a.train.samples.iter().zip(&back.train.samples) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.label, y.label);
        assert!(x.x.bit_eq(&y.x));
    }

    let dir = tempfile::tempdir().unwrap();
    write_dataset(&a, dir.path(), SampleFormat::Netpbm).unwrap();
    let back = load_dataset(dir.path(), None).unwrap();
    for (x, y) in a.test.samples.iter().zip(&back.test.samples) {
        for (u, v) in x.x.data().iter().zip(y.x.data()) {
            assert!((u.clamp(0.0, 1.0) - v).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn malformed_labels_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("labels.csv"), "id,label,split\n0,1,train\n1,x,test\n").unwrap();
    match load_dataset(dir.path(), None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
}
