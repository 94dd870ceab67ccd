mod common;

use std::collections::HashSet;

use dccn::data::{
    generate_synthetic, make_batches, probe_accuracy, read_dataset, read_source, read_split, sequential_batches, write_dataset,
    FeatureRef, SyntheticTaskSpec,
};
use dccn::features::{build_region_vectors, FeatureShape, VisualFeatures};
use dccn::{Error, Tensor};

fn small_spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        vocab_size: 30,
        ambiguous: 4,
        train: 120,
        valid: 20,
        test: 20,
        distractor_classes: 6,
        global_rows: 4,
        regions: 3,
        d_c: 8,
        ..SyntheticTaskSpec::default()
    }
}

fn sample_features(annotations: bool) -> VisualFeatures {
    let mut spec = small_spec();
    spec.noise = 0.3;
    let mut synth = spec.feature_synth().unwrap();
    synth.keep_annotations = annotations;
    synth.synthesize(5, 42, 17).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn feature_container_round_trips_bit_for_bit() {
    for annotations in [false, true] {
        let f = sample_features(annotations);
        let bytes = f.to_bytes();
        let back = VisualFeatures::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(bits(&back.global), bits(&f.global));
        assert_eq!(back, f);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        f.save(&path).unwrap();
        assert_eq!(VisualFeatures::load(&path, f.shape()).unwrap(), f);
    }
}

fn format_offset(r: dccn::Result<VisualFeatures>) -> u64 {
    match r {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn malformed_containers_report_where_they_break() {
    let good = sample_features(false).to_bytes();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(format_offset(VisualFeatures::from_bytes(&bad)), 0);

    let mut bad = good.clone();
    bad[8] = 9;
    assert_eq!(format_offset(VisualFeatures::from_bytes(&bad)), 8);

    assert_eq!(format_offset(VisualFeatures::from_bytes(&good[..30])), 28);
    let cut = good.len() - 5;
    assert!(format_offset(VisualFeatures::from_bytes(&good[..cut])) > 40);

    // the mask follows the 40-byte header and the two f64 blocks
    let mask_at = 40 + 8 * (4 + 3) * 8;
    let mut bad = good.clone();
    bad[mask_at] = 7;
    assert_eq!(format_offset(VisualFeatures::from_bytes(&bad)), mask_at as u64);

    let mut bad = good.clone();
    bad.push(0);
    assert_eq!(format_offset(VisualFeatures::from_bytes(&bad)), good.len() as u64);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.feat");
    std::fs::write(&path, &good).unwrap();
    let wrong = FeatureShape { global_rows: 5, regions: 3, d_c: 8 };
    assert!(matches!(VisualFeatures::load(&path, wrong), Err(Error::Format { .. })));
    assert!(matches!(
        VisualFeatures::load(dir.path().join("missing.feat"), wrong),
        Err(Error::Io { .. })
    ));
}

#[test]
fn padded_region_rows_must_be_zero() {
    let mut f = sample_features(false);
    let last = f.mask.len() - 1;
    f.mask[last] = false;
    f.regional.set(&[last, 0], 1.0);
    assert!(matches!(f.validate(f.shape()), Err(Error::Input(_))));
}

#[test]
fn region_vectors_are_weighted_class_sums() {
    let classes = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
    let (r, mask) = build_region_vectors(&[vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]], &classes, 4).unwrap();
    assert_eq!(r.data(), &[0.5, 0.5, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(mask, vec![true, true, false, false]);
    assert!(build_region_vectors(&vec![vec![1.0, 0.0, 0.0]; 5], &classes, 4).is_err());
}

#[test]
fn synthesis_is_deterministic_and_seed_dependent() {
    let synth = small_spec().feature_synth().unwrap();
    let a = synth.synthesize(3, 11, 0).unwrap();
    assert_eq!(a, synth.synthesize(3, 11, 0).unwrap());
    assert_ne!(a.regional, synth.synthesize(3, 12, 0).unwrap().regional);
    assert!(a.mask[..a.region_count()].iter().all(|&m| m) || a.mask.iter().filter(|&&m| m).count() == a.region_count());
    assert!(synth.synthesize(synth.senses, 1, 0).is_err());
}

#[test]
fn probe_accuracy_falls_with_noise() {
    let mut accs = Vec::new();
    for noise in [0.0, 0.5, 1.0] {
        let spec = SyntheticTaskSpec { noise, train: 400, ..small_spec() };
        accs.push(probe_accuracy(&generate_synthetic(&spec).unwrap().train).unwrap());
    }
    assert_eq!(accs[0], 1.0);
    assert!(accs[0] >= accs[1] && accs[1] >= accs[2], "{accs:?}");
    assert!(accs[2] < 1.0, "{accs:?}");
}

#[test]
fn every_sentence_has_one_aligned_ambiguous_word() {
    let spec = small_spec();
    let data = generate_synthetic(&spec).unwrap();
    let mut second_sense = 0;
    for ex in &data.train.examples {
        let a = ex.ambiguity.as_ref().unwrap();
        assert_eq!(ex.src.len(), ex.tgt.len());
        assert!((spec.min_len..=spec.max_len).contains(&ex.src.len()));
        assert_eq!(ex.tgt[a.position], a.gold);
        let word: usize = ex.src[a.position][1..].parse().unwrap();
        assert!(word < spec.ambiguous);
        let Some(FeatureRef::Synth { sense, .. }) = ex.features else { panic!("synth features expected") };
        assert_eq!(sense / spec.senses, word);
        second_sense += sense % spec.senses;
    }
    let share = second_sense as f64 / data.train.len() as f64;
    assert!((share - 0.4).abs() < 0.1, "{share}");
    let again = generate_synthetic(&spec).unwrap();
    assert_eq!(again.test.examples, data.test.examples);
}

#[test]
fn batches_cover_each_sentence_once_within_budget() {
    let data = generate_synthetic(&small_spec()).unwrap();
    let budget = 60;
    let batches = make_batches(&data.train, budget, 3, 0).unwrap();
    let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..data.train.len()).collect::<Vec<_>>());
    for b in &batches {
        assert!(b.iter().map(|&i| data.train.examples[i].tokens()).sum::<usize>() <= budget);
    }
    assert_eq!(batches, make_batches(&data.train, budget, 3, 0).unwrap());
    assert_ne!(batches, make_batches(&data.train, budget, 3, 1).unwrap());
    let seq: Vec<usize> = sequential_batches(&data.train, budget).into_iter().flatten().collect();
    assert_eq!(seq, (0..data.train.len()).collect::<Vec<_>>());
    assert!(matches!(make_batches(&data.train, 5, 3, 0), Err(Error::Input(_))));
}

#[test]
fn shuffled_features_are_a_permutation() {
    let data = generate_synthetic(&small_spec()).unwrap();
    let shuffled = data.train.with_shuffled_features(4);
    let key = |f: &Option<FeatureRef>| format!("{f:?}");
    let mut a: Vec<String> = data.train.examples.iter().map(|e| key(&e.features)).collect();
    let mut b: Vec<String> = shuffled.examples.iter().map(|e| key(&e.features)).collect();
    let moved = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    assert!(moved > data.train.len() / 2);
    a.sort();
    b.sort();
    assert_eq!(a, b);
    assert!(shuffled.examples.iter().zip(&data.train.examples).all(|(s, e)| s.src == e.src));
}

#[test]
fn dataset_directory_round_trips() {
    for materialize in [false, true] {
        let spec = SyntheticTaskSpec { materialize, train: 10, valid: 4, test: 4, ..small_spec() };
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, Some(&spec)).unwrap();
        let back = read_dataset(dir.path(), spec.shape()).unwrap();
        for (a, b) in [(&data.train, &back.train), (&data.test, &back.test)] {
            assert_eq!(a.len(), b.len());
            for i in 0..a.len() {
                assert_eq!(a.examples[i].src, b.examples[i].src);
                assert_eq!(a.examples[i].tgt, b.examples[i].tgt);
                assert_eq!(a.examples[i].ambiguity, b.examples[i].ambiguity);
                assert_eq!(a.features(i).unwrap(), b.features(i).unwrap());
            }
        }
        let manifest = std::fs::read_to_string(dir.path().join("train.manifest")).unwrap();
        assert_eq!(manifest.lines().count(), 10);
        assert_eq!(materialize, manifest.starts_with("features/"));
    }
}

#[test]
fn malformed_dataset_files_are_rejected_by_line() {
    let spec = SyntheticTaskSpec { train: 3, valid: 3, test: 3, ..small_spec() };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_synthetic(&spec).unwrap(), Some(&spec)).unwrap();
    let p = dir.path().join("test.manifest");
    std::fs::write(&p, "synth 1 2\nsynth x 2\nsynth 0 0\n").unwrap();
    match read_split(dir.path(), "test", spec.shape()) {
        Err(Error::Input(m)) => assert!(m.contains("line 2"), "{m}"),
        other => panic!("{:?}", other.map(|c| c.len())),
    }
    std::fs::write(&p, "synth 1 2\n").unwrap();
    assert!(matches!(read_split(dir.path(), "test", spec.shape()), Err(Error::Input(_))));
    std::fs::write(dir.path().join("test.tgt"), "a\n").unwrap();
    assert!(matches!(read_split(dir.path(), "test", spec.shape()), Err(Error::Input(_))));
}

#[test]
fn source_files_resolve_features_next_to_the_manifest() {
    let spec = SyntheticTaskSpec { train: 3, valid: 3, test: 3, ..small_spec() };
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, Some(&spec)).unwrap();
    let corpus = read_source(&dir.path().join("test.src"), Some(&dir.path().join("test.manifest")), spec.shape()).unwrap();
    assert_eq!(corpus.len(), 3);
    assert!(corpus.examples.iter().all(|e| e.tgt.is_empty()));
    assert_eq!(corpus.features(1).unwrap(), data.test.features(1).unwrap());
    let plain = read_source(&dir.path().join("test.src"), None, spec.shape()).unwrap();
    assert!(plain.examples.iter().all(|e| e.features.is_none()));
    assert!(matches!(
        read_source(&dir.path().join("test.src"), Some(&dir.path().join("nope")), spec.shape()),
        Err(Error::Input(_))
    ));
    let ids: HashSet<u64> = corpus.examples.iter().map(|e| e.id).collect();
    assert_eq!(ids.len(), 3);
}
