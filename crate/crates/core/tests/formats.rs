mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;

use adapt2::data::{self, Dataset, DomainId, SynthSpec, Window};
use adapt2::models::{ModelBundle, Origin};
use adapt2::pretext::PretextKind;
use adapt2::rng;
use adapt2::tensor::{ParamVector, Tensor};
use common::fixtures::{tiny_pool, tiny_pretext};
use proptest::prelude::*;

fn small_spec() -> SynthSpec {
    SynthSpec { windows_per_class: 12, ..SynthSpec::desk() }
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn same_bits(a: &Dataset, b: &Dataset) -> bool {
    a.len() == b.len()
        && (a.channels, a.timesteps, a.n_classes, a.n_domains()) == (b.channels, b.timesteps, b.n_classes, b.n_domains())
        && a.windows.iter().zip(&b.windows).all(|(x, y)| x.label == y.label && x.domain == y.domain && bits(&x.values) == bits(&y.values))
}

#[test]
fn dataset_file_round_trips_bit_exactly() {
    let mut ds = data::synth_generate(&small_spec(), 3).unwrap();
    ds.windows[0].label = None;
    ds.windows[1].values.data_mut()[..4].copy_from_slice(&[-0.0, f32::MIN_POSITIVE / 2.0, f32::MAX, 1e-30]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ads");
    data::write_dataset(&ds, &path).unwrap();
    let back = data::read_dataset(&path).unwrap();
    assert!(same_bits(&ds, &back));
    assert_eq!(back.domains[2].tag, "d2");

    let again = dir.path().join("e.ads");
    data::write_dataset(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn truncated_or_foreign_dataset_files_are_rejected() {
    let ds = data::synth_generate(&small_spec(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ads");
    data::write_dataset(&ds, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(data::read_dataset(&path).is_err());
    fs::write(&path, b"PK\x03\x04 not a dataset").unwrap();
    assert!(data::read_dataset(&path).is_err());
}

#[test]
fn csv_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "domain,label,c0t0,c0t1,c1t0,c1t1\n0,1,0.5,1,2,3\n1,,4,5,6,7\n0,-1,8,9,10,11\n").unwrap();
    let ds = data::read_csv(&path).unwrap();
    assert_eq!((ds.len(), ds.channels, ds.timesteps, ds.n_domains(), ds.n_classes), (3, 2, 2, 2, 2));
    assert_eq!(ds.windows[0].values.data(), &[0.5, 1.0, 2.0, 3.0]);
    assert_eq!(ds.windows[1].label, None);
    assert_eq!(ds.windows[2].label, None);

    fs::write(&path, "domain,label,c0t1,c0t0\n0,0,1,2\n").unwrap();
    assert!(data::read_csv(&path).is_err());
}

#[test]
fn param_vector_round_trips_bit_exactly() {
    let mut p = tiny_pretext(PretextKind::Cpc).init_params(&mut rng::seeded(4)).unwrap();
    p.push("odd", Tensor::new(vec![4], vec![-0.0, f32::NAN, f32::INFINITY, 1e-42]).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    p.save(&path).unwrap();
    let back = ParamVector::load(&path).unwrap();
    assert_eq!(p.names().collect::<Vec<_>>(), back.names().collect::<Vec<_>>());
    for ((_, a), (_, b)) in p.iter().zip(back.iter()) {
        assert_eq!(a.shape(), b.shape());
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn model_bundle_round_trips() {
    let pretext = tiny_pretext(PretextKind::SimClr);
    let params = pretext.init_params(&mut rng::seeded(1)).unwrap();
    let norm = data::NormStats::fit(tiny_pool(1, 4, 2, 0).iter().map(|w| &w.values)).unwrap();
    let bundle = ModelBundle { encoder: pretext.encoder.clone(), params, origin: Origin::Meta, norm: Some(norm) };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    bundle.save(&path).unwrap();
    assert_eq!(ModelBundle::load(&path).unwrap(), bundle);
}

#[test]
fn synthetic_generation_is_seeded() {
    let a = data::synth_generate(&small_spec(), 7).unwrap();
    let b = data::synth_generate(&small_spec(), 7).unwrap();
    let c = data::synth_generate(&small_spec(), 8).unwrap();
    assert!(same_bits(&a, &b));
    assert!(!same_bits(&a, &c));
    assert_eq!(a.n_domains(), 4);
    assert_eq!(a.domain_counts(), vec![4 * 12; 4]);
    assert_eq!((a.channels, a.timesteps), (data::CHANNELS, data::WINDOW));
}

#[test]
fn splits_keep_the_target_out_of_pretraining() {
    let ds = data::synth_generate(&small_spec(), 2).unwrap();
    for target in 0..ds.n_domains() {
        let s = data::make_split(&ds, target, 3, 9).unwrap();
        s.validate(&ds).unwrap();
        assert!(s.source_pool().iter().all(|&i| ds.windows[i].domain != target));
        assert_eq!(s.source_pool().len(), (ds.len() - ds.domain_counts()[target]) * 70 / 100);
        let mut per_class = BTreeMap::new();
        for &i in &s.finetune_shots {
            assert_eq!(ds.windows[i].domain, target);
            *per_class.entry(ds.windows[i].label.unwrap()).or_insert(0) += 1;
        }
        assert_eq!(per_class.into_values().collect::<Vec<_>>(), vec![3; ds.n_classes]);
        let target_sets: HashSet<usize> = s.finetune_shots.iter().chain(&s.target_val).chain(&s.target_test).copied().collect();
        assert_eq!(target_sets.len(), ds.domain_counts()[target]);
        assert_eq!(data::make_split(&ds, target, 3, 9).unwrap(), s);
    }
}

#[test]
fn split_fails_when_a_class_lacks_shots() {
    let ds = data::synth_generate(&small_spec(), 2).unwrap();
    assert!(data::make_split(&ds, 0, 12, 0).is_err());
    assert!(data::make_split(&ds, 9, 1, 0).is_err());
}

#[test]
fn normalization_maps_the_fitted_pool_onto_plus_minus_one() {
    let ds = data::synth_generate(&small_spec(), 1).unwrap();
    let (normed, stats) = data::normalize(&ds).unwrap();
    for c in 0..ds.channels {
        let vals: Vec<f32> = normed.windows.iter().flat_map(|w| w.values.data()[c * ds.timesteps..(c + 1) * ds.timesteps].to_vec()).collect();
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!((lo + 1.0).abs() < 1e-5 && (hi - 1.0).abs() < 1e-5, "channel {c}: [{lo}, {hi}]");
    }
    assert_eq!(ds.normalized_with(&stats).unwrap(), normed);
    let (twice, _) = data::normalize(&normed).unwrap();
    for (a, b) in twice.windows.iter().zip(&normed.windows) {
        assert!(a.values.max_abs_diff(&b.values) <= 1e-6);
    }
}

#[test]
fn small_domains_can_be_excluded() {
    let windows: Vec<Window> = (0..10).map(|i| Window::new(Tensor::zeros(&[1, 2]), Some(0), usize::from(i >= 7) * 2)).collect();
    let domains = (0..3).map(|id| DomainId { id, tag: format!("x{id}") }).collect();
    let ds = Dataset::new(windows, 1, 2, domains, 1).unwrap();
    let kept = data::exclude_small_domains(&ds, 5).unwrap();
    assert_eq!(kept.n_domains(), 1);
    assert_eq!(kept.len(), 7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn windowing_covers_the_series(len in 256usize..1200, overlap in 0usize..200) {
        let series = Tensor::from_fn(&[3, len], |i| i as f32);
        let ws = data::windowize(&series, 256, overlap, Some(1), 0).unwrap();
        let hop = 256 - overlap;
        prop_assert_eq!(ws.len(), (len - 256) / hop + 1);
        for (k, w) in ws.iter().enumerate() {
            prop_assert_eq!(w.values.data()[0], (k * hop) as f32);
            prop_assert_eq!(w.values.shape(), &[3, 256]);
        }
    }
}
