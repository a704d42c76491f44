use proptest::prelude::*;

use sdforest::bounds::tree_generalization_gap;
use sdforest::features::{bilinear_upsample, FeatureMap};
use sdforest::guided_filter::{guided_filter, GuidedFilterParams};
use sdforest::maps::ConfidenceMap;
use sdforest::metrics::jaccard;
use sdforest::pipeline::{combine_objects, run_sequence};
use sdforest::superpixel::{slic, soft_mean_pool, SlicParams};
use sdforest::synthetic::{generate, SyntheticSpec};
use sdforest::tensor_io::ImageFrame;
use sdforest::tracker::cross_correlate;
use sdforest::Config;

fn unit_map(w: usize, h: usize) -> impl Strategy<Value = ConfidenceMap> {
    proptest::collection::vec(0.0f64..=1.0, w * h).prop_map(move |d| ConfidenceMap::new(w, h, d).unwrap())
}

fn frame(w: usize, h: usize) -> impl Strategy<Value = ImageFrame> {
    proptest::collection::vec(any::<u8>(), 3 * w * h).prop_map(move |d| ImageFrame::new(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pooling_keeps_mean_and_range(f in frame(20, 16), conf in unit_map(20, 16), beta in 0.0f64..=1.0) {
        let sp = slic(&f, &SlicParams { k: 12, compactness: 10.0, iters: 3 }).unwrap();
        let out = soft_mean_pool(&conf, &sp, beta).unwrap();
        let (lo, hi) = conf.min_max();
        prop_assert!((out.mean() - conf.mean()).abs() < 1e-9);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn guided_output_in_unit_range(g in unit_map(18, 14), c in unit_map(18, 14), r in 1usize..5, eps in 0.0f64..0.1) {
        let q = guided_filter(&g, &c, &GuidedFilterParams { radius: r, eps }).unwrap();
        prop_assert!(q.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn correlation_bounded(
        ex in proptest::collection::vec(0.0f32..1.0, 2 * 5 * 4),
        region in proptest::collection::vec(0.0f32..1.0, 2 * 12 * 9),
    ) {
        let ex = FeatureMap::new(2, 4, 5, ex).unwrap();
        let region = FeatureMap::new(2, 9, 12, region).unwrap();
        let r = cross_correlate(&ex, &region).unwrap();
        prop_assert_eq!((r.width, r.height), (8, 6));
        prop_assert!(r.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn upsample_within_input_range(data in proptest::collection::vec(-3.0f32..3.0, 2 * 3 * 4), th in 1usize..12, tw in 1usize..12) {
        let m = FeatureMap::new(2, 3, 4, data).unwrap();
        let up = bilinear_upsample(&m, th, tw).unwrap();
        for c in 0..2 {
            let src = m.plane(c);
            let (lo, hi) = src.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            prop_assert!(up.plane(c).iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }
    }

    #[test]
    fn tree_gap_monotone(q in 0.0f64..5000.0, j in 0.0f64..500.0, m in 1.0f64..1e6, delta in 0.001f64..0.999) {
        let g = tree_generalization_gap(q, j, m, delta).unwrap();
        prop_assert!(tree_generalization_gap(q, j, m * 1.5, delta).unwrap() < g);
        prop_assert!(tree_generalization_gap(q + 1.0, j, m, delta).unwrap() > g);
        prop_assert!(tree_generalization_gap(q, j + 1.0, m, delta).unwrap() > g);
    }

    #[test]
    fn labels_partition(a in unit_map(6, 5), b in unit_map(6, 5), c in unit_map(6, 5)) {
        let mask = combine_objects(&[a.clone(), b.clone(), c.clone()], &[1, 2, 3], 0.5);
        for i in 0..30 {
            let vals = [a.data()[i], b.data()[i], c.data()[i]];
            let best = vals.iter().cloned().fold(f64::MIN, f64::max);
            let l = mask.labels()[i];
            if best < 0.5 {
                prop_assert_eq!(l, 0);
            } else {
                let first = vals.iter().position(|&v| v == best).unwrap() as u8 + 1;
                prop_assert_eq!(l, first);
            }
        }
    }
}

#[test]
fn two_objects_tracked_separately() {
    let seq = generate(&SyntheticSpec::two_disks(160, 160, 12, 4));
    let cfg = Config { slic: SlicParams { k: 200, ..SlicParams::default() }, ..Config::default() };
    let r = run_sequence(&seq.frames, &seq.masks[0], &cfg, 9).unwrap();
    for id in [1, 2] {
        let j: f64 = r.masks[1..]
            .iter()
            .zip(&seq.masks[1..])
            .map(|(p, g)| jaccard(&p.object(id), &g.object(id)).unwrap())
            .sum::<f64>()
            / 11.0;
        assert!(j >= 0.85, "object {id}: mean J {j}");
    }
}

#[test]
fn thread_count_does_not_change_masks() {
    let seq = generate(&SyntheticSpec::moving_disk(96, 96, 6, 1));
    let cfg = Config { slic: SlicParams { k: 80, ..SlicParams::default() }, ..Config::default() };
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| run_sequence(&seq.frames, &seq.masks[0], &cfg, 3).unwrap().masks)
    };
    assert_eq!(run(1), run(4));
}
