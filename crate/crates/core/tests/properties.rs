//! Property tests for invariants that hold across random inputs.

use lid_core::classifier::{predict_posteriors, LogRegModel};
use lid_core::corpusio::{linear_to_mulaw, mulaw_to_linear, Manifest, ManifestRow};
use lid_core::eval::{c_avg, error_rate_of, PairTable, Trial};
use lid_core::features::{add_deltas, compute_sdc, sliding_cmn, vtln_warp_freq, SdcConfig};
use lid_core::gmm::PosteriorMatrix;
use lid_core::matrix::FeatureMatrix;
use lid_core::nnet::{labels_for_frames, SgdSchedule};
use lid_core::stats::{accumulate_stats, merge_stats, reduce_stats, SuffStats};
use lid_core::features::VadMask;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn feature_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = FeatureMatrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |v| FeatureMatrix::new(r, c, v, 0.01).unwrap())
    })
}

fn posterior_rows(t: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, m), t).prop_map(|rows| {
        rows.into_iter()
            .map(|mut r| {
                r[0] += 1e-3;
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|p| *p /= s);
                r
            })
            .collect()
    })
}

fn stats_strategy(m: usize, d: usize) -> impl Strategy<Value = SuffStats> {
    (prop::collection::vec(0.0f64..10.0, m), prop::collection::vec(-10.0f64..10.0, m * d)).prop_map(move |(n, f)| {
        SuffStats {
            n,
            f,
            centered: false,
            dim: d,
            num_classes: m,
        }
    })
}

proptest! {
    #[test]
    fn stats_mass_equals_speech_frames(
        (feats, rows, flags) in (1usize..30, 1usize..6, 1usize..8).prop_flat_map(|(t, m, d)| (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), t),
            posterior_rows(t, m),
            prop::collection::vec(any::<bool>(), t),
        ))
    ) {
        let feats = FeatureMatrix::from_rows(&feats, 0.01).unwrap();
        let post = PosteriorMatrix::from_dense(&rows);
        let post = PosteriorMatrix::new(rows[0].len(), post.rows);
        let speech = flags.iter().filter(|&&f| f).count() as f64;
        let s = accumulate_stats(&post, &feats, &VadMask { flags }, None).unwrap();
        prop_assert!((s.total_occupancy() - speech).abs() < 1e-9);
        prop_assert!(s.n.iter().all(|&n| n >= 0.0));
    }

    #[test]
    fn merging_stats_is_order_free(items in prop::collection::vec(stats_strategy(3, 2), 1..6)) {
        let forward = reduce_stats(&items).unwrap().unwrap();
        let mut rev = items.clone();
        rev.reverse();
        let backward = reduce_stats(&rev).unwrap().unwrap();
        for (a, b) in forward.n.iter().zip(&backward.n).chain(forward.f.iter().zip(&backward.f)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        if items.len() >= 2 {
            let ab = merge_stats(&items[0], &items[1]).unwrap();
            let ba = merge_stats(&items[1], &items[0]).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }

    #[test]
    fn global_cmn_zeroes_column_means(feats in feature_matrix(40, 6)) {
        let out = sliding_cmn(&feats, f64::INFINITY, true);
        prop_assert_eq!((out.rows(), out.cols()), (feats.rows(), feats.cols()));
        for m in out.column_means() {
            prop_assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn sliding_cmn_keeps_shape_and_removes_offsets(feats in feature_matrix(60, 4), offset in -100.0f64..100.0) {
        let shifted = FeatureMatrix::new(
            feats.rows(),
            feats.cols(),
            feats.as_slice().iter().map(|v| v + offset).collect(),
            0.01,
        ).unwrap();
        let a = sliding_cmn(&feats, 0.3, true);
        let b = sliding_cmn(&shifted, 0.3, true);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn delta_and_sdc_widths(feats in feature_matrix(30, 9)) {
        let d = add_deltas(&feats, 2, 2).unwrap();
        prop_assert_eq!((d.rows(), d.cols()), (feats.rows(), 3 * feats.cols()));
        prop_assert_eq!(&d.as_slice()[..feats.cols()], feats.row(0));
        if feats.cols() >= 7 {
            let cfg = SdcConfig::default();
            let s = compute_sdc(&feats, &cfg).unwrap();
            prop_assert_eq!(s.cols(), cfg.output_dim());
            prop_assert_eq!(s.rows(), feats.rows());
        }
    }

    #[test]
    fn warp_map_is_monotone(warp in 0.8f64..1.2, a in 0.0f64..4000.0, b in 0.0f64..4000.0) {
        let f = |x| vtln_warp_freq(100.0, 3500.0, 20.0, 4000.0, warp, x);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(f(lo) <= f(hi) + 1e-9);
        prop_assert!((f(20.0) - 20.0).abs() < 1e-9);
        prop_assert!((f(4000.0) - 4000.0).abs() < 1e-9);
    }

    #[test]
    fn classifier_posteriors_are_distributions(
        (w, x) in (2usize..6, 1usize..6).prop_flat_map(|(k, r)| (
            prop::collection::vec(-3.0f64..3.0, k * (r + 1)).prop_map(move |v| DMatrix::from_vec(k, r + 1, v)),
            prop::collection::vec(-10.0f64..10.0, r),
        ))
    ) {
        let names = (0..w.nrows()).map(|i| format!("l{i}")).collect();
        let model = LogRegModel::new(w, names).unwrap();
        let p = predict_posteriors(&model, &x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn c_avg_stays_in_percent_range(k in 2usize..6, miss in 0.0f64..1.0, fa in 0.0f64..1.0) {
        let c = c_avg(&PairTable::uniform(k, miss, fa)).unwrap();
        prop_assert!((0.0..=100.0).contains(&c));
        prop_assert!((c - 50.0 * (miss + fa)).abs() < 1e-9);
    }

    #[test]
    fn error_rate_ignores_trial_order(mut rows in prop::collection::vec((0usize..3, posterior_rows(1, 3)), 1..20)) {
        let build = |rows: &[(usize, Vec<Vec<f64>>)]| -> Vec<Trial> {
            rows.iter().map(|(l, p)| Trial {
                utt_id: String::new(),
                true_language: *l,
                duration_s: 3,
                posteriors: p[0].clone(),
            }).collect()
        };
        let a = error_rate_of(&build(&rows)).unwrap();
        rows.reverse();
        let b = error_rate_of(&build(&rows)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn mulaw_codes_roundtrip(byte in any::<u8>()) {
        let back = linear_to_mulaw(mulaw_to_linear(byte));
        // 0x7f and 0xff both decode to zero.
        prop_assert!(back == byte || mulaw_to_linear(back) == mulaw_to_linear(byte));
    }

    #[test]
    fn frame_labels_cover_every_frame(blocks in prop::collection::vec(0u32..64, 1..200), frames in 1usize..150) {
        let max_frames = ((blocks.len() as f64 * 0.01 - 0.025) / 0.01).floor() as usize + 1;
        let frames = frames.min(max_frames.max(1));
        if let Ok(y) = labels_for_frames(&blocks, frames, 0.025, 0.01) {
            prop_assert_eq!(y.len(), frames);
            prop_assert!(y.iter().all(|l| blocks.contains(l)));
        }
    }

    #[test]
    fn learning_rate_decays_between_endpoints(epochs in 2usize..12) {
        let s = SgdSchedule { num_epochs: epochs, ..SgdSchedule::default() };
        prop_assert!((s.lr(0) - s.initial_lr).abs() < 1e-15);
        prop_assert!((s.lr(epochs - 1) - s.final_lr).abs() < 1e-15);
        for e in 1..epochs {
            prop_assert!(s.lr(e) < s.lr(e - 1));
        }
    }

    #[test]
    fn manifest_text_roundtrips(rows in prop::collection::vec(
        ("[a-z0-9_]{1,10}", "[a-z]{1,6}", 1u32..40, prop::option::of(0.8f64..1.2)), 1..10)
    ) {
        let mut seen = std::collections::HashSet::new();
        let rows: Vec<ManifestRow> = rows
            .into_iter()
            .filter(|(id, ..)| seen.insert(id.clone()))
            .map(|(id, lang, dur, warp)| ManifestRow {
                path: format!("audio/{id}.wav").into(),
                utt_id: id,
                language: lang,
                duration_s: f64::from(dur),
                vtln_warp: warp,
            })
            .collect();
        let m = Manifest::new(rows).unwrap();
        let back = Manifest::parse(&m.to_tsv(), "manifest").unwrap();
        prop_assert_eq!(back, m);
    }
}
