use nbase::features::{
    dtw_distance, export_csv, feature_rows, parse_csv, reduce_rows, FeatureRow, Normalization, Point, Trajectory,
    INTERVAL_FEATURES, NUM_FEATURES,
};
use nbase::midi::{sort_notes, NoteEvent};
use nbase::score::Grouping;
use proptest::prelude::*;

fn points() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..25)
        .prop_map(|v| v.into_iter().enumerate().map(|(t, (x, y))| Point { t, x, y }).collect())
}

fn rows() -> impl Strategy<Value = Vec<FeatureRow>> {
    prop::collection::vec(prop::collection::vec(-100.0f64..100.0, NUM_FEATURES), 1..15).prop_map(|v| {
        v.into_iter()
            .map(|r| {
                let mut a = [0.0; NUM_FEATURES];
                a.copy_from_slice(&r);
                FeatureRow(a)
            })
            .collect()
    })
}

fn notes() -> impl Strategy<Value = Vec<NoteEvent>> {
    prop::collection::vec((30u8..80, 1u8..128, 0u64..6000, 1u64..900), 1..80).prop_map(|raw| {
        let mut v: Vec<NoteEvent> = raw.into_iter().map(|(p, vel, on, d)| NoteEvent::new(p, vel, on, d)).collect();
        sort_notes(&mut v);
        v
    })
}

const FRACTIONS: [usize; 9] = [4, 11, 12, 14, 21, 22, 23, 28, 29];

proptest! {
    #[test]
    fn dtw_is_a_symmetric_premetric(a in points(), b in points()) {
        let ab = dtw_distance(&a, &b).unwrap();
        let ba = dtw_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn reduce_stays_in_unit_square(rows in rows(), z in any::<bool>()) {
        let norm = if z { Normalization::ZScore } else { Normalization::MinMax };
        let pts = reduce_rows(&rows, norm).unwrap();
        prop_assert_eq!(pts.len(), rows.len());
        for (t, p) in pts.iter().enumerate() {
            prop_assert_eq!(p.t, t);
            prop_assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
        }
    }

    #[test]
    fn reduce_ignores_positive_affine_rescaling(
        rows in rows(),
        scale in prop::collection::vec((0.01f64..100.0, -50.0f64..50.0), NUM_FEATURES),
        z in any::<bool>(),
    ) {
        let norm = if z { Normalization::ZScore } else { Normalization::MinMax };
        let moved: Vec<FeatureRow> = rows
            .iter()
            .map(|r| {
                let mut a = r.0;
                for (j, (s, o)) in scale.iter().enumerate() {
                    a[j] = a[j] * s + o;
                }
                FeatureRow(a)
            })
            .collect();
        let (p, q) = (reduce_rows(&rows, norm).unwrap(), reduce_rows(&moved, norm).unwrap());
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn feature_ranges(notes in notes(), t in 1usize..12) {
        for row in feature_rows(&notes, Grouping::defaults_for(480), 480, t) {
            prop_assert!(row.0.iter().all(|v| v.is_finite() && *v >= 0.0));
            for j in FRACTIONS {
                prop_assert!(row.0[j] <= 1.0, "feature {j} = {}", row.0[j]);
            }
            prop_assert!(row.0[24] <= 12f64.ln() + 1e-12);
        }
    }

    #[test]
    fn interval_features_ignore_transposition(notes in notes(), k in prop::sample::select(vec![1u8, 5, 12]), t in 1usize..12) {
        let g = Grouping::defaults_for(480);
        let up: Vec<NoteEvent> = notes.iter().map(|n| NoteEvent { pitch: n.pitch + k, ..*n }).collect();
        let (a, b) = (feature_rows(&notes, g, 480, t), feature_rows(&up, g, 480, t));
        prop_assert_eq!(a.len(), b.len());
        for (r, s) in a.iter().zip(&b) {
            for &j in &INTERVAL_FEATURES {
                prop_assert_eq!(r.0[j].to_bits(), s.0[j].to_bits(), "feature {}", j);
            }
        }
    }

    #[test]
    fn csv_round_trip(trajs in prop::collection::vec(("[a-z0-9_,\" ]{1,8}", "[A-Za-z-]{1,8}", points()), 0..5)) {
        let trajs: Vec<Trajectory> = trajs
            .into_iter()
            .enumerate()
            .map(|(i, (id, origin, points))| Trajectory { song_id: format!("{i}{id}"), origin, points })
            .collect();
        let bytes = export_csv(&trajs);
        prop_assert!(!bytes.contains(&b'\r'));
        let back = parse_csv(&bytes).unwrap();
        prop_assert_eq!(back.len(), trajs.len());
        for (a, b) in trajs.iter().zip(&back) {
            prop_assert_eq!(&a.song_id, &b.song_id);
            prop_assert_eq!(&a.origin, &b.origin);
            for (p, q) in a.points.iter().zip(&b.points) {
                prop_assert!(p.t == q.t && (p.x - q.x).abs() <= 5e-7 && (p.y - q.y).abs() <= 5e-7);
            }
        }
    }
}
