use foley_core::curation::{
    aggregate_votes, curated_manifest, dataset_stats, filter_and_merge, parse_annotations, annotations_to_tsv, CuratedVideo, Modality,
    SegmentAnnotation, Vote,
};
use foley_core::dataset::Manifest;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOTES: [Vote; 3] = [Vote::No, Vote::SortOf, Vote::Yes];

/// Middle element of the sorted triple.
fn median_oracle(v: [Vote; 3]) -> Vote {
    let mut s = v;
    s.sort();
    s[1]
}

fn random_table(rng: &mut ChaCha8Rng) -> Vec<SegmentAnnotation> {
    let mut rows = Vec::new();
    for v in 0..rng.gen_range(1..4) {
        let segments = rng.gen_range(1..8);
        // skew towards keeping so long runs occur
        let p_no = rng.gen_range(0.0..0.5);
        for s in 0..segments {
            for modality in [Modality::Audio, Modality::Visual] {
                let mut votes = [Vote::Yes; 3];
                for slot in votes.iter_mut() {
                    *slot = if rng.gen_bool(p_no) { Vote::No } else { VOTES[rng.gen_range(1..3)] };
                }
                rows.push(SegmentAnnotation { video_id: format!("v{v}"), category: format!("c{}", v % 2), segment: s, modality, votes });
            }
        }
    }
    // row order must not matter
    let n = rows.len();
    for i in (1..n).rev() {
        rows.swap(i, rng.gen_range(0..=i));
    }
    rows
}

/// Every interval of kept segments whose neighbours are not kept.
fn brute_force_runs(rows: &[SegmentAnnotation]) -> Vec<(String, usize, usize)> {
    let mut ids: Vec<String> = Vec::new();
    for r in rows {
        if !ids.contains(&r.video_id) {
            ids.push(r.video_id.clone());
        }
    }
    let mut out = Vec::new();
    for id in ids {
        let n = rows.iter().filter(|r| r.video_id == id).map(|r| r.segment).max().unwrap() + 1;
        let kept = |s: usize| {
            rows.iter().filter(|r| r.video_id == id && r.segment == s).all(|r| median_oracle(r.votes) != Vote::No)
        };
        for a in 0..n {
            for b in a..n {
                let inside = (a..=b).all(kept);
                let left_closed = a == 0 || !kept(a - 1);
                let right_closed = b + 1 == n || !kept(b + 1);
                if inside && left_closed && right_closed {
                    out.push((id.clone(), a, b));
                }
            }
        }
    }
    out
}

#[test]
fn merge_matches_brute_force_on_random_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let rows = random_table(&mut rng);
        let got: Vec<(String, usize, usize)> =
            filter_and_merge(&rows, 2.0).unwrap().into_iter().map(|v| (v.source_id, v.start_segment, v.end_segment)).collect();
        assert_eq!(got, brute_force_runs(&rows));
    }
}

#[test]
fn aggregation_is_permutation_invariant_and_is_the_median() {
    for &a in &VOTES {
        for &b in &VOTES {
            for &c in &VOTES {
                let want = median_oracle([a, b, c]);
                for p in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                    assert_eq!(aggregate_votes(&p).unwrap(), want, "{p:?}");
                }
            }
        }
    }
}

#[test]
fn stats_match_exact_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let videos: Vec<CuratedVideo> = (0..5000)
        .map(|i| {
            let segs = rng.gen_range(1..=5);
            CuratedVideo { source_id: format!("v{i}"), category: format!("c{}", i % 3), start_segment: 0, end_segment: segs - 1, duration_s: 2.0 * segs as f64 }
        })
        .collect();
    let stats = dataset_stats(&videos).unwrap();
    // durations are even integers: exact sums in i128
    let n = videos.len() as i128;
    let s1: i128 = videos.iter().map(|v| v.duration_s as i128).sum();
    let s2: i128 = videos.iter().map(|v| (v.duration_s as i128).pow(2)).sum();
    let mean = s1 as f64 / n as f64;
    let var = (n * s2 - s1 * s1) as f64 / (n * n) as f64;
    assert!((stats.mean_s - mean).abs() < 1e-9);
    assert!((stats.std_s - var.sqrt()).abs() < 1e-9);
    assert_eq!(stats.per_category.values().map(|c| c.count).sum::<usize>(), 5000);
    assert_eq!(stats.histogram.iter().map(|b| b.count).sum::<usize>(), 5000);
    for (lo, b) in [2.0, 4.0, 6.0, 8.0, 10.0].iter().zip(&stats.histogram) {
        assert_eq!(b.count, videos.iter().filter(|v| v.duration_s == *lo).count());
    }
}

#[test]
fn curated_manifest_round_trips_through_tsv() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows = random_table(&mut rng);
    let parsed = parse_annotations(&annotations_to_tsv(&rows)).unwrap();
    assert_eq!(parsed, rows);
    let videos = filter_and_merge(&rows, 2.0).unwrap();
    let manifest = curated_manifest(&videos, ".");
    let back = Manifest::parse(&manifest.to_tsv(), ".").unwrap();
    assert_eq!(back.records.len(), videos.len());
    for (r, v) in back.records.iter().zip(&videos) {
        assert_eq!(back.categories[r.category], v.category);
        assert_eq!(r.duration_s, v.duration_s);
    }
}

fn arb_table() -> impl Strategy<Value = Vec<SegmentAnnotation>> {
    (1usize..7).prop_flat_map(|segments| {
        prop::collection::vec(prop::array::uniform3(0usize..3), segments * 2).prop_map(move |votes| {
            votes
                .iter()
                .enumerate()
                .map(|(i, v)| SegmentAnnotation {
                    video_id: "v".into(),
                    category: "c".into(),
                    segment: i / 2,
                    modality: if i % 2 == 0 { Modality::Audio } else { Modality::Visual },
                    votes: v.map(|x| VOTES[x]),
                })
                .collect()
        })
    })
}

fn kept_segments(videos: &[CuratedVideo]) -> Vec<usize> {
    videos.iter().flat_map(|v| v.start_segment..=v.end_segment).collect()
}

proptest! {
    #[test]
    fn upgrading_a_vote_never_drops_a_segment(rows in arb_table(), row_pick in 0usize..100, slot in 0usize..3) {
        let before = kept_segments(&filter_and_merge(&rows, 2.0).unwrap());
        let mut upgraded = rows.clone();
        let i = row_pick % upgraded.len();
        upgraded[i].votes[slot] = match upgraded[i].votes[slot] {
            Vote::No => Vote::SortOf,
            _ => Vote::Yes,
        };
        let after = kept_segments(&filter_and_merge(&upgraded, 2.0).unwrap());
        for s in before {
            prop_assert!(after.contains(&s));
        }
    }

    #[test]
    fn runs_partition_the_kept_segments(rows in arb_table()) {
        let videos = filter_and_merge(&rows, 2.0).unwrap();
        let segments = kept_segments(&videos);
        let mut sorted = segments.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(&sorted, &segments, "ranges overlap or are out of order");
        let n = rows.len() / 2;
        let expected: Vec<usize> = (0..n)
            .filter(|&s| rows.iter().filter(|r| r.segment == s).all(|r| median_oracle(r.votes) != Vote::No))
            .collect();
        prop_assert_eq!(segments, expected);
        for v in &videos {
            prop_assert_eq!(v.duration_s, 2.0 * v.segments() as f64);
            prop_assert!(v.duration_s >= 2.0);
        }
        // adjacent runs are separated by at least one dropped segment
        for w in videos.windows(2) {
            prop_assert!(w[1].start_segment > w[0].end_segment + 1);
        }
    }
}
