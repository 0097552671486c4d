mod common;

use common::{oracle_nms, random_heatmap, random_quadratic};
use lens_core::keypoint::{nms_extract, sample_neighborhoods, subpixel_refine};
use lens_core::{Keypoint, KeypointSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn at(x: f64, y: f64) -> KeypointSet {
    KeypointSet {
        points: vec![Keypoint { x, y, score: 1.0, cell: (y as usize, x as usize) }],
    }
}

#[test]
fn nms_matches_oracle_with_ties_and_radii() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..50 {
        let (h, w) = (rng.gen_range(3..20), rng.gen_range(3..20));
        let map = random_heatmap(&mut rng, h, w, i % 2 == 0);
        let r = rng.gen_range(0.5..5.0);
        let n = rng.gen_range(1..20);
        let got: Vec<(usize, usize, f64)> = nms_extract(&map, r, n)
            .points
            .iter()
            .map(|p| (p.cell.0, p.cell.1, p.score))
            .collect();
        assert_eq!(got, oracle_nms(&map, r, n), "map {i}");
    }
}

#[test]
fn nms_scores_non_increasing_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let map = random_heatmap(&mut rng, 16, 16, false);
        let set = nms_extract(&map, 2.0, 16);
        assert!(set.len() <= 16);
        assert!(set.points.windows(2).all(|p| p[0].score >= p[1].score));
        assert!(set.points.iter().all(|p| p.x == p.cell.1 as f64 && p.y == p.cell.0 as f64));
    }
}

#[test]
fn quadratic_peaks_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let q = random_quadratic(&mut rng, 16, 16, (0.5, 2.0));
        let map = q.map(16, 16);
        let ints = nms_extract(&map, 4.0, 1);
        let p = &ints.points[0];
        assert_eq!((p.x, p.y), (q.x0.round(), q.y0.round()));
        let refined = subpixel_refine(&map, &ints, 1e-6).unwrap();
        let (x0, y0) = q.peak();
        assert!((refined.points[0].x - x0).abs() < 1e-6);
        assert!((refined.points[0].y - y0).abs() < 1e-6);
    }
}

#[test]
fn zero_gradient_never_moves() {
    let flat = Tensor::filled(&[5, 5], 0.3);
    let out = subpixel_refine(&flat, &at(2.0, 2.0), 1e-6).unwrap();
    assert_eq!((out.points[0].x, out.points[0].y), (2.0, 2.0));
    // symmetric bump: zero gradient at its center
    let bump = Tensor::from_fn(5, 5, |r, c| 1.0 - ((r as f64 - 2.0).powi(2) + (c as f64 - 2.0).abs()));
    let out = subpixel_refine(&bump, &at(2.0, 2.0), 1e-6).unwrap();
    assert_eq!((out.points[0].x, out.points[0].y), (2.0, 2.0));
}

#[test]
fn outside_or_fractional_points_rejected() {
    let map = Tensor::zeros(&[4, 4]);
    assert!(subpixel_refine(&map, &at(4.0, 0.0), 1e-6).is_err());
    assert!(subpixel_refine(&map, &at(1.5, 0.0), 1e-6).is_err());
}

#[test]
fn neighborhood_depends_only_on_nearby_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let field = Tensor::randn(&[10, 10, 3], 1.0, &mut rng);
    let p = at(4.3, 5.6);
    let base = sample_neighborhoods(&field, &p, 3);
    // the 3x3 window around (4.3, 5.6) touches columns 3..=6 and rows 4..=7
    let mut far = field.clone();
    for r in 0..10 {
        for c in 0..10 {
            if !(3..=6).contains(&c) || !(4..=7).contains(&r) {
                for k in 0..3 {
                    far.data_mut()[(r * 10 + c) * 3 + k] += 100.0;
                }
            }
        }
    }
    assert_eq!(sample_neighborhoods(&far, &p, 3), base);
    let mut near = field.clone();
    near.data_mut()[(5 * 10 + 5) * 3] += 1.0;
    assert_ne!(sample_neighborhoods(&near, &p, 3), base);
}

#[test]
fn integer_interior_point_reads_grid_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let field = Tensor::randn(&[6, 6, 2], 1.0, &mut rng);
    let nb = &sample_neighborhoods(&field, &at(2.0, 3.0), 3)[0];
    let mut k = 0;
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (r, c) = ((3 + dy) as usize, (2 + dx) as usize);
            assert_eq!(nb[k], field.data()[(r * 6 + c) * 2..(r * 6 + c) * 2 + 2].to_vec());
            k += 1;
        }
    }
}

proptest! {
    #[test]
    fn refinement_moves_at_most_one_cell(
        values in proptest::collection::vec(-10.0f64..10.0, 36),
        px in 0usize..6,
        py in 0usize..6,
    ) {
        let map = Tensor::matrix(6, 6, values).unwrap();
        let out = subpixel_refine(&map, &at(px as f64, py as f64), 1e-6).unwrap();
        let p = &out.points[0];
        prop_assert!((p.x - px as f64).abs() <= 1.0);
        prop_assert!((p.y - py as f64).abs() <= 1.0);
        prop_assert!(p.x.is_finite() && p.y.is_finite());
    }

    #[test]
    fn nms_output_is_disjoint(seed in 0u64..1000, radius in 0.5f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_heatmap(&mut rng, 12, 12, seed % 2 == 0);
        let set = nms_extract(&map, radius, 16);
        for (i, a) in set.points.iter().enumerate() {
            prop_assert!(a.score > 0.0);
            for b in &set.points[i + 1..] {
                let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
                prop_assert!(d2 > radius * radius);
            }
        }
    }
}
