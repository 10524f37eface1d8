use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use transvae_core::data::{
    frame_stats, generate, render_frame, shuffle_frames, Dataset, GenConfig, GlyphSpec, Mode,
    MotionSpec, BACKGROUND, SIDE,
};

/// Centre of mass of the non-background pixels of one frame.
fn centre_of_mass(frame: &[f32]) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let px = &frame[(y * SIDE + x) * 3..(y * SIDE + x + 1) * 3];
            if px.iter().any(|&v| v != BACKGROUND) {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

#[test]
fn files_are_byte_identical_across_generations() {
    let tmp = TempDir::new().unwrap();
    let cfg = GenConfig {
        per_class: 10,
        ..GenConfig::default()
    };
    for name in ["a", "b"] {
        let (train, _) = generate(&cfg).unwrap();
        train.save(&tmp.path().join(name)).unwrap();
    }
    assert_eq!(
        fs::read(tmp.path().join("a")).unwrap(),
        fs::read(tmp.path().join("b")).unwrap()
    );
}

#[test]
fn file_length_matches_header_arithmetic() {
    let tmp = TempDir::new().unwrap();
    let (train, _) = generate(&GenConfig {
        per_class: 5,
        ..GenConfig::default()
    })
    .unwrap();
    let path = tmp.path().join("train.tsvd");
    train.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"TSVD1");
    let header = 5 + 6 * 4;
    assert_eq!(
        bytes.len(),
        header + train.len() * (2 + 4 * train.frames * train.dim)
    );
    assert_eq!(Dataset::load(&path).unwrap(), train);
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn default_corpus_is_balanced() {
    let (train, test) = generate(&GenConfig::default()).unwrap();
    assert_eq!(train.len() + test.len(), 2 * 4 * 100);
    for (ds, per_cell) in [(&train, 80), (&test, 20)] {
        for domain in 0..2u8 {
            for class in 0..4u8 {
                let n = (0..ds.len())
                    .filter(|&i| ds.domains[i] == domain && ds.labels[i] == class)
                    .count();
                assert_eq!(n, per_cell, "domain {domain} class {class}");
            }
        }
    }
}

#[test]
fn feature_mode_is_standardized_on_train() {
    let (train, test) = generate(&GenConfig {
        per_class: 20,
        mode: Mode::Feature,
        ..GenConfig::default()
    })
    .unwrap();
    assert_eq!((train.dim, test.dim), (64, 64));
    for (mean, std) in frame_stats(&train) {
        assert!(
            mean.abs() < 0.1 && (0.9..=1.1).contains(&std),
            "{mean} {std}"
        );
    }
    assert!(test.data.iter().all(|v| v.is_finite()));
}

#[test]
fn orbit_visits_opposite_sides() {
    let glyph = GlyphSpec {
        domain: 0,
        shape: 0,
        colour: 0,
    };
    let motion = MotionSpec {
        class: 2,
        phase: 0.0,
    };
    let (x0, _) = centre_of_mass(&render_frame(&glyph, &motion, 0, 8));
    let (x4, _) = centre_of_mass(&render_frame(&glyph, &motion, 4, 8));
    assert!((x0 - x4).abs() >= 4.0, "{x0} vs {x4}");
}

#[test]
fn domains_share_trajectories_but_not_colours() {
    for class in 0..4 {
        let motion = MotionSpec { class, phase: 1.3 };
        let a = GlyphSpec {
            domain: 0,
            shape: 1,
            colour: 2,
        };
        let b = GlyphSpec {
            domain: 1,
            shape: 1,
            colour: 2,
        };
        for t in 0..8 {
            let (fa, fb) = (
                render_frame(&a, &motion, t, 8),
                render_frame(&b, &motion, t, 8),
            );
            let (ca, cb) = (centre_of_mass(&fa), centre_of_mass(&fb));
            assert!(
                (ca.0 - cb.0).abs() < 1.0 && (ca.1 - cb.1).abs() < 1.0,
                "class {class} t {t}: {ca:?} {cb:?}"
            );
            assert_ne!(fa, fb);
        }
    }
}

proptest! {
    #[test]
    fn shuffled_frames_are_a_non_identity_permutation(frames in 2usize..9, dim in 1usize..5, seed in 0u64..10_000) {
        let seq: Vec<f32> = (0..frames * dim).map(|i| i as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, perm) = shuffle_frames(&seq, frames, &mut rng).unwrap();
        prop_assert!(perm.iter().enumerate().any(|(i, &p)| i != p));
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..frames).collect::<Vec<_>>());
        for (slot, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&out[slot * dim..(slot + 1) * dim], &seq[src * dim..(src + 1) * dim]);
        }
        let again = shuffle_frames(&seq, frames, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(again.1, perm);
    }

    #[test]
    fn image_frames_stay_in_unit_range(class in 0usize..4, shape in 0usize..3, colour in 0usize..3, domain in 0usize..2, phase in 0.0f64..std::f64::consts::TAU, t in 0usize..8) {
        let frame = render_frame(&GlyphSpec { domain, shape, colour }, &MotionSpec { class, phase }, t, 8);
        prop_assert!(frame.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(frame.chunks_exact(3).filter(|px| px.iter().any(|&v| v != BACKGROUND)).count() >= 4);
    }
}
