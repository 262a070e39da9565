use ndarray::Array2;

use super::{sampled_frames, SceneSpec};
use crate::error::{Error, Result};
use crate::rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation of the additive per-segment noise.
pub const SEGMENT_NOISE_SCALE: f64 = 0.01;

const BASIS_SCALE: f64 = 0.35;

/// Frame span `[start, end]` covered by segment `m` on the sampling grid.
pub fn segment_span(num_frames: u32, n_stride: u32, m: usize) -> (u32, u32) {
    let start = 1 + (m as u32) * n_stride;
    let end = (start + n_stride - 1).min(num_frames);
    (start, end)
}

/// Segment-level feature vectors, one row per sampled segment.
///
/// A segment's vector is the sum of fixed basis vectors for every
/// (class, action-kind) pair active in its span (idle objects contribute
/// their class's `no_action` basis), plus a fixed positional component for
/// the segment index, plus small seeded noise. The basis is shared across
/// scenes and seeds, so identical activity maps to nearly identical
/// features.
pub fn segment_features(
    scene: &SceneSpec,
    n_stride: u32,
    d_cnn: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if d_cnn < 8 {
        return Err(Error::config(format!("d_cnn must be at least 8, got {d_cnn}")));
    }
    let grid = sampled_frames(scene.num_frames, n_stride);
    let mut feats = Array2::<f64>::zeros((grid.len(), d_cnn));
    let noise = Normal::new(0.0, SEGMENT_NOISE_SCALE).unwrap();

    for m in 0..grid.len() {
        let (start, end) = segment_span(scene.num_frames, n_stride, m);
        let mut row = feats.row_mut(m);

        for obj in &scene.objects {
            for kind in obj.kinds_in_window(start, end) {
                let basis = basis_vector(obj.class_index, kind.index(), d_cnn);
                for (r, b) in row.iter_mut().zip(&basis) {
                    *r += *b;
                }
            }
        }
        for (r, p) in row.iter_mut().zip(&positional_vector(m, d_cnn)) {
            *r += *p;
        }
        let mut noise_rng = rng::stream(seed, "seg-noise", &[scene.rng_seed, m as u64]);
        for r in row.iter_mut() {
            *r += noise.sample(&mut noise_rng);
        }
    }
    Ok(feats)
}

fn basis_vector(class_index: u32, kind_index: u64, d_cnn: usize) -> Vec<f64> {
    let mut rng = rng::stream(0, "seg-basis", &[u64::from(class_index), kind_index, d_cnn as u64]);
    let normal = Normal::new(0.0, BASIS_SCALE).unwrap();
    (0..d_cnn).map(|_| normal.sample(&mut rng)).collect()
}

fn positional_vector(m: usize, d_cnn: usize) -> Vec<f64> {
    let mut rng = rng::stream(0, "seg-pos", &[m as u64, d_cnn as u64]);
    let normal = Normal::new(0.0, BASIS_SCALE).unwrap();
    (0..d_cnn).map(|_| normal.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_universe, generate_scene, ActionEvent, ActionKind};

    #[test]
    fn deterministic_given_seed() {
        let u = build_universe(270).unwrap();
        let scene = generate_scene(&u, 300, 6, 11).unwrap();
        let a = segment_features(&scene, 12, 64, 3).unwrap();
        let b = segment_features(&scene, 12, 64, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vector_shape_matches_grid() {
        let u = build_universe(270).unwrap();
        let scene = generate_scene(&u, 300, 6, 11).unwrap();
        let f = segment_features(&scene, 12, 64, 3).unwrap();
        assert_eq!(f.shape(), &[25, 64]);
    }

    #[test]
    fn small_d_cnn_rejected() {
        let u = build_universe(270).unwrap();
        let scene = generate_scene(&u, 300, 6, 11).unwrap();
        assert!(segment_features(&scene, 12, 4, 3).is_err());
    }

    #[test]
    fn twin_segments_differ_only_by_noise() {
        // Two scenes whose first segment has identical (class, kind) activity
        // at the same segment index; only the noise stream differs.
        let u = build_universe(270).unwrap();
        let mut a = generate_scene(&u, 300, 4, 21).unwrap();
        let mut b = a.clone();
        b.rng_seed = 22; // different noise stream, same content
        for scene in [&mut a, &mut b] {
            for obj in &mut scene.objects {
                obj.actions = vec![ActionEvent {
                    kind: ActionKind::Rotate,
                    start: 1,
                    end: 50,
                }];
            }
        }
        let fa = segment_features(&a, 12, 64, 100).unwrap();
        let fb = segment_features(&b, 12, 64, 200).unwrap();
        let diff: f64 = fa
            .row(0)
            .iter()
            .zip(fb.row(0).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let bound = SEGMENT_NOISE_SCALE * (64.0f64).sqrt() * 6.0;
        assert!(diff <= bound, "twin segments differ by {diff} > {bound}");
        assert!(diff > 0.0, "independent noise streams should not collide");
    }
}
