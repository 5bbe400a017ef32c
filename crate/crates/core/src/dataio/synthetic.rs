use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::{
    normalize_keypoints, project, sample_weak_perspective_camera_with, CameraSampleConfig,
    UniversePoints,
};

use super::{CategoryDecl, DataError, DatasetManifest, KeypointInstance, Split, SyntheticConfig};

/// Degree-two monomial basis on centered coordinates.
fn poly_basis(p: [f64; 3]) -> [f64; 10] {
    let [x, y, z] = [p[0] - 0.5, p[1] - 0.5, p[2] - 0.5];
    [1.0, x, y, z, x * x, y * y, z * z, x * y, x * z, y * z]
}

/// Generates a synthetic dataset: per category a base shape uniform in the
/// unit cube; per instance a smooth polynomial deformation, a weak
/// perspective camera, projection, extent-scaled noise, occlusion and a
/// random keypoint order with ground-truth labels. Deterministic per seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<DatasetManifest, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.points_per_category;
    let camera_ranges = CameraSampleConfig::default();

    let mut categories = Vec::with_capacity(config.categories);
    let mut instances = Vec::new();

    for c in 0..config.categories {
        let name = format!("synth{c}");
        let base: Vec<[f64; 3]> = (0..d)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();

        let total = config.train_instances + config.test_instances;
        for idx in 0..total {
            let split = if idx < config.train_instances {
                Split::Train
            } else {
                Split::Test
            };

            // Per-instance smooth deformation: degree-2 polynomial
            // displacement field with bounded coefficients.
            let coeffs: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let deformed: Vec<[f64; 3]> = base
                .iter()
                .map(|p| {
                    let basis = poly_basis(*p);
                    let mut q = *p;
                    for axis in 0..3 {
                        let disp: f64 = basis
                            .iter()
                            .zip(&coeffs[axis * 10..(axis + 1) * 10])
                            .map(|(b, w)| b * w)
                            .sum();
                        q[axis] += config.deformation_amplitude * disp / 4.0;
                    }
                    q
                })
                .collect();

            let camera = sample_weak_perspective_camera_with(&mut rng, &camera_ranges);
            let shape = UniversePoints::new(c, deformed).expect("d >= 4 validated");
            let projected = project(&shape, &camera).expect("weak perspective cannot fail");

            // Occlusion mask, redrawn until at least 4 points stay visible.
            let visible: Vec<usize> = loop {
                let mask: Vec<bool> = (0..d)
                    .map(|_| rng.gen_range(0.0..1.0) < config.occlusion_probability)
                    .collect();
                let vis: Vec<usize> = (0..d).filter(|&i| !mask[i]).collect();
                if vis.len() >= 4 {
                    break vis;
                }
            };

            // Noise in normalized units: scale by the visible cloud extent.
            let vis_points: Vec<[f64; 2]> = visible
                .iter()
                .map(|&i| projected.points()[i])
                .collect();
            let (_, transform) = normalize_keypoints(&vis_points).expect("nonempty");
            let noisy: Vec<[f64; 2]> = vis_points
                .iter()
                .map(|p| {
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    [
                        p[0] + config.noise_sigma * transform.scale * nx,
                        p[1] + config.noise_sigma * transform.scale * ny,
                    ]
                })
                .collect();

            let mut order: Vec<usize> = (0..visible.len()).collect();
            order.shuffle(&mut rng);
            let keypoints: Vec<[f64; 2]> = order.iter().map(|&i| noisy[i]).collect();
            let labels: Vec<usize> = order.iter().map(|&i| visible[i]).collect();

            let split_tag = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            instances.push(KeypointInstance {
                id: format!("{name}_{split_tag}_{idx:04}"),
                category: name.clone(),
                split,
                keypoints,
                universe_labels: Some(labels),
            });
        }

        categories.push(CategoryDecl {
            name,
            universe_size: d,
            gt_points: Some(base),
        });
    }

    let manifest = DatasetManifest {
        version: super::MANIFEST_VERSION,
        categories,
        instances,
    };
    manifest.validate()?;
    Ok(manifest)
}
