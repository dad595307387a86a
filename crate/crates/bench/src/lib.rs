//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saaf_core::data::{
    generate_facade, make_referring_sample, FacadeFiles, FacadeSpec, LoadedSample, Style, TargetClass,
};
use saaf_core::pipeline::PreparedSample;
use saaf_core::{ModelBundle, ModelConfig, Tensor};

/// A `[rows, cols]` leaf with uniform values in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::leaf(&[rows, cols], data, true).expect("consistent shape")
}

/// The toy model and one prepared photo sample.
pub fn toy_sample() -> (ModelBundle, PreparedSample) {
    let cfg = ModelConfig::default();
    let bundle = ModelBundle::new(cfg.clone(), 0, 1).expect("default config is valid");
    let v = &cfg.vision;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = FacadeSpec::sample(&mut rng, Style::Photo, v.image_height, v.image_width);
    let facade = generate_facade(&spec, 11).expect("feasible spec");
    let files = FacadeFiles {
        image: "bench.ppm".into(),
        window_mask: "window.pgm".into(),
        wall_mask: "wall.pgm".into(),
        sha256: String::new(),
        style: Style::Photo,
    };
    let class = TargetClass::Window;
    let sample = make_referring_sample("bench", &files, class.as_str(), class.descriptions()[1]).expect("valid sample");
    let loaded = LoadedSample { sample, image: facade.image, mask: facade.window };
    let prepared = PreparedSample::new(&bundle, &loaded).expect("encodable image");
    (bundle, prepared)
}
