//! Synthetic fixture: an image tree with class directories in which a known
//! subset is "planted" (red-dominant), plus a ratings CSV and a mock encoder
//! config whose color-sensitive vectors make the planted set learnable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const IMAGES_DIR: &str = "images";
pub const RATINGS_FILE: &str = "ratings.csv";
pub const ENCODER_FILE: &str = "encoder.toml";
pub const EXPECTED_FILE: &str = "expected.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: usize,
    pub planted: usize,
    pub classes: usize,
    pub seed: u64,
    pub dimension: usize,
    pub semantic_weight: f64,
}

/// Ground truth for the generated fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub planted: Vec<String>,
    pub planted_by_class: BTreeMap<String, usize>,
    pub total: usize,
}

fn jitter(rng: &mut ChaCha8Rng, center: f64, spread: f64) -> u8 {
    (center + rng.gen_range(-spread..=spread)).clamp(0.0, 255.0) as u8
}

fn draw(rng: &mut ChaCha8Rng, planted: bool) -> RgbImage {
    let w = rng.gen_range(24..=48);
    let h = rng.gen_range(24..=48);
    // Four quadrant base colors so the 2x2 color statistics vary.
    let bases: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            if planted {
                [rng.gen_range(170.0..230.0), rng.gen_range(10.0..60.0), rng.gen_range(10.0..60.0)]
            } else {
                match rng.gen_range(0..3) {
                    0 => [rng.gen_range(10.0..60.0), rng.gen_range(60.0..140.0), rng.gen_range(170.0..230.0)],
                    1 => [rng.gen_range(10.0..60.0), rng.gen_range(160.0..220.0), rng.gen_range(40.0..100.0)],
                    _ => {
                        let g = rng.gen_range(90.0..170.0);
                        [g, g, g + 10.0]
                    }
                }
            }
        })
        .collect();
    RgbImage::from_fn(w, h, |x, y| {
        let q = usize::from(x >= w / 2) + 2 * usize::from(y >= h / 2);
        let b = bases[q];
        Rgb([jitter(rng, b[0], 12.0), jitter(rng, b[1], 12.0), jitter(rng, b[2], 12.0)])
    })
}

pub fn generate(out: &Path, config: &SynthConfig) -> anyhow::Result<(Expected, Vec<PathBuf>)> {
    anyhow::ensure!(config.classes >= 1, "need at least one class");
    anyhow::ensure!(config.planted <= config.images, "cannot plant more images than exist");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..config.images).collect();
    order.shuffle(&mut rng);
    let mut is_planted = vec![false; config.images];
    for &i in &order[..config.planted] {
        is_planted[i] = true;
    }

    let images = out.join(IMAGES_DIR);
    let mut ratings = String::from("id,moral_mean\n");
    let mut expected = Expected {
        planted: Vec::new(),
        planted_by_class: BTreeMap::new(),
        total: config.images,
    };
    // Class sizes are deliberately uneven: image i lands in class
    // floor(classes * (i / images)^2).
    for (i, &planted) in is_planted.iter().enumerate() {
        let t = i as f64 / config.images as f64;
        let class = ((config.classes as f64 * t * t) as usize).min(config.classes - 1);
        let class_dir = format!("class{class:02}");
        let id = format!("{class_dir}/img{i:04}.png");
        let path = offscan_core::encoder::join_id(&images, &id);
        std::fs::create_dir_all(path.parent().expect("ids have a directory"))?;
        draw(&mut rng, planted)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        let rating: f64 = if planted {
            rng.gen_range(1.2..2.3)
        } else {
            rng.gen_range(3.7..4.8)
        };
        ratings.push_str(&format!("{id},{rating:.3}\n"));
        if planted {
            expected.planted.push(id);
            *expected.planted_by_class.entry(class_dir).or_default() += 1;
        }
    }
    let ratings_path = out.join(RATINGS_FILE);
    std::fs::write(&ratings_path, ratings)?;
    let encoder_path = out.join(ENCODER_FILE);
    std::fs::write(
        &encoder_path,
        format!(
            "[backend]\nkind = \"mock\"\ndimension = {}\nseed = {}\nsemantic_weight = {}\n",
            config.dimension, config.seed, config.semantic_weight
        ),
    )?;
    let expected_path = out.join(EXPECTED_FILE);
    std::fs::write(&expected_path, serde_json::to_string_pretty(&expected)? + "\n")?;
    Ok((expected, vec![images, ratings_path, encoder_path, expected_path]))
}
