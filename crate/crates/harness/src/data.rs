//! Synthetic image-caption pairs: two colored shapes on a black canvas,
//! described by a fixed caption template.

use ashnet_tensor::rng::{derive_seed, seeded};
use ashnet_tensor::Tensor;
use rand::Rng as _;

use crate::error::{HarnessError, Result};

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
];

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "cross", "diamond", "ring"];

pub const CHANNELS: usize = 3;

/// Every word the caption template can produce.
pub fn caption_words() -> Vec<&'static str> {
    let mut words = vec!["a", "left", "of"];
    words.extend(COLORS.iter().map(|c| c.0));
    words.extend(SHAPES);
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Object {
    pub color: usize,
    pub shape: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub id: usize,
    /// `3 × size × size`, channel-major, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub caption: String,
    pub cluster_id: usize,
    pub objects: [Object; 2],
}

/// The left object shared by every member of a concept cluster.
pub fn cluster_object(k: usize) -> Object {
    Object {
        color: k % COLORS.len(),
        shape: (k % COLORS.len() + k / COLORS.len()) % SHAPES.len(),
    }
}

pub fn caption(objects: &[Object; 2]) -> String {
    let [l, r] = objects;
    format!(
        "a {} {} left of a {} {}",
        COLORS[l.color].0, SHAPES[l.shape], COLORS[r.color].0, SHAPES[r.shape]
    )
}

/// Inverse of [`caption`]; `None` when the text does not follow the template.
pub fn parse_caption(text: &str) -> Option<[Object; 2]> {
    let w: Vec<&str> = text.split_whitespace().collect();
    if w.len() != 8 || w[0] != "a" || w[3] != "left" || w[4] != "of" || w[5] != "a" {
        return None;
    }
    let object = |c: &str, s: &str| {
        Some(Object {
            color: COLORS.iter().position(|x| x.0 == c)?,
            shape: SHAPES.iter().position(|&x| x == s)?,
        })
    };
    Some([object(w[1], w[2])?, object(w[6], w[7])?])
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let dist = (dx * dx + dy * dy).sqrt();
    match SHAPES[shape] {
        "circle" => dist <= r,
        "square" => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        "triangle" => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        "cross" => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        "diamond" => dx.abs() + dy.abs() <= r,
        "ring" => (0.55 * r..=r).contains(&dist),
        _ => unreachable!("shape index out of range"),
    }
}

/// Paints `object` centred at `(cx, cy)` with radius `r` onto a canvas.
fn draw(image: &mut [f64], size: usize, object: Object, cx: f64, cy: f64, r: f64) {
    let plane = size * size;
    let rgb = COLORS[object.color].1;
    for y in 0..size {
        for x in 0..size {
            if inside(object.shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                for (c, v) in rgb.iter().enumerate() {
                    image[c * plane + y * size + x] = *v;
                }
            }
        }
    }
}

const DATA_TAG: u64 = 0xDA7A;

/// `n` pairs; pair `i` belongs to cluster `i mod clusters`, whose left object
/// is fixed while the right object, positions and sizes are drawn per pair.
pub fn generate_dataset(n: usize, clusters: usize, size: usize, seed: u64) -> Result<Vec<SyntheticPair>> {
    if n < 2 {
        return Err(HarnessError::Parameter(format!("dataset needs at least 2 pairs, got {n}")));
    }
    if clusters == 0 || clusters > COLORS.len() * SHAPES.len() {
        return Err(HarnessError::Parameter(format!("cluster count {clusters} outside 1..=48")));
    }
    if size < 8 {
        return Err(HarnessError::Parameter(format!("image size {size} below 8")));
    }
    Ok((0..n)
        .map(|id| {
            let mut rng = seeded(derive_seed(seed, &[DATA_TAG, id as u64]));
            let cluster_id = id % clusters;
            let right = Object {
                color: rng.random_range(0..COLORS.len()),
                shape: rng.random_range(0..SHAPES.len()),
            };
            let objects = [cluster_object(cluster_id), right];
            let half = size as f64 / 2.0;
            let mut image = vec![0.0; CHANNELS * size * size];
            for (slot, &object) in objects.iter().enumerate() {
                let jitter = half / 8.0;
                let cx = half * (slot as f64 + 0.5) + rng.random_range(-jitter..=jitter);
                let cy = half + rng.random_range(-2.0 * jitter..=2.0 * jitter);
                let r = half * rng.random_range(0.28..0.4);
                draw(&mut image, size, object, cx, cy, r);
            }
            SyntheticPair {
                id,
                image,
                caption: caption(&objects),
                cluster_id,
                objects,
            }
        })
        .collect())
}

/// Stacks the images of `ids` into a `[b, 3, size, size]` tensor.
pub fn stack_images(pairs: &[SyntheticPair], ids: &[usize], size: usize) -> Result<Tensor> {
    let data: Vec<f64> = ids.iter().flat_map(|&i| pairs[i].image.iter().copied()).collect();
    Ok(Tensor::new(&[ids.len(), CHANNELS, size, size], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_from_seed() {
        let a = generate_dataset(20, 8, 32, 3).unwrap();
        let b = generate_dataset(20, 8, 32, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(20, 8, 32, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn clusters_are_balanced() {
        let pairs = generate_dataset(512, 8, 32, 0).unwrap();
        let mut counts = [0usize; 8];
        pairs.iter().for_each(|p| counts[p.cluster_id] += 1);
        assert_eq!(counts, [64; 8]);
    }

    #[test]
    fn cluster_objects_are_distinct() {
        let objs: Vec<Object> = (0..48).map(cluster_object).collect();
        for i in 0..48 {
            for j in i + 1..48 {
                assert_ne!(objs[i], objs[j]);
            }
        }
    }

    #[test]
    fn captions_round_trip_to_drawn_objects() {
        for p in generate_dataset(200, 8, 32, 1).unwrap() {
            assert_eq!(parse_caption(&p.caption), Some(p.objects));
            // Each object's color is present in its half of the canvas.
            for (slot, o) in p.objects.iter().enumerate() {
                let rgb = COLORS[o.color].1;
                let found = (0..32).any(|y| {
                    (slot * 16..slot * 16 + 16).any(|x| (0..3).all(|c| p.image[c * 1024 + y * 32 + x] == rgb[c]))
                });
                assert!(found, "{} object missing in {}", slot, p.caption);
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_dataset(1, 8, 32, 0).is_err());
        assert!(generate_dataset(10, 0, 32, 0).is_err());
        assert!(parse_caption("a red circle right of a blue ring").is_none());
    }
}
