//! Seeded synthetic street tiles for demos and end-to-end checks.
//!
//! Every tile is a noisy asphalt texture with a lane stripe. Hotspot tiles
//! add a saturated red disk; non-hotspot tiles sometimes carry a grey disk
//! (a manhole cover) so that shape alone does not separate the classes.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imagery::{sha256_hex, DatasetManifest, ImageRecord, ImageSource, ImageryError, Label, Location};
use crate::maskkit::BinaryMask;

pub const TOY_SIZE: u32 = 64;
pub const MIN_RADIUS: u32 = 10;
pub const MAX_RADIUS: u32 = 14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        dx * dx + dy * dy <= self.radius * self.radius
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the disk, clipped to the
    /// image.
    pub fn bbox(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let lo = |c: f64| (c - self.radius).floor().max(0.0) as u32;
        let hi = |c: f64, n: u32| ((c + self.radius).ceil() as u32).min(n).saturating_sub(1);
        (lo(self.cx), lo(self.cy), hi(self.cx, width), hi(self.cy, height))
    }

    pub fn mask(&self, width: u32, height: u32) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains(x, y))
    }

    pub fn bbox_mask(&self, width: u32, height: u32) -> BinaryMask {
        let (x0, y0, x1, y1) = self.bbox(width, height);
        BinaryMask::from_fn(width, height, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1)
    }
}

#[derive(Clone, Debug)]
pub struct ToyImage {
    pub image: RgbImage,
    pub hotspot: bool,
    /// The red disk for hotspot tiles, the grey decoy otherwise.
    pub disk: Option<Disk>,
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// One `size`×`size` tile, fully determined by `seed` and `hotspot`.
pub fn toy_image(seed: u64, hotspot: bool, size: u32) -> ToyImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ if hotspot { 0x5eed_0001 } else { 0 });
    let base = rng.gen_range(80.0..120.0);
    let tint = rng.gen_range(-6.0..6.0);
    let mut img = RgbImage::from_fn(size, size, |_, _| {
        let n: f64 = rng.gen_range(-14.0..14.0);
        let g = base + n;
        Rgb([clamp_u8(g + tint), clamp_u8(g), clamp_u8(g - tint)])
    });

    // Lane stripe, vertical or horizontal, white or yellow.
    let vertical = rng.gen_bool(0.5);
    let pos = rng.gen_range(size / 4..3 * size / 4);
    let stripe = if rng.gen_bool(0.5) { [225.0, 225.0, 220.0] } else { [220.0, 190.0, 60.0] };
    for i in 0..size {
        for d in 0..2 {
            let (x, y) = if vertical { (pos + d, i) } else { (i, pos + d) };
            if x < size && y < size && (i / 6) % 2 == 0 {
                img.put_pixel(x, y, Rgb(stripe.map(clamp_u8)));
            }
        }
    }

    let scale = size as f64 / TOY_SIZE as f64;
    let draw_disk = hotspot || rng.gen_bool(0.5);
    let disk = draw_disk.then(|| {
        let radius = rng.gen_range(MIN_RADIUS as f64..=MAX_RADIUS as f64) * scale;
        let margin = radius + 1.0;
        let cx = rng.gen_range(margin..size as f64 - margin);
        let cy = rng.gen_range(margin..size as f64 - margin);
        let disk = Disk { cx, cy, radius };
        let grey = rng.gen_range(60.0..170.0);
        for y in 0..size {
            for x in 0..size {
                if disk.contains(x, y) {
                    let px = if hotspot {
                        Rgb([clamp_u8(rng.gen_range(225.0..256.0)), rng.gen_range(0..20), rng.gen_range(0..20)])
                    } else {
                        let g = grey + rng.gen_range(-6.0..6.0);
                        Rgb([clamp_u8(g), clamp_u8(g), clamp_u8(g)])
                    };
                    img.put_pixel(x, y, px);
                }
            }
        }
        disk
    });
    ToyImage { image: img, hotspot, disk }
}

/// `n` tiles with alternating labels, starting with a hotspot.
pub fn toy_dataset(n: usize, seed: u64, size: u32) -> Vec<ToyImage> {
    (0..n)
        .map(|i| toy_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), i % 2 == 0, size))
        .collect()
}

/// Writes a labelled toy dataset under `root/images/toy` and returns its
/// manifest. Each tile gets its own fake location so the split treats
/// tiles independently.
pub fn write_toy_dataset(
    root: &Path,
    n: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<(DatasetManifest, Vec<ToyImage>), ImageryError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ImageryError::InvalidTestFraction(test_fraction));
    }
    let dir = root.join("images").join("toy");
    std::fs::create_dir_all(&dir)?;
    let tiles = toy_dataset(n, seed, TOY_SIZE);
    let mut records = Vec::with_capacity(n);
    for (i, tile) in tiles.iter().enumerate() {
        let mut bytes = Vec::new();
        tile.image
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let image_id = format!("toy-{i:04}");
        let rel = format!("images/toy/{image_id}.png");
        std::fs::write(root.join(&rel), &bytes)?;
        records.push(ImageRecord {
            image_id,
            location: Location::new(40.7 + i as f64 * 1e-3, -73.9),
            heading: 0.0,
            label: if tile.hotspot { Label::Hotspot } else { Label::NonHotspot },
            file_path: rel,
            content_hash: sha256_hex(&bytes),
            source: ImageSource::Fixture,
        });
    }
    let manifest = DatasetManifest {
        records,
        split_seed: seed,
        test_fraction,
    };
    Ok((manifest, tiles))
}
