//! Procedural pedestrian-like identities for desk-scale experiments.
//!
//! Each identity is a fixed layout of colour blocks (head, textured torso,
//! legs, optional bag) drawn over a background. Per-image jitter moves the
//! figure, scales its brightness, replaces the background with a random
//! colour gradient plus clutter, and adds pixel noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{synth_lr, Image, LabeledImage, MlrDataset, TRAIN_RATES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyOptions {
    /// Identities per split; the test split gets as many fresh ones.
    pub num_ids: usize,
    /// Train images per identity, and gallery and query images per test
    /// identity.
    pub imgs_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub jitter: bool,
    /// Rates the LR camera draws from.
    pub rates: Vec<u32>,
}

impl ToyOptions {
    pub fn new(num_ids: usize, imgs_per_id: usize, (height, width): (usize, usize), seed: u64) -> Self {
        Self {
            num_ids,
            imgs_per_id,
            height,
            width,
            seed,
            jitter: true,
            rates: TRAIN_RATES.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Plain,
    Horizontal(usize),
    Vertical(usize),
    Checker(usize),
}

#[derive(Clone, Debug)]
struct Appearance {
    head: [f32; 3],
    torso: [f32; 3],
    legs: [f32; 3],
    texture: Texture,
    bag: Option<([f32; 3], bool)>,
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

impl Appearance {
    fn random(rng: &mut impl Rng) -> Self {
        let texture = match rng.gen_range(0..4) {
            0 => Texture::Plain,
            1 => Texture::Horizontal(rng.gen_range(2..=3)),
            2 => Texture::Vertical(rng.gen_range(2..=3)),
            _ => Texture::Checker(rng.gen_range(2..=3)),
        };
        let bag = rng.gen_bool(0.5).then(|| (color(rng), rng.gen_bool(0.5)));
        Self {
            head: color(rng),
            torso: color(rng),
            legs: color(rng),
            texture,
            bag,
        }
    }

    /// Colour at normalised coordinates (u down, v across), or `None` for
    /// background. `py, px` are pixel coordinates used by the texture.
    fn sample(&self, u: f32, v: f32, py: usize, px: usize) -> Option<[f32; 3]> {
        let inside = |u0: f32, u1: f32, v0: f32, v1: f32| u >= u0 && u < u1 && v >= v0 && v < v1;
        if inside(0.05, 0.2, 0.35, 0.65) {
            return Some(self.head);
        }
        if inside(0.2, 0.55, 0.22, 0.78) {
            let bump = match self.texture {
                Texture::Plain => 0.0,
                Texture::Horizontal(p) => stripe(py, p),
                Texture::Vertical(p) => stripe(px, p),
                Texture::Checker(p) => stripe(py / p + px / p, 1),
            };
            return Some(self.torso.map(|c| c + 0.2 * bump));
        }
        if inside(0.55, 0.95, 0.28, 0.72) && !inside(0.7, 0.95, 0.47, 0.53) {
            return Some(self.legs);
        }
        if let Some((c, left)) = self.bag {
            let (v0, v1) = if left { (0.08, 0.22) } else { (0.78, 0.92) };
            if inside(0.3, 0.5, v0, v1) {
                return Some(c);
            }
        }
        None
    }
}

fn stripe(coord: usize, period: usize) -> f32 {
    if (coord / period) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

struct Jitter {
    dy: i32,
    dx: i32,
    brightness: f32,
    background: [f32; 3],
    gradient: [f32; 3],
    clutter: Vec<(f32, f32, f32, f32, [f32; 3])>,
    noise: f32,
}

impl Jitter {
    fn none() -> Self {
        Self {
            dy: 0,
            dx: 0,
            brightness: 1.0,
            background: [0.5; 3],
            gradient: [0.0; 3],
            clutter: Vec::new(),
            noise: 0.0,
        }
    }

    fn random(rng: &mut impl Rng) -> Self {
        let clutter = (0..rng.gen_range(0..3))
            .map(|_| {
                let u0 = rng.gen_range(0.0..0.8);
                let v0 = rng.gen_range(0.0..0.8);
                (u0, u0 + rng.gen_range(0.1..0.3), v0, v0 + rng.gen_range(0.1..0.3), color(rng))
            })
            .collect();
        Self {
            dy: rng.gen_range(-2..=2),
            dx: rng.gen_range(-1..=1),
            brightness: rng.gen_range(0.8..1.2),
            background: color(rng),
            gradient: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
            clutter,
            noise: 0.02,
        }
    }
}

fn render(app: &Appearance, jit: &Jitter, h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut noise: Vec<f32> = Vec::new();
    if jit.noise > 0.0 {
        noise = (0..3 * h * w).map(|_| normal.sample(rng) * jit.noise).collect();
    }
    let mut img = Image::from_fn(h, w, |c, y, x| {
        let sy = y as i32 - jit.dy;
        let sx = x as i32 - jit.dx;
        let u = (sy as f32 + 0.5) / h as f32;
        let v = (sx as f32 + 0.5) / w as f32;
        let person = (sy >= 0 && sx >= 0)
            .then(|| app.sample(u, v, sy as usize, sx as usize))
            .flatten();
        let base = match person {
            Some(col) => col[c] * jit.brightness,
            None => {
                let (bu, bv) = ((y as f32 + 0.5) / h as f32, (x as f32 + 0.5) / w as f32);
                let hit = jit
                    .clutter
                    .iter()
                    .find(|(u0, u1, v0, v1, _)| bu >= *u0 && bu < *u1 && bv >= *v0 && bv < *v1);
                match hit {
                    Some((.., col)) => col[c],
                    None => jit.background[c] + jit.gradient[c] * (bu - 0.5),
                }
            }
        };
        let n = if noise.is_empty() { 0.0 } else { noise[(c * h + y) * w + x] };
        base + n
    });
    img.quantize();
    img
}

/// Generates a toy multi-low-resolution dataset.
///
/// Train identities are `0..num_ids` with `imgs_per_id` HR images each
/// (cameras alternate). Test identities are `num_ids..2*num_ids`; each has
/// `imgs_per_id` HR gallery images from camera 0 and `imgs_per_id` queries
/// from camera 1, down-sampled at a rate drawn uniformly from `rates`, whose
/// HR sources are kept as references. All pixels lie on the 8-bit grid.
pub fn make_toy_dataset(opts: &ToyOptions) -> Result<MlrDataset> {
    if opts.num_ids < 2 || opts.imgs_per_id < 2 {
        return Err(Error::Dataset(format!(
            "toy dataset needs at least 2 identities and 2 images per identity, got {} and {}",
            opts.num_ids, opts.imgs_per_id
        )));
    }
    if opts.height < 4 || opts.width < 4 {
        return Err(Error::Dataset(format!("image size {}x{} is too small", opts.height, opts.width)));
    }
    if opts.rates.is_empty() || opts.rates.iter().any(|&r| r < 2) {
        return Err(Error::Dataset(format!("LR rates must be at least 2, got {:?}", opts.rates)));
    }
    let mut id_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut img_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let looks: Vec<Appearance> = (0..2 * opts.num_ids).map(|_| Appearance::random(&mut id_rng)).collect();
    let (h, w) = (opts.height, opts.width);

    let draw = |identity: usize, camera: usize, rng: &mut ChaCha8Rng| {
        let jit = if opts.jitter { Jitter::random(rng) } else { Jitter::none() };
        LabeledImage {
            pixels: render(&looks[identity], &jit, h, w, rng),
            identity,
            camera,
            rate: 1,
        }
    };

    let mut train = Vec::new();
    for id in 0..opts.num_ids {
        for k in 0..opts.imgs_per_id {
            train.push(draw(id, k % 2, &mut img_rng));
        }
    }
    let (mut queries, mut gallery, mut references) = (Vec::new(), Vec::new(), Vec::new());
    for id in opts.num_ids..2 * opts.num_ids {
        for _ in 0..opts.imgs_per_id {
            gallery.push(draw(id, 0, &mut img_rng));
        }
        for _ in 0..opts.imgs_per_id {
            let hr = draw(id, 1, &mut img_rng);
            let rate = *opts.rates.choose(&mut img_rng).expect("non-empty rates");
            let mut lr = synth_lr(&hr, rate)?;
            lr.pixels.quantize();
            queries.push(lr);
            references.push(hr);
        }
    }
    let ds = MlrDataset {
        train,
        queries,
        gallery,
        references,
        num_identities: opts.num_ids,
    };
    ds.validate()?;
    Ok(ds)
}
