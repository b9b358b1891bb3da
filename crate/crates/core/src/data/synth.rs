use super::{Image, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::conv;

/// Averages `r×r` cells. The output is `ceil(h/r) × ceil(w/r)`; partial cells
/// at the bottom and right edges average only the pixels they cover.
pub fn block_downsample(img: &Image, r: usize) -> Result<Image> {
    if r == 0 {
        return Err(Error::invalid("block_downsample", "rate must be positive"));
    }
    let (h, w) = (img.height, img.width);
    let (oh, ow) = (h.div_ceil(r), w.div_ceil(r));
    let mut data = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        for by in 0..oh {
            for bx in 0..ow {
                let (y0, y1) = (by * r, ((by + 1) * r).min(h));
                let (x0, x1) = (bx * r, ((bx + 1) * r).min(w));
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img.get(c, y, x) as f64;
                    }
                }
                data.push((acc / ((y1 - y0) * (x1 - x0)) as f64) as f32);
            }
        }
    }
    Ok(Image {
        height: oh,
        width: ow,
        data,
    })
}

/// Bilinear resize with the same sampling grid as the tensor op.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize_bilinear", "output size must be positive"));
    }
    let data = conv::bilinear_forward(&img.data, img.height, img.width, height, width)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Image { height, width, data })
}

/// Synthetic low-resolution counterpart: block-average down-sampling by `rate`
/// followed by bilinear up-resizing back to the original size.
pub fn synth_lr(image: &LabeledImage, rate: u32) -> Result<LabeledImage> {
    if rate < 2 {
        return Err(Error::invalid("synth_lr", format!("rate must be at least 2, got {rate}")));
    }
    let small = block_downsample(&image.pixels, rate as usize)?;
    let pixels = resize_bilinear(&small, image.pixels.height, image.pixels.width)?;
    Ok(LabeledImage {
        pixels,
        identity: image.identity,
        camera: image.camera,
        rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, values: &[f32]) -> LabeledImage {
        LabeledImage {
            pixels: Image::from_fn(h, w, |_, y, x| values[y * w + x]),
            identity: 0,
            camera: 0,
            rate: 1,
        }
    }

    #[test]
    fn two_by_two_collapses_to_block_mean() {
        // [[0,1],[2,3]] / 3 keeps values in range; block mean is 1.5 / 3
        let img = gray(2, 2, &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        let lr = synth_lr(&img, 2).unwrap();
        assert_eq!(lr.rate, 2);
        assert_eq!((lr.pixels.height(), lr.pixels.width()), (2, 2));
        for v in lr.pixels.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn rate_below_two_is_rejected() {
        let img = gray(2, 2, &[0.0; 4]);
        assert!(synth_lr(&img, 1).is_err());
        assert!(synth_lr(&img, 0).is_err());
    }

    #[test]
    fn ragged_edges_average_partial_cells() {
        let img = gray(3, 1, &[0.0, 0.5, 1.0]);
        let small = block_downsample(&img.pixels, 2).unwrap();
        assert_eq!((small.height(), small.width()), (2, 1));
        assert!((small.get(0, 0, 0) - 0.25).abs() < 1e-7);
        assert!((small.get(0, 1, 0) - 1.0).abs() < 1e-7);
    }

    fn image_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
        (1usize..=6, 1usize..=4).prop_flat_map(|(hb, wb)| {
            (Just(hb), Just(wb), proptest::collection::vec(0.0f32..=1.0, 3 * 12 * hb * 12 * wb))
        })
    }

    proptest! {
        // sizes are multiples of 12 so every rate in {2, 3, 4} divides them
        #[test]
        fn mean_preserved_when_rate_divides(
            (hb, wb, values) in image_strategy(),
            rate in prop_oneof![Just(2u32), Just(3), Just(4)],
        ) {
            let (h, w) = (12 * hb, 12 * wb);
            let img = LabeledImage {
                pixels: Image::new(h, w, values).unwrap(),
                identity: 1,
                camera: 1,
                rate: 1,
            };
            let lr = synth_lr(&img, rate).unwrap();
            // brute-force means, independent of the implementation's helper
            for c in 0..3 {
                let mut a = 0.0f64;
                let mut b = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        a += img.pixels.get(c, y, x) as f64;
                        b += lr.pixels.get(c, y, x) as f64;
                    }
                }
                let n = (h * w) as f64;
                prop_assert!((a / n - b / n).abs() < 1e-4, "channel {c}: {} vs {}", a / n, b / n);
            }
        }

        #[test]
        fn output_is_canonical_and_in_range(
            h in 1usize..20, w in 1usize..12, rate in 2u32..9, seed in any::<u64>(),
        ) {
            let mut s = seed;
            let img = LabeledImage {
                pixels: Image::from_fn(h, w, |_, _, _| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 40) as f32 / (1u64 << 24) as f32
                }),
                identity: 0,
                camera: 0,
                rate: 1,
            };
            let lr = synth_lr(&img, rate).unwrap();
            prop_assert_eq!((lr.pixels.height(), lr.pixels.width()), (h, w));
            prop_assert!(lr.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
