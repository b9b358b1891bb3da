//! On-disk dataset layout: `<root>/images/*.png` (8-bit RGB) and a
//! tab-separated `<root>/index.tsv` with columns
//! `path identity camera rate split`, `split` one of `train`, `query`,
//! `gallery`. A `query` row with rate 1 is the HR reference of the n-th LR
//! query row, matched by order of appearance.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{Image, LabeledImage, MlrDataset};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.tsv";
const HEADER: &str = "path\tidentity\tcamera\trate\tsplit";

pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::io(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::io(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::io(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::io(
            path,
            format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let stride = info.line_size;
    Ok(Image::from_fn(h, w, |c, y, x| bytes[y * stride + 3 * x + c] as f32 / 255.0))
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(3 * img.height() * img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                bytes.push((img.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    writer.write_image_data(&bytes).map_err(|e| Error::io(path, e))?;
    writer.finish().map_err(|e| Error::io(path, e))
}

/// Writes images and the index under `root`. Pixels must already lie on the
/// 8-bit grid for the round trip to be exact (the toy generator guarantees
/// it).
pub fn save_dataset(dataset: &MlrDataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut index = String::from(HEADER);
    index.push('\n');
    let splits: [(&str, &[LabeledImage]); 4] = [
        ("train", &dataset.train),
        ("query", &dataset.queries),
        ("query", &dataset.references),
        ("gallery", &dataset.gallery),
    ];
    let mut n = 0usize;
    for (split, items) in splits {
        for img in items {
            let rel = format!("images/{n:06}.png");
            save_png(&img.pixels, &root.join(&rel))?;
            index.push_str(&format!(
                "{rel}\t{}\t{}\t{}\t{split}\n",
                img.identity, img.camera, img.rate
            ));
            n += 1;
        }
    }
    let path = root.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset; `index_file` is resolved relative to `root`.
pub fn load_dataset(root: &Path, index_file: impl AsRef<Path>) -> Result<MlrDataset> {
    let index_path = root.join(index_file);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut ds = MlrDataset {
        train: Vec::new(),
        queries: Vec::new(),
        gallery: Vec::new(),
        references: Vec::new(),
        num_identities: 0,
    };
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: index_path.clone(),
        line,
        msg,
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || (i == 0 && line == HEADER) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [path, identity, camera, rate, split] = cols[..] else {
            return Err(parse_err(lineno, format!("expected 5 tab-separated columns, found {}", cols.len())));
        };
        let num = |name: &str, v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(lineno, format!("{name} `{v}` is not a non-negative integer")))
        };
        let identity = num("identity", identity)?;
        let camera = num("camera", camera)?;
        let rate = num("rate", rate)?;
        if rate == 0 {
            return Err(parse_err(lineno, "rate must be at least 1".into()));
        }
        let pixels = load_png(&root.join(path))?;
        let img = LabeledImage {
            pixels,
            identity,
            camera,
            rate: rate as u32,
        };
        match (split, rate) {
            ("train", _) => ds.train.push(img),
            ("gallery", _) => ds.gallery.push(img),
            ("query", 1) => ds.references.push(img),
            ("query", _) => ds.queries.push(img),
            (other, _) => {
                return Err(parse_err(
                    lineno,
                    format!("split `{other}` is not one of train, query, gallery"),
                ))
            }
        }
    }
    ds.num_identities = ds.train_identities().len();
    ds.validate()?;
    Ok(ds)
}

/// Writes `bytes` to `path`, creating parent directories.
pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}
