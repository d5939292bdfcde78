//! Directory layout:
//!
//! ```text
//! root/manifest.txt
//! root/images/00000.png   8-bit RGB
//! root/masks/00000.png    8-bit gray, class ids, 255 = ignore
//! ```
//!
//! `manifest.txt` lists one sample per line, `image_path [mask_path]`,
//! relative to the root. Lines starting with `#` are comments; a
//! `# domain: source|target` comment records the domain tag.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::IGNORE_ID;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Dataset(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: Option<String>,
}

/// A fully loaded dataset. Images are `[H, W, 3]` scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub domain: Domain,
    pub entries: Vec<ManifestEntry>,
    pub height: usize,
    pub width: usize,
    pub images: Vec<Tensor<f32>>,
    pub masks: Vec<Option<Vec<u8>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn has_all_masks(&self) -> bool {
        self.masks.iter().all(Option::is_some)
    }

    /// All masks, failing if any image is unlabeled.
    pub fn labeled_masks(&self) -> Result<Vec<&[u8]>> {
        self.masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.as_deref().ok_or_else(|| {
                    Error::Dataset(format!(
                        "{}: sample {i} has no mask",
                        self.root.display()
                    ))
                })
            })
            .collect()
    }
}

pub fn encode_rgb_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, rgb, png::ColorType::Rgb)
}

pub fn encode_gray_png(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, gray, png::ColorType::Grayscale)
}

fn encode_png(width: usize, height: usize, data: &[u8], color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Dataset(format!("png encode: {e}")))?;
        w.write_image_data(data)
            .map_err(|e| Error::Dataset(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Decodes an 8-bit PNG into `(width, height, channels, bytes)`.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Dataset(format!("png decode: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Dataset(format!("png decode: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Dataset(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Dataset(format!("unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_manifest(text: &str) -> Result<(Domain, Vec<ManifestEntry>)> {
    let mut domain = None;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(d) = comment.trim().strip_prefix("domain:") {
                domain = Some(d.parse()?);
            }
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [img] => entries.push(ManifestEntry {
                image: img.to_string(),
                mask: None,
            }),
            [img, mask] => entries.push(ManifestEntry {
                image: img.to_string(),
                mask: Some(mask.to_string()),
            }),
            _ => {
                return Err(Error::Dataset(format!(
                    "manifest line {}: expected `image [mask]`, got `{line}`",
                    n + 1
                )))
            }
        }
    }
    let domain = domain.unwrap_or(if entries.iter().all(|e| e.mask.is_some()) {
        Domain::Source
    } else {
        Domain::Target
    });
    Ok((domain, entries))
}

/// Loads manifest, images and masks.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref().to_path_buf();
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let (domain, entries) = parse_manifest(&text)?;
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{}: empty manifest", manifest_path.display())));
    }
    let mut dims = None;
    let mut images = Vec::with_capacity(entries.len());
    let mut masks = Vec::with_capacity(entries.len());
    for e in &entries {
        let (w, h, c, bytes) = decode_png(&read_file(&root.join(&e.image))?)?;
        if c != 3 {
            return Err(Error::Dataset(format!("{}: expected RGB, got {c} channels", e.image)));
        }
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Dataset(format!(
                    "{}: {}x{} differs from dataset size {}x{}",
                    e.image, h, w, d.0, d.1
                )))
            }
            _ => {}
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Tensor::new(&[h, w, 3], data)?);
        let mask = match &e.mask {
            None => None,
            Some(p) => {
                let (mw, mh, mc, m) = decode_png(&read_file(&root.join(p))?)?;
                if (mw, mh) != (w, h) || mc != 1 {
                    return Err(Error::Dataset(format!(
                        "{p}: mask is {mh}x{mw}x{mc}, image is {h}x{w}"
                    )));
                }
                Some(m)
            }
        };
        masks.push(mask);
    }
    let (height, width) = dims.expect("non-empty");
    Ok(Dataset {
        root,
        domain,
        entries,
        height,
        width,
        images,
        masks,
    })
}

/// Writes images (RGB bytes) and optional masks in the standard layout.
pub fn write_dataset(
    root: impl AsRef<Path>,
    domain: Domain,
    width: usize,
    height: usize,
    samples: &[(Vec<u8>, Option<Vec<u8>>)],
) -> Result<()> {
    let root = root.as_ref();
    let img_dir = root.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    if samples.iter().any(|s| s.1.is_some()) {
        let mask_dir = root.join("masks");
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    }
    let mut manifest = format!("# fctn dataset v1\n# domain: {domain}\n");
    for (i, (rgb, mask)) in samples.iter().enumerate() {
        let img_rel = format!("images/{i:05}.png");
        let path = root.join(&img_rel);
        fs::write(&path, encode_rgb_png(width, height, rgb)?).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&img_rel);
        if let Some(m) = mask {
            let mask_rel = format!("masks/{i:05}.png");
            let path = root.join(&mask_rel);
            fs::write(&path, encode_gray_png(width, height, m)?)
                .map_err(|e| Error::io(&path, e))?;
            manifest.push(' ');
            manifest.push_str(&mask_rel);
        }
        manifest.push('\n');
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// External label id -> train id table. Unlisted ids map to the ignore id.
///
/// File format: one `external_id train_id` pair per line, `#` comments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMapping {
    table: BTreeMap<u8, u8>,
}

impl IdMapping {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
            let [a, b] = nums.as_slice() else {
                return Err(Error::Dataset(format!("id mapping line {}: `{line}`", n + 1)));
            };
            let parse = |s: &str| {
                s.parse::<u8>()
                    .map_err(|_| Error::Dataset(format!("id mapping line {}: bad id `{s}`", n + 1)))
            };
            if table.insert(parse(a)?, parse(b)?).is_some() {
                return Err(Error::Dataset(format!("id mapping line {}: duplicate id {a}", n + 1)));
            }
        }
        Ok(IdMapping { table })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn map(&self, id: u8) -> u8 {
        self.table.get(&id).copied().unwrap_or(IGNORE_ID)
    }

    pub fn apply(&self, mask: &mut [u8]) {
        for v in mask {
            *v = self.map(*v);
        }
    }

    /// Largest train id produced (ignoring the ignore id).
    pub fn max_train_id(&self) -> Option<u8> {
        self.table.values().copied().filter(|&v| v != IGNORE_ID).max()
    }
}

/// Copies an external dataset (same layout) into `dst`, remapping masks.
pub fn import_dataset(
    src: impl AsRef<Path>,
    mapping: &IdMapping,
    dst: impl AsRef<Path>,
    domain: Domain,
) -> Result<usize> {
    let src = src.as_ref();
    let manifest_path = src.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let (_, entries) = parse_manifest(&text)?;
    let mut samples = Vec::with_capacity(entries.len());
    let mut dims = None;
    for e in &entries {
        let (w, h, c, rgb) = decode_png(&read_file(&src.join(&e.image))?)?;
        let rgb = match c {
            3 => rgb,
            4 => rgb.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            _ => return Err(Error::Dataset(format!("{}: unsupported channel count {c}", e.image))),
        };
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(Error::Dataset(format!("{}: inconsistent image size", e.image)));
        }
        let mask = match &e.mask {
            Some(p) => {
                let (mw, mh, mc, mut m) = decode_png(&read_file(&src.join(p))?)?;
                if (mw, mh) != (w, h) || mc != 1 {
                    return Err(Error::Dataset(format!("{p}: mask/image dimension mismatch")));
                }
                mapping.apply(&mut m);
                Some(m)
            }
            None => None,
        };
        samples.push((rgb, mask));
    }
    let (w, h) = dims.ok_or_else(|| Error::Dataset("empty source manifest".into()))?;
    write_dataset(dst, domain, w, h, &samples)?;
    Ok(samples.len())
}
