//! Image datasets: IDX pairs, binary PPM files with a label sidecar, and a
//! synthetic generator for tests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Grid3D, Image, RngState};
use crate::model::InputShape;

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub shape: InputShape,
    pub classes: usize,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// `classes` defaults to one more than the largest label.
    pub fn new(name: impl Into<String>, images: Vec<Image>, labels: Vec<usize>, classes: Option<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let shape = match images.first() {
            Some(x) => InputShape::of(x),
            None => return Err(Error::invalid("dataset has no samples")),
        };
        for (i, x) in images.iter().enumerate() {
            shape.check(x).map_err(|_| Error::shape(format!("image {i} is {:?}, expected {shape:?}", x.dims())))?;
            if x.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("image {i} has values outside [0, 1]")));
            }
        }
        let needed = labels.iter().max().map_or(0, |&m| m + 1);
        let classes = classes.unwrap_or(needed);
        if needed > classes {
            return Err(Error::invalid(format!("label {} out of range for {classes} classes", needed - 1)));
        }
        Ok(Self { name: name.into(), shape, classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: offset as u64, message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an IDX byte buffer with the given magic; returns dims and payload.
fn parse_idx<'a>(path: &'a Path, bytes: &'a [u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let mut c = Cursor { path, bytes, pos: 0 };
    let got = c.u32_be("magic").map_err(|_| c.err(0, "missing or short IDX magic"))?;
    if got != magic {
        return Err(c.err(0, format!("bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(c.u32_be(&format!("dimension {i}"))? as usize);
    }
    let n: usize = dims.iter().product();
    let payload = c.take(n, "payload")?;
    if c.pos != bytes.len() {
        return Err(c.err(c.pos, format!("{} trailing bytes after payload", bytes.len() - c.pos)));
    }
    Ok((dims, payload))
}

/// Images from an `0x803` IDX buffer, scaled from u8 to `[0, 1]`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Vec<Image>> {
    let (dims, payload) = parse_idx(path, bytes, IDX_IMAGES, 3)?;
    let (h, w) = (dims[1], dims[2]);
    if h == 0 || w == 0 {
        return Err(Error::Format { path: path.to_path_buf(), offset: 8, message: "zero image dimension".into() });
    }
    payload
        .chunks(h * w)
        .take(dims[0])
        .map(|px| Grid3D::new(h, w, 1, px.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect()
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse_idx(path, bytes, IDX_LABELS, 1)?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Load an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let xs = parse_idx_images(images, &read_file(images)?)?;
    let ys = parse_idx_labels(labels, &read_file(labels)?)?;
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            xs.len(),
            labels.display(),
            ys.len()
        )));
    }
    let name = images.file_stem().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, xs, ys, None)
}

/// Load the conventional `{split}-images.idx3-ubyte` / `{split}-labels.idx1-ubyte` pair.
pub fn load_idx_split(dir: &Path, split: &str) -> Result<Dataset> {
    let mut d = load_idx(&dir.join(format!("{split}-images.idx3-ubyte")), &dir.join(format!("{split}-labels.idx1-ubyte")))?;
    d.name = format!("{}/{split}", dir.file_name().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned()));
    Ok(d)
}

fn ppm_token<'a>(c: &mut Cursor<'a>, what: &str) -> Result<&'a str> {
    loop {
        match c.bytes.get(c.pos) {
            Some(b'#') => {
                while let Some(&b) = c.bytes.get(c.pos) {
                    c.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => c.pos += 1,
            Some(_) => break,
            None => return Err(c.err(c.pos, format!("truncated header: missing {what}"))),
        }
    }
    let start = c.pos;
    while c.bytes.get(c.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        c.pos += 1;
    }
    std::str::from_utf8(&c.bytes[start..c.pos]).map_err(|_| c.err(start, format!("non-ASCII {what}")))
}

fn ppm_number(c: &mut Cursor<'_>, what: &str) -> Result<usize> {
    let at = c.pos;
    let tok = ppm_token(c, what)?;
    tok.parse().map_err(|_| c.err(at, format!("bad {what} '{tok}'")))
}

/// One binary (P6) PPM with maxval 255, scaled to `[0, 1]`.
pub fn parse_ppm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut c = Cursor { path, bytes, pos: 0 };
    let magic = ppm_token(&mut c, "magic")?;
    if magic != "P6" {
        return Err(c.err(0, format!("unsupported PPM variant '{magic}', only binary P6 is read")));
    }
    let w = ppm_number(&mut c, "width")?;
    let h = ppm_number(&mut c, "height")?;
    let at = c.pos;
    let maxval = ppm_number(&mut c, "maxval")?;
    if maxval != 255 {
        return Err(c.err(at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(c.err(at, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    c.take(1, "header terminator")?;
    let raster = c.take(w * h * 3, "raster")?;
    Grid3D::new(h, w, 3, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

/// `filename,label` rows, optional header. Keys are bare file names.
pub fn read_label_sidecar(path: &Path) -> Result<HashMap<String, usize>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        if rec.len() != 2 {
            return Err(Error::invalid(format!("{} line {}: expected filename,label", path.display(), i + 1)));
        }
        match rec[1].parse::<usize>() {
            Ok(y) => {
                out.insert(rec[0].to_string(), y);
            }
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::invalid(format!("{} line {}: bad label '{}'", path.display(), i + 1, &rec[1]))),
        }
    }
    Ok(out)
}

/// Load PPM files in the given order, labelled from the sidecar CSV.
pub fn load_ppm(paths: &[PathBuf], sidecar: &Path) -> Result<Dataset> {
    let labels = read_label_sidecar(sidecar)?;
    let mut xs = Vec::with_capacity(paths.len());
    let mut ys = Vec::with_capacity(paths.len());
    for p in paths {
        let key = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let y = *labels
            .get(&key)
            .ok_or_else(|| Error::invalid(format!("no label for {} in {}", p.display(), sidecar.display())))?;
        xs.push(parse_ppm(p, &read_file(p)?)?);
        ys.push(y);
    }
    let name = sidecar.parent().and_then(|d| d.file_name()).map_or_else(|| "ppm".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, xs, ys, None)
}

/// All `*.ppm` files of a directory, sorted by name.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    out.sort();
    Ok(out)
}

/// Class-conditional blobs: each class has a random prototype image and
/// samples are the prototype plus uniform noise, clipped to `[0, 1]`.
pub fn synthetic_blobs(n: usize, shape: InputShape, classes: usize, noise: f64, rng: &mut RngState) -> Result<Dataset> {
    if classes < 2 || n == 0 {
        return Err(Error::invalid("synthetic data needs at least 2 classes and 1 sample"));
    }
    let protos: Vec<Vec<f64>> = (0..classes).map(|_| (0..shape.len()).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let v = protos[y].iter().map(|&p| (p + rng.uniform(-noise, noise)).clamp(0.0, 1.0)).collect();
        xs.push(Grid3D::new(shape.height, shape.width, shape.channels, v)?);
        ys.push(y);
    }
    Dataset::new("synthetic", xs, ys, Some(classes))
}
