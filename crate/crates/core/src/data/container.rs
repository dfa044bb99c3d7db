//! On-disk layout for distilled and outlier sets.
//!
//! A container is a directory holding a `manifest` (one `key=value` per
//! line) and little-endian binary arrays. Image arrays are `f32` in C order
//! after a header of four little-endian `i32` extents.

use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::{DistilledSet, ImageShape, Provenance, UnlabeledImageSet};
use crate::error::{Error, Result};
use crate::forge::Corruption;

pub const FORMAT_VERSION: u32 = 1;

/// Ordered `key=value` text file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: expected key=value", n + 1),
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("missing key `{key}`"),
        })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.require(key, path)?;
        raw.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("bad value `{raw}` for `{key}`"),
        })
    }

    fn check_version(&self, path: &Path) -> Result<()> {
        let found: u32 = self.parsed("format_version", path)?;
        if found != FORMAT_VERSION {
            return Err(Error::Incompatible {
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }
}

pub fn write_f32_array(path: &Path, array: &Array4<f32>) -> Result<()> {
    let (a, b, c, d) = array.dim();
    let mut bytes = Vec::with_capacity(16 + 4 * array.len());
    for e in [a, b, c, d] {
        bytes.extend_from_slice(&(e as i32).to_le_bytes());
    }
    for v in array.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_array(path: &Path) -> Result<Array4<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let parse_err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(parse_err("truncated shape header".into()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if v < 0 {
            return Err(parse_err(format!("negative extent {v}")));
        }
        *d = v as usize;
    }
    let n: usize = dims.iter().product();
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(parse_err(format!(
            "expected {} data bytes for shape {dims:?}, found {}",
            4 * n,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| parse_err(e.to_string()))
}

fn tags_to_string(tags: &Option<Vec<Corruption>>) -> String {
    match tags {
        None => "none".into(),
        Some(t) if t.is_empty() => "none".into(),
        Some(t) => t.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(","),
    }
}

fn tags_from_string(s: &str, path: &Path) -> Result<Option<Vec<Corruption>>> {
    if s == "none" || s.is_empty() {
        return Ok(None);
    }
    s.split(',')
        .map(|t| {
            t.parse::<Corruption>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("unknown corruption tag `{t}`"),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn save_distilled(s: &DistilledSet, dir: &Path) -> Result<()> {
    s.validate()?;
    fs::create_dir_all(dir)?;
    let mut m = Manifest::new();
    m.set("format_version", FORMAT_VERSION);
    m.set("method", s.method.as_str());
    m.set("outlier_mode", s.outlier_mode.as_str());
    m.set("ipc", s.ipc);
    m.set("num_classes", s.num_classes);
    m.set("shape", s.shape());
    m.set("rng_seed", s.rng_seed);
    m.set("lambda", s.lambda);
    m.set("corruption_assignment", tags_to_string(&s.corruption_assignment));
    if let Some(c) = &s.config_checksum {
        m.set("config_checksum", c);
    }
    m.write(&dir.join("manifest"))?;
    write_f32_array(&dir.join("s_in.bin"), &s.s_in_images)?;
    write_f32_array(&dir.join("s_out.bin"), &s.s_out_images)?;
    let labels: Vec<u8> = s
        .s_in_labels
        .iter()
        .flat_map(|&l| (l as i32).to_le_bytes())
        .collect();
    fs::write(dir.join("s_in_labels.bin"), labels)?;
    Ok(())
}

pub fn load_distilled(dir: &Path) -> Result<DistilledSet> {
    let mpath = dir.join("manifest");
    let m = Manifest::read(&mpath)?;
    m.check_version(&mpath)?;
    let shape: ImageShape = m.parsed("shape", &mpath)?;
    let s_in_images = read_f32_array(&dir.join("s_in.bin"))?;
    let s_out_images = read_f32_array(&dir.join("s_out.bin"))?;
    let lpath = dir.join("s_in_labels.bin");
    let lbytes = fs::read(&lpath).map_err(|e| Error::Load {
        path: lpath.clone(),
        reason: e.to_string(),
    })?;
    if lbytes.len() % 4 != 0 {
        return Err(Error::Parse {
            path: lpath,
            reason: "truncated label array".into(),
        });
    }
    let s_in_labels = lbytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .map(|l| {
            usize::try_from(l).map_err(|_| Error::Parse {
                path: lpath.clone(),
                reason: format!("negative label {l}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = DistilledSet {
        s_in_images,
        s_in_labels,
        s_out_images,
        num_classes: m.parsed("num_classes", &mpath)?,
        ipc: m.parsed("ipc", &mpath)?,
        method: m.parsed("method", &mpath)?,
        outlier_mode: m.parsed("outlier_mode", &mpath)?,
        rng_seed: m.parsed("rng_seed", &mpath)?,
        lambda: m.get("lambda").map_or(Ok(0.0), |_| m.parsed("lambda", &mpath))?,
        corruption_assignment: tags_from_string(m.require("corruption_assignment", &mpath)?, &mpath)?,
        config_checksum: m.get("config_checksum").map(str::to_string),
    };
    if set.shape() != shape {
        return Err(Error::Parse {
            path: mpath,
            reason: format!("manifest shape {shape} but s_in holds {}", set.shape()),
        });
    }
    set.validate()?;
    Ok(set)
}

/// Writes an outlier set plus a `tags` file (one corruption name per line)
/// when the rows are tagged.
pub fn save_unlabeled(set: &UnlabeledImageSet, dir: &Path, config_checksum: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = Manifest::new();
    m.set("format_version", FORMAT_VERSION);
    m.set("name", set.name());
    m.set("provenance", set.provenance().as_str());
    m.set("shape", set.shape());
    m.set("count", set.len());
    if let Some(c) = config_checksum {
        m.set("config_checksum", c);
    }
    m.write(&dir.join("manifest"))?;
    write_f32_array(&dir.join("images.bin"), set.images())?;
    if let Some(tags) = set.tags() {
        let mut text = String::new();
        for t in tags {
            text.push_str(t.as_str());
            text.push('\n');
        }
        fs::write(dir.join("tags"), text)?;
    }
    Ok(())
}

pub fn load_unlabeled(dir: &Path) -> Result<UnlabeledImageSet> {
    let mpath = dir.join("manifest");
    let m = Manifest::read(&mpath)?;
    m.check_version(&mpath)?;
    let images = read_f32_array(&dir.join("images.bin"))?;
    let provenance: Provenance = m.parsed("provenance", &mpath)?;
    let name = m.get("name").unwrap_or("outliers").to_string();
    let set = UnlabeledImageSet::new(name, images, provenance)?;
    let tpath = dir.join("tags");
    if tpath.exists() {
        let text = fs::read_to_string(&tpath)?;
        let tags = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim().parse::<Corruption>().map_err(|_| Error::Parse {
                    path: tpath.clone(),
                    reason: format!("unknown corruption tag `{l}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return set.with_tags(tags);
    }
    Ok(set)
}
