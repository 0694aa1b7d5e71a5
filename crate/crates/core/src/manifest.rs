//! Focal stacks and the line-delimited stack manifest.
//!
//! One record per line, whitespace separated `key=value` fields:
//!
//! ```text
//! # comment
//! id=s000 fused=s000/fused.png spacing_um=0.8 planes=-1:s000/m1.png,0:s000/z.png labels=s000/labels.txt
//! ```
//!
//! `fused`, `spacing_um` and `planes` are required. Relative paths resolve
//! against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::degrade::{DefocusLabel, LabelMap};
use crate::error::{dim_err, Error, Result};
use crate::image::{load_image, ImagePatch};

#[derive(Debug, Clone, PartialEq)]
pub struct FocalStack {
    pub id: String,
    /// `(signed offset in plane units, patch)`, offsets strictly increasing.
    pub planes: Vec<(f64, ImagePatch)>,
    pub fused: ImagePatch,
    pub spacing_um: f64,
}

impl FocalStack {
    pub fn new(id: impl Into<String>, planes: Vec<(f64, ImagePatch)>, fused: ImagePatch, spacing_um: f64) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::Validation("focal stack has no planes".into()));
        }
        for w in planes.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Validation(format!(
                    "plane offsets must be strictly increasing: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        let dims = fused.dims();
        if let Some((o, p)) = planes.iter().find(|(_, p)| p.dims() != dims) {
            return Err(dim_err!(
                "plane at offset {o} is {:?}, fused image is {dims:?}",
                p.dims()
            ));
        }
        if !(spacing_um > 0.0) {
            return Err(Error::Validation("spacing_um must be > 0".into()));
        }
        Ok(Self {
            id: id.into(),
            planes,
            fused,
            spacing_um,
        })
    }

    pub fn offsets(&self) -> Vec<f64> {
        self.planes.iter().map(|(o, _)| *o).collect()
    }
}

/// A parsed manifest record, before images are loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct StackRecord {
    pub id: String,
    pub fused: PathBuf,
    pub spacing_um: f64,
    pub planes: Vec<(f64, PathBuf)>,
    pub labels: Option<PathBuf>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn parse_record(line: &str, base: &Path) -> Result<StackRecord> {
    let mut id = None;
    let mut fused = None;
    let mut spacing = None;
    let mut planes = None;
    let mut labels = None;
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("field `{field}` is not key=value")))?;
        match key {
            "id" => id = Some(value.to_string()),
            "fused" => fused = Some(resolve(base, value)),
            "labels" => labels = Some(resolve(base, value)),
            "spacing_um" => {
                spacing = Some(
                    value
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("spacing_um `{value}`: {e}")))?,
                )
            }
            "planes" => {
                let mut v = Vec::new();
                for item in value.split(',') {
                    let (off, path) = item
                        .split_once(':')
                        .ok_or_else(|| Error::Format(format!("plane `{item}` is not offset:path")))?;
                    let off = off
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("plane offset `{off}`: {e}")))?;
                    v.push((off, resolve(base, path)));
                }
                planes = Some(v);
            }
            other => return Err(Error::Format(format!("unknown manifest field `{other}`"))),
        }
    }
    let fused: PathBuf = fused.ok_or_else(|| Error::Format("missing `fused` field".into()))?;
    let planes: Vec<(f64, PathBuf)> = planes.ok_or_else(|| Error::Format("missing `planes` field".into()))?;
    for w in planes.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::Validation(format!(
                "plane offsets must be strictly increasing: {} then {}",
                w[0].0, w[1].0
            )));
        }
    }
    let id = id.unwrap_or_else(|| {
        fused
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok(StackRecord {
        id,
        fused,
        spacing_um: spacing.ok_or_else(|| Error::Format("missing `spacing_um` field".into()))?,
        planes,
        labels,
    })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<(usize, StackRecord)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec = parse_record(trimmed, base).map_err(|e| Error::Record {
            line: i + 1,
            source: Box::new(e),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn load_record(rec: &StackRecord) -> Result<FocalStack> {
    let fused = load_image(&rec.fused)?;
    let planes = rec
        .planes
        .iter()
        .map(|(o, p)| Ok((*o, load_image(p)?)))
        .collect::<Result<Vec<_>>>()?;
    FocalStack::new(rec.id.clone(), planes, fused, rec.spacing_um)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<FocalStack>> {
    read_records(path)?
        .into_iter()
        .map(|(line, rec)| {
            load_record(&rec).map_err(|e| Error::Record {
                line,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn format_record(rec: &StackRecord, base: &Path) -> String {
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let planes: Vec<String> = rec
        .planes
        .iter()
        .map(|(o, p)| format!("{o}:{}", rel(p)))
        .collect();
    let mut line = format!(
        "id={} fused={} spacing_um={} planes={}",
        rec.id,
        rel(&rec.fused),
        rec.spacing_um,
        planes.join(",")
    );
    if let Some(l) = &rec.labels {
        let _ = write!(line, " labels={}", rel(l));
    }
    line
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[StackRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::from("# mop focal-stack manifest\n");
    for r in records {
        text.push_str(&format_record(r, base));
        text.push('\n');
    }
    crate::image::ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Label sidecar: a header line, then one `d c` pair per region per plane
/// (plane-major, regions row-major).
pub fn write_labels(path: impl AsRef<Path>, maps: &[LabelMap]) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols) = maps.first().map(|m| (m.rows, m.cols)).unwrap_or((0, 0));
    let mut text = format!("# planes={} rows={rows} cols={cols}\n", maps.len());
    for m in maps {
        for l in &m.labels {
            let _ = writeln!(text, "{} {}", l.d, l.c);
        }
    }
    crate::image::ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelMap>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty label file", path.display())))?;
    let mut dims = [0usize; 3];
    for (i, key) in ["planes", "rows", "cols"].iter().enumerate() {
        let v = header
            .split_whitespace()
            .find_map(|f| f.strip_prefix(&format!("{key}=")))
            .ok_or_else(|| Error::Format(format!("label header lacks `{key}`")))?;
        dims[i] = v
            .parse()
            .map_err(|e| Error::Format(format!("label header `{key}`: {e}")))?;
    }
    let [planes, rows, cols] = dims;
    let mut values = Vec::with_capacity(planes * rows * cols);
    for (i, line) in lines.enumerate() {
        let mut it = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| Error::Format(format!("label line {} is short", i + 2)))?
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("label line {}: {e}", i + 2)))
        };
        let d = parse(it.next())?;
        let c = parse(it.next())?;
        values.push(DefocusLabel { d, c });
    }
    if values.len() != planes * rows * cols {
        return Err(Error::Format(format!(
            "expected {} label pairs, found {}",
            planes * rows * cols,
            values.len()
        )));
    }
    Ok(values
        .chunks(rows * cols)
        .map(|ch| LabelMap {
            rows,
            cols,
            labels: ch.to_vec(),
        })
        .collect())
}


/// One image of an image-set manifest (restored outputs, references):
/// `id=s000_r0_c64 path=out/s000_r0_c64.png slide=s000 row=0 col=64`.
/// `slide`, `row` and `col` place the image on its slide; without `slide`
/// the image is its own slide.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub slide: Option<String>,
    pub row: usize,
    pub col: usize,
}

impl ImageRecord {
    pub fn slide_id(&self) -> &str {
        self.slide.as_deref().unwrap_or(&self.id)
    }
}

pub fn parse_image_record(line: &str, base: &Path) -> Result<ImageRecord> {
    let mut id = None;
    let mut path = None;
    let mut slide = None;
    let mut row = 0;
    let mut col = 0;
    let parse_usize = |key: &str, v: &str| -> Result<usize> {
        v.parse()
            .map_err(|e| Error::Format(format!("{key} `{v}`: {e}")))
    };
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("field `{field}` is not key=value")))?;
        match key {
            "id" => id = Some(value.to_string()),
            "path" => path = Some(resolve(base, value)),
            "slide" => slide = Some(value.to_string()),
            "row" => row = parse_usize(key, value)?,
            "col" => col = parse_usize(key, value)?,
            other => return Err(Error::Format(format!("unknown image field `{other}`"))),
        }
    }
    let path: PathBuf = path.ok_or_else(|| Error::Format("missing `path` field".into()))?;
    let id = id.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok(ImageRecord {
        id,
        path,
        slide,
        row,
        col,
    })
}

pub fn read_image_records(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_image_record(trimmed, base).map_err(|e| Error::Record {
            line: i + 1,
            source: Box::new(e),
        })?);
    }
    Ok(out)
}

pub fn format_image_record(rec: &ImageRecord, base: &Path) -> String {
    let rel = rec.path.strip_prefix(base).unwrap_or(&rec.path).to_string_lossy().into_owned();
    let mut line = format!("id={} path={rel}", rec.id);
    if let Some(s) = &rec.slide {
        let _ = write!(line, " slide={s} row={} col={}", rec.row, rec.col);
    }
    line
}

pub fn write_image_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::from("# mop image-set manifest\n");
    for r in records {
        text.push_str(&format_image_record(r, base));
        text.push('\n');
    }
    crate::image::ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
