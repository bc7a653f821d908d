//! Scene samples and the on-disk dataset layout:
//! `images/<id>.ppm`, `heights/<id>.pgm`, `heights/<id>.meta`,
//! `labels/<id>.txt` and `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::labels::{format_annotations, parse_annotations};
use super::pnm::{decode_meta, decode_pgm16, decode_ppm, encode_meta, encode_pgm16, encode_ppm, HeightMap, RgbImage};
use crate::error::{Error, Result};
use crate::geom::ObbAnnotation;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub rgb: RgbImage,
    pub hmap: HeightMap,
    pub annotations: Vec<ObbAnnotation>,
}

impl SceneSample {
    pub fn new(id: impl Into<String>, rgb: RgbImage, hmap: HeightMap, annotations: Vec<ObbAnnotation>) -> Result<Self> {
        let s = SceneSample {
            id: id.into(),
            rgb,
            hmap,
            annotations,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_id(&self.id)?;
        if (self.rgb.width, self.rgb.height) != (self.hmap.width, self.hmap.height) {
            return Err(Error::Validation(format!(
                "{}: rgb {}x{} vs height map {}x{}",
                self.id, self.rgb.width, self.rgb.height, self.hmap.width, self.hmap.height
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// (3, H, W) in [0, 1].
    pub fn rgb_tensor(&self) -> Tensor {
        let (w, h) = (self.rgb.width, self.rgb.height);
        let plane = w * h;
        Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / plane, i % plane);
            self.rgb.data[p * 3 + c] as f64 / 255.0
        })
    }

    /// (1, H, W) heights in map units.
    pub fn height_tensor(&self) -> Tensor {
        let m = &self.hmap;
        Tensor::from_fn([1, m.height, m.width], |i| m.data[i] as f64 * m.scale + m.offset)
    }
}

pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("invalid sample id {id:?}")))
    }
}

/// One manifest record; `x`, `y` locate the sample inside `source`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl ManifestEntry {
    /// Entry for an untiled scene.
    pub fn whole(s: &SceneSample) -> Self {
        ManifestEntry {
            id: s.id.clone(),
            source: s.id.clone(),
            x: 0,
            y: 0,
            width: s.width(),
            height: s.height(),
        }
    }
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# id source x y width height\n");
    for e in entries {
        writeln!(
            s,
            "id={} source={} x={} y={} width={} height={}",
            e.id, e.source, e.x, e.y, e.width, e.height
        )
        .unwrap();
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut fields: [Option<&str>; 6] = [None; 6];
        const KEYS: [&str; 6] = ["id", "source", "x", "y", "width", "height"];
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key=value, got {tok:?}")))?;
            let slot = KEYS
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| perr(format!("unknown key {k:?}")))?;
            if fields[slot].replace(v).is_some() {
                return Err(perr(format!("duplicate key {k:?}")));
            }
        }
        let get = |k: usize| fields[k].ok_or_else(|| perr(format!("missing key {:?}", KEYS[k])));
        let num = |k: usize| -> Result<usize> {
            let v = get(k)?;
            v.parse().map_err(|_| perr(format!("bad {} value {v:?}", KEYS[k])))
        };
        let e = ManifestEntry {
            id: get(0)?.to_string(),
            source: get(1)?.to_string(),
            x: num(2)?,
            y: num(3)?,
            width: num(4)?,
            height: num(5)?,
        };
        validate_id(&e.id).map_err(|err| perr(err.to_string()))?;
        if out.iter().any(|o| o.id == e.id) {
            return Err(perr(format!("duplicate id {:?}", e.id)));
        }
        out.push(e);
    }
    Ok(out)
}

fn paths(root: &Path, id: &str) -> [PathBuf; 4] {
    [
        root.join("images").join(format!("{id}.ppm")),
        root.join("heights").join(format!("{id}.pgm")),
        root.join("heights").join(format!("{id}.meta")),
        root.join("labels").join(format!("{id}.txt")),
    ]
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "not valid UTF-8".into(),
    })
}

pub fn write_scene(sample: &SceneSample, root: &Path) -> Result<()> {
    sample.validate()?;
    let [img, hm, meta, lab] = paths(root, &sample.id);
    write_file(&img, &encode_ppm(&sample.rgb))?;
    write_file(&hm, &encode_pgm16(&sample.hmap))?;
    write_file(&meta, encode_meta(&sample.hmap).as_bytes())?;
    write_file(&lab, format_annotations(&sample.annotations).as_bytes())
}

/// Which rasters to read from disk. A skipped modality is replaced by a
/// zero raster of matching size and its files are never opened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modalities {
    pub rgb: bool,
    pub height: bool,
}

impl Modalities {
    pub const BOTH: Modalities = Modalities {
        rgb: true,
        height: true,
    };
}

pub fn read_scene(root: &Path, id: &str) -> Result<SceneSample> {
    read_scene_with(root, id, Modalities::BOTH, None)
}

/// `size` supplies raster dimensions when neither modality is read.
pub fn read_scene_with(
    root: &Path,
    id: &str,
    which: Modalities,
    size: Option<(usize, usize)>,
) -> Result<SceneSample> {
    validate_id(id)?;
    let [img, hm, meta, lab] = paths(root, id);
    let rgb = if which.rgb {
        Some(decode_ppm(&read_file(&img)?, &img)?)
    } else {
        None
    };
    let hmap = if which.height {
        let (scale, offset) = decode_meta(&read_text(&meta)?, &meta)?;
        Some(decode_pgm16(&read_file(&hm)?, &hm, scale, offset)?)
    } else {
        None
    };
    let dims = rgb
        .as_ref()
        .map(|r| (r.width, r.height))
        .or(hmap.as_ref().map(|h| (h.width, h.height)))
        .or(size)
        .ok_or_else(|| Error::Validation(format!("{id}: no modality selected and no size given")))?;
    let rgb = rgb.unwrap_or_else(|| RgbImage::new(dims.0, dims.1));
    let hmap = hmap.unwrap_or_else(|| HeightMap::new(dims.0, dims.1, 0.01, 0.0));
    if (rgb.width, rgb.height) != (hmap.width, hmap.height) {
        return Err(Error::Format {
            path: hm,
            msg: format!(
                "height map {}x{} does not match rgb {}x{}",
                hmap.width, hmap.height, rgb.width, rgb.height
            ),
        });
    }
    let annotations = parse_annotations(&read_text(&lab)?, &lab)?;
    SceneSample::new(id, rgb, hmap, annotations)
}

pub fn write_dataset(root: &Path, samples: &[SceneSample], entries: &[ManifestEntry]) -> Result<()> {
    for s in samples {
        write_scene(s, root)?;
    }
    for d in ["images", "heights", "labels"] {
        let dir = root.join(d);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_file(&root.join(MANIFEST), format_manifest(entries).as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let p = root.join(MANIFEST);
    parse_manifest(&read_text(&p)?, &p)
}

/// Loads every manifest entry in manifest order.
pub fn read_dataset(root: &Path, which: Modalities) -> Result<Vec<SceneSample>> {
    read_manifest(root)?
        .iter()
        .map(|e| read_scene_with(root, &e.id, which, Some((e.width, e.height))))
        .collect()
}
