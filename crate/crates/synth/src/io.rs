use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SynthError};
use crate::generate::{generate, split_counts, GeneratedScene, SceneConfig, Split, TemplateMix};
use crate::render::render_rgb8;
use crate::scene::{Scene, TemplateClass};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENES_FILE: &str = "scenes.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub counts: SplitCounts,
    pub mix: TemplateMix,
    pub canvas: u32,
    pub max_objects: usize,
    /// SHA-256 over the metadata file and every image's raw pixels, in scene order.
    pub content_sha256: String,
}

impl Manifest {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            canvas: self.canvas,
            max_objects: self.max_objects,
            ..SceneConfig::default()
        }
    }

    pub fn parse(text: &str) -> std::result::Result<Manifest, String> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if m.version != FORMAT_VERSION {
            return Err(format!(
                "unsupported dataset version {} (expected {FORMAT_VERSION})",
                m.version
            ));
        }
        m.mix.validate().map_err(|e| e.to_string())?;
        let (train, val, test) = split_counts(m.count);
        if m.counts != (SplitCounts { train, val, test }) {
            return Err(format!(
                "split counts {:?} do not match count {}",
                m.counts, m.count
            ));
        }
        if m.canvas < 16 || m.count == 0 {
            return Err("canvas and count must be positive".into());
        }
        Ok(m)
    }
}

/// One line of the metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub split: Split,
    pub expression: String,
    pub template: TemplateClass,
    /// Normalised `[x, y, w, h]`, `(x, y)` = top-left.
    pub gt_box: [f32; 4],
    /// Relative to the dataset directory.
    pub image: String,
    pub scene: Scene,
}

impl SceneRecord {
    pub fn new(g: &GeneratedScene) -> Self {
        SceneRecord {
            scene_id: g.id,
            split: g.split,
            expression: g.scene.text(),
            template: g.scene.class(),
            gt_box: g.scene.gt_box(),
            image: format!("images/{:06}.png", g.id),
            scene: g.scene.clone(),
        }
    }

    /// Parses and cross-checks one metadata line.
    pub fn parse(line: &str) -> std::result::Result<SceneRecord, String> {
        let r: SceneRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let s = &r.scene;
        if s.objects.is_empty() || s.referent >= s.objects.len() {
            return Err(format!("referent {} out of range", s.referent));
        }
        if s.canvas == 0 {
            return Err("zero canvas".into());
        }
        let c = s.canvas as f32;
        for o in &s.objects {
            let b = o.bbox;
            let ok = [b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite())
                && b.w > 0.0
                && b.h > 0.0
                && b.x >= 0.0
                && b.y >= 0.0
                && b.x + b.w <= c
                && b.y + b.h <= c;
            if !ok {
                return Err(format!("object box {b:?} outside the canvas"));
            }
        }
        if r.expression != s.text() || r.template != s.class() || r.gt_box != s.gt_box() {
            return Err("summary fields disagree with the scene".into());
        }
        let path = Path::new(&r.image);
        if r.image.is_empty() || !path.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(format!(
                "image path {:?} must be relative and stay inside the dataset",
                r.image
            ));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn image_path(&self, record: &SceneRecord) -> PathBuf {
        self.dir.join(&record.image)
    }

    /// Raw RGB bytes of a record's image.
    pub fn load_image(&self, record: &SceneRecord) -> Result<Vec<u8>> {
        read_png(&self.image_path(record), self.manifest.canvas)
    }
}

/// Encodes 8-bit RGB pixels, row-major, as a PNG.
pub fn encode_png(
    rgb: &[u8],
    width: u32,
    height: u32,
) -> std::result::Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(rgb)?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGB PNG of the given square size.
pub fn decode_png(bytes: &[u8], canvas: u32) -> std::result::Result<Vec<u8>, String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    if info.width != canvas || info.height != canvas {
        return Err(format!(
            "image is {}x{}, expected {canvas}x{canvas}",
            info.width, info.height
        ));
    }
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        ));
    }
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(frame.buffer_size());
    if buf.len() != (canvas * canvas * 3) as usize {
        return Err("unexpected frame size".into());
    }
    Ok(buf)
}

pub fn read_png(path: &Path, canvas: u32) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| SynthError::io(path, e))?;
    decode_png(&bytes, canvas).map_err(|msg| SynthError::Png {
        path: path.to_path_buf(),
        msg,
    })
}

fn metadata_bytes(records: &[SceneRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialise");
        out.push(b'\n');
    }
    out
}

/// Generates `count` scenes and writes them under `dir` (created if missing).
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    count: usize,
    mix: &TemplateMix,
    cfg: &SceneConfig,
) -> Result<Manifest> {
    let scenes = generate(seed, count, mix, cfg)?;
    let records: Vec<SceneRecord> = scenes.iter().map(SceneRecord::new).collect();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| SynthError::io(&images, e))?;

    let metadata = metadata_bytes(&records);
    let mut hasher = Sha256::new();
    hasher.update(&metadata);
    for (g, r) in scenes.iter().zip(&records) {
        let rgb = render_rgb8(&g.scene);
        hasher.update(&rgb);
        let path = dir.join(&r.image);
        let png = encode_png(&rgb, cfg.canvas, cfg.canvas).map_err(|e| SynthError::Png {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        fs::write(&path, png).map_err(|e| SynthError::io(&path, e))?;
    }
    let path = dir.join(SCENES_FILE);
    fs::write(&path, &metadata).map_err(|e| SynthError::io(&path, e))?;

    let (train, val, test) = split_counts(count);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        seed,
        count,
        counts: SplitCounts { train, val, test },
        mix: *mix,
        canvas: cfg.canvas,
        max_objects: cfg.max_objects,
        content_sha256: hex::encode(hasher.finalize()),
    };
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| SynthError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &manifest).expect("manifest serialises");
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| SynthError::io(&path, e))?;
    log::info!("wrote {count} scenes to {}", dir.display());
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SynthError::io(&path, e))?;
    Manifest::parse(&text).map_err(|msg| SynthError::Parse { path, line: 1, msg })
}

/// Loads the manifest and metadata records (images are read lazily).
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(SCENES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SynthError::io(&path, e))?;
    let mut records = Vec::with_capacity(manifest.count);
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let r = SceneRecord::parse(line).map_err(|msg| SynthError::Parse {
            path: path.clone(),
            line: i + 1,
            msg,
        })?;
        records.push(r);
    }
    if records.len() != manifest.count {
        return Err(SynthError::Parse {
            path,
            line: records.len(),
            msg: format!(
                "{} records, manifest says {}",
                records.len(),
                manifest.count
            ),
        });
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        records,
    })
}

/// Recomputes the content hash from files on disk.
pub fn content_hash(dataset: &Dataset) -> Result<String> {
    let path = dataset.dir.join(SCENES_FILE);
    let metadata = fs::read(&path).map_err(|e| SynthError::io(&path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&metadata);
    for r in &dataset.records {
        hasher.update(dataset.load_image(r)?);
    }
    Ok(hex::encode(hasher.finalize()))
}
