//! On-disk formats.
//!
//! A dataset is a directory with `images.bin` (magic `RSTARIMG`, `u32`
//! version, `u64` payload length, payload, SHA-256 of everything before it)
//! and `annotations.txt` (a `RSTARANN <version>` line, a `sha256 <hex>` line,
//! then a JSON document).
//!
//! A checkpoint starts with a `RSTARCKPT` line followed by `key: value`
//! header lines up to `end_header`, then the raw little-endian `f64` values
//! of every tensor. Each `tensor:` line gives name, shape, offset and count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Image, ImageRecord, Instance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelParams};
use crate::training::TrainConfig;

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const IMAGE_MAGIC: &[u8; 8] = b"RSTARIMG";
const ANN_MAGIC: &str = "RSTARANN";
const CKPT_MAGIC: &str = "RSTARCKPT";

/// Writes through a temporary file in the same directory, then renames it.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
struct Annotations {
    classes: Vec<String>,
    multilabel: bool,
    images: Vec<ImageAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct ImageAnnotation {
    id: String,
    frame: String,
    width: usize,
    height: usize,
    instances: Vec<Instance>,
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(ds.images.len() as u32).to_le_bytes());
    for rec in &ds.images {
        payload.extend_from_slice(&(rec.image.width() as u32).to_le_bytes());
        payload.extend_from_slice(&(rec.image.height() as u32).to_le_bytes());
        payload.extend_from_slice(rec.image.pixels());
    }
    let mut bin = Vec::with_capacity(payload.len() + 52);
    bin.extend_from_slice(IMAGE_MAGIC);
    bin.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    bin.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bin.extend_from_slice(&payload);
    let digest = Sha256::digest(&bin);
    bin.extend_from_slice(&digest);

    let ann = Annotations {
        classes: ds.classes.clone(),
        multilabel: ds.multilabel,
        images: ds
            .images
            .iter()
            .map(|r| ImageAnnotation {
                id: r.id.clone(),
                frame: r.frame.clone(),
                width: r.image.width(),
                height: r.image.height(),
                instances: r.instances.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&ann).map_err(|e| Error::Format {
        path: dir.join("annotations.txt"),
        msg: e.to_string(),
    })?;
    let text = format!("{ANN_MAGIC} {DATASET_VERSION}\nsha256 {}\n{json}\n", sha256_hex(json.as_bytes()));

    write_atomic(dir.join("images.bin"), &bin)?;
    write_atomic(dir.join("annotations.txt"), text.as_bytes())
}

fn read_images(path: &Path) -> Result<Vec<Image>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != IMAGE_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated {
            path: path.into(),
            what: "header".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version.to_string(),
            expected: DATASET_VERSION.to_string(),
        });
    }
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_end = 20usize.saturating_add(payload_len);
    if bytes.len() < body_end.saturating_add(32) {
        return Err(Error::Truncated {
            path: path.into(),
            what: "image data".into(),
        });
    }
    let stored = hex::encode(&bytes[body_end..body_end + 32]);
    let computed = sha256_hex(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }
    let payload = &bytes[20..body_end];
    let format = |msg: &str| Error::Format {
        path: path.into(),
        msg: msg.into(),
    };
    let read_u32 = |at: usize| -> Result<usize> {
        payload
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| format("payload ends inside an image header"))
    };
    let count = read_u32(0)?;
    let mut at = 4;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let (w, h) = (read_u32(at)?, read_u32(at + 4)?);
        at += 8;
        let n = 3 * w * h;
        let px = payload
            .get(at..at + n)
            .ok_or_else(|| format("payload ends inside pixel data"))?;
        images.push(Image::new(w, h, px.to_vec()).map_err(|e| format(&e.to_string()))?);
        at += n;
    }
    if at != payload.len() {
        return Err(format("trailing bytes after the last image"));
    }
    Ok(images)
}

fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.splitn(3, '\n');
    let first = lines.next().unwrap_or("");
    let mut head = first.split_whitespace();
    if head.next() != Some(ANN_MAGIC) {
        return Err(Error::BadMagic { path: path.into() });
    }
    let found = head.next().unwrap_or("");
    if found != DATASET_VERSION.to_string() {
        return Err(Error::Version {
            path: path.into(),
            found: found.into(),
            expected: DATASET_VERSION.to_string(),
        });
    }
    let (Some(sum_line), Some(body)) = (lines.next(), lines.next()) else {
        return Err(Error::Truncated {
            path: path.into(),
            what: "annotation header".into(),
        });
    };
    let stored = sum_line.strip_prefix("sha256 ").unwrap_or("").trim().to_string();
    let body = body.strip_suffix('\n').unwrap_or(body);
    let computed = sha256_hex(body.as_bytes());
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }
    serde_json::from_str(body).map_err(|e| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ann_path = dir.join("annotations.txt");
    let ann = read_annotations(&ann_path)?;
    let images = read_images(&dir.join("images.bin"))?;
    if images.len() != ann.images.len() {
        return Err(Error::Format {
            path: ann_path,
            msg: format!("{} annotated images, {} stored images", ann.images.len(), images.len()),
        });
    }
    let mut records = Vec::with_capacity(images.len());
    for (a, image) in ann.images.into_iter().zip(images) {
        if (a.width, a.height) != (image.width(), image.height()) {
            return Err(Error::Format {
                path: ann_path,
                msg: format!("{}: annotated {}x{}, stored {}x{}", a.id, a.width, a.height, image.width(), image.height()),
            });
        }
        records.push(ImageRecord {
            id: a.id,
            frame: a.frame,
            image,
            instances: a.instances,
        });
    }
    let ds = Dataset {
        classes: ann.classes,
        multilabel: ann.multilabel,
        images: records,
    };
    ds.validate().map_err(|e| Error::Format {
        path: ann_path,
        msg: e.to_string(),
    })?;
    Ok(ds)
}

/// Model weights with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: ModelParams,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let fmt_err = |e: serde_json::Error| Error::Config(format!("serializing checkpoint: {e}"));
    let mut header = format!("{CKPT_MAGIC}\nversion: {CHECKPOINT_VERSION}\n");
    header.push_str(&format!("model_config: {}\n", serde_json::to_string(&ck.model).map_err(fmt_err)?));
    header.push_str(&format!("train_config: {}\n", serde_json::to_string(&ck.train).map_err(fmt_err)?));
    let mut data = Vec::new();
    let mut offset = 0usize;
    for (name, t) in ck.params.named_tensors(&ck.model)? {
        let shape = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        };
        header.push_str(&format!("tensor: {name} {shape} {offset} {}\n", t.len()));
        for v in t.values() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    header.push_str(&format!("checksum: sha256:{}\nend_header\n", sha256_hex(&data)));
    let mut out = header.into_bytes();
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let magic = format!("{CKPT_MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::BadMagic { path: path.into() });
    }
    let fmt = |msg: String| Error::Format { path: path.into(), msg };
    let marker = b"end_header\n";
    let Some(end) = bytes.windows(marker.len()).position(|w| w == marker) else {
        // a version line we can read still takes precedence over truncation
        if let Some(v) = std::str::from_utf8(bytes).ok().and_then(|t| t.lines().nth(1)) {
            check_version(v, path)?;
        }
        return Err(Error::Truncated {
            path: path.into(),
            what: "header".into(),
        });
    };
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt("header is not UTF-8".into()))?;
    let data = &bytes[end + marker.len()..];
    let mut lines = header.lines().skip(1);
    check_version(lines.next().unwrap_or(""), path)?;

    let mut model: Option<ModelConfig> = None;
    let mut train: Option<Option<TrainConfig>> = None;
    let mut checksum = None;
    let mut tensors: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| fmt(format!("malformed header line {line:?}")))?;
        match key {
            "model_config" => model = Some(serde_json::from_str(value).map_err(|e| fmt(format!("model_config: {e}")))?),
            "train_config" => train = Some(serde_json::from_str(value).map_err(|e| fmt(format!("train_config: {e}")))?),
            "checksum" => {
                checksum = Some(
                    value
                        .strip_prefix("sha256:")
                        .ok_or_else(|| fmt("checksum must be sha256".into()))?
                        .to_string(),
                )
            }
            "tensor" => {
                let f: Vec<&str> = value.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(fmt(format!("malformed tensor line {line:?}")));
                }
                let shape = if f[1] == "-" {
                    vec![]
                } else {
                    f[1].split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| fmt(format!("bad shape in {line:?}")))?
                };
                let offset = f[2].parse().map_err(|_| fmt(format!("bad offset in {line:?}")))?;
                let count = f[3].parse().map_err(|_| fmt(format!("bad count in {line:?}")))?;
                tensors.push((f[0].to_string(), shape, offset, count));
            }
            _ => return Err(fmt(format!("unknown header key {key:?}"))),
        }
    }
    let model = model.ok_or_else(|| fmt("missing model_config".into()))?;
    let stored = checksum.ok_or_else(|| fmt("missing checksum".into()))?;

    let mut values = Vec::with_capacity(tensors.len());
    for (name, shape, offset, count) in &tensors {
        let lo = offset.checked_mul(8);
        let hi = offset.checked_add(*count).and_then(|e| e.checked_mul(8));
        let block = match (lo, hi) {
            (Some(lo), Some(hi)) if hi <= data.len() => &data[lo..hi],
            _ => {
                return Err(Error::Truncated {
                    path: path.into(),
                    what: format!("tensor {name}"),
                })
            }
        };
        if shape.iter().product::<usize>() != *count {
            return Err(fmt(format!("tensor {name}: shape {shape:?} does not hold {count} values")));
        }
        let v: Vec<f64> = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push((name.clone(), Tensor::new(shape.clone(), v)?));
    }
    let computed = sha256_hex(data);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }
    let expected = model.param_shapes().map_err(|e| fmt(e.to_string()))?;
    if expected.len() != values.len() {
        return Err(fmt(format!("expected {} tensors, found {}", expected.len(), values.len())));
    }
    for ((en, es), (n, t)) in expected.iter().zip(&values) {
        if en != n {
            return Err(fmt(format!("expected tensor {en}, found {n}")));
        }
        if es.as_slice() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "load checkpoint",
                left: t.shape().to_vec(),
                right: es.clone(),
            });
        }
    }
    let params = ModelParams::from_tensors(&model, values.into_iter().map(|(_, t)| t).collect())?;
    Ok(Checkpoint {
        model,
        train: train.flatten(),
        params,
    })
}

fn check_version(line: &str, path: &Path) -> Result<()> {
    let found = line.strip_prefix("version: ").unwrap_or(line).trim();
    if found != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version {
            path: path.into(),
            found: found.into(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    Ok(())
}
