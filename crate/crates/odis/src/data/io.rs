//! Dataset on disk: binary PPM (P6) images, binary PGM (P5) instance
//! maps whose pixel value is the instance id, and a TSV manifest with
//! columns id, image_path, mask_path, labels ("instance:class" pairs
//! separated by semicolons).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::augment::SceneSample;
use crate::error::{OdisError, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub labels: Vec<(u16, u8)>,
}

impl ManifestRecord {
    /// Class of the designated primary object (instance 1).
    pub fn primary_class(&self) -> Result<u8> {
        self.labels
            .iter()
            .find(|(id, _)| *id == 1)
            .map(|(_, c)| *c)
            .ok_or_else(|| OdisError::invalid(format!("record {} lacks instance 1", self.id)))
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Highest class id present (the class count excluding background).
    pub fn max_class(&self) -> u8 {
        self.records
            .iter()
            .flat_map(|r| r.labels.iter().map(|(_, c)| *c))
            .max()
            .unwrap_or(0)
    }

    pub fn load_sample(&self, record: &ManifestRecord) -> Result<SceneSample> {
        let image = read_ppm(&self.root.join(&record.image_path))?;
        let (map, side) = read_pgm(&self.root.join(&record.mask_path))?;
        if image.shape()[1] != side {
            return Err(OdisError::invalid(format!(
                "record {}: image side {} != mask side {side}",
                record.id,
                image.shape()[1]
            )));
        }
        let labels: BTreeMap<u16, u8> = record.labels.iter().copied().collect();
        let sample = SceneSample { image, instance_map: map, side, labels };
        sample.validate()?;
        Ok(sample)
    }
}

// -- PPM / PGM --------------------------------------------------------------

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, s) = (image.shape()[0], image.shape()[1]);
    if c != 3 {
        return Err(OdisError::invalid("PPM writer expects 3 channels"));
    }
    let mut buf = format!("P6\n{s} {s}\n255\n").into_bytes();
    let plane = s * s;
    for i in 0..plane {
        for ch in 0..3 {
            let v = (image.data()[ch * plane + i] * 255.0).round().clamp(0.0, 255.0);
            buf.push(v as u8);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_pgm(path: &Path, map: &[u16], side: usize) -> Result<()> {
    let mut buf = format!("P5\n{side} {side}\n255\n").into_bytes();
    for &id in map {
        if id > 255 {
            return Err(OdisError::invalid(format!("instance id {id} exceeds 8-bit PGM range")));
        }
        buf.push(id as u8);
    }
    fs::write(path, buf)?;
    Ok(())
}

struct PnmHeader {
    width: usize,
    height: usize,
    data_offset: usize,
}

/// Parse a binary PNM header (magic, whitespace/comments, width, height,
/// maxval, single whitespace) and report failures with byte offsets.
fn parse_pnm_header(path: &Path, bytes: &[u8], magic: &str) -> Result<PnmHeader> {
    let fail = |offset: usize, msg: String| OdisError::Parse {
        file: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(fail(0, format!("bad magic, expected {magic}")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "expected an ASCII integer".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|e| fail(start, format!("bad integer {text}: {e}")))?;
    }
    if fields[2] != 255 {
        return Err(fail(pos, format!("maxval {} unsupported, expected 255", fields[2])));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(pos, "expected single whitespace before raster".into()));
    }
    pos += 1;
    Ok(PnmHeader { width: fields[0], height: fields[1], data_offset: pos })
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let h = parse_pnm_header(path, &bytes, "P6")?;
    if h.width != h.height {
        return Err(OdisError::Parse {
            file: path.to_path_buf(),
            offset: 2,
            msg: format!("expected a square image, got {}x{}", h.width, h.height),
        });
    }
    let s = h.width;
    let need = 3 * s * s;
    if bytes.len() < h.data_offset + need {
        return Err(OdisError::Parse {
            file: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("raster truncated: need {need} bytes"),
        });
    }
    let plane = s * s;
    let mut image = Tensor::zeros(vec![3, s, s]);
    for i in 0..plane {
        for ch in 0..3 {
            image.data_mut()[ch * plane + i] =
                bytes[h.data_offset + i * 3 + ch] as f32 / 255.0;
        }
    }
    Ok(image)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u16>, usize)> {
    let bytes = fs::read(path)?;
    let h = parse_pnm_header(path, &bytes, "P5")?;
    if h.width != h.height {
        return Err(OdisError::Parse {
            file: path.to_path_buf(),
            offset: 2,
            msg: format!("expected a square map, got {}x{}", h.width, h.height),
        });
    }
    let s = h.width;
    if bytes.len() < h.data_offset + s * s {
        return Err(OdisError::Parse {
            file: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("raster truncated: need {} bytes", s * s),
        });
    }
    let map = bytes[h.data_offset..h.data_offset + s * s]
        .iter()
        .map(|&b| b as u16)
        .collect();
    Ok((map, s))
}

// -- dataset ----------------------------------------------------------------

pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut manifest = String::from("id\timage_path\tmask_path\tlabels\n");
    for (i, sample) in samples.iter().enumerate() {
        let id = format!("s{i:05}");
        let image_path = PathBuf::from(format!("{id}.ppm"));
        let mask_path = PathBuf::from(format!("{id}.pgm"));
        write_ppm(&dir.join(&image_path), &sample.image)?;
        write_pgm(&dir.join(&mask_path), &sample.instance_map, sample.side)?;
        let labels: Vec<(u16, u8)> = sample.labels.iter().map(|(&k, &v)| (k, v)).collect();
        let label_str = labels
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect::<Vec<_>>()
            .join(";");
        manifest.push_str(&format!(
            "{id}\t{}\t{}\t{label_str}\n",
            image_path.display(),
            mask_path.display()
        ));
        records.push(ManifestRecord { id, image_path, mask_path, labels });
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(DatasetManifest { root: dir.to_path_buf(), records })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)?;
    let fail = |offset: usize, msg: String| OdisError::Parse {
        file: path.clone(),
        offset: offset as u64,
        msg,
    };
    let mut records = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let this_offset = offset;
        offset += line.len() + 1;
        if lineno == 0 {
            if line != "id\timage_path\tmask_path\tlabels" {
                return Err(fail(0, "bad manifest header".into()));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(fail(this_offset, format!("expected 4 columns, got {}", cols.len())));
        }
        let mut labels = Vec::new();
        for pair in cols[3].split(';').filter(|p| !p.is_empty()) {
            let (inst, class) = pair
                .split_once(':')
                .ok_or_else(|| fail(this_offset, format!("bad label pair {pair}")))?;
            let inst: u16 = inst
                .parse()
                .map_err(|e| fail(this_offset, format!("bad instance id {inst}: {e}")))?;
            let class: u8 = class
                .parse()
                .map_err(|e| fail(this_offset, format!("bad class id {class}: {e}")))?;
            labels.push((inst, class));
        }
        records.push(ManifestRecord {
            id: cols[0].to_string(),
            image_path: PathBuf::from(cols[1]),
            mask_path: PathBuf::from(cols[2]),
            labels,
        });
    }
    Ok(DatasetManifest { root: dir.to_path_buf(), records })
}

/// Load every sample listed in a directory's manifest.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        samples.push(manifest.load_sample(record)?);
    }
    Ok((manifest, samples))
}

/// Deterministic class-balanced split by primary-object class. The train
/// side gets round(fraction * N) records, allocated per class by largest
/// remainder, so every class is within one sample of its proportional
/// share.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(OdisError::invalid("train fraction must lie in (0, 1)"));
    }
    let n = manifest.records.len();
    let train_total = ((train_fraction * n as f64).round() as usize).min(n);

    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.primary_class()?).or_default().push(i);
    }
    let mut rng = stream(seed, &[0x5711]);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
    }

    // largest-remainder allocation of the train quota
    let mut quotas: Vec<(u8, usize, f64)> = by_class
        .iter()
        .map(|(&c, members)| {
            let exact = train_fraction * members.len() as f64;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut allocated: usize = quotas.iter().map(|(_, q, _)| *q).sum();
    quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut qi = 0;
    while allocated < train_total && qi < quotas.len() {
        let class_size = by_class[&quotas[qi].0].len();
        if quotas[qi].1 < class_size {
            quotas[qi].1 += 1;
            allocated += 1;
        }
        qi += 1;
        if qi == quotas.len() && allocated < train_total {
            qi = 0;
        }
    }

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (class, take, _) in &quotas {
        let members = &by_class[class];
        train_idx.extend_from_slice(&members[..*take]);
        val_idx.extend_from_slice(&members[*take..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    let pick = |idx: &[usize]| DatasetManifest {
        root: manifest.root.clone(),
        records: idx.iter().map(|&i| manifest.records[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&val_idx)))
}
