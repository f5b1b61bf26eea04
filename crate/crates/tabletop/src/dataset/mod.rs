//! Dataset handling: mask preprocessing, shift augmentation, filename
//! parsing, the PGM+CSV archive format, and the synthetic scene
//! generator.
//!
//! The protocol is structural: height H2 samples are always `test`,
//! height H1 samples are split into `train`/`val`.

pub mod pgm;
mod synth;

pub use synth::{render_silhouette, synth_generate, InstanceShape, SynthConfig};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Mug,
    Mouse,
    Stapler,
}

pub const ALL_OBJECTS: [ObjectKind; 3] = [ObjectKind::Mug, ObjectKind::Mouse, ObjectKind::Stapler];

impl ObjectKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectKind::Mug => "mug",
            ObjectKind::Mouse => "mouse",
            ObjectKind::Stapler => "stapler",
        }
    }

    /// Class index for the recognition task.
    pub fn class_index(&self) -> usize {
        match self {
            ObjectKind::Mug => 0,
            ObjectKind::Mouse => 1,
            ObjectKind::Stapler => 2,
        }
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mug" => Ok(ObjectKind::Mug),
            "mouse" => Ok(ObjectKind::Mouse),
            "stapler" => Ok(ObjectKind::Stapler),
            other => Err(Error::Parse(format!("unknown object \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Height {
    H1,
    H2,
}

impl fmt::Display for Height {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Height::H1 => "H1",
            Height::H2 => "H2",
        })
    }
}

impl FromStr for Height {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H1" => Ok(Height::H1),
            "H2" => Ok(Height::H2),
            other => Err(Error::Parse(format!("unknown height \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One of the eight 45°-spaced orientation classes, A1..A8, stored 0..7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct AngleClass(u8);

impl AngleClass {
    pub fn new(index: u8) -> Result<Self> {
        if index < 8 {
            Ok(AngleClass(index))
        } else {
            Err(Error::Parse(format!("angle class index {index} out of 0..8")))
        }
    }

    pub fn index(&self) -> usize {
        self.0 as usize
    }

    /// Label form, `A1`..`A8`.
    pub fn label(&self) -> String {
        format!("A{}", self.0 + 1)
    }

    pub fn all() -> impl Iterator<Item = AngleClass> {
        (0..8).map(AngleClass)
    }
}

impl TryFrom<u8> for AngleClass {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        AngleClass::new(v)
    }
}

impl From<AngleClass> for u8 {
    fn from(a: AngleClass) -> u8 {
        a.0
    }
}

impl FromStr for AngleClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix('A').and_then(|n| n.parse::<u8>().ok()) {
            Some(k) if (1..=8).contains(&k) => Ok(AngleClass(k - 1)),
            _ => Err(Error::Parse(format!("unknown angle label \"{s}\""))),
        }
    }
}

impl fmt::Display for AngleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Original,
    Augmented,
    Synthetic,
}

/// One labeled grayscale image with pixel values in [0,1].
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub object: ObjectKind,
    pub instance: u8,
    pub height: Height,
    pub angle: AngleClass,
    pub shift: (i32, i32),
    pub source: SampleSource,
}

/// One archive index row; `manifest.csv` column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub object: ObjectKind,
    pub instance: u8,
    pub height: Height,
    pub angle: AngleClass,
    pub dx: i32,
    pub dy: i32,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.csv";

    /// Write `manifest.csv` into `dir`, rows sorted by path, LF endings.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.path.cmp(&b.path));
        let path = dir.join(Self::FILE_NAME);
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        for row in &rows {
            writer
                .serialize(row)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        }
        writer
            .flush()
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let mut reader = csv::ReaderBuilder::new()
            .from_path(&path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for record in reader.deserialize() {
            let row: ManifestRow =
                record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            rows.push(row);
        }
        let manifest = Manifest { rows };
        manifest.validate(dir)?;
        Ok(manifest)
    }

    /// Structural invariants: unique paths, files present, H2 ⟺ test.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for row in &self.rows {
            if !seen.insert(&row.path) {
                return Err(Error::Parse(format!("duplicate manifest path {}", row.path)));
            }
            if (row.height == Height::H2) != (row.split == Split::Test) {
                return Err(Error::Parse(format!(
                    "{}: split {} violates the H2 ⟺ test rule for height {}",
                    row.path, row.split, row.height
                )));
            }
            if !dir.join(&row.path).is_file() {
                return Err(Error::Parse(format!(
                    "manifest references missing file {}",
                    row.path
                )));
            }
        }
        Ok(())
    }

    pub fn count_by_split(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }

    /// Load decoded samples for the given split (and object, if any).
    pub fn load_samples(
        &self,
        dir: &Path,
        split: Split,
        object: Option<ObjectKind>,
    ) -> Result<Vec<Sample>> {
        self.rows
            .iter()
            .filter(|r| r.split == split && object.map_or(true, |o| r.object == o))
            .map(|r| load_sample(dir, r))
            .collect()
    }
}

pub fn load_sample(dir: &Path, row: &ManifestRow) -> Result<Sample> {
    let img = pgm::read_pgm(&dir.join(&row.path))?;
    let source = if row.dx == 0 && row.dy == 0 {
        SampleSource::Original
    } else {
        SampleSource::Augmented
    };
    Ok(Sample {
        image: pgm::pgm_to_tensor(&img),
        object: row.object,
        instance: row.instance,
        height: row.height,
        angle: row.angle,
        shift: (row.dx, row.dy),
        source,
    })
}

/// Multiply a raw 0..255 image by its binary 0/255 mask and rescale into
/// [0,1]. Background pixels come out exactly 0.
pub fn apply_mask(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.shape() != mask.shape() {
        return Err(Error::Dim(format!(
            "image shape {:?} does not match mask shape {:?}",
            image.shape(),
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 255.0) {
        return Err(Error::Parse(
            "mask contains values other than 0 and 255".into(),
        ));
    }
    image.zip(mask, |v, m| (v / 255.0) * (m / 255.0))
}

/// Translate image content by each `(dx, dy)`; vacated pixels are 0.
/// x grows rightward (columns), y downward (rows).
pub fn shift_augment(image: &Tensor<f32>, shifts: &[(i32, i32)]) -> Result<Vec<Tensor<f32>>> {
    if image.rank() != 3 {
        return Err(Error::Dim(format!(
            "shift_augment wants [c,h,w], got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(shifts.len());
    for &(dx, dy) in shifts {
        if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
            return Err(Error::Config(format!(
                "shift ({dx},{dy}) out of bounds for {w}x{h} image"
            )));
        }
        let mut shifted = Tensor::zeros(image.shape());
        for ch in 0..c {
            for y in 0..h {
                let sy = y as i32 - dy;
                if sy < 0 || sy >= h as i32 {
                    continue;
                }
                for x in 0..w {
                    let sx = x as i32 - dx;
                    if sx < 0 || sx >= w as i32 {
                        continue;
                    }
                    shifted.set3(ch, y, x, image.at3(ch, sy as usize, sx as usize));
                }
            }
        }
        out.push(shifted);
    }
    Ok(out)
}

/// Default augmentation offsets: {-10,-5,0,+5,+10} in x and y
/// independently, minus the (0,0) original.
pub fn default_shifts() -> Vec<(i32, i32)> {
    let steps = [-10, -5, 0, 5, 10];
    let mut out = Vec::with_capacity(24);
    for &dx in &steps {
        for &dy in &steps {
            if (dx, dy) != (0, 0) {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Parse `<object>_<instance>_<H1|H2>_<A1..A8>_<index>.pgm`.
pub fn parse_filename(name: &str) -> Result<(ObjectKind, u8, Height, AngleClass)> {
    let stem = name
        .strip_suffix(".pgm")
        .ok_or_else(|| Error::Parse(format!("\"{name}\" does not end in .pgm")))?;
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 5 {
        return Err(Error::Parse(format!(
            "\"{name}\" does not match <object>_<instance>_<height>_<angle>_<index>.pgm"
        )));
    }
    let object: ObjectKind = parts[0]
        .parse()
        .map_err(|_| Error::Parse(format!("\"{name}\": unknown object \"{}\"", parts[0])))?;
    let instance: u8 = parts[1]
        .parse()
        .ok()
        .filter(|i| (1..=10).contains(i))
        .ok_or_else(|| Error::Parse(format!("\"{name}\": bad instance \"{}\"", parts[1])))?;
    let height: Height = parts[2]
        .parse()
        .map_err(|_| Error::Parse(format!("\"{name}\": bad height \"{}\"", parts[2])))?;
    let angle: AngleClass = parts[3]
        .parse()
        .map_err(|_| Error::Parse(format!("\"{name}\": bad angle \"{}\"", parts[3])))?;
    if parts[4].is_empty() || !parts[4].bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Parse(format!(
            "\"{name}\": bad index \"{}\"",
            parts[4]
        )));
    }
    Ok((object, instance, height, angle))
}

/// 2x2 box-average downsampling; odd trailing row/col replicated first.
pub fn resize_half(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.rank() != 3 || image.shape()[0] != 1 {
        return Err(Error::Dim(format!(
            "resize_half wants [1,h,w], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (ph, pw) = (h + h % 2, w + w % 2);
    let mut padded = Tensor::zeros(&[1, ph, pw]);
    for y in 0..ph {
        for x in 0..pw {
            padded.set3(0, y, x, image.at3(0, y.min(h - 1), x.min(w - 1)));
        }
    }
    let (oh, ow) = (ph / 2, pw / 2);
    let mut out = Tensor::zeros(&[1, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            let s = padded.at3(0, 2 * y, 2 * x)
                + padded.at3(0, 2 * y, 2 * x + 1)
                + padded.at3(0, 2 * y + 1, 2 * x)
                + padded.at3(0, 2 * y + 1, 2 * x + 1);
            out.set3(0, y, x, s / 4.0);
        }
    }
    Ok(out)
}

/// Result of [`build_archive`]: the manifest plus inputs skipped for
/// missing masks.
#[derive(Debug)]
pub struct ArchiveReport {
    pub manifest: Manifest,
    pub skipped_no_mask: Vec<PathBuf>,
}

/// Mask, augment, and re-encode every `<name>.pgm` / `<name>_mask.pgm`
/// pair under `input_dir` into `out_dir`, then write the manifest.
/// Emits one masked original plus one variant per shift for each input.
pub fn build_archive(
    input_dir: &Path,
    shifts: &[(i32, i32)],
    out_dir: &Path,
    val_fraction: f64,
    seed: u64,
) -> Result<ArchiveReport> {
    let mut inputs = Vec::new();
    collect_pgms(input_dir, &mut inputs)?;
    inputs.sort();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for path in inputs {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Parse(format!("non-UTF-8 file name {}", path.display())))?;
        if name.ends_with("_mask.pgm") {
            continue;
        }
        let (object, instance, height, angle) = parse_filename(name)?;
        let mask_path = path.with_file_name(format!(
            "{}_mask.pgm",
            name.strip_suffix(".pgm").unwrap()
        ));
        if !mask_path.is_file() {
            skipped.push(path.clone());
            continue;
        }
        let image = pgm::pgm_to_tensor_raw(&pgm::read_pgm(&path)?);
        let mask = pgm::pgm_to_tensor_raw(&pgm::read_pgm(&mask_path)?);
        let masked = apply_mask(&image, &mask)?;

        let obj_dir = out_dir.join(object.as_str());
        std::fs::create_dir_all(&obj_dir).map_err(|e| Error::io(&obj_dir, e))?;
        let stem = name.strip_suffix(".pgm").unwrap();

        let mut emit = |img: &Tensor<f32>, dx: i32, dy: i32, rows: &mut Vec<ManifestRow>| -> Result<()> {
            let file = if (dx, dy) == (0, 0) {
                format!("{stem}.pgm")
            } else {
                format!("{stem}__dx{dx}dy{dy}.pgm")
            };
            pgm::write_pgm(&obj_dir.join(&file), &pgm::tensor_to_pgm(img)?)?;
            rows.push(ManifestRow {
                path: format!("{}/{file}", object.as_str()),
                object,
                instance,
                height,
                angle,
                dx,
                dy,
                // H1 placeholder; reassigned by the stratified split below.
                split: if height == Height::H2 { Split::Test } else { Split::Train },
            });
            Ok(())
        };

        emit(&masked, 0, 0, &mut rows)?;
        for (img, &(dx, dy)) in shift_augment(&masked, shifts)?.iter().zip(shifts) {
            emit(img, dx, dy, &mut rows)?;
        }
    }

    assign_h1_splits(&mut rows, val_fraction, seed)?;
    let manifest = Manifest { rows };
    manifest.save(out_dir)?;
    Ok(ArchiveReport {
        manifest,
        skipped_no_mask: skipped,
    })
}

/// Stratified train/val assignment over the H1 rows, in place.
pub(crate) fn assign_h1_splits(
    rows: &mut [ManifestRow],
    val_fraction: f64,
    seed: u64,
) -> Result<()> {
    let h1_indices: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].height == Height::H1)
        .collect();
    if h1_indices.is_empty() {
        return Ok(());
    }
    let keys: Vec<(ObjectKind, AngleClass)> = h1_indices
        .iter()
        .map(|&i| (rows[i].object, rows[i].angle))
        .collect();
    let (train, val) = crate::train::split_train_val(&keys, val_fraction, seed)?;
    for &k in &train {
        rows[h1_indices[k]].split = Split::Train;
    }
    for &k in &val {
        rows[h1_indices[k]].split = Split::Val;
    }
    Ok(())
}

fn collect_pgms(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_pgms(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "pgm") {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_mask_divides_and_zeroes() {
        let image = Tensor::from_vec(&[1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let mask = Tensor::from_vec(&[1, 2, 2], vec![255.0, 0.0, 0.0, 255.0]).unwrap();
        let out = apply_mask(&image, &mask).unwrap();
        assert_eq!(out.data(), &[10.0 / 255.0, 0.0, 0.0, 40.0 / 255.0]);
    }

    #[test]
    fn apply_mask_all_on_and_all_off() {
        let image = Tensor::from_vec(&[1, 1, 3], vec![0.0, 128.0, 255.0]).unwrap();
        let on = Tensor::filled(&[1, 1, 3], 255.0);
        let out = apply_mask(&image, &on).unwrap();
        assert_eq!(out.data(), &[0.0, 128.0 / 255.0, 1.0]);

        let off = Tensor::filled(&[1, 1, 3], 0.0);
        let black = apply_mask(&image, &off).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_rejects_gray_mask() {
        let image = Tensor::filled(&[1, 1, 1], 100.0);
        let gray = Tensor::filled(&[1, 1, 1], 128.0);
        assert!(apply_mask(&image, &gray).is_err());
    }

    #[test]
    fn shift_moves_content_rightward() {
        let mut img = Tensor::zeros(&[1, 3, 3]);
        img.set3(0, 1, 1, 1.0);
        let out = shift_augment(&img, &[(1, 0)]).unwrap();
        assert_eq!(out[0].at3(0, 1, 2), 1.0);
        assert_eq!(out[0].data().iter().copied().sum::<f32>(), 1.0);
    }

    #[test]
    fn zero_shift_is_identity_and_bounds_checked() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = shift_augment(&img, &[(0, 0)]).unwrap();
        assert_eq!(out[0], img);
        assert!(shift_augment(&img, &[(2, 0)]).is_err());
    }

    #[test]
    fn shift_preserves_gray_levels_in_frame() {
        let mut img = Tensor::zeros(&[1, 8, 8]);
        img.set3(0, 3, 3, 0.25);
        img.set3(0, 3, 4, 0.5);
        img.set3(0, 4, 3, 0.75);
        let shifted = &shift_augment(&img, &[(2, -1)]).unwrap()[0];
        let levels = |t: &Tensor<f32>| {
            let mut v: Vec<u32> = t
                .data()
                .iter()
                .filter(|&&x| x != 0.0)
                .map(|x| x.to_bits())
                .collect();
            v.sort();
            v
        };
        assert_eq!(levels(&img), levels(shifted));
    }

    #[test]
    fn default_shift_set_has_24_offsets() {
        let shifts = default_shifts();
        assert_eq!(shifts.len(), 24);
        assert!(!shifts.contains(&(0, 0)));
    }

    #[test]
    fn filename_parses_per_convention() {
        let (o, i, h, a) = parse_filename("mug_03_H1_A5_0007.pgm").unwrap();
        assert_eq!(o, ObjectKind::Mug);
        assert_eq!(i, 3);
        assert_eq!(h, Height::H1);
        assert_eq!(a.index(), 4);

        let (o, i, h, a) = parse_filename("stapler_10_H2_A1_0000.pgm").unwrap();
        assert_eq!(o, ObjectKind::Stapler);
        assert_eq!(i, 10);
        assert_eq!(h, Height::H2);
        assert_eq!(a.index(), 0);
    }

    #[test]
    fn filename_error_quotes_offending_component() {
        let err = parse_filename("mug_03_X9_A5_0.pgm").unwrap_err().to_string();
        assert!(err.contains("X9"), "{err}");
        let err = parse_filename("mug_03_H1_A9_0.pgm").unwrap_err().to_string();
        assert!(err.contains("A9"), "{err}");
    }

    #[test]
    fn resize_half_shapes_and_values() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        let half = resize_half(&img).unwrap();
        assert_eq!(half.shape(), &[1, 1, 1]);
        assert_eq!(half.data(), &[1.0]);

        let constant = Tensor::filled(&[1, 6, 4], 0.42);
        let half = resize_half(&constant).unwrap();
        assert_eq!(half.shape(), &[1, 3, 2]);
        assert!(half.data().iter().all(|&v| v == 0.42));

        // 640x480 capture halves to 320x240.
        let big = Tensor::zeros(&[1, 480, 640]);
        assert_eq!(resize_half(&big).unwrap().shape(), &[1, 240, 320]);
    }

    #[test]
    fn resize_half_odd_dims_replicate() {
        let img = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let half = resize_half(&img).unwrap();
        assert_eq!(half.shape(), &[1, 1, 2]);
        assert_eq!(half.data(), &[1.5, 3.0]);
    }

    #[test]
    fn angle_class_roundtrip() {
        for k in 0..8u8 {
            let a = AngleClass::new(k).unwrap();
            let parsed: AngleClass = a.label().parse().unwrap();
            assert_eq!(parsed, a);
        }
        assert!(AngleClass::new(8).is_err());
        assert!("A0".parse::<AngleClass>().is_err());
    }
}
