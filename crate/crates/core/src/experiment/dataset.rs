//! On-disk LR/HR patch datasets.
//!
//! ```text
//! out/
//!   manifest.csv   index,lr,hr,source,y,x   (y, x: LR crop origin)
//!   lr/00000.png
//!   hr/00000.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::toy::toy_image;
use crate::error::{Error, Result};
use crate::io::{load_image, save_image};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::training::Pair;

pub const MANIFEST: &str = "manifest.csv";

/// Where patches come from.
#[derive(Clone, Debug)]
pub enum Source {
    /// A directory of HR images, or one holding `lr/` and `hr/` subdirectories
    /// with matching file names.
    Directory(PathBuf),
    /// Procedural toy images of the given side.
    Synthetic { side: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub lr: String,
    pub hr: String,
    pub source: String,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetReport {
    pub written: usize,
    /// Source files that could not be used.
    pub skipped: usize,
    pub manifest: PathBuf,
}

struct SourceImage {
    name: String,
    /// Present only for paired sources.
    lr: Option<Tensor>,
    hr: Tensor,
}

fn to_rgb(t: Tensor) -> Tensor {
    if t.channels() == 3 {
        t
    } else {
        t.channel(0).broadcast_channels(3).expect("single channel")
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_sources(dir: &Path, patch: usize, scale: usize) -> Result<(Vec<SourceImage>, usize)> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let (lr_dir, hr_dir) = (dir.join("lr"), dir.join("hr"));
    let paired = lr_dir.is_dir() && hr_dir.is_dir();
    let files = image_files(if paired { &hr_dir } else { dir })?;
    let mut images = Vec::new();
    let mut skipped = 0;
    for path in files {
        let name = file_name(&path);
        let loaded = if paired {
            load_image(&path).and_then(|hr| {
                let lr = load_image(lr_dir.join(&name))?;
                Ok((Some(to_rgb(lr)), to_rgb(hr)))
            })
        } else {
            load_image(&path).map(|hr| (None, to_rgb(hr)))
        };
        let usable = match &loaded {
            Ok((Some(lr), hr)) => {
                hr.height() == lr.height() * scale
                    && hr.width() == lr.width() * scale
                    && lr.height() >= patch
                    && lr.width() >= patch
            }
            Ok((None, hr)) => hr.height() >= patch * scale && hr.width() >= patch * scale,
            Err(_) => false,
        };
        match loaded {
            Ok((lr, hr)) if usable => images.push(SourceImage { name, lr, hr }),
            Ok(_) => {
                log::warn!("skipping {name}: too small or mismatched pair");
                skipped += 1;
            }
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped += 1;
            }
        }
    }
    Ok((images, skipped))
}

fn cut(
    img: &SourceImage,
    patch: usize,
    scale: usize,
    stream: &mut RngStream,
) -> Result<(Pair, usize, usize)> {
    let hp = patch * scale;
    let max_y = img.hr.height() / scale - patch;
    let max_x = img.hr.width() / scale - patch;
    let y = stream.index(max_y + 1);
    let x = stream.index(max_x + 1);
    let hr = img.hr.crop(y * scale, x * scale, hp, hp)?;
    let lr = match &img.lr {
        Some(lr) => lr.crop(y, x, patch, patch)?,
        None => hr.downsample_area(scale)?,
    };
    Ok(((lr, hr), y, x))
}

/// Cuts `count` random patch pairs from `source` into `out`.
pub fn prepare_dataset(
    source: &Source,
    out: &Path,
    patch: usize,
    scale: usize,
    count: usize,
    seed: u64,
) -> Result<DatasetReport> {
    if patch == 0 || scale == 0 {
        return Err(Error::Config(
            "patch size and scale must be positive".into(),
        ));
    }
    let (sources, skipped) = match source {
        Source::Directory(dir) => {
            let (s, k) = load_sources(dir, patch, scale)?;
            if s.is_empty() {
                return Err(Error::EmptyDataset("no readable source images"));
            }
            (s, k)
        }
        Source::Synthetic { side } => {
            if *side < patch * scale {
                return Err(Error::Config(format!(
                    "synthetic side {side} smaller than HR patch {}",
                    patch * scale
                )));
            }
            (Vec::new(), 0)
        }
    };
    for sub in ["lr", "hr"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let root = RngStream::new(seed);
    let mut rows = Vec::with_capacity(count);
    for index in 0..count {
        let mut s = root.split(index as u64);
        let ((lr, hr), y, x, name) = match source {
            Source::Directory(_) => {
                let img = &sources[s.index(sources.len())];
                let (p, y, x) = cut(img, patch, scale, &mut s)?;
                (p, y, x, img.name.clone())
            }
            Source::Synthetic { side } => {
                let img = SourceImage {
                    name: format!("synthetic-{seed}-{index}"),
                    lr: None,
                    hr: toy_image(*side, &mut s.split(0)),
                };
                let (p, y, x) = cut(&img, patch, scale, &mut s)?;
                (p, y, x, img.name)
            }
        };
        let lr_rel = format!("lr/{index:05}.png");
        let hr_rel = format!("hr/{index:05}.png");
        save_image(&lr, out.join(&lr_rel))?;
        save_image(&hr, out.join(&hr_rel))?;
        rows.push(ManifestRow {
            index,
            lr: lr_rel,
            hr: hr_rel,
            source: name,
            y,
            x,
        });
    }
    let manifest = out.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest)?;
    if rows.is_empty() {
        w.write_record(["index", "lr", "hr", "source", "y", "x"])?;
    }
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(DatasetReport {
        written: rows.len(),
        skipped,
        manifest,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let mut r = csv::Reader::from_path(&path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Loads every pair listed in `dir/manifest.csv`, as RGB.
pub fn load_dataset(dir: &Path) -> Result<Vec<Pair>> {
    read_manifest(dir)?
        .iter()
        .map(|row| {
            let lr = to_rgb(load_image(dir.join(&row.lr))?);
            let hr = to_rgb(load_image(dir.join(&row.hr))?);
            if !hr.height().is_multiple_of(lr.height()) || !hr.width().is_multiple_of(lr.width()) {
                return Err(Error::InvalidShape(format!(
                    "pair {}: HR {} is not a multiple of LR {}",
                    row.index,
                    hr.shape(),
                    lr.shape()
                )));
            }
            Ok((lr, hr))
        })
        .collect()
}

/// Deterministic shuffle-and-split into (train, test).
pub fn split_dataset(data: &[Pair], test_fraction: f64, seed: u64) -> (Vec<Pair>, Vec<Pair>) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut s = RngStream::new(seed).split(0x7e57);
    for i in (1..order.len()).rev() {
        order.swap(i, s.index(i + 1));
    }
    let n_test = (data.len() as f64 * test_fraction).round() as usize;
    let test = order[..n_test].iter().map(|&i| data[i].clone()).collect();
    let train = order[n_test..].iter().map(|&i| data[i].clone()).collect();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_image_four_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        save_image(&toy_image(64, &mut RngStream::new(1)), src.join("a.png")).unwrap();
        fs::write(src.join("broken.png"), b"nope").unwrap();
        let out = dir.path().join("out");
        let rep = prepare_dataset(&Source::Directory(src), &out, 16, 2, 4, 3).unwrap();
        assert_eq!(rep.written, 4);
        assert_eq!(rep.skipped, 1);
        let pairs = load_dataset(&out).unwrap();
        assert_eq!(pairs.len(), 4);
        for (lr, hr) in &pairs {
            assert_eq!(lr.shape(), crate::tensor::Shape::new(16, 16, 3));
            assert_eq!(hr.shape(), crate::tensor::Shape::new(32, 32, 3));
        }
    }

    #[test]
    fn paired_directories_are_respected() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(src.join("lr")).unwrap();
        fs::create_dir_all(src.join("hr")).unwrap();
        let hr = toy_image(32, &mut RngStream::new(2));
        let lr = Tensor::full(16, 16, 3, 0.5);
        save_image(&hr, src.join("hr/p.png")).unwrap();
        save_image(&lr, src.join("lr/p.png")).unwrap();
        let out = dir.path().join("out");
        prepare_dataset(&Source::Directory(src), &out, 8, 2, 2, 0).unwrap();
        for (l, _) in load_dataset(&out).unwrap() {
            assert!(l.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
        }
    }

    #[test]
    fn count_zero_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let rep = prepare_dataset(&Source::Synthetic { side: 32 }, &a, 8, 2, 0, 1).unwrap();
        assert_eq!(rep.written, 0);
        assert!(read_manifest(&a).unwrap().is_empty());

        let b = dir.path().join("b");
        let c = dir.path().join("c");
        prepare_dataset(&Source::Synthetic { side: 32 }, &b, 8, 2, 3, 9).unwrap();
        prepare_dataset(&Source::Synthetic { side: 32 }, &c, 8, 2, 3, 9).unwrap();
        assert_eq!(
            fs::read(b.join(MANIFEST)).unwrap(),
            fs::read(c.join(MANIFEST)).unwrap()
        );
        assert_eq!(
            fs::read(b.join("hr/00002.png")).unwrap(),
            fs::read(c.join("hr/00002.png")).unwrap()
        );
    }

    #[test]
    fn empty_source_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = prepare_dataset(
            &Source::Directory(dir.path().to_path_buf()),
            &dir.path().join("o"),
            8,
            2,
            1,
            0,
        );
        assert!(matches!(err, Err(Error::EmptyDataset(_))));
        assert!(matches!(
            prepare_dataset(
                &Source::Directory(dir.path().join("none")),
                dir.path(),
                8,
                2,
                1,
                0
            ),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn split_is_partition() {
        let data = super::super::toy::toy_pairs(10, 4, 2, &RngStream::new(0));
        let (tr, te) = split_dataset(&data, 0.3, 1);
        assert_eq!((tr.len(), te.len()), (7, 3));
        assert_eq!(split_dataset(&data, 0.3, 1), (tr, te));
    }
}
