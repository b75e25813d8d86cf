//! Dataset directory layout:
//!
//! ```text
//! classes.txt          one class name per line, in label order
//! labels.tsv           id <TAB> class name
//! split.tsv            id <TAB> train|val|test
//! images/NNNNN.pgm     8-bit P5 image
//! landmarks/NNNNN.txt  68 lines "x y", normalized coordinates
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Sample, Split, SplitDataset};
use crate::au::LandmarkSet;
use crate::error::{Error, Result};
use crate::pnm::{quantize, read_pgm, write_pgm, GrayImage};
use crate::tensor::Tensor;

fn file_stem(id: usize) -> String {
    format!("{id:05}")
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes all three splits under `dir`, creating it if needed.
pub fn save_dataset(data: &SplitDataset, dir: &Path) -> Result<()> {
    mkdir(&dir.join("images"))?;
    mkdir(&dir.join("landmarks"))?;
    let classes = data.classes();
    write(&dir.join("classes.txt"), &(classes.join("\n") + "\n"))?;
    let mut labels = String::new();
    let mut splits = String::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in &data.get(split).samples {
            let stem = file_stem(s.id);
            let img = GrayImage {
                width: s.width(),
                height: s.height(),
                pixels: s.image.data().iter().map(|&v| quantize(v)).collect(),
            };
            write_pgm(&dir.join("images").join(format!("{stem}.pgm")), &img)?;
            write(&dir.join("landmarks").join(format!("{stem}.txt")), &s.landmarks.to_text())?;
            writeln!(labels, "{stem}\t{}", classes[s.label]).expect("string write");
            writeln!(splits, "{stem}\t{}", split.as_str()).expect("string write");
        }
    }
    write(&dir.join("labels.tsv"), &labels)?;
    write(&dir.join("split.tsv"), &splits)
}

fn parse_id(field: &str, path: &Path, line: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::data(path, line, format!("bad sample id {field:?}")))
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize, String)>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (id, value) = raw
            .split_once('\t')
            .ok_or_else(|| Error::data(path, line, "expected two tab-separated fields"))?;
        out.push((line, parse_id(id, path, line)?, value.trim().to_string()));
    }
    Ok(out)
}

/// Loads a directory written by [`save_dataset`] or laid out the same way.
pub fn load_dataset(dir: &Path) -> Result<SplitDataset> {
    let classes_path = dir.join("classes.txt");
    let classes: Vec<String> = read(&classes_path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if classes.is_empty() {
        return Err(Error::data(&classes_path, 1, "no class names"));
    }

    let labels_path = dir.join("labels.tsv");
    let mut labels = BTreeMap::new();
    for (line, id, name) in read_pairs(&labels_path)? {
        let label = classes
            .iter()
            .position(|c| c.eq_ignore_ascii_case(&name))
            .ok_or_else(|| Error::data(&labels_path, line, format!("unknown class {name:?}")))?;
        if labels.insert(id, label).is_some() {
            return Err(Error::data(&labels_path, line, format!("duplicate id {id}")));
        }
    }

    let split_path = dir.join("split.tsv");
    let mut parts: [Vec<Sample>; 3] = Default::default();
    let mut size = None;
    for (line, id, name) in read_pairs(&split_path)? {
        let split = Split::parse(&name)
            .ok_or_else(|| Error::data(&split_path, line, format!("unknown split {name:?}")))?;
        let label = *labels
            .get(&id)
            .ok_or_else(|| Error::data(&split_path, line, format!("id {id} has no label")))?;
        let stem = file_stem(id);
        let img_path = dir.join("images").join(format!("{stem}.pgm"));
        let img = read_pgm(&img_path)?;
        match size {
            None => size = Some((img.height, img.width)),
            Some(hw) if hw != (img.height, img.width) => {
                return Err(Error::data(
                    &img_path,
                    1,
                    format!("image is {}x{}, dataset is {}x{}", img.height, img.width, hw.0, hw.1),
                ))
            }
            _ => {}
        }
        let landmarks = LandmarkSet::load(&dir.join("landmarks").join(format!("{stem}.txt")))?;
        let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        let slot = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        parts[slot].push(Sample {
            id,
            image: Tensor::new(vec![1, img.height, img.width], data)?,
            landmarks,
            label,
        });
    }
    let [train, val, test] = parts;
    let wrap = |samples| Dataset {
        classes: classes.clone(),
        samples,
    };
    Ok(SplitDataset {
        train: wrap(train),
        val: wrap(val),
        test: wrap(test),
    })
}
