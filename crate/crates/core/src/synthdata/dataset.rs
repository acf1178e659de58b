//! Dataset generation and the TSV manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image::{load_image, save_image};
use super::{render_pictogram, render_scene, Category, SceneParams, ToySignSpec, GLYPH_COUNT, SCENE_SIZE};
use crate::error::{Error, Result};
use crate::kernels::resize_bilinear_forward;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::training::{Circle, SceneSample, TrainingSet};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub categories: Vec<Category>,
    pub classes_per_category: u32,
    pub scenes_per_class: usize,
    pub seed: u64,
    /// Allow out-of-plane tilt up to 50 degrees instead of 20.
    pub high_skew: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            categories: Category::ALL.to_vec(),
            classes_per_category: 4,
            scenes_per_class: 10,
            seed: 0,
            high_skew: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub class_id: u32,
    pub category: Category,
    pub circle: Circle,
    /// Seeds the record's scene parameters.
    pub seed: u64,
}

impl ManifestRecord {
    pub fn spec(&self) -> ToySignSpec {
        ToySignSpec::from_class_id(self.class_id).expect("validated on parse")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let Circle { cx, cy, r: rad } = r.circle;
            writeln!(
                s,
                "{}\t{}\t{}\t{cx:.3}\t{cy:.3}\t{rad:.3}\t{}",
                r.path.display(),
                r.class_id,
                r.category.name(),
                r.seed
            )
            .expect("write to string");
        }
        s
    }

    /// Parses a manifest file; paths resolve against its directory and every
    /// referenced image must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, &root, path)?;
        Ok(manifest)
    }

    fn parse(text: &str, root: &Path, source: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| Error::Manifest {
                path: source.to_path_buf(),
                line: k + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(fail(format!("expected 7 tab-separated fields, found {}", fields.len())));
            }
            let num = |i: usize, name: &str| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| fail(format!("{name} {:?} is not a number", fields[i])))
            };
            let class_id: u32 = fields[1]
                .parse()
                .map_err(|_| fail(format!("class id {:?} is not an integer", fields[1])))?;
            let category =
                Category::from_name(fields[2]).ok_or_else(|| fail(format!("unknown category {:?}", fields[2])))?;
            if (class_id / GLYPH_COUNT) as usize != category.index() {
                return Err(fail(format!("class {class_id} does not belong to {}", category.name())));
            }
            let circle = Circle {
                cx: num(3, "cx")?,
                cy: num(4, "cy")?,
                r: num(5, "r")?,
            };
            if circle.r <= 0.0 {
                return Err(fail(format!("radius {} must be positive", circle.r)));
            }
            let seed = fields[6]
                .parse()
                .map_err(|_| fail(format!("seed {:?} is not an integer", fields[6])))?;
            let rel = PathBuf::from(fields[0]);
            if !root.join(&rel).is_file() {
                return Err(fail(format!("missing image {}", root.join(&rel).display())));
            }
            records.push(ManifestRecord {
                path: rel,
                class_id,
                category,
                circle,
                seed,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Splits records into (train, held-out): every fifth scene of each class,
    /// in manifest order, is held out.
    pub fn split(&self) -> (Vec<&ManifestRecord>, Vec<&ManifestRecord>) {
        let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
        let mut train = Vec::new();
        let mut held = Vec::new();
        for r in &self.records {
            let k = seen.entry(r.class_id).or_default();
            if *k % 5 == 4 {
                held.push(r);
            } else {
                train.push(r);
            }
            *k += 1;
        }
        (train, held)
    }

    /// Distinct class ids in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.records.iter().map(|r| r.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Renders every scene and writes the images plus `manifest.tsv` under
/// `out_dir`. Each record draws from its own stream of `seed`, so the output
/// does not depend on thread count. The manifest appears only once every
/// image is written.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.classes_per_category == 0 || config.classes_per_category > GLYPH_COUNT {
        return Err(Error::Config(format!(
            "classes_per_category must lie in 1..={GLYPH_COUNT}, got {}",
            config.classes_per_category
        )));
    }
    if config.categories.is_empty() || config.scenes_per_class == 0 {
        return Err(Error::Config("need at least one category and one scene per class".into()));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut jobs = Vec::new();
    for &cat in &config.categories {
        for glyph in 0..config.classes_per_category {
            for scene in 0..config.scenes_per_class {
                jobs.push((ToySignSpec::new(cat, glyph)?, scene));
            }
        }
    }
    let records = jobs
        .par_iter()
        .enumerate()
        .map(|(index, (spec, scene))| {
            let seed = Rng::with_stream(config.seed, index as u64).next_u64();
            let params = SceneParams::random(&mut Rng::new(seed), config.high_skew);
            let rendered = render_scene(spec, &params)?;
            let rel = PathBuf::from(format!(
                "images/{}_{}_{scene:04}.png",
                spec.category.name(),
                super::GLYPH_NAMES[spec.glyph_id as usize]
            ));
            save_image(&rendered.image, &out_dir.join(&rel))?;
            Ok(ManifestRecord {
                path: rel,
                class_id: spec.class_id(),
                category: spec.category,
                circle: rendered.circle,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    let tmp = out_dir.join(format!("{MANIFEST_NAME}.partial"));
    let dest = out_dir.join(MANIFEST_NAME);
    fs::write(&tmp, manifest.to_tsv()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
    Ok(manifest)
}

fn resize_image<T: Scalar>(image: &Tensor<T>, to: usize) -> Tensor<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = resize_bilinear_forward(image.data(), 3, (h, w), (to, to));
    Tensor::new(&[3, to, to], data).expect("sized buffer")
}

/// Loads `records` at `resolution`: scenes and circles are rescaled from
/// 80x80 and pictograms are rendered at 80x80 then resized the same way.
pub fn load_training_set<T: Scalar>(
    manifest: &DatasetManifest,
    records: &[&ManifestRecord],
    resolution: usize,
) -> Result<TrainingSet<T>> {
    let samples = records
        .par_iter()
        .map(|r| {
            let path = manifest.image_path(r);
            let image: Tensor<T> = load_image(&path)?;
            if image.shape() != [3, SCENE_SIZE, SCENE_SIZE] {
                return Err(Error::ImageFormat {
                    path,
                    msg: format!("expected {SCENE_SIZE}x{SCENE_SIZE}, found {:?}", &image.shape()[1..]),
                });
            }
            Ok(SceneSample {
                image: resize_image(&image, resolution),
                class_id: r.class_id,
                category: r.category.index(),
                circle: r.circle.rescaled(SCENE_SIZE, resolution),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pictograms = BTreeMap::new();
    for r in records {
        if let std::collections::btree_map::Entry::Vacant(e) = pictograms.entry(r.class_id) {
            e.insert(pictogram_at(&r.spec(), resolution)?);
        }
    }
    TrainingSet::new(resolution, samples, pictograms)
}

/// Pictogram rendered at 80x80 and resized to `resolution`, matching how
/// scenes are downscaled.
pub fn pictogram_at<T: Scalar>(spec: &ToySignSpec, resolution: usize) -> Result<Tensor<T>> {
    Ok(resize_image(&render_pictogram(spec, SCENE_SIZE)?.cast(), resolution))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            categories: vec![Category::WhiteCircle, Category::BlueRectangle],
            classes_per_category: 2,
            scenes_per_class: 3,
            seed: 9,
            high_skew: false,
        }
    }

    #[test]
    fn generation_counts_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), dir.path()).unwrap();
        assert_eq!(m.records.len(), 12);
        let loaded = DatasetManifest::load(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(loaded.records, m.records);
        for class in loaded.classes() {
            assert_eq!(loaded.records.iter().filter(|r| r.class_id == class).count(), 3);
        }
        let (train, held) = loaded.split();
        assert_eq!(train.len() + held.len(), 12);
        let set = load_training_set::<f32>(&loaded, &train, 32).unwrap();
        assert_eq!(set.samples()[0].image.shape(), &[3, 32, 32]);
        assert_eq!(set.pictogram(8).unwrap().shape(), &[3, 32, 32]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&small(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let good = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = good.lines().map(String::from).collect();
        let cases = [
            "only\tthree\tfields".to_string(),
            lines[0].replace("white_circle", "green_hexagon"),
            lines[0].replacen("\t8\t", "\tx\t", 1),
            lines[0].replace("images/", "missing/"),
        ];
        for bad in cases {
            lines[2] = bad.clone();
            fs::write(&path, lines.join("\n")).unwrap();
            match DatasetManifest::load(&path) {
                Err(Error::Manifest { line, .. }) => assert_eq!(line, 3, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn zero_classes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            classes_per_category: 0,
            ..small()
        };
        assert!(generate_dataset(&cfg, dir.path()).is_err());
    }
}
