//! Canonical record types and their file formats.
//!
//! * `features.csv`: one row per image with location, optional cluster label,
//!   the raw feature columns named by the manifest and an optional
//!   `emb_0..emb_{d-1}` embedding block.
//! * `comparisons.jsonl`: one pairwise comparison per line, in survey order.
//! * `scores.csv`: `image_id,vata` followed by the VPIs alphabetically.
//! * `comfort.csv`: field comfort points in path order.
//! * `manifest.json`: the surveyed image ids with their display URLs.
//!
//! Floats are written in shortest round-trip form, so load-after-save is exact.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicator::{Indicator, Vpi, VPI_COUNT};
use crate::schema::{schema, SEGMENTATION_COUNT};

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub lat: f64,
    pub lon: f64,
    pub capture_date: Option<String>,
    pub cluster_label: Option<usize>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, lat: f64, lon: f64) -> Result<Self> {
        check_lat_lon(lat, lon)?;
        Ok(ImageRecord {
            image_id: image_id.into(),
            lat,
            lon,
            capture_date: None,
            cluster_label: None,
        })
    }
}

pub(crate) fn check_lat_lon(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || lat.is_nan() {
        return Err(Error::Range {
            what: "latitude".into(),
            value: lat,
        });
    }
    if !(-180.0..=180.0).contains(&lon) || lon.is_nan() {
        return Err(Error::Range {
            what: "longitude".into(),
            value: lon,
        });
    }
    Ok(())
}

/// Objective features of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub segmentation: Vec<f64>,
    pub objects: Vec<f64>,
    pub pixel: Vec<f64>,
    pub scene: Vec<f64>,
    pub embedding: Option<Vec<f64>>,
    interpretable: Vec<f64>,
}

impl FeatureVector {
    pub fn new(
        image_id: impl Into<String>,
        segmentation: Vec<f64>,
        objects: Vec<f64>,
        pixel: Vec<f64>,
        scene: Vec<f64>,
        embedding: Option<Vec<f64>>,
    ) -> Result<Self> {
        let s = schema();
        let image_id = image_id.into();
        check_len("segmentation", SEGMENTATION_COUNT, segmentation.len())?;
        check_len("objects", s.object_columns.len(), objects.len())?;
        check_len("pixel", s.pixel_columns.len(), pixel.len())?;
        check_len("scene", s.scene_columns.len(), scene.len())?;

        let all = segmentation
            .iter()
            .chain(&objects)
            .chain(&pixel)
            .chain(&scene)
            .chain(embedding.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature for {image_id}")));
        }
        for (name, &v) in s.segmentation_classes.iter().zip(&segmentation) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range {
                    what: format!("segmentation share {name} of {image_id}"),
                    value: v,
                });
            }
        }
        let total: f64 = segmentation.iter().sum();
        if total > 1.0 + 1e-6 {
            return Err(Error::Range {
                what: format!("segmentation total of {image_id}"),
                value: total,
            });
        }
        for (name, &v) in s.object_columns.iter().zip(&objects) {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Range {
                    what: format!("object count {name} of {image_id}"),
                    value: v,
                });
            }
        }
        for (name, &v) in s.scene_columns.iter().zip(&scene) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range {
                    what: format!("scene probability {name} of {image_id}"),
                    value: v,
                });
            }
        }
        let interpretable = s.derive_interpretable(&segmentation, &objects, &pixel, &scene);
        Ok(FeatureVector {
            image_id,
            segmentation,
            objects,
            pixel,
            scene,
            embedding,
            interpretable,
        })
    }

    /// The 52 interpretable values, ordered as [`crate::schema::interpretable_names`].
    pub fn interpretable(&self) -> &[f64] {
        &self.interpretable
    }

    /// Full prediction input: interpretable features followed by the embedding.
    pub fn d1(&self) -> Result<Vec<f64>> {
        let emb = self
            .embedding
            .as_ref()
            .ok_or_else(|| Error::MissingBlock(format!("embedding (image {})", self.image_id)))?;
        Ok(self.interpretable.iter().chain(emb).copied().collect())
    }
}

fn check_len(block: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Schema(format!(
            "{block} block has {got} values, expected {expected}"
        )));
    }
    Ok(())
}

/// Image index plus features, as stored together in `features.csv`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    pub records: Vec<ImageRecord>,
    pub features: Vec<FeatureVector>,
}

impl FeatureTable {
    pub fn embedding_dim(&self) -> Option<usize> {
        self.features
            .first()
            .and_then(|f| f.embedding.as_ref().map(Vec::len))
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.image_id.clone()).collect()
    }
}

const EMB_PREFIX: &str = "emb_";

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    Ok(load_feature_table(path)?.features)
}

pub fn load_feature_table(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    read_feature_table(&mut reader)
}

fn read_feature_table<R: std::io::Read>(reader: &mut csv::Reader<R>) -> Result<FeatureTable> {
    let s = schema();
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let col: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    if col.len() != header.len() {
        return Err(Error::Schema("duplicate column in header".into()));
    }

    let required = ["image_id", "lat", "lon"]
        .into_iter()
        .chain(s.raw_columns())
        .collect::<Vec<_>>();
    for &name in &required {
        if !col.contains_key(name) {
            return Err(Error::Schema(name.to_string()));
        }
    }
    let mut emb_dim = 0;
    for h in &header {
        let known = required.contains(&h.as_str())
            || h == "capture_date"
            || h == "cluster_label";
        if known {
            continue;
        }
        match h.strip_prefix(EMB_PREFIX).and_then(|i| i.parse::<usize>().ok()) {
            Some(_) => emb_dim += 1,
            None => return Err(Error::Schema(format!("unknown column {h}"))),
        }
    }
    for i in 0..emb_dim {
        let name = format!("{EMB_PREFIX}{i}");
        if !col.contains_key(name.as_str()) {
            return Err(Error::Schema(name));
        }
    }

    let mut table = FeatureTable::default();
    let mut seen = HashSet::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = row_idx + 1;
        let text = |name: &str| row.get(col[name]).unwrap_or("");
        let num = |name: &str| -> Result<f64> {
            text(name).trim().parse::<f64>().map_err(|e| Error::Parse {
                row: row_no,
                column: name.to_string(),
                message: e.to_string(),
            })
        };
        let block = |names: &mut dyn Iterator<Item = &str>| -> Result<Vec<f64>> {
            names.map(num).collect()
        };

        let image_id = text("image_id").to_string();
        if !seen.insert(image_id.clone()) {
            return Err(Error::Duplicate(image_id));
        }
        let lat = num("lat")?;
        let lon = num("lon")?;
        let mut record = ImageRecord::new(image_id.clone(), lat, lon)?;
        if col.contains_key("capture_date") && !text("capture_date").is_empty() {
            record.capture_date = Some(text("capture_date").to_string());
        }
        if col.contains_key("cluster_label") && !text("cluster_label").is_empty() {
            let label = text("cluster_label").parse::<usize>().map_err(|e| Error::Parse {
                row: row_no,
                column: "cluster_label".into(),
                message: e.to_string(),
            })?;
            record.cluster_label = Some(label);
        }

        let segmentation = block(&mut s.segmentation_classes.iter().map(String::as_str))?;
        let objects = block(&mut s.object_columns.iter().map(String::as_str))?;
        let pixel = block(&mut s.pixel_columns.iter().map(String::as_str))?;
        let scene = block(&mut s.scene_columns.iter().map(String::as_str))?;
        let embedding = if emb_dim > 0 {
            let names: Vec<String> = (0..emb_dim).map(|i| format!("{EMB_PREFIX}{i}")).collect();
            Some(block(&mut names.iter().map(String::as_str))?)
        } else {
            None
        };
        let fv = FeatureVector::new(image_id, segmentation, objects, pixel, scene, embedding)?;
        table.records.push(record);
        table.features.push(fv);
    }
    Ok(table)
}

pub fn save_feature_table(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    write_feature_table(table, &mut writer)?;
    writer.flush()?;
    Ok(())
}

fn write_feature_table<W: Write>(table: &FeatureTable, writer: &mut csv::Writer<W>) -> Result<()> {
    let s = schema();
    if table.records.len() != table.features.len() {
        return Err(Error::Schema("records and features differ in length".into()));
    }
    let emb_dim = table.embedding_dim().unwrap_or(0);
    let has_dates = table.records.iter().any(|r| r.capture_date.is_some());
    let has_labels = table.records.iter().any(|r| r.cluster_label.is_some());

    let mut header: Vec<String> = vec!["image_id".into(), "lat".into(), "lon".into()];
    if has_dates {
        header.push("capture_date".into());
    }
    if has_labels {
        header.push("cluster_label".into());
    }
    header.extend(s.raw_columns().map(str::to_owned));
    header.extend((0..emb_dim).map(|i| format!("{EMB_PREFIX}{i}")));
    writer.write_record(&header)?;

    for (rec, fv) in table.records.iter().zip(&table.features) {
        if rec.image_id != fv.image_id {
            return Err(Error::Schema(format!(
                "record {} paired with features of {}",
                rec.image_id, fv.image_id
            )));
        }
        let emb = fv.embedding.as_deref().unwrap_or(&[]);
        if emb.len() != emb_dim {
            return Err(Error::Schema(format!(
                "embedding length of {} is {}, expected {emb_dim}",
                fv.image_id,
                emb.len()
            )));
        }
        let mut row = vec![rec.image_id.clone(), fmt_f64(rec.lat), fmt_f64(rec.lon)];
        if has_dates {
            row.push(rec.capture_date.clone().unwrap_or_default());
        }
        if has_labels {
            row.push(rec.cluster_label.map(|l| l.to_string()).unwrap_or_default());
        }
        row.extend(
            fv.segmentation
                .iter()
                .chain(&fv.objects)
                .chain(&fv.pixel)
                .chain(&fv.scene)
                .chain(emb)
                .map(|&v| fmt_f64(v)),
        );
        writer.write_record(&row)?;
    }
    Ok(())
}

/// Per-image 0-5 scores for VATA and the 19 VPIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorScores {
    pub image_id: String,
    pub vata: f64,
    /// Indexed by [`Vpi::index`].
    pub vpi: [f64; VPI_COUNT],
}

impl IndicatorScores {
    pub fn get(&self, indicator: Indicator) -> f64 {
        match indicator {
            Indicator::Vata => self.vata,
            Indicator::Vpi(v) => self.vpi[v.index()],
        }
    }

    pub fn set(&mut self, indicator: Indicator, value: f64) {
        match indicator {
            Indicator::Vata => self.vata = value,
            Indicator::Vpi(v) => self.vpi[v.index()] = value,
        }
    }

    fn check_range(&self) -> Result<()> {
        for ind in Indicator::all() {
            let v = self.get(ind);
            if !(0.0..=5.0).contains(&v) {
                return Err(Error::Range {
                    what: format!("{} score of {}", ind.name(), self.image_id),
                    value: v,
                });
            }
        }
        Ok(())
    }
}

pub fn save_scores(scores: &[IndicatorScores], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    write_scores(scores, &mut writer)?;
    writer.flush()?;
    Ok(())
}

/// Writes scores to any sink; used for both files and in-memory comparisons.
pub fn write_scores<W: Write>(scores: &[IndicatorScores], writer: &mut csv::Writer<W>) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Schema("no scores to save".into()));
    }
    let order = Vpi::alphabetical();
    let mut header = vec!["image_id".to_string(), "vata".to_string()];
    header.extend(order.iter().map(|v| v.name().to_string()));
    writer.write_record(&header)?;
    for s in scores {
        s.check_range()?;
        let mut row = vec![s.image_id.clone(), fmt_f64(s.vata)];
        row.extend(order.iter().map(|v| fmt_f64(s.vpi[v.index()])));
        writer.write_record(&row)?;
    }
    Ok(())
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<IndicatorScores>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut columns = Vec::with_capacity(header.len());
    for (i, h) in header.iter().enumerate() {
        let target = match h.as_str() {
            "image_id" => None,
            other => Some(other.parse::<Indicator>()?),
        };
        columns.push((i, target));
    }
    for ind in Indicator::all() {
        if !columns.iter().any(|(_, t)| *t == Some(ind)) {
            return Err(Error::Schema(ind.name().to_string()));
        }
    }
    if !header.iter().any(|h| h == "image_id") {
        return Err(Error::Schema("image_id".into()));
    }

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        let mut s = IndicatorScores {
            image_id: String::new(),
            vata: 0.0,
            vpi: [0.0; VPI_COUNT],
        };
        for (i, target) in &columns {
            let cell = row.get(*i).unwrap_or("");
            match target {
                None => s.image_id = cell.to_string(),
                Some(ind) => {
                    let v = cell.parse::<f64>().map_err(|e| Error::Parse {
                        row: row_idx + 1,
                        column: header[*i].clone(),
                        message: e.to_string(),
                    })?;
                    s.set(*ind, v);
                }
            }
        }
        if !seen.insert(s.image_id.clone()) {
            return Err(Error::Duplicate(s.image_id));
        }
        s.check_range()?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// One survey response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub indicator: Indicator,
    pub left_id: String,
    pub right_id: String,
    pub winner: Side,
    pub participant_id: String,
    pub timestamp: String,
}

impl PairwiseComparison {
    pub fn winner_id(&self) -> &str {
        match self.winner {
            Side::Left => &self.left_id,
            Side::Right => &self.right_id,
        }
    }

    pub fn loser_id(&self) -> &str {
        match self.winner {
            Side::Left => &self.right_id,
            Side::Right => &self.left_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.left_id == self.right_id {
            return Err(Error::InvalidPair(self.left_id.clone()));
        }
        chrono::DateTime::parse_from_rfc3339(&self.timestamp).map_err(|e| Error::Parse {
            row: 0,
            column: "timestamp".into(),
            message: e.to_string(),
        })?;
        Ok(())
    }

    /// Serialized JSON-lines form, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("comparison serializes")
    }
}

#[derive(Deserialize)]
struct RawComparison {
    indicator: String,
    left_id: String,
    right_id: String,
    winner: Side,
    participant_id: String,
    timestamp: String,
}

/// Parses one JSON line into a validated comparison; `line_no` is 1-based.
pub fn parse_comparison_line(line: &str, line_no: usize) -> Result<PairwiseComparison> {
    let raw: RawComparison = serde_json::from_str(line).map_err(|e| Error::Parse {
        row: line_no,
        column: "json".into(),
        message: e.to_string(),
    })?;
    let c = PairwiseComparison {
        indicator: raw.indicator.parse()?,
        left_id: raw.left_id,
        right_id: raw.right_id,
        winner: raw.winner,
        participant_id: raw.participant_id,
        timestamp: raw.timestamp,
    };
    c.validate().map_err(|e| match e {
        Error::Parse { column, message, .. } => Error::Parse {
            row: line_no,
            column,
            message,
        },
        other => other,
    })?;
    Ok(c)
}

/// Loads a comparison log, preserving line order. Blank lines are skipped.
pub fn load_comparisons(path: impl AsRef<Path>) -> Result<Vec<PairwiseComparison>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_comparison_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn save_comparisons(comparisons: &[PairwiseComparison], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in comparisons {
        c.validate()?;
        writeln!(w, "{}", c.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}

/// One field-survey point along a walking path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortPoint {
    pub point_id: u32,
    pub lat: f64,
    pub lon: f64,
    pub comfort: f64,
    pub heart_rate: f64,
    pub solar: f64,
    pub noise: f64,
    pub altitude: f64,
    pub image_id: Option<String>,
}

fn check_comfort_path(points: &[ComfortPoint]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        if !(1.0..=10.0).contains(&p.comfort) {
            return Err(Error::Range {
                what: format!("comfort at point {}", p.point_id),
                value: p.comfort,
            });
        }
        check_lat_lon(p.lat, p.lon)?;
        if i > 0 && p.point_id <= points[i - 1].point_id {
            return Err(Error::Schema(format!(
                "point_id {} does not increase along the path",
                p.point_id
            )));
        }
    }
    Ok(())
}

const COMFORT_HEADER: [&str; 9] = [
    "point_id",
    "lat",
    "lon",
    "comfort",
    "heart_rate",
    "solar",
    "noise",
    "altitude",
    "image_id",
];

pub fn save_comfort(points: &[ComfortPoint], path: impl AsRef<Path>) -> Result<()> {
    check_comfort_path(points)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COMFORT_HEADER)?;
    for p in points {
        w.write_record([
            p.point_id.to_string(),
            fmt_f64(p.lat),
            fmt_f64(p.lon),
            fmt_f64(p.comfort),
            fmt_f64(p.heart_rate),
            fmt_f64(p.solar),
            fmt_f64(p.noise),
            fmt_f64(p.altitude),
            p.image_id.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_comfort(path: impl AsRef<Path>) -> Result<Vec<ComfortPoint>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    for name in COMFORT_HEADER {
        if !header.iter().any(|h| h == name) {
            return Err(Error::Schema(name.to_string()));
        }
    }
    if let Some(h) = header.iter().find(|h| !COMFORT_HEADER.contains(&h.as_str())) {
        return Err(Error::Schema(format!("unknown column {h}")));
    }
    let idx = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut out = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        let num = |name: &str| -> Result<f64> {
            row.get(idx(name))
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    row: row_idx + 1,
                    column: name.into(),
                    message: e.to_string(),
                })
        };
        let point_id = row
            .get(idx("point_id"))
            .unwrap_or("")
            .parse::<u32>()
            .map_err(|e| Error::Parse {
                row: row_idx + 1,
                column: "point_id".into(),
                message: e.to_string(),
            })?;
        let image_id = row.get(idx("image_id")).unwrap_or("");
        out.push(ComfortPoint {
            point_id,
            lat: num("lat")?,
            lon: num("lon")?,
            comfort: num("comfort")?,
            heart_rate: num("heart_rate")?,
            solar: num("solar")?,
            noise: num("noise")?,
            altitude: num("altitude")?,
            image_id: (!image_id.is_empty()).then(|| image_id.to_string()),
        });
    }
    check_comfort_path(&out)?;
    Ok(out)
}

/// Writes any serializable value as pretty JSON followed by a newline.
pub fn save_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let reader = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}


#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    pub url: String,
}

/// Images shown in the survey, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub images: Vec<ManifestImage>,
}

impl ImageManifest {
    /// Manifest with URLs of the form `{url_prefix}{image_id}.jpg`.
    pub fn from_ids(ids: &[String], url_prefix: &str) -> ImageManifest {
        ImageManifest {
            images: ids
                .iter()
                .map(|id| ManifestImage {
                    image_id: id.clone(),
                    url: format!("{url_prefix}{id}.jpg"),
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.image_id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() < 2 {
            return Err(Error::InsufficientItems(self.images.len()));
        }
        let mut seen = HashSet::new();
        for i in &self.images {
            if !seen.insert(i.image_id.as_str()) {
                return Err(Error::Duplicate(i.image_id.clone()));
            }
        }
        Ok(())
    }
}
