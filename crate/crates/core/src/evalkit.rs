//! Detection metrics and sweep reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{Detection, Pipeline};
use crate::error::{validate, Error, Result};
use crate::raster::BBox;
use crate::renderer::TextureImage;
use crate::scenedata::{CameraPose, SceneDataset, WeatherParams};

pub const DIMENSIONS: [&str; 5] = ["elevation", "azimuth", "distance", "fog", "sun"];
pub const TABLE_FILE: &str = "report.csv";
pub const TABLE_HEADER: [&str; 4] = ["dimension", "value", "ap", "count"];

/// `|a ∩ b| / |a ∪ b|`, 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub pose: CameraPose,
    pub weather: WeatherParams,
    pub gt_box: BBox,
    pub detections: Vec<Detection>,
}

impl EvalRecord {
    /// Value of this record along a sweep dimension.
    pub fn dimension_value(&self, dimension: &str) -> Option<f64> {
        Some(match dimension {
            "elevation" => self.pose.elevation,
            "azimuth" => self.pose.azimuth,
            "distance" => self.pose.distance,
            "fog" => self.weather.fog_density,
            "sun" => self.weather.sun_altitude,
            _ => return None,
        })
    }
}

/// All-point interpolated average precision with one ground truth per record.
///
/// Detections are ranked by `D_o · D_c[target]`; ties go to the higher IoU,
/// then to the earlier record, then to the earlier detection.
pub fn average_precision(records: &[EvalRecord], iou_threshold: f64, target_class: usize) -> Result<f64> {
    validate(!records.is_empty(), || "average precision needs at least one record".into())?;
    let mut ranked: Vec<(f64, f64, usize, usize)> = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        for (k, d) in rec.detections.iter().enumerate() {
            ranked.push((d.confidence(target_class), iou(&d.bbox, &rec.gt_box), r, k));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut matched = vec![false; records.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let npos = records.len() as f64;
    let mut points = Vec::with_capacity(ranked.len());
    for &(_, overlap, r, _) in &ranked {
        if overlap >= iou_threshold && !matched[r] {
            matched[r] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / npos, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = points.last().map_or(0.0, |p| p.0);
    for &(recall, precision) in points.iter().rev() {
        if recall < prev_recall {
            ap += (prev_recall - recall) * envelope;
            prev_recall = recall;
        }
        envelope = envelope.max(precision);
    }
    ap += prev_recall * envelope;
    Ok(ap)
}

/// Renders every sample with `texture` and runs the detector.
pub fn evaluate_camouflage(
    pipeline: &Pipeline<'_>,
    texture: &TextureImage,
    dataset: &SceneDataset,
) -> Result<Vec<EvalRecord>> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let image = pipeline.compose(s, texture)?;
            let detections = pipeline
                .detector
                .detect(&image)
                .map_err(|e| e.context(format!("sample {}", s.id)))?;
            Ok(EvalRecord {
                id: s.id.clone(),
                pose: s.pose,
                weather: s.weather,
                gt_box: s.gt_box,
                detections,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub dimension: String,
    pub value: f64,
    pub ap: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub overall: f64,
    pub count: usize,
    /// Grouped by dimension in [`DIMENSIONS`] order, ascending value within.
    pub bins: Vec<BinRow>,
}

impl SweepReport {
    pub fn dimension(&self, name: &str) -> impl Iterator<Item = &BinRow> {
        let name = name.to_string();
        self.bins.iter().filter(move |b| b.dimension == name)
    }
}

pub fn sweep_report(records: &[EvalRecord], iou_threshold: f64, target_class: usize) -> Result<SweepReport> {
    let overall = average_precision(records, iou_threshold, target_class)?;
    let mut bins = Vec::new();
    for dim in DIMENSIONS {
        let mut groups: BTreeMap<u64, (f64, Vec<EvalRecord>)> = BTreeMap::new();
        for r in records {
            let v = r.dimension_value(dim).expect("known dimension");
            groups.entry(ordered_bits(v)).or_insert_with(|| (v, Vec::new())).1.push(r.clone());
        }
        for (_, (value, group)) in groups {
            bins.push(BinRow {
                dimension: dim.to_string(),
                value,
                ap: average_precision(&group, iou_threshold, target_class)?,
                count: group.len(),
            });
        }
    }
    Ok(SweepReport {
        overall,
        count: records.len(),
        bins,
    })
}

/// Bit pattern whose unsigned order matches the float order.
fn ordered_bits(v: f64) -> u64 {
    let b = (v + 0.0).to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Plot,
}

/// Writes the table and/or one line plot per dimension into `dir`. Every
/// `#` line of `provenance` is copied to the top of the table.
pub fn emit_report(
    report: &SweepReport,
    dir: impl AsRef<Path>,
    formats: &[ReportFormat],
    provenance: &[String],
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Table) {
        let path = dir.join(TABLE_FILE);
        write_table(report, &path, provenance)?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Plot) {
        for dim in DIMENSIONS {
            let path = dir.join(format!("ap_{dim}.png"));
            let points: Vec<(f64, f64)> = report.dimension(dim).map(|b| (b.value, b.ap)).collect();
            plot_line(&points).save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
            written.push(path);
        }
    }
    Ok(written)
}

fn write_table(report: &SweepReport, path: &Path, provenance: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for line in provenance {
        buf.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(TABLE_HEADER)?;
        w.write_record(["overall", "", &report.overall.to_string(), &report.count.to_string()])?;
        for b in &report.bins {
            w.write_record([
                b.dimension.as_str(),
                &b.value.to_string(),
                &b.ap.to_string(),
                &b.count.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses a table written by [`emit_report`].
pub fn read_report_table(path: impl AsRef<Path>) -> Result<SweepReport> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = reader.headers()?.clone();
    validate(header.iter().eq(TABLE_HEADER), || {
        format!("{}: unexpected report header {:?}", path.display(), header)
    })?;
    let mut overall = None;
    let mut bins = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            message: format!("invalid {what}"),
        };
        let ap: f64 = rec[2].parse().map_err(|_| bad("ap"))?;
        let count: usize = rec[3].parse().map_err(|_| bad("count"))?;
        if &rec[0] == "overall" {
            overall = Some((ap, count));
        } else {
            bins.push(BinRow {
                dimension: rec[0].to_string(),
                value: rec[1].parse().map_err(|_| bad("value"))?,
                ap,
                count,
            });
        }
    }
    let (overall, count) = overall.ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: "missing overall row".into(),
    })?;
    Ok(SweepReport { overall, count, bins })
}

/// Side-by-side AP table for two reports over the same bins.
pub fn write_comparison(
    a: (&str, &SweepReport),
    b: (&str, &SweepReport),
    path: impl AsRef<Path>,
    provenance: &[String],
) -> Result<()> {
    let path = path.as_ref();
    validate(a.1.bins.len() == b.1.bins.len(), || "reports cover different bins".into())?;
    let mut buf = Vec::new();
    for line in provenance {
        buf.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["dimension", "value", a.0, b.0])?;
        w.write_record(["overall", "", &a.1.overall.to_string(), &b.1.overall.to_string()])?;
        for (x, y) in a.1.bins.iter().zip(&b.1.bins) {
            validate(x.dimension == y.dimension && x.value == y.value, || {
                "reports cover different bins".into()
            })?;
            w.write_record([
                x.dimension.as_str(),
                &x.value.to_string(),
                &x.ap.to_string(),
                &y.ap.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 200;
const MARGIN: u32 = 20;

/// AP (y, fixed to [0,1]) against bin value (x) with tick marks at each bin.
fn plot_line(points: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let grey = Rgb([210, 210, 210]);
    let (x0, x1) = (MARGIN, PLOT_W - MARGIN);
    let (y0, y1) = (PLOT_H - MARGIN, MARGIN);
    for k in 0..=4 {
        let y = y0 - (y0 - y1) * k / 4;
        draw_line(&mut img, (x0 as f64, y as f64), (x1 as f64, y as f64), grey);
    }
    draw_line(&mut img, (x0 as f64, y0 as f64), (x1 as f64, y0 as f64), black);
    draw_line(&mut img, (x0 as f64, y0 as f64), (x0 as f64, y1 as f64), black);
    if points.is_empty() {
        return img;
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_px = |(v, ap): (f64, f64)| {
        let t = if hi > lo { (v - lo) / span } else { 0.5 };
        (
            x0 as f64 + t * (x1 - x0) as f64,
            y0 as f64 - ap.clamp(0.0, 1.0) * (y0 - y1) as f64,
        )
    };
    let blue = Rgb([30, 90, 200]);
    for w in points.windows(2) {
        draw_line(&mut img, to_px(w[0]), to_px(w[1]), blue);
    }
    for &p in points {
        let (px, py) = to_px(p);
        draw_line(&mut img, (px, y0 as f64), (px, y0 as f64 + 4.0), black);
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(&mut img, px as i64 + dx, py as i64 + dy, blue);
            }
        }
    }
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        put(img, x.round() as i64, y.round() as i64, c);
    }
}
