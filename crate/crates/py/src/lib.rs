//! Python bindings. Images cross the boundary as nested lists indexed
//! `[y][x][channel]`, masks as `[y][x]` booleans and boxes as
//! `(x_min, y_min, x_max, y_max)`.

use camo_core::attack::{self, Detection};
use camo_core::evalkit::{self, EvalRecord};
use camo_core::renderer::RendererConfig;
use camo_core::scenedata;
use camo_core::texgen::{self, AdvFeature, Matrix, Tau};
use camo_core::uvtools;
use camo_core::{BBox, CameraPose, Mask, Raster, Renderer, TextureImage, ToyRenderer, WeatherParams};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

type Image = Vec<Vec<Vec<f64>>>;
type Box4 = (f64, f64, f64, f64);
/// `(box, objectness, class confidences)`.
type PyDetection = (Box4, f64, Vec<f64>);

fn to_py(err: camo_core::Error) -> PyErr {
    match err {
        camo_core::Error::Io { .. } => PyOSError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn raster(image: &Image) -> PyResult<Raster> {
    let h = image.len();
    let w = image.first().map_or(0, Vec::len);
    let c = image.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(w * h * c);
    for row in image {
        if row.len() != w {
            return Err(PyValueError::new_err("image rows differ in length"));
        }
        for px in row {
            if px.len() != c {
                return Err(PyValueError::new_err("image pixels differ in channel count"));
            }
            data.extend_from_slice(px);
        }
    }
    Raster::from_vec(w, h, c, data).map_err(to_py)
}

fn image(r: &Raster) -> Image {
    (0..r.height())
        .map(|y| (0..r.width()).map(|x| (0..r.channels()).map(|c| r.get(x, y, c)).collect()).collect())
        .collect()
}

fn mask(m: &[Vec<bool>]) -> PyResult<Mask> {
    let h = m.len();
    let w = m.first().map_or(0, Vec::len);
    if m.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    Mask::from_bools(w, h, &m.concat()).map_err(to_py)
}

fn mask_rows(m: &Mask) -> Vec<Vec<bool>> {
    (0..m.height()).map(|y| (0..m.width()).map(|x| m.get(x, y)).collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("matrix rows differ in length"));
    }
    Matrix::from_vec(rows.len(), cols, rows.concat()).map_err(to_py)
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn tau(value: Option<f64>) -> PyResult<Tau> {
    value.map_or(Ok(Tau::Unbounded), |t| Tau::new(t).map_err(to_py))
}

fn bbox(b: Box4) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

fn detections(dets: Vec<PyDetection>) -> Vec<Detection> {
    dets.into_iter().map(|(b, o, c)| Detection::new(bbox(b), o, c)).collect()
}

/// Projects adversarial tokens onto the `[-tau, tau]` box. `tau=None` is unbounded.
#[pyfunction]
#[pyo3(signature = (tokens, tau=None))]
fn clip_feature(tokens: Vec<Vec<f64>>, tau: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let f = AdvFeature {
        tokens: matrix(&tokens)?,
        tau: self::tau(tau)?,
    };
    Ok(matrix_rows(&texgen::clip_feature(&f).tokens))
}

/// One projected descent step `clip(tokens - eta * grad)`.
#[pyfunction]
#[pyo3(signature = (tokens, grad, eta, tau=None))]
fn pgd_step(tokens: Vec<Vec<f64>>, grad: Vec<Vec<f64>>, eta: f64, tau: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let f = AdvFeature {
        tokens: matrix(&tokens)?,
        tau: self::tau(tau)?,
    };
    let next = attack::pgd_step(&f, &matrix(&grad)?, eta).map_err(to_py)?;
    Ok(matrix_rows(&next.tokens))
}

#[pyfunction]
fn adversarial_loss(ds_max: f64) -> f64 {
    attack::adversarial_loss(ds_max)
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> f64 {
    evalkit::iou(&bbox(a), &bbox(b))
}

/// Highest `IoU * objectness * class confidence` over the detections.
#[pyfunction]
#[pyo3(signature = (detections, gt_box, target_class=0))]
fn detection_score(detections: Vec<PyDetection>, gt_box: Box4, target_class: usize) -> f64 {
    attack::detection_score(&self::detections(detections), &bbox(gt_box), target_class)
}

/// AP over `(gt_box, detections)` records, one target per record.
#[pyfunction]
#[pyo3(signature = (records, iou_threshold=0.5, target_class=0))]
fn average_precision(records: Vec<(Box4, Vec<PyDetection>)>, iou_threshold: f64, target_class: usize) -> PyResult<f64> {
    let pose = CameraPose::new(0.0, 0.0, 1.0).map_err(to_py)?;
    let weather = WeatherParams::new(0.0, 45.0).map_err(to_py)?;
    let records: Vec<EvalRecord> = records
        .into_iter()
        .enumerate()
        .map(|(i, (gt, dets))| EvalRecord {
            id: i.to_string(),
            pose,
            weather,
            gt_box: bbox(gt),
            detections: detections(dets),
        })
        .collect();
    evalkit::average_precision(&records, iou_threshold, target_class).map_err(to_py)
}

#[pyfunction]
fn compose_background(image: Image, mask: Vec<Vec<bool>>) -> PyResult<Image> {
    let out = scenedata::compose_background(&raster(&image)?, &self::mask(&mask)?).map_err(to_py)?;
    Ok(self::image(&out))
}

#[pyfunction]
fn extract_foreground(image: Image, mask: Vec<Vec<bool>>) -> PyResult<Image> {
    let out = scenedata::extract_foreground(&raster(&image)?, &self::mask(&mask)?).map_err(to_py)?;
    Ok(self::image(&out))
}

#[pyfunction]
fn composite_output(rendered: Image, background: Image, mask: Vec<Vec<bool>>) -> PyResult<Image> {
    let out = scenedata::composite_output(&raster(&rendered)?, &raster(&background)?, &self::mask(&mask)?)
        .map_err(to_py)?;
    Ok(image(&out))
}

/// A triangle mesh with per-corner UVs.
#[pyclass(name = "Mesh", from_py_object)]
#[derive(Clone)]
struct PyMesh {
    inner: camo_core::Mesh,
}

#[pymethods]
impl PyMesh {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: camo_core::Mesh::from_obj_file(path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: camo_core::mesh::parse_obj(text, "<string>").map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn vehicle() -> Self {
        Self {
            inner: camo_core::fixtures::vehicle_mesh(),
        }
    }

    fn to_obj(&self) -> String {
        self.inner.to_obj()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.write_obj_file(path).map_err(to_py)
    }

    #[getter]
    fn num_faces(&self) -> usize {
        self.inner.faces.len()
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.vertices.len()
    }

    fn island_count(&self) -> usize {
        uvtools::extract_islands(&self.inner).len()
    }

    fn adjacency_score(&self) -> f64 {
        uvtools::adjacency_score(&self.inner)
    }

    fn reorder_uv(&self) -> PyResult<Self> {
        Ok(Self {
            inner: uvtools::reorder_uv(&self.inner).map_err(to_py)?,
        })
    }

    /// `(out_of_range uv indices, overlapping face pairs, degenerate faces)`.
    fn validate_uv(&self) -> (Vec<usize>, Vec<(usize, usize)>, Vec<usize>) {
        let r = uvtools::validate_uv(&self.inner);
        (r.out_of_range, r.overlaps, r.degenerate)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Mesh({} vertices, {} faces)", self.inner.vertices.len(), self.inner.faces.len())
    }
}

/// Renders a textured mesh with the default 32x32 toy camera.
/// Returns `(foreground, coverage_mask)`.
#[pyfunction]
fn render(mesh: &PyMesh, texture: Image, elevation: f64, azimuth: f64, distance: f64) -> PyResult<(Image, Vec<Vec<bool>>)> {
    let texture = TextureImage::new(raster(&texture)?).map_err(to_py)?;
    let pose = CameraPose::new(elevation, azimuth, distance).map_err(to_py)?;
    let out = ToyRenderer::new(RendererConfig::default())
        .render(&mesh.inner, &texture, &pose)
        .map_err(to_py)?;
    Ok((image(&out.foreground), mask_rows(&out.coverage_mask)))
}

/// Loads a scene directory as a list of dicts with image, mask, pose and box.
#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, dir: &str) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
    let ds = scenedata::load_dataset(dir).map_err(to_py)?;
    ds.samples
        .iter()
        .map(|s| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("id", &s.id)?;
            d.set_item("image", image(&s.image))?;
            d.set_item("mask", mask_rows(&s.mask))?;
            d.set_item("pose", (s.pose.elevation, s.pose.azimuth, s.pose.distance))?;
            d.set_item("weather", (s.weather.fog_density, s.weather.sun_altitude))?;
            let [x0, y0, x1, y1] = s.gt_box.as_array();
            d.set_item("gt_box", (x0, y0, x1, y1))?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn camo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_function(wrap_pyfunction!(clip_feature, m)?)?;
    m.add_function(wrap_pyfunction!(pgd_step, m)?)?;
    m.add_function(wrap_pyfunction!(adversarial_loss, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(detection_score, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(compose_background, m)?)?;
    m.add_function(wrap_pyfunction!(extract_foreground, m)?)?;
    m.add_function(wrap_pyfunction!(composite_output, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    Ok(())
}
