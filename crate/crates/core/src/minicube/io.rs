use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{Minicube, Split};
use crate::binio::{create_dir, read_f32, read_json, write_f32, write_json};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "minicube/1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    id: String,
    location_id: String,
    split: Split,
    context_len: usize,
    target_len: usize,
    height: usize,
    width: usize,
    center: [f64; 2],
    time_axis: Vec<NaiveDate>,
    weather_vars: Vec<String>,
    dtype: String,
    byte_order: String,
    variables: Vec<VariableEntry>,
}

#[derive(Serialize, Deserialize)]
struct VariableEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn variables(cube: &Minicube) -> [(&'static str, &Tensor<f32>); 8] {
    [
        ("sat_red", &cube.sat_red),
        ("sat_nir", &cube.sat_nir),
        ("ndvi", &cube.ndvi),
        ("quality_mask", &cube.quality_mask),
        ("landcover_mask", &cube.landcover_mask),
        ("landcover_class", &cube.landcover_class),
        ("weather", &cube.weather),
        ("elevation", &cube.elevation),
    ]
}

/// Writes `dir/manifest.json` plus one little-endian `float32` file per variable.
pub fn save_minicube(cube: &Minicube, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut entries = Vec::new();
    for (name, t) in variables(cube) {
        let file = format!("{name}.f32");
        write_f32(&dir.join(&file), t.data())?;
        entries.push(VariableEntry { name: name.to_string(), shape: t.shape().to_vec(), file });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        id: cube.id.clone(),
        location_id: cube.location_id.clone(),
        split: cube.split,
        context_len: cube.context_len,
        target_len: cube.target_len,
        height: cube.height(),
        width: cube.width(),
        center: cube.center,
        time_axis: cube.time_axis.clone(),
        weather_vars: cube.weather_vars.clone(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        variables: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_minicube(dir: &Path) -> Result<Minicube> {
    let mpath = dir.join("manifest.json");
    let m: Manifest = read_json(&mpath)?;
    if m.format != FORMAT || m.dtype != "float32" || m.byte_order != "little" {
        return Err(Error::format(&mpath, "format", format!("unsupported {} / {} / {}", m.format, m.dtype, m.byte_order)));
    }
    let s = m.context_len + m.target_len;
    let expected = |name: &str| -> Option<Vec<usize>> {
        Some(match name {
            "sat_red" | "sat_nir" | "ndvi" | "quality_mask" => vec![s, m.height, m.width],
            "landcover_mask" | "landcover_class" | "elevation" => vec![m.height, m.width],
            "weather" => vec![super::STEP_DAYS * s, m.weather_vars.len()],
            _ => return None,
        })
    };
    let read = |name: &str| -> Result<Tensor<f32>> {
        let entry = m
            .variables
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::format(&mpath, name, "variable missing from manifest"))?;
        let shape = expected(name).expect("known variable");
        if entry.shape != shape {
            return Err(Error::format(&mpath, name, format!("shape {:?} inconsistent with dims {:?}", entry.shape, shape)));
        }
        let n = shape.iter().product();
        Ok(Tensor::new(shape, read_f32(&dir.join(&entry.file), name, n)?))
    };
    let cube = Minicube {
        sat_red: read("sat_red")?,
        sat_nir: read("sat_nir")?,
        ndvi: read("ndvi")?,
        quality_mask: read("quality_mask")?,
        landcover_mask: read("landcover_mask")?,
        landcover_class: read("landcover_class")?,
        weather: read("weather")?,
        elevation: read("elevation")?,
        id: m.id,
        location_id: m.location_id,
        split: m.split,
        context_len: m.context_len,
        target_len: m.target_len,
        time_axis: m.time_axis,
        center: m.center,
        weather_vars: m.weather_vars,
    };
    cube.validate().map_err(|e| Error::format(&mpath, "cube", e.to_string()))?;
    Ok(cube)
}
