//! Image folders with an attributes CSV (`image,<concept>,...`).

use std::fs;
use std::path::Path;

use crate::data::images::{read_image, write_pnm, ImageGeometry};
use crate::data::{Dataset, DatasetRecord};
use crate::error::{Error, Result};

pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const IMAGES_DIR: &str = "images";

pub fn image_name(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// Writes `dir/images/NNNNNN.ppm` and `dir/attributes.csv` with values ±1.
pub fn write_folder(dir: &Path, dataset: &Dataset) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let csv_path = dir.join(ATTRIBUTES_FILE);
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header = vec!["image".to_string()];
    header.extend(dataset.concepts.iter().cloned());
    w.write_record(&header)?;
    for (i, r) in dataset.records.iter().enumerate() {
        let name = image_name(i);
        write_pnm(&images.join(&name), &r.image)?;
        let mut row = vec![name];
        row.extend(r.attributes.iter().map(|&a| if a { "1" } else { "-1" }.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

/// Attribute column names of a CSV whose first column is `image`.
pub fn attribute_columns(attributes_csv: &Path) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(attributes_csv)?;
    let headers = reader.headers()?;
    if headers.get(0).map(str::trim) != Some("image") {
        return Err(Error::Ingestion(format!(
            "{} must start with an `image` column",
            attributes_csv.display()
        )));
    }
    Ok(headers.iter().skip(1).map(|h| h.trim().to_string()).collect())
}

fn parse_flag(value: &str, column: &str, row: usize) -> Result<bool> {
    match value.trim() {
        "1" => Ok(true),
        "-1" | "0" => Ok(false),
        other => Err(Error::Ingestion(format!(
            "row {row}, column {column}: expected 1, 0 or -1, got {other:?}"
        ))),
    }
}

/// Loads the selected concept columns of `attributes_csv` and the images it
/// names from `image_dir`. Images that fail to decode are skipped, logged
/// and counted in [`Dataset::skipped`].
pub fn load_folder(
    image_dir: &Path,
    attributes_csv: &Path,
    selected: &[String],
    geometry: ImageGeometry,
) -> Result<Dataset> {
    if selected.is_empty() {
        return Err(Error::Ingestion("no concepts selected".into()));
    }
    geometry.validate()?;
    let mut reader = csv::Reader::from_path(attributes_csv)?;
    let headers = reader.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("image") {
        return Err(Error::Ingestion(format!(
            "{} must start with an `image` column",
            attributes_csv.display()
        )));
    }
    let columns: Vec<usize> = selected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Ingestion(format!("attribute column {name} not found")))
        })
        .collect::<Result<_>>()?;
    let mut dataset = Dataset {
        concepts: selected.to_vec(),
        records: Vec::new(),
        skipped: 0,
    };
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let attributes = columns
            .iter()
            .zip(selected)
            .map(|(&c, name)| parse_flag(rec.get(c).unwrap_or(""), name, row + 2))
            .collect::<Result<Vec<_>>>()?;
        let file = rec.get(0).unwrap_or("").trim();
        match read_image(&image_dir.join(file), geometry) {
            Ok(image) => dataset.records.push(DatasetRecord { image, attributes }),
            Err(e) => {
                log::warn!("skipping {file}: {e}");
                dataset.skipped += 1;
            }
        }
    }
    Ok(dataset)
}
