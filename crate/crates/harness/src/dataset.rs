//! Dataset sources: synthetic generation, CSV tables and tensor files.

use std::path::Path;

use shadowalign_core::data::{gen_synthetic, LabeledDataset};
use shadowalign_core::{Stream, Tensor};

use crate::checkpoint::{Blob, Container};
use crate::config::DataSource;
use crate::error::{HarnessError, Result, StageExt};

/// Stream index reserved for synthetic data generation.
const DATA_STREAM: u64 = 0xDA7A;

pub fn load(source: &DataSource, seed: u64) -> Result<LabeledDataset<f32>> {
    match source {
        DataSource::Synthetic(spec) => gen_synthetic(spec, &mut Stream::derive(seed, DATA_STREAM)).stage("gen-data"),
        DataSource::Csv(p) => read_csv(p),
        DataSource::Tensor(p) => read_tensor_file(p),
    }
}

/// Numeric CSV, one record per row, label (0-based class) in the last
/// column. A header row is allowed. Ids are 0-based row numbers.
pub fn read_csv(path: &Path) -> Result<LabeledDataset<f32>> {
    let bad = |m: String| HarnessError::Config(format!("{}: {m}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let values: std::result::Result<Vec<f64>, _> = row.iter().map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(bad(format!("row {} is not numeric", i + 1))),
        };
        let (label, x) = values.split_last().ok_or_else(|| bad(format!("row {} is empty", i + 1)))?;
        if *label < 0.0 || label.fract() != 0.0 {
            return Err(bad(format!("row {}: label {label} is not a class index", i + 1)));
        }
        records.push(Tensor::from_vec(x.iter().map(|&v| v as f32).collect()));
        labels.push(*label as usize);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let ids = (0..records.len() as u64).collect();
    LabeledDataset::new(records, labels, ids, classes).map_err(|e| bad(e.to_string()))
}

pub fn write_csv(data: &LabeledDataset<f32>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Io {
        path: path.into(),
        source: e.into(),
    })?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.record(i).data().iter().map(|v| v.to_string()).collect();
        row.push(data.label(i).to_string());
        w.write_record(&row).map_err(|e| HarnessError::Io {
            path: path.into(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn dataset_container(data: &LabeledDataset<f32>) -> Container {
    let shape = data.record_shape().unwrap_or(&[]).to_vec();
    let mut all = Vec::with_capacity(data.len() * shape.iter().product::<usize>());
    for r in data.records() {
        all.extend_from_slice(r.data());
    }
    let mut full = vec![data.len()];
    full.extend(&shape);
    let mut c = Container::default();
    c.blobs.push(Blob::from_tensor("records", &Tensor::new(full, all).expect("consistent shapes")));
    c.blobs.push(Blob::from_u64("labels", &data.labels().iter().map(|&l| l as u64).collect::<Vec<_>>()));
    c.blobs.push(Blob::from_u64("ids", data.ids()));
    c.metadata.insert("num_classes".into(), data.num_classes().to_string());
    c
}

pub fn write_tensor_file(data: &LabeledDataset<f32>, path: &Path) -> Result<()> {
    dataset_container(data).write(path)
}

pub fn read_tensor_file(path: &Path) -> Result<LabeledDataset<f32>> {
    let c = Container::read(path)?;
    let bad = |reason: String| HarnessError::Checkpoint {
        path: path.into(),
        reason,
    };
    let get = |n: &str| c.blob(n).ok_or_else(|| bad(format!("missing tensor {n}")));
    let all = get("records")?.to_tensor::<f32>().map_err(bad)?;
    let labels = get("labels")?.to_u64().map_err(bad)?;
    let ids = get("ids")?.to_u64().map_err(bad)?;
    let classes: usize = c
        .metadata
        .get("num_classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing num_classes".into()))?;
    let (&n, shape) = all.shape().split_first().ok_or_else(|| bad("records tensor has rank 0".into()))?;
    let per: usize = shape.iter().product();
    let records = (0..n)
        .map(|i| Tensor::new(shape.to_vec(), all.data()[i * per..(i + 1) * per].to_vec()).expect("slice of consistent size"))
        .collect();
    LabeledDataset::new(records, labels.into_iter().map(|l| l as usize).collect(), ids, classes).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use shadowalign_core::data::{SyntheticKind, SyntheticSpec};

    fn data() -> LabeledDataset<f32> {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Images { side: 4 },
            classes: 3,
            per_class: 5,
            separation: 2.0,
            label_noise: 0.0,
        };
        load(&DataSource::Synthetic(spec), 1).unwrap()
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let d = data();
        write_tensor_file(&d, &p).unwrap();
        let back = read_tensor_file(&p).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,b,label\n1.5,2,1\n-3,0.25,0\n").unwrap();
        let d = read_csv(&p).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.record(0).data(), &[1.5, 2.0]);
        let q = dir.path().join("e.csv");
        write_csv(&d, &q).unwrap();
        assert_eq!(read_csv(&q).unwrap(), d);
        std::fs::write(&p, "1,2,0.5\n").unwrap();
        assert!(read_csv(&p).is_err());
    }
}
