use std::fs;

use lens_core::interchange::{
    decode_tensor, encode_tensor, load_export, metrics_csv, read_tensor, write_tensor, Precision, METRICS_HEADER,
};
use lens_core::model::LensModel;
use lens_core::trainer::StepRecord;
use lens_core::{LensError, RunConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[test]
fn file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ltns");
    let t = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    write_tensor(&path, &t, Precision::F64).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), t);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(read_tensor(&path), Err(LensError::Checksum(_))));
}

/// Writes an export the way the feature extractor does: narrow floats on
/// disk plus a JSON manifest.
fn write_export(dir: &std::path::Path, grid: usize, lt: usize, d: usize, ds: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fi = Tensor::randn(&[grid * grid, d], 1.0, &mut rng);
    let ft = Tensor::randn(&[lt, d], 1.0, &mut rng);
    let emb = Tensor::randn(&[4, 4, ds], 1.0, &mut rng);
    let mask = Tensor::zeros(&[16, 16]);
    for (name, t) in [("fi", &fi), ("ft", &ft), ("emb", &emb), ("mask", &mask)] {
        write_tensor(&dir.join(format!("{name}.ltns")), t, Precision::F32).unwrap();
    }
    let manifest = json!({
        "model": "toy-vlm",
        "layer": 14,
        "L_i": grid * grid,
        "L_t": lt,
        "d": d,
        "template": "USER: <image> {instruction} ASSISTANT:",
        "files": [
            {"role": "image_features", "path": "fi.ltns", "dims": [grid * grid, d]},
            {"role": "text_features", "path": "ft.ltns", "dims": [lt, d]},
            {"role": "sam_embedding", "path": "emb.ltns", "dims": [4, 4, ds]},
            {"role": "gt_mask", "path": "mask.ltns", "dims": [16, 16]},
        ]
    });
    fs::write(dir.join("manifest.json"), manifest.to_string()).unwrap();
    (fi, ft)
}

#[test]
fn extractor_export_feeds_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (fi, _) = write_export(dir.path(), 6, 3, 8, 8);
    let export = load_export(dir.path()).unwrap();
    assert_eq!(export.input.grid, (6, 6));
    assert_eq!(export.input.image_features.data()[5], fi.data()[5] as f32 as f64);
    assert_eq!(export.manifest.layer, 14);
    let emb = export.embedding.unwrap();
    let cfg = RunConfig {
        grid: (6, 6),
        model_dim: 8,
        prompt_dim: 8,
        head_count: 2,
        embed_grid: (4, 4),
        ..RunConfig::default()
    };
    let model = LensModel::new(cfg).unwrap();
    let out = model.infer(&export.input, &emb).unwrap();
    assert_eq!(out.mask.logits.dims(), export.mask.unwrap().dims());
    assert!(out.keypoints.len() <= 16);
}

#[test]
fn manifest_dims_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    write_export(dir.path(), 6, 3, 8, 8);
    let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    fs::write(dir.path().join("manifest.json"), text.replace("\"L_t\":3", "\"L_t\":4")).unwrap();
    assert!(matches!(load_export(dir.path()), Err(LensError::Manifest(_))));
    fs::write(dir.path().join("manifest.json"), text.replace("[3,8]", "[8,3]")).unwrap();
    assert!(matches!(load_export(dir.path()), Err(LensError::Manifest(_))));
}

#[test]
fn f32_payload_widens_exactly() {
    let t = Tensor::row_vector(vec![0.1, 1.0 / 3.0, -2.5]);
    let (back, p) = decode_tensor(&encode_tensor(&t, Precision::F32)).unwrap();
    assert_eq!(p, Precision::F32);
    assert_eq!(back.data()[2], -2.5);
    assert_eq!(back.data()[0], 0.1f32 as f64);
}

#[test]
fn metrics_csv_columns() {
    let rec = StepRecord { step: 3, loss: Default::default(), used_locals: true };
    let csv = metrics_csv(&[rec]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.next(), Some("3,0,0,0,0,0"));
}
