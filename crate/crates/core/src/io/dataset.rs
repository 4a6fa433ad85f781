//! Bridging volumes to model inputs: each axial slice becomes one training
//! sample with two channels — the image intensity and the normalized slice
//! position. The position plane is what lets a purely 2-D model assign
//! vertebral-level labels, which are a function of where the slice sits in
//! the stack, not of how it looks.

use std::path::Path;

use super::tables::DatasetManifest;
use super::volume::{load_volume, Volume};
use super::IoError;
use crate::model::SattisUnet;
use crate::tensor::{ParamStore, Tensor};

/// Channels the slice sampler produces.
pub const INPUT_CHANNELS: usize = 2;

/// Two-channel input row for one slice: `[Y, X, 2]` flattened, channel-last
/// (intensity, then z-position constant over the plane).
pub fn slice_input(pixels: &[f32], z: usize, nz: usize) -> Vec<f32> {
    let zf = (z as f32 + 0.5) / nz as f32;
    let mut out = Vec::with_capacity(pixels.len() * INPUT_CHANNELS);
    for &p in pixels {
        out.push(p);
        out.push(zf);
    }
    out
}

/// A scalar image stack as a model input tensor `[Z, Y, X, 2]`.
pub fn image_to_input(image: &Volume) -> Result<Tensor<f32>, IoError> {
    let data = image.as_f32()?;
    let [nz, ny, nx] = image.dims;
    let mut rows = Vec::with_capacity(data.len() * INPUT_CHANNELS);
    for z in 0..nz {
        rows.extend(slice_input(&data[z * ny * nx..(z + 1) * ny * nx], z, nz));
    }
    Tensor::new(vec![nz, ny, nx, INPUT_CHANNELS], rows)
        .map_err(|e| IoError::Format(e.to_string()))
}

/// All subjects of a manifest stacked into one training set:
/// images `[N, Y, X, 2]` with flat labels `[N * Y * X]`, slices in manifest
/// order then stack order.
pub fn load_training_set(
    manifest: &DatasetManifest,
    root: &Path,
) -> Result<(Tensor<f32>, Vec<u8>), IoError> {
    let mut images: Vec<f32> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut dims: Option<[usize; 3]> = None;
    for subject in &manifest.subjects {
        let image = load_volume(&root.join(&subject.image))?;
        let label = load_volume(&root.join(&subject.labels))?;
        if image.dims != label.dims {
            return Err(IoError::Format(format!(
                "subject {:?}: image dims {:?} != label dims {:?}",
                subject.id, image.dims, label.dims
            )));
        }
        match dims {
            None => dims = Some(image.dims),
            Some(d) if d[1..] == image.dims[1..] => {}
            Some(d) => {
                return Err(IoError::Format(format!(
                    "subject {:?}: slice shape {:?} != cohort shape {:?}",
                    subject.id,
                    &image.dims[1..],
                    &d[1..]
                )))
            }
        }
        images.extend(image_to_input(&image)?.data());
        labels.extend(label.as_u8()?);
    }
    let dims = dims.ok_or_else(|| IoError::Format("manifest lists no subjects".into()))?;
    let n = labels.len() / (dims[1] * dims[2]);
    let tensor = Tensor::new(vec![n, dims[1], dims[2], INPUT_CHANNELS], images)
        .map_err(|e| IoError::Format(e.to_string()))?;
    Ok((tensor, labels))
}

/// Segment a whole image volume, `batch` slices per forward pass (inference
/// has no cross-slice state, so batching only bounds peak graph memory).
pub fn segment_volume(
    model: &SattisUnet,
    store: &ParamStore<f32>,
    image: &Volume,
    batch: usize,
) -> Result<Volume, crate::Error> {
    if batch == 0 {
        return Err(crate::Error::Validation("segment batch must be positive".into()));
    }
    let input = image_to_input(image)?;
    let [nz, ny, nx] = image.dims;
    let row = ny * nx * INPUT_CHANNELS;
    let mut labels = Vec::with_capacity(nz * ny * nx);
    let mut z = 0;
    while z < nz {
        let chunk = batch.min(nz - z);
        let sub = Tensor::new(
            vec![chunk, ny, nx, INPUT_CHANNELS],
            input.data()[z * row..(z + chunk) * row].to_vec(),
        )
        .map_err(|e| IoError::Format(e.to_string()))?;
        labels.extend(model.predict(store, &sub)?);
        z += chunk;
    }
    Ok(Volume::labels(image.dims, image.spacing, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{synthesize_cohort, CohortPlan, SynthConfig};
    use crate::io::tables::load_manifest;

    #[test]
    fn slice_input_interleaves_position() {
        let row = slice_input(&[0.5, 0.25], 1, 4);
        assert_eq!(row, vec![0.5, 0.375, 0.25, 0.375]);
    }

    #[test]
    fn training_set_stacks_all_subject_slices() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            dims: [7, 64, 64],
            with_dwi: false,
            ..SynthConfig::default()
        };
        let plan = CohortPlan {
            females: 1,
            males: 1,
            machines: 1,
        };
        let path = synthesize_cohort(&cfg, &plan, 3, dir.path()).unwrap();
        let (manifest, root) = load_manifest(&path).unwrap();
        let (images, labels) = load_training_set(&manifest, &root).unwrap();
        assert_eq!(images.shape(), &[14, 64, 64, 2]);
        assert_eq!(labels.len(), 14 * 64 * 64);
        // position channel is constant per slice and increases with z
        let row = 64 * 64 * 2;
        assert_eq!(images.data()[1], 0.5 / 7.0);
        assert!((images.data()[6 * row + 1] - 6.5 / 7.0).abs() < 1e-6);
    }
}
