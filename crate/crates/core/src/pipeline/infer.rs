use std::path::{Path, PathBuf};

use candle_core::Device;
use ndarray::Array2;
use serde::Serialize;

use super::checkpoint::load_checkpoint;
use crate::crnet::CrNet;
use crate::data::{list_raster_ids, load_image, save_gray, Image};
use crate::objectives::predictions_host;
use crate::resample::{resize_hwc, resize_plane};
use crate::views::batch_images;
use crate::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InferReport {
    pub written: usize,
    /// Inputs that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Main-output probability map of one image at its own resolution: the
/// image is resized to `size × size`, predicted in evaluation mode and the
/// map resized back bilinearly.
pub fn predict_image(net: &CrNet, image: &Image, size: usize) -> Result<Array2<f32>> {
    let (h, w) = image.dims();
    let resized = Image::from_trusted(resize_hwc(image.pixels().view(), size, size));
    let x = batch_images(&[&resized], net.store().device())?.to_dtype(net.store().dtype())?;
    let out = net.forward(&x, false)?;
    let map = predictions_host(out.main())?.remove(0).mapv(|v| v as f32);
    Ok(if (h, w) == (size, size) { map } else { resize_plane(map.view(), h, w) })
}

/// Writes an 8-bit prediction map `<out_dir>/<id>.png` for every raster in
/// `image_dir`. Unreadable inputs are skipped with a warning.
pub fn infer(checkpoint: &Path, image_dir: &Path, out_dir: &Path, device: &Device) -> Result<InferReport> {
    let ckpt = load_checkpoint(checkpoint, device)?;
    let net = ckpt.restore_net(ckpt.config.precision.dtype(), device)?;
    let size = ckpt.net_config.input_size;
    let mut report = InferReport::default();
    for id in list_raster_ids(image_dir)? {
        let path = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| image_dir.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
            .unwrap_or_else(|| image_dir.join(format!("{id}.png")));
        let image = match load_image(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push((path, e.to_string()));
                continue;
            }
        };
        let map = predict_image(&net, &image, size)?;
        save_gray(&out_dir.join(format!("{id}.png")), &map)?;
        report.written += 1;
    }
    Ok(report)
}
