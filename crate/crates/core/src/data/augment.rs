use ndarray::{s, Axis};

use super::{Image, ScribbleMap, MIN_SIDE};
use crate::resample::{resize_hwc, resize_nearest};
use crate::{Error, Result};

/// Resizes a pair to `size × size`: the image bilinearly, the scribble by
/// nearest neighbour so labels stay ternary.
pub fn resize_pair(image: &Image, scribble: &ScribbleMap, size: usize) -> Result<(Image, ScribbleMap)> {
    if size < MIN_SIDE {
        return Err(Error::InvalidConfig(format!(
            "resize target {size} is below the {MIN_SIDE}px minimum"
        )));
    }
    if image.dims() != scribble.dims() {
        return Err(Error::SizeMismatch {
            what: "scribble",
            expected: image.dims(),
            actual: scribble.dims(),
        });
    }
    let pixels = resize_hwc(image.pixels().view(), size, size);
    let labels = resize_nearest(scribble.labels().view(), size, size);
    Ok((Image::from_trusted(pixels), ScribbleMap { labels }))
}

/// Mirrors both rasters left to right.
pub fn hflip_pair(image: &Image, scribble: &ScribbleMap) -> (Image, ScribbleMap) {
    let pixels = image.pixels().slice(s![.., ..;-1, ..]).to_owned();
    let labels = scribble.labels().slice(s![.., ..;-1]).to_owned();
    debug_assert_eq!(pixels.len_of(Axis(1)), image.width());
    (Image::from_trusted(pixels), ScribbleMap { labels })
}
