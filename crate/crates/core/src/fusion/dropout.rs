use rand::Rng;

use super::{Modality, NUM_MODALITIES};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Independently drops each modality with probability `p`; if every
/// modality is dropped, RGB is kept.
pub fn dropout_keep_mask<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<[bool; NUM_MODALITIES]> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid("modality_dropout", format!("rate {p} outside [0, 1]")));
    }
    let mut keep = [true; NUM_MODALITIES];
    for k in &mut keep {
        *k = rng.random::<f64>() >= p;
    }
    if keep.iter().all(|&k| !k) {
        keep[Modality::Rgb.index()] = true;
    }
    Ok(keep)
}

/// Zeroes dropped modality images in place and returns the keep mask.
pub fn modality_dropout<R: Rng + ?Sized>(
    images: &mut [Tensor; NUM_MODALITIES],
    p: f64,
    rng: &mut R,
) -> Result<[bool; NUM_MODALITIES]> {
    let keep = dropout_keep_mask(p, rng)?;
    for (img, &k) in images.iter_mut().zip(&keep) {
        if !k {
            img.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(keep)
}
