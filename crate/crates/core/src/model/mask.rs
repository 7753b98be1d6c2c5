use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Key visibility for a sequence whose speech positions are flagged in
/// `eligible`: exactly `round(ratio · n_speech)` of them, drawn uniformly
/// without replacement, become invisible. Other positions stay visible.
/// The draw is a shuffle whose prefix is masked, so one RNG state yields
/// nested masks across ratios.
pub fn mask_speech<R: Rng + ?Sized>(eligible: &[bool], ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let mut speech: Vec<usize> = (0..eligible.len()).filter(|&i| eligible[i]).collect();
    let n_mask = (ratio * speech.len() as f64).round() as usize;
    speech.shuffle(rng);
    let mut visible = vec![true; eligible.len()];
    for &i in &speech[..n_mask] {
        visible[i] = false;
    }
    Ok(visible)
}

/// Replacement mask with exactly `round(ratio · len)` positions set.
pub fn infill_mask<R: Rng + ?Sized>(len: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    let mask = mask_speech(&vec![true; len], ratio, rng)?;
    Ok(mask.into_iter().map(|v| !v).collect())
}
