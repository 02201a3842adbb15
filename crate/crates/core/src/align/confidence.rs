//! Position-based reliability of instance masks.

use crate::error::{Error, Result};

/// Half-open pixel rectangle `[u0, u1) x [v0, v1)` of the image center once
/// a `margin` fraction is removed from each side.
pub fn central_region(width: usize, height: usize, margin: f64) -> (usize, usize, usize, usize) {
    let mw = (margin * width as f64).round() as usize;
    let mh = (margin * height as f64).round() as usize;
    (mw, width.saturating_sub(mw), mh, height.saturating_sub(mh))
}

/// Per-frame confidence of one mask given as `(u, v)` pixel coordinates:
/// 0 when absent, 1 when every pixel lies inside the central region, else
/// the mask's share of the image area.
pub fn frame_confidence(pixels: &[(usize, usize)], width: usize, height: usize, margin: f64) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let (u0, u1, v0, v1) = central_region(width, height, margin);
    let inside = pixels.iter().all(|&(u, v)| u >= u0 && u < u1 && v >= v0 && v < v1);
    if inside {
        1.0
    } else {
        pixels.len() as f64 / (width * height) as f64
    }
}

/// Mean over all frames, absent frames included as zeros.
pub fn instance_confidence(per_frame: &[f64]) -> Result<f64> {
    if per_frame.is_empty() {
        return Err(Error::Precondition("instance confidence over zero frames".into()));
    }
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_is_zero() {
        assert_eq!(frame_confidence(&[], 100, 100, 0.1), 0.0);
    }

    #[test]
    fn border_touching_is_area_ratio() {
        // 1000 px: a 10-column strip along the left edge
        let px: Vec<(usize, usize)> = (0..10).flat_map(|u| (0..100).map(move |v| (u, v))).collect();
        assert_eq!(px.len(), 1000);
        assert_eq!(frame_confidence(&px, 100, 100, 0.1), 0.1);
    }

    #[test]
    fn central_is_one() {
        let px: Vec<(usize, usize)> = (40..60).flat_map(|u| (40..60).map(move |v| (u, v))).collect();
        assert_eq!(frame_confidence(&px, 100, 100, 0.1), 1.0);
        // exactly on the central boundary
        assert_eq!(frame_confidence(&[(10, 10), (89, 89)], 100, 100, 0.1), 1.0);
        assert_eq!(frame_confidence(&[(9, 10)], 100, 100, 0.1), 1.0 / 10_000.0);
    }

    #[test]
    fn means() {
        assert_eq!(instance_confidence(&[1.0, 0.5, 0.0]).unwrap(), 0.5);
        assert_eq!(instance_confidence(&[1.0; 7]).unwrap(), 1.0);
        assert_eq!(instance_confidence(&[0.0, 0.0, 0.0, 1.0]).unwrap(), 0.25);
        assert!(instance_confidence(&[]).is_err());
    }
}
