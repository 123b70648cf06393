// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task scoring: box IoU, localization success, list classification and
//! the false positive rate on object-removed controls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vocab;

/// IoU thresholds averaged into the localization score.
pub const IOU_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

/// Inclusive cell box; a single cell has area 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub const fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self, grid_size: usize) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max && self.x_max < grid_size && self.y_max < grid_size
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Grows the box by `by` cells on every side, clipped to the grid.
    pub fn dilated(&self, by: usize, grid_size: usize) -> Self {
        Self {
            x_min: self.x_min.saturating_sub(by),
            y_min: self.y_min.saturating_sub(by),
            x_max: (self.x_max + by).min(grid_size - 1),
            y_max: (self.y_max + by).min(grid_size - 1),
        }
    }

    /// True when growing by `by` cells stays inside the grid.
    pub fn fits_dilation(&self, by: usize, grid_size: usize) -> bool {
        self.x_min >= by && self.y_min >= by && self.x_max + by < grid_size && self.y_max + by < grid_size
    }
}

/// Intersection over union of inclusive cell areas.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) + 1).saturating_sub(a.x_min.max(b.x_min));
    let iy = (a.y_max.min(b.y_max) + 1).saturating_sub(a.y_min.max(b.y_min));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Mean over [`IOU_THRESHOLDS`] of the fraction of predictions whose IoU
/// exceeds the threshold. `None` predictions (parse failures) are misses.
pub fn localization_score(predictions: &[Option<BoundingBox>], ground_truths: &[BoundingBox]) -> Result<f64> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let ious: Vec<f64> = predictions
        .iter()
        .zip(ground_truths)
        .map(|(p, g)| p.map_or(0.0, |p| iou(&p, g)))
        .collect();
    Ok(score_from_ious(&ious, &vec![true; ious.len()]))
}

/// Localization score from precomputed IoUs; `parsed[i] == false` is a miss.
pub fn score_from_ious(ious: &[f64], parsed: &[bool]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    let n = ious.len() as f64;
    IOU_THRESHOLDS
        .iter()
        .map(|&t| {
            ious.iter()
                .zip(parsed)
                .filter(|(&v, &ok)| ok && v > t)
                .count() as f64
                / n
        })
        .sum::<f64>()
        / IOU_THRESHOLDS.len() as f64
}

/// Fraction of responses containing their ground-truth class token.
pub fn classification_score(responses: &[Vec<usize>], ground_truth_tokens: &[usize]) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let hits = responses
        .iter()
        .zip(ground_truth_tokens)
        .filter(|(r, t)| r.contains(t))
        .count();
    hits as f64 / responses.len() as f64
}

/// Fraction of control responses answering "yes".
pub fn false_positive_rate(said_yes: &[bool]) -> f64 {
    if said_yes.is_empty() {
        return 0.0;
    }
    said_yes.iter().filter(|&&y| y).count() as f64 / said_yes.len() as f64
}

/// Why a generated answer could not be read as a box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseFailure {
    Truncated { len: usize },
    UnexpectedToken { position: usize, token: usize },
    InvalidBox { coords: [usize; 4] },
}

/// Reads the canonical `[a, b, c, d]` answer, optionally followed by end-of-sequence.
pub fn parse_box_answer(tokens: &[usize], vocab: &Vocab) -> std::result::Result<BoundingBox, ParseFailure> {
    let expect_at = |pos: usize, want: usize| -> std::result::Result<(), ParseFailure> {
        match tokens.get(pos) {
            None => Err(ParseFailure::Truncated { len: tokens.len() }),
            Some(&t) if t == want => Ok(()),
            Some(&t) => Err(ParseFailure::UnexpectedToken { position: pos, token: t }),
        }
    };
    expect_at(0, vocab.lbracket())?;
    let mut coords = [0usize; 4];
    for (k, c) in coords.iter_mut().enumerate() {
        let pos = 1 + 2 * k;
        let t = *tokens
            .get(pos)
            .ok_or(ParseFailure::Truncated { len: tokens.len() })?;
        *c = vocab
            .coord_value(t)
            .ok_or(ParseFailure::UnexpectedToken { position: pos, token: t })?;
        let sep = if k < 3 { vocab.comma() } else { vocab.rbracket() };
        expect_at(pos + 1, sep)?;
    }
    if let Some(&t) = tokens.get(9) {
        if t != vocab.eos() || tokens.len() > 10 {
            return Err(ParseFailure::UnexpectedToken { position: 9, token: t });
        }
    }
    let b = BoundingBox::new(coords[0], coords[1], coords[2], coords[3]);
    if !b.is_valid(vocab.grid_size()) {
        return Err(ParseFailure::InvalidBox { coords });
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cell-enumeration oracle for IoU.
    fn iou_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let inside = |bx: &BoundingBox, x: usize, y: usize| x >= bx.x_min && x <= bx.x_max && y >= bx.y_min && y <= bx.y_max;
        let (mut i, mut u) = (0, 0);
        for y in 0..8 {
            for x in 0..8 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                i += (ia && ib) as usize;
                u += (ia || ib) as usize;
            }
        }
        i as f64 / u as f64
    }

    fn all_boxes() -> Vec<BoundingBox> {
        let mut v = Vec::new();
        for x0 in 0..8 {
            for x1 in x0..8 {
                for y0 in 0..8 {
                    for y1 in y0..8 {
                        v.push(BoundingBox::new(x0, y0, x1, y1));
                    }
                }
            }
        }
        v
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0, 0, 1, 1);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(5, 5, 6, 6)), 0.0);
        let b = BoundingBox::new(1, 1, 2, 2);
        assert_eq!(iou(&a, &b), 1.0 / 7.0);
        assert_eq!(iou_oracle(&a, &b), 1.0 / 7.0);
    }

    #[test]
    fn iou_symmetric_and_matches_oracle_exhaustively() {
        let boxes = all_boxes();
        assert_eq!(boxes.len(), 36 * 36);
        for (i, a) in boxes.iter().enumerate() {
            for b in boxes.iter().skip(i) {
                let v = iou(a, b);
                assert_eq!(v, iou(b, a));
                if (a.x_min + b.y_max) % 7 == 0 {
                    assert_eq!(v, iou_oracle(a, b));
                }
            }
        }
    }

    #[test]
    fn localization_threshold_counts() {
        // IoUs {0.95, 0.6, 0.3}: rates {2/3, 1/3, 1/3} -> 4/9
        let s = score_from_ious(&[0.95, 0.6, 0.3], &[true; 3]);
        assert!((s - 4.0 / 9.0).abs() < 1e-15);
        let gt = vec![BoundingBox::new(1, 1, 2, 2); 3];
        let preds: Vec<_> = gt.iter().copied().map(Some).collect();
        assert_eq!(localization_score(&preds, &gt).unwrap(), 1.0);
        assert_eq!(localization_score(&[None, None, None], &gt).unwrap(), 0.0);
        assert!(matches!(localization_score(&[None], &gt), Err(Error::Contract(_))));
    }

    #[test]
    fn raising_an_iou_never_lowers_the_score() {
        let base = [0.2, 0.55, 0.75, 0.95, 0.0];
        let s0 = score_from_ious(&base, &[true; 5]);
        for i in 0..base.len() {
            for bump in [0.01, 0.2, 0.5] {
                let mut v = base;
                v[i] = (v[i] + bump).min(1.0);
                assert!(score_from_ious(&v, &[true; 5]) >= s0);
            }
        }
    }

    #[test]
    fn classification_and_fpr() {
        assert_eq!(classification_score(&[vec![4, 7, 9]], &[7]), 1.0);
        assert_eq!(classification_score(&[vec![]], &[7]), 0.0);
        let everything: Vec<usize> = (0..10).collect();
        assert_eq!(classification_score(&[everything.clone(), everything], &[2, 5]), 1.0);
        assert_eq!(false_positive_rate(&[false; 10]), 0.0);
        assert_eq!(false_positive_rate(&[true; 10]), 1.0);
        let mut v = [false; 10];
        v[..3].iter_mut().for_each(|x| *x = true);
        assert!((false_positive_rate(&v) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn parse_canonical_and_failures() {
        let vocab = Vocab::new(8, 10);
        let enc = |s: &str| vocab.encode(s).unwrap();
        assert_eq!(
            parse_box_answer(&enc("[ 1 , 2 , 2 , 4 ]"), &vocab),
            Ok(BoundingBox::new(1, 2, 2, 4))
        );
        assert_eq!(
            parse_box_answer(&enc("[ 1 , 2 , 2 , 4 ] <eos>"), &vocab),
            Ok(BoundingBox::new(1, 2, 2, 4))
        );
        assert!(matches!(
            parse_box_answer(&enc("[ 2 , 2 , 1 , 4 ]"), &vocab),
            Err(ParseFailure::InvalidBox { .. })
        ));
        assert!(matches!(
            parse_box_answer(&enc("[ 1 , 2 ,"), &vocab),
            Err(ParseFailure::Truncated { .. })
        ));
        assert!(matches!(
            parse_box_answer(&enc("[ 1 , yes , 2 , 4 ]"), &vocab),
            Err(ParseFailure::UnexpectedToken { position: 3, .. })
        ));
    }
}
