use serde::{Deserialize, Serialize};

use crate::maps::Mask;

/// Axis-aligned pixel box, half-open on the max side: `x0 <= x < x1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [usize; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x1 > x0 && y1 > y0, "degenerate box");
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Tight box of all foreground pixels, `None` for an empty mask.
    pub fn tight(mask: &Mask) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) {
                    b = Some(match b {
                        None => BBox::new(x, y, x + 1, y + 1),
                        Some(b) => BBox {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x + 1),
                            y1: b.y1.max(y + 1),
                        },
                    });
                }
            }
        }
        b
    }
}

/// Intersection over union of two boxes on the pixel grid.
pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let ih = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Box IoU where a missing prediction scores zero.
pub fn iou_opt(pred: Option<&BBox>, gt: &BBox) -> f64 {
    pred.map_or(0.0, |p| iou_box(p, gt))
}

/// Intersection over union of two masks. Two empty masks score 0.
pub fn iou_mask(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Tight box of the largest 8-connected component. Ties go to the component
/// whose first pixel comes earlier in raster order.
pub fn mask_to_bbox(mask: &Mask) -> Option<BBox> {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![false; h * w];
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || label[start] {
            continue;
        }
        label[start] = true;
        stack.push(start);
        let mut size = 0;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            size += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && !label[q] {
                        label[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if best.as_ref().is_none_or(|(s, _)| size > *s) {
            best = Some((size, BBox { x0, y0, x1, y1 }));
        }
    }
    best.map(|b| b.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        Mask::new(h, w, data).unwrap()
    }

    #[test]
    fn full_and_single_pixel() {
        assert_eq!(mask_to_bbox(&Mask::full(5, 7)), Some(BBox::new(0, 0, 7, 5)));
        let mut m = Mask::empty(8, 8);
        m.set(4, 3, true);
        assert_eq!(mask_to_bbox(&m), Some(BBox::new(3, 4, 4, 5)));
        assert_eq!(mask_to_bbox(&Mask::empty(3, 3)), None);
    }

    #[test]
    fn largest_component_wins() {
        let m = mask_from(&[
            "##.....",
            "###....",
            ".......",
            "...###.",
            "...###.",
            "...###.",
        ]);
        assert_eq!(mask_to_bbox(&m), Some(BBox::new(3, 3, 6, 6)));
    }

    #[test]
    fn diagonal_pixels_connect() {
        let m = mask_from(&["#..", ".#.", "..#", "##."]);
        // 8-connectivity joins the diagonal with the bottom-left pair: 5 pixels
        assert_eq!(mask_to_bbox(&m), Some(BBox::new(0, 0, 3, 4)));
    }

    #[test]
    fn equal_components_prefer_raster_first() {
        let m = mask_from(&["##..##", "......"]);
        assert_eq!(mask_to_bbox(&m), Some(BBox::new(0, 0, 2, 1)));
    }

    #[test]
    fn box_iou_examples() {
        let a = BBox::new(0, 0, 2, 2);
        assert_eq!(iou_box(&a, &a), 1.0);
        assert_eq!(iou_box(&a, &BBox::new(2, 2, 4, 4)), 0.0);
        assert!((iou_box(&a, &BBox::new(1, 1, 3, 3)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou_opt(None, &a), 0.0);
    }

    #[test]
    fn mask_iou_examples() {
        let a = mask_from(&["##..", "##.."]);
        let b = mask_from(&["..##", "..##"]);
        let c = mask_from(&[".##.", ".##."]);
        assert_eq!(iou_mask(&a, &a), 1.0);
        assert_eq!(iou_mask(&a, &b), 0.0);
        assert!((iou_mask(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn box_serializes_as_array() {
        let s = serde_json::to_string(&BBox::new(1, 2, 3, 4)).unwrap();
        assert_eq!(s, "[1,2,3,4]");
    }
}
