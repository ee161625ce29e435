//! Binary morphology and connected-component labelling on small masks.

use std::collections::VecDeque;

/// A dense binary mask with an integer origin in frame coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub origin_x: i64,
    pub origin_y: i64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(origin_x: i64, origin_y: i64, width: usize, height: usize) -> Self {
        Self {
            origin_x,
            origin_y,
            width,
            height,
            data: vec![false; width * height],
        }
    }

    /// Builds a mask covering `points` with `margin` empty cells on each side.
    pub fn from_points(points: impl IntoIterator<Item = (i64, i64)> + Clone, margin: usize) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for (x, y) in points.clone() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if x0 > x1 {
            return Self::new(0, 0, 0, 0);
        }
        let m = margin as i64;
        let mut mask = Self::new(
            x0 - m,
            y0 - m,
            (x1 - x0 + 1 + 2 * m) as usize,
            (y1 - y0 + 1 + 2 * m) as usize,
        );
        for (x, y) in points {
            mask.set(x, y, true);
        }
        mask
    }

    #[inline]
    fn local(&self, x: i64, y: i64) -> Option<usize> {
        let lx = x - self.origin_x;
        let ly = y - self.origin_y;
        if lx < 0 || ly < 0 || lx >= self.width as i64 || ly >= self.height as i64 {
            None
        } else {
            Some(ly as usize * self.width + lx as usize)
        }
    }

    /// Value at frame coordinates; outside the mask reads as `false`.
    #[inline]
    pub fn get(&self, x: i64, y: i64) -> bool {
        self.local(x, y).is_some_and(|i| self.data[i])
    }

    #[inline]
    pub fn set(&mut self, x: i64, y: i64, value: bool) {
        if let Some(i) = self.local(x, y) {
            self.data[i] = value;
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Set cells in frame coordinates, row-major.
    pub fn points(&self) -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for ly in 0..self.height {
            for lx in 0..self.width {
                if self.data[ly * self.width + lx] {
                    out.push((self.origin_x + lx as i64, self.origin_y + ly as i64));
                }
            }
        }
        out
    }

    /// Dilation with a square `(2r+1)x(2r+1)` structuring element. The result
    /// grows by `r` on every side so nothing is clipped.
    pub fn dilate(&self, r: usize) -> Mask {
        let ri = r as i64;
        let mut out = Mask::new(
            self.origin_x - ri,
            self.origin_y - ri,
            self.width + 2 * r,
            self.height + 2 * r,
        );
        for (x, y) in self.points() {
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    out.set(x + dx, y + dy, true);
                }
            }
        }
        out
    }

    /// Erosion with a 3x3 square structuring element.
    pub fn erode3(&self) -> Mask {
        let mut out = Mask::new(self.origin_x, self.origin_y, self.width, self.height);
        for (x, y) in self.points() {
            let keep = (-1..=1).all(|dy| (-1..=1).all(|dx| self.get(x + dx, y + dy)));
            if keep {
                out.set(x, y, true);
            }
        }
        out
    }

    /// 4-connected components, each as a row-major list of frame
    /// coordinates, ordered by their first cell in scan order.
    pub fn components(&self) -> Vec<Vec<(i64, i64)>> {
        let mut seen = vec![false; self.data.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.data.len() {
            if !self.data[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut comp = Vec::new();
            while let Some(i) = queue.pop_front() {
                let (lx, ly) = (i % self.width, i / self.width);
                comp.push((self.origin_x + lx as i64, self.origin_y + ly as i64));
                let mut visit = |j: usize| {
                    if self.data[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if lx > 0 {
                    visit(i - 1);
                }
                if lx + 1 < self.width {
                    visit(i + 1);
                }
                if ly > 0 {
                    visit(i - self.width);
                }
                if ly + 1 < self.height {
                    visit(i + self.width);
                }
            }
            comp.sort_by_key(|&(x, y)| (y, x));
            out.push(comp);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_of_single_point_is_square() {
        let m = Mask::from_points([(10, 10)], 0);
        let d = m.dilate(2);
        assert_eq!(d.count(), 25);
        assert!(d.get(8, 8) && d.get(12, 12));
        assert!(!d.get(13, 10));
    }

    #[test]
    fn erosion_shrinks_square_to_center() {
        let pts: Vec<_> = (0..3).flat_map(|y| (0..3).map(move |x| (x, y))).collect();
        let m = Mask::from_points(pts, 1);
        let e = m.erode3();
        assert_eq!(e.points(), vec![(1, 1)]);
    }

    #[test]
    fn components_use_four_connectivity() {
        // diagonal neighbours are separate components
        let m = Mask::from_points([(0, 0), (1, 1), (2, 1)], 0);
        let comps = m.components();
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0], vec![(0, 0)]);
        assert_eq!(comps[1], vec![(1, 1), (2, 1)]);
    }

    #[test]
    fn dumbbell_splits_under_erosion() {
        let mut pts = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                pts.push((x, y));
                pts.push((x + 6, y));
            }
        }
        pts.push((5, 2));
        let m = Mask::from_points(pts, 1);
        assert_eq!(m.components().len(), 1);
        assert_eq!(m.erode3().components().len(), 2);
    }
}
