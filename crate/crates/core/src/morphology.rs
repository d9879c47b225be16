//! 2D binary morphology on axial slices (`w * h`, x fastest).
//!
//! Pixels outside the image are treated as background.

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<bool>,
}

impl Plane {
    pub fn new(w: usize, h: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), w * h, "plane data length");
        Self { w, h, data }
    }

    pub fn empty(w: usize, h: usize) -> Self {
        Self::new(w, h, vec![false; w * h])
    }

    #[inline]
    pub fn get(&self, x: isize, y: isize) -> bool {
        if x < 0 || y < 0 || x >= self.w as isize || y >= self.h as isize {
            false
        } else {
            self.data[x as usize + self.w * y as usize]
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[x + self.w * y] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Plane) -> Plane {
        Plane::new(
            self.w,
            self.h,
            self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        )
    }

    /// Dilation by a `(2r+1)²` square (Chebyshev ball of radius `r`).
    pub fn dilate(&self, r: usize) -> Plane {
        self.square_filter(r, true)
    }

    /// Erosion by a `(2r+1)²` square; outside pixels count as background.
    pub fn erode(&self, r: usize) -> Plane {
        self.square_filter(r, false)
    }

    /// Closing with the 3x3 square.
    pub fn close(&self) -> Plane {
        self.dilate(1).erode(1)
    }

    // Separable max (dilate) / min (erode) filter.
    fn square_filter(&self, r: usize, dilate: bool) -> Plane {
        let (w, h) = (self.w, self.h);
        let r = r as isize;
        // dilate: any set in the window; erode: all set
        let mut rows = vec![false; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut hits = (-r..=r).map(|d| self.get(x + d, y));
                rows[x as usize + w * y as usize] = if dilate { hits.any(|b| b) } else { hits.all(|b| b) };
            }
        }
        let rows = Plane::new(w, h, rows);
        let mut out = vec![false; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut hits = (-r..=r).map(|d| rows.get(x, y + d));
                out[x as usize + w * y as usize] = if dilate { hits.any(|b| b) } else { hits.all(|b| b) };
            }
        }
        Plane::new(w, h, out)
    }

    /// Neighbours P2..P9, clockwise from north (`y - 1`).
    #[inline]
    fn ring(&self, x: usize, y: usize) -> [bool; 8] {
        let (x, y) = (x as isize, y as isize);
        [
            self.get(x, y - 1),
            self.get(x + 1, y - 1),
            self.get(x + 1, y),
            self.get(x + 1, y + 1),
            self.get(x, y + 1),
            self.get(x - 1, y + 1),
            self.get(x - 1, y),
            self.get(x - 1, y - 1),
        ]
    }

    /// One two-pass boundary-peeling iteration. A pixel is removed only when
    /// it has 2..=6 neighbours and exactly one background-to-foreground
    /// transition around it, so endpoints and connectivity are kept.
    pub fn thin_once(&self) -> Plane {
        let mut cur = self.clone();
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..cur.h {
                for x in 0..cur.w {
                    if !cur.data[x + cur.w * y] {
                        continue;
                    }
                    let p = cur.ring(x, y);
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (n, e, s, w) = (p[0], p[2], p[4], p[6]);
                    let keep = if pass == 0 {
                        (n && e && s) || (e && s && w)
                    } else {
                        (n && e && w) || (n && s && w)
                    };
                    if !keep {
                        remove.push(x + cur.w * y);
                    }
                }
            }
            for i in remove {
                cur.data[i] = false;
            }
        }
        cur
    }

    /// Thins until nothing changes.
    pub fn thin(&self) -> Plane {
        let mut cur = self.clone();
        loop {
            let next = cur.thin_once();
            if next == cur {
                return cur;
            }
            cur = next;
        }
    }

    /// Top-left corners of fully set 2x2 blocks.
    pub fn solid_2x2_blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h.saturating_sub(1) {
            for x in 0..self.w.saturating_sub(1) {
                let (xi, yi) = (x as isize, y as isize);
                if self.get(xi, yi) && self.get(xi + 1, yi) && self.get(xi, yi + 1) && self.get(xi + 1, yi + 1) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Whether deleting a set pixel leaves the 8-connectivity of its
    /// neighbourhood intact.
    fn is_simple(&self, x: usize, y: usize) -> bool {
        let p = self.ring(x, y);
        let four_background = !p[0] || !p[2] || !p[4] || !p[6];
        if !four_background {
            return false;
        }
        // 8-connected components among the ring neighbours: consecutive ring
        // positions always touch; two edge neighbours also touch diagonally.
        let touches = |i: usize, j: usize| {
            let d = (i + 8 - j) % 8;
            d == 1 || d == 7 || (i.is_multiple_of(2) && j.is_multiple_of(2) && (d == 2 || d == 6))
        };
        let mut seen = [false; 8];
        let mut components = 0;
        for start in 0..8 {
            if !p[start] || seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                for j in 0..8 {
                    if p[j] && !seen[j] && touches(i, j) {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        components == 1
    }

    /// Removes pixels until no solid 2x2 block remains, preferring pixels
    /// whose removal keeps connectivity.
    pub fn break_2x2_blocks(&self) -> Plane {
        let mut cur = self.clone();
        while let Some(&(x, y)) = cur.solid_2x2_blocks().first() {
            let cands = [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)];
            let pick = cands
                .iter()
                .copied()
                .find(|&(cx, cy)| cur.is_simple(cx, cy))
                .unwrap_or(cands[0]);
            cur.set(pick.0, pick.1, false);
        }
        cur
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(rows: &[&str]) -> Plane {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        Plane::new(w, h, data)
    }

    #[test]
    fn dilation_is_chebyshev() {
        let mut p = Plane::empty(7, 7);
        p.set(3, 3, true);
        let d = p.dilate(2);
        for y in 0..7isize {
            for x in 0..7isize {
                let cheb = (x - 3).abs().max((y - 3).abs());
                assert_eq!(d.get(x, y), cheb <= 2);
            }
        }
        assert_eq!(d.erode(2), p);
    }

    #[test]
    fn closing_fills_single_pixel_gap() {
        let p = plane(&["......", ".####.", ".#.##.", ".####.", "......"]);
        let c = p.close();
        assert!(c.get(2, 2));
        assert_eq!(c.count(), 12);
    }

    #[test]
    fn thinning_keeps_lines_and_points() {
        let line = plane(&[".......", ".#####.", "......."]);
        assert_eq!(line.thin(), line);
        let diag = plane(&["#...", ".#..", "..#.", "...#"]);
        assert_eq!(diag.thin(), diag);
        let dot = plane(&["...", ".#.", "..."]);
        assert_eq!(dot.thin(), dot);
    }

    #[test]
    fn thinning_a_rectangle_leaves_a_thin_connected_core() {
        let mut p = Plane::empty(12, 7);
        for y in 1..6 {
            for x in 1..11 {
                p.set(x, y, true);
            }
        }
        let t = p.thin();
        assert!(t.count() > 0);
        assert!(t.solid_2x2_blocks().is_empty());
        assert!(t.data.iter().zip(&p.data).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn simple_point_classification() {
        // centre pixel bridges left and right halves: not simple
        let bridge = plane(&["#..", "###", "..#"]);
        assert!(!bridge.is_simple(1, 1));
        let corner = plane(&["##.", "##.", "..."]);
        assert!(corner.is_simple(1, 1));
        assert!(corner.is_simple(0, 0));
    }

    #[test]
    fn block_breaking_removes_every_2x2() {
        let p = plane(&["####", "####", "####"]);
        let out = p.break_2x2_blocks();
        assert!(out.solid_2x2_blocks().is_empty());
        assert!(out.count() > 0);
    }
}
