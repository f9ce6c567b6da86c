use serde::{Deserialize, Serialize};

/// Centripetal-free (uniform) Catmull-Rom curve through 2-D control points,
/// stored as a dense polyline with cumulative arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spline2 {
    pub control: Vec<[f64; 2]>,
    samples: Vec<[f64; 2]>,
    arc: Vec<f64>,
}

const SAMPLES_PER_SEGMENT: usize = 32;

impl Spline2 {
    /// Needs at least two control points; end segments reuse the end points
    /// as phantom neighbours.
    pub fn new(control: Vec<[f64; 2]>) -> Self {
        assert!(control.len() >= 2, "a spline needs two control points");
        let n = control.len();
        let at = |i: isize| control[i.clamp(0, n as isize - 1) as usize];
        let mut samples = Vec::with_capacity((n - 1) * SAMPLES_PER_SEGMENT + 1);
        for seg in 0..n - 1 {
            let (p0, p1, p2, p3) = (at(seg as isize - 1), at(seg as isize), at(seg as isize + 1), at(seg as isize + 2));
            for k in 0..SAMPLES_PER_SEGMENT {
                let t = k as f64 / SAMPLES_PER_SEGMENT as f64;
                samples.push(catmull_rom(p0, p1, p2, p3, t));
            }
        }
        samples.push(control[n - 1]);
        let mut arc = Vec::with_capacity(samples.len());
        let mut acc = 0.0;
        arc.push(0.0);
        for w in samples.windows(2) {
            acc += dist(w[0], w[1]);
            arc.push(acc);
        }
        Self { control, samples, arc }
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let i = match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i.min(self.samples.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.samples.len() - 2),
        };
        let span = self.arc[i + 1] - self.arc[i];
        let f = if span > 0.0 { (s - self.arc[i]) / span } else { 0.0 };
        (i, f)
    }

    /// Point at arc length `s` (clamped to the curve).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let (i, f) = self.locate(s);
        let (a, b) = (self.samples[i], self.samples[i + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    /// Heading of the tangent at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, _) = self.locate(s);
        let (a, b) = (self.samples[i], self.samples[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    pub fn segments(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        self.samples.windows(2).map(|w| (w[0], w[1]))
    }

    /// Euclidean distance from `p` to the polyline.
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        self.segments()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }
}

fn catmull_rom(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], t: f64) -> [f64; 2] {
    let t2 = t * t;
    let t3 = t2 * t;
    let mut out = [0.0; 2];
    for k in 0..2 {
        out[k] = 0.5
            * (2.0 * p1[k]
                + (-p0[k] + p2[k]) * t
                + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * t2
                + (-p0[k] + 3.0 * p1[k] - 3.0 * p2[k] + p3[k]) * t3);
    }
    out
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub(crate) fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line() {
        let s = Spline2::new(vec![[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]]);
        assert!((s.length() - 20.0).abs() < 1e-9);
        let p = s.point_at(7.5);
        assert!((p[0] - 7.5).abs() < 1e-9 && p[1].abs() < 1e-12);
        assert!(s.heading_at(3.0).abs() < 1e-12);
        assert!((s.distance_to([5.0, 2.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn passes_through_control_points() {
        let ctrl = vec![[0.0, 0.0], [5.0, 3.0], [10.0, -1.0], [15.0, 2.0]];
        let s = Spline2::new(ctrl.clone());
        for c in ctrl {
            assert!(s.distance_to(c) < 1e-9);
        }
    }
}
